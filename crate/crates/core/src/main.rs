fn main() { std::process::exit(epruner::cli::main()) }
