//! The guide under `book/src`, compiled so its snippets run as doc-tests.

#[doc = include_str!("../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../book/src/filters.md")]
pub mod filters {}
#[doc = include_str!("../../book/src/message-passing.md")]
pub mod message_passing {}
#[doc = include_str!("../../book/src/topologies.md")]
pub mod topologies {}
#[doc = include_str!("../../book/src/init.md")]
pub mod init {}
#[doc = include_str!("../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../book/src/cli.md")]
pub mod cli {}
