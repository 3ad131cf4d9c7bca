//! Structured filter pruning with adaptive exemplar filters.
//!
//! Each prunable conv layer's filters are treated as points in weight space
//! and clustered by affinity propagation; the cluster exemplars are the
//! filters that survive. The number of survivors is not fixed up front: it
//! follows from the weights and a single strength knob `beta`.
//!
//! The crate is organized the way the pipeline runs:
//!
//! * [`tensor`]: weight tensors and their one-row-per-filter view;
//! * [`affinity`]: similarities, message passing and exemplar extraction;
//! * [`arch`]: network topologies (descriptor files and built-ins);
//! * [`plan`]: per-layer selection and channel bookkeeping across layers;
//! * [`init`]: weights for the pruned network under four strategies;
//! * [`metrics`]: channel, FLOP and parameter counts;
//! * [`bundle`]: the on-disk tensor container.
//!
//! ```
//! use epruner::affinity::{select_exemplars, ApOptions};
//! use epruner::tensor::{flatten, Shape4, WeightTensor4D};
//!
//! // Four 1x1 filters over two input channels: two near-duplicate pairs.
//! let w = WeightTensor4D::new(
//!     "conv",
//!     Shape4::new(4, 2, 1, 1),
//!     vec![-2.0, -2.0, -1.9, -2.1, -4.0, -4.0, -3.9, -4.1],
//! )?;
//! let m = flatten(&w, None)?;
//! let res = select_exemplars(&m, 0.5, &ApOptions::default())?;
//! assert_eq!(res.exemplars.len(), 2);
//! assert_eq!(res.exemplar_of[0], res.exemplar_of[1]);
//! assert_eq!(res.exemplar_of[2], res.exemplar_of[3]);
//! # Ok::<(), epruner::Error>(())
//! ```

pub mod affinity;
pub mod arch;
pub mod bundle;
pub mod cli;
pub mod error;
pub mod init;
pub mod metrics;
pub mod plan;
pub mod tensor;

pub use error::{Error, Result};
