//! Linear-time channel representation learning for MIMO-OFDM CSI.
//!
//! A from-scratch selective state-space (Mamba-style) backbone over
//! adaptively tokenized channel matrices, with masked self-supervised
//! pretraining, four downstream task heads, and a CPU benchmark harness
//! comparing the backbone's scaling against a reference self-attention
//! encoder.
//!
//! Start with the runnable programs in `examples/`; the `csi-mamba` binary
//! wraps the same library behind `generate`, `pretrain`, `task`, and `bench`
//! subcommands.

pub mod error;
pub mod numerics;
pub mod scalar;

pub use error::{Error, Result};
pub use numerics::Tensor;
pub use scalar::Scalar;
