//! Activation-centric low-rank projection for compressing GEMM layers.
//!
//! GEMM input activations `X` are projected onto a static, calibrated
//! orthonormal basis `P`, so `WᵀX ≈ Wᵀ(PPᵀX) = (PᵀW)ᵀ(PᵀX)`. Training keeps
//! `W` whole; inference stores only `P` and the folded `PᵀW`.

pub mod bench;
pub mod calib;
pub mod error;
pub mod fidelity;
pub mod iofmt;
pub mod linalg;
pub mod pipeline;
pub mod projector;
pub mod toymodel;

pub use calib::{CandidateKind, CorrAccumulator};
pub use error::{EspaceError, Result};
pub use linalg::{Matrix, OrderingMode};
pub use projector::Projection;
pub use toymodel::{LayerId, Model, ModelConfig};
