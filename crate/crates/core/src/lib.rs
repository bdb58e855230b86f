//! Deterministic bfloat16 training core with instruction-level fault injection.
//!
//! Everything in this crate is `no_std` (with `alloc`): software bfloat16, a GEMM
//! whose operand reads pass through an optional fault hook, a tiny decoder-only
//! transformer with a hand-written backward pass, AdamW with global norm
//! clipping, a harmful-update detector and the snapshot/recompute guard.
//! File formats, corpora on disk and the CLI live in the `sdc-forge` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod bf16;
pub mod data;
pub mod detector;
pub mod error;
pub mod fault;
pub mod gemm;
pub mod guard;
pub mod kernels;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod telemetry;
pub mod trainer;

pub use bf16::Bf16;
pub use error::Error;
pub use gemm::{gemm, GemmSiteId, Operand, Pass};
pub use matrix::Bf16Matrix;

pub type Result<T, E = Error> = core::result::Result<T, E>;
