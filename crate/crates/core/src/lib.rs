//! Packed leveled-HE CNN inference and TEE-assisted encrypted refining.
//!
//! The crate is organised bottom-up: [`lhe`] is the slot-vector simulator,
//! [`meter`] counts primitives, [`geometry`] and [`packing`] fix the
//! ciphertext layouts, [`forward`] and [`backward`] propagate through them,
//! [`tee`] holds the only secret key, and [`refine`] wires the pieces into
//! inference and refining sessions. [`oracle`] is a plaintext reference.

#![allow(clippy::needless_range_loop)]

pub mod backward;
pub mod config;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod lhe;
pub mod meter;
pub mod oracle;
pub mod packing;
pub mod plan;
pub mod refine;
pub mod selftest;
pub mod tee;

pub use error::{Error, LheError, Result};
pub use lhe::{Ciphertext, Evaluator, KeyContext, KeyId, LheParams, Plaintext, PublicKey};
pub use meter::{CostTable, OpKind, OpMeter, OpReport, OpTuple};
