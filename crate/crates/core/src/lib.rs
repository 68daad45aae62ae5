//! Continual learning with isolated low-rank adapters on a frozen encoder and
//! per-layer routers trained from a small episodic memory.

pub mod adapter;
pub mod backbone;
pub mod composer;
pub mod data;
pub mod error;
pub mod harness;
pub mod head;
pub mod io;
pub mod memory;
pub mod rng;
pub mod router;
pub mod tensor;

pub use error::{Error, Result};
