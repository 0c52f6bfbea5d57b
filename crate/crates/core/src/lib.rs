//! Discrete-event simulation of heralded entanglement between heterogeneous
//! quantum memories: Yb neutral atoms and superconducting transmons linked
//! over telecom fiber.

pub mod error;
pub mod experiment;
pub mod memory;
pub mod photonic;
pub mod protocol;
pub mod sim;
pub mod state;
pub mod tomography;

pub use error::{Error, Result};
