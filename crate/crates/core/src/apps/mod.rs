//! Application drivers built on the dot-product engine.

pub mod circuit;
pub mod cwt;
pub mod kmeans;

pub use circuit::{build_wordline_system, solve_circuit_hw, CircuitReport, WordLineCircuit};
pub use cwt::{cwt_exact, cwt_hw, normalized_correlation, two_tone_chirp, MorletKernelBank};
pub use kmeans::{kmeans_exact, kmeans_hw, CenterUpdate, KMeansParams, KMeansState};
