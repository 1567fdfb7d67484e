//! Dense matrices, keyed random streams and the reference solvers used both
//! as building blocks and as test oracles.

pub mod io;
mod linalg;
mod matrix;
pub mod rng;

pub use linalg::{
    cholesky, conjugate_gradient, solve_dense, solve_tridiagonal, solve_tridiagonal_or_dense, CgOutcome,
    SymBandMatrix, PIVOT_EPS,
};
pub(crate) use linalg::thomas_in_place;
pub use matrix::{matmul_exact, Matrix};
pub use rng::{Purpose, SeededRng, StreamId};
