//! Dense linear algebra, seeded random streams and a reverse-mode tape.

mod linalg;
mod rng;
mod tape;

pub use linalg::{cholesky_solve, dot, gemm, Cholesky, Matrix, Vector};
pub use rng::SeededRng;
pub use tape::{sigmoid, Gradients, Tape, Var};
