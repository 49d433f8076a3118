//! Dense linear algebra and the reverse-mode tape used for backpropagation
//! through policy networks and wealth rollouts.

mod dense;
mod tape;

pub use dense::{
    cholesky_factor, cholesky_solve, lu_solve, solve_spd, DenseLu, SpdMatrix, PIVOT_REL_TOL,
};
pub use tape::{backward_sweep, column, row, Adjoints, Matrix, Tape, Var, LEAKY_SLOPE};
