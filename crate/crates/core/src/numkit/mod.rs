//! Matrix numerics, seeded randomness, and the fitting routines the rest of
//! the crate is built on. Everything is f64; persistence formats narrow to
//! f32 at the file boundary only.

mod linalg;
mod matrix;
mod rng;
mod sampling;

pub use linalg::{
    column_means, determinant, fit_linear_map, inverse, lstsq, r_squared,
    singular_value_bounds, solve_least_squares, RANK_TOL,
};
pub use matrix::{dot, norm, Matrix};
pub use rng::RngStream;
pub use sampling::{
    haar_orthogonal, haar_special_orthogonal, qr_factor, sample_gaussian_matrix,
    sample_gl_rejection, standard_normal, unit_sphere_sample, GL_DET_HIGH, GL_DET_LOW,
    GL_INV_RESIDUAL, REJECTION_CAP,
};
