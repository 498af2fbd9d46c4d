//! Identification of the diffusion coefficient in −∇·(a∇u) = f from noisy
//! observations of u, implemented four ways (Tikhonov FEM, hybrid network/FEM,
//! mixed least squares, strong-form residual fitting), plus linear-multistep
//! recovery of dynamics from trajectories and a convergence-study harness.

// Indexed loops over parallel arrays and `!(x > 0)` NaN guards are the
// clearest forms in the numerical kernels; loss functions take their full
// problem context by design.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::type_complexity)]
#![allow(clippy::too_many_arguments)]

mod cli;
pub mod error;
pub mod fem;
pub mod field;
pub mod lmm;
pub mod mesh;
pub mod nn;
pub mod recon_fem;
pub mod recon_nn;
pub mod study;
pub mod synth;

pub use error::{Error, Result};

/// Entry point used by the `difc` binary; returns the process exit code.
pub fn cli_main() -> i32 {
    cli::main()
}
