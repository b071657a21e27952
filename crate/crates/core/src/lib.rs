//! Score-decomposed diffusion sampling on per-block moment manifolds.
//!
//! The sampler splits every guidance vector at `x_t` into a tangent part
//! (content refinement, optimised on the manifold `M_t` with a min-norm
//! multi-objective step) and a normal part (denoising, used to move onto
//! the adjacent manifold `M_{t-1}`). Manifolds are products of per-block
//! "sphere in hyperplane" constraints built from the reference image's
//! perturbed first and second moments.
//!
//! Module map:
//! - [`schedule`]: VP noise schedule, forward kernel, ancestral step.
//! - [`manifold`]: block partition, moment manifolds, BAdaIN restriction,
//!   tangent/normal projections, adjacent map, low-pass filter.
//! - [`scores`]: analytic score models and the wire-protocol bridge client.
//! - [`energy`]: feature-space BAdaIN energy and its analytic gradient.
//! - [`moo`]: min-norm convex combination (closed form and Frank–Wolfe).
//! - [`sampler`]: on-manifold optimisation, adjacent transfer, full chain,
//!   ILVR baseline, PNI accounting.
//! - [`verify`]: Monte Carlo verification suites, SSIM, trace profiles.

pub mod energy;
pub mod error;
pub mod manifold;
pub mod moo;
pub mod sampler;
pub mod schedule;
pub mod scores;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Image;
