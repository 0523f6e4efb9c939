//! Heat dissipation flow matching.
//!
//! A flow-matching model whose probability path interpolates between Gaussian
//! noise and a heat-dissipated (blurred) copy of the data:
//!
//! ```text
//! u_t = H_{-log t}(x),      z_t = t u_t + (1 - t) e,
//! v*(z_t, t) = (u_t - z_t) / s(t) - Δu_t,
//! ```
//!
//! where `H_τ` is the Neumann heat semigroup, diagonal in the orthonormal DCT
//! basis, and `s(t) = max(1 - t, ε)`.
//!
//! Modules, bottom-up:
//!
//! - [`spectral`]: DCT transforms, Laplacian eigenvalues, the calibrated heat operator.
//! - [`path`]: path samples and target velocities for the HDFM, noise-only and pure-blur schemes.
//! - [`neural`]: a small MLP with x/v/ε heads, hand-written backprop, LayerSync and Adam training.
//! - [`sampler`]: Euler/Heun probability-flow integration, interval CFG and adaptive β fusion.
//! - [`toyverse`]: the spiral-in-D-dimensions experiment.
//! - [`diagnostics`]: frequency-ratio transport, trajectory straightness, ill-posedness contrast.
//! - [`checks`]: the invariant suite run by `hdfm check`.
//! - [`io`]: the `HDT1` tensor format, PGM/PPM images and checkpoints.

pub mod checks;
pub mod diagnostics;
pub mod error;
pub mod field;
pub mod io;
pub mod neural;
pub mod par;
pub mod path;
pub mod sampler;
pub mod spectral;
pub mod toyverse;

pub use error::{Error, Result};
pub use field::{GridField, Layout};
pub use neural::{Head, MlpConfig, MlpModel, TrainConfig};
pub use par::Exec;
pub use path::{NoiseConfig, PathKind, PathSample};
pub use sampler::{SamplerConfig, Solver, Trajectory};
pub use spectral::{EigenGrid, HeatSchedule, SpectralField};

/// Seeded generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's generator from a seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a stream index.
///
/// SplitMix64 finalizer; distinct indices give decorrelated seeds so that
/// per-sample or per-cell generators stay reproducible under any scheduling.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
