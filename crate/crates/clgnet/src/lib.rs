//! Undersampled-MRI reconstruction at desk scale: a dual spatial/wavelet
//! branch network built on spatial-and-Fourier layers, trained with an L1
//! plus contrastive objective against synthetic k-space data.
//!
//! The crate is self-contained: tensors and reverse-mode differentiation
//! ([`tensor`]), spectral transforms ([`spectral`]), the network ([`layers`]),
//! losses ([`losses`]), the k-space simulator and metrics ([`mrisim`]), the
//! Adam training loop ([`trainer`]), and runnable verification suites
//! ([`selfcheck`]).

pub mod error;
pub mod layers;
pub mod losses;
pub mod mrisim;
pub mod rng;
pub mod selfcheck;
pub mod spectral;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Cap rayon's worker count from the `CLGNET_THREADS` environment variable.
/// No-op when the variable is unset, invalid, or a pool already exists.
pub fn configure_threads_from_env() {
    if let Ok(s) = std::env::var("CLGNET_THREADS") {
        if let Ok(n) = s.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
