//! Shared fixtures for the benchmarks.

use bleedseg_core::nn::ConvKernel;
use bleedseg_core::{Scalar, Shape, Volume};

/// Deterministic pseudo-random volume with values in [-1, 1).
pub fn volume<T: Scalar>(shape: Shape, salt: u64) -> Volume<T> {
    let data = (0..shape.len() as u64)
        .map(|i| T::from_f64(bleedseg_core::rng::uniform(salt, i) * 2.0 - 1.0))
        .collect();
    Volume::from_vec(shape, data).expect("shape and data agree")
}

/// Kernel with small pseudo-random weights.
pub fn kernel<T: Scalar>(out_channels: usize, in_channels: usize, k: usize, salt: u64) -> ConvKernel<T> {
    let mut kern = ConvKernel::zeros(out_channels, in_channels, k).expect("valid kernel shape");
    for (i, w) in kern.weights.iter_mut().enumerate() {
        *w = T::from_f64((bleedseg_core::rng::uniform(salt, i as u64) - 0.5) * 0.2);
    }
    kern
}
