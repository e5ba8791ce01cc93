//! Minimal neural-network building blocks for 3D grids.

pub mod adam;
pub mod conv;
pub mod ops;

pub use adam::{Adam, AdamConfig};
pub use conv::ConvLayer;

/// Flushes subnormal floats to zero on the calling thread.
///
/// Late in training many activations and gradients decay into the subnormal
/// range, where x86 arithmetic is several times slower.
pub fn flush_subnormals() {
    #[cfg(target_arch = "x86_64")]
    #[allow(deprecated)]
    // SAFETY: only sets the FTZ and DAZ bits of this thread's MXCSR.
    unsafe {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        _mm_setcsr(_mm_getcsr() | 0x8040);
    }
}
