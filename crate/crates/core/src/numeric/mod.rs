//! Low-level kernels shared by every other module.

pub mod conv;
pub mod fft;
pub mod pool;
pub mod shuffle;

pub use conv::{conv2d, Conv2dKernel};
pub use fft::{dft2, Spectrum};
pub use pool::global_avg_pool;
pub use shuffle::{pixel_shuffle, pixel_unshuffle};
