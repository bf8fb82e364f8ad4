//! Unnormalized discrete Fourier transforms.
//!
//! Power-of-two lengths go through an iterative radix-2 Cooley-Tukey
//! transform; any other length falls back to the O(n²) direct sum.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DftPath {
    /// Radix-2 when the length allows it, direct sum otherwise.
    Auto,
    /// Always the direct O(n²) sum.
    Naive,
}

/// A 2-D complex spectrum of shape `(h, w)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub h: usize,
    pub w: usize,
    pub data: Vec<Complex64>,
}

impl Spectrum {
    pub fn at(&self, y: usize, x: usize) -> Complex64 {
        self.data[y * self.w + x]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

fn bit_reverse_permute(buf: &mut [Complex64]) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    if bits == 0 {
        return;
    }
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
}

/// In-place radix-2 transform. `buf.len()` must be a power of two.
/// `inverse` flips the twiddle sign; no 1/n scaling is applied.
pub fn fft_radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "radix-2 FFT needs a power-of-two length");
    bit_reverse_permute(buf);
    let sign = if inverse { 1.0 } else { -1.0 };
    let table: Vec<Complex64> = (0..n / 2)
        .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64))
        .collect();
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let tw = table[k * stride];
                let a = buf[start + k];
                let b = buf[start + k + half] * tw;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

/// Direct O(n²) transform.
pub fn dft_naive(input: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = input.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let table: Vec<Complex64> = (0..n)
        .map(|m| Complex64::from_polar(1.0, sign * 2.0 * PI * m as f64 / n as f64))
        .collect();
    (0..n)
        .map(|k| {
            input
                .iter()
                .enumerate()
                .map(|(j, &x)| x * table[(k * j) % n])
                .sum()
        })
        .collect()
}

pub fn dft1(buf: &mut [Complex64], inverse: bool, path: DftPath) {
    if path == DftPath::Auto && buf.len().is_power_of_two() {
        fft_radix2(buf, inverse);
    } else {
        let out = dft_naive(buf, inverse);
        buf.copy_from_slice(&out);
    }
}

/// Separable 2-D transform of a complex `(h, w)` buffer, in place.
pub fn dft2_complex(data: &mut [Complex64], h: usize, w: usize, inverse: bool, path: DftPath) {
    assert_eq!(data.len(), h * w);
    for row in data.chunks_mut(w) {
        dft1(row, inverse, path);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        dft1(&mut col, inverse, path);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
}

/// Forward unnormalized 2-D DFT of a real `(H, W)` tensor.
pub fn dft2(input: &Tensor) -> Result<Spectrum> {
    dft2_with(input, DftPath::Auto)
}

pub fn dft2_with(input: &Tensor, path: DftPath) -> Result<Spectrum> {
    if input.rank() != 2 {
        return shape_err(format!("dft2 expects (H, W), got {:?}", input.shape()));
    }
    let (h, w) = (input.dim(0), input.dim(1));
    let mut data: Vec<Complex64> = input.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    dft2_complex(&mut data, h, w, false, path);
    if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(crate::error::Error::NonFinite("dft2".into()));
    }
    Ok(Spectrum { h, w, data })
}
