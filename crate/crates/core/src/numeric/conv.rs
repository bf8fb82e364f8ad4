//! 2-D cross-correlation with zero padding, plus its two adjoints.
//!
//! Inputs are single images laid out `(C, H, W)`; weights are
//! `(C_out, C_in / groups, k, k)`. Work is split over output channels and
//! each channel is reduced in a fixed loop order, so results do not depend
//! on the number of worker threads.

use rayon::prelude::*;

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Spatial geometry of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn same(k: usize) -> Self {
        Self {
            stride: 1,
            padding: (k - 1) / 2,
            groups: 1,
        }
    }

    pub fn out_extent(&self, n: usize, k: usize) -> Result<usize> {
        let padded = n + 2 * self.padding;
        if padded < k {
            return shape_err(format!("extent {n} (+2×{}) smaller than kernel {k}", self.padding));
        }
        Ok((padded - k) / self.stride + 1)
    }
}

/// A learned convolution: weights, bias and geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dKernel {
    pub weight: Tensor,
    pub bias: Tensor,
    pub geometry: ConvGeometry,
}

impl Conv2dKernel {
    pub fn new(weight: Tensor, bias: Tensor, geometry: ConvGeometry) -> Result<Self> {
        weight.expect_rank(4, "conv weight")?;
        let (co, k, k2) = (weight.dim(0), weight.dim(2), weight.dim(3));
        if k != k2 || k % 2 == 0 {
            return invalid(format!("kernel must be square with odd size, got {k}×{k2}"));
        }
        bias.expect_shape(&[co], "conv bias")?;
        if geometry.stride == 0 || geometry.groups == 0 || co % geometry.groups != 0 {
            return invalid(format!("bad geometry {geometry:?} for {co} output channels"));
        }
        Ok(Self {
            weight,
            bias,
            geometry,
        })
    }

    /// Zero-bias, stride-1, same-padded kernel.
    pub fn same(weight: Tensor) -> Result<Self> {
        let co = weight.dim(0);
        let k = weight.dim(2);
        Self::new(weight, Tensor::zeros(&[co]), ConvGeometry::same(k))
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.dim(2)
    }
}

pub fn conv2d(input: &Tensor, kernel: &Conv2dKernel) -> Result<Tensor> {
    conv2d_raw(input, &kernel.weight, Some(&kernel.bias), kernel.geometry)
}

struct Dims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn dims(input_shape: &[usize], weight_shape: &[usize], g: ConvGeometry) -> Result<Dims> {
    if input_shape.len() != 3 || weight_shape.len() != 4 {
        return shape_err(format!(
            "conv2d expects (C,H,W) input and 4-D weight, got {input_shape:?} / {weight_shape:?}"
        ));
    }
    let (cin, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (cout, cin_g, k) = (weight_shape[0], weight_shape[1], weight_shape[2]);
    if weight_shape[3] != k {
        return shape_err("conv2d kernel must be square");
    }
    if g.groups == 0 || g.stride == 0 {
        return shape_err("conv2d stride and groups must be positive");
    }
    if cin % g.groups != 0 || cout % g.groups != 0 || cin / g.groups != cin_g {
        return shape_err(format!(
            "conv2d channels: input {cin}, weight {weight_shape:?}, groups {}",
            g.groups
        ));
    }
    Ok(Dims {
        cin,
        h,
        w,
        cout,
        cin_g,
        cout_g: cout / g.groups,
        k,
        ho: g.out_extent(h, k)?,
        wo: g.out_extent(w, k)?,
    })
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `t`.
#[inline]
fn tap_range(t: usize, pad: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if pad > t { (pad - t).div_ceil(stride) } else { 0 };
    let hi = if n_in + pad > t {
        (n_in + pad - t).div_ceil(stride)
    } else {
        0
    };
    (lo.min(n_out), hi.min(n_out))
}

fn conv_channel(
    out: &mut [f64],
    co: usize,
    x: &[f64],
    wt: &[f64],
    bias: f64,
    d: &Dims,
    g: ConvGeometry,
) {
    out.fill(bias);
    let group = co / d.cout_g;
    let (s, p) = (g.stride, g.padding);
    for cig in 0..d.cin_g {
        let ci = group * d.cin_g + cig;
        let xc = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            let (oy0, oy1) = tap_range(ky, p, s, d.h, d.ho);
            for kx in 0..d.k {
                let wv = wt[((co * d.cin_g + cig) * d.k + ky) * d.k + kx];
                if wv == 0.0 {
                    continue;
                }
                let (ox0, ox1) = tap_range(kx, p, s, d.w, d.wo);
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - p;
                    let row = &xc[iy * d.w..(iy + 1) * d.w];
                    let orow = &mut out[oy * d.wo..(oy + 1) * d.wo];
                    if s == 1 {
                        let ix0 = ox0 + kx - p;
                        for (o, xv) in orow[ox0..ox1].iter_mut().zip(&row[ix0..]) {
                            *o += wv * xv;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            orow[ox] += wv * row[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

const PAR_THRESHOLD: usize = 1 << 14;

/// Cross-correlation of `input (C_in,H,W)` with `weight (C_out,C_in/groups,k,k)`.
pub fn conv2d_raw(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    g: ConvGeometry,
) -> Result<Tensor> {
    conv2d_impl(input, weight, bias, g, true)
}

/// Same as [`conv2d_raw`] but never leaves the calling thread.
pub fn conv2d_serial(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    g: ConvGeometry,
) -> Result<Tensor> {
    conv2d_impl(input, weight, bias, g, false)
}

fn conv2d_impl(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    g: ConvGeometry,
    parallel: bool,
) -> Result<Tensor> {
    let d = dims(input.shape(), weight.shape(), g)?;
    if let Some(b) = bias {
        b.expect_shape(&[d.cout], "conv2d bias")?;
    }
    let plane = d.ho * d.wo;
    let mut out = vec![0.0; d.cout * plane];
    let x = input.data();
    let wt = weight.data();
    let bias_of = |co: usize| bias.map_or(0.0, |b| b.data()[co]);
    let work = d.cout * plane * d.cin_g * d.k * d.k;
    if parallel && work >= PAR_THRESHOLD {
        out.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(co, o)| conv_channel(o, co, x, wt, bias_of(co), &d, g));
    } else {
        for (co, o) in out.chunks_mut(plane).enumerate() {
            conv_channel(o, co, x, wt, bias_of(co), &d, g);
        }
    }
    Tensor::new(&[d.cout, d.ho, d.wo], out)?.ensure_finite("conv2d")
}

/// Gradient of the conv output with respect to its input.
pub fn conv2d_grad_input(
    grad_out: &Tensor,
    weight: &Tensor,
    input_shape: &[usize],
    g: ConvGeometry,
) -> Result<Tensor> {
    let d = dims(input_shape, weight.shape(), g)?;
    grad_out.expect_shape(&[d.cout, d.ho, d.wo], "conv2d grad_out")?;
    let (s, p) = (g.stride, g.padding);
    let go = grad_out.data();
    let wt = weight.data();
    let mut gin = vec![0.0; d.cin * d.h * d.w];
    let per_channel = |ci: usize, gc: &mut [f64]| {
        let group = ci / d.cin_g;
        let cig = ci % d.cin_g;
        for cog in 0..d.cout_g {
            let co = group * d.cout_g + cog;
            let gplane = &go[co * d.ho * d.wo..(co + 1) * d.ho * d.wo];
            for ky in 0..d.k {
                let (oy0, oy1) = tap_range(ky, p, s, d.h, d.ho);
                for kx in 0..d.k {
                    let wv = wt[((co * d.cin_g + cig) * d.k + ky) * d.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = tap_range(kx, p, s, d.w, d.wo);
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        for ox in ox0..ox1 {
                            gc[iy * d.w + ox * s + kx - p] += wv * gplane[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    };
    let work = d.cout * d.ho * d.wo * d.cin_g * d.k * d.k;
    if work >= PAR_THRESHOLD {
        gin.par_chunks_mut(d.h * d.w)
            .enumerate()
            .for_each(|(ci, gc)| per_channel(ci, gc));
    } else {
        for (ci, gc) in gin.chunks_mut(d.h * d.w).enumerate() {
            per_channel(ci, gc);
        }
    }
    Tensor::new(input_shape, gin)
}

/// Gradient of the conv output with respect to its weight.
pub fn conv2d_grad_weight(
    grad_out: &Tensor,
    input: &Tensor,
    weight_shape: &[usize],
    g: ConvGeometry,
) -> Result<Tensor> {
    let d = dims(input.shape(), weight_shape, g)?;
    grad_out.expect_shape(&[d.cout, d.ho, d.wo], "conv2d grad_out")?;
    let (s, p) = (g.stride, g.padding);
    let go = grad_out.data();
    let x = input.data();
    let per_co = d.cin_g * d.k * d.k;
    let mut gw = vec![0.0; d.cout * per_co];
    let per_channel = |co: usize, gwc: &mut [f64]| {
        let group = co / d.cout_g;
        let gplane = &go[co * d.ho * d.wo..(co + 1) * d.ho * d.wo];
        for cig in 0..d.cin_g {
            let ci = group * d.cin_g + cig;
            let xc = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for ky in 0..d.k {
                let (oy0, oy1) = tap_range(ky, p, s, d.h, d.ho);
                for kx in 0..d.k {
                    let (ox0, ox1) = tap_range(kx, p, s, d.w, d.wo);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        for ox in ox0..ox1 {
                            acc += gplane[oy * d.wo + ox] * xc[iy * d.w + ox * s + kx - p];
                        }
                    }
                    gwc[(cig * d.k + ky) * d.k + kx] = acc;
                }
            }
        }
    };
    let work = d.cout * d.ho * d.wo * per_co;
    if work >= PAR_THRESHOLD {
        gw.par_chunks_mut(per_co)
            .enumerate()
            .for_each(|(co, c)| per_channel(co, c));
    } else {
        for (co, c) in gw.chunks_mut(per_co).enumerate() {
            per_channel(co, c);
        }
    }
    Tensor::new(weight_shape, gw)
}

/// Gradient of the conv output with respect to its bias.
pub fn conv2d_grad_bias(grad_out: &Tensor) -> Result<Tensor> {
    grad_out.expect_rank(3, "conv2d grad_out")?;
    let c = grad_out.dim(0);
    let plane = grad_out.dim(1) * grad_out.dim(2);
    Tensor::new(
        &[c],
        grad_out
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().sum())
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation, written independently of the
    /// range-clipping kernel above.
    fn oracle(x: &Tensor, w: &Tensor, b: &[f64], g: ConvGeometry) -> Tensor {
        let (h, wd) = (x.dim(1), x.dim(2));
        let (cout, cin_g, k) = (w.dim(0), w.dim(1), w.dim(2));
        let ho = (h + 2 * g.padding - k) / g.stride + 1;
        let wo = (wd + 2 * g.padding - k) / g.stride + 1;
        let cout_g = cout / g.groups;
        let mut out = Tensor::zeros(&[cout, ho, wo]);
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for cig in 0..cin_g {
                        let ci = (co / cout_g) * cin_g + cig;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at(&[co, cig, ky, kx]) * x.at(&[ci, iy as usize, ix as usize]);
                            }
                        }
                    }
                    out.set(&[co, oy, ox], acc);
                }
            }
        }
        out
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[1, 5, 6], -1.0, 1.0, &mut rng);
        let k = Conv2dKernel::same(Tensor::ones(&[1, 1, 1, 1])).unwrap();
        assert_eq!(conv2d(&x, &k).unwrap(), x);
    }

    #[test]
    fn box_kernel_keeps_constant_interior() {
        let x = Tensor::full(&[1, 6, 6], 0.37);
        let k = Conv2dKernel::same(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0)).unwrap();
        let y = conv2d(&x, &k).unwrap();
        for i in 1..5 {
            for j in 1..5 {
                assert!((y.at(&[0, i, j]) - 0.37).abs() < 1e-15);
            }
        }
        assert!(y.at(&[0, 0, 0]) < 0.37);
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[1, 4, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[1, 1, 3, 3], -1.0, 1.0, &mut rng);
        let g = ConvGeometry::same(3);
        let y = conv2d_raw(&x, &w, None, g).unwrap();
        assert!(y.max_abs_diff(&oracle(&x, &w, &[0.0], g)) <= 1e-12);
    }

    #[test]
    fn matches_oracle_with_stride_groups_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(cin, cout, k, stride, pad, groups, h, w) in &[
            (4, 6, 3, 2, 1, 2, 9, 8),
            (3, 3, 5, 1, 2, 3, 7, 7),
            (2, 5, 7, 2, 3, 1, 12, 10),
            (2, 2, 3, 1, 0, 1, 5, 4),
        ] {
            let g = ConvGeometry {
                stride,
                padding: pad,
                groups,
            };
            let x = Tensor::uniform(&[cin, h, w], -1.0, 1.0, &mut rng);
            let wt = Tensor::uniform(&[cout, cin / groups, k, k], -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(&[cout], -1.0, 1.0, &mut rng);
            let y = conv2d_raw(&x, &wt, Some(&b), g).unwrap();
            assert!(y.max_abs_diff(&oracle(&x, &wt, b.data(), g)) <= 1e-12);
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <conv(x), gy> == <x, conv_grad_input(gy)> and likewise for the weight.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = ConvGeometry {
            stride: 2,
            padding: 1,
            groups: 2,
        };
        let x = Tensor::uniform(&[4, 7, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[6, 2, 3, 3], -1.0, 1.0, &mut rng);
        let y = conv2d_raw(&x, &w, None, g).unwrap();
        let gy = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
        let lhs: f64 = y.mul(&gy).unwrap().sum();
        let gx = conv2d_grad_input(&gy, &w, x.shape(), g).unwrap();
        let gw = conv2d_grad_weight(&gy, &x, w.shape(), g).unwrap();
        assert!((lhs - x.mul(&gx).unwrap().sum()).abs() < 1e-10);
        assert!((lhs - w.mul(&gw).unwrap().sum()).abs() < 1e-10);
    }

    #[test]
    fn serial_and_parallel_paths_are_bitwise_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[8, 32, 32], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[8, 8, 5, 5], -1.0, 1.0, &mut rng);
        let g = ConvGeometry::same(5);
        let a = conv2d_raw(&x, &w, None, g).unwrap();
        let b = conv2d_serial(&x, &w, None, g).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(conv2d_raw(&x, &w, None, ConvGeometry::same(3)).is_err());
        assert!(Conv2dKernel::same(Tensor::zeros(&[1, 1, 2, 2])).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn conv_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = Tensor::uniform(&[2, 6, 5], -1.0, 1.0, &mut rng);
                let y = Tensor::uniform(&[2, 6, 5], -1.0, 1.0, &mut rng);
                let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
                let g = ConvGeometry::same(3);
                let mix = x.scale(a).add(&y.scale(b)).unwrap();
                let lhs = conv2d_raw(&mix, &w, None, g).unwrap();
                let rhs = conv2d_raw(&x, &w, None, g).unwrap().scale(a)
                    .add(&conv2d_raw(&y, &w, None, g).unwrap().scale(b)).unwrap();
                prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
            }
        }
    }
}
