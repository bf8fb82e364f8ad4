//! Training loss and image quality metrics over `(C,H,W)` tensors.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::numeric::conv::{conv2d_raw, ConvGeometry};
use crate::numeric::dft2;
use crate::tensor::Tensor;

/// Weights of the pixel L1, pixel L2 and spectral L1 terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub l1: f64,
    pub l2: f64,
    pub fft: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            l1: 1.0,
            l2: 0.5,
            fft: 0.001,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.l1, self.l2, self.fft].iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return invalid(format!("loss weights must be finite and non-negative: {self:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l1: f64,
    pub l2: f64,
    pub fft: f64,
    pub total: f64,
}

/// View a rank-2 image as a single channel; pass rank-3 through.
fn as_chw(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        2 => t.clone().reshape(&[1, t.dim(0), t.dim(1)]),
        3 => Ok(t.clone()),
        _ => shape_err(format!("expected (C,H,W) or (H,W), got {:?}", t.shape())),
    }
}

fn pair(o: &Tensor, o_hat: &Tensor) -> Result<(Tensor, Tensor)> {
    if o.shape() != o_hat.shape() {
        return shape_err(format!("images differ in shape: {:?} vs {:?}", o.shape(), o_hat.shape()));
    }
    Ok((as_chw(o)?, as_chw(o_hat)?))
}

fn channel(t: &Tensor, c: usize) -> Tensor {
    let (h, w) = (t.dim(1), t.dim(2));
    Tensor::new(&[h, w], t.data()[c * h * w..(c + 1) * h * w].to_vec()).expect("channel slice")
}

/// Mean over channels and bins of `|DFT(O) − DFT(Ô)|`.
pub fn fft_l1(o: &Tensor, o_hat: &Tensor) -> Result<f64> {
    let (o, o_hat) = pair(o, o_hat)?;
    let mut total = 0.0;
    for c in 0..o.dim(0) {
        let a = dft2(&channel(&o, c))?;
        let b = dft2(&channel(&o_hat, c))?;
        total += a.data.iter().zip(&b.data).map(|(p, q)| (p - q).norm()).sum::<f64>();
    }
    Ok(total / o.len() as f64)
}

pub fn total_loss(o: &Tensor, o_hat: &Tensor, cfg: &LossConfig) -> Result<LossTerms> {
    cfg.validate()?;
    let (a, b) = pair(o, o_hat)?;
    let n = a.len() as f64;
    let l1 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / n;
    let l2 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n;
    let fft = fft_l1(&a, &b)?;
    Ok(LossTerms {
        l1,
        l2,
        fft,
        total: cfg.l1 * l1 + cfg.l2 * l2 + cfg.fft * fft,
    })
}

/// Record the weighted loss of prediction `o_hat` against a fixed target.
pub fn total_loss_tape(tape: &Tape, o_hat: Var, o: &Tensor, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let target = as_chw(o)?;
    if tape.shape(o_hat) != target.shape() {
        return shape_err(format!("prediction {:?} vs target {:?}", tape.shape(o_hat), target.shape()));
    }
    let t = tape.leaf(target.clone());
    let diff = tape.sub(o_hat, t)?;
    let l1 = tape.mean(tape.abs(diff)?)?;
    let l2 = tape.mean(tape.square(diff)?)?;
    let lf = tape.fft_l1(o_hat, &target)?;
    let total = tape.add(
        tape.mul_scalar(l1, cfg.l1)?,
        tape.add(tape.mul_scalar(l2, cfg.l2)?, tape.mul_scalar(lf, cfg.fft)?)?,
    )?;
    Ok(total)
}

/// `∂ total_loss / ∂ Ô`.
pub fn total_loss_grad(o: &Tensor, o_hat: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let (o, o_hat_chw) = pair(o, o_hat)?;
    let tape = Tape::new();
    let x = tape.try_leaf(o_hat_chw)?;
    let loss = total_loss_tape(&tape, x, &o, cfg)?;
    let g = tape.backward(loss, None)?;
    g.get_or_zeros(x, &o).reshape(o_hat.shape())
}

pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio over all channels jointly, capped at 100 dB.
pub fn psnr(o: &Tensor, o_hat: &Tensor, max_val: f64) -> Result<f64> {
    let (a, b) = pair(o, o_hat)?;
    if !(max_val > 0.0) {
        return invalid("psnr peak value must be positive");
    }
    let mse = a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized `11×11` Gaussian window, row-major.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut out = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            out.push(a * b / (s * s));
        }
    }
    out
}

fn check_ssim_size(t: &Tensor) -> Result<()> {
    if t.dim(1) < SSIM_WINDOW || t.dim(2) < SSIM_WINDOW {
        return invalid(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {}×{}",
            t.dim(1),
            t.dim(2)
        ));
    }
    Ok(())
}

/// Windowed SSIM with dynamic range 1, averaged over valid windows and channels.
pub fn ssim(o: &Tensor, o_hat: &Tensor) -> Result<f64> {
    let (a, b) = pair(o, o_hat)?;
    check_ssim_size(&a)?;
    let win = gaussian_window();
    let (c, h, w) = (a.dim(0), a.dim(1), a.dim(2));
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut acc = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for u in 0..SSIM_WINDOW {
                    for v in 0..SSIM_WINDOW {
                        let g = win[u * SSIM_WINDOW + v];
                        let (x, y) = (pa[(i + u) * w + j + v], pb[(i + u) * w + j + v]);
                        mx += g * x;
                        my += g * y;
                        xx += g * (x * x);
                        yy += g * (y * y);
                        xy += g * (x * y);
                    }
                }
                let sx = xx - mx * mx;
                let sy = yy - my * my;
                let sxy = xy - mx * my;
                let num = (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2);
                let den = (mx * mx + my * my + SSIM_C1) * (sx + sy + SSIM_C2);
                acc += num / den;
            }
        }
    }
    Ok(acc / (c * ho * wo) as f64)
}

/// Tape version of [`ssim`] for a prediction node against a fixed target.
pub fn ssim_tape(tape: &Tape, x: Var, target: &Tensor) -> Result<Var> {
    let target = as_chw(target)?;
    check_ssim_size(&target)?;
    if tape.shape(x) != target.shape() {
        return shape_err(format!("prediction {:?} vs target {:?}", tape.shape(x), target.shape()));
    }
    let c = target.dim(0);
    let mut wdata = Vec::with_capacity(c * SSIM_WINDOW * SSIM_WINDOW);
    for _ in 0..c {
        wdata.extend(gaussian_window());
    }
    let win = tape.leaf(Tensor::new(&[c, 1, SSIM_WINDOW, SSIM_WINDOW], wdata)?);
    let geom = ConvGeometry {
        stride: 1,
        padding: 0,
        groups: c,
    };
    let blur = |v: Var| tape.conv2d(v, win, None, geom);
    let y = tape.leaf(target);
    let mx = blur(x)?;
    let my = blur(y)?;
    let xx = blur(tape.square(x)?)?;
    let yy = blur(tape.square(y)?)?;
    let xy = blur(tape.mul(x, y)?)?;
    let mx2 = tape.square(mx)?;
    let my2 = tape.square(my)?;
    let mxy = tape.mul(mx, my)?;
    let sx = tape.sub(xx, mx2)?;
    let sy = tape.sub(yy, my2)?;
    let sxy = tape.sub(xy, mxy)?;
    let num = tape.mul(
        tape.add_scalar(tape.mul_scalar(mxy, 2.0)?, SSIM_C1)?,
        tape.add_scalar(tape.mul_scalar(sxy, 2.0)?, SSIM_C2)?,
    )?;
    let den = tape.mul(
        tape.add_scalar(tape.add(mx2, my2)?, SSIM_C1)?,
        tape.add_scalar(tape.add(sx, sy)?, SSIM_C2)?,
    )?;
    tape.mean(tape.div(num, den)?)
}

/// Gaussian blur of each channel with the SSIM window (valid region).
/// Exposed for analysis helpers that need the same smoothing.
pub fn ssim_blur(t: &Tensor) -> Result<Tensor> {
    let t = as_chw(t)?;
    check_ssim_size(&t)?;
    let c = t.dim(0);
    let mut w = Vec::new();
    for _ in 0..c {
        w.extend(gaussian_window());
    }
    conv2d_raw(
        &t,
        &Tensor::new(&[c, 1, SSIM_WINDOW, SSIM_WINDOW], w)?,
        None,
        ConvGeometry {
            stride: 1,
            padding: 0,
            groups: c,
        },
    )
}

/// One radial frequency band of a spectrum comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumBand {
    pub band: usize,
    /// Normalized radius range `[lo, hi)`; 1 is the corner Nyquist bin.
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub gap: f64,
}

fn mean_magnitude(t: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let mut acc = vec![0.0; h * w];
    for ch in 0..c {
        let s = dft2(&channel(t, ch))?;
        for (a, z) in acc.iter_mut().zip(&s.data) {
            *a += z.norm();
        }
    }
    Ok(acc.into_iter().map(|v| v / c as f64).collect())
}

/// Band index of DFT bin `(ky, kx)` among `bands` equal radial bands.
pub fn radial_band(ky: usize, kx: usize, h: usize, w: usize, bands: usize) -> usize {
    let fy = ky.min(h - ky) as f64 / h as f64;
    let fx = kx.min(w - kx) as f64 / w as f64;
    let r = (fy * fy + fx * fx).sqrt() / 0.5f64.sqrt();
    ((r * bands as f64) as usize).min(bands - 1)
}

/// Radially averaged `|S_O − S_Ô|`, where `S` is the channel-mean magnitude
/// spectrum.
pub fn spectrum_gap(o: &Tensor, o_hat: &Tensor, bands: usize) -> Result<Vec<SpectrumBand>> {
    if bands == 0 {
        return invalid("at least one frequency band is required");
    }
    let (a, b) = pair(o, o_hat)?;
    let (h, w) = (a.dim(1), a.dim(2));
    let (sa, sb) = (mean_magnitude(&a)?, mean_magnitude(&b)?);
    let mut sum = vec![0.0; bands];
    let mut count = vec![0usize; bands];
    for ky in 0..h {
        for kx in 0..w {
            let k = radial_band(ky, kx, h, w, bands);
            sum[k] += (sa[ky * w + kx] - sb[ky * w + kx]).abs();
            count[k] += 1;
        }
    }
    Ok((0..bands)
        .map(|k| SpectrumBand {
            band: k,
            lo: k as f64 / bands as f64,
            hi: (k + 1) as f64 / bands as f64,
            count: count[k],
            gap: if count[k] > 0 { sum[k] / count[k] as f64 } else { 0.0 },
        })
        .collect())
}

pub fn write_spectrum_csv<W: Write>(bands: &[SpectrumBand], mut out: W) -> Result<()> {
    writeln!(out, "band,lo,hi,count,gap")?;
    for b in bands {
        writeln!(out, "{},{},{},{},{}", b.band, b.lo, b.hi, b.count, b.gap)?;
    }
    Ok(())
}

/// One row of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub image_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub loss_terms: LossTerms,
}

pub fn metric_row(image_id: &str, o: &Tensor, o_hat: &Tensor, cfg: &LossConfig) -> Result<MetricRow> {
    Ok(MetricRow {
        image_id: image_id.to_string(),
        psnr_db: psnr(o, o_hat, 1.0)?,
        ssim: ssim(o, o_hat)?,
        loss_terms: total_loss(o, o_hat, cfg)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[c, h, w], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn worked_single_pixel_example() {
        let o = Tensor::zeros(&[1, 1, 1]);
        let o_hat = Tensor::ones(&[1, 1, 1]);
        let t = total_loss(&o, &o_hat, &LossConfig::default()).unwrap();
        assert_eq!((t.l1, t.l2, t.fft), (1.0, 1.0, 1.0));
        assert_eq!(t.total, 1.501);
        // Single bin: the spectral term is the pixel L1 term.
        let cfg = LossConfig { l1: 0.0, l2: 0.0, fft: 0.001 };
        let only_fft = total_loss(&o, &o_hat, &cfg).unwrap().total;
        assert_eq!(only_fft, 0.001 * t.l1);
    }

    #[test]
    fn zero_iff_equal() {
        let o = img(60, 3, 8, 8);
        assert_eq!(total_loss(&o, &o, &LossConfig::default()).unwrap().total, 0.0);
        let mut p = o.clone();
        p.data_mut()[5] += 1e-9;
        assert!(total_loss(&o, &p, &LossConfig::default()).unwrap().total > 0.0);
        assert!(total_loss(&o, &img(61, 3, 8, 7), &LossConfig::default()).is_err());
    }

    #[test]
    fn gradient_matches_fd() {
        let o = img(62, 2, 6, 5);
        let p = img(63, 2, 6, 5);
        let cfg = LossConfig { l1: 1.0, l2: 0.5, fft: 0.3 };
        let g = total_loss_grad(&o, &p, &cfg).unwrap();
        let h = 1e-6;
        let mut num = Tensor::zeros(p.shape());
        for j in 0..p.len() {
            let mut a = p.clone();
            a.data_mut()[j] += h;
            let mut b = p.clone();
            b.data_mut()[j] -= h;
            num.data_mut()[j] = (total_loss(&o, &a, &cfg).unwrap().total
                - total_loss(&o, &b, &cfg).unwrap().total)
                / (2.0 * h);
        }
        assert!(g.rel_err(&num) <= 1e-6, "{}", g.rel_err(&num));
    }

    #[test]
    fn psnr_cases() {
        let o = Tensor::zeros(&[1, 4, 4]);
        assert_eq!(psnr(&o, &o, 1.0).unwrap(), PSNR_CAP_DB);
        assert!((psnr(&o, &Tensor::full(&[1, 4, 4], 0.1), 1.0).unwrap() - 20.0).abs() <= 1e-9);
        assert!(psnr(&o, &Tensor::ones(&[1, 4, 4]), 1.0).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn ssim_cases() {
        let o = img(64, 3, 16, 14);
        assert_eq!(ssim(&o, &o).unwrap(), 1.0);
        let inv = o.map(|v| 1.0 - v);
        assert!(ssim(&o, &inv).unwrap() < 0.5);
        let a = Tensor::full(&[1, 12, 12], 0.5);
        let b = Tensor::full(&[1, 12, 12], 0.6);
        let expected = (2.0 * 0.5 * 0.6 + SSIM_C1) / (0.25 + 0.36 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!(ssim(&Tensor::zeros(&[1, 10, 20]), &Tensor::zeros(&[1, 10, 20])).is_err());
    }

    #[test]
    fn ssim_tape_matches_plain() {
        let o = img(65, 2, 13, 12);
        let p = img(66, 2, 13, 12);
        let tape = Tape::new();
        let x = tape.leaf(p.clone());
        let s = ssim_tape(&tape, x, &o).unwrap();
        assert!((tape.value(s).data()[0] - ssim(&p, &o).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn spectrum_gap_partition_and_blur() {
        let o = img(67, 3, 32, 32);
        let zero = spectrum_gap(&o, &o, 8).unwrap();
        assert!(zero.iter().all(|b| b.gap == 0.0));
        assert_eq!(zero.iter().map(|b| b.count).sum::<usize>(), 32 * 32);
        // 3-tap circular blur along both axes.
        let blurred = Tensor::from_fn(o.shape(), |i| {
            let (c, y, x) = (i / 1024, (i / 32) % 32, i % 32);
            let mut s = 0.0;
            for dy in [31, 0, 1] {
                for dx in [31, 0, 1] {
                    s += o.at(&[c, (y + dy) % 32, (x + dx) % 32]);
                }
            }
            s / 9.0
        });
        let gap = spectrum_gap(&o, &blurred, 8).unwrap();
        let low: f64 = gap[..4].iter().map(|b| b.gap).sum();
        let high: f64 = gap[4..].iter().map(|b| b.gap).sum();
        assert!(high > low, "low {low} high {high}");
    }

    #[test]
    fn fft_weight_isolated() {
        let o = img(68, 1, 4, 4);
        let p = img(69, 1, 4, 4);
        let cfg = LossConfig { l1: 0.0, l2: 0.0, fft: 1.0 };
        assert_eq!(total_loss(&o, &p, &cfg).unwrap().total, fft_l1(&o, &p).unwrap());
        assert!(LossConfig { l1: -1.0, ..cfg }.validate().is_err());
    }
}
