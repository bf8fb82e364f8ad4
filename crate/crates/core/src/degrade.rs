//! Synthetic degradations: `I = clamp(Q((α·J + β·γ) ⊛ K) + η)`.
//!
//! `α` scales illumination, `β` weights an additive artifact pattern `γ`,
//! `K` is a normalized blur kernel, `Q` a uniform quantizer and `η`
//! Gaussian noise. Everything is a pure function of the clean image and
//! its [`DegradationSpec`], seed included.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Horizontal,
    Vertical,
}

/// Scalar field over the image plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Field {
    Constant { value: f64 },
    /// Linear ramp from `from` at the first column (row) to `to` at the last.
    Ramp { from: f64, to: f64, axis: Axis },
}

impl Field {
    pub fn constant(value: f64) -> Self {
        Field::Constant { value }
    }

    pub fn at(&self, y: usize, x: usize, h: usize, w: usize) -> f64 {
        match *self {
            Field::Constant { value } => value,
            Field::Ramp { from, to, axis } => {
                let (i, n) = match axis {
                    Axis::Horizontal => (x, w),
                    Axis::Vertical => (y, h),
                };
                let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                from + (to - from) * t
            }
        }
    }

    fn bounds(&self) -> (f64, f64) {
        match *self {
            Field::Constant { value } => (value, value),
            Field::Ramp { from, to, .. } => (from.min(to), from.max(to)),
        }
    }
}

/// Additive artifact pattern `γ`, rendered with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pattern {
    None,
    /// Thin line segments sharing one orientation (rain-like).
    Streaks { count: usize, length: f64, angle_deg: f64 },
    /// Filled disks (snow-like).
    Dots { count: usize, radius: f64 },
    /// Uniform bright veil (haze-like).
    Veil,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BlurKernel {
    Delta,
    Box { size: usize },
    Gaussian { sigma: f64 },
    /// Line of `length` taps through the centre at `angle_deg`.
    Motion { length: usize, angle_deg: f64 },
    /// Explicit odd-sized square kernel, row-major; must sum to one.
    Custom { size: usize, weights: Vec<f64> },
}

impl BlurKernel {
    /// Side length and row-major weights.
    pub fn weights(&self) -> Result<(usize, Vec<f64>)> {
        let (k, w) = match *self {
            BlurKernel::Delta => (1, vec![1.0]),
            BlurKernel::Box { size } => {
                if size == 0 || size % 2 == 0 {
                    return invalid(format!("box size must be odd, got {size}"));
                }
                (size, vec![1.0 / (size * size) as f64; size * size])
            }
            BlurKernel::Gaussian { sigma } => {
                if !(sigma > 0.0) || !sigma.is_finite() {
                    return invalid(format!("gaussian sigma must be positive, got {sigma}"));
                }
                let r = (3.0 * sigma).ceil() as usize;
                let k = 2 * r + 1;
                let g: Vec<f64> = (0..k)
                    .map(|i| (-((i as f64 - r as f64).powi(2)) / (2.0 * sigma * sigma)).exp())
                    .collect();
                let mut w = Vec::with_capacity(k * k);
                for a in &g {
                    for b in &g {
                        w.push(a * b);
                    }
                }
                (k, normalized(w))
            }
            BlurKernel::Motion { length, angle_deg } => {
                if length == 0 {
                    return invalid("motion length must be positive");
                }
                let k = length | 1;
                let c = (k / 2) as f64;
                let (s, co) = angle_deg.to_radians().sin_cos();
                let mut w = vec![0.0; k * k];
                let half = (length as f64 - 1.0) / 2.0;
                let samples = 8 * k;
                for i in 0..=samples {
                    let t = -half + 2.0 * half * i as f64 / samples as f64;
                    // Round the offsets, not the coordinates, so the line stays
                    // point-symmetric about the centre.
                    let x = (c + (t * co).round()) as usize;
                    let y = (c - (t * s).round()) as usize;
                    w[y.min(k - 1) * k + x.min(k - 1)] += 1.0;
                }
                (k, normalized(w))
            }
            BlurKernel::Custom { size, ref weights } => {
                if size == 0 || size % 2 == 0 || weights.len() != size * size {
                    return invalid(format!("custom kernel must be odd and square, got size {size} with {} weights", weights.len()));
                }
                let s: f64 = weights.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return invalid(format!("blur kernel is not normalized (sum {s})"));
                }
                (size, weights.clone())
            }
        };
        Ok((k, w))
    }
}

fn normalized(w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Full description of one degradation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    /// `α(x) ∈ (0, 1]`.
    pub illumination: Field,
    /// `β(x) ∈ [0, 1]`.
    pub intensity: Field,
    pub pattern: Pattern,
    pub kernel: BlurKernel,
    /// Quantizer level count in `2..=256`.
    pub levels: u32,
    pub noise_sigma: f64,
    pub label: String,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn identity(seed: u64) -> Self {
        Self {
            illumination: Field::constant(1.0),
            intensity: Field::constant(0.0),
            pattern: Pattern::None,
            kernel: BlurKernel::Delta,
            levels: 256,
            noise_sigma: 0.0,
            label: "identity".into(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.illumination.bounds();
        if !(lo > 0.0 && hi <= 1.0) {
            return invalid(format!("illumination must lie in (0, 1], got [{lo}, {hi}]"));
        }
        let (lo, hi) = self.intensity.bounds();
        if !(lo >= 0.0 && hi <= 1.0) {
            return invalid(format!("artifact intensity must lie in [0, 1], got [{lo}, {hi}]"));
        }
        if !(2..=256).contains(&self.levels) {
            return invalid(format!("quantizer levels must be in 2..=256, got {}", self.levels));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return invalid(format!("noise sigma must be non-negative, got {}", self.noise_sigma));
        }
        self.kernel.weights()?;
        Ok(())
    }
}

/// Uniform quantizer on `[0, 1]` with `levels` levels.
pub fn quantize(v: f64, levels: u32) -> f64 {
    let s = (levels - 1) as f64;
    (v * s).round() / s
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Render `γ` for an `h × w` plane.
pub fn render_pattern(spec: &DegradationSpec, h: usize, w: usize) -> Vec<f64> {
    let mut g = vec![0.0; h * w];
    let mut rng = stream(spec.seed, 1);
    match spec.pattern {
        Pattern::None => {}
        Pattern::Veil => g.fill(1.0),
        Pattern::Streaks { count, length, angle_deg } => {
            let (s, c) = angle_deg.to_radians().sin_cos();
            for _ in 0..count {
                let x0 = rng.gen_range(0.0..w as f64);
                let y0 = rng.gen_range(0.0..h as f64);
                let steps = (2.0 * length).ceil().max(1.0) as usize;
                for i in 0..=steps {
                    let t = length * i as f64 / steps as f64;
                    let (x, y) = (x0 + t * c, y0 + t * s);
                    if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                        g[y as usize * w + x as usize] = 1.0;
                    }
                }
            }
        }
        Pattern::Dots { count, radius } => {
            for _ in 0..count {
                let cx = rng.gen_range(0.0..w as f64);
                let cy = rng.gen_range(0.0..h as f64);
                for y in 0..h {
                    for x in 0..w {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        if dx * dx + dy * dy <= radius * radius {
                            g[y * w + x] = 1.0;
                        }
                    }
                }
            }
        }
    }
    g
}

/// Half-sample symmetric reflection of `i` into `0..n`.
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// The blurred composite `(α·J + β·γ) ⊛ K` before quantization and noise.
pub fn compose(clean: &Image, spec: &DegradationSpec) -> Result<Tensor> {
    spec.validate()?;
    let (c, h, w) = (clean.channels(), clean.height(), clean.width());
    let gamma = render_pattern(spec, h, w);
    let (k, kw) = spec.kernel.weights()?;
    let r = (k / 2) as isize;
    let j = clean.tensor().data();
    let plane = h * w;
    let mut mixed = vec![0.0; c * plane];
    for y in 0..h {
        for x in 0..w {
            let a = spec.illumination.at(y, x, h, w);
            let b = spec.intensity.at(y, x, h, w);
            let add = b * gamma[y * w + x];
            for ch in 0..c {
                let o = ch * plane + y * w + x;
                mixed[o] = a * j[o] + add;
            }
        }
    }
    if k == 1 {
        return Tensor::new(&[c, h, w], mixed);
    }
    let mut out = vec![0.0; c * plane];
    for ch in 0..c {
        let src = &mixed[ch * plane..(ch + 1) * plane];
        let dst = &mut out[ch * plane..(ch + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for u in 0..k {
                    let yy = reflect(y as isize + u as isize - r, h);
                    for v in 0..k {
                        let xx = reflect(x as isize + v as isize - r, w);
                        acc += kw[u * k + v] * src[yy * w + xx];
                    }
                }
                dst[y * w + x] = acc;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Additive noise field `η` for a `(c, h, w)` image.
pub fn noise_field(spec: &DegradationSpec, shape: &[usize]) -> Tensor {
    let mut rng = stream(spec.seed, 2);
    let sigma = spec.noise_sigma;
    Tensor::from_fn(shape, |_| {
        if sigma == 0.0 {
            0.0
        } else {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        }
    })
}

pub fn degrade(clean: &Image, spec: &DegradationSpec) -> Result<Image> {
    let composed = compose(clean, spec)?;
    let eta = noise_field(spec, composed.shape());
    let out = composed
        .zip_map(&eta, |v, n| quantize(v, spec.levels) + n)?
        .ensure_finite("degrade")?;
    Image::new(out)
}

/// Inclusive sampling range; `lo == hi` means a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl Span {
    pub fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.gen_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

/// Parameter ranges for one degradation class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Recipe {
    Identity,
    Lowlight { alpha: Span },
    Haze { beta: Span },
    Rain { beta: Span, streaks: usize },
    Snow { beta: Span, flakes: usize },
    Blur { sigma: Span },
    Noise { sigma: Span },
    Jpeg { min_levels: u32, max_levels: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassRecipe {
    pub label: String,
    pub recipe: Recipe,
}

impl ClassRecipe {
    pub fn new(label: &str, recipe: Recipe) -> Self {
        Self {
            label: label.into(),
            recipe,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DegradationSpec {
        let mut s = DegradationSpec::identity(rng.gen());
        s.label = self.label.clone();
        match &self.recipe {
            Recipe::Identity => {}
            Recipe::Lowlight { alpha } => s.illumination = Field::constant(alpha.sample(rng)),
            Recipe::Haze { beta } => {
                let b = beta.sample(rng);
                s.illumination = Field::constant(1.0 - b);
                s.intensity = Field::constant(b);
                s.pattern = Pattern::Veil;
            }
            Recipe::Rain { beta, streaks } => {
                s.intensity = Field::constant(beta.sample(rng));
                s.pattern = Pattern::Streaks {
                    count: *streaks,
                    length: rng.gen_range(4.0..10.0),
                    angle_deg: rng.gen_range(60.0..120.0),
                };
            }
            Recipe::Snow { beta, flakes } => {
                s.intensity = Field::constant(beta.sample(rng));
                s.pattern = Pattern::Dots {
                    count: *flakes,
                    radius: rng.gen_range(0.6..1.6),
                };
            }
            Recipe::Blur { sigma } => s.kernel = BlurKernel::Gaussian { sigma: sigma.sample(rng) },
            Recipe::Noise { sigma } => s.noise_sigma = sigma.sample(rng),
            Recipe::Jpeg { min_levels, max_levels } => s.levels = rng.gen_range(*min_levels..=*max_levels),
        }
        s
    }
}

/// Seven classes, one varied component each.
pub fn standard_recipes() -> Vec<ClassRecipe> {
    vec![
        ClassRecipe::new("lowlight", Recipe::Lowlight { alpha: Span::new(0.2, 0.5) }),
        ClassRecipe::new("haze", Recipe::Haze { beta: Span::new(0.3, 0.6) }),
        ClassRecipe::new("rain", Recipe::Rain { beta: Span::new(0.5, 0.9), streaks: 24 }),
        ClassRecipe::new("snow", Recipe::Snow { beta: Span::new(0.6, 1.0), flakes: 30 }),
        ClassRecipe::new("blur", Recipe::Blur { sigma: Span::new(1.0, 2.5) }),
        ClassRecipe::new("noise", Recipe::Noise { sigma: Span::new(0.05, 0.2) }),
        ClassRecipe::new("jpeg", Recipe::Jpeg { min_levels: 4, max_levels: 12 }),
    ]
}

/// The three fixed classes used for extractor probing.
pub fn probe_recipes() -> Vec<ClassRecipe> {
    vec![
        ClassRecipe::new("noise", Recipe::Noise { sigma: Span::fixed(0.2) }),
        ClassRecipe::new("lowlight", Recipe::Lowlight { alpha: Span::fixed(0.4) }),
        ClassRecipe::new("blur", Recipe::Blur { sigma: Span::fixed(2.0) }),
    ]
}

/// Class implied by a spec's parameters alone.
pub fn infer_label(spec: &DegradationSpec) -> &'static str {
    if spec.noise_sigma > 0.0 {
        return "noise";
    }
    if spec.kernel != BlurKernel::Delta {
        return "blur";
    }
    if spec.levels < 256 {
        return "jpeg";
    }
    match spec.pattern {
        Pattern::Veil => return "haze",
        Pattern::Streaks { .. } => return "rain",
        Pattern::Dots { .. } => return "snow",
        Pattern::None => {}
    }
    if spec.illumination.bounds().0 < 1.0 {
        "lowlight"
    } else {
        "identity"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub clean: Image,
    pub degraded: Image,
    pub spec: DegradationSpec,
}

/// `count` samples cycling through `recipes` in order, so classes are
/// balanced to within one. Sample `i` draws from a generator seeded with
/// `seed ^ i`.
pub fn make_corpus(
    clean: &[Image],
    recipes: &[ClassRecipe],
    count: usize,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if clean.is_empty() {
        return invalid("corpus needs at least one clean image");
    }
    if recipes.is_empty() {
        return invalid("corpus needs at least one class recipe");
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
            let recipe = &recipes[i % recipes.len()];
            let source = &clean[rng.gen_range(0..clean.len())];
            let spec = recipe.sample(&mut rng);
            Ok(LabeledSample {
                degraded: degrade(source, &spec)?,
                clean: source.clone(),
                spec,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub label: String,
    pub clean: String,
    pub degraded: String,
    pub spec: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub samples: Vec<ManifestEntry>,
}

/// Write images, one spec JSON per sample, and `manifest.json`.
pub fn write_corpus(dir: &Path, samples: &[LabeledSample]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let ext = s.clean.extension();
        let clean = format!("sample_{i:05}_clean.{ext}");
        let degraded = format!("sample_{i:05}_degraded.{ext}");
        let spec = format!("sample_{i:05}_spec.json");
        s.clean.write(&dir.join(&clean))?;
        s.degraded.write(&dir.join(&degraded))?;
        let json = serde_json::to_string_pretty(&s.spec).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(&spec), json)?;
        entries.push(ManifestEntry {
            index: i,
            label: s.spec.label.clone(),
            clean,
            degraded,
            spec,
        });
    }
    let manifest = Manifest {
        count: entries.len(),
        samples: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Procedural clean image: a colour gradient, a few flat shapes and a
/// sinusoidal texture, kept inside `[0.05, 0.95]`.
pub fn synthetic_clean(channels: usize, h: usize, w: usize, seed: u64) -> Result<Image> {
    if !matches!(channels, 1 | 3) {
        return invalid(format!("images have 1 or 3 channels, got {channels}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<(f64, f64, f64)> = (0..channels)
        .map(|_| (rng.gen_range(0.2..0.7), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)))
        .collect();
    let shapes: Vec<(f64, f64, f64, Vec<f64>)> = (0..rng.gen_range(2..5))
        .map(|_| {
            (
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.1..0.3),
                (0..channels).map(|_| rng.gen_range(0.1..0.9)).collect(),
            )
        })
        .collect();
    let (fy, fx, amp) = (rng.gen_range(1.0..6.0), rng.gen_range(1.0..6.0), rng.gen_range(0.02..0.1));
    let plane = h * w;
    let t = Tensor::from_fn(&[channels, h, w], |i| {
        let (c, y, x) = (i / plane, (i % plane) / w, i % w);
        let (u, v) = (y as f64 / h as f64, x as f64 / w as f64);
        let (b0, by, bx) = base[c];
        let mut val = b0 + by * (u - 0.5) + bx * (v - 0.5);
        for (cy, cx, r, col) in &shapes {
            if (u - cy).powi(2) + (v - cx).powi(2) < r * r {
                val = col[c];
            }
        }
        val += amp * (std::f64::consts::TAU * (fy * u + fx * v)).sin();
        val.clamp(0.05, 0.95)
    });
    Image::new(t)
}
