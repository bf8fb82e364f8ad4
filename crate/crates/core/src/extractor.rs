//! Degradation extractor: multi-branch central-difference convolutions that
//! fold into a single kernel at inference, a reconstruction objective for
//! pre-training, and a linear probe on the frozen embeddings.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::degrade::{make_corpus, probe_recipes, synthetic_clean, LabeledSample};
use crate::error::{invalid, shape_err, Result};
use crate::image::Image;
use crate::losses::{ssim, ssim_tape};
use crate::modulation::{DegradationEmbedding, DEFAULT_EMBED_DIM};
use crate::numeric::conv::{conv2d_raw, conv2d_serial, ConvGeometry};
use crate::numeric::global_avg_pool;
use crate::optim::{adamw_step, cosine_lr, AdamState, AdamWConfig};
use crate::params::{Bound, Params};
use crate::tensor::Tensor;

pub const DEFAULT_THETA: f64 = 0.7;
pub const BRANCH_SIZES: [usize; 4] = [1, 3, 5, 7];
const MERGED_SIZE: usize = 7;

type ConvFn = fn(&Tensor, &Tensor, Option<&Tensor>, ConvGeometry) -> Result<Tensor>;

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn geometry(k: usize, stride: usize) -> ConvGeometry {
    ConvGeometry {
        stride,
        padding: (k - 1) / 2,
        groups: 1,
    }
}

/// Central-difference convolution:
/// `y(p₀) = Σ_p w(p)·x(p₀+p) − θ·x(p₀)·Σ_p w(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CdcConv {
    /// `(C_out, C_in, k, k)`, `k` odd.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub theta: f64,
    pub stride: usize,
}

impl CdcConv {
    pub fn new(weight: Tensor, bias: Option<Tensor>, theta: f64, stride: usize) -> Result<Self> {
        weight.expect_rank(4, "cdc weight")?;
        let k = weight.dim(2);
        if k % 2 == 0 || weight.dim(3) != k {
            return shape_err(format!("cdc kernels must be odd and square, got {:?}", weight.shape()));
        }
        if !(0.0..=1.0).contains(&theta) {
            return invalid(format!("theta must lie in [0, 1], got {theta}"));
        }
        if stride == 0 {
            return invalid("stride must be positive");
        }
        if let Some(b) = &bias {
            b.expect_shape(&[weight.dim(0)], "cdc bias")?;
        }
        Ok(Self {
            weight,
            bias,
            theta,
            stride,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.dim(2)
    }

    /// The plain kernel with the centre tap lowered by `θ·Σw`.
    pub fn effective_weight(&self) -> Tensor {
        let k = self.kernel_size();
        let kk = k * k;
        let centre = (k / 2) * k + k / 2;
        let mut w = self.weight.clone();
        for taps in w.data_mut().chunks_mut(kk) {
            let s: f64 = taps.iter().sum();
            taps[centre] -= self.theta * s;
        }
        w
    }

    fn forward_with(&self, input: &Tensor, conv: ConvFn) -> Result<Tensor> {
        conv(
            input,
            &self.effective_weight(),
            self.bias.as_ref(),
            geometry(self.kernel_size(), self.stride),
        )
    }
}

pub fn cdc_forward(input: &Tensor, conv: &CdcConv) -> Result<Tensor> {
    conv.forward_with(input, conv2d_raw)
}

/// Four CDC branches (`k = 1, 3, 5, 7`) plus a plain `3×3` branch, summed.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleBlock {
    pub cdc: Vec<CdcConv>,
    pub vanilla_weight: Tensor,
    pub vanilla_bias: Tensor,
    pub stride: usize,
}

impl MultiScaleBlock {
    pub fn random<R: Rng + ?Sized>(cin: usize, cout: usize, stride: usize, theta: f64, rng: &mut R) -> Result<Self> {
        let branches = BRANCH_SIZES.len() + 1;
        let std_for = |k: usize| (2.0 / (cin * k * k) as f64).sqrt() / (branches as f64).sqrt();
        let cdc = BRANCH_SIZES
            .iter()
            .map(|&k| {
                CdcConv::new(
                    Tensor::normal(&[cout, cin, k, k], std_for(k), rng),
                    Some(Tensor::zeros(&[cout])),
                    theta,
                    stride,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cdc,
            vanilla_weight: Tensor::normal(&[cout, cin, 3, 3], std_for(3), rng),
            vanilla_bias: Tensor::zeros(&[cout]),
            stride,
        })
    }

    fn forward_with(&self, input: &Tensor, conv: ConvFn) -> Result<Tensor> {
        let mut out = conv(input, &self.vanilla_weight, Some(&self.vanilla_bias), geometry(3, self.stride))?;
        for b in &self.cdc {
            out.add_assign(&b.forward_with(input, conv)?)?;
        }
        Ok(out)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_with(input, conv2d_raw)
    }

    pub fn write_params(&self, params: &mut Params, prefix: &str) {
        for b in &self.cdc {
            let k = b.kernel_size();
            params.insert(format!("{prefix}cdc{k}.w"), b.weight.clone());
            params.insert(
                format!("{prefix}cdc{k}.b"),
                b.bias.clone().unwrap_or_else(|| Tensor::zeros(&[b.weight.dim(0)])),
            );
        }
        params.insert(format!("{prefix}van.w"), self.vanilla_weight.clone());
        params.insert(format!("{prefix}van.b"), self.vanilla_bias.clone());
    }

    pub fn from_params(params: &Params, prefix: &str, theta: f64, stride: usize) -> Result<Self> {
        let cdc = BRANCH_SIZES
            .iter()
            .map(|k| {
                CdcConv::new(
                    params.get(&format!("{prefix}cdc{k}.w"))?.clone(),
                    Some(params.get(&format!("{prefix}cdc{k}.b"))?.clone()),
                    theta,
                    stride,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cdc,
            vanilla_weight: params.get(&format!("{prefix}van.w"))?.clone(),
            vanilla_bias: params.get(&format!("{prefix}van.b"))?.clone(),
            stride,
        })
    }
}

/// A single `7×7` convolution equivalent to a [`MultiScaleBlock`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReparamConv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl ReparamConv {
    fn forward_with(&self, input: &Tensor, conv: ConvFn) -> Result<Tensor> {
        conv(input, &self.weight, Some(&self.bias), geometry(MERGED_SIZE, self.stride))
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_with(input, conv2d_raw)
    }
}

/// Accumulate `w (O,I,k,k)` into the centre of a `(O,I,7,7)` buffer.
fn add_centered(acc: &mut Tensor, w: &Tensor) -> Result<()> {
    let (o, i, k) = (w.dim(0), w.dim(1), w.dim(2));
    if acc.dim(0) != o || acc.dim(1) != i || k > MERGED_SIZE {
        return shape_err(format!("branch {:?} does not fit merged {:?}", w.shape(), acc.shape()));
    }
    let off = (MERGED_SIZE - k) / 2;
    for a in 0..o {
        for b in 0..i {
            for u in 0..k {
                for v in 0..k {
                    let src = w.at(&[a, b, u, v]);
                    let dst = acc.at(&[a, b, u + off, v + off]);
                    acc.set(&[a, b, u + off, v + off], dst + src);
                }
            }
        }
    }
    Ok(())
}

pub fn reparameterize(block: &MultiScaleBlock) -> Result<ReparamConv> {
    let (o, i) = (block.vanilla_weight.dim(0), block.vanilla_weight.dim(1));
    let mut weight = Tensor::zeros(&[o, i, MERGED_SIZE, MERGED_SIZE]);
    let mut bias = block.vanilla_bias.clone();
    add_centered(&mut weight, &block.vanilla_weight)?;
    for b in &block.cdc {
        if b.stride != block.stride {
            return shape_err("branches disagree on stride");
        }
        add_centered(&mut weight, &b.effective_weight())?;
        if let Some(bb) = &b.bias {
            bias.add_assign(bb)?;
        }
    }
    Ok(ReparamConv {
        weight,
        bias,
        stride: block.stride,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub in_channels: usize,
    /// Stem / first block width and second block width.
    pub widths: [usize; 2],
    pub embed_dim: usize,
    pub theta: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [8, 16],
            embed_dim: DEFAULT_EMBED_DIM,
            theta: DEFAULT_THETA,
        }
    }
}

/// Stem `3×3` → SiLU → block (stride 2) → SiLU → block (stride 2) → SiLU →
/// global average pool → linear to `D_emb`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorNet {
    pub config: ExtractorConfig,
    pub params: Params,
}

impl ExtractorNet {
    pub fn new(config: ExtractorConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w1, w2] = config.widths;
        let c = config.in_channels;
        let mut params = Params::new();
        params.insert("stem.w", Tensor::normal(&[w1, c, 3, 3], (2.0 / (9 * c) as f64).sqrt(), &mut rng));
        params.insert("stem.b", Tensor::zeros(&[w1]));
        MultiScaleBlock::random(w1, w1, 2, config.theta, &mut rng)?.write_params(&mut params, "msb0.");
        MultiScaleBlock::random(w1, w2, 2, config.theta, &mut rng)?.write_params(&mut params, "msb1.");
        params.insert(
            "head.w",
            Tensor::normal(&[config.embed_dim, w2], 1.0 / (w2 as f64).sqrt(), &mut rng),
        );
        params.insert("head.b", Tensor::zeros(&[config.embed_dim]));
        Ok(Self { config, params })
    }

    pub fn from_params(config: ExtractorConfig, params: Params) -> Result<Self> {
        let net = Self { config, params };
        net.block(0)?;
        net.block(1)?;
        net.params.get("stem.w")?.expect_shape(
            &[net.config.widths[0], net.config.in_channels, 3, 3],
            "stem.w",
        )?;
        net.params
            .get("head.w")?
            .expect_shape(&[net.config.embed_dim, net.config.widths[1]], "head.w")?;
        Ok(net)
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn block(&self, i: usize) -> Result<MultiScaleBlock> {
        MultiScaleBlock::from_params(&self.params, &format!("msb{i}."), self.config.theta, 2)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        x.expect_rank(3, "extractor input")?;
        if x.dim(0) != self.config.in_channels {
            return shape_err(format!(
                "extractor expects {} channels, got {}",
                self.config.in_channels,
                x.dim(0)
            ));
        }
        Ok(())
    }

    fn head(&self, features: &Tensor) -> Result<DegradationEmbedding> {
        let g = global_avg_pool(features)?;
        let (w, b) = (self.params.get("head.w")?, self.params.get("head.b")?);
        let k = g.len();
        let e = Tensor::from_fn(&[w.dim(0)], |r| {
            b.data()[r] + w.data()[r * k..(r + 1) * k].iter().zip(g.data()).map(|(p, q)| p * q).sum::<f64>()
        });
        DegradationEmbedding::new(e)
    }

    fn forward_with(&self, x: &Tensor, conv: ConvFn) -> Result<DegradationEmbedding> {
        self.check_input(x)?;
        let mut h = conv(
            x,
            self.params.get("stem.w")?,
            Some(self.params.get("stem.b")?),
            geometry(3, 1),
        )?
        .map(silu);
        for i in 0..2 {
            h = self.block(i)?.forward_with(&h, conv)?.map(silu);
        }
        self.head(&h)
    }

    pub fn extract(&self, image: &Image) -> Result<DegradationEmbedding> {
        self.forward_with(image.tensor(), conv2d_raw)
    }

    /// Same as [`extract`](Self::extract) with every convolution kept on the
    /// calling thread.
    pub fn extract_serial(&self, image: &Image) -> Result<DegradationEmbedding> {
        self.forward_with(image.tensor(), conv2d_serial)
    }

    pub fn reparameterize(&self) -> Result<MergedExtractor> {
        Ok(MergedExtractor {
            stem_w: self.params.get("stem.w")?.clone(),
            stem_b: self.params.get("stem.b")?.clone(),
            blocks: [reparameterize(&self.block(0)?)?, reparameterize(&self.block(1)?)?],
            net: self.clone(),
        })
    }

    /// Record the forward pass on a tape. `prefix` locates this network's
    /// parameters in `bound`; `x` is `(C,H,W)`. Returns a `(1, D_emb)` node.
    pub fn forward_tape(&self, bound: &Bound<'_>, prefix: &str, x: Var) -> Result<Var> {
        let t = bound.tape();
        let p = |n: &str| bound.var(&format!("{prefix}{n}"));
        let mut h = t.silu(t.conv2d(x, p("stem.w")?, Some(p("stem.b")?), geometry(3, 1))?)?;
        for i in 0..2 {
            let mut sum = t.conv2d(h, p(&format!("msb{i}.van.w"))?, Some(p(&format!("msb{i}.van.b"))?), geometry(3, 2))?;
            for k in BRANCH_SIZES {
                let w = cdc_weight_tape(t, p(&format!("msb{i}.cdc{k}.w"))?, self.config.theta)?;
                let y = t.conv2d(h, w, Some(p(&format!("msb{i}.cdc{k}.b"))?), geometry(k, 2))?;
                sum = t.add(sum, y)?;
            }
            h = t.silu(sum)?;
        }
        let c = t.shape(h)[0];
        let g = t.reshape(t.spatial_mean(h)?, &[1, c])?;
        t.linear(g, p("head.w")?, Some(p("head.b")?))
    }
}

/// Centre-tap correction applied on the tape, so `w` receives gradients.
fn cdc_weight_tape(t: &Tape, w: Var, theta: f64) -> Result<Var> {
    let shape = t.shape(w);
    let (oi, k) = (shape[0] * shape[1], shape[2]);
    let kk = k * k;
    let flat = t.reshape(w, &[oi, kk])?;
    let ones = t.leaf(Tensor::ones(&[1, kk]));
    let sums = t.linear(flat, ones, None)?; // (oi, 1)
    let mut mask = Tensor::zeros(&[1, kk]);
    mask.data_mut()[(k / 2) * k + k / 2] = theta;
    let mask = t.leaf(mask);
    let corr = t.mul(sums, mask)?;
    t.reshape(t.sub(flat, corr)?, &shape)
}

/// Inference form of [`ExtractorNet`] with each block folded to one kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedExtractor {
    stem_w: Tensor,
    stem_b: Tensor,
    pub blocks: [ReparamConv; 2],
    net: ExtractorNet,
}

impl MergedExtractor {
    pub fn extract(&self, image: &Image) -> Result<DegradationEmbedding> {
        let x = image.tensor();
        self.net.check_input(x)?;
        let mut h = conv2d_raw(x, &self.stem_w, Some(&self.stem_b), geometry(3, 1))?.map(silu);
        for b in &self.blocks {
            h = b.forward(&h)?.map(silu);
        }
        self.net.head(&h)
    }

    pub fn param_count(&self) -> usize {
        let blocks: usize = self.blocks.iter().map(|b| b.weight.len() + b.bias.len()).sum();
        self.stem_w.len() + self.stem_b.len() + blocks + self.net.params.count_prefix("head.")
    }
}

/// Content encoder plus FiLM-conditioned decoder used only for
/// pre-training the extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstructor {
    pub width: usize,
    pub params: Params,
}

impl Reconstructor {
    pub fn new(channels: usize, width: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let he = |fan: usize| (2.0 / fan as f64).sqrt();
        p.insert("enc1.w", Tensor::normal(&[width, channels, 3, 3], he(9 * channels), &mut rng));
        p.insert("enc1.b", Tensor::zeros(&[width]));
        p.insert("enc2.w", Tensor::normal(&[width, width, 3, 3], he(9 * width), &mut rng));
        p.insert("enc2.b", Tensor::zeros(&[width]));
        p.insert("scale.w", Tensor::zeros(&[width, embed_dim]));
        p.insert("scale.b", Tensor::zeros(&[width]));
        p.insert("shift.w", Tensor::zeros(&[width, embed_dim]));
        p.insert("shift.b", Tensor::zeros(&[width]));
        p.insert("dec.w", Tensor::normal(&[channels, width, 3, 3], 0.1 * he(9 * width), &mut rng));
        p.insert("dec.b", Tensor::zeros(&[channels]));
        Self { width, params: p }
    }

    /// Content features `E_c` of the clean image, `(F,H,W)`.
    pub fn content(&self, clean: &Tensor) -> Result<Tensor> {
        let p = &self.params;
        let h = conv2d_raw(clean, p.get("enc1.w")?, Some(p.get("enc1.b")?), geometry(3, 1))?.map(silu);
        conv2d_raw(&h, p.get("enc2.w")?, Some(p.get("enc2.b")?), geometry(3, 1))
    }

    /// `Î_D` from content features and a degradation embedding.
    pub fn reconstruct(&self, e_c: &Tensor, e_d: &DegradationEmbedding) -> Result<Tensor> {
        let p = &self.params;
        let affine = |w: &Tensor, b: &Tensor| -> Vec<f64> {
            let k = e_d.dim();
            (0..w.dim(0))
                .map(|r| b.data()[r] + w.data()[r * k..(r + 1) * k].iter().zip(e_d.data()).map(|(a, c)| a * c).sum::<f64>())
                .collect()
        };
        if p.get("scale.w")?.dim(1) != e_d.dim() || e_c.dim(0) != self.width {
            return shape_err("reconstructor width or embedding size mismatch");
        }
        let scale = affine(p.get("scale.w")?, p.get("scale.b")?);
        let shift = affine(p.get("shift.w")?, p.get("shift.b")?);
        let plane = e_c.dim(1) * e_c.dim(2);
        let h = Tensor::from_fn(e_c.shape(), |i| {
            let c = i / plane;
            silu(e_c.data()[i] * (1.0 + scale[c]) + shift[c])
        });
        conv2d_raw(&h, p.get("dec.w")?, Some(p.get("dec.b")?), geometry(3, 1))
    }

    fn forward_tape(&self, bound: &Bound<'_>, prefix: &str, clean: Var, e_d: Var) -> Result<Var> {
        let t = bound.tape();
        let p = |n: &str| bound.var(&format!("{prefix}{n}"));
        let h = t.silu(t.conv2d(clean, p("enc1.w")?, Some(p("enc1.b")?), geometry(3, 1))?)?;
        let e_c = t.conv2d(h, p("enc2.w")?, Some(p("enc2.b")?), geometry(3, 1))?;
        let scale = t.reshape(t.linear(e_d, p("scale.w")?, Some(p("scale.b")?))?, &[self.width, 1, 1])?;
        let shift = t.reshape(t.linear(e_d, p("shift.w")?, Some(p("shift.b")?))?, &[self.width, 1, 1])?;
        let mod_ = t.add(t.mul(e_c, t.add_scalar(scale, 1.0)?)?, shift)?;
        t.conv2d(t.silu(mod_)?, p("dec.w")?, Some(p("dec.b")?), geometry(3, 1))
    }
}

/// `‖I_D − Î_D‖₁ (mean) + λ_p·(1 − SSIM(I_D, Î_D))`.
pub fn reconstruction_loss(i_d: &Tensor, i_hat: &Tensor, lambda_p: f64) -> Result<f64> {
    if i_d.shape() != i_hat.shape() {
        return shape_err(format!("{:?} vs {:?}", i_d.shape(), i_hat.shape()));
    }
    let l1 = i_d.data().iter().zip(i_hat.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / i_d.len() as f64;
    if lambda_p == 0.0 {
        return Ok(l1);
    }
    Ok(l1 + lambda_p * (1.0 - ssim(i_d, i_hat)?))
}

pub fn reconstruct_objective(
    e_c: &Tensor,
    e_d: &DegradationEmbedding,
    reconstructor: &Reconstructor,
    i_d: &Tensor,
    lambda_p: f64,
) -> Result<(Tensor, f64)> {
    let i_hat = reconstructor.reconstruct(e_c, e_d)?;
    let loss = reconstruction_loss(i_d, &i_hat, lambda_p)?;
    Ok((i_hat, loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub content_width: usize,
    pub lambda_p: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 150,
            batch: 4,
            lr: 3e-3,
            lr_min: 3e-4,
            content_width: 8,
            lambda_p: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

/// Jointly fit the extractor and a throwaway reconstructor so that the
/// degraded image is recoverable from its clean content plus `E_d`.
pub fn pretrain(net: &mut ExtractorNet, corpus: &[LabeledSample], cfg: &PretrainConfig) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return invalid("pre-training corpus is empty");
    }
    let rec = Reconstructor::new(net.config.in_channels, cfg.content_width, net.config.embed_dim, cfg.seed ^ 0x5eed);
    let mut params = Params::new();
    params.merge_prefixed("ext.", &net.params);
    params.merge_prefixed("rec.", &rec.params);
    let mut state = AdamState::new();
    let opt = AdamWConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads: Option<Params> = None;
        let mut total = 0.0;
        for _ in 0..cfg.batch.max(1) {
            let s = &corpus[rng.gen_range(0..corpus.len())];
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let x = tape.leaf(s.degraded.tensor().clone());
            let clean = tape.leaf(s.clean.tensor().clone());
            let e = net.forward_tape(&bound, "ext.", x)?;
            let i_hat = rec.forward_tape(&bound, "rec.", clean, e)?;
            let l1 = tape.mean(tape.abs(tape.sub(i_hat, x)?)?)?;
            let loss = if cfg.lambda_p > 0.0 {
                let s = ssim_tape(&tape, i_hat, s.degraded.tensor())?;
                let dis = tape.mul_scalar(tape.add_scalar(tape.mul_scalar(s, -1.0)?, 1.0)?, cfg.lambda_p)?;
                tape.add(l1, dis)?
            } else {
                l1
            };
            total += tape.value(loss).data()[0];
            let g = bound.grads(&tape.backward(loss, None)?);
            grads = Some(match grads {
                None => g,
                Some(mut acc) => {
                    for (k, v) in acc.iter_mut() {
                        v.add_assign(g.get(k)?)?;
                    }
                    acc
                }
            });
        }
        let n = cfg.batch.max(1) as f64;
        let mut grads = grads.expect("batch is non-empty");
        for (_, v) in grads.iter_mut() {
            *v = v.scale(1.0 / n);
        }
        let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min);
        adamw_step(&mut params, &grads, &mut state, step as u64 + 1, lr, &opt)?;
        losses.push(total / n);
    }
    net.params = params.subset("ext.");
    Ok(PretrainReport { losses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 400,
            lr: 0.5,
            l2: 1e-3,
            test_fraction: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    /// Held-out accuracy.
    pub accuracy: f64,
    pub labels: Vec<String>,
    pub per_class_accuracy: BTreeMap<String, f64>,
    /// `confusion[true][predicted]` on the held-out split.
    pub confusion: Vec<Vec<usize>>,
    pub train_count: usize,
    pub test_count: usize,
    /// Only one class was present; accuracy is trivially 1.
    pub degenerate: bool,
}

/// Softmax regression on standardized features, trained by full-batch
/// gradient descent and scored on a stratified held-out split.
pub fn linear_probe(features: &[Vec<f64>], labels: &[String], cfg: &ProbeConfig) -> Result<ProbeReport> {
    if features.is_empty() || features.len() != labels.len() {
        return invalid(format!("probe needs matching non-empty inputs ({} features, {} labels)", features.len(), labels.len()));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return shape_err("probe features differ in length");
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return invalid("test fraction must lie in [0, 1)");
    }
    let mut names: Vec<String> = labels.to_vec();
    names.sort();
    names.dedup();
    let k = names.len();
    let class_of: Vec<usize> = labels.iter().map(|l| names.binary_search(l).expect("present")).collect();
    if k == 1 {
        let n = labels.len();
        return Ok(ProbeReport {
            accuracy: 1.0,
            per_class_accuracy: [(names[0].clone(), 1.0)].into(),
            labels: names,
            confusion: vec![vec![n]],
            train_count: n,
            test_count: n,
            degenerate: true,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..k {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| class_of[i] == c).collect();
        idx.shuffle(&mut rng);
        let mut n_test = (idx.len() as f64 * cfg.test_fraction).round() as usize;
        if cfg.test_fraction > 0.0 && idx.len() >= 2 {
            n_test = n_test.clamp(1, idx.len() - 1);
        }
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    if test.is_empty() {
        test = train.clone();
    }

    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    for &i in &train {
        for (m, v) in mean.iter_mut().zip(&features[i]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for &i in &train {
        for ((s, v), m) in std.iter_mut().zip(&features[i]).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / train.len() as f64).sqrt().max(1e-12));
    let norm = |i: usize| -> Vec<f64> {
        features[i].iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect()
    };
    let xs_train: Vec<Vec<f64>> = train.iter().map(|&i| norm(i)).collect();

    let mut w = vec![0.0; k * dim];
    let mut b = vec![0.0; k];
    let softmax = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        let z: Vec<f64> = (0..k)
            .map(|c| b[c] + w[c * dim..(c + 1) * dim].iter().zip(x).map(|(p, q)| p * q).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    };
    let n = xs_train.len() as f64;
    for _ in 0..cfg.iterations {
        let mut gw = vec![0.0; k * dim];
        let mut gb = vec![0.0; k];
        for (x, &i) in xs_train.iter().zip(&train) {
            let p = softmax(&w, &b, x);
            for c in 0..k {
                let d = p[c] - if class_of[i] == c { 1.0 } else { 0.0 };
                gb[c] += d / n;
                for (g, xv) in gw[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                    *g += d * xv / n;
                }
            }
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.lr * (g + cfg.l2 * *wi);
        }
        for (bi, g) in b.iter_mut().zip(&gb) {
            *bi -= cfg.lr * g;
        }
    }

    let mut confusion = vec![vec![0usize; k]; k];
    for &i in &test {
        let p = softmax(&w, &b, &norm(i));
        let pred = (0..k).max_by(|&a, &c| p[a].total_cmp(&p[c])).expect("k ≥ 2");
        confusion[class_of[i]][pred] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let row: usize = confusion[c].iter().sum();
            (name.clone(), if row > 0 { confusion[c][c] as f64 / row as f64 } else { 0.0 })
        })
        .collect();
    Ok(ProbeReport {
        accuracy: correct as f64 / test.len() as f64,
        labels: names,
        per_class_accuracy,
        confusion,
        train_count: train.len(),
        test_count: test.len(),
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeExperimentConfig {
    pub seed: u64,
    pub image_size: usize,
    pub clean_images: usize,
    pub pretrain_samples: usize,
    pub probe_samples: usize,
    pub extractor: ExtractorConfig,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
}

impl Default for ProbeExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            image_size: 32,
            clean_images: 8,
            pretrain_samples: 60,
            probe_samples: 90,
            extractor: ExtractorConfig::default(),
            pretrain: PretrainConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeExperimentReport {
    pub seed: u64,
    pub pretrain_losses: Vec<f64>,
    pub probe: ProbeReport,
}

/// Pre-train a fresh extractor on the probe classes, then fit a linear probe
/// on embeddings of a disjoint corpus drawn from other clean images.
pub fn probe_experiment(cfg: &ProbeExperimentConfig) -> Result<(ExtractorNet, ProbeExperimentReport)> {
    let c = cfg.extractor.in_channels;
    let s = cfg.image_size;
    let cleans = |offset: u64| -> Result<Vec<Image>> {
        (0..cfg.clean_images as u64)
            .map(|i| synthetic_clean(c, s, s, cfg.seed.wrapping_mul(1000) + offset + i))
            .collect()
    };
    let recipes = probe_recipes();
    let train = make_corpus(&cleans(0)?, &recipes, cfg.pretrain_samples, cfg.seed)?;
    let held = make_corpus(&cleans(500)?, &recipes, cfg.probe_samples, cfg.seed ^ 0xfeed)?;
    let mut net = ExtractorNet::new(cfg.extractor.clone(), cfg.seed)?;
    let pretrain_cfg = PretrainConfig {
        seed: cfg.seed,
        ..cfg.pretrain.clone()
    };
    let report = pretrain(&mut net, &train, &pretrain_cfg)?;
    let features: Vec<Vec<f64>> = held
        .iter()
        .map(|x| net.extract(&x.degraded).map(|e| e.data().to_vec()))
        .collect::<Result<_>>()?;
    let labels: Vec<String> = held.iter().map(|x| x.spec.label.clone()).collect();
    let probe_cfg = ProbeConfig {
        seed: cfg.seed,
        ..cfg.probe.clone()
    };
    let probe = linear_probe(&features, &labels, &probe_cfg)?;
    Ok((
        net,
        ProbeExperimentReport {
            seed: cfg.seed,
            pretrain_losses: report.losses,
            probe,
        },
    ))
}
