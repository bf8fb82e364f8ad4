//! Desk-scale training runs: a 1-D signal-restoration task comparing a
//! modulated selective scan with an unmodulated twin, and an overfitting
//! smoke test of the 2-D network.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::degrade::{make_corpus, probe_recipes, synthetic_clean, ClassRecipe};
use crate::error::{invalid, Error, Result};
use crate::extractor::ExtractorNet;
use crate::losses::{psnr, LossConfig};
use crate::modulation::{
    delta_stats, tape_alphas, DegradationEmbedding, DeltaSource, DeltaStatsRow, ModulationHeads, StatsSample,
};
use crate::optim::{adamw_step, cosine_lr, AdamState, AdamWConfig};
use crate::params::Params;
use crate::restoration::DpmambaNet;
use crate::ssm::Discretization;
use crate::tensor::Tensor;

pub const TOY_CLASSES: [&str; 3] = ["noise", "blur", "dim"];
const NOISE_SIGMA: f64 = 0.3;
const BLUR_WIDTH: usize = 9;
const DIM_FACTOR: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toy1dConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub len: usize,
    pub d_inner: usize,
    pub state_dim: usize,
    pub embed_dim: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub eval_per_class: usize,
    /// Let the base step depend on the input, as in a full selective layer.
    /// When off, the step only varies through the modulation.
    pub selective_delta: bool,
}

impl Default for Toy1dConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            steps: 2000,
            batch: 12,
            len: 128,
            d_inner: 8,
            state_dim: 8,
            embed_dim: 16,
            lr_max: 3e-3,
            lr_min: 3e-5,
            eval_per_class: 32,
            selective_delta: false,
        }
    }
}

impl Toy1dConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.len == 0 || self.d_inner == 0 || self.state_dim == 0 || self.embed_dim == 0 {
            return invalid("toy dimensions must be positive");
        }
        if self.eval_per_class == 0 {
            return invalid("need at least one held-out sample per class");
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0) {
            return invalid("learning rates must be positive");
        }
        Ok(())
    }
}

/// One degraded/clean pair with its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub class: usize,
    pub clean: Vec<f64>,
    pub degraded: Vec<f64>,
}

/// Signal generator and frozen class embeddings.
#[derive(Debug, Clone)]
pub struct Toy1dTask {
    pub len: usize,
    /// `(D_emb, 3)`: column `k` is the embedding of class `k`.
    pub projection: Tensor,
}

impl Toy1dTask {
    pub fn new(len: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe3b);
        Self {
            len,
            projection: Tensor::normal(&[embed_dim, TOY_CLASSES.len()], 1.0, &mut rng),
        }
    }

    pub fn embedding(&self, class: usize) -> Vec<f64> {
        let k = TOY_CLASSES.len();
        self.projection.data().iter().skip(class).step_by(k).copied().collect()
    }

    /// Sum of one to three sinusoids.
    pub fn clean<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let parts = rng.gen_range(1..=3);
        let comps: Vec<(f64, f64, f64)> = (0..parts)
            .map(|_| {
                (
                    rng.gen_range(0.2..1.0),
                    rng.gen_range(1.0..12.0),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        (0..self.len)
            .map(|t| {
                comps
                    .iter()
                    .map(|(a, f, p)| a * (std::f64::consts::TAU * f * t as f64 / self.len as f64 + p).sin())
                    .sum()
            })
            .collect()
    }

    pub fn degrade<R: Rng>(&self, clean: &[f64], class: usize, rng: &mut R) -> Vec<f64> {
        match class {
            0 => {
                let normal = rand_distr::Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
                clean.iter().map(|v| v + rng.sample(normal)).collect()
            }
            1 => {
                let half = (BLUR_WIDTH / 2) as isize;
                let n = clean.len() as isize;
                (0..n)
                    .map(|t| {
                        (-half..=half)
                            .map(|o| clean[(t + o).clamp(0, n - 1) as usize])
                            .sum::<f64>()
                            / BLUR_WIDTH as f64
                    })
                    .collect()
            }
            _ => clean.iter().map(|v| v * DIM_FACTOR).collect(),
        }
    }

    pub fn sample<R: Rng>(&self, class: usize, rng: &mut R) -> ToySample {
        let clean = self.clean(rng);
        let degraded = self.degrade(&clean, class, rng);
        ToySample { class, clean, degraded }
    }

    /// Balanced batch: classes cycle, starting at a random offset.
    pub fn batch<R: Rng>(&self, size: usize, rng: &mut R) -> Vec<ToySample> {
        let start = rng.gen_range(0..TOY_CLASSES.len());
        (0..size).map(|i| self.sample((start + i) % TOY_CLASSES.len(), rng)).collect()
    }
}

/// Lift → selective scan with modulated `Δ, B, C` → project, plus the input
/// as a residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Toy1dModel {
    pub params: Params,
    pub modulated: bool,
}

impl Toy1dModel {
    pub fn new(cfg: &Toy1dConfig, modulated: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, n) = (cfg.d_inner, cfg.state_dim);
        let mut p = Params::new();
        p.insert("in.w", Tensor::normal(&[d, 1], 1.0, &mut rng));
        p.insert("in.b", Tensor::zeros(&[d]));
        if cfg.selective_delta {
            p.insert("dt.w", Tensor::zeros(&[d, d]));
        }
        p.insert("dt.b", Tensor::from_fn(&[d], |i| -2.0 + 2.0 * i as f64 / d.max(2) as f64));
        let s = 1.0 / (d as f64).sqrt();
        p.insert("x_b.w", Tensor::uniform(&[n, d], -s, s, &mut rng));
        p.insert("x_c.w", Tensor::uniform(&[n, d], -s, s, &mut rng));
        p.insert("a_log", Tensor::from_fn(&[d, n], |i| ((i % n) as f64 + 1.0).ln()));
        p.insert("d", Tensor::zeros(&[d]));
        p.insert("out.w", Tensor::zeros(&[1, d]));
        p.insert("out.b", Tensor::zeros(&[1]));
        ModulationHeads::zeros(cfg.embed_dim, d, n).write_params(&mut p, "mod.");
        Self { params: p, modulated }
    }

    /// Returns the prediction `(B, L)` and the modulated step `(B, L, D)`.
    fn forward_tape(&self, bound: &crate::params::Bound<'_>, x: &Tensor, e: &Tensor) -> Result<(Var, Var)> {
        let t = bound.tape();
        let p = |s: &str| bound.var(s);
        let (b, l) = (x.dim(0), x.dim(1));
        let xv = t.leaf(x.clone());
        let u = t.linear(t.reshape(xv, &[b * l, 1])?, p("in.w")?, Some(p("in.b")?))?;
        let d = t.shape(u)[1];
        let delta = if self.params.contains("dt.w") {
            t.softplus(t.linear(u, p("dt.w")?, Some(p("dt.b")?))?)?
        } else {
            let base = t.reshape(t.softplus(p("dt.b")?)?, &[1, d])?;
            t.add(t.leaf(Tensor::zeros(&[b * l, d])), base)?
        };
        let bm = t.linear(u, p("x_b.w")?, None)?;
        let cm = t.linear(u, p("x_c.w")?, None)?;
        let n = t.shape(bm)[1];
        let (mut delta, mut bm, mut cm) = (
            t.reshape(delta, &[b, l, d])?,
            t.reshape(bm, &[b, l, n])?,
            t.reshape(cm, &[b, l, n])?,
        );
        if self.modulated {
            let ev = t.leaf(e.clone());
            let (ad, ab, ac) = tape_alphas(bound, "mod.", ev)?;
            delta = t.mul(delta, ad)?;
            bm = t.mul(bm, ab)?;
            cm = t.mul(cm, ac)?;
        }
        let a = t.mul_scalar(t.exp(p("a_log")?)?, -1.0)?;
        let y = t.scan(t.reshape(u, &[b, l, d])?, delta, a, bm, cm, p("d")?, Discretization::Zoh)?;
        let out = t.linear(t.reshape(y, &[b * l, d])?, p("out.w")?, Some(p("out.b")?))?;
        Ok((t.add(xv, t.reshape(out, &[b, l])?)?, delta))
    }

    fn stack(samples: &[ToySample], task: &Toy1dTask) -> (Tensor, Tensor, Tensor) {
        let b = samples.len();
        let l = task.len;
        let x = Tensor::from_fn(&[b, l], |i| samples[i / l].degraded[i % l]);
        let y = Tensor::from_fn(&[b, l], |i| samples[i / l].clean[i % l]);
        let k = task.projection.dim(0);
        let embs: Vec<Vec<f64>> = samples.iter().map(|s| task.embedding(s.class)).collect();
        let e = Tensor::from_fn(&[b, k], |i| embs[i / k][i % k]);
        (x, y, e)
    }

    /// Mean squared error on `samples`, plus per-sample `Δ_dp`.
    pub fn evaluate(&self, samples: &[ToySample], task: &Toy1dTask) -> Result<(f64, Tensor)> {
        let (x, y, e) = Self::stack(samples, task);
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let (pred, delta) = self.forward_tape(&bound, &x, &e)?;
        let mse = tape.value(pred).sub(&y)?.sum_sq() / y.len() as f64;
        Ok((mse, (*tape.value(delta)).clone()))
    }

    /// One optimizer step on `samples`; returns the training loss.
    pub fn train_step(
        &mut self,
        samples: &[ToySample],
        task: &Toy1dTask,
        state: &mut AdamState,
        t: u64,
        lr: f64,
    ) -> Result<f64> {
        let (x, y, e) = Self::stack(samples, task);
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let (pred, _) = self.forward_tape(&bound, &x, &e)?;
        let target = tape.leaf(y);
        let loss = tape.mean(tape.square(tape.sub(pred, target)?)?)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged(format!("toy loss became {value} at step {t}")));
        }
        let mut grads = bound.grads(&tape.backward(loss, None)?);
        if !self.modulated {
            grads = grads.without_prefix("mod.");
        }
        adamw_step(&mut self.params, &grads, state, t, lr, &AdamWConfig::default())?;
        Ok(value)
    }
}

/// Toy model seen through the statistics harness: inputs are `(1, L)`
/// signals.
struct ToyDeltaView<'a>(&'a Toy1dModel);

impl DeltaSource for ToyDeltaView<'_> {
    fn dpss_layers(&self) -> usize {
        1
    }

    fn delta_dp(&self, input: &Tensor, e: &DegradationEmbedding) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let bound = self.0.params.bind(&tape);
        let emb = e.tensor().clone().reshape(&[1, e.dim()])?;
        let (_, delta) = self.0.forward_tape(&bound, input, &emb)?;
        Ok(vec![(*tape.value(delta)).clone()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Toy1dReport {
    pub seed: u64,
    pub steps: usize,
    pub mse_modulated: f64,
    pub mse_fixed: f64,
    /// Held-out MSE of the degraded input itself.
    pub mse_input: f64,
    /// Mean `Δ_dp` of the modulated model per class.
    pub delta_mean_per_class: BTreeMap<String, f64>,
    #[serde(skip)]
    pub delta_stats: Vec<DeltaStatsRow>,
    pub final_train_loss_modulated: f64,
    pub final_train_loss_fixed: f64,
}

pub fn held_out(task: &Toy1dTask, cfg: &Toy1dConfig) -> Vec<ToySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x4e1d));
    (0..cfg.eval_per_class * TOY_CLASSES.len())
        .map(|i| task.sample(i % TOY_CLASSES.len(), &mut rng))
        .collect()
}

/// Train the modulated model and its fixed twin on one shared data stream.
pub fn train_toy1d(cfg: &Toy1dConfig) -> Result<Toy1dReport> {
    cfg.validate()?;
    let task = Toy1dTask::new(cfg.len, cfg.embed_dim, cfg.seed);
    let mut modulated = Toy1dModel::new(cfg, true);
    let mut fixed = Toy1dModel::new(cfg, false);
    let (mut sm, mut sf) = (AdamState::new(), AdamState::new());
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let (mut last_m, mut last_f) = (f64::NAN, f64::NAN);
    for step in 0..cfg.steps {
        let batch = task.batch(cfg.batch, &mut data_rng);
        let lr = cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min);
        last_m = modulated.train_step(&batch, &task, &mut sm, step as u64 + 1, lr)?;
        last_f = fixed.train_step(&batch, &task, &mut sf, step as u64 + 1, lr)?;
    }

    let test = held_out(&task, cfg);
    let (mse_modulated, _) = modulated.evaluate(&test, &task)?;
    let (mse_fixed, _) = fixed.evaluate(&test, &task)?;
    let mse_input = test
        .iter()
        .map(|s| s.degraded.iter().zip(&s.clean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / (test.len() * cfg.len) as f64;

    let stats_corpus: Vec<StatsSample> = test
        .iter()
        .map(|s| {
            Ok(StatsSample {
                label: TOY_CLASSES[s.class].to_string(),
                input: Tensor::new(&[1, cfg.len], s.degraded.clone())?,
                embedding: DegradationEmbedding::from_vec(task.embedding(s.class))?,
            })
        })
        .collect::<Result<_>>()?;
    let rows = delta_stats(&ToyDeltaView(&modulated), &stats_corpus)?;
    let delta_mean_per_class = rows.iter().map(|r| (r.label.clone(), r.mean)).collect();
    Ok(Toy1dReport {
        seed: cfg.seed,
        steps: cfg.steps,
        mse_modulated,
        mse_fixed,
        mse_input,
        delta_mean_per_class,
        delta_stats: rows,
        final_train_loss_modulated: last_m,
        final_train_loss_fixed: last_f,
    })
}

/// One training pair for [`overfit_2d`].
#[derive(Debug, Clone)]
pub struct OverfitSample {
    pub degraded: Tensor,
    pub clean: Tensor,
    pub embedding: DegradationEmbedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverfitConfig {
    pub steps: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub smoothing_window: usize,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr_max: 2e-3,
            lr_min: 1e-4,
            smoothing_window: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverfitReport {
    /// Mean PSNR of the network outputs before any update.
    pub initial_psnr: f64,
    pub final_psnr: f64,
    /// Mean training PSNR recorded before each step.
    pub psnr: Vec<f64>,
    pub losses: Vec<f64>,
    /// Set when the smoothed loss curve ever rises.
    pub warning: Option<String>,
}

fn mean_psnr(net: &DpmambaNet, samples: &[OverfitSample]) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        acc += psnr(&s.clean, &net.forward_tensor(&s.degraded, &s.embedding)?, 1.0)?;
    }
    Ok(acc / samples.len() as f64)
}

/// Two `48×48` pairs (noise and low light) built from synthetic clean
/// images, embedded by `extractor`.
pub fn overfit_pair(extractor: &ExtractorNet, seed: u64) -> Result<Vec<OverfitSample>> {
    let clean = vec![synthetic_clean(3, 48, 48, seed)?, synthetic_clean(3, 48, 48, seed + 1)?];
    let recipes: Vec<ClassRecipe> = probe_recipes().into_iter().take(2).collect();
    make_corpus(&clean, &recipes, 2, seed)?
        .into_iter()
        .map(|s| {
            Ok(OverfitSample {
                embedding: extractor.extract(&s.degraded)?,
                degraded: s.degraded.into_tensor(),
                clean: s.clean.into_tensor(),
            })
        })
        .collect()
}

/// Moving average over `window` entries; the first value is at index
/// `window − 1`.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

/// Fit the network to a handful of fixed pairs with the full training loss.
pub fn overfit_2d(net: &mut DpmambaNet, samples: &[OverfitSample], cfg: &OverfitConfig) -> Result<OverfitReport> {
    if samples.is_empty() {
        return invalid("overfit needs at least one sample");
    }
    let loss_cfg = LossConfig::default();
    let mut state = AdamState::new();
    let initial_psnr = mean_psnr(net, samples)?;
    let mut psnrs = Vec::with_capacity(cfg.steps);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads: Option<Params> = None;
        let (mut loss, mut p) = (0.0, 0.0);
        for s in samples {
            let (l, out, g) = net.loss_output_grads(&s.degraded, &s.embedding, &s.clean, &loss_cfg)?;
            if !l.is_finite() {
                return Err(Error::Diverged(format!("overfit loss became {l} at step {step}")));
            }
            loss += l;
            p += psnr(&s.clean, &out, 1.0)?;
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
        let n = samples.len() as f64;
        let mut grads = grads.expect("non-empty");
        for (_, v) in grads.iter_mut() {
            *v = v.scale(1.0 / n);
        }
        losses.push(loss / n);
        psnrs.push(p / n);
        let lr = cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min);
        adamw_step(&mut net.params, &grads, &mut state, step as u64 + 1, lr, &AdamWConfig::default())?;
    }
    let final_psnr = mean_psnr(net, samples)?;
    let smoothed = smooth(&losses, cfg.smoothing_window);
    let warning = smoothed
        .windows(2)
        .position(|w| w[1] > w[0])
        .map(|i| format!("smoothed loss rises after step {}", i + cfg.smoothing_window));
    Ok(OverfitReport {
        initial_psnr,
        final_psnr,
        psnr: psnrs,
        losses,
        warning,
    })
}
