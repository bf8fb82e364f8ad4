//! Toy-scale restoration network: conv stem, a three-level encoder/decoder of
//! DPSS blocks with pixel (un)shuffle resampling and skip fusion, a
//! refinement stage and a global residual.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::image::Image;
use crate::losses::{total_loss_tape, LossConfig};
use crate::modulation::{tape_alphas, DegradationEmbedding, DeltaSource, ModulationHeads, DEFAULT_EMBED_DIM};
use crate::numeric::conv::ConvGeometry;
use crate::numeric::global_avg_pool;
use crate::params::{Bound, Params};
use crate::ssm::Discretization;
use crate::tensor::Tensor;

pub const STAGES: usize = 3;
const LN_EPS: f64 = 1e-5;

/// High-frequency enhancement `F + α·(F − G(F))`, `G` the per-channel mean.
pub fn heb(f: &Tensor, alpha: f64) -> Result<Tensor> {
    f.expect_rank(3, "heb input")?;
    let g = global_avg_pool(f)?;
    let plane = f.dim(1) * f.dim(2);
    Ok(Tensor::from_fn(f.shape(), |i| {
        let v = f.data()[i];
        v + alpha * (v - g.data()[i / plane])
    }))
}

fn heb_tape(t: &Tape, f: Var, alpha: Var) -> Result<Var> {
    let g = t.spatial_mean(f)?;
    let hf = t.sub(f, g)?;
    t.add(f, t.mul(hf, alpha)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestorationConfig {
    pub in_channels: usize,
    /// Feature width at full, half and quarter resolution. The bottleneck
    /// runs at twice the last entry.
    pub widths: [usize; 3],
    pub blocks_per_stage: usize,
    pub state_dim: usize,
    pub embed_dim: usize,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [8, 16, 32],
            blocks_per_stage: 1,
            state_dim: 8,
            embed_dim: DEFAULT_EMBED_DIM,
            dt_min: 1e-3,
            dt_max: 1e-1,
        }
    }
}

impl RestorationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.contains(&0) || self.state_dim == 0 || self.embed_dim == 0 {
            return invalid("restoration widths and dimensions must be positive");
        }
        if self.blocks_per_stage == 0 {
            return invalid("need at least one block per stage");
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max) {
            return invalid(format!("bad step range [{}, {}]", self.dt_min, self.dt_max));
        }
        Ok(())
    }

    /// Widths of the four resolution levels, bottleneck last.
    pub fn level_widths(&self) -> [usize; 4] {
        let [a, b, c] = self.widths;
        [a, b, c, 2 * c]
    }

    /// Parameter-name prefixes of every DPSS block in execution order.
    pub fn block_prefixes(&self) -> Vec<String> {
        let n = self.blocks_per_stage;
        let mut out = Vec::new();
        for level in 0..STAGES {
            out.extend((0..n).map(|j| format!("enc{level}.blk{j}.")));
        }
        out.extend((0..n).map(|j| format!("mid.blk{j}.")));
        for level in (0..STAGES).rev() {
            out.extend((0..n).map(|j| format!("dec{level}.blk{j}.")));
        }
        out.extend((0..n).map(|j| format!("refine.blk{j}.")));
        out
    }
}

fn uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Inverse of softplus.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Insert the parameters of one DPSS block of width `c`.
pub fn init_dpss_block<R: Rng>(params: &mut Params, prefix: &str, c: usize, cfg: &RestorationConfig, rng: &mut R) {
    let di = 2 * c;
    let n = cfg.state_dim;
    let p = |s: &str| format!("{prefix}{s}");
    params.insert(p("ln.g"), Tensor::ones(&[c]));
    params.insert(p("ln.b"), Tensor::zeros(&[c]));
    params.insert(p("in_x.w"), uniform(&[di, c], c, rng));
    params.insert(p("in_x.b"), Tensor::zeros(&[di]));
    params.insert(p("in_z.w"), uniform(&[di, c], c, rng));
    params.insert(p("in_z.b"), Tensor::zeros(&[di]));
    params.insert(p("dw.w"), uniform(&[di, 1, 3, 3], 9, rng));
    params.insert(p("dw.b"), Tensor::zeros(&[di]));
    params.insert(p("dt.w"), Tensor::zeros(&[di, di]));
    let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
    params.insert(
        p("dt.b"),
        Tensor::from_fn(&[di], |i| {
            let frac = if di > 1 { i as f64 / (di - 1) as f64 } else { 0.5 };
            softplus_inv((lo + frac * (hi - lo)).exp())
        }),
    );
    params.insert(p("x_b.w"), uniform(&[n, di], di, rng));
    params.insert(p("x_c.w"), uniform(&[n, di], di, rng));
    params.insert(p("a_log"), Tensor::from_fn(&[di, n], |i| ((i % n) as f64 + 1.0).ln()));
    params.insert(p("d"), Tensor::ones(&[di]));
    ModulationHeads::zeros(cfg.embed_dim, di, n).write_params(params, &p("mod."));
    params.insert(p("out.w"), uniform(&[c, di], di, rng));
    params.insert(p("out.b"), Tensor::zeros(&[c]));
    params.insert(p("heb.alpha"), Tensor::zeros(&[1, 1, 1]));
}

/// Record one DPSS block on `f (C,H,W)`. Returns the output and the
/// modulated step node `(1, H·W, 2C)`.
pub fn dpss_block_tape(bound: &Bound<'_>, prefix: &str, f: Var, e: Var) -> Result<(Var, Var)> {
    let t = bound.tape();
    let p = |s: &str| bound.var(&format!("{prefix}{s}"));
    let shape = t.shape(f);
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let l = h * w;
    let di = 2 * c;

    let tokens = t.transpose(t.reshape(f, &[c, l])?)?;
    let normed = t.layer_norm(tokens, p("ln.g")?, p("ln.b")?, LN_EPS)?;
    let xs = t.linear(normed, p("in_x.w")?, Some(p("in_x.b")?))?;
    let z = t.linear(normed, p("in_z.w")?, Some(p("in_z.b")?))?;

    let planes = t.reshape(t.transpose(xs)?, &[di, h, w])?;
    let geom = ConvGeometry {
        stride: 1,
        padding: 1,
        groups: di,
    };
    let conv = t.silu(t.conv2d(planes, p("dw.w")?, Some(p("dw.b")?), geom)?)?;
    let u = t.transpose(t.reshape(conv, &[di, l])?)?; // (L, Di), raster order

    let delta = t.softplus(t.linear(u, p("dt.w")?, Some(p("dt.b")?))?)?;
    let b = t.linear(u, p("x_b.w")?, None)?;
    let cm = t.linear(u, p("x_c.w")?, None)?;
    let n = t.shape(b)[1];
    let (a_d, a_b, a_c) = tape_alphas(bound, &format!("{prefix}mod."), e)?;
    let delta_dp = t.mul(t.reshape(delta, &[1, l, di])?, a_d)?;
    let b_dp = t.mul(t.reshape(b, &[1, l, n])?, a_b)?;
    let c_dp = t.mul(t.reshape(cm, &[1, l, n])?, a_c)?;
    let a = t.mul_scalar(t.exp(p("a_log")?)?, -1.0)?;
    let y = t.scan(
        t.reshape(u, &[1, l, di])?,
        delta_dp,
        a,
        b_dp,
        c_dp,
        p("d")?,
        Discretization::Zoh,
    )?;

    let gated = t.mul(t.reshape(y, &[l, di])?, t.silu(z)?)?;
    let out = t.linear(gated, p("out.w")?, Some(p("out.b")?))?;
    let back = t.reshape(t.transpose(out)?, &[c, h, w])?;
    let res = t.add(f, back)?;
    Ok((heb_tape(t, res, p("heb.alpha")?)?, delta_dp))
}

fn conv_tape(bound: &Bound<'_>, name: &str, x: Var, k: usize) -> Result<Var> {
    let t = bound.tape();
    let b = bound.var(&format!("{name}.b"))?;
    t.conv2d(x, bound.var(&format!("{name}.w"))?, Some(b), ConvGeometry::same(k))
}

/// The restoration network, parameters stored by name.
#[derive(Debug, Clone, PartialEq)]
pub struct DpmambaNet {
    pub config: RestorationConfig,
    pub params: Params,
}

/// Everything recorded by one forward pass.
pub struct ForwardTrace {
    pub output: Var,
    pub deltas: Vec<Var>,
}

impl DpmambaNet {
    pub fn new(config: RestorationConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let ws = config.level_widths();
        let c_in = config.in_channels;
        let nb = config.blocks_per_stage;
        p.insert("stem.w", uniform(&[ws[0], c_in, 3, 3], 9 * c_in, &mut rng));
        p.insert("stem.b", Tensor::zeros(&[ws[0]]));
        for level in 0..STAGES {
            for j in 0..nb {
                init_dpss_block(&mut p, &format!("enc{level}.blk{j}."), ws[level], &config, &mut rng);
            }
            let fan = 4 * ws[level];
            p.insert(format!("down{level}.w"), uniform(&[ws[level + 1], fan, 1, 1], fan, &mut rng));
            p.insert(format!("down{level}.b"), Tensor::zeros(&[ws[level + 1]]));
        }
        for j in 0..nb {
            init_dpss_block(&mut p, &format!("mid.blk{j}."), ws[STAGES], &config, &mut rng);
        }
        for level in (0..STAGES).rev() {
            let (hi, lo) = (ws[level + 1], ws[level]);
            p.insert(format!("up{level}.w"), uniform(&[4 * lo, hi, 1, 1], hi, &mut rng));
            p.insert(format!("up{level}.b"), Tensor::zeros(&[4 * lo]));
            p.insert(format!("fuse{level}.w"), uniform(&[lo, 2 * lo, 1, 1], 2 * lo, &mut rng));
            p.insert(format!("fuse{level}.b"), Tensor::zeros(&[lo]));
            for j in 0..nb {
                init_dpss_block(&mut p, &format!("dec{level}.blk{j}."), lo, &config, &mut rng);
            }
        }
        for j in 0..nb {
            init_dpss_block(&mut p, &format!("refine.blk{j}."), ws[0], &config, &mut rng);
        }
        p.insert("tail.w", Tensor::zeros(&[c_in, ws[0], 3, 3]));
        p.insert("tail.b", Tensor::zeros(&[c_in]));
        Ok(Self { config, params: p })
    }

    /// Adopt loaded parameters after checking that every expected tensor is
    /// present with the expected shape.
    pub fn from_params(config: RestorationConfig, params: Params) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return shape_err(format!("{name}: expected {:?}, found {:?}", t.shape(), got.shape()));
            }
        }
        if params.len() != reference.params.len() {
            return invalid(format!(
                "expected {} tensors, found {}",
                reference.params.len(),
                params.len()
            ));
        }
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn check_input(&self, x: &Tensor, e: &DegradationEmbedding) -> Result<()> {
        x.expect_rank(3, "restoration input")?;
        if x.dim(0) != self.config.in_channels {
            return shape_err(format!("expected {} channels, got {}", self.config.in_channels, x.dim(0)));
        }
        let m = 1 << STAGES;
        if x.dim(1) % m != 0 || x.dim(2) % m != 0 {
            return shape_err(format!(
                "height and width must be multiples of {m}, got {}x{}",
                x.dim(1),
                x.dim(2)
            ));
        }
        if e.dim() != self.config.embed_dim {
            return shape_err(format!("embedding has {} entries, expected {}", e.dim(), self.config.embed_dim));
        }
        Ok(())
    }

    /// Record the forward pass. `prefix` locates the parameters in `bound`.
    pub fn forward_tape(&self, bound: &Bound<'_>, prefix: &str, x: Var, e: &DegradationEmbedding) -> Result<ForwardTrace> {
        let t = bound.tape();
        self.check_input(&t.value(x), e)?;
        let ev = t.leaf(e.tensor().clone().reshape(&[1, e.dim()])?);
        let nb = self.config.blocks_per_stage;
        let name = |s: &str| format!("{prefix}{s}");
        let mut deltas = Vec::new();
        let mut run_blocks = |stage: &str, mut h: Var| -> Result<Var> {
            for j in 0..nb {
                let (out, d) = dpss_block_tape(bound, &name(&format!("{stage}.blk{j}.")), h, ev)?;
                deltas.push(d);
                h = out;
            }
            Ok(h)
        };

        let mut h = conv_tape(bound, &name("stem"), x, 3)?;
        let mut skips = Vec::with_capacity(STAGES);
        for level in 0..STAGES {
            h = run_blocks(&format!("enc{level}"), h)?;
            skips.push(h);
            h = conv_tape(bound, &name(&format!("down{level}")), t.pixel_unshuffle(h, 2)?, 1)?;
        }
        h = run_blocks("mid", h)?;
        for level in (0..STAGES).rev() {
            h = t.pixel_shuffle(conv_tape(bound, &name(&format!("up{level}")), h, 1)?, 2)?;
            h = conv_tape(bound, &name(&format!("fuse{level}")), t.concat(&[h, skips[level]])?, 1)?;
            h = run_blocks(&format!("dec{level}"), h)?;
        }
        h = run_blocks("refine", h)?;
        let residual = conv_tape(bound, &name("tail"), h, 3)?;
        let output = t.add(x, residual)?;
        Ok(ForwardTrace { output, deltas })
    }

    /// `Ô = I_D + residual`, unclamped.
    pub fn forward_tensor(&self, x: &Tensor, e: &DegradationEmbedding) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let xv = tape.leaf(x.clone());
        let trace = self.forward_tape(&bound, "", xv, e)?;
        let out = (*tape.value(trace.output)).clone();
        out.ensure_finite("restoration forward")
    }

    pub fn forward(&self, image: &Image, e: &DegradationEmbedding) -> Result<Image> {
        Image::new(self.forward_tensor(image.tensor(), e)?)
    }

    /// Parameter gradients of `⟨upstream, Ô⟩`.
    pub fn backward(&self, x: &Tensor, e: &DegradationEmbedding, upstream: &Tensor) -> Result<Params> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let xv = tape.leaf(x.clone());
        let trace = self.forward_tape(&bound, "", xv, e)?;
        let grads = tape.backward(trace.output, Some(upstream.clone()))?;
        Ok(bound.grads(&grads))
    }

    /// Training loss against `target` and its parameter gradients.
    pub fn loss_and_grads(
        &self,
        x: &Tensor,
        e: &DegradationEmbedding,
        target: &Tensor,
        cfg: &LossConfig,
    ) -> Result<(f64, Params)> {
        let (value, _, grads) = self.loss_output_grads(x, e, target, cfg)?;
        Ok((value, grads))
    }

    /// Like [`loss_and_grads`](Self::loss_and_grads), also returning `Ô`.
    pub fn loss_output_grads(
        &self,
        x: &Tensor,
        e: &DegradationEmbedding,
        target: &Tensor,
        cfg: &LossConfig,
    ) -> Result<(f64, Tensor, Params)> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let xv = tape.leaf(x.clone());
        let trace = self.forward_tape(&bound, "", xv, e)?;
        let loss = total_loss_tape(&tape, trace.output, target, cfg)?;
        let value = tape.value(loss).data()[0];
        let output = (*tape.value(trace.output)).clone();
        let grads = tape.backward(loss, None)?;
        Ok((value, output, bound.grads(&grads)))
    }

    /// Spatial size and channel count at the bottleneck for an `h×w` input.
    pub fn bottleneck_shape(&self, h: usize, w: usize) -> [usize; 3] {
        let m = 1 << STAGES;
        [self.config.level_widths()[STAGES], h / m, w / m]
    }
}

impl DeltaSource for DpmambaNet {
    fn dpss_layers(&self) -> usize {
        self.config.block_prefixes().len()
    }

    fn delta_dp(&self, input: &Tensor, e: &DegradationEmbedding) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let xv = tape.leaf(input.clone());
        let trace = self.forward_tape(&bound, "", xv, e)?;
        Ok(trace.deltas.iter().map(|&d| (*tape.value(d)).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn micro() -> RestorationConfig {
        RestorationConfig {
            in_channels: 1,
            widths: [2, 2, 2],
            state_dim: 2,
            embed_dim: 3,
            ..Default::default()
        }
    }

    #[test]
    fn heb_worked_example_and_trivial_cases() {
        let f = Tensor::new(&[1, 2, 2], vec![0.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(heb(&f, 0.5).unwrap().data(), &[-0.5, 2.5, -0.5, 2.5]);
        assert_eq!(heb(&f, 0.0).unwrap(), f);
        let c = Tensor::full(&[2, 3, 3], 0.4);
        assert!(heb(&c, 3.0).unwrap().max_abs_diff(&c) < 1e-15);
    }

    #[test]
    fn heb_tape_alpha_gradient_is_closed_form() {
        let mut r = rng(80);
        let f = Tensor::uniform(&[2, 4, 5], -1.0, 1.0, &mut r);
        let up = Tensor::uniform(&[2, 4, 5], -1.0, 1.0, &mut r);
        let tape = Tape::new();
        let fv = tape.leaf(f.clone());
        let av = tape.leaf(Tensor::full(&[1, 1, 1], 0.3));
        let out = heb_tape(&tape, fv, av).unwrap();
        assert!(tape.value(out).max_abs_diff(&heb(&f, 0.3).unwrap()) < 1e-15);
        let g = tape.backward(out, Some(up.clone())).unwrap();
        let mut expect = 0.0;
        for c in 0..2 {
            let mean: f64 = (0..20).map(|i| f.data()[c * 20 + i]).sum::<f64>() / 20.0;
            for i in 0..20 {
                expect += up.data()[c * 20 + i] * (f.data()[c * 20 + i] - mean);
            }
        }
        assert!((g.get(av).unwrap().data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn dpss_block_with_zero_out_projection_is_identity() {
        let cfg = micro();
        let mut p = Params::new();
        init_dpss_block(&mut p, "b.", 3, &cfg, &mut rng(81));
        *p.get_mut("b.out.w").unwrap() = Tensor::zeros(&[3, 6]);
        let f = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng(82));
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let fv = tape.leaf(f.clone());
        let ev = tape.leaf(Tensor::uniform(&[1, 3], -1.0, 1.0, &mut rng(83)));
        let (out, delta) = dpss_block_tape(&bound, "b.", fv, ev).unwrap();
        assert_eq!(*tape.value(out), f);
        assert_eq!(tape.shape(delta), vec![1, 16, 6]);
        assert!(tape.value(delta).data().iter().all(|&d| d >= 1e-3 * (1.0 - 1e-9) && d <= 0.1 * (1.0 + 1e-9)));
    }

    #[test]
    fn network_is_identity_at_init_and_rejects_bad_sizes() {
        let net = DpmambaNet::new(micro(), 1).unwrap();
        let x = Tensor::uniform(&[1, 8, 16], 0.0, 1.0, &mut rng(84));
        let e = DegradationEmbedding::from_vec(vec![0.1, -0.2, 0.3]).unwrap();
        assert_eq!(net.forward_tensor(&x, &e).unwrap(), x);
        assert!(net.forward_tensor(&Tensor::zeros(&[1, 12, 16]), &e).is_err());
        assert!(net.forward_tensor(&x, &DegradationEmbedding::from_vec(vec![0.0; 4]).unwrap()).is_err());
        assert_eq!(net.bottleneck_shape(48, 48), [4, 6, 6]);
        assert_eq!(net.dpss_layers(), 8);
        let deltas = net.delta_dp(&x, &e).unwrap();
        assert_eq!(deltas.len(), 8);
        assert_eq!(deltas[0].shape(), &[1, 128, 4]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = DpmambaNet::new(micro(), 2).unwrap();
        let x = Tensor::uniform(&[1, 8, 8], 0.0, 1.0, &mut rng(85));
        let e = DegradationEmbedding::from_vec(vec![0.1, -0.2, 0.3]).unwrap();
        let g = net.backward(&x, &e, &Tensor::zeros(&[1, 8, 8])).unwrap();
        assert_eq!(g.len(), net.params.len());
        assert!(g.iter().all(|(_, t)| t.max_abs() == 0.0));
    }

    #[test]
    fn from_params_checks_layout() {
        let net = DpmambaNet::new(micro(), 3).unwrap();
        assert!(DpmambaNet::from_params(micro(), net.params.clone()).is_ok());
        let mut broken = net.params.clone();
        *broken.get_mut("tail.w").unwrap() = Tensor::zeros(&[1]);
        assert!(DpmambaNet::from_params(micro(), broken).is_err());
    }
}
