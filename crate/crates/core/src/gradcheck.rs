//! Central finite-difference checks of the analytic gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{total_loss, total_loss_grad, LossConfig};
use crate::modulation::DegradationEmbedding;
use crate::params::Params;
use crate::restoration::{DpmambaNet, RestorationConfig};
use crate::ssm::{scan_backward, scan_sequential, ScanInputs, ScanOptions, SsmParams};
use crate::tensor::Tensor;

pub const SCAN_TOL: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-4;
pub const NET_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub check: String,
    pub operand: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckEntry {
    fn new(check: &str, operand: &str, max_rel_err: f64, tolerance: f64) -> Self {
        Self {
            check: check.into(),
            operand: operand.into(),
            max_rel_err,
            tolerance,
            passed: max_rel_err <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub entries: Vec<GradCheckEntry>,
    pub passed: bool,
}

/// Central difference of `f` along every coordinate of `x`.
pub fn numeric_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Tensor> {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let v = x.data()[i];
        probe.data_mut()[i] = v + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = v - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = v;
        g.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

const SCAN_OPERANDS: [&str; 6] = ["x", "delta", "b", "c", "a", "d"];

/// Small random scan problem: `L ≤ 8`, `D_inner ≤ 3`, `N ≤ 3`.
pub fn micro_scan_instance(rng: &mut impl Rng) -> Result<(SsmParams, ScanInputs, Tensor)> {
    let (batch, len, d, n) = (rng.gen_range(1..=2), rng.gen_range(1..=8), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let params = SsmParams::new(
        Tensor::uniform(&[d, n], -2.0, -0.2, rng),
        Tensor::uniform(&[d], -1.0, 1.0, rng),
    )?;
    let inputs = ScanInputs {
        x: Tensor::uniform(&[batch, len, d], -1.0, 1.0, rng),
        delta: Tensor::uniform(&[batch, len, d], 0.05, 1.0, rng),
        b: Tensor::uniform(&[batch, len, n], -1.0, 1.0, rng),
        c: Tensor::uniform(&[batch, len, n], -1.0, 1.0, rng),
    };
    let upstream = Tensor::uniform(&[batch, len, d], -1.0, 1.0, rng);
    Ok((params, inputs, upstream))
}

fn operand<'a>(p: &'a mut SsmParams, i: &'a mut ScanInputs, name: &str) -> &'a mut Tensor {
    match name {
        "x" => &mut i.x,
        "delta" => &mut i.delta,
        "b" => &mut i.b,
        "c" => &mut i.c,
        "a" => &mut p.a,
        _ => &mut p.d,
    }
}

/// Worst normwise relative error per operand of `scan_backward`
/// over `instances` random problems with `L = ⟨u, y⟩`.
pub fn check_scan(seed: u64, instances: usize) -> Result<Vec<GradCheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = ScanOptions::default();
    let mut worst = [0.0f64; 6];
    for _ in 0..instances {
        let (params, inputs, up) = micro_scan_instance(&mut rng)?;
        let g = scan_backward(&params, &inputs, &opts, &up)?;
        let analytic = [&g.x, &g.delta, &g.b, &g.c, &g.a, &g.d];
        for (k, name) in SCAN_OPERANDS.iter().enumerate() {
            let (mut p, mut i) = (params.clone(), inputs.clone());
            let x0 = operand(&mut p, &mut i, name).clone();
            let num = numeric_gradient(&x0, 1e-6, |probe| {
                *operand(&mut p, &mut i, name) = probe.clone();
                Ok(dot(&scan_sequential(&p, &i, &opts)?.y, &up))
            })?;
            worst[k] = worst[k].max(analytic[k].rel_err(&num));
        }
    }
    Ok(SCAN_OPERANDS
        .iter()
        .zip(worst)
        .map(|(name, e)| GradCheckEntry::new("scan", name, e, SCAN_TOL))
        .collect())
}

/// Worst normwise relative error of `∂ total_loss / ∂ Ô` over random
/// image pairs with default weights.
pub fn check_loss(seed: u64, instances: usize) -> Result<GradCheckEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LossConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let shape = [rng.gen_range(1..=3), rng.gen_range(3..=6), rng.gen_range(3..=6)];
        let o = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
        let o_hat = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
        let analytic = total_loss_grad(&o, &o_hat, &cfg)?;
        let num = numeric_gradient(&o_hat, 1e-6, |p| Ok(total_loss(&o, p, &cfg)?.total))?;
        worst = worst.max(analytic.rel_err(&num));
    }
    Ok(GradCheckEntry::new("loss", "o_hat", worst, LOSS_TOL))
}

/// One-channel network with widths `(2,2,2)`, `N = 2`, a 3-dimensional
/// embedding and every parameter nudged off its initial value.
pub fn micro_net(seed: u64) -> Result<(DpmambaNet, DegradationEmbedding)> {
    let cfg = RestorationConfig {
        in_channels: 1,
        widths: [2, 2, 2],
        state_dim: 2,
        embed_dim: 3,
        ..Default::default()
    };
    let mut net = DpmambaNet::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, t) in net.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    Ok((net, DegradationEmbedding::from_vec(vec![0.4, -0.3, 0.2])?))
}

/// Network parameter gradients against finite differences on `coords`
/// randomly chosen scalars of an `8×8` input.
pub fn check_micro_net(seed: u64, coords: usize) -> Result<GradCheckEntry> {
    let (net, e) = micro_net(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform(&[1, 8, 8], 0.0, 1.0, &mut rng);
    let up = Tensor::uniform(&[1, 8, 8], -1.0, 1.0, &mut rng);
    let grads = net.backward(&x, &e, &up)?;
    let objective = |p: &Params| -> Result<f64> {
        let n = DpmambaNet::from_params(net.config.clone(), p.clone())?;
        Ok(dot(&n.forward_tensor(&x, &e)?, &up))
    };
    let mut all: Vec<(String, usize)> = net
        .params
        .iter()
        .flat_map(|(k, t)| (0..t.len()).map(move |i| (k.clone(), i)))
        .collect();
    all.shuffle(&mut rng);
    let h = 1e-5;
    let (mut num, mut ana) = (Vec::new(), Vec::new());
    for (name, i) in all.into_iter().take(coords) {
        let mut a = net.params.clone();
        a.get_mut(&name)?.data_mut()[i] += h;
        let mut b = net.params.clone();
        b.get_mut(&name)?.data_mut()[i] -= h;
        num.push((objective(&a)? - objective(&b)?) / (2.0 * h));
        ana.push(grads.get(&name)?.data()[i]);
    }
    let k = num.len();
    let err = Tensor::new(&[k], ana)?.rel_err(&Tensor::new(&[k], num)?);
    Ok(GradCheckEntry::new("micro_net", "params", err, NET_TOL))
}

/// Scan and loss checks on 20 instances each, plus 32 network coordinates.
pub fn grad_check(seed: u64) -> Result<GradCheckReport> {
    let mut entries = check_scan(seed, 20)?;
    entries.push(check_loss(seed, 20)?);
    entries.push(check_micro_net(seed, 32)?);
    let passed = entries.iter().all(|e| e.passed);
    Ok(GradCheckReport { seed, entries, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_a_quadratic() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = numeric_gradient(&x, 1e-4, |t| Ok(t.sum_sq())).unwrap();
        assert!(g.rel_err(&x.scale(2.0)) < 1e-8);
    }

    #[test]
    fn seven_passes() {
        let r = grad_check(7).unwrap();
        assert!(r.passed, "{:#?}", r.entries);
        assert_eq!(r.entries.len(), 8);
    }
}
