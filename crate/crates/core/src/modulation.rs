//! Degradation-conditioned modulation of the scan step `Δ` and the input
//! and readout projections `B`, `C`, plus the `Δ_dp` statistics harness.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::Var;
use crate::error::{invalid, shape_err, Error, Result};
use crate::params::{Bound, Params};
use crate::ssm::{scan_sequential, ScanInputs, ScanOptions, ScanOutput, SsmParams};
use crate::tensor::Tensor;

pub const DEFAULT_EMBED_DIM: usize = 512;

/// One degradation descriptor per image, shape `(D_emb,)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationEmbedding(Tensor);

impl DegradationEmbedding {
    pub fn new(t: Tensor) -> Result<Self> {
        t.expect_rank(1, "degradation embedding")?;
        Ok(Self(t.ensure_finite("degradation embedding")?))
    }

    pub fn from_vec(v: Vec<f64>) -> Result<Self> {
        let n = v.len();
        Self::new(Tensor::new(&[n], v)?)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }
}

/// Per-target modulation vectors, all strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Alphas {
    /// `(D_inner,)`
    pub delta: Tensor,
    /// `(N,)`
    pub b: Tensor,
    /// `(N,)`
    pub c: Tensor,
}

impl Alphas {
    pub fn ones(d_inner: usize, n: usize) -> Self {
        Self {
            delta: Tensor::ones(&[d_inner]),
            b: Tensor::ones(&[n]),
            c: Tensor::ones(&[n]),
        }
    }
}

const HEAD_NAMES: [&str; 6] = ["w_delta", "b_delta", "w_b", "b_b", "w_c", "b_c"];

/// `α = exp(W·E_d + b)` for each of `Δ`, `B`, `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationHeads {
    pub w_delta: Tensor,
    pub b_delta: Tensor,
    pub w_b: Tensor,
    pub b_b: Tensor,
    pub w_c: Tensor,
    pub b_c: Tensor,
}

fn affine_exp(w: &Tensor, b: &Tensor, e: &[f64]) -> Tensor {
    let k = e.len();
    Tensor::from_fn(&[w.dim(0)], |r| {
        let row = &w.data()[r * k..(r + 1) * k];
        let z: f64 = row.iter().zip(e).map(|(p, q)| p * q).sum::<f64>() + b.data()[r];
        z.exp()
    })
}

impl ModulationHeads {
    /// Zero weights and biases, so every `α` is exactly 1.
    pub fn zeros(d_emb: usize, d_inner: usize, n: usize) -> Self {
        Self {
            w_delta: Tensor::zeros(&[d_inner, d_emb]),
            b_delta: Tensor::zeros(&[d_inner]),
            w_b: Tensor::zeros(&[n, d_emb]),
            b_b: Tensor::zeros(&[n]),
            w_c: Tensor::zeros(&[n, d_emb]),
            b_c: Tensor::zeros(&[n]),
        }
    }

    /// Gaussian weights and biases, mainly for tests and benchmarks.
    pub fn random<R: Rng + ?Sized>(d_emb: usize, d_inner: usize, n: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w_delta: Tensor::normal(&[d_inner, d_emb], std, rng),
            b_delta: Tensor::normal(&[d_inner], std, rng),
            w_b: Tensor::normal(&[n, d_emb], std, rng),
            b_b: Tensor::normal(&[n], std, rng),
            w_c: Tensor::normal(&[n, d_emb], std, rng),
            b_c: Tensor::normal(&[n], std, rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w_delta.dim(1)
    }

    pub fn d_inner(&self) -> usize {
        self.w_delta.dim(0)
    }

    pub fn state_dim(&self) -> usize {
        self.w_b.dim(0)
    }

    pub fn alphas(&self, e: &DegradationEmbedding) -> Result<Alphas> {
        if e.dim() != self.embed_dim() {
            return shape_err(format!(
                "embedding has {} entries, heads expect {}",
                e.dim(),
                self.embed_dim()
            ));
        }
        let a = Alphas {
            delta: affine_exp(&self.w_delta, &self.b_delta, e.data()),
            b: affine_exp(&self.w_b, &self.b_b, e.data()),
            c: affine_exp(&self.w_c, &self.b_c, e.data()),
        };
        for t in [&a.delta, &a.b, &a.c] {
            if !t.is_finite() {
                return Err(Error::NonFinite("modulation heads".into()));
            }
        }
        Ok(a)
    }

    /// Store under `prefix` (e.g. `"enc.0.heads."`).
    pub fn write_params(&self, params: &mut Params, prefix: &str) {
        for (name, t) in HEAD_NAMES.iter().zip(self.tensors()) {
            params.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn from_params(params: &Params, prefix: &str) -> Result<Self> {
        let g = |n: &str| params.get(&format!("{prefix}{n}")).cloned();
        let heads = Self {
            w_delta: g("w_delta")?,
            b_delta: g("b_delta")?,
            w_b: g("w_b")?,
            b_b: g("b_b")?,
            w_c: g("w_c")?,
            b_c: g("b_c")?,
        };
        let (d, n, k) = (heads.d_inner(), heads.state_dim(), heads.embed_dim());
        heads.b_delta.expect_shape(&[d], "b_delta")?;
        heads.w_b.expect_shape(&[n, k], "w_b")?;
        heads.b_b.expect_shape(&[n], "b_b")?;
        heads.w_c.expect_shape(&[n, k], "w_c")?;
        heads.b_c.expect_shape(&[n], "b_c")?;
        Ok(heads)
    }

    fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.w_delta,
            &self.b_delta,
            &self.w_b,
            &self.b_b,
            &self.w_c,
            &self.b_c,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Tape counterpart of [`ModulationHeads::alphas`]. `e` has shape
/// `(rows, D_emb)` with `rows` either 1 or the batch size; each returned
/// node is shaped `(rows, 1, width)` so it broadcasts over
/// `(batch, L, width)`.
pub fn tape_alphas(bound: &Bound<'_>, prefix: &str, e: Var) -> Result<(Var, Var, Var)> {
    let tape = bound.tape();
    let head = |w: &str, b: &str| -> Result<Var> {
        let z = tape.linear(e, bound.var(&format!("{prefix}{w}"))?, Some(bound.var(&format!("{prefix}{b}"))?))?;
        let shape = tape.shape(z);
        let a = tape.exp(z)?;
        tape.reshape(a, &[shape[0], 1, shape[1]])
    };
    Ok((head("w_delta", "b_delta")?, head("w_b", "b_b")?, head("w_c", "b_c")?))
}

/// `Δ_dp`, `B_dp`, `C_dp`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulatedScanInputs {
    pub delta: Tensor,
    pub b: Tensor,
    pub c: Tensor,
}

impl ModulatedScanInputs {
    pub fn into_scan_inputs(self, x: Tensor) -> ScanInputs {
        ScanInputs {
            x,
            delta: self.delta,
            b: self.b,
            c: self.c,
        }
    }
}

/// Multiply along the last axis by `v`.
fn scale_last(t: &Tensor, v: &Tensor, what: &str) -> Result<Tensor> {
    let w = *t.shape().last().expect("rank ≥ 1");
    if v.len() != w {
        return shape_err(format!("{what}: modulation width {} vs tensor {:?}", v.len(), t.shape()));
    }
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        for (x, a) in row.iter_mut().zip(v.data()) {
            *x *= a;
        }
    }
    Ok(out)
}

pub fn modulate_with(alphas: &Alphas, inputs: &ScanInputs) -> Result<ModulatedScanInputs> {
    let out = ModulatedScanInputs {
        delta: scale_last(&inputs.delta, &alphas.delta, "Δ")?,
        b: scale_last(&inputs.b, &alphas.b, "B")?,
        c: scale_last(&inputs.c, &alphas.c, "C")?,
    };
    if !(out.delta.is_finite() && out.b.is_finite() && out.c.is_finite()) {
        return Err(Error::NonFinite("modulate".into()));
    }
    Ok(out)
}

pub fn modulate(
    heads: &ModulationHeads,
    e: &DegradationEmbedding,
    inputs: &ScanInputs,
) -> Result<ModulatedScanInputs> {
    modulate_with(&heads.alphas(e)?, inputs)
}

/// Modulate, discretize with the modulated step, and scan.
pub fn dp_scan(
    params: &SsmParams,
    inputs: &ScanInputs,
    e: &DegradationEmbedding,
    heads: &ModulationHeads,
    opts: &ScanOptions,
) -> Result<ScanOutput> {
    if heads.d_inner() != params.d_inner() || heads.state_dim() != params.state_dim() {
        return shape_err(format!(
            "heads are ({}, {}), SSM is ({}, {})",
            heads.d_inner(),
            heads.state_dim(),
            params.d_inner(),
            params.state_dim()
        ));
    }
    let m = modulate(heads, e, inputs)?;
    scan_sequential(params, &m.into_scan_inputs(inputs.x.clone()), opts)
}

/// Models that expose the modulated step sizes of their DPSS layers.
pub trait DeltaSource {
    fn dpss_layers(&self) -> usize;
    /// `Δ_dp` of every DPSS layer for one input, in layer order.
    fn delta_dp(&self, input: &Tensor, e: &DegradationEmbedding) -> Result<Vec<Tensor>>;
}

pub struct StatsSample {
    pub label: String,
    pub input: Tensor,
    pub embedding: DegradationEmbedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaStatsRow {
    pub label: String,
    pub layer_index: usize,
    pub mean: f64,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
}

/// Leading fifth of the DPSS layers, rounded up, at least one.
pub fn selected_layers(total: usize) -> usize {
    total.div_ceil(5).max(1).min(total.max(1))
}

/// Linear interpolation between order statistics of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Pool `Δ_dp` over all samples of each label, per selected layer.
/// Rows are ordered by label, then layer.
pub fn delta_stats<M: DeltaSource + Sync>(model: &M, corpus: &[StatsSample]) -> Result<Vec<DeltaStatsRow>> {
    if corpus.is_empty() {
        return invalid("delta statistics need at least one sample");
    }
    let layers = selected_layers(model.dpss_layers());
    let per_sample: Vec<Vec<Tensor>> = corpus
        .par_iter()
        .map(|s| model.delta_dp(&s.input, &s.embedding))
        .collect::<Result<_>>()?;
    let mut pooled: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for (s, deltas) in corpus.iter().zip(&per_sample) {
        if deltas.len() < layers {
            return shape_err(format!("model reported {} layers, expected {layers}", deltas.len()));
        }
        let slot = pooled.entry(&s.label).or_insert_with(|| vec![Vec::new(); layers]);
        for (l, d) in deltas.iter().take(layers).enumerate() {
            slot[l].extend_from_slice(d.data());
        }
    }
    let mut rows = Vec::new();
    for (label, per_layer) in pooled {
        for (layer_index, mut v) in per_layer.into_iter().enumerate() {
            v.sort_by(f64::total_cmp);
            rows.push(DeltaStatsRow {
                label: label.to_string(),
                layer_index,
                mean: v.iter().sum::<f64>() / v.len() as f64,
                p10: quantile(&v, 0.1),
                p50: quantile(&v, 0.5),
                p90: quantile(&v, 0.9),
            });
        }
    }
    Ok(rows)
}

pub fn write_delta_csv<W: Write>(rows: &[DeltaStatsRow], mut out: W) -> Result<()> {
    writeln!(out, "degradation_label,layer_index,mean,p10,p50,p90")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.label, r.layer_index, r.mean, r.p10, r.p50, r.p90
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::backward::ScanCache;
    use crate::ssm::discretize_zoh;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, batch: usize, len: usize, d: usize, n: usize) -> (SsmParams, ScanInputs) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = SsmParams::new(
            Tensor::uniform(&[d, n], -2.0, -0.1, &mut rng),
            Tensor::uniform(&[d], -1.0, 1.0, &mut rng),
        )
        .unwrap();
        let inputs = ScanInputs {
            x: Tensor::uniform(&[batch, len, d], -1.0, 1.0, &mut rng),
            delta: Tensor::uniform(&[batch, len, d], 0.01, 0.5, &mut rng),
            b: Tensor::uniform(&[batch, len, n], -1.0, 1.0, &mut rng),
            c: Tensor::uniform(&[batch, len, n], -1.0, 1.0, &mut rng),
        };
        (params, inputs)
    }

    fn embedding(seed: u64, k: usize) -> DegradationEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DegradationEmbedding::new(Tensor::normal(&[k], 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn zero_heads_are_bitwise_identity() {
        let (p, i) = setup(40, 2, 9, 3, 4);
        let heads = ModulationHeads::zeros(16, 3, 4);
        let e = embedding(41, 16);
        let m = modulate(&heads, &e, &i).unwrap();
        assert_eq!(m.delta, i.delta);
        assert_eq!(m.b, i.b);
        assert_eq!(m.c, i.c);
        let a = dp_scan(&p, &i, &e, &heads, &ScanOptions::default()).unwrap();
        let b = scan_sequential(&p, &i, &ScanOptions::default()).unwrap();
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn doubled_step_squares_the_decay() {
        let mut alphas = Alphas::ones(1, 1);
        alphas.delta = Tensor::full(&[1], 2.0);
        let inputs = ScanInputs {
            x: Tensor::ones(&[1, 1, 1]),
            delta: Tensor::full(&[1, 1, 1], 0.1),
            b: Tensor::ones(&[1, 1, 1]),
            c: Tensor::ones(&[1, 1, 1]),
        };
        let m = modulate_with(&alphas, &inputs).unwrap();
        let (a_bar, _) = discretize_zoh(&[-1.0], m.delta.data()[0], &[1.0]).unwrap();
        assert!((a_bar[0] - (-0.2f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn vanishing_input_gain_leaves_skip_path() {
        let (p, i) = setup(42, 1, 12, 2, 3);
        let mut alphas = Alphas::ones(2, 3);
        alphas.b = Tensor::full(&[3], 1e-300);
        let m = modulate_with(&alphas, &i).unwrap();
        let y = scan_sequential(&p, &m.into_scan_inputs(i.x.clone()), &ScanOptions::default())
            .unwrap()
            .y;
        for t in 0..12 {
            for d in 0..2 {
                let o = t * 2 + d;
                assert!((y.data()[o] - p.d.data()[d] * i.x.data()[o]).abs() < 1e-250);
            }
        }
    }

    #[test]
    fn batching_is_independent() {
        let (p, i) = setup(43, 2, 7, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let heads = ModulationHeads::random(8, 3, 2, 0.3, &mut rng);
        let e = embedding(45, 8);
        let full = dp_scan(&p, &i, &e, &heads, &ScanOptions::default()).unwrap().y;
        let slice = |t: &Tensor, b: usize| {
            let per = t.len() / 2;
            let mut shape = t.shape().to_vec();
            shape[0] = 1;
            Tensor::new(&shape, t.data()[b * per..(b + 1) * per].to_vec()).unwrap()
        };
        for b in 0..2 {
            let one = ScanInputs {
                x: slice(&i.x, b),
                delta: slice(&i.delta, b),
                b: slice(&i.b, b),
                c: slice(&i.c, b),
            };
            let y = dp_scan(&p, &one, &e, &heads, &ScanOptions::default()).unwrap().y;
            assert_eq!(y, slice(&full, b));
        }
    }

    #[test]
    fn state_component_is_linear_in_b() {
        let (p, i) = setup(46, 1, 20, 2, 3);
        let opts = ScanOptions::default();
        let skip = |y: &Tensor| {
            Tensor::from_fn(y.shape(), |o| y.data()[o] - p.d.data()[o % 2] * i.x.data()[o])
        };
        let base = skip(&scan_sequential(&p, &i, &opts).unwrap().y);
        for t in [0.5, 2.0, 7.0] {
            let mut alphas = Alphas::ones(2, 3);
            alphas.b = Tensor::full(&[3], t);
            let m = modulate_with(&alphas, &i).unwrap().into_scan_inputs(i.x.clone());
            let got = skip(&scan_sequential(&p, &m, &opts).unwrap().y);
            assert!(got.rel_err(&base.scale(t)) <= 1e-10);
        }
    }

    #[test]
    fn readout_modulation_leaves_states_alone() {
        let (p, i) = setup(47, 1, 15, 2, 3);
        let mut alphas = Alphas::ones(2, 3);
        alphas.c = Tensor::new(&[3], vec![0.3, 2.0, 5.0]).unwrap();
        let m = modulate_with(&alphas, &i).unwrap().into_scan_inputs(i.x.clone());
        let opts = ScanOptions::default();
        let a = ScanCache::record(&p, &i, &opts).unwrap();
        let b = ScanCache::record(&p, &m, &opts).unwrap();
        for d in 0..2 {
            for t in 0..15 {
                assert_eq!(a.state(0, d, t), b.state(0, d, t));
            }
        }
    }

    #[test]
    fn tape_heads_match_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let heads = ModulationHeads::random(6, 3, 2, 0.5, &mut rng);
        let e = embedding(49, 6);
        let mut params = Params::new();
        heads.write_params(&mut params, "h.");
        let tape = crate::autodiff::Tape::new();
        let bound = params.bind(&tape);
        let ev = tape.leaf(e.tensor().clone().reshape(&[1, 6]).unwrap());
        let (ad, ab, ac) = tape_alphas(&bound, "h.", ev).unwrap();
        let plain = heads.alphas(&e).unwrap();
        assert!(tape.value(ad).data().iter().zip(plain.delta.data()).all(|(a, b)| (a - b).abs() < 1e-14));
        assert!(tape.value(ab).data().iter().zip(plain.b.data()).all(|(a, b)| (a - b).abs() < 1e-14));
        assert!(tape.value(ac).data().iter().zip(plain.c.data()).all(|(a, b)| (a - b).abs() < 1e-14));
        assert_eq!(ModulationHeads::from_params(&params, "h.").unwrap(), heads);
    }

    #[test]
    fn embedding_width_is_checked() {
        let heads = ModulationHeads::zeros(8, 2, 2);
        assert!(heads.alphas(&embedding(1, 7)).is_err());
    }

    /// Stand-in model: one layer whose `Δ_dp` is the embedding's mean
    /// times the input.
    struct Fake;

    impl DeltaSource for Fake {
        fn dpss_layers(&self) -> usize {
            3
        }
        fn delta_dp(&self, input: &Tensor, e: &DegradationEmbedding) -> Result<Vec<Tensor>> {
            let m = e.tensor().mean();
            Ok(vec![input.scale(m); 3])
        }
    }

    #[test]
    fn stats_of_single_sample_and_layer_selection() {
        assert_eq!(selected_layers(1), 1);
        assert_eq!(selected_layers(5), 1);
        assert_eq!(selected_layers(6), 2);
        assert_eq!(selected_layers(10), 2);
        let input = Tensor::from_fn(&[11], |i| i as f64);
        let corpus = vec![StatsSample {
            label: "noise".into(),
            input,
            embedding: DegradationEmbedding::from_vec(vec![1.0, 1.0]).unwrap(),
        }];
        let rows = delta_stats(&Fake, &corpus).unwrap();
        assert_eq!(rows.len(), 1);
        let r = &rows[0];
        assert_eq!((r.mean, r.p10, r.p50, r.p90), (5.0, 1.0, 5.0, 9.0));
        let mut buf = Vec::new();
        write_delta_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "degradation_label,layer_index,mean,p10,p50,p90");
        assert_eq!(text.lines().nth(1).unwrap(), "noise,0,5,1,5,9");
        assert!(delta_stats(&Fake, &[]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn modulated_steps_stay_positive(seed in 0u64..500, scale in 0.0f64..3.0) {
            let (_, i) = setup(seed, 1, 5, 2, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let heads = ModulationHeads::random(4, 2, 2, scale, &mut rng);
            let e = embedding(seed + 2, 4);
            let m = modulate(&heads, &e, &i).unwrap();
            proptest::prop_assert!(m.delta.data().iter().all(|&v| v > 0.0));
        }
    }
}
