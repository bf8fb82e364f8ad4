//! Reverse-mode gradients through the discretized recurrence.

use super::discretize::{input_gain, zoh_terms, Discretization, SERIES_THRESHOLD};
use super::{ScanDims, ScanInputs, ScanOptions, SsmParams};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Forward pass with every hidden state retained, `(batch, D_inner, L, N)`,
/// along with the per-step `Ā` and input gain in the same layout.
#[derive(Debug, Clone)]
pub struct ScanCache {
    dims: ScanDims,
    mode: Discretization,
    states: Vec<f64>,
    a_bar: Vec<f64>,
    gain: Vec<f64>,
}

impl ScanCache {
    pub fn record(params: &SsmParams, inputs: &ScanInputs, opts: &ScanOptions) -> Result<Self> {
        let dims = inputs.validate(params)?;
        opts.check_initial(&dims)?;
        let ScanDims {
            batch,
            len,
            d_inner,
            n,
        } = dims;
        let (x, dt, bm) = (inputs.x.data(), inputs.delta.data(), inputs.b.data());
        let a = params.a.data();
        let size = batch * d_inner * len * n;
        let (mut states, mut a_bar, mut gain) = (vec![0.0; size], vec![0.0; size], vec![0.0; size]);
        for b in 0..batch {
            for d in 0..d_inner {
                let base = (b * d_inner + d) * len * n;
                for k in 0..n {
                    let ak = a[d * n + k];
                    let mut h = opts.h0(b, d, k, &dims);
                    for i in 0..len {
                        let t = (b * len + i) * d_inner + d;
                        let step = dt[t];
                        let e = (step * ak).exp();
                        let f = input_gain(ak, step, opts.discretization);
                        h = e * h + f * bm[(b * len + i) * n + k] * x[t];
                        let o = base + i * n + k;
                        states[o] = h;
                        a_bar[o] = e;
                        gain[o] = f;
                    }
                }
            }
        }
        Ok(Self {
            dims,
            mode: opts.discretization,
            states,
            a_bar,
            gain,
        })
    }

    pub fn dims(&self) -> ScanDims {
        self.dims
    }

    /// Hidden state `h_i` of lane `(b, d)`.
    pub fn state(&self, b: usize, d: usize, i: usize) -> &[f64] {
        let o = self.offset(b, d, i);
        &self.states[o..o + self.dims.n]
    }

    fn offset(&self, b: usize, d: usize, i: usize) -> usize {
        let ScanDims { len, d_inner, n, .. } = self.dims;
        ((b * d_inner + d) * len + i) * n
    }

    /// `y = C·h + D·x` from the retained states; bitwise equal to
    /// [`scan_sequential`](super::scan_sequential).
    pub fn output(&self, params: &SsmParams, inputs: &ScanInputs) -> Result<Tensor> {
        let dims = inputs.validate(params)?;
        if dims != self.dims {
            return shape_err("cache does not match the scan inputs");
        }
        let ScanDims {
            batch,
            len,
            d_inner,
            n,
        } = dims;
        let (x, cm, skip) = (inputs.x.data(), inputs.c.data(), params.d.data());
        let mut y = vec![0.0; batch * len * d_inner];
        for b in 0..batch {
            for d in 0..d_inner {
                for i in 0..len {
                    let t = (b * len + i) * d_inner + d;
                    let row = (b * len + i) * n;
                    let h = self.state(b, d, i);
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += cm[row + k] * h[k];
                    }
                    y[t] = acc + skip[d] * x[t];
                }
            }
        }
        Tensor::new(&[batch, len, d_inner], y)?.ensure_finite("scan")
    }
}

/// `(∂f/∂Δ, ∂f/∂a)` reusing a known `exp(Δa)` and gain `f`.
fn gain_partials(a: f64, delta: f64, e: f64, f: f64, mode: Discretization) -> (f64, f64) {
    match mode {
        Discretization::Simplified => (1.0, 0.0),
        Discretization::Zoh => {
            let z = delta * a;
            if z.abs() < SERIES_THRESHOLD {
                return (1.0 + z, 0.5 * delta * delta);
            }
            if z.abs() < 1e-3 {
                let (_, _, pd, pa) = zoh_terms(a, delta, mode);
                return (pd, pa);
            }
            (e, delta * delta * (z * e - f * a) / (z * z))
        }
    }
}

/// Gradients of a scalar loss with respect to every scan operand.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGrads {
    pub x: Tensor,
    pub delta: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub a: Tensor,
    pub d: Tensor,
    /// Present when the forward pass used an initial state.
    pub initial_state: Option<Tensor>,
}

/// Recompute the forward pass and backpropagate `upstream = ∂L/∂y`.
pub fn scan_backward(
    params: &SsmParams,
    inputs: &ScanInputs,
    opts: &ScanOptions,
    upstream: &Tensor,
) -> Result<ScanGrads> {
    let cache = ScanCache::record(params, inputs, opts)?;
    scan_backward_cached(&cache, params, inputs, opts, upstream)
}

pub fn scan_backward_cached(
    cache: &ScanCache,
    params: &SsmParams,
    inputs: &ScanInputs,
    opts: &ScanOptions,
    upstream: &Tensor,
) -> Result<ScanGrads> {
    let dims = inputs.validate(params)?;
    if dims != cache.dims {
        return shape_err(format!(
            "cached forward state is for {:?}, inputs are {dims:?}",
            cache.dims
        ));
    }
    let ScanDims {
        batch,
        len,
        d_inner,
        n,
    } = dims;
    upstream.expect_shape(&[batch, len, d_inner], "upstream gradient")?;
    let mode = opts.discretization;
    if mode != cache.mode {
        return shape_err("cache was recorded with a different discretization");
    }
    let (x, dt, bm, cm) = (
        inputs.x.data(),
        inputs.delta.data(),
        inputs.b.data(),
        inputs.c.data(),
    );
    let (a, skip) = (params.a.data(), params.d.data());
    let gy = upstream.data();

    let mut gx = vec![0.0; x.len()];
    let mut gdt = vec![0.0; dt.len()];
    let mut gb = vec![0.0; bm.len()];
    let mut gc = vec![0.0; cm.len()];
    let mut ga = vec![0.0; a.len()];
    let mut gd = vec![0.0; skip.len()];
    let mut gh0 = vec![0.0; batch * d_inner * n];
    let mut gh = vec![0.0; n];

    for b in 0..batch {
        for d in 0..d_inner {
            gh.fill(0.0);
            for i in (0..len).rev() {
                let t = (b * len + i) * d_inner + d;
                let row = (b * len + i) * n;
                let (g, xv, step) = (gy[t], x[t], dt[t]);
                gd[d] += g * xv;
                gx[t] += g * skip[d];
                let h_i = cache.state(b, d, i);
                for k in 0..n {
                    gc[row + k] += g * h_i[k];
                    gh[k] += g * cm[row + k];
                }
                for k in 0..n {
                    let ak = a[d * n + k];
                    let h_prev = if i > 0 {
                        cache.state(b, d, i - 1)[k]
                    } else {
                        opts.h0(b, d, k, &dims)
                    };
                    let o = cache.offset(b, d, i) + k;
                    let (a_bar, gain) = (cache.a_bar[o], cache.gain[o]);
                    let (gain_dt, gain_da) = gain_partials(ak, step, a_bar, gain, mode);
                    let g_abar = gh[k] * h_prev;
                    let g_bbar = gh[k] * xv;
                    gx[t] += gh[k] * gain * bm[row + k];
                    gb[row + k] += g_bbar * gain;
                    let g_gain = g_bbar * bm[row + k];
                    gdt[t] += g_abar * ak * a_bar + g_gain * gain_dt;
                    ga[d * n + k] += g_abar * step * a_bar + g_gain * gain_da;
                    gh[k] *= a_bar;
                }
            }
            gh0[(b * d_inner + d) * n..(b * d_inner + d + 1) * n].copy_from_slice(&gh);
        }
    }

    let initial_state = match opts.initial_state {
        Some(_) => Some(Tensor::new(&[batch, d_inner, n], gh0)?),
        None => None,
    };
    Ok(ScanGrads {
        x: Tensor::new(inputs.x.shape(), gx)?,
        delta: Tensor::new(inputs.delta.shape(), gdt)?,
        b: Tensor::new(inputs.b.shape(), gb)?,
        c: Tensor::new(inputs.c.shape(), gc)?,
        a: Tensor::new(params.a.shape(), ga)?,
        d: Tensor::new(params.d.shape(), gd)?,
        initial_state,
    })
}
