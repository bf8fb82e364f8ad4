//! Tensor-level reverse-mode differentiation over a small, closed op set.
//!
//! A [`Tape`] records every operation as a node holding its value and the
//! ids of its operands. [`Tape::backward`] walks the nodes in reverse
//! creation order, which is a valid reverse topological order because
//! operands always precede their results.

use std::cell::RefCell;
use std::rc::Rc;

use num_complex::Complex64;

use crate::error::{shape_err, Error, Result};
use crate::numeric::conv::{
    conv2d_grad_bias, conv2d_grad_input, conv2d_grad_weight, conv2d_raw, ConvGeometry,
};
use crate::numeric::fft::{dft2_complex, DftPath};
use crate::numeric::shuffle::{pixel_shuffle, pixel_unshuffle};
use crate::ssm::backward::{scan_backward_cached, ScanCache};
use crate::ssm::{Discretization, ScanInputs, ScanOptions, SsmParams};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Exp(usize),
    Silu(usize),
    Softplus(usize),
    Abs(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SpatialMean(usize),
    Reshape(usize),
    Transpose(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    PixelShuffle(usize, usize),
    PixelUnshuffle(usize, usize),
    Concat(Vec<usize>),
    Scan {
        x: usize,
        delta: usize,
        a: usize,
        b: usize,
        c: usize,
        d: usize,
        mode: Discretization,
        cache: Rc<ScanCache>,
    },
    FftL1 {
        x: usize,
        target: Rc<Tensor>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Exp(..) => "exp",
            Op::Silu(..) => "silu",
            Op::Softplus(..) => "softplus",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SpatialMean(..) => "spatial_mean",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::LayerNorm { .. } => "layer_norm",
            Op::PixelShuffle(..) => "pixel_shuffle",
            Op::PixelUnshuffle(..) => "pixel_unshuffle",
            Op::Concat(..) => "concat",
            Op::Scan { .. } => "scan",
            Op::FftL1 { .. } => "fft_l1",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed to it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Broadcast plan for a binary op: output shape and, for each output
/// element, the flat index into each operand.
struct Broadcast {
    shape: Vec<usize>,
    ia: Vec<usize>,
    ib: Vec<usize>,
}

fn broadcast(sa: &[usize], sb: &[usize]) -> Result<Option<Broadcast>> {
    if sa == sb {
        return Ok(None);
    }
    if sa.len() != sb.len() {
        return shape_err(format!("cannot broadcast {sa:?} with {sb:?} (rank differs)"));
    }
    let mut shape = Vec::with_capacity(sa.len());
    for (&a, &b) in sa.iter().zip(sb) {
        if a == b || b == 1 {
            shape.push(a);
        } else if a == 1 {
            shape.push(b);
        } else {
            return shape_err(format!("cannot broadcast {sa:?} with {sb:?}"));
        }
    }
    let stride = |s: &[usize]| {
        let full = crate::tensor::strides_of(s);
        s.iter()
            .zip(full)
            .map(|(&d, st)| if d == 1 { 0 } else { st })
            .collect::<Vec<_>>()
    };
    let (st_a, st_b) = (stride(sa), stride(sb));
    let n: usize = shape.iter().product();
    let mut ia = Vec::with_capacity(n);
    let mut ib = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        ia.push(oa);
        ib.push(ob);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            oa += st_a[ax];
            ob += st_b[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            oa -= st_a[ax] * shape[ax];
            ob -= st_b[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Some(Broadcast { shape, ia, ib }))
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    match broadcast(a.shape(), b.shape())? {
        None => a.zip_map(b, f),
        Some(plan) => {
            let (da, db) = (a.data(), b.data());
            let data = plan
                .ia
                .iter()
                .zip(&plan.ib)
                .map(|(&i, &j)| f(da[i], db[j]))
                .collect();
            Tensor::new(&plan.shape, data)
        }
    }
}

/// Accumulate `∂out/∂a · g` and `∂out/∂b · g` for a broadcast binary op,
/// where `da(x, y)` and `db(x, y)` are the local partials.
fn binary_grads(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    da: impl Fn(f64, f64) -> f64,
    db: impl Fn(f64, f64) -> f64,
) -> Result<(Tensor, Tensor)> {
    let (va, vb, vg) = (a.data(), b.data(), g.data());
    let mut ga = vec![0.0; va.len()];
    let mut gb = vec![0.0; vb.len()];
    match broadcast(a.shape(), b.shape())? {
        None => {
            for k in 0..vg.len() {
                ga[k] = vg[k] * da(va[k], vb[k]);
                gb[k] = vg[k] * db(va[k], vb[k]);
            }
        }
        Some(plan) => {
            for (k, (&i, &j)) in plan.ia.iter().zip(&plan.ib).enumerate() {
                ga[i] += vg[k] * da(va[i], vb[j]);
                gb[j] += vg[k] * db(va[i], vb[j]);
            }
        }
    }
    Ok((Tensor::new(a.shape(), ga)?, Tensor::new(b.shape(), gb)?))
}

fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    x.expect_rank(2, "linear input")?;
    w.expect_rank(2, "linear weight")?;
    let (m, k) = (x.dim(0), x.dim(1));
    let n = w.dim(0);
    if w.dim(1) != k {
        return shape_err(format!("linear: input {:?}, weight {:?}", x.shape(), w.shape()));
    }
    if let Some(b) = b {
        b.expect_shape(&[n], "linear bias")?;
    }
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let xr = &xd[r * k..(r + 1) * k];
        for c in 0..n {
            let wr = &wd[c * k..(c + 1) * k];
            let mut acc = b.map_or(0.0, |b| b.data()[c]);
            for (p, q) in xr.iter().zip(wr) {
                acc += p * q;
            }
            out[r * n + c] = acc;
        }
    }
    Tensor::new(&[m, n], out)
}

fn layer_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let k = row.len() as f64;
    let mean = row.iter().sum::<f64>() / k;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
    (mean, 1.0 / (var + eps).sqrt())
}

fn fft_residual_spectrum(x: &Tensor, target: &Tensor) -> Result<Vec<Vec<Complex64>>> {
    if x.shape() != target.shape() || x.rank() != 3 {
        return shape_err(format!(
            "fft loss expects matching (C,H,W), got {:?} / {:?}",
            x.shape(),
            target.shape()
        ));
    }
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let plane = h * w;
    Ok((0..c)
        .map(|ch| {
            let mut buf: Vec<Complex64> = (0..plane)
                .map(|j| Complex64::new(x.data()[ch * plane + j] - target.data()[ch * plane + j], 0.0))
                .collect();
            dft2_complex(&mut buf, h, w, false, DftPath::Auto);
            buf
        })
        .collect())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Value of a node. Cheap: values are reference counted.
    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// A trainable or constant input.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf).expect("non-finite leaf")
    }

    pub fn try_leaf(&self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = binary(&self.value(a), &self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = binary(&self.value(a), &self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = binary(&self.value(a), &self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let v = binary(&self.value(a), &self.value(b), |x, y| x / y)?;
        self.push(v, Op::Div(a.0, b.0))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::MulScalar(a.0, s))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn silu(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a.0))
    }

    pub fn softplus(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a.0))
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a.0))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a.0))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a.0))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a.0))
    }

    /// Per-channel spatial mean, `(C,H,W) -> (C,1,1)`.
    pub fn spatial_mean(&self, a: Var) -> Result<Var> {
        let v = crate::numeric::global_avg_pool(&self.value(a))?;
        self.push(v, Op::SpatialMean(a.0))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = (*self.value(a)).clone().reshape(shape)?;
        self.push(v, Op::Reshape(a.0))
    }

    /// Transpose of a rank-2 node.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose2()?;
        self.push(v, Op::Transpose(a.0))
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let bias = b.map(|b| self.value(b));
        let v = conv2d_raw(&self.value(x), &self.value(w), bias.as_deref(), geom)?;
        self.push(
            v,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
        )
    }

    /// `x (M,K) · wᵀ (K,N) + b`, with `w` stored `(N, K)`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bias = b.map(|b| self.value(b));
        let v = linear_forward(&self.value(x), &self.value(w), bias.as_deref())?;
        self.push(
            v,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
        )
    }

    /// Normalize each row of `x (M,K)` over its `K` entries.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_rank(2, "layer_norm input")?;
        let k = xv.dim(1);
        let (g, b) = (self.value(gamma), self.value(beta));
        g.expect_shape(&[k], "layer_norm gamma")?;
        b.expect_shape(&[k], "layer_norm beta")?;
        let mut out = vec![0.0; xv.len()];
        for (row, o) in xv.data().chunks(k).zip(out.chunks_mut(k)) {
            let (mean, rstd) = layer_norm_stats(row, eps);
            for j in 0..k {
                o[j] = (row[j] - mean) * rstd * g.data()[j] + b.data()[j];
            }
        }
        let v = Tensor::new(xv.shape(), out)?;
        self.push(
            v,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        )
    }

    pub fn pixel_shuffle(&self, x: Var, r: usize) -> Result<Var> {
        let v = pixel_shuffle(&self.value(x), r)?;
        self.push(v, Op::PixelShuffle(x.0, r))
    }

    pub fn pixel_unshuffle(&self, x: Var, r: usize) -> Result<Var> {
        let v = pixel_unshuffle(&self.value(x), r)?;
        self.push(v, Op::PixelUnshuffle(x.0, r))
    }

    /// Concatenate along axis 0.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat0(&refs)?;
        self.push(v, Op::Concat(parts.iter().map(|p| p.0).collect()))
    }

    /// Selective scan; `a` is `(D_inner, N)`, `d` is `(D_inner,)`.
    #[allow(clippy::too_many_arguments)]
    pub fn scan(
        &self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        mode: Discretization,
    ) -> Result<Var> {
        let (params, inputs) = self.scan_operands(x, delta, a, b, c, d)?;
        let opts = ScanOptions {
            discretization: mode,
            ..Default::default()
        };
        let cache = ScanCache::record(&params, &inputs, &opts)?;
        let y = cache.output(&params, &inputs)?;
        self.push(
            y,
            Op::Scan {
                x: x.0,
                delta: delta.0,
                a: a.0,
                b: b.0,
                c: c.0,
                d: d.0,
                mode,
                cache: Rc::new(cache),
            },
        )
    }

    fn scan_operands(
        &self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
    ) -> Result<(SsmParams, ScanInputs)> {
        let params = SsmParams::new((*self.value(a)).clone(), (*self.value(d)).clone())?;
        let inputs = ScanInputs {
            x: (*self.value(x)).clone(),
            delta: (*self.value(delta)).clone(),
            b: (*self.value(b)).clone(),
            c: (*self.value(c)).clone(),
        };
        Ok((params, inputs))
    }

    /// Mean over all bins and channels of `|DFT(x) − DFT(target)|`, for
    /// `(C,H,W)` inputs and a constant target.
    pub fn fft_l1(&self, x: Var, target: &Tensor) -> Result<Var> {
        let spec = fft_residual_spectrum(&self.value(x), target)?;
        let n = target.len() as f64;
        let total: f64 = spec.iter().flatten().map(|z| z.norm()).sum();
        self.push(
            Tensor::scalar(total / n),
            Op::FftL1 {
                x: x.0,
                target: Rc::new(target.clone()),
            },
        )
    }

    /// Backpropagate from `out`. Without a seed `out` must hold one value
    /// and is seeded with 1.
    pub fn backward(&self, out: Var, seed: Option<Tensor>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let seed = match seed {
            Some(s) => {
                s.expect_shape(nodes[out.0].value.shape(), "backward seed")?;
                s
            }
            None => {
                if nodes[out.0].value.len() != 1 {
                    return shape_err("backward without a seed needs a scalar output");
                }
                Tensor::ones(nodes[out.0].value.shape())
            }
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[out.0] = Some(seed);

        fn acc(grads: &mut [Option<Tensor>], id: usize, g: Tensor) -> Result<()> {
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            match &node.op {
                Op::Leaf => grads[id] = Some(g),
                Op::Add(a, b) => {
                    let (ga, gb) = binary_grads(val(*a), val(*b), &g, |_, _| 1.0, |_, _| 1.0)?;
                    acc(&mut grads, *a, ga)?;
                    acc(&mut grads, *b, gb)?;
                }
                Op::Sub(a, b) => {
                    let (ga, gb) = binary_grads(val(*a), val(*b), &g, |_, _| 1.0, |_, _| -1.0)?;
                    acc(&mut grads, *a, ga)?;
                    acc(&mut grads, *b, gb)?;
                }
                Op::Mul(a, b) => {
                    let (ga, gb) = binary_grads(val(*a), val(*b), &g, |_, y| y, |x, _| x)?;
                    acc(&mut grads, *a, ga)?;
                    acc(&mut grads, *b, gb)?;
                }
                Op::Div(a, b) => {
                    let (ga, gb) =
                        binary_grads(val(*a), val(*b), &g, |_, y| 1.0 / y, |x, y| -x / (y * y))?;
                    acc(&mut grads, *a, ga)?;
                    acc(&mut grads, *b, gb)?;
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let ga = g.reshape(val(*a).shape())?;
                    acc(&mut grads, *a, ga)?;
                }
                Op::MulScalar(a, s) => acc(&mut grads, *a, g.scale(*s))?,
                Op::Exp(a) => acc(&mut grads, *a, g.mul(&node.value)?)?,
                Op::Silu(a) => {
                    let ga = g.zip_map(val(*a), |g, x| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })?;
                    acc(&mut grads, *a, ga)?;
                }
                Op::Softplus(a) => {
                    acc(&mut grads, *a, g.zip_map(val(*a), |g, x| g * sigmoid(x))?)?;
                }
                Op::Abs(a) => {
                    acc(&mut grads, *a, g.zip_map(val(*a), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })?)?;
                }
                Op::Square(a) => acc(&mut grads, *a, g.zip_map(val(*a), |g, x| 2.0 * g * x)?)?,
                Op::Sum(a) => acc(&mut grads, *a, Tensor::full(val(*a).shape(), g.data()[0]))?,
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    acc(&mut grads, *a, Tensor::full(val(*a).shape(), g.data()[0] / n))?;
                }
                Op::SpatialMean(a) => {
                    let shape = val(*a).shape().to_vec();
                    let plane = shape[1] * shape[2];
                    let mut ga = vec![0.0; val(*a).len()];
                    for (c, chunk) in ga.chunks_mut(plane).enumerate() {
                        chunk.fill(g.data()[c] / plane as f64);
                    }
                    acc(&mut grads, *a, Tensor::new(&shape, ga)?)?;
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose2()?)?,
                Op::Conv2d { x, w, b, geom } => {
                    let gx = conv2d_grad_input(&g, val(*w), val(*x).shape(), *geom)?;
                    let gw = conv2d_grad_weight(&g, val(*x), val(*w).shape(), *geom)?;
                    if let Some(b) = b {
                        acc(&mut grads, *b, conv2d_grad_bias(&g)?)?;
                    }
                    acc(&mut grads, *x, gx)?;
                    acc(&mut grads, *w, gw)?;
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (m, k, n) = (xv.dim(0), xv.dim(1), wv.dim(0));
                    let gd = g.data();
                    let mut gx = vec![0.0; m * k];
                    let mut gw = vec![0.0; n * k];
                    for r in 0..m {
                        let xr = &xv.data()[r * k..(r + 1) * k];
                        let gxr = &mut gx[r * k..(r + 1) * k];
                        for c in 0..n {
                            let gv = gd[r * n + c];
                            if gv == 0.0 {
                                continue;
                            }
                            let wr = &wv.data()[c * k..(c + 1) * k];
                            let gwr = &mut gw[c * k..(c + 1) * k];
                            for j in 0..k {
                                gxr[j] += gv * wr[j];
                                gwr[j] += gv * xr[j];
                            }
                        }
                    }
                    if let Some(b) = b {
                        let mut gb = vec![0.0; n];
                        for r in 0..m {
                            for c in 0..n {
                                gb[c] += gd[r * n + c];
                            }
                        }
                        acc(&mut grads, *b, Tensor::new(&[n], gb)?)?;
                    }
                    acc(&mut grads, *x, Tensor::new(&[m, k], gx)?)?;
                    acc(&mut grads, *w, Tensor::new(&[n, k], gw)?)?;
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = val(*x);
                    let gam = val(*gamma).data();
                    let k = xv.dim(1);
                    let mut gx = vec![0.0; xv.len()];
                    let mut gg = vec![0.0; k];
                    let mut gb = vec![0.0; k];
                    for ((row, grow), gxr) in xv.data().chunks(k).zip(g.data().chunks(k)).zip(gx.chunks_mut(k)) {
                        let (mean, rstd) = layer_norm_stats(row, *eps);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..k {
                            let xh = (row[j] - mean) * rstd;
                            gg[j] += grow[j] * xh;
                            gb[j] += grow[j];
                            let gxh = grow[j] * gam[j];
                            m1 += gxh;
                            m2 += gxh * xh;
                        }
                        m1 /= k as f64;
                        m2 /= k as f64;
                        for j in 0..k {
                            let xh = (row[j] - mean) * rstd;
                            gxr[j] = rstd * (grow[j] * gam[j] - m1 - xh * m2);
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape(), gx)?)?;
                    acc(&mut grads, *gamma, Tensor::new(&[k], gg)?)?;
                    acc(&mut grads, *beta, Tensor::new(&[k], gb)?)?;
                }
                Op::PixelShuffle(a, r) => acc(&mut grads, *a, pixel_unshuffle(&g, *r)?)?,
                Op::PixelUnshuffle(a, r) => acc(&mut grads, *a, pixel_shuffle(&g, *r)?)?,
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = val(p).shape().to_vec();
                        let n = val(p).len();
                        let part = Tensor::new(&shape, g.data()[offset..offset + n].to_vec())?;
                        offset += n;
                        acc(&mut grads, p, part)?;
                    }
                }
                Op::Scan {
                    x,
                    delta,
                    a,
                    b,
                    c,
                    d,
                    mode,
                    cache,
                } => {
                    let params = SsmParams::new(val(*a).clone(), val(*d).clone())?;
                    let inputs = ScanInputs {
                        x: val(*x).clone(),
                        delta: val(*delta).clone(),
                        b: val(*b).clone(),
                        c: val(*c).clone(),
                    };
                    let opts = ScanOptions {
                        discretization: *mode,
                        ..Default::default()
                    };
                    let sg = scan_backward_cached(cache, &params, &inputs, &opts, &g)?;
                    acc(&mut grads, *x, sg.x)?;
                    acc(&mut grads, *delta, sg.delta)?;
                    acc(&mut grads, *b, sg.b)?;
                    acc(&mut grads, *c, sg.c)?;
                    acc(&mut grads, *a, sg.a)?;
                    acc(&mut grads, *d, sg.d)?;
                }
                Op::FftL1 { x, target } => {
                    let xv = val(*x);
                    let (h, w) = (xv.dim(1), xv.dim(2));
                    let plane = h * w;
                    let scale = g.data()[0] / target.len() as f64;
                    let spec = fft_residual_spectrum(xv, target)?;
                    let mut gx = Vec::with_capacity(xv.len());
                    for ch in spec {
                        // ∂|E_k|/∂e_j = Re(conj(E_k/|E_k|)·ω^{kj}); summing over k
                        // is a forward DFT of the conjugated phase field.
                        let mut phase: Vec<Complex64> = ch
                            .iter()
                            .map(|z| {
                                let r = z.norm();
                                if r > 0.0 {
                                    (z / r).conj()
                                } else {
                                    Complex64::new(0.0, 0.0)
                                }
                            })
                            .collect();
                        dft2_complex(&mut phase, h, w, false, DftPath::Auto);
                        gx.extend(phase.iter().map(|z| z.re * scale));
                    }
                    debug_assert_eq!(gx.len(), plane * xv.dim(0));
                    acc(&mut grads, *x, Tensor::new(xv.shape(), gx)?)?;
                }
            }
        }
        Ok(Grads { grads })
    }
}
