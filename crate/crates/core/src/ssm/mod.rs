//! Diagonal selective state space model.
//!
//! Shapes follow the usual selective-scan layout:
//! `x, Δ: (batch, L, D_inner)`, `B, C: (batch, L, N)`, `A: (D_inner, N)`,
//! `D: (D_inner,)`. Each `(batch, channel)` pair is an independent lane
//! carrying an `N`-dimensional hidden state.

pub mod backward;
pub mod discretize;
pub mod scan;

pub use backward::{scan_backward, ScanGrads};
pub use discretize::{discretize_zoh, Discretization};
pub use scan::{combine, scan_parallel, scan_parallel_in, scan_sequential, ScanPair};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Time-invariant parameters: diagonal `A` and skip coefficients `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub a: Tensor,
    pub d: Tensor,
}

impl SsmParams {
    pub fn new(a: Tensor, d: Tensor) -> Result<Self> {
        a.expect_rank(2, "A")?;
        d.expect_shape(&[a.dim(0)], "D")?;
        if a.data().iter().any(|&v| !(v < 0.0)) {
            return invalid("A must be strictly negative");
        }
        Ok(Self { a, d })
    }

    /// `a[d, n] = −(n + 1)`, `D = 1`.
    pub fn s4d_real(d_inner: usize, n: usize) -> Self {
        let a = Tensor::from_fn(&[d_inner, n], |i| -((i % n) as f64 + 1.0));
        Self {
            a,
            d: Tensor::ones(&[d_inner]),
        }
    }

    pub fn d_inner(&self) -> usize {
        self.a.dim(0)
    }

    pub fn state_dim(&self) -> usize {
        self.a.dim(1)
    }
}

/// Per-step inputs of a selective scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanInputs {
    pub x: Tensor,
    pub delta: Tensor,
    pub b: Tensor,
    pub c: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub d_inner: usize,
    pub n: usize,
}

impl ScanInputs {
    /// Check shapes against `params` and positivity of `Δ`.
    pub fn validate(&self, params: &SsmParams) -> Result<ScanDims> {
        self.x.expect_rank(3, "x")?;
        let (batch, len, d_inner) = (self.x.dim(0), self.x.dim(1), self.x.dim(2));
        let n = params.state_dim();
        if d_inner != params.d_inner() {
            return shape_err(format!(
                "x has {d_inner} channels, A has {}",
                params.d_inner()
            ));
        }
        self.delta.expect_shape(&[batch, len, d_inner], "Δ")?;
        self.b.expect_shape(&[batch, len, n], "B")?;
        self.c.expect_shape(&[batch, len, n], "C")?;
        if let Some(bad) = self.delta.data().iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
            return invalid(format!("Δ must be positive and finite, found {bad}"));
        }
        Ok(ScanDims {
            batch,
            len,
            d_inner,
            n,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScanOptions {
    pub discretization: Discretization,
    /// Initial hidden state `(batch, D_inner, N)`; zero when absent.
    pub initial_state: Option<Tensor>,
    /// Return `h_L` alongside `y`.
    pub keep_final_state: bool,
}

impl ScanOptions {
    pub(crate) fn check_initial(&self, dims: &ScanDims) -> Result<()> {
        if let Some(h0) = &self.initial_state {
            h0.expect_shape(&[dims.batch, dims.d_inner, dims.n], "initial state")?;
        }
        Ok(())
    }

    pub(crate) fn h0(&self, b: usize, d: usize, n: usize, dims: &ScanDims) -> f64 {
        self.initial_state
            .as_ref()
            .map_or(0.0, |h| h.data()[(b * dims.d_inner + d) * dims.n + n])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutput {
    pub y: Tensor,
    pub final_state: Option<Tensor>,
}
