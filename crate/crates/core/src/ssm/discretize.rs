//! Zero-order-hold discretization of a diagonal continuous-time SSM.
//!
//! With a diagonal `A` every state evolves independently, so
//! `Ā = exp(ΔA)` and `B̄ = (ΔA)⁻¹(exp(ΔA) − I)ΔB` reduce to per-element
//! scalars: `Ā_n = exp(Δ a_n)` and `B̄_n = f(Δ, a_n) · b_n` with
//! `f(Δ, a) = (exp(Δa) − 1) / a`.

use crate::error::{invalid, Result};

/// Below this `|Δ·a|` the input gain uses its second-order series.
pub const SERIES_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Discretization {
    /// Exact zero-order hold for both `Ā` and `B̄`.
    #[default]
    Zoh,
    /// `Ā = exp(ΔA)` but `B̄ = ΔB` (first-order Euler input gain).
    Simplified,
}

/// Input gain `f(Δ, a)` such that `B̄ = f · b`.
#[inline]
pub fn input_gain(a: f64, delta: f64, mode: Discretization) -> f64 {
    match mode {
        Discretization::Simplified => delta,
        Discretization::Zoh => {
            let z = delta * a;
            if z.abs() < SERIES_THRESHOLD {
                delta * (1.0 + 0.5 * z)
            } else {
                z.exp_m1() / a
            }
        }
    }
}

/// Partial derivatives `(∂f/∂Δ, ∂f/∂a)` of the input gain.
#[inline]
pub fn input_gain_partials(a: f64, delta: f64, mode: Discretization) -> (f64, f64) {
    match mode {
        Discretization::Simplified => (1.0, 0.0),
        Discretization::Zoh => {
            let z = delta * a;
            if z.abs() < SERIES_THRESHOLD {
                return (1.0 + z, 0.5 * delta * delta);
            }
            let d_delta = z.exp();
            // ∂f/∂a = Δ² g(z), g(z) = (z e^z − (e^z − 1)) / z²
            let g = if z.abs() < 1e-3 {
                0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z / 144.0)))
            } else {
                (z * z.exp() - z.exp_m1()) / (z * z)
            };
            (d_delta, delta * delta * g)
        }
    }
}

/// `(Ā, f, ∂f/∂Δ, ∂f/∂a)` from a single `exp`/`expm1` pair.
#[inline]
pub fn zoh_terms(a: f64, delta: f64, mode: Discretization) -> (f64, f64, f64, f64) {
    let z = delta * a;
    let e = z.exp();
    match mode {
        Discretization::Simplified => (e, delta, 1.0, 0.0),
        Discretization::Zoh => {
            if z.abs() < SERIES_THRESHOLD {
                return (e, delta * (1.0 + 0.5 * z), 1.0 + z, 0.5 * delta * delta);
            }
            let em1 = z.exp_m1();
            let g = if z.abs() < 1e-3 {
                0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z / 144.0)))
            } else {
                (z * e - em1) / (z * z)
            };
            (e, em1 / a, e, delta * delta * g)
        }
    }
}

/// Discretize one row of a diagonal SSM: returns `(Ā, B̄)`.
pub fn discretize_zoh(a_row: &[f64], delta: f64, b_row: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    discretize_with(a_row, delta, b_row, Discretization::Zoh)
}

pub fn discretize_with(
    a_row: &[f64],
    delta: f64,
    b_row: &[f64],
    mode: Discretization,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(delta > 0.0) || !delta.is_finite() {
        return invalid(format!("step size must be positive and finite, got {delta}"));
    }
    if a_row.len() != b_row.len() {
        return invalid(format!(
            "A row has {} states, B row has {}",
            a_row.len(),
            b_row.len()
        ));
    }
    let a_bar = a_row.iter().map(|&a| (delta * a).exp()).collect();
    let b_bar = a_row
        .iter()
        .zip(b_row)
        .map(|(&a, &b)| input_gain(a, delta, mode) * b)
        .collect();
    Ok((a_bar, b_bar))
}
