//! Decomposition fidelity metrics and their forward-propagated upper bounds.
//!
//! Activations are K×M with one sample per column. Weights are K×N with one
//! output neuron per column, so `y = WᵀX`. Bounds are averaged from their
//! pointwise forms so that dominance holds sample by sample.

use serde::{Deserialize, Serialize};

use crate::calib::{CandidateKind, ZERO_NORM_EPS};
use crate::error::{EspaceError, Result};
use crate::linalg::{dot, t_matmul, Matrix};
use crate::projector::{reconstruct, Projection};
use crate::toymodel::LayerId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub layer_id: LayerId,
    pub kind: CandidateKind,
    pub mse: f64,
    pub nmse: f64,
    pub go_mse: f64,
    pub go_bound: f64,
    pub nl_mse_taylor: f64,
    pub nl_bound: f64,
}

impl FidelityReport {
    /// Evaluates every metric for one (layer, candidate) pair.
    pub fn evaluate(w: &Matrix, x: &Matrix, g: &Matrix, p: &Projection) -> Result<Self> {
        Ok(FidelityReport {
            layer_id: p.layer_id(),
            kind: p.kind(),
            mse: mse(x, p)?,
            nmse: nmse(x, p)?,
            go_mse: go_mse(w, x, p)?,
            go_bound: go_bound(w, x, p)?,
            nl_mse_taylor: nl_mse_taylor(g, x, p)?,
            nl_bound: nl_bound(g, x, p)?,
        })
    }

    pub fn bounds_hold(&self) -> bool {
        self.go_mse <= self.go_bound + 1e-9 * self.go_bound.abs()
            && self.nl_mse_taylor <= self.nl_bound + 1e-9 * self.nl_bound.abs()
    }
}

fn check_cols(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(EspaceError::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean squared reconstruction error per activation vector.
pub fn mse(x: &Matrix, p: &Projection) -> Result<f64> {
    let err = x.sub(&reconstruct(p, x)?)?;
    Ok(err.frobenius_norm_sq() / x.cols().max(1) as f64)
}

/// Mean over nonzero columns of `‖x − x̃‖² / ‖x‖²`.
pub fn nmse(x: &Matrix, p: &Projection) -> Result<f64> {
    let err = x.sub(&reconstruct(p, x)?)?;
    let norms = x.col_norms_sq();
    let errs = err.col_norms_sq();
    let mut total = 0.0;
    let mut count = 0usize;
    for (e, n) in errs.iter().zip(&norms) {
        if n.sqrt() >= ZERO_NORM_EPS {
            total += e / n;
            count += 1;
        }
    }
    if count == 0 {
        return Err(EspaceError::UndefinedMetric("nmse of all-zero activations".into()));
    }
    Ok(total / count as f64)
}

fn check_weight(w: &Matrix, x: &Matrix) -> Result<()> {
    if w.rows() != x.rows() {
        return Err(EspaceError::shape(format!(
            "weight has K={} but activations have K={}",
            w.rows(),
            x.rows()
        )));
    }
    Ok(())
}

/// Mean over all output entries of `(y − ỹ)²`.
pub fn go_mse(w: &Matrix, x: &Matrix, p: &Projection) -> Result<f64> {
    check_weight(w, x)?;
    let y = t_matmul(w, x)?;
    let y_tilde = t_matmul(w, &reconstruct(p, x)?)?;
    let count = (y.rows() * y.cols()).max(1) as f64;
    Ok(y.sub(&y_tilde)?.frobenius_norm_sq() / count)
}

/// Mean over (n, m) of `2‖w‖²‖x‖² − 2⟨w,x⟩⟨w,x̃⟩`.
pub fn go_bound(w: &Matrix, x: &Matrix, p: &Projection) -> Result<f64> {
    check_weight(w, x)?;
    let x_tilde = reconstruct(p, x)?;
    let y = t_matmul(w, x)?;
    let y_tilde = t_matmul(w, &x_tilde)?;
    let w_norms = w.col_norms_sq();
    let x_norms = x.col_norms_sq();
    let cross: f64 = y.as_slice().iter().zip(y_tilde.as_slice()).map(|(a, b)| a * b).sum();
    let norms: f64 = w_norms.iter().sum::<f64>() * x_norms.iter().sum::<f64>();
    let count = (w.cols() * x.cols()).max(1) as f64;
    Ok((2.0 * norms - 2.0 * cross) / count)
}

/// Mean over columns of `(gᵀ(x̃ − x))²`, the first-order loss change squared.
pub fn nl_mse_taylor(g: &Matrix, x: &Matrix, p: &Projection) -> Result<f64> {
    check_cols(g, x, "nl_mse_taylor")?;
    let delta = reconstruct(p, x)?.sub(x)?;
    let total: f64 = (0..x.cols())
        .map(|m| {
            let d = dot(&g.col(m), &delta.col(m));
            d * d
        })
        .sum();
    Ok(total / x.cols().max(1) as f64)
}

/// Mean over columns of `2‖g‖²‖x‖² − 2⟨g,x⟩⟨g,x̃⟩`.
pub fn nl_bound(g: &Matrix, x: &Matrix, p: &Projection) -> Result<f64> {
    check_cols(g, x, "nl_bound")?;
    let x_tilde = reconstruct(p, x)?;
    let total: f64 = (0..x.cols())
        .map(|m| {
            let (gm, xm, tm) = (g.col(m), x.col(m), x_tilde.col(m));
            pointwise_bound(&gm, &xm, &tm)
        })
        .sum();
    Ok(total / x.cols().max(1) as f64)
}

/// `2‖a‖²‖x‖² − 2⟨a,x⟩⟨a,x̃⟩` for a single (weight or gradient, activation) pair.
pub fn pointwise_bound(a: &[f64], x: &[f64], x_tilde: &[f64]) -> f64 {
    2.0 * dot(a, a) * dot(x, x) - 2.0 * dot(a, x) * dot(a, x_tilde)
}

/// `(⟨a, x⟩ − ⟨a, x̃⟩)²` for a single pair.
pub fn pointwise_error(a: &[f64], x: &[f64], x_tilde: &[f64]) -> f64 {
    let d = dot(a, x) - dot(a, x_tilde);
    d * d
}
