//! Streaming estimation of activation correlation matrices.
//!
//! Each calibration batch contributes one estimate `C⁽ⁱ⁾`; `finalize` returns
//! the mean over batches. Batches must share their column count so that the
//! mean of batch means equals the sample mean.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{EspaceError, Result};
use crate::linalg::{matmul, matmul_t, Matrix};

/// Columns with a norm below this are skipped by the normalized estimators.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// The six constructions of a projection matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    /// Activation auto-correlation; minimizes activation MSE.
    Mse,
    /// Input-normalized auto-correlation; minimizes NMSE.
    Nmse,
    /// GEMM-output bound matrix `C_X C_W + C_W C_X`.
    Go,
    /// Normalized GEMM-output bound matrix.
    GoNorm,
    /// Network-loss bound matrix built from activation gradients.
    Nl,
    /// Normalized network-loss bound matrix.
    NlNorm,
}

impl CandidateKind {
    /// All kinds in tie-break order.
    pub const ALL: [CandidateKind; 6] = [
        CandidateKind::Mse,
        CandidateKind::Nmse,
        CandidateKind::Go,
        CandidateKind::GoNorm,
        CandidateKind::Nl,
        CandidateKind::NlNorm,
    ];

    pub fn code(self) -> u32 {
        match self {
            CandidateKind::Mse => 0,
            CandidateKind::Nmse => 1,
            CandidateKind::Go => 2,
            CandidateKind::GoNorm => 3,
            CandidateKind::Nl => 4,
            CandidateKind::NlNorm => 5,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        CandidateKind::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| EspaceError::format(0, format!("unknown candidate kind code {code}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CandidateKind::Mse => "mse",
            CandidateKind::Nmse => "nmse",
            CandidateKind::Go => "go",
            CandidateKind::GoNorm => "go_norm",
            CandidateKind::Nl => "nl",
            CandidateKind::NlNorm => "nl_norm",
        }
    }

    /// Whether building this kind needs activation gradients.
    pub fn needs_gradients(self) -> bool {
        matches!(self, CandidateKind::Nl | CandidateKind::NlNorm)
    }

    pub fn is_normalized(self) -> bool {
        matches!(
            self,
            CandidateKind::Nmse | CandidateKind::GoNorm | CandidateKind::NlNorm
        )
    }
}

impl fmt::Display for CandidateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CandidateKind {
    type Err = EspaceError;

    fn from_str(s: &str) -> Result<Self> {
        CandidateKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| EspaceError::config("candidates", format!("unknown candidate kind `{s}`")))
    }
}

/// Running sum of per-batch correlation estimates.
#[derive(Debug, Clone)]
pub struct CorrAccumulator {
    kind: CandidateKind,
    k: usize,
    sum: Matrix,
    batch_count: usize,
}

impl CorrAccumulator {
    pub fn new(kind: CandidateKind, k: usize) -> Self {
        CorrAccumulator {
            kind,
            k,
            sum: Matrix::zeros(k, k),
            batch_count: 0,
        }
    }

    /// Rebuilds an accumulator from a serialized snapshot.
    pub fn from_parts(kind: CandidateKind, sum: Matrix, batch_count: usize) -> Result<Self> {
        if !sum.is_square() {
            return Err(EspaceError::shape("accumulator sum must be square"));
        }
        Ok(CorrAccumulator {
            kind,
            k: sum.rows(),
            sum,
            batch_count,
        })
    }

    pub fn kind(&self) -> CandidateKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn batch_count(&self) -> usize {
        self.batch_count
    }

    pub fn sum(&self) -> &Matrix {
        &self.sum
    }

    fn expect_kind(&self, allowed: &[CandidateKind], op: &str) -> Result<()> {
        if !allowed.contains(&self.kind) {
            return Err(EspaceError::Calibration(format!(
                "{op} called on a {} accumulator",
                self.kind
            )));
        }
        Ok(())
    }

    fn expect_rows(&self, x: &Matrix, what: &str) -> Result<()> {
        if x.rows() != self.k {
            return Err(EspaceError::shape(format!(
                "{what} has {} rows, accumulator dimension is {}",
                x.rows(),
                self.k
            )));
        }
        if x.cols() == 0 {
            return Err(EspaceError::shape(format!("{what} has no columns")));
        }
        Ok(())
    }

    fn add_estimate(&mut self, estimate: &Matrix) {
        self.sum.add_assign(estimate).expect("estimate is K×K");
        self.sum.symmetrize();
        self.batch_count += 1;
    }

    /// Adds `X·Xᵀ / M`.
    pub fn accumulate_mse(&mut self, x: &Matrix) -> Result<()> {
        self.expect_kind(&[CandidateKind::Mse], "accumulate_mse")?;
        self.expect_rows(x, "activation batch")?;
        let estimate = matmul_t(x, x)?.scale(1.0 / x.cols() as f64);
        self.add_estimate(&estimate);
        Ok(())
    }

    /// Adds the mean of `x̂x̂ᵀ` over columns with nonzero norm, `x̂ = x/‖x‖`.
    pub fn accumulate_nmse(&mut self, x: &Matrix) -> Result<()> {
        self.expect_kind(&[CandidateKind::Nmse], "accumulate_nmse")?;
        self.expect_rows(x, "activation batch")?;
        match normalized_outer_mean(x) {
            Some(estimate) => self.add_estimate(&estimate),
            None => warn!("accumulate_nmse: batch has only zero-norm columns, skipped"),
        }
        Ok(())
    }

    /// Adds `(XXᵀGGᵀ + GGᵀXXᵀ) / M²` for one sequence. For `NlNorm` the
    /// estimate is further divided by `(‖X‖²_F / M) · (‖G‖²_F / M)`.
    pub fn accumulate_nl(&mut self, x: &Matrix, g: &Matrix) -> Result<()> {
        self.expect_kind(&[CandidateKind::Nl, CandidateKind::NlNorm], "accumulate_nl")?;
        self.expect_rows(x, "activation batch")?;
        if x.shape() != g.shape() {
            return Err(EspaceError::shape(format!(
                "activation {:?} and gradient {:?} shapes differ",
                x.shape(),
                g.shape()
            )));
        }
        let m = x.cols() as f64;
        if self.kind == CandidateKind::NlNorm {
            let xs = x.frobenius_norm_sq() / m;
            let gs = g.frobenius_norm_sq() / m;
            if gs < ZERO_NORM_EPS * ZERO_NORM_EPS || xs < ZERO_NORM_EPS * ZERO_NORM_EPS {
                warn!("accumulate_nl: zero activation or gradient batch skipped for nl_norm");
                return Ok(());
            }
            let estimate = combine_go(&matmul_t(x, x)?, &matmul_t(g, g)?)?.scale(1.0 / (m * m * xs * gs));
            self.add_estimate(&estimate);
        } else {
            let estimate = combine_go(&matmul_t(x, x)?, &matmul_t(g, g)?)?.scale(1.0 / (m * m));
            self.add_estimate(&estimate);
        }
        Ok(())
    }

    /// Sums another accumulator of the same kind into this one.
    pub fn merge(&mut self, other: &CorrAccumulator) -> Result<()> {
        if other.kind != self.kind || other.k != self.k {
            return Err(EspaceError::Calibration(format!(
                "cannot merge {}/{} into {}/{}",
                other.kind, other.k, self.kind, self.k
            )));
        }
        self.sum.add_assign(&other.sum)?;
        self.sum.symmetrize();
        self.batch_count += other.batch_count;
        Ok(())
    }

    /// Mean of the accumulated per-batch estimates.
    pub fn finalize(&self) -> Result<Matrix> {
        if self.batch_count == 0 {
            return Err(EspaceError::Calibration(format!(
                "{} accumulator finalized with no batches",
                self.kind
            )));
        }
        let mut out = self.sum.scale(1.0 / self.batch_count as f64);
        out.symmetrize();
        Ok(out)
    }
}

/// Mean of normalized outer products over the nonzero columns of `x`.
fn normalized_outer_mean(x: &Matrix) -> Option<Matrix> {
    let norms = x.col_norms_sq();
    let keep: Vec<usize> = norms
        .iter()
        .enumerate()
        .filter(|(_, n)| n.sqrt() >= ZERO_NORM_EPS)
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return None;
    }
    let mut normalized = Matrix::zeros(x.rows(), keep.len());
    for (dst, &src) in keep.iter().enumerate() {
        let inv = 1.0 / norms[src].sqrt();
        for r in 0..x.rows() {
            normalized[(r, dst)] = x[(r, src)] * inv;
        }
    }
    let outer = matmul_t(&normalized, &normalized).ok()?;
    Some(outer.scale(1.0 / keep.len() as f64).symmetrized())
}

/// Weight auto-correlation `W·Wᵀ / N` over the N columns of a K×N weight.
pub fn weight_corr(w: &Matrix) -> Matrix {
    let n = w.cols().max(1) as f64;
    matmul_t(w, w).expect("W·Wᵀ is always defined").scale(1.0 / n).symmetrized()
}

/// Normalized weight auto-correlation: mean of `ŵŵᵀ` over nonzero columns.
/// Returns the zero matrix when every column is zero.
pub fn weight_corr_normalized(w: &Matrix) -> Matrix {
    normalized_outer_mean(w).unwrap_or_else(|| Matrix::zeros(w.rows(), w.rows()))
}

/// `C_X·C_W + C_W·C_X`, the bound matrix for GEMM-output error.
pub fn combine_go(c_x: &Matrix, c_w: &Matrix) -> Result<Matrix> {
    if !c_x.is_square() || c_x.shape() != c_w.shape() {
        return Err(EspaceError::shape(format!(
            "combine_go: {:?} and {:?}",
            c_x.shape(),
            c_w.shape()
        )));
    }
    let ab = matmul(c_x, c_w)?;
    let mut out = ab.add(&ab.transpose())?;
    out.symmetrize();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{sym_evd, OrderingMode};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mse_acc(k: usize) -> CorrAccumulator {
        CorrAccumulator::new(CandidateKind::Mse, k)
    }

    #[test]
    fn kind_codes_are_stable() {
        for (i, k) in CandidateKind::ALL.iter().enumerate() {
            assert_eq!(k.code(), i as u32);
            assert_eq!(CandidateKind::from_code(i as u32).unwrap(), *k);
            assert_eq!(k.as_str().parse::<CandidateKind>().unwrap(), *k);
        }
        assert!(CandidateKind::from_code(6).is_err());
    }

    #[test]
    fn mse_hand_example() {
        let mut acc = mse_acc(2);
        acc.accumulate_mse(&Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(acc.finalize().unwrap(), Matrix::diag(&[2.0, 0.5]));
    }

    #[test]
    fn mse_zero_input() {
        let mut acc = mse_acc(3);
        acc.accumulate_mse(&Matrix::zeros(3, 4)).unwrap();
        assert_eq!(acc.finalize().unwrap(), Matrix::zeros(3, 3));
        assert_eq!(acc.batch_count(), 1);
    }

    #[test]
    fn mse_single_column_is_outer_product() {
        let mut acc = mse_acc(2);
        acc.accumulate_mse(&Matrix::column(&[1.0, -3.0])).unwrap();
        assert_eq!(
            acc.finalize().unwrap(),
            Matrix::from_rows(&[&[1.0, -3.0], &[-3.0, 9.0]])
        );
    }

    #[test]
    fn mse_shape_and_kind_errors() {
        let mut acc = mse_acc(2);
        assert!(matches!(
            acc.accumulate_mse(&Matrix::zeros(3, 2)),
            Err(EspaceError::Shape(_))
        ));
        assert!(matches!(
            acc.accumulate_nmse(&Matrix::zeros(2, 2)),
            Err(EspaceError::Calibration(_))
        ));
    }

    #[test]
    fn nmse_hand_example() {
        let mut acc = CorrAccumulator::new(CandidateKind::Nmse, 2);
        acc.accumulate_nmse(&Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(acc.finalize().unwrap(), Matrix::diag(&[0.5, 0.5]));
    }

    #[test]
    fn nmse_single_column_unit_trace() {
        let mut acc = CorrAccumulator::new(CandidateKind::Nmse, 3);
        acc.accumulate_nmse(&Matrix::column(&[1.0, 2.0, -2.0])).unwrap();
        assert!((acc.finalize().unwrap().trace() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nmse_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::random_normal(4, 6, 1.0, &mut rng);
        let mut a = CorrAccumulator::new(CandidateKind::Nmse, 4);
        let mut b = CorrAccumulator::new(CandidateKind::Nmse, 4);
        a.accumulate_nmse(&x).unwrap();
        b.accumulate_nmse(&x.scale(10.0)).unwrap();
        assert!(a.finalize().unwrap().max_abs_diff(&b.finalize().unwrap()) < 1e-15);
    }

    #[test]
    fn nmse_skips_zero_columns() {
        let mut acc = CorrAccumulator::new(CandidateKind::Nmse, 2);
        acc.accumulate_nmse(&Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 0.0]])).unwrap();
        assert_eq!(acc.finalize().unwrap(), Matrix::diag(&[1.0, 0.0]));
    }

    #[test]
    fn nmse_all_zero_batch_accumulates_nothing() {
        let mut acc = CorrAccumulator::new(CandidateKind::Nmse, 2);
        acc.accumulate_nmse(&Matrix::zeros(2, 3)).unwrap();
        assert_eq!(acc.batch_count(), 0);
        assert!(matches!(acc.finalize(), Err(EspaceError::Calibration(_))));
    }

    #[test]
    fn weight_corr_examples() {
        assert_eq!(weight_corr(&Matrix::identity(2)), Matrix::diag(&[0.5, 0.5]));
        assert_eq!(weight_corr(&Matrix::zeros(2, 3)), Matrix::zeros(2, 2));
        let w = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]]);
        let evd = sym_evd(&weight_corr(&w), OrderingMode::Algebraic).unwrap();
        assert!(evd.eigenvalues[1].abs() < 1e-12);
        assert!(evd.eigenvalues[0] > 1.0);
    }

    #[test]
    fn combine_go_examples() {
        let c = combine_go(&Matrix::diag(&[2.0, 1.0]), &Matrix::diag(&[3.0, 4.0])).unwrap();
        assert_eq!(c, Matrix::diag(&[12.0, 8.0]));

        let cx = Matrix::from_rows(&[&[2.0, 0.5], &[0.5, 1.0]]);
        assert_eq!(combine_go(&cx, &Matrix::identity(2)).unwrap(), cx.scale(2.0));

        assert!(matches!(
            combine_go(&Matrix::identity(2), &Matrix::identity(3)),
            Err(EspaceError::Shape(_))
        ));
    }

    #[test]
    fn nl_hand_example() {
        let mut acc = CorrAccumulator::new(CandidateKind::Nl, 2);
        let e1 = Matrix::column(&[1.0, 0.0]);
        acc.accumulate_nl(&e1, &e1).unwrap();
        assert_eq!(acc.finalize().unwrap(), Matrix::diag(&[2.0, 0.0]));
    }

    #[test]
    fn nl_zero_gradient() {
        let mut acc = CorrAccumulator::new(CandidateKind::Nl, 2);
        acc.accumulate_nl(&Matrix::column(&[1.0, 2.0]), &Matrix::zeros(2, 1)).unwrap();
        assert_eq!(acc.finalize().unwrap(), Matrix::zeros(2, 2));

        let mut norm = CorrAccumulator::new(CandidateKind::NlNorm, 2);
        norm.accumulate_nl(&Matrix::column(&[1.0, 2.0]), &Matrix::zeros(2, 1)).unwrap();
        assert_eq!(norm.batch_count(), 0);
    }

    #[test]
    fn nl_norm_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Matrix::random_normal(3, 5, 1.0, &mut rng);
        let g = Matrix::random_normal(3, 5, 1.0, &mut rng);
        let mut a = CorrAccumulator::new(CandidateKind::NlNorm, 3);
        let mut b = CorrAccumulator::new(CandidateKind::NlNorm, 3);
        a.accumulate_nl(&x, &g).unwrap();
        b.accumulate_nl(&x.scale(7.0), &g.scale(0.01)).unwrap();
        assert!(a.finalize().unwrap().max_abs_diff(&b.finalize().unwrap()) < 1e-13);
    }

    #[test]
    fn nl_shape_mismatch() {
        let mut acc = CorrAccumulator::new(CandidateKind::Nl, 2);
        assert!(matches!(
            acc.accumulate_nl(&Matrix::zeros(2, 2), &Matrix::zeros(2, 3)),
            Err(EspaceError::Shape(_))
        ));
    }

    #[test]
    fn finalize_examples() {
        let mut acc = mse_acc(2);
        assert!(matches!(acc.finalize(), Err(EspaceError::Calibration(_))));

        let x = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, -1.0]]);
        acc.accumulate_mse(&x).unwrap();
        let once = acc.finalize().unwrap();
        acc.accumulate_mse(&x).unwrap();
        assert_eq!(acc.finalize().unwrap(), once);

        let mut nl = CorrAccumulator::new(CandidateKind::Nl, 2);
        // per-sequence estimates diag(2,0) and diag(0,2)
        nl.accumulate_nl(&Matrix::column(&[1.0, 0.0]), &Matrix::column(&[1.0, 0.0])).unwrap();
        nl.accumulate_nl(&Matrix::column(&[0.0, 1.0]), &Matrix::column(&[0.0, 1.0])).unwrap();
        assert_eq!(nl.finalize().unwrap(), Matrix::diag(&[1.0, 1.0]));
    }

    #[test]
    fn merge_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batches: Vec<Matrix> = (0..4).map(|_| Matrix::random_normal(3, 5, 1.0, &mut rng)).collect();
        let mut all = mse_acc(3);
        let mut left = mse_acc(3);
        let mut right = mse_acc(3);
        for (i, b) in batches.iter().enumerate() {
            all.accumulate_mse(b).unwrap();
            if i % 2 == 0 {
                left.accumulate_mse(b).unwrap();
            } else {
                right.accumulate_mse(b).unwrap();
            }
        }
        left.merge(&right).unwrap();
        assert_eq!(left.batch_count(), 4);
        assert!(left.finalize().unwrap().max_abs_diff(&all.finalize().unwrap()) < 1e-14);
        assert!(left.merge(&CorrAccumulator::new(CandidateKind::Nmse, 3)).is_err());
    }

    proptest! {
        #[test]
        fn mse_nmse_finalize_psd(k in 1usize..10, m in 1usize..12, b in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mse = mse_acc(k);
            let mut nmse = CorrAccumulator::new(CandidateKind::Nmse, k);
            for _ in 0..b {
                let x = Matrix::random_normal(k, m, 2.0, &mut rng);
                mse.accumulate_mse(&x).unwrap();
                nmse.accumulate_nmse(&x).unwrap();
                prop_assert!(mse.sum().asymmetry() <= 1e-12);
            }
            for c in [mse.finalize().unwrap(), nmse.finalize().unwrap()] {
                let evd = sym_evd(&c, OrderingMode::Algebraic).unwrap();
                let min = evd.eigenvalues.last().copied().unwrap();
                prop_assert!(min >= -1e-9 * c.trace().abs().max(1e-300));
            }
            prop_assert!((nmse.finalize().unwrap().trace() - 1.0).abs() <= 1e-10);
        }

        #[test]
        fn merge_order_invariance(k in 1usize..8, m in 1usize..8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batches: Vec<Matrix> = (0..6).map(|_| Matrix::random_normal(k, m, 1.0, &mut rng)).collect();
            let mut fwd = mse_acc(k);
            let mut rev = mse_acc(k);
            for b in &batches { fwd.accumulate_mse(b).unwrap(); }
            for b in batches.iter().rev() { rev.accumulate_mse(b).unwrap(); }
            let a = fwd.finalize().unwrap();
            let b = rev.finalize().unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-10 * a.trace().max(1e-300));
        }

        #[test]
        fn combine_go_symmetric_and_commuting_spectrum(
            k in 1usize..8,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::random_normal(k, k, 1.0, &mut rng).symmetrized();
            let b = Matrix::random_normal(k, k, 1.0, &mut rng).symmetrized();
            let c = combine_go(&a, &b).unwrap();
            prop_assert_eq!(c.asymmetry(), 0.0);

            let lam: Vec<f64> = (0..k).map(|i| (i as f64) + 1.0).collect();
            let mu: Vec<f64> = (0..k).map(|i| 2.0 * (k - i) as f64).collect();
            let d = combine_go(&Matrix::diag(&lam), &Matrix::diag(&mu)).unwrap();
            for i in 0..k {
                prop_assert_eq!(d[(i, i)], 2.0 * lam[i] * mu[i]);
            }
        }
    }
}
