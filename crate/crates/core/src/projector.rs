//! Projection matrices built from correlation eigenvectors, the rank policy,
//! and weight folding for inference.

use crate::calib::CandidateKind;
use crate::error::{EspaceError, Result};
use crate::linalg::{matmul, sym_evd, t_matmul, Matrix, OrderingMode};
use crate::toymodel::LayerId;

/// Max-abs tolerance on `PᵀP = I` accepted by [`Projection::new`].
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Static orthonormal K×L projection attached to one GEMM layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    layer_id: LayerId,
    kind: CandidateKind,
    p: Matrix,
    ordering: OrderingMode,
}

impl Projection {
    pub fn new(layer_id: LayerId, kind: CandidateKind, p: Matrix, ordering: OrderingMode) -> Result<Self> {
        if p.cols() == 0 || p.cols() > p.rows() {
            return Err(EspaceError::shape(format!(
                "projection must be K×L with 1 <= L <= K, got {:?}",
                p.shape()
            )));
        }
        let ptp = t_matmul(&p, &p)?;
        let err = ptp.max_abs_diff(&Matrix::identity(p.cols()));
        if err > ORTHONORMAL_TOL {
            return Err(EspaceError::Numerical {
                msg: "projection columns are not orthonormal".into(),
                residual: err,
            });
        }
        Ok(Projection {
            layer_id,
            kind,
            p,
            ordering,
        })
    }

    pub fn layer_id(&self) -> LayerId {
        self.layer_id
    }

    pub fn kind(&self) -> CandidateKind {
        self.kind
    }

    pub fn ordering(&self) -> OrderingMode {
        self.ordering
    }

    pub fn matrix(&self) -> &Matrix {
        &self.p
    }

    pub fn k(&self) -> usize {
        self.p.rows()
    }

    pub fn l(&self) -> usize {
        self.p.cols()
    }

    pub fn with_layer(mut self, layer_id: LayerId) -> Self {
        self.layer_id = layer_id;
        self
    }

    pub fn with_kind(mut self, kind: CandidateKind) -> Self {
        self.kind = kind;
        self
    }

    fn check_rows(&self, x: &Matrix, what: &str) -> Result<()> {
        if x.rows() != self.k() {
            return Err(EspaceError::shape(format!(
                "{what} has {} rows, projection expects K={}",
                x.rows(),
                self.k()
            )));
        }
        Ok(())
    }
}

/// First `l` eigenvectors of `c` as a projection.
///
/// The kind is recorded as given; callers choose which correlation matrix to pass.
pub fn build_projection(
    c: &Matrix,
    l: usize,
    ordering: OrderingMode,
    layer_id: LayerId,
    kind: CandidateKind,
) -> Result<Projection> {
    if !c.is_square() {
        return Err(EspaceError::shape("build_projection needs a square matrix"));
    }
    if l == 0 || l > c.rows() {
        return Err(EspaceError::shape(format!(
            "rank L={l} outside 1..={}",
            c.rows()
        )));
    }
    let evd = sym_evd(c, ordering)?;
    let p = evd.eigenvectors.col_range(0, l);
    Projection::new(layer_id, kind, p, ordering)
}

/// Fraction of inference parameters removed: `1 − L(K+N)/(KN)`.
pub fn compression_rate(k: usize, n: usize, l: usize) -> f64 {
    1.0 - (l * (k + n)) as f64 / (k * n) as f64
}

/// Largest power of two `L <= K` whose compression rate is at least `target_rate`.
pub fn choose_rank(k: usize, n: usize, target_rate: f64) -> Result<usize> {
    if k == 0 || n == 0 {
        return Err(EspaceError::Policy(format!("non-positive dimensions K={k}, N={n}")));
    }
    let mut best = None;
    let mut l = 1usize;
    while l <= k {
        if compression_rate(k, n, l) >= target_rate {
            best = Some(l);
        }
        l *= 2;
    }
    best.ok_or_else(|| {
        EspaceError::Policy(format!(
            "no power-of-two rank reaches compression {target_rate} for K={k}, N={n}"
        ))
    })
}

/// `Pᵀ·X`
pub fn project_activations(p: &Projection, x: &Matrix) -> Result<Matrix> {
    p.check_rows(x, "activation")?;
    t_matmul(&p.p, x)
}

/// `P·Pᵀ·X`
pub fn reconstruct(p: &Projection, x: &Matrix) -> Result<Matrix> {
    let z = project_activations(p, x)?;
    matmul(&p.p, &z)
}

/// `Pᵀ·W`, the folded L×N inference weight.
pub fn fold_weights(p: &Projection, w: &Matrix) -> Result<Matrix> {
    p.check_rows(w, "weight")?;
    t_matmul(&p.p, w)
}

/// `Σᵢ pᵢᵀ C pᵢ = trace(PᵀCP)` for orthonormal columns `p`.
pub fn rayleigh_objective(c: &Matrix, p: &Matrix) -> Result<f64> {
    let cp = matmul(c, p)?;
    Ok((0..p.cols())
        .map(|j| (0..p.rows()).map(|i| p[(i, j)] * cp[(i, j)]).sum::<f64>())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul_t, random_orthonormal};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LAYER: LayerId = LayerId(0);

    fn build(c: &Matrix, l: usize) -> Projection {
        build_projection(c, l, OrderingMode::Algebraic, LAYER, CandidateKind::Mse).unwrap()
    }

    fn proj_of(p: Matrix) -> Projection {
        Projection::new(LAYER, CandidateKind::Mse, p, OrderingMode::Algebraic).unwrap()
    }

    #[test]
    fn build_diagonal_picks_dominant_axis() {
        let p = build(&Matrix::diag(&[4.0, 1.0]), 1);
        assert_eq!(p.matrix(), &Matrix::column(&[1.0, 0.0]));
    }

    #[test]
    fn build_principal_eigenvector() {
        let p = build(&Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]), 1);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!(p.matrix().max_abs_diff(&Matrix::column(&[s, s])) < 1e-14);
    }

    #[test]
    fn build_full_rank_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Matrix::random_normal(5, 9, 1.0, &mut rng);
        let p = build(&matmul_t(&g, &g).unwrap(), 5);
        let ppt = matmul_t(p.matrix(), p.matrix()).unwrap();
        assert!(ppt.max_abs_diff(&Matrix::identity(5)) < 1e-10);
    }

    #[test]
    fn build_rejects_bad_rank() {
        let c = Matrix::identity(3);
        for l in [0, 4] {
            assert!(matches!(
                build_projection(&c, l, OrderingMode::Algebraic, LAYER, CandidateKind::Mse),
                Err(EspaceError::Shape(_))
            ));
        }
    }

    #[test]
    fn projection_rejects_non_orthonormal() {
        let err = Projection::new(
            LAYER,
            CandidateKind::Mse,
            Matrix::column(&[1.0, 1.0]),
            OrderingMode::Algebraic,
        )
        .unwrap_err();
        assert!(matches!(err, EspaceError::Numerical { .. }));
    }

    #[test]
    fn choose_rank_reference_shapes() {
        assert_eq!(choose_rank(2048, 6144, 0.5).unwrap(), 512);
        assert_eq!(choose_rank(2048, 2048, 0.5).unwrap(), 512);
        assert_eq!(choose_rank(8192, 2048, 0.5).unwrap(), 512);
        assert_eq!(choose_rank(2048, 8192, 0.5).unwrap(), 512);
    }

    #[test]
    fn choose_rank_zero_target_is_largest_nonnegative() {
        // K=N=8: L=4 gives exactly 0, L=8 is negative.
        assert_eq!(choose_rank(8, 8, 0.0).unwrap(), 4);
        assert_eq!(choose_rank(4, 1000, 0.0).unwrap(), 2);
    }

    #[test]
    fn choose_rank_unreachable_target() {
        assert!(matches!(choose_rank(16, 16, 1.0), Err(EspaceError::Policy(_))));
        assert!(matches!(choose_rank(2, 2, 0.9), Err(EspaceError::Policy(_))));
    }

    #[test]
    fn compression_rate_examples() {
        assert_eq!(compression_rate(64, 64, 16), 0.5);
        assert_eq!(compression_rate(2048, 2048, 512), 0.5);
        assert_eq!(compression_rate(10, 20, 0), 1.0);
        assert_eq!(compression_rate(2048, 8192, 512), 0.6875);
        assert!(compression_rate(8, 8, 8) < 0.0);
    }

    #[test]
    fn project_examples() {
        let p = proj_of(Matrix::column(&[1.0, 0.0]));
        assert_eq!(
            project_activations(&p, &Matrix::column(&[3.0, 4.0])).unwrap(),
            Matrix::from_rows(&[&[3.0]])
        );

        let s = std::f64::consts::FRAC_1_SQRT_2;
        let diag = proj_of(Matrix::column(&[s, s]));
        let z = project_activations(&diag, &Matrix::column(&[1.0, 1.0])).unwrap();
        assert!((z[(0, 0)] - 2f64.sqrt()).abs() < 1e-15);

        let q = proj_of(random_orthonormal(6, 6, 3).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::random_normal(6, 4, 1.0, &mut rng);
        let z = project_activations(&q, &x).unwrap();
        assert!((z.frobenius_norm() - x.frobenius_norm()).abs() < 1e-10);

        assert!(matches!(
            project_activations(&p, &Matrix::zeros(3, 1)),
            Err(EspaceError::Shape(_))
        ));
    }

    #[test]
    fn reconstruct_examples() {
        let p = proj_of(Matrix::column(&[1.0, 0.0]));
        assert_eq!(
            reconstruct(&p, &Matrix::column(&[3.0, 4.0])).unwrap(),
            Matrix::column(&[3.0, 0.0])
        );
        assert_eq!(
            reconstruct(&p, &Matrix::column(&[0.0, 5.0])).unwrap(),
            Matrix::column(&[0.0, 0.0])
        );
        let full = proj_of(random_orthonormal(5, 5, 8).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Matrix::random_normal(5, 3, 1.0, &mut rng);
        assert!(reconstruct(&full, &x).unwrap().max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn fold_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = Matrix::random_normal(4, 3, 1.0, &mut rng);
        let id = proj_of(Matrix::identity(4));
        assert_eq!(fold_weights(&id, &w).unwrap(), w);

        let e1 = proj_of(Matrix::column(&[1.0, 0.0]));
        let w2 = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert_eq!(
            fold_weights(&e1, &w2).unwrap(),
            Matrix::from_rows(&[&[1.0, 2.0, 3.0]])
        );
    }

    #[test]
    fn fold_then_apply_matches_training_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Matrix::random_normal(16, 16, 1.0, &mut rng);
        let x = Matrix::random_normal(16, 16, 1.0, &mut rng);
        let p = proj_of(random_orthonormal(16, 5, 12).unwrap());
        let folded = fold_weights(&p, &w).unwrap();
        let inference = t_matmul(&folded, &project_activations(&p, &x).unwrap()).unwrap();
        let training = t_matmul(&w, &reconstruct(&p, &x).unwrap()).unwrap();
        assert!(inference.max_abs_diff(&training) <= 1e-12);
    }

    proptest! {
        #[test]
        fn choose_rank_is_power_of_two_meeting_target(
            k in 1usize..5000,
            n in 1usize..5000,
            t in 0.0f64..0.9,
        ) {
            match choose_rank(k, n, t) {
                Ok(l) => {
                    prop_assert!(l.is_power_of_two());
                    prop_assert!(l <= k);
                    prop_assert!(compression_rate(k, n, l) >= t);
                    if 2 * l <= k {
                        prop_assert!(compression_rate(k, n, 2 * l) < t);
                    }
                }
                Err(_) => prop_assert!(compression_rate(k, n, 1) < t),
            }
        }

        #[test]
        fn reconstruction_never_grows_norm(k in 1usize..16, frac in 0.0f64..1.0, seed in any::<u64>()) {
            let l = ((k as f64 * frac) as usize).max(1);
            let p = proj_of(random_orthonormal(k, l, seed).unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let x = Matrix::random_normal(k, 8, 3.0, &mut rng);
            let xt = reconstruct(&p, &x).unwrap();
            for (a, b) in xt.col_norms_sq().iter().zip(x.col_norms_sq()) {
                prop_assert!(*a <= b + 1e-12);
            }
        }
    }
}
