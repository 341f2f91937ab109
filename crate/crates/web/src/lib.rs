//! Browser bindings: three small interactive views over the core library.
//! Each export returns a JSON string for the page script to draw.

use espace::calib::{CandidateKind, CorrAccumulator};
use espace::fidelity;
use espace::linalg::{sym_evd, Matrix, OrderingMode};
use espace::projector::{build_projection, choose_rank, compression_rate, reconstruct};
use espace::{LayerId, Projection};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    /// `mse[l]` is the error when keeping the top `l` components, measured on the data.
    pub mse: Vec<f64>,
    pub trace: f64,
}

/// Synthetic activations with power-law decaying variances, rotated off-axis.
fn synthetic(k: usize, m: usize, decay: f64, seed: u64) -> espace::Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::random_normal(k, m, 1.0, &mut rng);
    for i in 0..k {
        let s = (1.0 + i as f64).powf(-decay);
        for j in 0..m {
            x.as_mut_slice()[i * m + j] *= s;
        }
    }
    let q = espace::linalg::random_orthonormal(k, k, seed ^ 0x5eed)?;
    espace::linalg::matmul(&q, &x)
}

pub fn spectrum_data(k: usize, m: usize, decay: f64, seed: u64) -> espace::Result<Spectrum> {
    let x = synthetic(k, m, decay, seed)?;
    let mut acc = CorrAccumulator::new(CandidateKind::Mse, k);
    acc.accumulate_mse(&x)?;
    let c = acc.finalize()?;
    let evd = sym_evd(&c, OrderingMode::Algebraic)?;
    let mut mse = vec![x.frobenius_norm_sq() / m as f64];
    for l in 1..=k {
        let p = build_projection(&c, l, OrderingMode::Algebraic, LayerId(0), CandidateKind::Mse)?;
        mse.push(fidelity::mse(&x, &p)?);
    }
    Ok(Spectrum {
        eigenvalues: evd.eigenvalues,
        trace: c.trace(),
        mse,
    })
}

#[derive(Debug, Serialize)]
pub struct RateCurve {
    pub l: Vec<usize>,
    pub rate: Vec<f64>,
    /// Rank picked for `target`, if any power of two reaches it.
    pub chosen: Option<usize>,
}

pub fn rate_curve_data(k: usize, n: usize, target: f64) -> RateCurve {
    let l: Vec<usize> = (1..=k).collect();
    RateCurve {
        rate: l.iter().map(|&l| compression_rate(k, n, l)).collect(),
        chosen: choose_rank(k, n, target).ok(),
        l,
    }
}

#[derive(Debug, Serialize)]
pub struct Geometry {
    pub points: Vec<[f64; 2]>,
    pub eigen_recon: Vec<[f64; 2]>,
    pub probe_recon: Vec<[f64; 2]>,
    pub eigen_axis: [f64; 2],
    pub probe_axis: [f64; 2],
    pub eigen_mse: f64,
    pub probe_mse: f64,
}

fn columns(m: &Matrix) -> Vec<[f64; 2]> {
    (0..m.cols()).map(|j| [m[(0, j)], m[(1, j)]]).collect()
}

/// 2-D cloud stretched along `rotation`; compares the principal axis with a
/// user-chosen probe axis at `probe_angle` (radians).
pub fn geometry_data(n: usize, stretch: f64, rotation: f64, probe_angle: f64, seed: u64) -> espace::Result<Geometry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Matrix::random_normal(2, n, 1.0, &mut rng);
    let (c, s) = (rotation.cos(), rotation.sin());
    let shape = Matrix::from_rows(&[&[c * stretch, -s], &[s * stretch, c]]);
    let x = espace::linalg::matmul(&shape, &raw)?;

    let mut acc = CorrAccumulator::new(CandidateKind::Mse, 2);
    acc.accumulate_mse(&x)?;
    let eigen = build_projection(&acc.finalize()?, 1, OrderingMode::Algebraic, LayerId(0), CandidateKind::Mse)?;
    let probe_axis = [probe_angle.cos(), probe_angle.sin()];
    let probe = Projection::new(
        LayerId(0),
        CandidateKind::Mse,
        Matrix::column(&probe_axis),
        OrderingMode::Algebraic,
    )?;
    let p = eigen.matrix();
    Ok(Geometry {
        points: columns(&x),
        eigen_recon: columns(&reconstruct(&eigen, &x)?),
        probe_recon: columns(&reconstruct(&probe, &x)?),
        eigen_axis: [p[(0, 0)], p[(1, 0)]],
        probe_axis,
        eigen_mse: fidelity::mse(&x, &eigen)?,
        probe_mse: fidelity::mse(&x, &probe)?,
    })
}

fn to_js<T: Serialize>(r: espace::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn spectrum(k: usize, m: usize, decay: f64, seed: u32) -> Result<String, JsError> {
    to_js(spectrum_data(k, m, decay, seed as u64))
}

#[wasm_bindgen]
pub fn rate_curve(k: usize, n: usize, target: f64) -> Result<String, JsError> {
    to_js(Ok(rate_curve_data(k, n, target)))
}

#[wasm_bindgen]
pub fn geometry(n: usize, stretch: f64, rotation: f64, probe_angle: f64, seed: u32) -> Result<String, JsError> {
    to_js(geometry_data(n, stretch, rotation, probe_angle, seed as u64))
}
