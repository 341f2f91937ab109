//! End-to-end procedure: calibrate every layer, build candidate projections,
//! pick a winner per layer on validation data, rank layers by how much they
//! hurt, apply progressively, fold, and heal by retraining with frozen `P`.

use std::collections::BTreeMap;

use log::{debug, info};

use crate::calib::{combine_go, weight_corr, weight_corr_normalized, CandidateKind, CorrAccumulator};
use crate::error::{EspaceError, Result};
use crate::fidelity::FidelityReport;
use crate::iofmt::{RankPolicy, Table};
use crate::linalg::{Matrix, OrderingMode};
use crate::projector::{build_projection, compression_rate, reconstruct, Projection};
use crate::toymodel::{sgd_step, Input, LayerId, Model, Sequence};

/// Running statistics for one layer.
#[derive(Debug, Clone)]
pub struct LayerAccumulators {
    pub layer_id: LayerId,
    pub mse: CorrAccumulator,
    pub nmse: CorrAccumulator,
    pub nl: Option<CorrAccumulator>,
    pub nl_norm: Option<CorrAccumulator>,
}

impl LayerAccumulators {
    pub fn accumulators(&self) -> impl Iterator<Item = &CorrAccumulator> {
        [Some(&self.mse), Some(&self.nmse), self.nl.as_ref(), self.nl_norm.as_ref()]
            .into_iter()
            .flatten()
    }

    /// Finalizes the activation statistics and combines them with the
    /// layer's weight statistics into every available candidate matrix.
    pub fn finalize(&self, w: &Matrix) -> Result<LayerCalibration> {
        let mut matrices = BTreeMap::new();
        let c_x = self.mse.finalize()?;
        let c_x_norm = self.nmse.finalize()?;
        matrices.insert(CandidateKind::Go, combine_go(&c_x, &weight_corr(w))?);
        matrices.insert(
            CandidateKind::GoNorm,
            combine_go(&c_x_norm, &weight_corr_normalized(w))?,
        );
        matrices.insert(CandidateKind::Mse, c_x);
        matrices.insert(CandidateKind::Nmse, c_x_norm);
        if let Some(nl) = &self.nl {
            matrices.insert(CandidateKind::Nl, nl.finalize()?);
        }
        if let Some(nl) = &self.nl_norm {
            matrices.insert(CandidateKind::NlNorm, nl.finalize()?);
        }
        Ok(LayerCalibration {
            layer_id: self.layer_id,
            matrices,
        })
    }
}

/// Finalized candidate matrices for one layer.
#[derive(Debug, Clone)]
pub struct LayerCalibration {
    pub layer_id: LayerId,
    pub matrices: BTreeMap<CandidateKind, Matrix>,
}

/// Runs forward (and, for gradient-based kinds, backward) passes over the
/// first `batches` calibration sequences, one sequence per batch.
pub fn calibrate_accumulators(
    model: &Model,
    calib: &[Sequence],
    batches: usize,
    with_gradients: bool,
) -> Result<Vec<LayerAccumulators>> {
    if batches == 0 || batches > calib.len() {
        return Err(EspaceError::Calibration(format!(
            "need 1..={} batches, got {batches}",
            calib.len()
        )));
    }
    let mut accs: Vec<LayerAccumulators> = model
        .layers()
        .iter()
        .map(|l| {
            let k = l.spec().k;
            LayerAccumulators {
                layer_id: l.spec().id,
                mse: CorrAccumulator::new(CandidateKind::Mse, k),
                nmse: CorrAccumulator::new(CandidateKind::Nmse, k),
                nl: with_gradients.then(|| CorrAccumulator::new(CandidateKind::Nl, k)),
                nl_norm: with_gradients.then(|| CorrAccumulator::new(CandidateKind::NlNorm, k)),
            }
        })
        .collect();

    for seq in &calib[..batches] {
        let trace = model.forward(Input::Tokens(&seq.tokens), &seq.targets)?;
        let grads = if with_gradients {
            Some(model.backward(&trace)?)
        } else {
            None
        };
        for (i, acc) in accs.iter_mut().enumerate() {
            let x = &trace.inputs[i];
            acc.mse.accumulate_mse(x)?;
            acc.nmse.accumulate_nmse(x)?;
            if let Some(g) = &grads {
                let gx = &g.dx[i];
                acc.nl.as_mut().expect("gradient kinds enabled").accumulate_nl(x, gx)?;
                acc.nl_norm.as_mut().expect("gradient kinds enabled").accumulate_nl(x, gx)?;
            }
        }
    }
    Ok(accs)
}

/// Per-layer candidate matrices for every kind in `kinds`.
pub fn calibrate_all(
    model: &Model,
    calib: &[Sequence],
    batches: usize,
    kinds: &[CandidateKind],
) -> Result<Vec<LayerCalibration>> {
    let with_gradients = kinds.iter().any(|k| k.needs_gradients());
    calibrate_accumulators(model, calib, batches, with_gradients)?
        .iter()
        .map(|acc| {
            let mut cal = acc.finalize(model.layer(acc.layer_id)?.weight())?;
            cal.matrices.retain(|k, _| kinds.contains(k));
            Ok(cal)
        })
        .collect()
}

/// Candidate projections for one layer, all of rank `l`.
#[derive(Debug, Clone)]
pub struct LayerCandidates {
    pub layer_id: LayerId,
    pub l: usize,
    pub projections: Vec<Projection>,
}

impl LayerCandidates {
    pub fn get(&self, kind: CandidateKind) -> Option<&Projection> {
        self.projections.iter().find(|p| p.kind() == kind)
    }
}

/// Builds every candidate for each layer the rank policy covers.
pub fn build_candidates(
    model: &Model,
    calibrations: &[LayerCalibration],
    policy: &RankPolicy,
    ordering: OrderingMode,
) -> Result<Vec<LayerCandidates>> {
    let mut out = Vec::new();
    for cal in calibrations {
        let spec = *model.layer(cal.layer_id)?.spec();
        if !policy.applies_to(&spec) {
            continue;
        }
        let l = policy.rank_for(&spec)?;
        let projections = cal
            .matrices
            .iter()
            .map(|(kind, c)| build_projection(c, l, ordering, spec.id, *kind))
            .collect::<Result<Vec<_>>>()?;
        out.push(LayerCandidates {
            layer_id: spec.id,
            l,
            projections,
        });
    }
    Ok(out)
}

/// Fidelity metrics of every candidate measured on `data`.
pub fn fidelity_reports(
    model: &Model,
    candidates: &[LayerCandidates],
    data: &[Sequence],
) -> Result<Vec<FidelityReport>> {
    if data.is_empty() {
        return Err(EspaceError::Calibration("fidelity evaluation needs data".into()));
    }
    let n = model.layers().len();
    let mut xs: Vec<Vec<Matrix>> = vec![Vec::new(); n];
    let mut gs: Vec<Vec<Matrix>> = vec![Vec::new(); n];
    for seq in data {
        let trace = model.forward(Input::Tokens(&seq.tokens), &seq.targets)?;
        let grads = model.backward(&trace)?;
        for i in 0..n {
            xs[i].push(trace.inputs[i].clone());
            gs[i].push(grads.dx[i].clone());
        }
    }
    let mut out = Vec::new();
    for lc in candidates {
        let i = lc.layer_id.0;
        let x = Matrix::hstack(&xs[i].iter().collect::<Vec<_>>())?;
        let g = Matrix::hstack(&gs[i].iter().collect::<Vec<_>>())?;
        let w = model.layer(lc.layer_id)?.weight();
        for p in &lc.projections {
            out.push(FidelityReport::evaluate(w, &x, &g, p)?);
        }
    }
    Ok(out)
}

/// Single-layer sensitivity result.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub layer_id: LayerId,
    /// Validation loss with each candidate attached, in kind order.
    pub losses: Vec<(CandidateKind, f64)>,
    pub best_kind: CandidateKind,
    pub best_loss: f64,
    /// 1-based position after [`rank_layers`].
    pub rank: Option<usize>,
}

/// Argmin over losses; ties go to the earliest kind in `CandidateKind::ALL`.
pub fn argmin_candidate(losses: &[(CandidateKind, f64)]) -> Result<(CandidateKind, f64)> {
    let mut sorted = losses.to_vec();
    sorted.sort_by_key(|(k, _)| *k);
    let mut best: Option<(CandidateKind, f64)> = None;
    for (kind, loss) in sorted {
        if !loss.is_finite() {
            return Err(EspaceError::Numerical {
                msg: format!("candidate {kind} produced a non-finite loss"),
                residual: loss,
            });
        }
        if best.is_none_or(|(_, b)| loss < b) {
            best = Some((kind, loss));
        }
    }
    best.ok_or_else(|| EspaceError::Calibration("no candidates to select from".into()))
}

/// Evaluates each candidate attached alone to `layer_id` and keeps the best.
pub fn select_candidate(
    model: &Model,
    layer_id: LayerId,
    candidates: &[Projection],
    val: &[Sequence],
) -> Result<SweepRecord> {
    if let Some(p) = candidates.iter().find(|p| p.layer_id() != layer_id) {
        return Err(EspaceError::shape(format!(
            "candidate {} belongs to layer {}, not {layer_id}",
            p.kind(),
            p.layer_id()
        )));
    }
    if candidates.windows(2).any(|w| w[0].l() != w[1].l()) {
        return Err(EspaceError::shape("candidates must share the same rank"));
    }
    let mut losses = Vec::with_capacity(candidates.len());
    for p in candidates {
        let mut trial = model.clone();
        trial.attach_projection(layer_id, p.clone())?;
        losses.push((p.kind(), trial.mean_loss(val)?));
    }
    losses.sort_by_key(|(k, _)| *k);
    let (best_kind, best_loss) = argmin_candidate(&losses)?;
    debug!("layer {layer_id}: best {best_kind} loss {best_loss}");
    Ok(SweepRecord {
        layer_id,
        losses,
        best_kind,
        best_loss,
        rank: None,
    })
}

/// Runs [`select_candidate`] for every layer with candidates.
pub fn sensitivity_sweep(
    model: &Model,
    candidates: &[LayerCandidates],
    val: &[Sequence],
) -> Result<Vec<SweepRecord>> {
    candidates
        .iter()
        .map(|lc| select_candidate(model, lc.layer_id, &lc.projections, val))
        .collect()
}

/// Least to most destructive: ascending loss increase, ties by layer index.
pub fn rank_layers(records: &[SweepRecord], baseline_loss: f64) -> Vec<SweepRecord> {
    let mut out = records.to_vec();
    out.sort_by(|a, b| {
        (a.best_loss - baseline_loss)
            .total_cmp(&(b.best_loss - baseline_loss))
            .then(a.layer_id.cmp(&b.layer_id))
    });
    for (i, r) in out.iter_mut().enumerate() {
        r.rank = Some(i + 1);
    }
    out
}

/// Layers whose relative validation-loss increase stays within `threshold`.
pub fn exclusion_policy(records: &[SweepRecord], baseline_loss: f64, threshold: f64) -> Vec<LayerId> {
    records
        .iter()
        .filter(|r| (r.best_loss - baseline_loss) / baseline_loss <= threshold)
        .map(|r| r.layer_id)
        .collect()
}

/// Looks up the winning projection of each record.
pub fn winners(records: &[SweepRecord], candidates: &[LayerCandidates]) -> Result<Vec<Projection>> {
    records
        .iter()
        .map(|r| {
            candidates
                .iter()
                .find(|c| c.layer_id == r.layer_id)
                .and_then(|c| c.get(r.best_kind))
                .cloned()
                .ok_or_else(|| {
                    EspaceError::Prerequisite(format!(
                        "no {} candidate for layer {}",
                        r.best_kind, r.layer_id
                    ))
                })
        })
        .collect()
}

/// `(name, K, N, selection)`; `None` leaves the layer uncompressed.
pub type LayerEntry = (String, usize, usize, Option<(usize, CandidateKind)>);

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionRow {
    pub name: String,
    pub k: usize,
    pub n: usize,
    /// `None` for layers left uncompressed.
    pub l: Option<usize>,
    pub kind: Option<CandidateKind>,
    pub params_before: usize,
    pub params_after: usize,
    pub rate: f64,
}

/// Inference parameter accounting: `P` plus `PᵀW` for projected layers,
/// `W` for the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionReport {
    pub rows: Vec<CompressionRow>,
    pub total_before: usize,
    pub total_after: usize,
    pub overall_rate: f64,
}

impl CompressionReport {
    /// Builds the report from `(name, K, N, Some((L, kind)) | None)` entries.
    pub fn from_entries(entries: &[LayerEntry]) -> Self {
        let rows: Vec<CompressionRow> = entries
            .iter()
            .map(|(name, k, n, sel)| {
                let before = k * n;
                let (l, kind, after) = match sel {
                    Some((l, kind)) => (Some(*l), Some(*kind), l * (k + n)),
                    None => (None, None, before),
                };
                CompressionRow {
                    name: name.clone(),
                    k: *k,
                    n: *n,
                    l,
                    kind,
                    params_before: before,
                    params_after: after,
                    rate: l.map_or(0.0, |l| compression_rate(*k, *n, l)),
                }
            })
            .collect();
        let total_before = rows.iter().map(|r| r.params_before).sum();
        let total_after = rows.iter().map(|r| r.params_after).sum();
        CompressionReport {
            rows,
            total_before,
            total_after,
            overall_rate: overall_rate(total_before, total_after),
        }
    }

    pub fn for_model(model: &Model) -> Self {
        let entries: Vec<_> = model
            .layers()
            .iter()
            .map(|l| {
                let s = l.spec();
                (s.name(), s.k, s.n, l.projection().map(|p| (p.l(), p.kind())))
            })
            .collect();
        CompressionReport::from_entries(&entries)
    }
}

fn overall_rate(before: usize, after: usize) -> f64 {
    if before == 0 {
        0.0
    } else {
        1.0 - after as f64 / before as f64
    }
}

/// Attaches and folds each selected projection on a copy of `model`.
pub fn compress_model(model: &Model, selections: &[Projection]) -> Result<(Model, CompressionReport)> {
    let mut out = model.clone();
    for p in selections {
        out.attach_projection(p.layer_id(), p.clone())?;
    }
    out.fold_all()?;
    let report = CompressionReport::for_model(&out);
    info!(
        "compressed {} layers, overall rate {:.4}",
        selections.len(),
        report.overall_rate
    );
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub layers_applied: usize,
    /// Layer added at this point; `None` for the baseline.
    pub layer_id: Option<LayerId>,
    pub compression_rate: f64,
    pub val_loss: f64,
}

/// Applies the winners of the first `k_layers` ranked layers one at a time,
/// recording model-level compression and out-of-the-box validation loss.
pub fn progressive_apply(
    model: &Model,
    ranking: &[SweepRecord],
    candidates: &[LayerCandidates],
    k_layers: usize,
    val: &[Sequence],
) -> Result<Vec<CurvePoint>> {
    if k_layers > ranking.len() {
        return Err(EspaceError::shape(format!(
            "k_layers {k_layers} exceeds ranking of {}",
            ranking.len()
        )));
    }
    let chosen = winners(&ranking[..k_layers], candidates)?;
    let mut current = model.clone();
    let mut curve = vec![CurvePoint {
        layers_applied: 0,
        layer_id: None,
        compression_rate: CompressionReport::for_model(&current).overall_rate,
        val_loss: current.mean_loss(val)?,
    }];
    for (i, p) in chosen.into_iter().enumerate() {
        let id = p.layer_id();
        current.attach_projection(id, p)?;
        curve.push(CurvePoint {
            layers_applied: i + 1,
            layer_id: Some(id),
            compression_rate: CompressionReport::for_model(&current).overall_rate,
            val_loss: current.mean_loss(val)?,
        });
    }
    Ok(curve)
}

/// Plain SGD over `data`, one sequence per step, cycling in order.
pub fn train(model: &mut Model, data: &[Sequence], steps: usize, lr: f64) -> Result<Vec<f64>> {
    if steps > 0 && data.is_empty() {
        return Err(EspaceError::Training("training data is empty".into()));
    }
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let seq = &data[step % data.len()];
        let trace = model.forward(Input::Tokens(&seq.tokens), &seq.targets)?;
        let grads = model.backward(&trace)?;
        sgd_step(model, &grads, lr)?;
        losses.push(trace.loss);
        if let Some(first) = losses.first() {
            if trace.loss > 10.0 * first {
                return Err(EspaceError::Training(format!(
                    "diverged at step {step}: loss {} vs initial {first}",
                    trace.loss
                )));
            }
        }
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HealCurve {
    pub train_losses: Vec<f64>,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
}

/// Retrains the full weights of a model carrying frozen projections.
pub fn heal(model: &mut Model, train_data: &[Sequence], val: &[Sequence], steps: usize, lr: f64) -> Result<HealCurve> {
    let frozen: Vec<(LayerId, Vec<u64>)> = model
        .projections()
        .map(|p| (p.layer_id(), p.matrix().as_slice().iter().map(|v| v.to_bits()).collect()))
        .collect();
    if frozen.is_empty() {
        return Err(EspaceError::State("heal needs at least one attached projection".into()));
    }
    let initial_val_loss = model.mean_loss(val)?;
    let train_losses = train(model, train_data, steps, lr)?;
    for (id, bits) in &frozen {
        let now: Vec<u64> = model
            .layer(*id)?
            .projection()
            .map(|p| p.matrix().as_slice().iter().map(|v| v.to_bits()).collect())
            .unwrap_or_default();
        if &now != bits {
            return Err(EspaceError::State(format!("projection of layer {id} changed during healing")));
        }
    }
    let final_val_loss = model.mean_loss(val)?;
    info!("healed {steps} steps: val loss {initial_val_loss:.5} -> {final_val_loss:.5}");
    Ok(HealCurve {
        train_losses,
        initial_val_loss,
        final_val_loss,
    })
}

/// Exact `E[(ℒ − ℒ̃)²]` over sequences, re-running the network with the
/// layer's input replaced by its reconstruction.
pub fn exact_nl_oracle(model: &Model, layer_id: LayerId, p: &Projection, data: &[Sequence]) -> Result<f64> {
    exact_nl_oracle_scaled(model, layer_id, p, data, 1.0)
}

/// As [`exact_nl_oracle`] with the input replaced by `x + ε(x̃ − x)`.
pub fn exact_nl_oracle_scaled(
    model: &Model,
    layer_id: LayerId,
    p: &Projection,
    data: &[Sequence],
    eps: f64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(EspaceError::Calibration("oracle needs data".into()));
    }
    let mut base = model.clone();
    base.detach_projection(layer_id)?;
    let hook = |id: LayerId, x: &Matrix| -> Option<Matrix> {
        if id != layer_id {
            return None;
        }
        let xt = reconstruct(p, x).ok()?;
        let mut out = x.clone();
        out.axpy(eps, &xt.sub(x).ok()?).ok()?;
        Some(out)
    };
    let mut total = 0.0;
    for seq in data {
        let clean = base.forward(Input::Tokens(&seq.tokens), &seq.targets)?.loss;
        let perturbed = base
            .forward_with(Input::Tokens(&seq.tokens), &seq.targets, Some(&hook))?
            .loss;
        total += (clean - perturbed).powi(2);
    }
    Ok(total / data.len() as f64)
}

const MISSING: &str = "-";

fn layer_name(model: &Model, id: LayerId) -> Result<String> {
    Ok(model.layer(id)?.spec().name())
}

/// One row per record: `layer_id name rank best_kind best_loss` followed by
/// one loss column per kind, `-` where a kind was not evaluated.
pub fn sweep_table(model: &Model, records: &[SweepRecord]) -> Result<Table> {
    let mut header = vec!["layer_id", "name", "rank", "best_kind", "best_loss"];
    header.extend(CandidateKind::ALL.iter().map(|k| k.as_str()));
    let mut t = Table::new(&header);
    for r in records {
        let mut row = vec![
            r.layer_id.0.to_string(),
            layer_name(model, r.layer_id)?,
            r.rank.map_or(MISSING.to_string(), |v| v.to_string()),
            r.best_kind.to_string(),
            r.best_loss.to_string(),
        ];
        for kind in CandidateKind::ALL {
            row.push(
                r.losses
                    .iter()
                    .find(|(k, _)| *k == kind)
                    .map_or(MISSING.to_string(), |(_, l)| l.to_string()),
            );
        }
        t.push(row);
    }
    Ok(t)
}

pub fn records_from_table(t: &Table) -> Result<Vec<SweepRecord>> {
    (0..t.rows.len())
        .map(|i| {
            let mut losses = Vec::new();
            for kind in CandidateKind::ALL {
                let v = t.get_str(i, kind.as_str())?;
                if v != MISSING {
                    losses.push((kind, t.get(i, kind.as_str())?));
                }
            }
            let rank = match t.get_str(i, "rank")? {
                MISSING => None,
                _ => Some(t.get(i, "rank")?),
            };
            Ok(SweepRecord {
                layer_id: LayerId(t.get(i, "layer_id")?),
                losses,
                best_kind: t.get_str(i, "best_kind")?.parse()?,
                best_loss: t.get(i, "best_loss")?,
                rank,
            })
        })
        .collect()
}

/// Per-layer rows, then a final `total` row.
pub fn report_table(report: &CompressionReport) -> Table {
    let mut t = Table::new(&["name", "k", "n", "l", "kind", "params_before", "params_after", "rate"]);
    for r in &report.rows {
        t.push(vec![
            r.name.clone(),
            r.k.to_string(),
            r.n.to_string(),
            r.l.map_or(MISSING.to_string(), |v| v.to_string()),
            r.kind.map_or(MISSING.to_string(), |v| v.to_string()),
            r.params_before.to_string(),
            r.params_after.to_string(),
            r.rate.to_string(),
        ]);
    }
    t.push(vec![
        "total".into(),
        MISSING.into(),
        MISSING.into(),
        MISSING.into(),
        MISSING.into(),
        report.total_before.to_string(),
        report.total_after.to_string(),
        report.overall_rate.to_string(),
    ]);
    t
}

pub fn curve_table(model: &Model, curve: &[CurvePoint]) -> Result<Table> {
    let mut t = Table::new(&["layers_applied", "layer", "compression_rate", "val_loss"]);
    for p in curve {
        t.push(vec![
            p.layers_applied.to_string(),
            match p.layer_id {
                Some(id) => layer_name(model, id)?,
                None => "baseline".into(),
            },
            p.compression_rate.to_string(),
            p.val_loss.to_string(),
        ]);
    }
    Ok(t)
}

pub fn heal_table(curve: &HealCurve) -> Table {
    let mut t = Table::new(&["step", "train_loss"]);
    for (i, l) in curve.train_losses.iter().enumerate() {
        t.push(vec![i.to_string(), l.to_string()]);
    }
    t
}
