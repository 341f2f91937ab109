//! A small transformer stack with hand-written forward and backward passes.
//!
//! Each block is `QKV → causal single-head attention → PROJ (+residual) →
//! FC1 → tanh → FC2 (+residual)`, followed by a `HEAD` GEMM and softmax
//! cross-entropy. Every GEMM computes `Y = WᵀX` with `W` stored K×N and
//! activations stored K×M, one token per column. A layer with an attached
//! projection computes `Wᵀ(PPᵀX)`, or `(PᵀW)ᵀ(PᵀX)` once folded.

use std::collections::HashSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EspaceError, Result};
use crate::linalg::{matmul, matmul_t, t_matmul, Matrix};
use crate::projector::{fold_weights, project_activations, Projection};

/// Index of a GEMM layer within a [`Model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerId(pub usize);

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Qkv,
    Proj,
    Fc1,
    Fc2,
    Head,
}

impl Role {
    pub const ALL: [Role; 5] = [Role::Qkv, Role::Proj, Role::Fc1, Role::Fc2, Role::Head];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Qkv => "qkv",
            Role::Proj => "proj",
            Role::Fc1 => "fc1",
            Role::Fc2 => "fc2",
            Role::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: LayerId,
    pub block: Option<usize>,
    pub role: Role,
    pub k: usize,
    pub n: usize,
}

impl LayerSpec {
    /// `b{block}.{role}` for block layers, `head` for the output layer.
    pub fn name(&self) -> String {
        match self.block {
            Some(b) => format!("b{b}.{}", self.role),
            None => self.role.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub vocab: usize,
    pub seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.hidden.is_power_of_two() || !(16..=256).contains(&self.hidden) {
            return Err(EspaceError::config(
                "model.hidden",
                format!("must be a power of two in 16..=256, got {}", self.hidden),
            ));
        }
        if !(1..=4).contains(&self.blocks) {
            return Err(EspaceError::config(
                "model.blocks",
                format!("must be in 1..=4, got {}", self.blocks),
            ));
        }
        if self.vocab < 2 {
            return Err(EspaceError::config("model.vocab", "must be at least 2"));
        }
        if self.seq_len == 0 {
            return Err(EspaceError::config("model.seq_len", "must be positive"));
        }
        Ok(())
    }

    /// Layer list in forward order: four GEMMs per block, then the head.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let h = self.hidden;
        let mut specs = Vec::with_capacity(4 * self.blocks + 1);
        for b in 0..self.blocks {
            for (role, k, n) in [
                (Role::Qkv, h, 3 * h),
                (Role::Proj, h, h),
                (Role::Fc1, h, 4 * h),
                (Role::Fc2, 4 * h, h),
            ] {
                specs.push(LayerSpec {
                    id: LayerId(specs.len()),
                    block: Some(b),
                    role,
                    k,
                    n,
                });
            }
        }
        specs.push(LayerSpec {
            id: LayerId(specs.len()),
            block: None,
            role: Role::Head,
            k: h,
            n: self.vocab,
        });
        specs
    }
}

#[derive(Debug, Clone)]
pub struct GemmLayer {
    spec: LayerSpec,
    w: Matrix,
    projection: Option<Projection>,
    folded: Option<Matrix>,
}

impl GemmLayer {
    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn weight(&self) -> &Matrix {
        &self.w
    }

    pub fn projection(&self) -> Option<&Projection> {
        self.projection.as_ref()
    }

    pub fn folded(&self) -> Option<&Matrix> {
        self.folded.as_ref()
    }

    /// Returns the operand actually multiplied (`PPᵀX` or `X`) and the output.
    fn apply(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        match (&self.projection, &self.folded) {
            (Some(p), Some(folded)) => {
                let z = project_activations(p, x)?;
                let y = t_matmul(folded, &z)?;
                Ok((matmul(p.matrix(), &z)?, y))
            }
            (Some(p), None) => {
                let z = project_activations(p, x)?;
                let operand = matmul(p.matrix(), &z)?;
                let y = t_matmul(&self.w, &operand)?;
                Ok((operand, y))
            }
            (None, _) => Ok((x.clone(), t_matmul(&self.w, x)?)),
        }
    }

    /// Gradients `(∂ℒ/∂X, ∂ℒ/∂W)` given `∂ℒ/∂Y` and the cached operand.
    fn backward(&self, operand: &Matrix, dy: &Matrix) -> Result<(Matrix, Matrix)> {
        let dw = matmul_t(operand, dy)?;
        let d_operand = matmul(&self.w, dy)?;
        let dx = match &self.projection {
            Some(p) => matmul(p.matrix(), &project_activations(p, &d_operand)?)?,
            None => d_operand,
        };
        Ok((dx, dw))
    }
}

/// Model input: token ids looked up in the frozen embedding, or an h×M matrix.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Tokens(&'a [usize]),
    Embedded(&'a Matrix),
}

/// Replaces a layer's GEMM input before any projection is applied.
pub type OperandHook<'a> = &'a dyn Fn(LayerId, &Matrix) -> Option<Matrix>;

#[derive(Debug, Clone)]
struct BlockCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Matrix,
    tanh_out: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input activation of every GEMM layer, indexed by `LayerId`.
    pub inputs: Vec<Matrix>,
    operands: Vec<Matrix>,
    blocks: Vec<BlockCache>,
    pub logits: Matrix,
    pub probs: Matrix,
    /// Per-token cross-entropy.
    pub token_losses: Vec<f64>,
    pub loss: f64,
    targets: Vec<usize>,
    version: u64,
}

impl ForwardTrace {
    /// Column-normalized attention weights of a block (row = key, column = query).
    pub fn attention(&self, block: usize) -> &Matrix {
        &self.blocks[block].attn
    }
}

#[derive(Debug, Clone)]
pub struct GradientTrace {
    /// `∂ℒ/∂X` for each layer's GEMM input, through that GEMM only.
    pub dx: Vec<Matrix>,
    pub dw: Vec<Matrix>,
}

impl GradientTrace {
    pub fn is_finite(&self) -> bool {
        self.dx.iter().chain(&self.dw).all(Matrix::is_finite)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    embed: Matrix,
    layers: Vec<GemmLayer>,
    version: u64,
}

/// Seeded model with `N(0, 1/K)` weights and a `N(0, 1)` frozen embedding.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embed = Matrix::random_normal(config.hidden, config.vocab, 1.0, &mut rng);
    let layers = config
        .layer_specs()
        .into_iter()
        .map(|spec| GemmLayer {
            spec,
            w: Matrix::random_normal(spec.k, spec.n, 1.0 / (spec.k as f64).sqrt(), &mut rng),
            projection: None,
            folded: None,
        })
        .collect();
    Ok(Model {
        config,
        embed,
        layers,
        version: 0,
    })
}

impl Model {
    /// Assembles a model from stored parts, checking every shape.
    pub fn from_parts(config: ModelConfig, embed: Matrix, weights: Vec<Matrix>) -> Result<Model> {
        config.validate()?;
        if embed.shape() != (config.hidden, config.vocab) {
            return Err(EspaceError::shape(format!(
                "embedding is {:?}, expected {:?}",
                embed.shape(),
                (config.hidden, config.vocab)
            )));
        }
        let specs = config.layer_specs();
        if weights.len() != specs.len() {
            return Err(EspaceError::shape(format!(
                "expected {} weight matrices, got {}",
                specs.len(),
                weights.len()
            )));
        }
        let layers = specs
            .into_iter()
            .zip(weights)
            .map(|(spec, w)| {
                if w.shape() != (spec.k, spec.n) {
                    return Err(EspaceError::shape(format!(
                        "layer {} weight is {:?}, expected {:?}",
                        spec.name(),
                        w.shape(),
                        (spec.k, spec.n)
                    )));
                }
                Ok(GemmLayer {
                    spec,
                    w,
                    projection: None,
                    folded: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            config,
            embed,
            layers,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embed
    }

    pub fn layers(&self) -> &[GemmLayer] {
        &self.layers
    }

    pub fn layer(&self, id: LayerId) -> Result<&GemmLayer> {
        self.layers
            .get(id.0)
            .ok_or_else(|| EspaceError::shape(format!("no layer with id {id}")))
    }

    fn layer_mut(&mut self, id: LayerId) -> Result<&mut GemmLayer> {
        self.layers
            .get_mut(id.0)
            .ok_or_else(|| EspaceError::shape(format!("no layer with id {id}")))
    }

    pub fn layer_by_name(&self, name: &str) -> Option<&GemmLayer> {
        self.layers.iter().find(|l| l.spec.name() == name)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    fn touch(&mut self) {
        self.version += 1;
    }

    pub fn set_weight(&mut self, id: LayerId, w: Matrix) -> Result<()> {
        let layer = self.layer_mut(id)?;
        if w.shape() != layer.w.shape() {
            return Err(EspaceError::shape(format!(
                "weight for {} must be {:?}",
                layer.spec.name(),
                layer.w.shape()
            )));
        }
        layer.w = w;
        layer.folded = None;
        self.touch();
        Ok(())
    }

    /// Attaches a projection (training view). Any folded cache is dropped.
    pub fn attach_projection(&mut self, id: LayerId, p: Projection) -> Result<()> {
        let layer = self.layer_mut(id)?;
        if p.k() != layer.spec.k {
            return Err(EspaceError::shape(format!(
                "projection has K={} but layer {} has K={}",
                p.k(),
                layer.spec.name(),
                layer.spec.k
            )));
        }
        layer.projection = Some(p.with_layer(id));
        layer.folded = None;
        self.touch();
        Ok(())
    }

    pub fn detach_projection(&mut self, id: LayerId) -> Result<Option<Projection>> {
        let layer = self.layer_mut(id)?;
        layer.folded = None;
        let p = layer.projection.take();
        self.touch();
        Ok(p)
    }

    pub fn projections(&self) -> impl Iterator<Item = &Projection> {
        self.layers.iter().filter_map(|l| l.projection.as_ref())
    }

    /// Precomputes `PᵀW` for every layer with a projection.
    pub fn fold_all(&mut self) -> Result<()> {
        for layer in &mut self.layers {
            if let Some(p) = &layer.projection {
                layer.folded = Some(fold_weights(p, &layer.w)?);
            }
        }
        self.touch();
        Ok(())
    }

    /// Sets a stored folded weight, checked against `PᵀW`.
    pub fn set_folded(&mut self, id: LayerId, folded: Matrix) -> Result<()> {
        let layer = self.layer_mut(id)?;
        let p = layer
            .projection
            .as_ref()
            .ok_or_else(|| EspaceError::State(format!("layer {} has no projection", layer.spec.name())))?;
        let expected = fold_weights(p, &layer.w)?;
        if expected.max_abs_diff(&folded) > 1e-12 {
            return Err(EspaceError::State(format!(
                "folded weight for {} does not match PᵀW",
                layer.spec.name()
            )));
        }
        layer.folded = Some(folded);
        self.touch();
        Ok(())
    }

    fn embed_tokens(&self, tokens: &[usize]) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.config.hidden, tokens.len());
        for (m, &t) in tokens.iter().enumerate() {
            if t >= self.config.vocab {
                return Err(EspaceError::shape(format!(
                    "token {t} outside vocabulary of {}",
                    self.config.vocab
                )));
            }
            for r in 0..self.config.hidden {
                out[(r, m)] = self.embed[(r, t)];
            }
        }
        Ok(out)
    }

    pub fn forward(&self, input: Input<'_>, targets: &[usize]) -> Result<ForwardTrace> {
        self.forward_with(input, targets, None)
    }

    /// Forward pass with an optional hook replacing GEMM inputs.
    pub fn forward_with(
        &self,
        input: Input<'_>,
        targets: &[usize],
        hook: Option<OperandHook<'_>>,
    ) -> Result<ForwardTrace> {
        let cfg = self.config;
        let h = cfg.hidden;
        let mut state = match input {
            Input::Tokens(t) => self.embed_tokens(t)?,
            Input::Embedded(x) => {
                if x.rows() != h {
                    return Err(EspaceError::shape(format!(
                        "embedded input has {} rows, hidden size is {h}",
                        x.rows()
                    )));
                }
                x.clone()
            }
        };
        let m = state.cols();
        if m != cfg.seq_len {
            return Err(EspaceError::shape(format!(
                "input length {m} does not match seq_len {}",
                cfg.seq_len
            )));
        }
        if targets.len() != m {
            return Err(EspaceError::shape(format!(
                "{} targets for {m} positions",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cfg.vocab) {
            return Err(EspaceError::shape(format!("target {bad} outside vocabulary")));
        }

        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut operands = Vec::with_capacity(n_layers);
        let mut blocks = Vec::with_capacity(cfg.blocks);

        let mut gemm = |id: usize, x: &Matrix| -> Result<Matrix> {
            inputs.push(x.clone());
            let hooked = hook.and_then(|f| f(LayerId(id), x));
            let (operand, y) = self.layers[id].apply(hooked.as_ref().unwrap_or(x))?;
            operands.push(operand);
            Ok(y)
        };

        let inv_sqrt_h = 1.0 / (h as f64).sqrt();
        for b in 0..cfg.blocks {
            let base = 4 * b;
            let qkv = gemm(base, &state)?;
            let q = qkv.row_range(0, h);
            let k = qkv.row_range(h, 2 * h);
            let v = qkv.row_range(2 * h, 3 * h);
            let scores = t_matmul(&k, &q)?.scale(inv_sqrt_h);
            let attn = causal_softmax(&scores);
            let o = matmul(&v, &attn)?;
            let z = gemm(base + 1, &o)?;
            let h1 = state.add(&z)?;
            let u = gemm(base + 2, &h1)?;
            let tanh_out = u.map(f64::tanh);
            let y2 = gemm(base + 3, &tanh_out)?;
            state = h1.add(&y2)?;
            blocks.push(BlockCache {
                q,
                k,
                v,
                attn,
                tanh_out,
            });
        }
        let logits = gemm(4 * cfg.blocks, &state)?;

        let probs = column_softmax(&logits);
        let token_losses: Vec<f64> = targets
            .iter()
            .enumerate()
            .map(|(m, &t)| -probs[(t, m)].max(f64::MIN_POSITIVE).ln())
            .collect();
        let loss = token_losses.iter().sum::<f64>() / m as f64;
        if !loss.is_finite() {
            return Err(EspaceError::Numerical {
                msg: "forward produced a non-finite loss".into(),
                residual: loss,
            });
        }

        Ok(ForwardTrace {
            inputs,
            operands,
            blocks,
            logits,
            probs,
            token_losses,
            loss,
            targets: targets.to_vec(),
            version: self.version,
        })
    }

    /// Analytic gradients of the mean cross-entropy.
    pub fn backward(&self, trace: &ForwardTrace) -> Result<GradientTrace> {
        let m = trace.probs.cols();
        let mut dlogits = trace.probs.clone();
        for (col, &t) in trace.targets.iter().enumerate() {
            dlogits[(t, col)] -= 1.0;
        }
        dlogits.scale_in_place(1.0 / m as f64);
        self.backward_from_logits(trace, &dlogits)
    }

    /// Backpropagates a given `∂ℒ/∂logits`.
    pub fn backward_from_logits(&self, trace: &ForwardTrace, dlogits: &Matrix) -> Result<GradientTrace> {
        if trace.version != self.version {
            return Err(EspaceError::State(format!(
                "trace from model version {} used with version {}",
                trace.version, self.version
            )));
        }
        if dlogits.shape() != trace.logits.shape() {
            return Err(EspaceError::shape("logit gradient shape mismatch"));
        }
        let cfg = self.config;
        let h = cfg.hidden;
        let n_layers = self.layers.len();
        let mut dx: Vec<Option<Matrix>> = vec![None; n_layers];
        let mut dw: Vec<Option<Matrix>> = vec![None; n_layers];

        let mut back = |id: usize, dy: &Matrix| -> Result<Matrix> {
            let (dxi, dwi) = self.layers[id].backward(&trace.operands[id], dy)?;
            dw[id] = Some(dwi);
            dx[id] = Some(dxi.clone());
            Ok(dxi)
        };

        let inv_sqrt_h = 1.0 / (h as f64).sqrt();
        let mut d_state = back(4 * cfg.blocks, dlogits)?;
        for b in (0..cfg.blocks).rev() {
            let base = 4 * b;
            let cache = &trace.blocks[b];

            let d_tanh = back(base + 3, &d_state)?;
            let du = d_tanh.zip_tanh_grad(&cache.tanh_out);
            let d_h1 = d_state.add(&back(base + 2, &du)?)?;

            let d_o = back(base + 1, &d_h1)?;
            let d_v = matmul_t(&d_o, &cache.attn)?;
            let d_attn = t_matmul(&cache.v, &d_o)?;
            let mut d_scores = softmax_backward(&cache.attn, &d_attn);
            d_scores.scale_in_place(inv_sqrt_h);
            let d_q = matmul(&cache.k, &d_scores)?;
            let d_k = matmul_t(&cache.q, &d_scores)?;
            let d_qkv = Matrix::vstack(&[&d_q, &d_k, &d_v])?;
            d_state = d_h1.add(&back(base, &d_qkv)?)?;
        }

        Ok(GradientTrace {
            dx: dx.into_iter().map(|d| d.expect("every layer visited")).collect(),
            dw: dw.into_iter().map(|d| d.expect("every layer visited")).collect(),
        })
    }

    pub fn sequence_loss(&self, seq: &Sequence) -> Result<f64> {
        Ok(self.forward(Input::Tokens(&seq.tokens), &seq.targets)?.loss)
    }

    /// Mean of per-sequence losses.
    pub fn mean_loss(&self, seqs: &[Sequence]) -> Result<f64> {
        if seqs.is_empty() {
            return Err(EspaceError::Calibration("mean_loss over an empty shard".into()));
        }
        let mut total = 0.0;
        for s in seqs {
            total += self.sequence_loss(s)?;
        }
        Ok(total / seqs.len() as f64)
    }
}

trait TanhGrad {
    fn zip_tanh_grad(&self, tanh_out: &Matrix) -> Matrix;
}

impl TanhGrad for Matrix {
    /// `self ⊙ (1 − t²)`
    fn zip_tanh_grad(&self, tanh_out: &Matrix) -> Matrix {
        let deriv = tanh_out.map(|t| 1.0 - t * t);
        self.hadamard(&deriv).expect("same shape")
    }
}

/// Softmax over each column, restricted to rows `i <= j` for column `j`.
fn causal_softmax(scores: &Matrix) -> Matrix {
    let m = scores.cols();
    let mut out = Matrix::zeros(scores.rows(), m);
    for j in 0..m {
        let upto = (j + 1).min(scores.rows());
        let max = (0..upto).map(|i| scores[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..upto {
            let e = (scores[(i, j)] - max).exp();
            out[(i, j)] = e;
            sum += e;
        }
        for i in 0..upto {
            out[(i, j)] /= sum;
        }
    }
    out
}

fn column_softmax(logits: &Matrix) -> Matrix {
    let (v, m) = logits.shape();
    let mut out = Matrix::zeros(v, m);
    for j in 0..m {
        let max = (0..v).map(|i| logits[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..v {
            let e = (logits[(i, j)] - max).exp();
            out[(i, j)] = e;
            sum += e;
        }
        for i in 0..v {
            out[(i, j)] /= sum;
        }
    }
    out
}

/// Column-wise softmax Jacobian-vector product: `a ⊙ (d − Σᵢ aᵢdᵢ)`.
fn softmax_backward(attn: &Matrix, d_attn: &Matrix) -> Matrix {
    let (r, m) = attn.shape();
    let mut out = Matrix::zeros(r, m);
    for j in 0..m {
        let inner: f64 = (0..r).map(|i| attn[(i, j)] * d_attn[(i, j)]).sum();
        for i in 0..r {
            out[(i, j)] = attn[(i, j)] * (d_attn[(i, j)] - inner);
        }
    }
    out
}

/// `W ← W − lr·∇W` for every layer. Projections are never touched; folded
/// caches are dropped because they no longer match `PᵀW`.
pub fn sgd_step(model: &mut Model, grads: &GradientTrace, lr: f64) -> Result<()> {
    if grads.dw.len() != model.layers.len() {
        return Err(EspaceError::Training(format!(
            "{} weight gradients for {} layers",
            grads.dw.len(),
            model.layers.len()
        )));
    }
    if !grads.dw.iter().all(Matrix::is_finite) {
        return Err(EspaceError::Training("non-finite weight gradient".into()));
    }
    for (layer, dw) in model.layers.iter_mut().zip(&grads.dw) {
        layer.w.axpy(-lr, dw)?;
        layer.folded = None;
    }
    model.touch();
    Ok(())
}

/// One training sequence: `targets[m]` is the token following `tokens[m]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardSizes {
    pub train: usize,
    pub calib: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for ShardSizes {
    fn default() -> Self {
        ShardSizes {
            train: 256,
            calib: 32,
            val: 32,
            test: 32,
        }
    }
}

/// Disjoint shards of a seeded Markov-chain language.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sequence>,
    pub calib: Vec<Sequence>,
    pub val: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

/// Each token has two preferred successors (p = 0.6, 0.25); the remaining
/// mass is spread uniformly over the vocabulary.
pub fn synth_task(seed: u64, vocab: usize, seq_len: usize, sizes: ShardSizes) -> Result<Dataset> {
    if vocab < 2 || seq_len == 0 {
        return Err(EspaceError::config("data", "vocab must be >= 2 and seq_len >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let successors: Vec<(usize, usize)> = (0..vocab)
        .map(|_| {
            let a = rng.random_range(0..vocab);
            let mut b = rng.random_range(0..vocab);
            if b == a {
                b = (a + 1) % vocab;
            }
            (a, b)
        })
        .collect();

    let next = |rng: &mut ChaCha8Rng, cur: usize| -> usize {
        let u: f64 = rng.random();
        if u < 0.6 {
            successors[cur].0
        } else if u < 0.85 {
            successors[cur].1
        } else {
            rng.random_range(0..vocab)
        }
    };

    let mut seen = HashSet::new();
    let mut shard = |rng: &mut ChaCha8Rng, count: usize| -> Result<Vec<Sequence>> {
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while out.len() < count {
            attempts += 1;
            if attempts > 1000 * (count + 1) {
                return Err(EspaceError::config(
                    "data",
                    "cannot draw enough distinct sequences; increase vocab or seq_len",
                ));
            }
            let mut stream = Vec::with_capacity(seq_len + 1);
            stream.push(rng.random_range(0..vocab));
            for _ in 0..seq_len {
                let cur = *stream.last().expect("non-empty");
                stream.push(next(rng, cur));
            }
            if seen.insert(stream.clone()) {
                out.push(Sequence {
                    tokens: stream[..seq_len].to_vec(),
                    targets: stream[1..].to_vec(),
                });
            }
        }
        Ok(out)
    };

    Ok(Dataset {
        train: shard(&mut rng, sizes.train)?,
        calib: shard(&mut rng, sizes.calib)?,
        val: shard(&mut rng, sizes.val)?,
        test: shard(&mut rng, sizes.test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::CandidateKind;
    use crate::linalg::{random_orthonormal, OrderingMode};

    fn cfg(hidden: usize, blocks: usize) -> ModelConfig {
        ModelConfig {
            hidden,
            blocks,
            vocab: 12,
            seq_len: 6,
        }
    }

    fn seq(model: &Model, seed: u64) -> Sequence {
        let c = model.config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Sequence {
            tokens: (0..c.seq_len).map(|_| rng.random_range(0..c.vocab)).collect(),
            targets: (0..c.seq_len).map(|_| rng.random_range(0..c.vocab)).collect(),
        }
    }

    fn bits(m: &Matrix) -> Vec<u64> {
        m.as_slice().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn layer_list_for_two_blocks() {
        let specs = cfg(32, 2).layer_specs();
        let got: Vec<(String, usize, usize)> = specs.iter().map(|s| (s.name(), s.k, s.n)).collect();
        let mut want = Vec::new();
        for b in 0..2 {
            want.push((format!("b{b}.qkv"), 32, 96));
            want.push((format!("b{b}.proj"), 32, 32));
            want.push((format!("b{b}.fc1"), 32, 128));
            want.push((format!("b{b}.fc2"), 128, 32));
        }
        want.push(("head".to_string(), 32, 12));
        assert_eq!(got, want);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(24, 1).validate().is_err());
        assert!(cfg(8, 1).validate().is_err());
        assert!(cfg(512, 1).validate().is_err());
        assert!(cfg(16, 0).validate().is_err());
        assert!(cfg(16, 5).validate().is_err());
        assert!(init_model(cfg(16, 1), 0).is_ok());
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(cfg(16, 2), 5).unwrap();
        let b = init_model(cfg(16, 2), 5).unwrap();
        for (x, y) in a.layers().iter().zip(b.layers()) {
            assert_eq!(bits(x.weight()), bits(y.weight()));
        }
        assert_eq!(bits(a.embedding()), bits(b.embedding()));
    }

    #[test]
    fn init_weight_scale() {
        let m = init_model(cfg(64, 1), 1).unwrap();
        for layer in m.layers() {
            let k = layer.spec().k;
            if k < 64 {
                continue;
            }
            let w = layer.weight().as_slice();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
            let target = 1.0 / (k as f64).sqrt();
            assert!((var.sqrt() - target).abs() <= 0.1 * target, "{}", layer.spec().name());
        }
    }

    #[test]
    fn zero_model_gives_uniform_softmax() {
        let c = cfg(16, 1);
        let mut m = init_model(c, 0).unwrap();
        for spec in c.layer_specs() {
            m.set_weight(spec.id, Matrix::zeros(spec.k, spec.n)).unwrap();
        }
        let x = Matrix::zeros(16, c.seq_len);
        let targets = vec![3; c.seq_len];
        let t = m.forward(Input::Embedded(&x), &targets).unwrap();
        assert!((t.loss - (c.vocab as f64).ln()).abs() < 1e-12);
        for j in 0..c.seq_len {
            let s: f64 = t.probs.col(j).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let m = init_model(cfg(16, 1), 0).unwrap();
        assert!(m.forward(Input::Tokens(&[0; 5]), &[0; 5]).is_err());
        assert!(m.forward(Input::Tokens(&[0; 6]), &[0; 5]).is_err());
        assert!(m.forward(Input::Tokens(&[99; 6]), &[0; 6]).is_err());
        assert!(m.forward(Input::Tokens(&[0; 6]), &[99; 6]).is_err());
    }

    #[test]
    fn attention_is_causal_and_normalized() {
        let m = init_model(cfg(16, 2), 3).unwrap();
        let s = seq(&m, 1);
        let t = m.forward(Input::Tokens(&s.tokens), &s.targets).unwrap();
        for b in 0..2 {
            let a = t.attention(b);
            for j in 0..a.cols() {
                let col = a.col(j);
                assert!(col.iter().all(|v| *v >= 0.0));
                assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(col[j + 1..].iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn full_rank_projection_is_transparent() {
        let mut m = init_model(cfg(16, 2), 4).unwrap();
        let s = seq(&m, 2);
        let before = m.forward(Input::Tokens(&s.tokens), &s.targets).unwrap();
        for spec in m.config().layer_specs() {
            let p = Projection::new(
                spec.id,
                CandidateKind::Mse,
                random_orthonormal(spec.k, spec.k, spec.id.0 as u64).unwrap(),
                OrderingMode::Algebraic,
            )
            .unwrap();
            m.attach_projection(spec.id, p).unwrap();
        }
        let after = m.forward(Input::Tokens(&s.tokens), &s.targets).unwrap();
        assert!(before.logits.max_abs_diff(&after.logits) <= 1e-9);
    }

    #[test]
    fn logit_gradient_is_softmax_minus_onehot() {
        let m = init_model(cfg(16, 1), 6).unwrap();
        let s = seq(&m, 3);
        let t = m.forward(Input::Tokens(&s.tokens), &s.targets).unwrap();
        let head = LayerId(4);
        let g = m.backward(&t).unwrap();
        let x_head = &t.inputs[head.0];
        let mut expect = t.probs.clone();
        for (j, &y) in s.targets.iter().enumerate() {
            expect[(y, j)] -= 1.0;
        }
        expect.scale_in_place(1.0 / 6.0);
        // ∂ℒ/∂W_head = X (softmax − onehot)ᵀ / M
        let dw = matmul_t(x_head, &expect).unwrap();
        assert!(dw.max_abs_diff(&g.dw[head.0]) < 1e-14);

        let eps = 1e-6;
        for (v, j) in [(0usize, 0usize), (5, 3), (s.targets[2], 2)] {
            let loss_at = |delta: f64| {
                let mut logits = t.logits.clone();
                logits[(v, j)] += delta;
                let p = column_softmax(&logits);
                s.targets
                    .iter()
                    .enumerate()
                    .map(|(c, &y)| -p[(y, c)].ln())
                    .sum::<f64>()
                    / 6.0
            };
            let fd = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
            assert!((fd - expect[(v, j)]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let m = init_model(cfg(16, 1), 6).unwrap();
        let s = seq(&m, 3);
        let t = m.forward(Input::Tokens(&s.tokens), &s.targets).unwrap();
        let g = m.backward_from_logits(&t, &Matrix::zeros(12, 6)).unwrap();
        assert!(g.dw.iter().all(|d| d.max_abs() == 0.0));
        assert!(g.dx.iter().all(|d| d.max_abs() == 0.0));
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut m = init_model(cfg(16, 1), 6).unwrap();
        let s = seq(&m, 3);
        let t = m.forward(Input::Tokens(&s.tokens), &s.targets).unwrap();
        let g = m.backward(&t).unwrap();
        sgd_step(&mut m, &g, 0.01).unwrap();
        assert!(matches!(m.backward(&t), Err(EspaceError::State(_))));
    }

    #[test]
    fn activation_gradient_matches_directional_derivative() {
        let m = init_model(cfg(16, 2), 8).unwrap();
        let s = seq(&m, 4);
        let t = m.forward(Input::Tokens(&s.tokens), &s.targets).unwrap();
        let g = m.backward(&t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for id in 0..m.layers().len() {
            let dir = Matrix::random_normal(t.inputs[id].rows(), 6, 1.0, &mut rng);
            let eps = 1e-5;
            let loss_at = |scale: f64| {
                let hook = |lid: LayerId, x: &Matrix| {
                    (lid.0 == id).then(|| {
                        let mut y = x.clone();
                        y.axpy(scale, &dir).unwrap();
                        y
                    })
                };
                m.forward_with(Input::Tokens(&s.tokens), &s.targets, Some(&hook))
                    .unwrap()
                    .loss
            };
            let fd = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
            let analytic: f64 = g.dx[id]
                .as_slice()
                .iter()
                .zip(dir.as_slice())
                .map(|(a, b)| a * b)
                .sum();
            assert!(
                (fd - analytic).abs() <= 1e-6 * analytic.abs().max(1e-3),
                "layer {id}: fd {fd} analytic {analytic}"
            );
        }
    }

    #[test]
    fn sgd_zero_lr_is_identity_and_projection_frozen() {
        let mut m = init_model(cfg(16, 1), 2).unwrap();
        let p = Projection::new(
            LayerId(2),
            CandidateKind::Mse,
            random_orthonormal(16, 4, 1).unwrap(),
            OrderingMode::Algebraic,
        )
        .unwrap();
        m.attach_projection(LayerId(2), p.clone()).unwrap();
        let s = seq(&m, 5);
        let before: Vec<Vec<u64>> = m.layers().iter().map(|l| bits(l.weight())).collect();
        let t = m.forward(Input::Tokens(&s.tokens), &s.targets).unwrap();
        let g = m.backward(&t).unwrap();
        sgd_step(&mut m, &g, 0.0).unwrap();
        let after: Vec<Vec<u64>> = m.layers().iter().map(|l| bits(l.weight())).collect();
        assert_eq!(before, after);

        let t = m.forward(Input::Tokens(&s.tokens), &s.targets).unwrap();
        let g = m.backward(&t).unwrap();
        sgd_step(&mut m, &g, 0.5).unwrap();
        let kept = m.layer(LayerId(2)).unwrap().projection().unwrap();
        assert_eq!(bits(kept.matrix()), bits(p.matrix()));
    }

    #[test]
    fn sgd_rejects_nonfinite() {
        let mut m = init_model(cfg(16, 1), 2).unwrap();
        let s = seq(&m, 5);
        let t = m.forward(Input::Tokens(&s.tokens), &s.targets).unwrap();
        let mut g = m.backward(&t).unwrap();
        g.dw[0].as_mut_slice()[0] = f64::NAN;
        assert!(matches!(sgd_step(&mut m, &g, 0.1), Err(EspaceError::Training(_))));
    }

    #[test]
    fn small_step_decreases_loss() {
        let mut m = init_model(cfg(16, 1), 2).unwrap();
        let s = seq(&m, 5);
        let t = m.forward(Input::Tokens(&s.tokens), &s.targets).unwrap();
        let g = m.backward(&t).unwrap();
        sgd_step(&mut m, &g, 1e-3).unwrap();
        assert!(m.sequence_loss(&s).unwrap() < t.loss);
    }

    #[test]
    fn synth_task_is_deterministic_and_disjoint() {
        let sizes = ShardSizes {
            train: 40,
            calib: 10,
            val: 10,
            test: 10,
        };
        let a = synth_task(3, 16, 8, sizes).unwrap();
        let b = synth_task(3, 16, 8, sizes).unwrap();
        assert_eq!(a, b);
        let mut all = HashSet::new();
        for s in a.train.iter().chain(&a.calib).chain(&a.val).chain(&a.test) {
            assert!(all.insert(s.clone()));
            assert_eq!(s.tokens[1..], s.targets[..7]);
        }
        assert!(synth_task(3, 2, 1, sizes).is_err());
    }
}
