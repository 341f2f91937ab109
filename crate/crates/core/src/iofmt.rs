//! Binary tensor files, run configuration, report tables and checkpoints.
//!
//! Tensor layout (all integers little-endian `u32`):
//!
//! ```text
//! offset  size      field
//! 0       4         magic "ESPT"
//! 4       4         version (1)
//! 8       4         dtype code (0 = f64, 1 = f32)
//! 12      4         ndim (1 or 2)
//! 16      4*ndim    dims
//! ..      ..        row-major little-endian payload
//! ```
//!
//! Reports are tab-separated text with a single header line naming the fields.
//! Every file is written to a temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calib::{CandidateKind, CorrAccumulator};
use crate::error::{EspaceError, Result};
use crate::linalg::{Matrix, OrderingMode};
use crate::projector::{choose_rank, Projection};
use crate::toymodel::{LayerId, LayerSpec, Model, ModelConfig, Role, ShardSizes};

pub const TENSOR_MAGIC: &[u8; 4] = b"ESPT";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    pub fn code(self) -> u32 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }

    fn from_code(code: u32) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F64),
            1 => Some(Dtype::F32),
            _ => None,
        }
    }
}

pub fn encode_tensor(m: &Matrix, dtype: Dtype) -> Result<Vec<u8>> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(EspaceError::format(
            12,
            format!("refusing to write degenerate {}x{} tensor", m.rows(), m.cols()),
        ));
    }
    let dim = |d: usize| {
        u32::try_from(d).map_err(|_| EspaceError::format(16, format!("dimension {d} exceeds u32")))
    };
    let mut out = Vec::with_capacity(24 + m.as_slice().len() * dtype.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.code().to_le_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&dim(m.rows())?.to_le_bytes());
    out.extend_from_slice(&dim(m.cols())?.to_le_bytes());
    match dtype {
        Dtype::F64 => m.as_slice().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => m
            .as_slice()
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| {
            EspaceError::format(
                offset as u64,
                format!("truncated header: missing {what} (file has {} bytes)", bytes.len()),
            )
        })
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Matrix> {
    if bytes.get(0..4) != Some(TENSOR_MAGIC.as_slice()) {
        return Err(EspaceError::format(0, "bad magic, expected \"ESPT\""));
    }
    let version = read_u32(bytes, 4, "version")?;
    if version != TENSOR_VERSION {
        return Err(EspaceError::format(4, format!("unsupported version {version}")));
    }
    let code = read_u32(bytes, 8, "dtype")?;
    let dtype = Dtype::from_code(code)
        .ok_or_else(|| EspaceError::format(8, format!("unknown dtype code {code}")))?;
    let ndim = read_u32(bytes, 12, "ndim")? as usize;
    if !(1..=2).contains(&ndim) {
        return Err(EspaceError::format(12, format!("unsupported ndim {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        dims.push(read_u32(bytes, 16 + 4 * i, "dims")? as usize);
    }
    if dims.contains(&0) {
        return Err(EspaceError::format(16, format!("degenerate shape {dims:?}")));
    }
    let (rows, cols) = if ndim == 1 { (1, dims[0]) } else { (dims[0], dims[1]) };
    let header = 16 + 4 * ndim;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| EspaceError::format(16, "shape overflows"))?;
    let actual = bytes.len() - header;
    if actual != expected {
        return Err(EspaceError::format(
            header as u64,
            format!("payload length mismatch: expected {expected} bytes, found {actual}"),
        ));
    }
    let payload = &bytes[header..];
    let data: Vec<f64> = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(EspaceError::format(
            (header + pos * dtype.size()) as u64,
            "non-finite value in payload",
        ));
    }
    Matrix::from_vec(rows, cols, data)
}

/// Writes `bytes` to a temporary sibling, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| EspaceError::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| EspaceError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| EspaceError::io(&tmp, e))?;
        f.sync_all().map_err(|e| EspaceError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| EspaceError::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| EspaceError::io(path, e))
}

pub fn write_tensor(path: &Path, m: &Matrix) -> Result<()> {
    atomic_write(path, &encode_tensor(m, Dtype::F64)?)
}

pub fn write_tensor_as(path: &Path, m: &Matrix, dtype: Dtype) -> Result<()> {
    atomic_write(path, &encode_tensor(m, dtype)?)
}

pub fn read_tensor(path: &Path) -> Result<Matrix> {
    decode_tensor(&read_bytes(path)?)
}

/// Line-oriented table: one tab-separated header line, then one record per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width must match header");
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join("\t");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Table> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| EspaceError::format(0, "empty table"))?
            .split('\t')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let row: Vec<String> = line.split('\t').map(str::to_string).collect();
            if row.len() != header.len() {
                return Err(EspaceError::format(
                    (i + 1) as u64,
                    format!("line {} has {} fields, header has {}", i + 2, row.len(), header.len()),
                ));
            }
            rows.push(row);
        }
        Ok(Table { header, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.render().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Table> {
        let bytes = read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|e| EspaceError::format(e.utf8_error().valid_up_to() as u64, "table is not UTF-8"))?;
        Table::parse(&text)
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| EspaceError::format(0, format!("table has no column `{name}`")))
    }

    /// Parses a field of a row.
    pub fn get<T: std::str::FromStr>(&self, row: usize, name: &str) -> Result<T> {
        let col = self.column(name)?;
        let raw = &self.rows[row][col];
        raw.parse().map_err(|_| {
            EspaceError::format(
                (row + 1) as u64,
                format!("cannot parse `{raw}` in column `{name}`"),
            )
        })
    }

    pub fn get_str(&self, row: usize, name: &str) -> Result<&str> {
        let col = self.column(name)?;
        Ok(&self.rows[row][col])
    }
}

fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Snapshot of a correlation accumulator: tensor of the running sum plus a
/// sidecar table holding `kind_code`, `k` and `batches`.
pub fn write_accumulator(stem: &Path, acc: &CorrAccumulator) -> Result<()> {
    write_tensor(&with_suffix(stem, "espt"), acc.sum())?;
    let mut t = Table::new(&["kind_code", "k", "batches"]);
    t.push(vec![
        acc.kind().code().to_string(),
        acc.dim().to_string(),
        acc.batch_count().to_string(),
    ]);
    t.write(&with_suffix(stem, "meta.tsv"))
}

pub fn read_accumulator(stem: &Path) -> Result<CorrAccumulator> {
    let sum = read_tensor(&with_suffix(stem, "espt"))?;
    let meta = Table::read(&with_suffix(stem, "meta.tsv"))?;
    let kind = CandidateKind::from_code(meta.get(0, "kind_code")?)?;
    let k: usize = meta.get(0, "k")?;
    if k != sum.rows() {
        return Err(EspaceError::format(0, format!("sidecar K={k} but tensor is {:?}", sum.shape())));
    }
    CorrAccumulator::from_parts(kind, sum, meta.get(0, "batches")?)
}

pub const PROJECTION_HEADER: [&str; 6] = ["layer_id", "name", "kind_code", "l", "ordering", "file"];

/// Writes projections as tensors under `dir` plus an `index.tsv` sidecar.
pub fn write_projections<'a>(
    dir: &Path,
    items: impl IntoIterator<Item = (&'a str, &'a Projection)>,
) -> Result<()> {
    let mut index = Table::new(&PROJECTION_HEADER);
    for (name, p) in items {
        let file = format!("{name}.{}.espt", p.kind());
        write_tensor(&dir.join(&file), p.matrix())?;
        index.push(vec![
            p.layer_id().0.to_string(),
            name.to_string(),
            p.kind().code().to_string(),
            p.l().to_string(),
            p.ordering().to_string(),
            file,
        ]);
    }
    index.write(&dir.join("index.tsv"))
}

/// Reads projections written by [`write_projections`], in index order.
pub fn read_projections(dir: &Path) -> Result<Vec<(String, Projection)>> {
    let index = Table::read(&dir.join("index.tsv"))?;
    let mut out = Vec::with_capacity(index.rows.len());
    for r in 0..index.rows.len() {
        let p = read_tensor(&dir.join(index.get_str(r, "file")?))?;
        let l: usize = index.get(r, "l")?;
        if p.cols() != l {
            return Err(EspaceError::format(0, format!("index says L={l}, tensor is {:?}", p.shape())));
        }
        let ordering: OrderingMode = index.get_str(r, "ordering")?.parse()?;
        let projection = Projection::new(
            LayerId(index.get(r, "layer_id")?),
            CandidateKind::from_code(index.get(r, "kind_code")?)?,
            p,
            ordering,
        )?;
        out.push((index.get_str(r, "name")?.to_string(), projection));
    }
    Ok(out)
}

/// Saves a model as a directory of tensors plus `config.toml`.
pub fn save_model(dir: &Path, model: &Model) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| EspaceError::io(dir, e))?;
    let cfg = toml::to_string(model.config()).map_err(|e| EspaceError::config("model", e.to_string()))?;
    atomic_write(&dir.join("config.toml"), cfg.as_bytes())?;
    write_tensor(&dir.join("embed.espt"), model.embedding())?;
    for layer in model.layers() {
        let name = layer.spec().name();
        write_tensor(&dir.join(format!("{name}.w.espt")), layer.weight())?;
        if let Some(f) = layer.folded() {
            write_tensor(&dir.join(format!("{name}.folded.espt")), f)?;
        }
    }
    let projections: Vec<(String, &Projection)> = model
        .layers()
        .iter()
        .filter_map(|l| l.projection().map(|p| (l.spec().name(), p)))
        .collect();
    write_projections(
        &dir.join("projections"),
        projections.iter().map(|(n, p)| (n.as_str(), *p)),
    )
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let cfg_path = dir.join("config.toml");
    if !cfg_path.exists() {
        return Err(EspaceError::Prerequisite(format!(
            "no model checkpoint at {}",
            dir.display()
        )));
    }
    let text = String::from_utf8(read_bytes(&cfg_path)?)
        .map_err(|_| EspaceError::format(0, "config.toml is not UTF-8"))?;
    let config: ModelConfig = toml::from_str(&text).map_err(config_error)?;
    let embed = read_tensor(&dir.join("embed.espt"))?;
    let specs = config.layer_specs();
    let weights = specs
        .iter()
        .map(|s| read_tensor(&dir.join(format!("{}.w.espt", s.name()))))
        .collect::<Result<Vec<_>>>()?;
    let mut model = Model::from_parts(config, embed, weights)?;
    let proj_dir = dir.join("projections");
    if proj_dir.join("index.tsv").exists() {
        for (_, p) in read_projections(&proj_dir)? {
            model.attach_projection(p.layer_id(), p)?;
        }
    }
    for s in &specs {
        let path = dir.join(format!("{}.folded.espt", s.name()));
        if path.exists() {
            model.set_folded(s.id, read_tensor(&path)?)?;
        }
    }
    Ok(model)
}

fn config_error(e: toml::de::Error) -> EspaceError {
    let msg = e.message().to_string();
    let key = ["unknown field `", "missing field `"]
        .iter()
        .find_map(|prefix| {
            msg.find(prefix).and_then(|i| {
                let rest = &msg[i + prefix.len()..];
                rest.find('`').map(|j| rest[..j].to_string())
            })
        })
        .unwrap_or_else(|| "<toml>".to_string());
    EspaceError::config(key, msg)
}

fn default_seed() -> u64 {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub blocks: usize,
    pub vocab: usize,
    pub seq_len: usize,
    #[serde(default = "ModelSection::default_pretrain_steps")]
    pub pretrain_steps: usize,
    #[serde(default = "ModelSection::default_pretrain_lr")]
    pub pretrain_lr: f64,
}

impl ModelSection {
    fn default_pretrain_steps() -> usize {
        400
    }

    fn default_pretrain_lr() -> f64 {
        0.1
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            blocks: self.blocks,
            vocab: self.vocab,
            seq_len: self.seq_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub batches: usize,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection { batches: 16 }
    }
}

/// Power-of-two rank policy with per-layer overrides.
///
/// Override keys are `<role>.L` (every block) or `b<i>.<role>.L` (one layer);
/// the more specific key wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankPolicy {
    #[serde(default = "RankPolicy::default_target_rate")]
    pub target_rate: f64,
    #[serde(default)]
    pub overrides: BTreeMap<String, usize>,
    /// Whether the head GEMM is a compression candidate.
    #[serde(default)]
    pub include_head: bool,
}

impl Default for RankPolicy {
    fn default() -> Self {
        RankPolicy {
            target_rate: RankPolicy::default_target_rate(),
            overrides: BTreeMap::new(),
            include_head: false,
        }
    }
}

impl RankPolicy {
    fn default_target_rate() -> f64 {
        0.5
    }

    pub fn rank_for(&self, spec: &LayerSpec) -> Result<usize> {
        let specific = format!("{}.L", spec.name());
        let by_role = format!("{}.L", spec.role);
        match self.overrides.get(&specific).or_else(|| self.overrides.get(&by_role)) {
            Some(&l) => Ok(l),
            None => choose_rank(spec.k, spec.n, self.target_rate),
        }
    }

    pub fn applies_to(&self, spec: &LayerSpec) -> bool {
        spec.role != Role::Head || self.include_head
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_rate) {
            return Err(EspaceError::config(
                "rank.target_rate",
                format!("must be in [0, 1), got {}", self.target_rate),
            ));
        }
        let specs = config.layer_specs();
        for (key, &l) in &self.overrides {
            let full_key = format!("rank.overrides.{key}");
            let target = key
                .strip_suffix(".L")
                .ok_or_else(|| EspaceError::config(&full_key, "override keys end in `.L`"))?;
            let matched: Vec<&LayerSpec> = specs
                .iter()
                .filter(|s| s.name() == target || s.role.as_str() == target)
                .collect();
            if matched.is_empty() {
                return Err(EspaceError::config(&full_key, "does not name a layer or role"));
            }
            for s in matched {
                if l == 0 || l > s.k {
                    return Err(EspaceError::config(
                        &full_key,
                        format!("L={l} outside 1..={} for {}", s.k, s.name()),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSection {
    #[serde(default = "SelectionSection::default_threshold")]
    pub exclusion_threshold: f64,
}

impl SelectionSection {
    fn default_threshold() -> f64 {
        0.02
    }
}

impl Default for SelectionSection {
    fn default() -> Self {
        SelectionSection {
            exclusion_threshold: SelectionSection::default_threshold(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HealingSection {
    pub steps: usize,
    pub lr: f64,
}

impl Default for HealingSection {
    fn default() -> Self {
        HealingSection { steps: 500, lr: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Output directory; the CLI `--out` flag takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Optional existing checkpoint used instead of pretraining a fresh model.
    #[serde(default)]
    pub base_model: Option<PathBuf>,
}

fn default_candidates() -> Vec<CandidateKind> {
    CandidateKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub model: ModelSection,
    #[serde(default)]
    pub data: ShardSizes,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub rank: RankPolicy,
    #[serde(default = "default_candidates")]
    pub candidates: Vec<CandidateKind>,
    #[serde(default)]
    pub ordering: OrderingMode,
    #[serde(default)]
    pub selection: SelectionSection,
    #[serde(default)]
    pub healing: HealingSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model.model_config();
        model.validate()?;
        if self.model.pretrain_lr <= 0.0 || !self.model.pretrain_lr.is_finite() {
            return Err(EspaceError::config("model.pretrain_lr", "must be positive"));
        }
        let d = &self.data;
        for (key, v) in [("data.train", d.train), ("data.calib", d.calib), ("data.val", d.val), ("data.test", d.test)] {
            if v == 0 {
                return Err(EspaceError::config(key, "shard must be non-empty"));
            }
        }
        if self.calibration.batches == 0 || self.calibration.batches > d.calib {
            return Err(EspaceError::config(
                "calibration.batches",
                format!("must be in 1..={} (calib shard size)", d.calib),
            ));
        }
        self.rank.validate(&model)?;
        if self.candidates.is_empty() {
            return Err(EspaceError::config("candidates", "at least one candidate kind required"));
        }
        let mut seen = self.candidates.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.candidates.len() {
            return Err(EspaceError::config("candidates", "duplicate candidate kind"));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail too
        if !(self.selection.exclusion_threshold > 0.0) {
            return Err(EspaceError::config("selection.exclusion_threshold", "must be positive"));
        }
        if self.healing.lr <= 0.0 || !self.healing.lr.is_finite() {
            return Err(EspaceError::config("healing.lr", "must be positive"));
        }
        if let Some(p) = &self.paths.base_model {
            if !p.exists() {
                return Err(EspaceError::config(
                    "paths.base_model",
                    format!("{} does not exist", p.display()),
                ));
            }
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| EspaceError::config("<file>", "config is not UTF-8"))?;
    RunConfig::parse(&text)
}
