use std::path::{Path, PathBuf};

use espace::bench::{bench_gemm, BenchConfig};
use espace::iofmt::{load_config, load_model, read_accumulator, read_projections, save_model, write_accumulator, write_projections, RunConfig, Table};
use espace::pipeline::{
    build_candidates, calibrate_accumulators, compress_model, curve_table, exclusion_policy, heal, heal_table,
    progressive_apply, rank_layers, records_from_table, report_table, sweep_table, train, winners,
    LayerAccumulators, LayerCandidates, SweepRecord,
};
use espace::toymodel::{init_model, synth_task, Dataset};
use espace::{CandidateKind, EspaceError, Model, Result};
use log::info;

use crate::{BenchArgs, StageArgs};

const DEFAULT_OUT: &str = "espace-out";

pub struct Stage {
    cfg: RunConfig,
    out: PathBuf,
    data: Dataset,
}

fn missing(stage: &str, path: &Path) -> EspaceError {
    EspaceError::Prerequisite(format!("{} not found; run `espace {stage}` first", path.display()))
}

impl Stage {
    pub fn open(args: &StageArgs) -> Result<Stage> {
        let mut cfg = load_config(&args.config)?;
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        if let Some(o) = args.ordering {
            cfg.ordering = o;
        }
        if let Some(r) = args.target_rate {
            cfg.rank.target_rate = r;
        }
        cfg.validate()?;
        let out = args
            .out
            .clone()
            .or_else(|| cfg.paths.out.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        let m = &cfg.model;
        let data = synth_task(cfg.seed, m.vocab, m.seq_len, cfg.data)?;
        Ok(Stage { cfg, out, data })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str, stage: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(missing(stage, &p))
        }
    }

    fn load(&self, name: &str, stage: &str) -> Result<Model> {
        let dir = self.require(name, stage)?;
        let model = load_model(&dir)?;
        if *model.config() != self.cfg.model.model_config() {
            return Err(EspaceError::config(
                "model",
                format!("checkpoint at {} does not match the configured model", dir.display()),
            ));
        }
        Ok(model)
    }

    /// Loads `base/`, creating it from `paths.base_model` or by pretraining.
    fn base_model(&self) -> Result<Model> {
        let dir = self.path("base");
        if dir.join("config.toml").exists() {
            return self.load("base", "calibrate");
        }
        let model = match &self.cfg.paths.base_model {
            Some(p) => load_model(p)?,
            None => {
                let mut model = init_model(self.cfg.model.model_config(), self.cfg.seed.wrapping_add(1))?;
                let losses = train(
                    &mut model,
                    &self.data.train,
                    self.cfg.model.pretrain_steps,
                    self.cfg.model.pretrain_lr,
                )?;
                if let (Some(a), Some(b)) = (losses.first(), losses.last()) {
                    info!("pretrained {} steps: loss {a:.4} -> {b:.4}", losses.len());
                }
                model
            }
        };
        save_model(&dir, &model)?;
        Ok(model)
    }

    fn stem(&self, model: &Model, i: usize, kind: CandidateKind) -> PathBuf {
        let name = model.layers()[i].spec().name();
        self.path("calib").join(format!("{name}.{kind}"))
    }

    pub fn calibrate(&self) -> Result<()> {
        let model = self.base_model()?;
        let with_gradients = self.cfg.candidates.iter().any(|k| k.needs_gradients());
        let accs = calibrate_accumulators(&model, &self.data.calib, self.cfg.calibration.batches, with_gradients)?;
        for (i, layer) in accs.iter().enumerate() {
            for acc in layer.accumulators() {
                write_accumulator(&self.stem(&model, i, acc.kind()), acc)?;
            }
        }
        println!(
            "calibrated {} layers on {} batches -> {}",
            accs.len(),
            self.cfg.calibration.batches,
            self.path("calib").display()
        );
        Ok(())
    }

    fn read_calibration(&self, model: &Model) -> Result<Vec<LayerAccumulators>> {
        let with_gradients = self.cfg.candidates.iter().any(|k| k.needs_gradients());
        (0..model.layers().len())
            .map(|i| {
                let read = |kind| {
                    let stem = self.stem(model, i, kind);
                    let mut tensor = stem.clone().into_os_string();
                    tensor.push(".espt");
                    if !Path::new(&tensor).exists() {
                        return Err(missing("calibrate", Path::new(&tensor)));
                    }
                    read_accumulator(&stem)
                };
                Ok(LayerAccumulators {
                    layer_id: model.layers()[i].spec().id,
                    mse: read(CandidateKind::Mse)?,
                    nmse: read(CandidateKind::Nmse)?,
                    nl: if with_gradients { Some(read(CandidateKind::Nl)?) } else { None },
                    nl_norm: if with_gradients { Some(read(CandidateKind::NlNorm)?) } else { None },
                })
            })
            .collect()
    }

    pub fn build(&self) -> Result<()> {
        let model = self.load("base", "calibrate")?;
        let accs = self.read_calibration(&model)?;
        let calibrations = accs
            .iter()
            .map(|a| {
                let mut cal = a.finalize(model.layer(a.layer_id)?.weight())?;
                cal.matrices.retain(|k, _| self.cfg.candidates.contains(k));
                Ok(cal)
            })
            .collect::<Result<Vec<_>>>()?;
        let candidates = build_candidates(&model, &calibrations, &self.cfg.rank, self.cfg.ordering)?;
        let names: Vec<String> = candidates
            .iter()
            .flat_map(|c| c.projections.iter().map(|p| model.layers()[p.layer_id().0].spec().name()))
            .collect();
        let all = candidates.iter().flat_map(|c| c.projections.iter());
        write_projections(&self.path("candidates"), names.iter().map(String::as_str).zip(all))?;
        for c in &candidates {
            println!("{}: L={} candidates={}", model.layers()[c.layer_id.0].spec().name(), c.l, c.projections.len());
        }
        Ok(())
    }

    fn read_candidates(&self) -> Result<Vec<LayerCandidates>> {
        let dir = self.require("candidates", "build")?;
        let mut out: Vec<LayerCandidates> = Vec::new();
        for (_, p) in read_projections(&dir)? {
            match out.iter_mut().find(|c| c.layer_id == p.layer_id()) {
                Some(c) => c.projections.push(p),
                None => out.push(LayerCandidates {
                    layer_id: p.layer_id(),
                    l: p.l(),
                    projections: vec![p],
                }),
            }
        }
        Ok(out)
    }

    fn read_select(&self) -> Result<(Vec<SweepRecord>, f64)> {
        let t = Table::read(&self.require("select.tsv", "select")?)?;
        let baseline = Table::read(&self.require("baseline.tsv", "select")?)?.get(0, "val_loss")?;
        Ok((records_from_table(&t)?, baseline))
    }

    pub fn select(&self) -> Result<()> {
        let model = self.load("base", "calibrate")?;
        let candidates = self.read_candidates()?;
        let baseline = model.mean_loss(&self.data.val)?;
        let records = espace::pipeline::sensitivity_sweep(&model, &candidates, &self.data.val)?;
        sweep_table(&model, &records)?.write(&self.path("select.tsv"))?;
        let mut b = Table::new(&["val_loss"]);
        b.push(vec![baseline.to_string()]);
        b.write(&self.path("baseline.tsv"))?;
        println!("baseline val loss {baseline}");
        for r in &records {
            println!(
                "{}: best {} loss {}",
                model.layers()[r.layer_id.0].spec().name(),
                r.best_kind,
                r.best_loss
            );
        }
        Ok(())
    }

    pub fn sweep(&self) -> Result<()> {
        let model = self.load("base", "calibrate")?;
        let candidates = self.read_candidates()?;
        let (records, baseline) = self.read_select()?;
        let ranking = rank_layers(&records, baseline);
        sweep_table(&model, &ranking)?.write(&self.path("ranking.tsv"))?;
        let curve = progressive_apply(&model, &ranking, &candidates, ranking.len(), &self.data.val)?;
        curve_table(&model, &curve)?.write(&self.path("curve.tsv"))?;
        for p in &curve {
            println!("layers {:>2}  rate {:.4}  val loss {:.6}", p.layers_applied, p.compression_rate, p.val_loss);
        }
        Ok(())
    }

    pub fn compress(&self) -> Result<()> {
        let (records, baseline) = self.read_select()?;
        let model = self.load("base", "calibrate")?;
        let candidates = self.read_candidates()?;
        let kept = exclusion_policy(&records, baseline, self.cfg.selection.exclusion_threshold);
        let chosen: Vec<SweepRecord> = records.into_iter().filter(|r| kept.contains(&r.layer_id)).collect();
        let selections = winners(&chosen, &candidates)?;
        let (compressed, report) = compress_model(&model, &selections)?;
        save_model(&self.path("compressed"), &compressed)?;
        report_table(&report).write(&self.path("report.tsv"))?;
        println!(
            "compressed {} layers, overall rate {:.4}, val loss {}",
            selections.len(),
            report.overall_rate,
            compressed.mean_loss(&self.data.val)?
        );
        Ok(())
    }

    pub fn heal(&self) -> Result<()> {
        let mut model = self.load("compressed", "compress")?;
        let h = &self.cfg.healing;
        let curve = heal(&mut model, &self.data.train, &self.data.val, h.steps, h.lr)?;
        model.fold_all()?;
        save_model(&self.path("healed"), &model)?;
        heal_table(&curve).write(&self.path("heal.tsv"))?;
        println!("healed {} steps: val loss {} -> {}", h.steps, curve.initial_val_loss, curve.final_val_loss);
        Ok(())
    }

    pub fn eval(&self) -> Result<()> {
        let mut t = Table::new(&["model", "overall_rate", "test_loss"]);
        let base = self.load("base", "calibrate")?;
        let mut models = vec![("base", base)];
        for name in ["compressed", "healed"] {
            if self.path(name).exists() {
                models.push((name, self.load(name, "compress")?));
            }
        }
        for (name, m) in &models {
            let rate = espace::pipeline::CompressionReport::for_model(m).overall_rate;
            let loss = m.mean_loss(&self.data.test)?;
            println!("{name}: rate {rate:.4} test loss {loss}");
            t.push(vec![name.to_string(), rate.to_string(), loss.to_string()]);
        }
        t.write(&self.path("eval.tsv"))
    }
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        k: a.k,
        n: a.n,
        m: a.m,
        l: a.l,
        reps: a.reps,
        warmup: a.warmup,
        dtype: a.dtype,
        parallel: a.parallel,
        seed: a.seed,
    };
    let r = bench_gemm(&cfg)?;
    print!("{}", r.render());
    Ok(())
}
