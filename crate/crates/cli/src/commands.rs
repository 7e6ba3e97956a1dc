use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use finn_autodiff::OutputTransform;
use finn_core::datagen::{add_noise, generate_family, generate_split, Dataset, Split};
use finn_core::evaluator::{evaluate, function_table, species_range, tabulated_functions, write_table_csv, EvalReport};
use finn_core::family::Family;
use finn_core::integrator::Scheme;
use finn_core::lab::{ingest, SampleRegistry};
use finn_core::model::{FinnConfig, FinnModel, ModuleSpec};
use finn_core::trainer::{train, RunRecord, TrainConfig};
use finn_core::CoreError;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::stage::{commit_all, Manifest, Stage};

pub const MODEL_FILE: &str = "model.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RECORD_FILE: &str = "run_record.json";
pub const COMPARISON_FILE: &str = "comparison.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryShape {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// Sidecar of a checkpoint: how to rebuild the model and how it was trained.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub config: FinnConfig,
    pub train: TrainConfig,
    pub entries: Vec<EntryShape>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_model(dir: &Path, model: &FinnModel, train: &TrainConfig) -> Result<()> {
    let entries = model
        .params()
        .entries()
        .map(|(name, e)| EntryShape {
            name: name.to_string(),
            shape: e.shape.clone(),
            trainable: e.trainable,
        })
        .collect();
    let file = ModelFile {
        config: model.config().clone(),
        train: train.clone(),
        entries,
    };
    write_json(&dir.join(MODEL_FILE), &file)?;
    let mut bytes = Vec::new();
    model.save_checkpoint(&mut bytes)?;
    fs::write(dir.join(CHECKPOINT_FILE), bytes)?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<(FinnModel, ModelFile)> {
    let path = dir.join(MODEL_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let file: ModelFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    let reader = fs::File::open(&ckpt).with_context(|| format!("opening {}", ckpt.display()))?;
    let model = FinnModel::load_checkpoint(file.config.clone(), std::io::BufReader::new(reader))
        .with_context(|| format!("loading {}", ckpt.display()))?;
    Ok((model, file))
}

/// Where datasets come from: a directory tree written by `generate`, or the
/// generator itself.
pub struct DataSource {
    pub root: Option<PathBuf>,
}

impl DataSource {
    fn read(&self, family: Family, split: Split) -> Option<Result<Dataset>> {
        self.root.as_ref().map(|root| {
            let dir = root.join(family.name()).join(split.name());
            Dataset::read(&dir).with_context(|| format!("reading dataset {}", dir.display()))
        })
    }

    pub fn split(&self, cfg: &RunConfig, split: Split) -> Result<Dataset> {
        match self.read(cfg.family, split) {
            Some(r) => r,
            None => Ok(generate_split(cfg.family, split, &cfg.solver)?),
        }
    }

    pub fn splits(&self, cfg: &RunConfig, splits: &[Split]) -> Result<Vec<Dataset>> {
        if self.root.is_some() || splits == [Split::Train] {
            return splits.iter().map(|&s| self.split(cfg, s)).collect();
        }
        let all = generate_family(cfg.family, &cfg.solver)?;
        Ok(all.into_iter().filter(|d| splits.contains(&d.spec.split)).collect())
    }
}

fn requested(splits: &[Split]) -> Vec<Split> {
    if splits.is_empty() {
        return Split::ALL.to_vec();
    }
    Split::ALL.into_iter().filter(|s| splits.contains(s)).collect()
}

/// Runs `body` on a fresh stage for `target`, seals it and commits it.
/// The stage is removed if any step fails.
fn staged<F>(target: &Path, command: &str, config: Value, body: F) -> Result<Manifest>
where
    F: FnOnce(&Path) -> Result<(Vec<(String, String)>, Value)>,
{
    let stage = Stage::new(target)?;
    let sealed = body(stage.path()).and_then(|(inputs, summary)| stage.seal(command, config, inputs, summary));
    match sealed {
        Ok(m) => {
            commit_all(vec![(stage, m.clone())])?;
            Ok(m)
        }
        Err(e) => {
            stage.abandon();
            Err(e)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Binary,
    Csv,
}

pub fn generate(cfg: &RunConfig, out: &Path, splits: &[Split], format: DataFormat) -> Result<Vec<PathBuf>> {
    let splits = requested(splits);
    let datasets = DataSource { root: None }.splits(cfg, &splits)?;
    let config = serde_json::to_value(cfg)?;
    let mut stages = Vec::new();
    let result = (|| -> Result<()> {
        for ds in &datasets {
            let target = out.join(cfg.family.name()).join(ds.spec.split.name());
            let stage = Stage::new(&target)?;
            let written = (|| -> Result<Manifest> {
                ds.write(stage.path())?;
                if format == DataFormat::Csv {
                    ds.write_csv(&stage.path().join("data.csv"))?;
                }
                let summary = json!({ "split": ds.spec.split, "dims": ds.dims() });
                stage.seal("generate", config.clone(), vec![], summary)
            })();
            match written {
                Ok(m) => stages.push((stage, m)),
                Err(e) => {
                    stage.abandon();
                    return Err(e);
                }
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        for (s, _) in stages {
            s.abandon();
        }
        return Err(e);
    }
    let targets = stages.iter().map(|(s, _)| s.target().to_path_buf()).collect();
    commit_all(stages)?;
    Ok(targets)
}

/// Trains one model into `dir` and returns it with its record.
fn train_into(dir: &Path, cfg: &RunConfig, config: FinnConfig, data: &Dataset) -> Result<(FinnModel, RunRecord, TrainConfig)> {
    let mut tc = cfg.train_config();
    let recorded = tc.clone();
    if tc.checkpoint_every.is_some() {
        let sub = tc.checkpoint_dir.clone().unwrap_or_else(|| PathBuf::from("checkpoints"));
        ensure!(sub.is_relative(), "train.checkpoint_dir must be relative to the run directory");
        tc.checkpoint_dir = Some(dir.join(sub));
    }
    let mut model = FinnModel::new(config)?;
    let mut record = train(&mut model, data, &tc)?;
    for p in &mut record.checkpoints {
        if let Ok(rel) = p.strip_prefix(dir) {
            *p = rel.to_path_buf();
        }
    }
    write_model(dir, &model, &recorded)?;
    write_json(&dir.join(RECORD_FILE), &record)?;
    Ok((model, record, recorded))
}

fn training_data(cfg: &RunConfig, source: &DataSource) -> Result<Dataset> {
    let data = source.split(cfg, Split::Train)?;
    match &cfg.noise {
        Some(n) => Ok(add_noise(&data, n.std, n.seed)?),
        None => Ok(data),
    }
}

fn record_summary(record: &RunRecord) -> Value {
    json!({
        "losses": record.losses,
        "best_epoch": record.best_epoch,
        "best_loss": record.best_loss,
        "nan_epoch": record.nan_epoch,
        "diverged": record.diverged,
        "stopped_by": record.stopped_by,
        "checkpoint": CHECKPOINT_FILE,
    })
}

pub fn run_dir(out: &Path, family: Family, seed: u64) -> PathBuf {
    out.join("runs").join(family.name()).join(format!("seed_{seed}"))
}

pub fn train_run(cfg: &RunConfig, out: &Path, source: &DataSource) -> Result<PathBuf> {
    let data = training_data(cfg, source)?;
    let spec = data.spec.clone();
    let target = run_dir(out, cfg.family, cfg.seed);
    staged(&target, "train", serde_json::to_value(cfg)?, |dir| {
        let (_, record, _) = train_into(dir, cfg, cfg.finn_config(&spec), &data)?;
        let mut summary = record_summary(&record);
        summary["seed"] = json!(cfg.seed);
        summary["dataset_hash"] = json!(data.content_hash());
        Ok((vec![("train_data".into(), data.content_hash())], summary))
    })?;
    Ok(target)
}

fn report_summary(report: &EvalReport) -> Value {
    let splits: Vec<Value> = report
        .splits
        .iter()
        .map(|s| json!({ "split": s.split, "rmse": s.rmse() }))
        .collect();
    json!({ "checkpoint_hash": report.checkpoint_hash, "splits": splits })
}

/// Loads a run directory after checking its files against its manifest.
fn verified_model(model_dir: &Path) -> Result<(FinnModel, ModelFile, Manifest)> {
    let manifest = Manifest::read(model_dir)?;
    crate::stage::verify(model_dir, &manifest)?;
    let (model, file) = load_model(model_dir)?;
    Ok((model, file, manifest))
}

pub fn evaluate_run(cfg: &RunConfig, model_dir: &Path, source: &DataSource, splits: &[Split]) -> Result<PathBuf> {
    let (model, _, manifest) = verified_model(model_dir)?;
    ensure!(
        model.family() == cfg.family,
        "model in {} is {}, not {}",
        model_dir.display(),
        model.family(),
        cfg.family
    );
    let datasets = source.splits(cfg, &requested(splits))?;
    let refs: Vec<&Dataset> = datasets.iter().collect();
    let report = evaluate(&model, &refs, &cfg.evaluation)?;
    let expected = manifest.artifact(CHECKPOINT_FILE).map(|a| a.content_hash.clone());
    ensure!(
        expected.as_deref() == Some(report.checkpoint_hash.as_str()),
        "checkpoint in {} does not match its manifest",
        model_dir.display()
    );
    let target = model_dir.join("eval");
    let mut inputs = vec![("checkpoint".to_string(), report.checkpoint_hash.clone())];
    inputs.extend(datasets.iter().map(|d| (format!("{}_data", d.spec.split), d.content_hash())));
    staged(&target, "evaluate", serde_json::to_value(cfg)?, |dir| {
        report.write(dir)?;
        Ok((inputs, report_summary(&report)))
    })?;
    Ok(target)
}

pub fn extract_run(cfg: &RunConfig, model_dir: &Path, source: &DataSource, points: usize) -> Result<PathBuf> {
    ensure!(points >= 2, "need at least two points per table");
    let (model, _, manifest) = verified_model(model_dir)?;
    let data = source.split(cfg, Split::Train)?;
    let ranges: Vec<[f64; 2]> = (0..model.family().species()).map(|s| species_range(&data, s)).collect();
    let mut tables = Vec::new();
    for &which in tabulated_functions(model.family()) {
        match function_table(&model, which, &ranges[..model.function_inputs(which)], points) {
            Ok(t) => tables.push(t),
            Err(CoreError::MissingModule(_)) | Err(CoreError::Config(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    if tables.is_empty() {
        bail!("model in {} has no learned function to tabulate", model_dir.display());
    }
    let target = model_dir.join("functions");
    let checkpoint = manifest
        .artifact(CHECKPOINT_FILE)
        .map(|a| a.content_hash.clone())
        .unwrap_or_default();
    staged(&target, "extract", serde_json::to_value(cfg)?, |dir| {
        for t in &tables {
            write_table_csv(t, &dir.join(format!("function_{}.csv", t.function)))?;
        }
        let names: Vec<&str> = tables.iter().map(|t| t.function.as_str()).collect();
        Ok((
            vec![("checkpoint".into(), checkpoint), ("train_data".into(), data.content_hash())],
            json!({ "functions": names, "ranges": ranges }),
        ))
    })?;
    Ok(target)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Polynomial,
    Noise,
    Euler,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Polynomial => "polynomial",
            Ablation::Noise => "noise",
            Ablation::Euler => "euler",
        }
    }
}

fn polynomial_module(spec: &ModuleSpec, order: usize) -> ModuleSpec {
    match spec {
        ModuleSpec::Network { output, trainable, .. } => ModuleSpec::Polynomial {
            order,
            positive: matches!(output, OutputTransform::Softplus | OutputTransform::SigmoidPositive { .. }),
            trainable: *trainable,
        },
        other => other.clone(),
    }
}

fn polynomial_config(mut config: FinnConfig, order: usize) -> FinnConfig {
    config.diffusion = config.diffusion.iter().map(|m| polynomial_module(m, order)).collect();
    config.advection = polynomial_module(&config.advection, order);
    config.reaction = polynomial_module(&config.reaction, order);
    config
}

fn variant_summary(model: &FinnModel, record: &RunRecord, report: &EvalReport) -> Value {
    let splits: Vec<Value> = report
        .splits
        .iter()
        .map(|s| json!({ "split": s.split, "rmse": s.rmse() }))
        .collect();
    json!({
        "parameters": model.param_count(),
        "completed_epochs": record.completed_epochs(),
        "nan_epoch": record.nan_epoch,
        "diverged": record.diverged,
        "best_loss": record.best_loss,
        "final_loss": record.losses.last(),
        "splits": splits,
    })
}

pub fn ablation_dir(out: &Path, family: Family, kind: Ablation, seed: u64) -> PathBuf {
    out.join("ablations").join(family.name()).join(kind.name()).join(format!("seed_{seed}"))
}

/// Trains and evaluates the default model and one altered variant side by
/// side and writes both with a comparison.
pub fn ablate_run(cfg: &RunConfig, out: &Path, source: &DataSource, kind: Ablation, splits: &[Split]) -> Result<PathBuf> {
    let clean = source.split(cfg, Split::Train)?;
    let eval_sets = source.splits(cfg, &requested(splits))?;
    let eval_refs: Vec<&Dataset> = eval_sets.iter().collect();
    let base_cfg = cfg.clone();
    let mut variant_cfg = cfg.clone();
    let mut variant_data = clean.clone();
    let change = match kind {
        Ablation::Polynomial => json!({ "polynomial_order": cfg.ablation.polynomial_order }),
        Ablation::Noise => {
            let n = &cfg.ablation.noise;
            variant_data = add_noise(&clean, n.std, n.seed)?;
            json!({ "noise_std": n.std, "noise_seed": n.seed })
        }
        Ablation::Euler => {
            variant_cfg.train.integrator.scheme = Scheme::Euler;
            json!({ "train_scheme": "euler" })
        }
    };
    let base_model_cfg = base_cfg.finn_config(&clean.spec);
    let variant_model_cfg = match kind {
        Ablation::Polynomial => polynomial_config(variant_cfg.finn_config(&clean.spec), cfg.ablation.polynomial_order),
        _ => variant_cfg.finn_config(&clean.spec),
    };
    let target = ablation_dir(out, cfg.family, kind, cfg.seed);
    let mut inputs = vec![("train_data".to_string(), clean.content_hash())];
    if kind == Ablation::Noise {
        inputs.push(("noisy_train_data".into(), variant_data.content_hash()));
    }
    staged(&target, "ablate", serde_json::to_value(cfg)?, |dir| {
        let mut results = Vec::new();
        for (name, run_cfg, model_cfg, data) in [
            ("baseline", &base_cfg, base_model_cfg, &clean),
            ("variant", &variant_cfg, variant_model_cfg, &variant_data),
        ] {
            let sub = dir.join(name);
            fs::create_dir(&sub)?;
            let (model, record, _) = train_into(&sub, run_cfg, model_cfg, data)?;
            let report = evaluate(&model, &eval_refs, &run_cfg.evaluation)?;
            report.write(&sub.join("eval"))?;
            results.push(variant_summary(&model, &record, &report));
        }
        let variant = results.pop().expect("two runs");
        let baseline = results.pop().expect("two runs");
        let comparison = json!({
            "ablation": kind.name(),
            "family": cfg.family,
            "seed": cfg.seed,
            "change": change,
            "baseline": baseline,
            "variant": variant,
        });
        write_json(&dir.join(COMPARISON_FILE), &comparison)?;
        Ok((inputs, comparison))
    })?;
    Ok(target)
}

pub fn ingest_run(out: &Path, sample_id: &str, file: &Path, registry: Option<&Path>) -> Result<PathBuf> {
    let registry = match registry {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SampleRegistry::from_json(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SampleRegistry::builtin(),
    };
    let sample = registry.get(sample_id)?;
    let observations = ingest(file, sample).with_context(|| format!("ingesting {}", file.display()))?;
    let source = fs::read(file)?;
    let target = out.join("observations").join(sanitize(sample_id));
    let config = json!({ "registry_version": registry.version, "units": registry.units, "sample": sample });
    staged(&target, "ingest", config, |dir| {
        write_json(&dir.join("observations.json"), &observations)?;
        observations.write_csv(&dir.join("observations.csv"))?;
        Ok((
            vec![("source".into(), finn_core::datagen::content_hash(&source))],
            json!({ "sample": sample.id, "rows": observations.len() }),
        ))
    })?;
    Ok(target)
}

/// Sample ids like `#2B` become directory names like `2B`.
fn sanitize(id: &str) -> String {
    let s: String = id
        .chars()
        .filter(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        .collect();
    if s.is_empty() {
        "sample".into()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn networks_become_polynomials() {
        let cfg = RunConfig::defaults(Family::DiffusionSorption);
        let spec = finn_core::datagen::EquationSpec::registered(Family::DiffusionSorption, Split::Train);
        let poly = polynomial_config(cfg.finn_config(&spec), 3);
        assert!(matches!(poly.diffusion[0], ModuleSpec::Polynomial { order: 3, positive: true, .. }));
        assert!(matches!(poly.reaction, ModuleSpec::Absent | ModuleSpec::Polynomial { .. }));
        FinnModel::new(poly).unwrap();
    }

    #[test]
    fn sample_ids_become_directory_names() {
        assert_eq!(sanitize("#2B"), "2B");
        assert_eq!(sanitize("../x"), "..x");
        assert_eq!(sanitize("#"), "sample");
    }

    #[test]
    fn requested_splits_keep_canonical_order() {
        assert_eq!(requested(&[]), Split::ALL.to_vec());
        assert_eq!(requested(&[Split::OutDisTest, Split::Train]), vec![Split::Train, Split::OutDisTest]);
    }
}
