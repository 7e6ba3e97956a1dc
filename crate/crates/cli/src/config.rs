//! Run configuration: family defaults, then the JSON file, then dotted
//! `key=value` overrides. Unknown keys are rejected at every layer.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use finn_core::datagen::{reference_solver, EquationSpec, Split};
use finn_core::family::Family;
use finn_core::integrator::IntegratorConfig;
use finn_core::model::{FinnConfig, KnownConstants, ModuleSpec, StencilConfig};
use finn_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Learned modules of a model; grid and boundaries come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stencil: StencilConfig,
    pub diffusion: Vec<ModuleSpec>,
    pub advection: ModuleSpec,
    pub reaction: ModuleSpec,
    pub constants: KnownConstants,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub std: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Order of the polynomial that replaces the learned network.
    pub polynomial_order: usize,
    pub noise: NoiseConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub family: Family,
    /// Seeds model initialisation and training.
    pub seed: u64,
    /// Integrator of the data generator.
    pub solver: IntegratorConfig,
    /// Noise added to the training split before training.
    pub noise: Option<NoiseConfig>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Integrator of evaluation rollouts.
    pub evaluation: IntegratorConfig,
    pub ablation: AblationConfig,
}

fn polynomial_order(family: Family) -> usize {
    match family {
        Family::Burgers1d | Family::Burgers2d | Family::DiffusionReaction => 5,
        Family::DiffusionSorption => 3,
        Family::AllenCahn => 10,
    }
}

impl RunConfig {
    pub fn defaults(family: Family) -> Self {
        let spec = EquationSpec::registered(family, Split::Train);
        let learned = FinnConfig::learned(family, spec.grid, spec.boundaries);
        Self {
            family,
            seed: 0,
            solver: reference_solver(),
            noise: None,
            model: ModelConfig {
                stencil: learned.stencil,
                diffusion: learned.diffusion,
                advection: learned.advection,
                reaction: learned.reaction,
                constants: learned.constants,
            },
            train: TrainConfig::for_family(family),
            evaluation: IntegratorConfig::default(),
            ablation: AblationConfig {
                polynomial_order: polynomial_order(family),
                noise: NoiseConfig { std: 0.05, seed: 1 },
            },
        }
    }

    /// Model configuration on the grid and boundaries of `spec`.
    pub fn finn_config(&self, spec: &EquationSpec) -> FinnConfig {
        FinnConfig {
            family: self.family,
            grid: spec.grid.clone(),
            boundaries: spec.boundaries.clone(),
            stencil: self.model.stencil.clone(),
            diffusion: self.model.diffusion.clone(),
            advection: self.model.advection.clone(),
            reaction: self.model.reaction.clone(),
            constants: self.model.constants,
            seed: self.seed,
        }
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

/// Recursively merges `top` into `base`. Tagged objects whose `kind`
/// differs are replaced rather than merged.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            let retagged = matches!((b.get("kind"), t.get("kind")), (Some(x), Some(y)) if x != y);
            if retagged {
                *b = t;
                return;
            }
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Parses `a.b.c=value`; the value is read as JSON when it parses, else as
/// a string.
pub fn parse_override(text: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = text
        .split_once('=')
        .with_context(|| format!("override {text:?} is not of the form key=value"))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        bail!("override key {key:?} has an empty segment");
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok((path, value))
}

fn nest(path: &[String], value: Value) -> Value {
    path.iter().rev().fold(value, |acc, key| {
        let mut m = Map::new();
        m.insert(key.clone(), acc);
        Value::Object(m)
    })
}

fn family_of(v: &Value) -> Result<Option<Family>> {
    match v.get("family") {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.parse()?)),
        Some(other) => bail!("family must be a string, found {other}"),
    }
}

fn read_file(file: Option<&Path>) -> Result<Value> {
    match file {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            if !v.is_object() {
                bail!("config {} must hold a JSON object", p.display());
            }
            Ok(v)
        }
        None => Ok(Value::Object(Map::new())),
    }
}

fn finish(mut value: Value, file_value: Value, parsed: Vec<(Vec<String>, Value)>) -> Result<RunConfig> {
    merge(&mut value, file_value);
    for (path, v) in parsed {
        merge(&mut value, nest(&path, v));
    }
    serde_json::from_value(value).context("invalid configuration")
}

/// Resolves the configuration of one run.
pub fn resolve(family_flag: Option<Family>, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let file_value = read_file(file)?;
    let parsed: Vec<(Vec<String>, Value)> = overrides.iter().map(|o| parse_override(o)).collect::<Result<_>>()?;
    let mut family = family_of(&file_value)?;
    for (path, value) in &parsed {
        if path.len() == 1 && path[0] == "family" {
            family = Some(value.as_str().context("family must be a string")?.parse()?);
        }
    }
    if let Some(flag) = family_flag {
        family = Some(flag);
    }
    let family = family.context("no family given (use --family or a config file)")?;
    let mut cfg = finish(serde_json::to_value(RunConfig::defaults(family))?, file_value, parsed)?;
    if let Some(flag) = family_flag {
        cfg.family = flag;
    }
    if cfg.family != family {
        bail!("family changed while resolving the configuration");
    }
    Ok(cfg)
}

/// Resolves a configuration on top of the one recorded by an earlier run.
pub fn resolve_over(base: &RunConfig, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let parsed: Vec<(Vec<String>, Value)> = overrides.iter().map(|o| parse_override(o)).collect::<Result<_>>()?;
    let cfg = finish(serde_json::to_value(base)?, read_file(file)?, parsed)?;
    if cfg.family != base.family {
        bail!("the family of an existing run cannot be changed");
    }
    Ok(cfg)
}
