//! Metrics and evaluation reports.
//!
//! The JSON report layout is versioned by [`REPORT_SCHEMA`]; see the README
//! for the field reference.

use std::fs;
use std::path::Path;

use finn_autodiff::{write_checkpoint, Matrix};
use serde::{Deserialize, Serialize};

use crate::datagen::{content_hash, Dataset, Split};
use crate::error::{CoreError, Result};
use crate::family::{true_constitutive, ConstitutiveValue, Family, BURGERS_DIFFUSIVITY, REACTION_DIFFUSIVITY};
use crate::family::{ALLEN_CAHN_DIFFUSIVITY, SORPTION};
use crate::integrator::IntegratorConfig;
use crate::model::{from_state, FinnModel, LearnedFunction, StencilWeights};
use crate::trainer::rollout;

pub const REPORT_SCHEMA: &str = "finn-eval/1";

/// Points per learned-function table.
pub const TABLE_POINTS: usize = 201;

/// Mean squared error divided by the population variance of `data`, taken
/// over every element.
pub fn rmse(prediction: &[f64], data: &[f64]) -> Result<f64> {
    if prediction.len() != data.len() {
        return Err(CoreError::Shape(format!(
            "prediction has {} values, data has {}",
            prediction.len(),
            data.len()
        )));
    }
    if data.is_empty() {
        return Err(CoreError::Shape("empty data".into()));
    }
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(CoreError::ZeroVariance);
    }
    let mse = prediction.iter().zip(data).map(|(p, d)| (p - d) * (p - d)).sum::<f64>() / n;
    Ok(mse / var)
}

/// Mass balance defect of a trajectory under `model`'s fluxes and sources:
/// `|Q(T) - Q(0) - int (boundary inflow + source) dt| / sum |u0| dV`,
/// summed over the conserved species with the rates integrated by the
/// trapezoid rule on the output times. States are `cells x species`.
pub fn conservation_error(model: &FinnModel, times: &[f64], states: &[Matrix]) -> Result<f64> {
    if times.len() != states.len() || states.is_empty() {
        return Err(CoreError::Shape(format!(
            "{} times for {} states",
            times.len(),
            states.len()
        )));
    }
    let species = model.family().species();
    let dv = model.grid().cell_volume();
    let conserved = model.conserved_species();
    let amount = |m: &Matrix, s: usize, abs: bool| -> f64 {
        (0..m.rows())
            .map(|c| {
                let v = m.data()[c * species + s];
                if abs {
                    v.abs()
                } else {
                    v
                }
            })
            .sum::<f64>()
            * dv
    };
    let mut rates = Vec::with_capacity(states.len());
    for st in states {
        let b = model.balance_rates(st)?;
        rates.push(conserved.iter().map(|&s| b.boundary[s] + b.source[s]).collect::<Vec<_>>());
    }
    let mut defect = 0.0;
    let mut scale = 0.0;
    for (k, &s) in conserved.iter().enumerate() {
        let change = amount(&states[states.len() - 1], s, false) - amount(&states[0], s, false);
        let exchanged: f64 = times
            .windows(2)
            .enumerate()
            .map(|(n, w)| 0.5 * (w[1] - w[0]) * (rates[n][k] + rates[n + 1][k]))
            .sum();
        defect += change - exchanged;
        scale += amount(&states[0], s, true);
    }
    if scale == 0.0 {
        return Err(CoreError::ZeroVariance);
    }
    Ok(defect.abs() / scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SplitOutcome {
    Completed { rmse: f64, conservation_error: Option<f64> },
    /// The closed-loop rollout aborted.
    Failed { message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: Split,
    pub dataset_hash: String,
    pub frames: usize,
    #[serde(flatten)]
    pub outcome: SplitOutcome,
}

impl SplitReport {
    pub fn rmse(&self) -> Option<f64> {
        match self.outcome {
            SplitOutcome::Completed { rmse, .. } => Some(rmse),
            SplitOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionRow {
    pub input: Vec<f64>,
    pub learned: Vec<f64>,
    /// `None` where the ground truth is singular.
    pub truth: Option<Vec<f64>>,
    pub abs_error: Option<Vec<f64>>,
}

/// A learned function tabulated against its ground truth. Multi-input
/// functions are sampled along the diagonal of the per-species data ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionTable {
    pub function: String,
    pub ranges: Vec<[f64; 2]>,
    pub rows: Vec<FunctionRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarComparison {
    pub name: String,
    pub learned: f64,
    pub truth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub family: Family,
    pub checkpoint_hash: String,
    pub splits: Vec<SplitReport>,
    pub functions: Vec<FunctionTable>,
    pub scalars: Vec<ScalarComparison>,
    pub stencil: Vec<StencilWeights>,
}

impl EvalReport {
    pub fn split(&self, split: Split) -> Option<&SplitReport> {
        self.splits.iter().find(|s| s.split == split)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Writes `report.json`, `splits.csv`, `stencil.csv` and one
    /// `function_<name>.csv` per table.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json()?)?;

        let mut w = csv::Writer::from_path(dir.join("splits.csv"))?;
        w.write_record(["split", "status", "rmse", "conservation_error", "dataset_hash"])?;
        for s in &self.splits {
            let (status, rmse, cons) = match &s.outcome {
                SplitOutcome::Completed {
                    rmse,
                    conservation_error,
                } => (
                    "completed".to_string(),
                    rmse.to_string(),
                    conservation_error.map(|c| c.to_string()).unwrap_or_default(),
                ),
                SplitOutcome::Failed { message } => (format!("failed: {message}"), String::new(), String::new()),
            };
            w.write_record([s.split.name(), &status, &rmse, &cons, &s.dataset_hash])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("stencil.csv"))?;
        w.write_record(["axis", "self_weight", "neighbor_weight"])?;
        for s in &self.stencil {
            w.write_record([s.axis.to_string(), s.self_weight.to_string(), s.neighbor_weight.to_string()])?;
        }
        w.flush()?;

        for t in &self.functions {
            write_table_csv(t, &dir.join(format!("function_{}.csv", t.function)))?;
        }
        Ok(())
    }
}

/// Writes a function table as flat CSV: inputs, learned outputs, true
/// outputs and absolute errors (blank where the truth is singular).
pub fn write_table_csv(table: &FunctionTable, path: &Path) -> Result<()> {
    let inputs = table.ranges.len();
    let outputs = table.rows.first().map_or(0, |r| r.learned.len());
    let mut header: Vec<String> = Vec::new();
    let suffix = |prefix: &str, i: usize, n: usize| {
        if n == 1 {
            prefix.to_string()
        } else {
            format!("{prefix}_{i}")
        }
    };
    header.extend((0..inputs).map(|i| suffix("u", i, inputs)));
    for name in ["learned", "true", "abs_error"] {
        header.extend((0..outputs).map(|i| suffix(name, i, outputs)));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for r in &table.rows {
        let mut rec: Vec<String> = r.input.iter().map(f64::to_string).collect();
        rec.extend(r.learned.iter().map(f64::to_string));
        for opt in [&r.truth, &r.abs_error] {
            match opt {
                Some(v) => rec.extend(v.iter().map(f64::to_string)),
                None => rec.extend(std::iter::repeat_n(String::new(), outputs)),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Hash of the model's serialized parameters, as stored in a checkpoint file.
pub fn checkpoint_hash(model: &FinnModel) -> Result<String> {
    let mut bytes = Vec::new();
    write_checkpoint(model.params(), &mut bytes)?;
    Ok(content_hash(&bytes))
}

/// Closed-loop rollout of `model` over one dataset, using the dataset's own
/// grid and boundary conditions. States are `cells x species`.
pub fn predict(model: &FinnModel, dataset: &Dataset, integrator: &IntegratorConfig) -> Result<Vec<Matrix>> {
    if model.family() != dataset.spec.family {
        return Err(CoreError::Config(format!(
            "model family {} does not match dataset family {}",
            model.family(),
            dataset.spec.family
        )));
    }
    let local = model.with_domain(dataset.spec.grid.clone(), dataset.spec.boundaries.clone())?;
    Ok(rollout(&local, &dataset.state(0), &dataset.times, integrator)?.states)
}

fn evaluate_split(model: &FinnModel, dataset: &Dataset, integrator: &IntegratorConfig) -> Result<SplitReport> {
    let outcome = match predict(model, dataset, integrator) {
        Ok(states) => {
            let flat: Vec<f64> = states.iter().flat_map(from_state).collect();
            let rmse = rmse(&flat, &dataset.values)?;
            let local = model.with_domain(dataset.spec.grid.clone(), dataset.spec.boundaries.clone())?;
            let conservation_error = conservation_error(&local, &dataset.times, &states).ok();
            SplitOutcome::Completed {
                rmse,
                conservation_error,
            }
        }
        Err(CoreError::Integration(f)) => SplitOutcome::Failed { message: f.to_string() },
        Err(e) => return Err(e),
    };
    Ok(SplitReport {
        split: dataset.spec.split,
        dataset_hash: dataset.content_hash(),
        frames: dataset.frames(),
        outcome,
    })
}

/// Smallest and largest value of species `s` over the whole trajectory.
pub fn species_range(dataset: &Dataset, s: usize) -> [f64; 2] {
    let cells = dataset.cells();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..dataset.frames() {
        for &v in &dataset.frame(t)[s * cells..(s + 1) * cells] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    [lo, hi]
}

fn linspace(range: [f64; 2], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| range[0] + (range[1] - range[0]) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Tabulates a learned function over `points` evenly spaced inputs spanning
/// the given per-input ranges.
pub fn function_table(
    model: &FinnModel,
    which: LearnedFunction,
    ranges: &[[f64; 2]],
    points: usize,
) -> Result<FunctionTable> {
    let family = model.family();
    let name = match which {
        LearnedFunction::AdvectiveVelocity => "advective_velocity",
        LearnedFunction::Retardation => "retardation",
        LearnedFunction::Reaction => "reaction",
        LearnedFunction::Diffusion => "diffusion",
    };
    if ranges.len() != model.function_inputs(which) {
        return Err(CoreError::Shape(format!("{name} takes {} inputs", model.function_inputs(which))));
    }
    let axes: Vec<Vec<f64>> = ranges.iter().map(|&r| linspace(r, points)).collect();
    let inputs: Vec<Vec<f64>> = (0..points).map(|i| axes.iter().map(|a| a[i]).collect()).collect();
    let q = Matrix::new(points, ranges.len(), inputs.concat());
    let learned = model.extract(which, &q)?;
    let outputs = learned.cols();
    let rows = inputs
        .into_iter()
        .enumerate()
        .map(|(i, input)| {
            let learned = learned.data()[i * outputs..(i + 1) * outputs].to_vec();
            let truth = match true_constitutive(family, name, &input) {
                Ok(ConstitutiveValue::Finite(v)) => Some(v),
                _ => None,
            };
            let abs_error = truth
                .as_ref()
                .map(|t| t.iter().zip(&learned).map(|(a, b)| (a - b).abs()).collect());
            FunctionRow {
                input,
                learned,
                truth,
                abs_error,
            }
        })
        .collect();
    Ok(FunctionTable {
        function: name.to_string(),
        ranges: ranges.to_vec(),
        rows,
    })
}

fn true_diffusivities(family: Family) -> Vec<f64> {
    match family {
        Family::Burgers1d | Family::Burgers2d => vec![BURGERS_DIFFUSIVITY],
        Family::DiffusionSorption => vec![SORPTION.diffusivity],
        Family::DiffusionReaction => REACTION_DIFFUSIVITY.to_vec(),
        Family::AllenCahn => vec![ALLEN_CAHN_DIFFUSIVITY],
    }
}

/// The learned functions worth tabulating for `family`.
pub fn tabulated_functions(family: Family) -> &'static [LearnedFunction] {
    match family {
        Family::Burgers1d | Family::Burgers2d => &[LearnedFunction::AdvectiveVelocity],
        Family::DiffusionSorption => &[LearnedFunction::Retardation],
        Family::DiffusionReaction | Family::AllenCahn => &[LearnedFunction::Reaction],
    }
}

/// Rolls `model` out on every dataset from its first frame and collects
/// metrics, learned-function tables over the training-data range (or the
/// union of all ranges without a training split) and the stencil.
pub fn evaluate(model: &FinnModel, datasets: &[&Dataset], integrator: &IntegratorConfig) -> Result<EvalReport> {
    if datasets.is_empty() {
        return Err(CoreError::Data("no datasets to evaluate".into()));
    }
    let family = model.family();
    let mut splits = Vec::with_capacity(datasets.len());
    for ds in datasets {
        splits.push(evaluate_split(model, ds, integrator)?);
    }

    let species = family.species();
    let range_source: Vec<&Dataset> = match datasets.iter().find(|d| d.spec.split == Split::Train) {
        Some(d) => vec![*d],
        None => datasets.to_vec(),
    };
    let ranges: Vec<[f64; 2]> = (0..species)
        .map(|s| {
            range_source.iter().map(|d| species_range(d, s)).fold(
                [f64::INFINITY, f64::NEG_INFINITY],
                |a, b| [a[0].min(b[0]), a[1].max(b[1])],
            )
        })
        .collect();

    let mut functions = Vec::new();
    for &which in tabulated_functions(family) {
        let r: Vec<[f64; 2]> = ranges[..model.function_inputs(which)].to_vec();
        match function_table(model, which, &r, TABLE_POINTS) {
            Ok(t) => functions.push(t),
            Err(CoreError::MissingModule(_)) | Err(CoreError::Config(_)) => {}
            Err(e) => return Err(e),
        }
    }

    let scalars = model
        .scalar_diffusivities()
        .into_iter()
        .zip(true_diffusivities(family))
        .enumerate()
        .filter_map(|(s, (learned, truth))| {
            learned.map(|learned| ScalarComparison {
                name: format!("diffusivity.{s}"),
                learned,
                truth,
            })
        })
        .collect();

    Ok(EvalReport {
        schema: REPORT_SCHEMA.to_string(),
        family,
        checkpoint_hash: checkpoint_hash(model)?,
        splits,
        functions,
        scalars,
        stencil: model.stencil_report(),
    })
}
