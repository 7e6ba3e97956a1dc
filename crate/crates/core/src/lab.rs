//! Laboratory diffusion-sorption workflow: the core-sample registry,
//! observation files, sparse fitting and transfer to other samples.
//!
//! All quantities are in metres, days and kg/m³.

use std::fs;
use std::path::Path;

use finn_autodiff::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::evaluator::rmse;
use crate::family::{Family, TrueFunction};
use crate::integrator::IntegratorConfig;
use crate::model::{FinnConfig, FinnModel, KnownConstants, ModuleSpec};
use crate::pde::{AxisBoundaries, BoundaryCondition, BoundarySet, CauchyCoefficient, Centering, Grid};
use crate::trainer::{rollout, train_sparse, Observation, RunRecord, Target, TrainConfig};

pub const REGISTRY_VERSION: u32 = 1;

/// Unit tag an observation file may declare in a `# units:` comment.
pub const UNITS_TAG: &str = "days,m,kg/m3";

/// Volumes along a core sample.
pub const LAB_CELLS: usize = 26;

/// Breakthrough samples drawn by the synthetic generator.
pub const BREAKTHROUGH_POINTS: usize = 55;

const REGISTRY_JSON: &str = include_str!("../resources/core_samples.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottomBoundary {
    /// Flushed by a reservoir with flow rate `Q`.
    Cauchy,
    NoFlow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoreSampleSpec {
    pub id: String,
    /// Effective diffusion coefficient (m²/day).
    pub diffusivity: f64,
    pub porosity: f64,
    /// Bulk density (kg/m³).
    pub density: f64,
    pub length: f64,
    pub radius: Option<f64>,
    /// Duration of the experiment (days).
    pub t_end: f64,
    /// Reservoir flow rate (m³/day).
    pub flow_rate: Option<f64>,
    /// Concentration held at the top of the core.
    pub top_concentration: f64,
    pub bottom: BottomBoundary,
    /// Overrides the default bottom Cauchy coefficient `-D * A / Q`.
    #[serde(default)]
    pub cauchy_coefficient: Option<f64>,
}

impl CoreSampleSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("diffusivity", self.diffusivity),
            ("porosity", self.porosity),
            ("density", self.density),
            ("length", self.length),
            ("t_end", self.t_end),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CoreError::Config(format!("sample {}: {name} must be positive", self.id)));
            }
        }
        if self.porosity >= 1.0 {
            return Err(CoreError::Config(format!("sample {}: porosity must be below 1", self.id)));
        }
        if !(self.top_concentration >= 0.0) {
            return Err(CoreError::Config(format!(
                "sample {}: top concentration must be non-negative",
                self.id
            )));
        }
        if self.bottom == BottomBoundary::Cauchy {
            self.bottom_coefficient()?;
        }
        Ok(())
    }

    pub fn cross_section(&self) -> Option<f64> {
        self.radius.map(|r| std::f64::consts::PI * r * r)
    }

    /// Coefficient `c` of the bottom condition `u = c * du/dx`.
    pub fn bottom_coefficient(&self) -> Result<f64> {
        if let Some(c) = self.cauchy_coefficient {
            return Ok(c);
        }
        match (self.cross_section(), self.flow_rate) {
            (Some(a), Some(q)) if q > 0.0 => Ok(-self.diffusivity * a / q),
            _ => Err(CoreError::Config(format!(
                "sample {} needs radius and flow rate for its bottom condition",
                self.id
            ))),
        }
    }

    /// Node-centred line from the top (x = 0) to the bottom (x = L).
    pub fn grid(&self) -> Result<Grid> {
        Grid::line(0.0, self.length, LAB_CELLS, Centering::Node)
    }

    pub fn boundaries(&self) -> Result<BoundarySet> {
        let max = match self.bottom {
            BottomBoundary::Cauchy => BoundaryCondition::Cauchy {
                coefficient: CauchyCoefficient::Value(self.bottom_coefficient()?),
            },
            BottomBoundary::NoFlow => BoundaryCondition::no_flow(),
        };
        let sides = AxisBoundaries {
            min: BoundaryCondition::dirichlet(self.top_concentration),
            max,
        };
        Ok(BoundarySet {
            species: vec![vec![sides]; 2],
        })
    }

    pub fn constants(&self) -> KnownConstants {
        KnownConstants {
            diffusivity: Some(self.diffusivity),
            porosity: Some(self.porosity),
        }
    }

    /// A freshly initialised model with a learned retardation factor.
    pub fn learned_config(&self, seed: u64) -> Result<FinnConfig> {
        let mut cfg = FinnConfig::learned(Family::DiffusionSorption, self.grid()?, self.boundaries()?);
        cfg.constants = self.constants();
        cfg.seed = seed;
        Ok(cfg)
    }

    /// The sample with a known Freundlich isotherm.
    pub fn oracle_config(&self, isotherm: Isotherm) -> Result<FinnConfig> {
        let mut cfg = FinnConfig::oracle(Family::DiffusionSorption, self.grid()?, self.boundaries()?);
        cfg.constants = self.constants();
        cfg.diffusion = vec![ModuleSpec::Analytic {
            function: isotherm.retardation(self),
        }];
        Ok(cfg)
    }

    fn initial_state(&self) -> Matrix {
        Matrix::zeros(LAB_CELLS, 2)
    }
}

/// Freundlich sorption parameters used to synthesise observations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Isotherm {
    pub freundlich_k: f64,
    pub exponent: f64,
}

pub const LAB_ISOTHERM: Isotherm = Isotherm {
    freundlich_k: 3.5e-4,
    exponent: 0.874,
};

impl Isotherm {
    pub fn retardation(&self, sample: &CoreSampleSpec) -> TrueFunction {
        TrueFunction::Freundlich {
            porosity: sample.porosity,
            density: sample.density,
            freundlich_k: self.freundlich_k,
            exponent: self.exponent,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryUnits {
    pub length: String,
    pub time: String,
    pub concentration: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRegistry {
    pub version: u32,
    pub units: RegistryUnits,
    pub samples: Vec<CoreSampleSpec>,
}

impl SampleRegistry {
    /// The registry shipped with the library.
    pub fn builtin() -> Self {
        Self::from_json(REGISTRY_JSON).expect("bundled sample registry is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let reg: Self = serde_json::from_str(text)?;
        if reg.version != REGISTRY_VERSION {
            return Err(CoreError::Config(format!(
                "sample registry version {} is not supported (expected {REGISTRY_VERSION})",
                reg.version
            )));
        }
        let units = (&*reg.units.length, &*reg.units.time, &*reg.units.concentration);
        if units != ("m", "days", "kg/m3") {
            return Err(CoreError::Config(format!("sample registry units {units:?} are not (m, days, kg/m3)")));
        }
        for s in &reg.samples {
            s.validate()?;
        }
        Ok(reg)
    }

    pub fn get(&self, id: &str) -> Result<&CoreSampleSpec> {
        self.samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| CoreError::Config(format!("unknown core sample {id:?}")))
    }
}

/// Where a value was measured.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Location {
    /// Dissolved concentration leaving the bottom of the core.
    Breakthrough,
    /// Total concentration at depth `x`.
    Profile { x: f64 },
}

impl Location {
    fn parse(field: &str) -> Option<Self> {
        let field = field.trim();
        if field == "breakthrough" {
            return Some(Location::Breakthrough);
        }
        let x: f64 = field.strip_prefix("profile@")?.trim().parse().ok()?;
        Some(Location::Profile { x })
    }

    fn tag(&self) -> String {
        match self {
            Location::Breakthrough => "breakthrough".into(),
            Location::Profile { x } => format!("profile@{x}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRow {
    pub time: f64,
    pub location: Location,
    pub value: f64,
}

/// Validated observations bound to one core sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationFile {
    pub sample: String,
    pub rows: Vec<ObservationRow>,
}

impl ObservationFile {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.value).collect()
    }

    /// Observations in model coordinates: breakthrough values are the
    /// dissolved species in the bottom volume, profile values the total
    /// species in the nearest volume.
    pub fn to_observations(&self, sample: &CoreSampleSpec) -> Result<Vec<Observation>> {
        let dx = sample.grid()?.spacing(0);
        Ok(self
            .rows
            .iter()
            .map(|r| match r.location {
                Location::Breakthrough => Observation {
                    time: r.time,
                    cell: LAB_CELLS - 1,
                    species: 0,
                    value: r.value,
                },
                Location::Profile { x } => Observation {
                    time: r.time,
                    cell: ((x / dx).round() as usize).min(LAB_CELLS - 1),
                    species: 1,
                    value: r.value,
                },
            })
            .collect())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["time", "location", "value"])?;
        for r in &self.rows {
            w.write_record([r.time.to_string(), r.location.tag(), r.value.to_string()])?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| CoreError::Data(e.to_string()))?)
            .map_err(|e| CoreError::Data(e.to_string()))?;
        Ok(format!("# units: {UNITS_TAG}\n{body}"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

fn row_error(row: usize, line: u64, msg: impl std::fmt::Display) -> CoreError {
    CoreError::Observation(format!("row {row} (line {line}): {msg}"))
}

/// Parses and validates an observation CSV (`time,location,value`) for
/// `sample`. Locations are `breakthrough` or `profile@<x>`; lines starting
/// with `#` are comments, and a `# units:` comment must equal [`UNITS_TAG`].
pub fn parse_observations(text: &str, sample: &CoreSampleSpec) -> Result<ObservationFile> {
    for line in text.lines() {
        if let Some(units) = line.trim().strip_prefix('#').and_then(|c| c.trim().strip_prefix("units:")) {
            let units: String = units.chars().filter(|c| !c.is_whitespace()).collect();
            if units != UNITS_TAG {
                return Err(CoreError::Observation(format!(
                    "file declares units {units:?}, expected {UNITS_TAG:?}"
                )));
            }
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = match reader.headers() {
        Ok(h) if !h.is_empty() => h.clone(),
        _ => return Err(CoreError::Observation("no observations".into())),
    };
    if headers.iter().collect::<Vec<_>>() != ["time", "location", "value"] {
        return Err(CoreError::Observation(format!(
            "header must be time,location,value, found {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let tolerance = 1e-9 * sample.t_end;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| CoreError::Observation(format!("row {row}: {e}")))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(row_error(row, line, format!("expected 3 fields, found {}", record.len())));
        }
        let time: f64 = record[0]
            .parse()
            .map_err(|_| row_error(row, line, format!("time {:?} is not a number", &record[0])))?;
        let location =
            Location::parse(&record[1]).ok_or_else(|| row_error(row, line, format!("unknown location {:?}", &record[1])))?;
        let value: f64 = record[2]
            .parse()
            .map_err(|_| row_error(row, line, format!("value {:?} is not a number", &record[2])))?;
        if !time.is_finite() || time < 0.0 || time > sample.t_end + tolerance {
            return Err(row_error(
                row,
                line,
                format!("time {time} outside [0, {}] for sample {}", sample.t_end, sample.id),
            ));
        }
        if !value.is_finite() || value < 0.0 {
            return Err(row_error(row, line, format!("concentration {value} must be finite and non-negative")));
        }
        match location {
            Location::Breakthrough if sample.bottom == BottomBoundary::NoFlow => {
                return Err(row_error(
                    row,
                    line,
                    format!("sample {} has a no-flow bottom and no breakthrough curve", sample.id),
                ))
            }
            Location::Profile { x } if !(0.0..=sample.length).contains(&x) => {
                return Err(row_error(row, line, format!("depth {x} outside [0, {}]", sample.length)))
            }
            _ => {}
        }
        rows.push(ObservationRow { time, location, value });
    }
    if rows.is_empty() {
        return Err(CoreError::Observation("no observations".into()));
    }
    Ok(ObservationFile {
        sample: sample.id.clone(),
        rows,
    })
}

pub fn ingest(path: &Path, sample: &CoreSampleSpec) -> Result<ObservationFile> {
    let text = fs::read_to_string(path)?;
    parse_observations(&text, sample)
}

/// `model`'s learned functions on `sample`'s grid, boundaries and constants.
pub fn sample_model(model: &FinnModel, sample: &CoreSampleSpec) -> Result<FinnModel> {
    if model.family() != Family::DiffusionSorption {
        return Err(CoreError::Config(format!("{} is not a diffusion-sorption model", model.family())));
    }
    model
        .with_domain(sample.grid()?, sample.boundaries()?)?
        .with_constants(sample.constants())
}

/// Observations that the oracle model of `sample` produces: 55 evenly
/// spaced breakthrough values, or the final total-concentration profile for
/// a sample with a no-flow bottom.
pub fn synthetic_observations(
    sample: &CoreSampleSpec,
    isotherm: Isotherm,
    solver: &IntegratorConfig,
) -> Result<ObservationFile> {
    let model = FinnModel::new(sample.oracle_config(isotherm)?)?;
    let grid = sample.grid()?;
    let rows = match sample.bottom {
        BottomBoundary::Cauchy => {
            let mut times = vec![0.0];
            times.extend((1..=BREAKTHROUGH_POINTS).map(|k| sample.t_end * k as f64 / BREAKTHROUGH_POINTS as f64));
            let traj = rollout(&model, &sample.initial_state(), &times, solver)?;
            times[1..]
                .iter()
                .zip(&traj.states[1..])
                .map(|(&time, s)| ObservationRow {
                    time,
                    location: Location::Breakthrough,
                    value: s.get(LAB_CELLS - 1, 0).max(0.0),
                })
                .collect()
        }
        BottomBoundary::NoFlow => {
            let traj = rollout(&model, &sample.initial_state(), &[0.0, sample.t_end], solver)?;
            let last = &traj.states[1];
            grid.axes[0]
                .coordinates()
                .into_iter()
                .enumerate()
                .map(|(c, x)| ObservationRow {
                    time: sample.t_end,
                    location: Location::Profile { x },
                    value: last.get(c, 1).max(0.0),
                })
                .collect()
        }
    };
    Ok(ObservationFile {
        sample: sample.id.clone(),
        rows,
    })
}

fn sparse_target(sample: &CoreSampleSpec, observations: &ObservationFile) -> Result<Target> {
    if observations.sample != sample.id {
        return Err(CoreError::Observation(format!(
            "observations belong to sample {}, not {}",
            observations.sample, sample.id
        )));
    }
    if sample.bottom == BottomBoundary::NoFlow
        && observations.rows.iter().any(|r| r.location == Location::Breakthrough)
    {
        return Err(CoreError::Observation(format!(
            "sample {} has a no-flow bottom and no breakthrough curve",
            sample.id
        )));
    }
    Target::sparse(sample.initial_state(), 0.0, &observations.to_observations(sample)?)
}

/// Trains `model`'s retardation factor on one sample's observations.
pub fn fit_sample(
    model: &mut FinnModel,
    sample: &CoreSampleSpec,
    observations: &ObservationFile,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    let target = sparse_target(sample, observations)?;
    let mut local = sample_model(model, sample)?;
    let record = train_sparse(&mut local, &target, cfg)?;
    model.params_mut().set_flat_trainable(&local.params().flat_trainable())?;
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedPoint {
    pub time: f64,
    pub location: Location,
    pub observed: f64,
    pub predicted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub sample: String,
    pub rmse: f64,
    pub points: Vec<PredictedPoint>,
}

/// Predicts `observations` of `sample` with `model`'s learned retardation
/// factor and scores them.
pub fn transfer_evaluate(
    model: &FinnModel,
    sample: &CoreSampleSpec,
    observations: &ObservationFile,
    solver: &IntegratorConfig,
) -> Result<TransferResult> {
    let target = sparse_target(sample, observations)?;
    let local = sample_model(model, sample)?;
    let traj = rollout(&local, target.initial(), target.times(), solver)?;
    let obs = observations.to_observations(sample)?;
    let mut points = Vec::with_capacity(obs.len());
    for (o, row) in obs.iter().zip(&observations.rows) {
        let k = target
            .times()
            .iter()
            .position(|&t| t == o.time)
            .expect("observation times are rollout times");
        points.push(PredictedPoint {
            time: o.time,
            location: row.location,
            observed: o.value,
            predicted: traj.states[k].get(o.cell, o.species),
        });
    }
    let predicted: Vec<f64> = points.iter().map(|p| p.predicted).collect();
    Ok(TransferResult {
        sample: sample.id.clone(),
        rmse: rmse(&predicted, &observations.values())?,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::reference_solver;

    fn sample(id: &str) -> CoreSampleSpec {
        SampleRegistry::builtin().get(id).unwrap().clone()
    }

    #[test]
    fn registry_holds_the_documented_values() {
        let s2 = sample("#2");
        assert_eq!(s2.diffusivity, 2.00e-5);
        assert_eq!(s2.length, 0.02604);
        assert_eq!(s2.t_end, 39.82);
        assert_eq!(s2.flow_rate, Some(1.04e-4));
        assert_eq!(s2.top_concentration, 1.6);
        let s1 = sample("#1");
        assert_eq!((s1.porosity, s1.density, s1.length, s1.t_end), (0.288, 1957.0, 0.0254, 38.81));
        assert_eq!((s1.radius, s1.flow_rate, s1.top_concentration), (Some(0.02375), Some(1.01e-4), 1.4));
        let s2b = sample("#2B");
        assert_eq!((s2b.diffusivity, s2b.length, s2b.t_end), (2.78e-5, 0.105, 48.88));
        assert_eq!(s2b.bottom, BottomBoundary::NoFlow);
        assert_eq!(s2b.radius, None);
    }

    #[test]
    fn default_cauchy_coefficient_uses_flow_rate() {
        let s = sample("#1");
        let a = std::f64::consts::PI * 0.02375f64.powi(2);
        assert!((s.bottom_coefficient().unwrap() + 2e-5 * a / 1.01e-4).abs() < 1e-15);
        let mut over = s.clone();
        over.cauchy_coefficient = Some(-1e-3);
        assert_eq!(over.bottom_coefficient().unwrap(), -1e-3);
    }

    #[test]
    fn registry_rejects_unknown_fields_and_versions() {
        let text = REGISTRY_JSON.replace("\"bottom\": \"cauchy\"", "\"bottom\": \"cauchy\", \"colour\": 1");
        assert!(SampleRegistry::from_json(&text).is_err());
        let text = REGISTRY_JSON.replace("\"version\": 1", "\"version\": 7");
        assert!(SampleRegistry::from_json(&text).is_err());
        assert!(SampleRegistry::builtin().get("#9").is_err());
    }

    #[test]
    fn empty_file_is_rejected() {
        for text in ["", "time,location,value\n", "# units: days,m,kg/m3\n"] {
            let e = parse_observations(text, &sample("#2")).unwrap_err();
            assert!(e.to_string().contains("no observations"), "{e}");
        }
    }

    fn breakthrough_csv(n: usize, t_end: f64) -> String {
        let mut s = String::from("# units: days,m,kg/m3\ntime,location,value\n");
        for k in 1..=n {
            s.push_str(&format!("{},breakthrough,{}\n", t_end * k as f64 / n as f64, 0.01 * k as f64));
        }
        s
    }

    #[test]
    fn full_breakthrough_curve_is_accepted() {
        let s = sample("#2");
        let obs = parse_observations(&breakthrough_csv(55, s.t_end), &s).unwrap();
        assert_eq!(obs.len(), 55);
        assert_eq!(obs.sample, "#2");
    }

    #[test]
    fn late_row_is_rejected_with_its_index() {
        let s = sample("#2");
        let text = "time,location,value\n1.0,breakthrough,0.1\n2.0,breakthrough,0.2\n40.5,breakthrough,0.3\n";
        let e = parse_observations(text, &s).unwrap_err().to_string();
        assert!(e.contains("row 3"), "{e}");
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let s = sample("#2");
        let cases = [
            "time,location,value\n1.0,breakthrough,-0.1\n",
            "time,location,value\n1.0,breakthrough,abc\n",
            "time,location,value\n1.0,somewhere,0.1\n",
            "time,location,value\n1.0,breakthrough\n",
            "time,location,value\n1.0,profile@0.5,0.1\n",
            "time,place,value\n1.0,breakthrough,0.1\n",
        ];
        for text in cases {
            let e = parse_observations(text, &s).unwrap_err().to_string();
            assert!(e.contains("row 1") || e.contains("header"), "{text:?}: {e}");
        }
    }

    #[test]
    fn unit_mismatch_is_rejected() {
        let s = sample("#2");
        let text = "# units: hours,cm,mg/l\ntime,location,value\n1.0,breakthrough,0.1\n";
        assert!(parse_observations(text, &s).unwrap_err().to_string().contains("units"));
    }

    #[test]
    fn breakthrough_on_a_closed_core_is_rejected() {
        let s = sample("#2B");
        let text = "time,location,value\n1.0,breakthrough,0.1\n";
        assert!(parse_observations(text, &s).is_err());
        let forged = ObservationFile {
            sample: "#2B".into(),
            rows: vec![ObservationRow {
                time: 1.0,
                location: Location::Breakthrough,
                value: 0.1,
            }],
        };
        let model = FinnModel::new(s.learned_config(0).unwrap()).unwrap();
        assert!(transfer_evaluate(&model, &s, &forged, &reference_solver()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let s = sample("#2B");
        let obs = synthetic_observations(&s, LAB_ISOTHERM, &reference_solver()).unwrap();
        assert_eq!(obs.len(), LAB_CELLS);
        let back = parse_observations(&obs.to_csv().unwrap(), &s).unwrap();
        assert_eq!(back, obs);
    }

    #[test]
    fn closed_bottom_has_zero_flux() {
        let s = sample("#2B");
        let model = FinnModel::new(s.oracle_config(LAB_ISOTHERM).unwrap()).unwrap();
        let times: Vec<f64> = (0..=100).map(|k| s.t_end * k as f64 / 100.0).collect();
        let traj = rollout(&model, &s.initial_state(), &times, &reference_solver()).unwrap();
        let mut top_inflow = 0.0;
        for st in &traj.states[1..] {
            let b = model.boundary_inflow(st).unwrap();
            for species in &b {
                assert_eq!(species[0][1], 0.0);
            }
            top_inflow += b[1][0][0];
        }
        assert!(top_inflow > 0.0);
    }

    #[test]
    fn synthetic_breakthrough_rises() {
        let s = sample("#2");
        let obs = synthetic_observations(&s, LAB_ISOTHERM, &reference_solver()).unwrap();
        assert_eq!(obs.len(), BREAKTHROUGH_POINTS);
        let v = obs.values();
        assert!(v.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        assert!(v[v.len() - 1] > 0.0 && v[v.len() - 1] < s.top_concentration);
    }

    #[test]
    fn oracle_transfer_is_exact() {
        let s = sample("#1");
        let obs = synthetic_observations(&s, LAB_ISOTHERM, &reference_solver()).unwrap();
        let oracle = FinnModel::new(sample("#2").oracle_config(LAB_ISOTHERM).unwrap()).unwrap();
        let r = transfer_evaluate(&oracle, &s, &obs, &reference_solver()).unwrap();
        assert!(r.rmse < 1e-10, "{}", r.rmse);
        assert_eq!(r.points.len(), 55);
    }
}
