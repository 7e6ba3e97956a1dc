//! Reference solutions of the benchmark equations, dataset files and
//! observation noise.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;

use finn_autodiff::{Matrix, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::family::{
    Family, SorptionParams, TrueFunction, ALLEN_CAHN_DIFFUSIVITY, ALLEN_CAHN_RATE, BURGERS_DIFFUSIVITY,
    REACTION_DIFFUSIVITY, REACTION_K, SORPTION,
};
use crate::integrator::{integrate, IntegratorConfig, Scheme};
use crate::model::{from_state, to_state, FinnConfig, FinnModel, KnownConstants, ModuleSpec};
use crate::pde::{AxisBoundaries, Axis, BoundaryCondition, BoundarySet, CauchyCoefficient, Centering, Grid};

pub const DATA_MAGIC: &[u8; 4] = b"FVMD";
pub const DATA_VERSION: u32 = 1;
pub const DATA_FILE: &str = "data.bin";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    InDisTest,
    OutDisTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::InDisTest, Split::OutDisTest];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::InDisTest => "in_dis_test",
            Split::OutDisTest => "out_dis_test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "in_dis_test" | "in_dis" => Ok(Split::InDisTest),
            "out_dis_test" | "out_dis" => Ok(Split::OutDisTest),
            _ => Err(CoreError::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Physical constants of one family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Constants {
    Burgers { diffusivity: f64 },
    Sorption(SorptionParams),
    Reaction { diffusivity: [f64; 2], k: f64 },
    AllenCahn { diffusivity: f64, rate: f64 },
}

impl Constants {
    pub fn registered(family: Family) -> Self {
        match family {
            Family::Burgers1d | Family::Burgers2d => Constants::Burgers {
                diffusivity: BURGERS_DIFFUSIVITY,
            },
            Family::DiffusionSorption => Constants::Sorption(SORPTION),
            Family::DiffusionReaction => Constants::Reaction {
                diffusivity: REACTION_DIFFUSIVITY,
                k: REACTION_K,
            },
            Family::AllenCahn => Constants::AllenCahn {
                diffusivity: ALLEN_CAHN_DIFFUSIVITY,
                rate: ALLEN_CAHN_RATE,
            },
        }
    }
}

/// Uniformly spaced output times, both ends included.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpan {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

impl TimeSpan {
    pub fn new(start: f64, end: f64, count: usize) -> Self {
        Self { start, end, count }
    }

    pub fn times(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.start];
        }
        let dt = (self.end - self.start) / (self.count - 1) as f64;
        (0..self.count)
            .map(|i| if i + 1 == self.count { self.end } else { self.start + i as f64 * dt })
            .collect()
    }
}

/// Initial values of one species.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    /// `-sin(pi (x + y))`.
    NegSinPiSum,
    /// `-sin(pi (x - y))`.
    NegSinPiDiff,
    /// `-sin(pi x)`.
    NegSinPi,
    /// `sin(pi x)`.
    SinPi,
    Zero,
    /// `sin(pi (x + 1) / 2) sin(pi (y + 1) / 2) + offset`.
    SineBump { offset: f64 },
    /// `x^2 cos(pi x)`.
    QuadraticCosine,
    /// `sin(pi x / 2)`.
    SinHalfPi,
    Constant { value: f64 },
    /// Final state of the train split.
    Chained,
}

impl InitialCondition {
    fn at(&self, x: f64, y: f64) -> Result<f64> {
        Ok(match *self {
            InitialCondition::NegSinPiSum => -(PI * (x + y)).sin(),
            InitialCondition::NegSinPiDiff => -(PI * (x - y)).sin(),
            InitialCondition::NegSinPi => -(PI * x).sin(),
            InitialCondition::SinPi => (PI * x).sin(),
            InitialCondition::Zero => 0.0,
            InitialCondition::SineBump { offset } => (PI * (x + 1.0) / 2.0).sin() * (PI * (y + 1.0) / 2.0).sin() + offset,
            InitialCondition::QuadraticCosine => x * x * (PI * x).cos(),
            InitialCondition::SinHalfPi => (PI * x / 2.0).sin(),
            InitialCondition::Constant { value } => value,
            InitialCondition::Chained => {
                return Err(CoreError::Data("chained initial condition needs the train split".into()))
            }
        })
    }

    /// Values at every volume center of `grid`, in flat cell order.
    pub fn evaluate(&self, grid: &Grid) -> Result<Vec<f64>> {
        let xs = grid.axes[0].coordinates();
        match grid.dim() {
            1 => xs.iter().map(|&x| self.at(x, 0.0)).collect(),
            _ => {
                let ys = grid.axes[1].coordinates();
                let mut out = Vec::with_capacity(xs.len() * ys.len());
                for &x in &xs {
                    for &y in &ys {
                        out.push(self.at(x, y)?);
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Everything needed to regenerate one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquationSpec {
    pub family: Family,
    pub split: Split,
    pub constants: Constants,
    pub grid: Grid,
    pub boundaries: BoundarySet,
    pub time: TimeSpan,
    /// One entry per species.
    pub initial: Vec<InitialCondition>,
}

fn line(min: f64, max: f64, count: usize, centering: Centering) -> Grid {
    Grid {
        axes: vec![Axis::new(min, max, count, centering)],
    }
}

fn square(count: usize, centering: Centering) -> Grid {
    Grid {
        axes: vec![Axis::new(-1.0, 1.0, count, centering); 2],
    }
}

impl EquationSpec {
    /// The benchmark configuration of `family` for `split`.
    pub fn registered(family: Family, split: Split) -> Self {
        use InitialCondition as Ic;
        let chained = split == Split::InDisTest;
        let (grid, boundaries, time, initial) = match family {
            Family::Burgers1d => (
                line(-1.0, 1.0, 49, Centering::Node),
                BoundarySet::uniform(1, 1, BoundaryCondition::dirichlet(0.0)),
                if chained { TimeSpan::new(1.0, 2.0, 201) } else { TimeSpan::new(0.0, 1.0, 201) },
                vec![match split {
                    Split::Train => Ic::NegSinPi,
                    Split::InDisTest => Ic::Chained,
                    Split::OutDisTest => Ic::SinPi,
                }],
            ),
            Family::Burgers2d => (
                square(49, Centering::Node),
                BoundarySet::uniform(1, 2, BoundaryCondition::dirichlet(0.0)),
                if chained { TimeSpan::new(1.0, 2.0, 201) } else { TimeSpan::new(0.0, 1.0, 201) },
                vec![match split {
                    Split::Train => Ic::NegSinPiSum,
                    Split::InDisTest => Ic::Chained,
                    Split::OutDisTest => Ic::NegSinPiDiff,
                }],
            ),
            Family::DiffusionSorption => {
                let inflow = if split == Split::OutDisTest { 0.7 } else { 1.0 };
                let sides = AxisBoundaries {
                    min: BoundaryCondition::dirichlet(inflow),
                    max: BoundaryCondition::Cauchy {
                        coefficient: CauchyCoefficient::Diffusivity,
                    },
                };
                let (time, ic) = match split {
                    Split::Train => (TimeSpan::new(0.0, 2500.0, 501), Ic::Zero),
                    _ => (TimeSpan::new(2500.0, 10000.0, 1501), Ic::Chained),
                };
                (
                    line(0.0, 1.0, 26, Centering::Node),
                    BoundarySet {
                        species: vec![vec![sides]; 2],
                    },
                    time,
                    vec![ic; 2],
                )
            }
            Family::DiffusionReaction => (
                square(49, Centering::Cell),
                BoundarySet::uniform(2, 2, BoundaryCondition::no_flow()),
                if chained { TimeSpan::new(10.0, 50.0, 401) } else { TimeSpan::new(0.0, 10.0, 101) },
                vec![
                    match split {
                        Split::Train => Ic::SineBump { offset: 0.0 },
                        Split::InDisTest => Ic::Chained,
                        Split::OutDisTest => Ic::SineBump { offset: -0.5 },
                    };
                    2
                ],
            ),
            Family::AllenCahn => (
                line(-1.0, 1.0, 49, Centering::Cell),
                BoundarySet::uniform(1, 1, BoundaryCondition::Periodic),
                if chained { TimeSpan::new(0.5, 1.0, 201) } else { TimeSpan::new(0.0, 0.5, 201) },
                vec![match split {
                    Split::Train => Ic::QuadraticCosine,
                    Split::InDisTest => Ic::Chained,
                    Split::OutDisTest => Ic::SinHalfPi,
                }],
            ),
        };
        Self {
            family,
            split,
            constants: Constants::registered(family),
            grid,
            boundaries,
            time,
            initial,
        }
    }

    pub fn is_chained(&self) -> bool {
        self.initial.iter().any(|ic| matches!(ic, InitialCondition::Chained))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let species = self.family.species();
        self.boundaries.validate(&self.grid, species)?;
        if self.initial.len() != species {
            return Err(CoreError::Config(format!(
                "{} needs {species} initial condition(s), got {}",
                self.family,
                self.initial.len()
            )));
        }
        if self.time.count == 0 || !(self.time.end > self.time.start || self.time.count == 1) {
            return Err(CoreError::Config("time span must be increasing with at least one output".into()));
        }
        let matches = matches!(
            (self.family, &self.constants),
            (Family::Burgers1d | Family::Burgers2d, Constants::Burgers { .. })
                | (Family::DiffusionSorption, Constants::Sorption(_))
                | (Family::DiffusionReaction, Constants::Reaction { .. })
                | (Family::AllenCahn, Constants::AllenCahn { .. })
        );
        if !matches {
            return Err(CoreError::Config(format!("constants do not belong to {}", self.family)));
        }
        Ok(())
    }

    /// The closed-form model that generates this dataset.
    pub fn oracle_config(&self) -> FinnConfig {
        let mut cfg = FinnConfig::oracle(self.family, self.grid.clone(), self.boundaries.clone());
        match self.constants {
            Constants::Burgers { diffusivity } => cfg.diffusion = vec![ModuleSpec::fixed(diffusivity)],
            Constants::Sorption(p) => {
                cfg.diffusion = vec![ModuleSpec::Analytic {
                    function: TrueFunction::freundlich(&p),
                }];
                cfg.constants = KnownConstants {
                    diffusivity: Some(p.diffusivity),
                    porosity: Some(p.porosity),
                };
            }
            Constants::Reaction { diffusivity, k } => {
                cfg.diffusion = diffusivity.iter().map(|&d| ModuleSpec::fixed(d)).collect();
                cfg.reaction = ModuleSpec::Analytic {
                    function: TrueFunction::FitzHughNagumo { k },
                };
            }
            Constants::AllenCahn { diffusivity, rate } => {
                cfg.diffusion = vec![ModuleSpec::fixed(diffusivity)];
                cfg.reaction = ModuleSpec::Analytic {
                    function: TrueFunction::AllenCahn { rate },
                };
            }
        }
        cfg
    }

    /// Initial state (`cells x species`), using `chained` where the spec
    /// asks for the train split's final state.
    pub fn initial_state(&self, chained: Option<&Matrix>) -> Result<Matrix> {
        let cells = self.grid.cells();
        let species = self.family.species();
        let mut state = Matrix::zeros(cells, species);
        for (s, ic) in self.initial.iter().enumerate() {
            let values = match ic {
                InitialCondition::Chained => {
                    let prev = chained.ok_or_else(|| {
                        CoreError::Data(format!("{} {} starts from the train split's final state", self.family, self.split))
                    })?;
                    if prev.shape() != (cells, species) {
                        return Err(CoreError::Shape(format!(
                            "chained state is {:?}, expected ({cells}, {species})",
                            prev.shape()
                        )));
                    }
                    prev.col(s).into_data()
                }
                other => other.evaluate(&self.grid)?,
            };
            for (c, v) in values.into_iter().enumerate() {
                state.set(c, s, v);
            }
        }
        Ok(state)
    }
}

/// Observation noise applied to a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    #[default]
    None,
    Gaussian { mean: f64, std: f64, seed: u64 },
}

/// Solver settings of the reference generator.
pub fn reference_solver() -> IntegratorConfig {
    IntegratorConfig::new(Scheme::DormandPrince45).with_tolerances(1e-8, 1e-8)
}

/// A trajectory tensor `[N_t, species, cells]` with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: EquationSpec,
    pub solver: IntegratorConfig,
    pub noise: NoiseSpec,
    pub times: Vec<f64>,
    /// Time-major, then species, then flat cell index.
    pub values: Vec<f64>,
}

impl Dataset {
    pub fn species(&self) -> usize {
        self.spec.family.species()
    }

    pub fn cells(&self) -> usize {
        self.spec.grid.cells()
    }

    pub fn frames(&self) -> usize {
        self.times.len()
    }

    pub fn frame_len(&self) -> usize {
        self.species() * self.cells()
    }

    /// `[N_t, species, spatial...]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.frames(), self.species()];
        d.extend(self.spec.grid.shape());
        d
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.values[t * n..(t + 1) * n]
    }

    /// Frame `t` in the model's `cells x species` layout.
    pub fn state(&self, t: usize) -> Matrix {
        to_state(self.frame(t), self.species())
    }

    pub fn final_state(&self) -> Matrix {
        self.state(self.frames() - 1)
    }

    pub fn coordinates(&self) -> Vec<Vec<f64>> {
        self.spec.grid.axes.iter().map(Axis::coordinates).collect()
    }

    /// Serialized `data.bin` contents.
    pub fn data_bytes(&self) -> Vec<u8> {
        let dims = self.dims();
        let mut out = Vec::with_capacity(16 + 8 * dims.len() + 8 * self.values.len());
        out.extend_from_slice(DATA_MAGIC);
        out.extend_from_slice(&DATA_VERSION.to_le_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Git-style object hash of the data file: SHA-256 over
    /// `"blob <len>\0"` followed by the bytes.
    pub fn content_hash(&self) -> String {
        content_hash(&self.data_bytes())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            format_version: DATA_VERSION,
            dims: self.dims(),
            spec: self.spec.clone(),
            solver: self.solver.clone(),
            noise: self.noise,
            times: self.times.clone(),
            coordinates: self.coordinates(),
            content_hash: self.content_hash(),
        }
    }

    /// Writes `data.bin` and `meta.json` into `dir`, creating it.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let bytes = self.data_bytes();
        fs::write(dir.join(DATA_FILE), &bytes)?;
        let mut meta = self.meta();
        meta.content_hash = content_hash(&bytes);
        fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    /// Reads a dataset directory, checking the header and the recorded hash.
    pub fn read(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join(META_FILE))?)?;
        let bytes = fs::read(dir.join(DATA_FILE))?;
        if content_hash(&bytes) != meta.content_hash {
            return Err(CoreError::Data(format!("{}: content hash mismatch", dir.display())));
        }
        let (dims, values) = parse_data(&bytes)?;
        if dims != meta.dims {
            return Err(CoreError::Data(format!(
                "header dims {dims:?} disagree with metadata {:?}",
                meta.dims
            )));
        }
        meta.spec.validate()?;
        let ds = Dataset {
            spec: meta.spec,
            solver: meta.solver,
            noise: meta.noise,
            times: meta.times,
            values,
        };
        if ds.dims() != dims {
            return Err(CoreError::Data("dims disagree with the equation spec".into()));
        }
        Ok(ds)
    }

    /// One row per value: `t, x[, y], species, value`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(path)?));
        let coords = self.coordinates();
        let two_d = coords.len() == 2;
        if two_d {
            w.write_record(["t", "x", "y", "species", "value"])?;
        } else {
            w.write_record(["t", "x", "species", "value"])?;
        }
        let cells = self.cells();
        let ny = if two_d { coords[1].len() } else { 1 };
        for (ti, t) in self.times.iter().enumerate() {
            let frame = self.frame(ti);
            for s in 0..self.species() {
                for c in 0..cells {
                    let v = frame[s * cells + c].to_string();
                    if two_d {
                        let x = coords[0][c / ny].to_string();
                        let y = coords[1][c % ny].to_string();
                        w.write_record([t.to_string(), x, y, s.to_string(), v])?;
                    } else {
                        w.write_record([t.to_string(), coords[0][c].to_string(), s.to_string(), v])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub dims: Vec<usize>,
    pub spec: EquationSpec,
    pub solver: IntegratorConfig,
    pub noise: NoiseSpec,
    pub times: Vec<f64>,
    pub coordinates: Vec<Vec<f64>>,
    pub content_hash: String,
}

pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("sha256:{}", hex::encode(h.finalize()))
}

fn parse_data(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    let bad = |m: &str| CoreError::Data(format!("{DATA_FILE}: {m}"));
    if bytes.len() < 12 || &bytes[..4] != DATA_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != DATA_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let rank = u32_at(8) as usize;
    let header = 12 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|k| u64::from_le_bytes(bytes[12 + 8 * k..20 + 8 * k].try_into().expect("8 bytes")) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + 8 * n {
        return Err(bad(&format!("expected {n} values, file holds {}", (bytes.len() - header) / 8)));
    }
    let values = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((dims, values))
}

/// Integrates the reference model of `spec`. `chained` supplies the train
/// split's final state for chained initial conditions.
pub fn generate(spec: &EquationSpec, solver: &IntegratorConfig, chained: Option<&Matrix>) -> Result<Dataset> {
    spec.validate()?;
    let model = FinnModel::new(spec.oracle_config())?;
    let u0 = spec.initial_state(chained)?;
    let times = spec.time.times();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let traj = integrate(&bound, &mut tape, &u0, &times, solver)?;
    let mut values = Vec::with_capacity(times.len() * u0.len());
    for s in &traj.states {
        values.extend(from_state(s));
    }
    Ok(Dataset {
        spec: spec.clone(),
        solver: solver.clone(),
        noise: NoiseSpec::None,
        times,
        values,
    })
}

/// Generates a registered split, producing the train split first when the
/// split is chained to it.
pub fn generate_split(family: Family, split: Split, solver: &IntegratorConfig) -> Result<Dataset> {
    let spec = EquationSpec::registered(family, split);
    if spec.is_chained() {
        let train = generate(&EquationSpec::registered(family, Split::Train), solver, None)?;
        generate(&spec, solver, Some(&train.final_state()))
    } else {
        generate(&spec, solver, None)
    }
}

/// All three registered splits, in [`Split::ALL`] order.
pub fn generate_family(family: Family, solver: &IntegratorConfig) -> Result<Vec<Dataset>> {
    let train = generate(&EquationSpec::registered(family, Split::Train), solver, None)?;
    let last = train.final_state();
    let mut out = vec![train];
    for split in [Split::InDisTest, Split::OutDisTest] {
        let spec = EquationSpec::registered(family, split);
        out.push(generate(&spec, solver, spec.is_chained().then_some(&last))?);
    }
    Ok(out)
}

/// Adds i.i.d. `N(0, std)` noise to every value.
pub fn add_noise(dataset: &Dataset, std: f64, seed: u64) -> Result<Dataset> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(CoreError::Config(format!("noise level must be non-negative, got {std}")));
    }
    let mut out = dataset.clone();
    if std == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, std).map_err(|e| CoreError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in &mut out.values {
        *v += normal.sample(&mut rng);
    }
    out.noise = NoiseSpec::Gaussian { mean: 0.0, std, seed };
    Ok(out)
}

/// Successive-refinement study of the reference solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub family: Family,
    /// Spatial shape of each level, coarsest first.
    pub shapes: Vec<Vec<usize>>,
    /// Root-mean-square difference between level `k + 1` restricted onto
    /// level `k` and level `k`, over every output frame.
    pub rms_differences: Vec<f64>,
    pub max_differences: Vec<f64>,
    /// Ratios of consecutive RMS differences; about 4 for a second-order
    /// scheme, 2 for a first-order one.
    pub rms_ratios: Vec<f64>,
    pub max_ratios: Vec<f64>,
}

fn restrict(fine: &Dataset, coarse_grid: &Grid) -> Vec<f64> {
    let map = coarse_grid.restriction();
    let fine_cells = fine.cells();
    let coarse_cells = coarse_grid.cells();
    let species = fine.species();
    let mut out = Vec::with_capacity(fine.frames() * species * coarse_cells);
    for t in 0..fine.frames() {
        let frame = fine.frame(t);
        for s in 0..species {
            let block = &frame[s * fine_cells..(s + 1) * fine_cells];
            out.extend(map.iter().map(|terms| terms.iter().map(|&(c, w)| w * block[c]).sum::<f64>()));
        }
    }
    out
}

/// Generates `spec` on `levels` successively refined grids (halving the
/// spacing each time) and compares neighbors after restriction. The spec
/// must not be chained.
pub fn convergence_study(spec: &EquationSpec, solver: &IntegratorConfig, levels: usize) -> Result<ConvergenceReport> {
    if levels < 2 {
        return Err(CoreError::Config("a convergence study needs at least two levels".into()));
    }
    let mut specs = vec![spec.clone()];
    for _ in 1..levels {
        let mut next = specs.last().expect("non-empty").clone();
        next.grid = next.grid.refined();
        specs.push(next);
    }
    let data: Vec<Dataset> = specs.iter().map(|s| generate(s, solver, None)).collect::<Result<_>>()?;
    let mut rms = Vec::new();
    let mut max = Vec::new();
    for k in 0..levels - 1 {
        let restricted = restrict(&data[k + 1], &specs[k].grid);
        let diffs: Vec<f64> = restricted.iter().zip(&data[k].values).map(|(a, b)| a - b).collect();
        rms.push((diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt());
        max.push(diffs.iter().fold(0.0f64, |m, d| m.max(d.abs())));
    }
    let ratios = |v: &[f64]| v.windows(2).map(|w| w[0] / w[1]).collect();
    Ok(ConvergenceReport {
        family: spec.family,
        shapes: specs.iter().map(|s| s.grid.shape()).collect(),
        rms_ratios: ratios(&rms),
        max_ratios: ratios(&max),
        rms_differences: rms,
        max_differences: max,
    })
}

/// A shortened copy of `spec` covering the first `frames` output times.
pub fn truncated(spec: &EquationSpec, frames: usize) -> EquationSpec {
    let times = spec.time.times();
    let frames = frames.clamp(1, times.len());
    let mut out = spec.clone();
    out.time = TimeSpan::new(times[0], times[frames - 1], frames);
    out
}
