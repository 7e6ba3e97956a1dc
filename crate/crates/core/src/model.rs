//! The finite volume neural network: learned stencils, diffusion,
//! advection and reaction modules assembled into per-volume time
//! derivatives.

use std::sync::Arc;

use finn_autodiff::{Activation, Binding, Matrix, Mlp, MlpConfig, OutputTransform, ParamId, ParamStore, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::family::{
    Family, TrueFunction, ALLEN_CAHN_DIFFUSIVITY, ALLEN_CAHN_RATE, BURGERS_DIFFUSIVITY, REACTION_DIFFUSIVITY,
    REACTION_K, SORPTION,
};
use crate::integrator::OdeSystem;
use crate::pde::{cauchy_factor, BoundaryCondition, BoundarySet, CauchyCoefficient, Grid, Side};

fn yes() -> bool {
    true
}

fn unit() -> f64 {
    1.0
}

/// Initial values of the two stencil weights `(self, neighbor)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StencilInit {
    /// Exactly `(-1, +1)`.
    Ideal,
    /// `(-1, +1)` plus independent Gaussian noise.
    Perturbed { std: f64 },
    /// Both weights uniform in `[low, high)`.
    Uniform { low: f64, high: f64 },
    Fixed { self_weight: f64, neighbor_weight: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StencilConfig {
    pub init: StencilInit,
    #[serde(default = "yes")]
    pub trainable: bool,
    /// Separate weights per axis instead of one shared pair.
    #[serde(default)]
    pub per_axis: bool,
}

impl StencilConfig {
    pub fn frozen_ideal() -> Self {
        Self {
            init: StencilInit::Ideal,
            trainable: false,
            per_axis: false,
        }
    }

    pub fn perturbed(std: f64) -> Self {
        Self {
            init: StencilInit::Perturbed { std },
            trainable: true,
            per_axis: false,
        }
    }
}

/// One learnable (or fixed) function of the state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModuleSpec {
    Absent,
    /// A single coefficient independent of the state, stored as
    /// `value / scale` so that optimizer steps are relative to `scale`.
    Scalar {
        init: f64,
        #[serde(default = "unit")]
        scale: f64,
        #[serde(default = "yes")]
        trainable: bool,
    },
    /// Bias-free feedforward network.
    Network {
        widths: Vec<usize>,
        #[serde(default)]
        hidden: Activation,
        #[serde(default)]
        output: OutputTransform,
        #[serde(default = "yes")]
        trainable: bool,
    },
    /// Polynomial of total degree `order` in the inputs, optionally passed
    /// through softplus to keep it positive.
    Polynomial {
        order: usize,
        #[serde(default)]
        positive: bool,
        #[serde(default = "yes")]
        trainable: bool,
    },
    /// A fixed closed-form function.
    Analytic { function: TrueFunction },
}

impl ModuleSpec {
    pub fn network(widths: &[usize]) -> Self {
        ModuleSpec::Network {
            widths: widths.to_vec(),
            hidden: Activation::Tanh,
            output: OutputTransform::Identity,
            trainable: true,
        }
    }

    /// Trainable scalar whose optimizer steps are relative to its initial
    /// magnitude.
    pub fn scalar(init: f64) -> Self {
        ModuleSpec::Scalar {
            init,
            scale: if init == 0.0 { 1.0 } else { init.abs() },
            trainable: true,
        }
    }

    pub fn fixed(value: f64) -> Self {
        ModuleSpec::Scalar {
            init: value,
            scale: 1.0,
            trainable: false,
        }
    }

    pub fn is_absent(&self) -> bool {
        matches!(self, ModuleSpec::Absent)
    }
}

/// Constants assumed known for families whose diffusion module learns a
/// retardation factor instead of a diffusivity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnownConstants {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusivity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub porosity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinnConfig {
    pub family: Family,
    pub grid: Grid,
    pub boundaries: BoundarySet,
    pub stencil: StencilConfig,
    /// One module per diffusing species. For diffusion-sorption the single
    /// module outputs the retardation factor dividing the known diffusivity.
    pub diffusion: Vec<ModuleSpec>,
    pub advection: ModuleSpec,
    pub reaction: ModuleSpec,
    #[serde(default)]
    pub constants: KnownConstants,
    #[serde(default)]
    pub seed: u64,
}

const HIDDEN: [usize; 3] = [10, 20, 10];

fn scalar_net(output: OutputTransform) -> ModuleSpec {
    ModuleSpec::Network {
        widths: vec![1, HIDDEN[0], HIDDEN[1], HIDDEN[2], 1],
        hidden: Activation::Tanh,
        output,
        trainable: true,
    }
}

impl FinnConfig {
    /// Learnable configuration used for the benchmarks.
    pub fn learned(family: Family, grid: Grid, boundaries: BoundarySet) -> Self {
        let (diffusion, advection, reaction, constants) = match family {
            Family::Burgers1d | Family::Burgers2d => (
                vec![ModuleSpec::scalar(0.01)],
                scalar_net(OutputTransform::Identity),
                ModuleSpec::Absent,
                KnownConstants::default(),
            ),
            Family::DiffusionSorption => (
                vec![scalar_net(OutputTransform::Softplus)],
                ModuleSpec::Absent,
                ModuleSpec::Absent,
                KnownConstants {
                    diffusivity: Some(SORPTION.diffusivity),
                    porosity: Some(SORPTION.porosity),
                },
            ),
            Family::DiffusionReaction => (
                vec![ModuleSpec::scalar(1e-2), ModuleSpec::scalar(1e-2)],
                ModuleSpec::Absent,
                ModuleSpec::network(&[2, 20, 20, 20, 2]),
                KnownConstants::default(),
            ),
            Family::AllenCahn => (
                vec![ModuleSpec::scalar(1e-3)],
                ModuleSpec::Absent,
                scalar_net(OutputTransform::Identity),
                KnownConstants::default(),
            ),
        };
        // A stencil whose weights do not cancel adds a linear source term.
        // Outside the advective families that term trades freely against
        // the reaction or retardation and dominates long rollouts.
        let stencil = if family.is_burgers() {
            StencilConfig::perturbed(0.01)
        } else {
            StencilConfig::frozen_ideal()
        };
        Self {
            family,
            grid,
            boundaries,
            stencil,
            diffusion,
            advection,
            reaction,
            constants,
            seed: 0,
        }
    }

    /// The closed-form model used by the reference solver.
    pub fn oracle(family: Family, grid: Grid, boundaries: BoundarySet) -> Self {
        let mut cfg = Self::learned(family, grid, boundaries);
        cfg.stencil = StencilConfig::frozen_ideal();
        match family {
            Family::Burgers1d | Family::Burgers2d => {
                cfg.diffusion = vec![ModuleSpec::fixed(BURGERS_DIFFUSIVITY)];
                cfg.advection = ModuleSpec::Analytic {
                    function: TrueFunction::Identity,
                };
            }
            Family::DiffusionSorption => {
                cfg.diffusion = vec![ModuleSpec::Analytic {
                    function: TrueFunction::freundlich(&SORPTION),
                }];
            }
            Family::DiffusionReaction => {
                cfg.diffusion = REACTION_DIFFUSIVITY.iter().map(|&d| ModuleSpec::fixed(d)).collect();
                cfg.reaction = ModuleSpec::Analytic {
                    function: TrueFunction::FitzHughNagumo { k: REACTION_K },
                };
            }
            Family::AllenCahn => {
                cfg.diffusion = vec![ModuleSpec::fixed(ALLEN_CAHN_DIFFUSIVITY)];
                cfg.reaction = ModuleSpec::Analytic {
                    function: TrueFunction::AllenCahn { rate: ALLEN_CAHN_RATE },
                };
            }
        }
        cfg
    }

    /// Diffusivity used for Cauchy conditions tied to the diffusion
    /// coefficient.
    fn boundary_diffusivity(&self) -> f64 {
        self.constants.diffusivity.unwrap_or(match self.family {
            Family::Burgers1d | Family::Burgers2d => BURGERS_DIFFUSIVITY,
            Family::DiffusionSorption => SORPTION.diffusivity,
            Family::DiffusionReaction => REACTION_DIFFUSIVITY[0],
            Family::AllenCahn => ALLEN_CAHN_DIFFUSIVITY,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let species = self.family.species();
        if self.grid.dim() != self.family.dim() {
            return Err(CoreError::Config(format!(
                "{} needs a {}-dimensional grid",
                self.family,
                self.family.dim()
            )));
        }
        self.boundaries.validate(&self.grid, species)?;
        let diffusing = match self.family {
            Family::DiffusionReaction => 2,
            _ => 1,
        };
        if self.diffusion.len() != diffusing {
            return Err(CoreError::Config(format!(
                "{} needs {diffusing} diffusion module(s), got {}",
                self.family,
                self.diffusion.len()
            )));
        }
        if self.diffusion.iter().any(ModuleSpec::is_absent) {
            return Err(CoreError::Config("diffusion modules cannot be absent".into()));
        }
        if self.family.is_burgers() == self.advection.is_absent() {
            return Err(CoreError::Config(format!(
                "advection module must be {} for {}",
                if self.family.is_burgers() { "present" } else { "absent" },
                self.family
            )));
        }
        let reacts = matches!(self.family, Family::DiffusionReaction | Family::AllenCahn);
        if reacts == self.reaction.is_absent() {
            return Err(CoreError::Config(format!(
                "reaction module must be {} for {}",
                if reacts { "present" } else { "absent" },
                self.family
            )));
        }
        if self.family == Family::DiffusionSorption {
            let d = self.constants.diffusivity.ok_or_else(|| CoreError::Config("missing known diffusivity".into()))?;
            let p = self.constants.porosity.ok_or_else(|| CoreError::Config("missing known porosity".into()))?;
            if !(d > 0.0 && p > 0.0 && p <= 1.0) {
                return Err(CoreError::Config("known constants out of range".into()));
            }
        }
        if let StencilInit::Perturbed { std } = self.stencil.init {
            if !(std >= 0.0 && std.is_finite()) {
                return Err(CoreError::Config("stencil noise must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Which learned function to tabulate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnedFunction {
    AdvectiveVelocity,
    /// Diffusion module of species 0: a diffusivity, or the retardation
    /// factor for diffusion-sorption.
    Diffusion,
    Retardation,
    Reaction,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StencilWeights {
    pub axis: usize,
    pub self_weight: f64,
    pub neighbor_weight: f64,
}

#[derive(Clone, Debug)]
struct Polynomial {
    coeffs: ParamId,
    exponents: Vec<Vec<i32>>,
    positive: bool,
}

#[derive(Clone, Debug)]
enum Module {
    Absent,
    Scalar(ParamId, f64),
    Network(Mlp),
    Polynomial(Polynomial),
    Analytic(TrueFunction),
}

/// Monomial exponents of total degree at most `order` in `inputs` variables.
fn monomials(inputs: usize, order: usize) -> Vec<Vec<i32>> {
    let mut out = Vec::new();
    for degree in 0..=order {
        let mut stack = vec![(Vec::new(), degree)];
        while let Some((prefix, left)) = stack.pop() {
            if prefix.len() == inputs - 1 {
                let mut e: Vec<i32> = prefix;
                e.push(left as i32);
                out.push(e);
                continue;
            }
            for k in (0..=left).rev() {
                let mut p = prefix.clone();
                p.push(k as i32);
                stack.push((p, left - k));
            }
        }
    }
    out
}

impl Module {
    fn build(
        spec: &ModuleSpec,
        name: &str,
        inputs: usize,
        outputs: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match spec {
            ModuleSpec::Absent => Module::Absent,
            ModuleSpec::Scalar { init, scale, trainable } => {
                if outputs != 1 {
                    return Err(CoreError::Config(format!("{name}: scalar module cannot produce {outputs} outputs")));
                }
                if !(*scale > 0.0 && scale.is_finite()) {
                    return Err(CoreError::Config(format!("{name}: scale must be positive")));
                }
                Module::Scalar(store.insert(name, &[], vec![init / scale], *trainable)?, *scale)
            }
            ModuleSpec::Network {
                widths,
                hidden,
                output,
                trainable,
            } => {
                let cfg = MlpConfig {
                    widths: widths.clone(),
                    hidden: *hidden,
                    output: *output,
                };
                cfg.validate()?;
                if widths[0] != inputs || widths[widths.len() - 1] != outputs {
                    return Err(CoreError::Config(format!(
                        "{name}: network must map {inputs} input(s) to {outputs} output(s), widths are {widths:?}"
                    )));
                }
                let mlp = Mlp::register(store, name, cfg, rng)?;
                for &id in mlp.layers() {
                    store.set_trainable(id, *trainable);
                }
                Module::Network(mlp)
            }
            ModuleSpec::Polynomial {
                order,
                positive,
                trainable,
            } => {
                let exponents = monomials(inputs, *order);
                let n = exponents.len() * outputs;
                let coeffs = store.insert(
                    &format!("{name}.coefficients"),
                    &[exponents.len(), outputs],
                    vec![0.0; n],
                    *trainable,
                )?;
                Module::Polynomial(Polynomial {
                    coeffs,
                    exponents,
                    positive: *positive,
                })
            }
            ModuleSpec::Analytic { function } => {
                if function.input_width() != inputs || function.output_width() != outputs {
                    return Err(CoreError::Config(format!(
                        "{name}: {function:?} does not map {inputs} input(s) to {outputs} output(s)"
                    )));
                }
                Module::Analytic(*function)
            }
        })
    }

    fn is_absent(&self) -> bool {
        matches!(self, Module::Absent)
    }

    /// Applies the module row-wise. Scalars yield a 1x1 value.
    fn apply(&self, tape: &mut Tape, binding: &Binding, x: Var, what: &'static str) -> Result<Var> {
        Ok(match self {
            Module::Absent => return Err(CoreError::MissingModule(what)),
            Module::Scalar(id, scale) => {
                if *scale == 1.0 {
                    binding.var(*id)
                } else {
                    tape.scale(binding.var(*id), *scale)?
                }
            }
            Module::Network(mlp) => mlp.forward(tape, binding, x)?,
            Module::Polynomial(p) => {
                let rows = tape.value(x).rows();
                let cols = tape.value(x).cols();
                let inputs: Vec<Var> = if cols == 1 {
                    vec![x]
                } else {
                    (0..cols).map(|c| tape.column(x, c)).collect::<std::result::Result<_, _>>()?
                };
                let mut features = Vec::with_capacity(p.exponents.len());
                for e in &p.exponents {
                    let mut term: Option<Var> = None;
                    for (j, &k) in e.iter().enumerate() {
                        if k == 0 {
                            continue;
                        }
                        let pw = if k == 1 { inputs[j] } else { tape.powi(inputs[j], k)? };
                        term = Some(match term {
                            None => pw,
                            Some(t) => tape.mul(t, pw)?,
                        });
                    }
                    features.push(match term {
                        Some(t) => t,
                        None => tape.leaf(Matrix::filled(rows, 1, 1.0)),
                    });
                }
                let f = tape.hstack(&features)?;
                let y = tape.matmul(f, binding.var(p.coeffs))?;
                if p.positive {
                    tape.softplus(y)?
                } else {
                    y
                }
            }
            Module::Analytic(f) => f.record(tape, x)?,
        })
    }
}

/// Virtual neighbor values beyond one face.
#[derive(Clone, Debug)]
enum GhostPlan {
    /// Neighbors all lie inside the grid (interior, periodic or flux override).
    None,
    /// Fixed values, one per boundary volume.
    Constant(Vec<f64>),
    /// `factor * u` of the boundary volumes.
    Scaled { cells: Arc<[usize]>, factor: f64 },
}

#[derive(Clone, Debug)]
struct SidePlan {
    /// Row of `[u; ghosts]` holding each volume's neighbor on this side.
    neighbor: Arc<[usize]>,
    ghost: GhostPlan,
    /// `(mask, value)`: multiply face flux by mask, then add value.
    flux_override: Option<(Vec<f64>, Vec<f64>)>,
}

fn side_plan(grid: &Grid, axis: usize, side: Side, bc: &BoundaryCondition, diffusivity: f64) -> Result<SidePlan> {
    let n = grid.cells();
    let stride = grid.stride(axis);
    let count = grid.axes[axis].count;
    let edge = match side {
        Side::Min => 0,
        Side::Max => count - 1,
    };
    let boundary: Vec<usize> = (0..n).filter(|&c| grid.axis_index(c, axis) == edge).collect();
    let mut neighbor = Vec::with_capacity(n);
    let mut ghost_row = 0;
    for c in 0..n {
        let i = grid.axis_index(c, axis);
        let inner = match side {
            Side::Min => (i > 0).then(|| c - stride),
            Side::Max => (i + 1 < count).then(|| c + stride),
        };
        neighbor.push(match inner {
            Some(j) => j,
            None => match bc {
                BoundaryCondition::Periodic => match side {
                    Side::Min => c + (count - 1) * stride,
                    Side::Max => c - (count - 1) * stride,
                },
                BoundaryCondition::Neumann { .. } => c,
                BoundaryCondition::Dirichlet { .. } | BoundaryCondition::Cauchy { .. } => {
                    ghost_row += 1;
                    n + ghost_row - 1
                }
            },
        });
    }
    let mut flux_override = None;
    let ghost = match *bc {
        BoundaryCondition::Dirichlet { value } => GhostPlan::Constant(vec![value; boundary.len()]),
        BoundaryCondition::Cauchy { coefficient } => {
            let c = match coefficient {
                CauchyCoefficient::Diffusivity => diffusivity,
                CauchyCoefficient::Value(v) => v,
            };
            GhostPlan::Scaled {
                cells: boundary.into(),
                factor: cauchy_factor(c, grid.spacing(axis))?,
            }
        }
        BoundaryCondition::Neumann { flux } => {
            let mut mask = vec![1.0; n];
            let mut value = vec![0.0; n];
            for &c in &boundary {
                mask[c] = 0.0;
                value[c] = flux;
            }
            flux_override = Some((mask, value));
            GhostPlan::None
        }
        BoundaryCondition::Periodic => GhostPlan::None,
    };
    Ok(SidePlan {
        neighbor: neighbor.into(),
        ghost,
        flux_override,
    })
}

/// A FINN instance: configuration, parameters and the precomputed
/// neighbor plan of its domain.
#[derive(Clone, Debug)]
pub struct FinnModel {
    config: FinnConfig,
    params: ParamStore,
    stencils: Vec<ParamId>,
    diffusion: Vec<Module>,
    advection: Module,
    reaction: Module,
    plan: Vec<Vec<[SidePlan; 2]>>,
}

fn stencil_init(init: StencilInit, rng: &mut ChaCha8Rng) -> Result<[f64; 2]> {
    Ok(match init {
        StencilInit::Ideal => [-1.0, 1.0],
        StencilInit::Perturbed { std } => {
            let n = Normal::new(0.0, std).map_err(|e| CoreError::Config(e.to_string()))?;
            [-1.0 + n.sample(rng), 1.0 + n.sample(rng)]
        }
        StencilInit::Uniform { low, high } => {
            if !(low < high) {
                return Err(CoreError::Config("stencil init range is empty".into()));
            }
            [rng.random_range(low..high), rng.random_range(low..high)]
        }
        StencilInit::Fixed {
            self_weight,
            neighbor_weight,
        } => [self_weight, neighbor_weight],
    })
}

fn stencil_names(cfg: &FinnConfig) -> Vec<String> {
    if cfg.stencil.per_axis && cfg.grid.dim() > 1 {
        (0..cfg.grid.dim()).map(|a| format!("stencil.{a}")).collect()
    } else {
        vec!["stencil".to_string()]
    }
}

impl FinnModel {
    /// Builds a model with freshly initialised parameters drawn from the
    /// configured seed.
    pub fn new(config: FinnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut stencils = Vec::new();
        for name in stencil_names(&config) {
            let w = stencil_init(config.stencil.init, &mut rng)?;
            stencils.push(params.insert(&name, &[2], w.to_vec(), config.stencil.trainable)?);
        }
        let species = config.family.species();
        let mut diffusion = Vec::new();
        for (s, spec) in config.diffusion.iter().enumerate() {
            diffusion.push(Module::build(spec, &format!("diffusion.{s}"), 1, 1, &mut params, &mut rng)?);
        }
        let advection = Module::build(&config.advection, "advection", 1, 1, &mut params, &mut rng)?;
        let reaction = Module::build(&config.reaction, "reaction", species, species, &mut params, &mut rng)?;
        let plan = Self::plan(&config)?;
        Ok(Self {
            config,
            params,
            stencils,
            diffusion,
            advection,
            reaction,
            plan,
        })
    }

    /// Builds a model around an existing parameter store, e.g. one loaded
    /// from a checkpoint.
    pub fn with_params(config: FinnConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        let entries: Vec<_> = params
            .entries()
            .map(|(n, e)| finn_autodiff::CheckpointEntry {
                name: n.to_string(),
                shape: e.shape.clone(),
                values: e.value.data().to_vec(),
            })
            .collect();
        model.params.assign_checkpoint(&entries)?;
        Ok(model)
    }

    /// Serializes the parameters in checkpoint format.
    pub fn save_checkpoint(&self, w: impl std::io::Write) -> Result<()> {
        Ok(finn_autodiff::write_checkpoint(&self.params, w)?)
    }

    /// Builds `config` and overwrites its parameters from a checkpoint.
    pub fn load_checkpoint(config: FinnConfig, r: impl std::io::Read) -> Result<Self> {
        let entries = finn_autodiff::read_checkpoint(r)?;
        let mut model = Self::new(config)?;
        model.params.assign_checkpoint(&entries)?;
        Ok(model)
    }

    fn plan(config: &FinnConfig) -> Result<Vec<Vec<[SidePlan; 2]>>> {
        let d = config.boundary_diffusivity();
        (0..config.family.species())
            .map(|s| {
                (0..config.grid.dim())
                    .map(|a| {
                        let ab = config.boundaries.get(s, a);
                        Ok([
                            side_plan(&config.grid, a, Side::Min, &ab.min, d)?,
                            side_plan(&config.grid, a, Side::Max, &ab.max, d)?,
                        ])
                    })
                    .collect()
            })
            .collect()
    }

    /// The same learned modules on a different grid or boundary set.
    pub fn with_domain(&self, grid: Grid, boundaries: BoundarySet) -> Result<Self> {
        let mut config = self.config.clone();
        config.grid = grid;
        config.boundaries = boundaries;
        config.validate()?;
        let plan = Self::plan(&config)?;
        Ok(Self {
            config,
            plan,
            ..self.clone()
        })
    }

    /// Replaces the known constants (diffusivity, porosity).
    pub fn with_constants(&self, constants: KnownConstants) -> Result<Self> {
        let mut config = self.config.clone();
        config.constants = constants;
        config.validate()?;
        let plan = Self::plan(&config)?;
        Ok(Self {
            config,
            plan,
            ..self.clone()
        })
    }

    pub fn config(&self) -> &FinnConfig {
        &self.config
    }

    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn grid(&self) -> &Grid {
        &self.config.grid
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.total_count()
    }

    /// Records parameters and boundary constants on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel<'_>> {
        let binding = self.params.bind(tape);
        let mut stencil = Vec::new();
        for &id in &self.stencils {
            let w = binding.var(id);
            stencil.push((tape.column(w, 0)?, tape.column(w, 1)?));
        }
        if stencil.len() == 1 {
            stencil = vec![stencil[0]; self.config.grid.dim()];
        }
        let porosity = self.config.constants.porosity.unwrap_or(1.0);
        let sides = self
            .plan
            .iter()
            .map(|axes| {
                axes.iter()
                    .map(|pair| {
                        let bind = |p: &SidePlan, tape: &mut Tape| BoundSide {
                            ghost: match &p.ghost {
                                GhostPlan::Constant(v) => Some(tape.leaf(Matrix::column(v.clone()))),
                                _ => None,
                            },
                            flux_override: p.flux_override.as_ref().map(|(m, v)| {
                                (
                                    tape.leaf(Matrix::column(m.clone())),
                                    tape.leaf(Matrix::column(v.clone())),
                                    tape.leaf(Matrix::column(v.iter().map(|x| porosity * x).collect())),
                                )
                            }),
                        };
                        [bind(&pair[0], tape), bind(&pair[1], tape)]
                    })
                    .collect()
            })
            .collect();
        let known_diffusivity = self.config.constants.diffusivity.map(|d| tape.scalar(d));
        Ok(BoundModel {
            model: self,
            binding,
            stencil,
            sides,
            known_diffusivity,
        })
    }

    /// Time derivative of a state (`cells x species`) without keeping a tape.
    pub fn rhs_values(&self, state: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let u = tape.leaf(state.clone());
        let r = bound.rhs(&mut tape, 0.0, u)?;
        Ok(tape.value(r).clone())
    }

    fn module(&self, which: LearnedFunction) -> Result<(&Module, &'static str)> {
        Ok(match which {
            LearnedFunction::AdvectiveVelocity => (&self.advection, "advection"),
            LearnedFunction::Diffusion => (&self.diffusion[0], "diffusion"),
            LearnedFunction::Retardation => {
                if self.config.family != Family::DiffusionSorption {
                    return Err(CoreError::MissingModule("retardation"));
                }
                (&self.diffusion[0], "retardation")
            }
            LearnedFunction::Reaction => (&self.reaction, "reaction"),
        })
    }

    /// Input width of the module behind `which`.
    pub fn function_inputs(&self, which: LearnedFunction) -> usize {
        match which {
            LearnedFunction::Reaction => self.config.family.species(),
            _ => 1,
        }
    }

    /// Tabulates a learned function on query rows (`n x inputs`).
    pub fn extract(&self, which: LearnedFunction, points: &Matrix) -> Result<Matrix> {
        let (module, what) = self.module(which)?;
        match module {
            Module::Absent => return Err(CoreError::MissingModule(what)),
            Module::Scalar(..) => {
                return Err(CoreError::Config(format!(
                    "the {what} module is a single scalar; read it from the parameters"
                )))
            }
            _ => {}
        }
        let inputs = self.function_inputs(which);
        if points.cols() != inputs {
            return Err(CoreError::Shape(format!("{what} takes {inputs} input column(s)")));
        }
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape);
        let x = tape.leaf(points.clone());
        let y = module.apply(&mut tape, &binding, x, what)?;
        Ok(tape.value(y).clone())
    }

    /// Effective values of scalar diffusion modules, one entry per diffusing
    /// species (`None` where the module is not a scalar).
    pub fn scalar_diffusivities(&self) -> Vec<Option<f64>> {
        self.diffusion
            .iter()
            .map(|m| match m {
                Module::Scalar(id, scale) => Some(self.params.value(*id).data()[0] * scale),
                _ => None,
            })
            .collect()
    }

    pub fn stencil_report(&self) -> Vec<StencilWeights> {
        (0..self.config.grid.dim())
            .map(|axis| {
                let id = self.stencils[axis.min(self.stencils.len() - 1)];
                let w = self.params.value(id).data();
                StencilWeights {
                    axis,
                    self_weight: w[0],
                    neighbor_weight: w[1],
                }
            })
            .collect()
    }

    pub fn has_advection(&self) -> bool {
        !self.advection.is_absent()
    }
}

struct BoundSide {
    ghost: Option<Var>,
    /// Mask, override value, and override value for the total species.
    flux_override: Option<(Var, Var, Var)>,
}

/// A model whose parameters are recorded on a tape; usable as the right-hand
/// side of the ODE system.
pub struct BoundModel<'m> {
    model: &'m FinnModel,
    binding: Binding,
    stencil: Vec<(Var, Var)>,
    sides: Vec<Vec<[BoundSide; 2]>>,
    known_diffusivity: Option<Var>,
}

impl BoundModel<'_> {
    pub fn binding(&self) -> &Binding {
        &self.binding
    }

    pub fn model(&self) -> &FinnModel {
        self.model
    }

    fn neighbors(&self, tape: &mut Tape, s: usize, axis: usize, k: usize, u: Var) -> Result<Var> {
        let plan = &self.model.plan[s][axis][k];
        let ext = match &plan.ghost {
            GhostPlan::None => u,
            GhostPlan::Constant(_) => {
                let g = self.sides[s][axis][k].ghost.expect("bound ghost values");
                tape.vstack(&[u, g])?
            }
            GhostPlan::Scaled { cells, factor } => {
                let g = tape.gather(u, cells.clone())?;
                let g = tape.scale(g, *factor)?;
                tape.vstack(&[u, g])?
            }
        };
        Ok(tape.gather(ext, plan.neighbor.clone())?)
    }

    /// Per-face flux terms for one species, ordered `(axis, side)`, and for
    /// diffusion-sorption the matching total-concentration terms.
    fn face_terms(&self, tape: &mut Tape, s: usize, u: Var, gates: Option<(Var, Var)>) -> Result<(Vec<Var>, Vec<Var>)> {
        let model = self.model;
        let grid = &model.config.grid;
        let sorption = model.config.family == Family::DiffusionSorption;
        let d = model.diffusion[s].apply(tape, &self.binding, u, "diffusion")?;
        let d = match (sorption, self.known_diffusivity) {
            (true, Some(known)) => tape.div(known, d)?,
            _ => d,
        };
        let mut faces = Vec::with_capacity(2 * grid.dim());
        let mut totals = Vec::new();
        for axis in 0..grid.dim() {
            let dx = grid.spacing(axis);
            let (ws, wn) = self.stencil[axis];
            let d_scaled = tape.scale(d, 1.0 / (dx * dx))?;
            for k in 0..2 {
                let nb = self.neighbors(tape, s, axis, k, u)?;
                let a = tape.mul(u, ws)?;
                let b = tape.mul(nb, wn)?;
                let phi = tape.add(a, b)?;
                let coef = match gates {
                    Some((right_moving, left_moving)) => {
                        // Inflow from the left face when v > 0, from the right when v < 0.
                        let g = if k == 0 { right_moving } else { left_moving };
                        let g = tape.scale(g, 1.0 / dx)?;
                        tape.add(d_scaled, g)?
                    }
                    None => d_scaled,
                };
                let mut f = tape.mul(phi, coef)?;
                let over = self.sides[s][axis][k].flux_override;
                if let Some((mask, value, _)) = over {
                    f = tape.mul(f, mask)?;
                    f = tape.add(f, value)?;
                }
                faces.push(f);
                if sorption {
                    let c = model.config.constants;
                    let scale = c.diffusivity.unwrap_or(0.0) * c.porosity.unwrap_or(1.0) / (dx * dx);
                    let mut t = tape.scale(phi, scale)?;
                    if let Some((mask, _, total_value)) = over {
                        t = tape.mul(t, mask)?;
                        t = tape.add(t, total_value)?;
                    }
                    totals.push(t);
                }
            }
        }
        Ok((faces, totals))
    }

    /// Per-volume flux sum for one species and, for diffusion-sorption, the
    /// matching total-concentration rate.
    fn flux(&self, tape: &mut Tape, s: usize, u: Var, gates: Option<(Var, Var)>) -> Result<(Var, Option<Var>)> {
        let (faces, totals) = self.face_terms(tape, s, u, gates)?;
        let sum = |tape: &mut Tape, terms: &[Var]| -> Result<Var> {
            let w: Vec<(Var, f64)> = terms.iter().map(|&v| (v, 1.0)).collect();
            Ok(tape.lin_comb(&w)?)
        };
        let flux = sum(tape, &faces)?;
        let total = if totals.is_empty() { None } else { Some(sum(tape, &totals)?) };
        Ok((flux, total))
    }

    fn gates(&self, tape: &mut Tape, u0: Var) -> Result<Option<(Var, Var)>> {
        if self.model.advection.is_absent() {
            return Ok(None);
        }
        let v = self.model.advection.apply(tape, &self.binding, u0, "advection")?;
        let neg = tape.neg(v)?;
        Ok(Some((tape.relu(v)?, tape.relu(neg)?)))
    }

    fn columns(&self, tape: &mut Tape, u: Var) -> Result<Vec<Var>> {
        let species = self.model.config.family.species();
        Ok(if species == 1 {
            vec![u]
        } else {
            (0..species).map(|s| tape.column(u, s)).collect::<std::result::Result<_, _>>()?
        })
    }
}

/// Rates of change of the total amount of each species (sum of `u * dV`),
/// split by origin.
#[derive(Clone, Debug, PartialEq)]
pub struct BalanceRates {
    /// Net inflow through the non-periodic domain boundary.
    pub boundary: Vec<f64>,
    /// Volume-integrated reaction term.
    pub source: Vec<f64>,
}

impl FinnModel {
    /// Species whose total amount obeys a balance law. For
    /// diffusion-sorption only the total concentration does; the dissolved
    /// rate is divided by a cell-dependent retardation factor.
    pub fn conserved_species(&self) -> Vec<usize> {
        match self.config.family {
            Family::DiffusionSorption => vec![1],
            f => (0..f.species()).collect(),
        }
    }

    /// Net inflow through each boundary face of a state (`cells x
    /// species`), indexed `[species][axis][side]`. Periodic sides report zero.
    pub fn boundary_inflow(&self, state: &Matrix) -> Result<Vec<Vec<[f64; 2]>>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let u = tape.leaf(state.clone());
        self.boundary_inflow_on(&mut tape, &bound, u)
    }

    fn boundary_inflow_on(&self, tape: &mut Tape, bound: &BoundModel<'_>, u: Var) -> Result<Vec<Vec<[f64; 2]>>> {
        let grid = &self.config.grid;
        let dv = grid.cell_volume();
        let cols = bound.columns(tape, u)?;
        let gates = bound.gates(tape, cols[0])?;
        let mut per_species: Vec<Vec<Var>> = Vec::new();
        for s in 0..self.diffusion.len() {
            let (faces, totals) = bound.face_terms(tape, s, cols[s], if s == 0 { gates } else { None })?;
            per_species.push(faces);
            if !totals.is_empty() {
                per_species.push(totals);
            }
        }
        let mut out = Vec::with_capacity(per_species.len());
        for (s, faces) in per_species.iter().enumerate() {
            let mut axes = Vec::with_capacity(grid.dim());
            for axis in 0..grid.dim() {
                let count = grid.axes[axis].count;
                let ab = self.config.boundaries.get(s.min(self.config.boundaries.species.len() - 1), axis);
                let mut pair = [0.0; 2];
                for (k, side) in [Side::Min, Side::Max].into_iter().enumerate() {
                    if matches!(ab.side(side), BoundaryCondition::Periodic) {
                        continue;
                    }
                    let edge = if k == 0 { 0 } else { count - 1 };
                    let rates = tape.value(faces[2 * axis + k]);
                    pair[k] = (0..grid.cells())
                        .filter(|&c| grid.axis_index(c, axis) == edge)
                        .map(|c| rates.data()[c])
                        .sum::<f64>()
                        * dv;
                }
                axes.push(pair);
            }
            out.push(axes);
        }
        Ok(out)
    }

    /// Boundary inflow and source rates of a state (`cells x species`).
    pub fn balance_rates(&self, state: &Matrix) -> Result<BalanceRates> {
        let species = self.config.family.species();
        let dv = self.config.grid.cell_volume();
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let u = tape.leaf(state.clone());
        let boundary = self
            .boundary_inflow_on(&mut tape, &bound, u)?
            .iter()
            .map(|axes| axes.iter().map(|p| p[0] + p[1]).sum())
            .collect();
        let mut source = vec![0.0; species];
        if !self.reaction.is_absent() {
            let q = self.reaction.apply(&mut tape, bound.binding(), u, "reaction")?;
            let q = tape.value(q);
            for c in 0..q.rows() {
                for (s, acc) in source.iter_mut().enumerate() {
                    *acc += q.data()[c * species + s] * dv;
                }
            }
        }
        Ok(BalanceRates { boundary, source })
    }
}

impl OdeSystem for BoundModel<'_> {
    fn rhs(&self, tape: &mut Tape, _t: f64, u: Var) -> Result<Var> {
        let model = self.model;
        let species = model.config.family.species();
        let cols = self.columns(tape, u)?;
        let gates = self.gates(tape, cols[0])?;
        let mut rates = Vec::with_capacity(species);
        for s in 0..model.diffusion.len() {
            let (flux, total) = self.flux(tape, s, cols[s], if s == 0 { gates } else { None })?;
            rates.push(flux);
            if let Some(t) = total {
                rates.push(t);
            }
        }
        if !model.reaction.is_absent() {
            let q = model.reaction.apply(tape, &self.binding, u, "reaction")?;
            if species == 1 {
                rates[0] = tape.add(rates[0], q)?;
            } else {
                for (s, r) in rates.iter_mut().enumerate() {
                    let qs = tape.column(q, s)?;
                    *r = tape.add(*r, qs)?;
                }
            }
        }
        Ok(if species == 1 { rates[0] } else { tape.hstack(&rates)? })
    }
}

/// Advective gate of one face: `ReLU(v)` on the left face, `-ReLU(-v)` on
/// the right face.
pub fn upwind_gate(velocity: f64, side: Side) -> f64 {
    match side {
        Side::Min => velocity.max(0.0),
        Side::Max => -(-velocity).max(0.0),
    }
}

/// Learned module outputs for one volume, for scalar flux evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LocalModules {
    /// `(w_self, w_neighbor)`.
    pub stencil: (f64, f64),
    pub diffusivity: f64,
    /// Advective velocity, if the family advects.
    pub velocity: Option<f64>,
}

/// Net flux into one volume from its two faces along one axis.
///
/// Each face contributes `phi_N(u_i, u_nb) * (D / dx^2 + gate / dx)`. The
/// right face uses the negated gate because its outward normal points the
/// other way; with `dx = 1` and `(w_self, w_nb) = (-1, 1)` the diffusive part
/// is `D * (u_l - 2 u_i + u_r)`.
pub fn flux_kernel(u_left: f64, u_i: f64, u_right: f64, m: &LocalModules, spacing: f64) -> f64 {
    let (ws, wn) = m.stencil;
    let d = m.diffusivity / (spacing * spacing);
    let v = m.velocity.unwrap_or(0.0);
    let left = (ws * u_i + wn * u_left) * (d + upwind_gate(v, Side::Min) / spacing);
    let right = (ws * u_i + wn * u_right) * (d - upwind_gate(v, Side::Max) / spacing);
    left + right
}

/// Converts a species-major frame into the `cells x species` state layout.
pub fn to_state(values: &[f64], species: usize) -> Matrix {
    let cells = values.len() / species;
    let mut data = vec![0.0; values.len()];
    for s in 0..species {
        for c in 0..cells {
            data[c * species + s] = values[s * cells + c];
        }
    }
    Matrix::new(cells, species, data)
}

/// Inverse of [`to_state`].
pub fn from_state(state: &Matrix) -> Vec<f64> {
    let (cells, species) = state.shape();
    let mut out = vec![0.0; cells * species];
    for c in 0..cells {
        for s in 0..species {
            out[s * cells + c] = state.get(c, s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::{AxisBoundaries, Axis, Centering};
    use proptest::prelude::*;

    fn line(n: usize, centering: Centering) -> Grid {
        Grid::line(-1.0, 1.0, n, centering).unwrap()
    }

    fn modules(d: f64, v: Option<f64>) -> LocalModules {
        LocalModules {
            stencil: (-1.0, 1.0),
            diffusivity: d,
            velocity: v,
        }
    }

    #[test]
    fn upwind_gate_examples() {
        assert_eq!(upwind_gate(2.0, Side::Min), 2.0);
        assert_eq!(upwind_gate(2.0, Side::Max), 0.0);
        assert_eq!(upwind_gate(-1.5, Side::Min), 0.0);
        assert_eq!(upwind_gate(-1.5, Side::Max), -1.5);
        assert_eq!(upwind_gate(0.0, Side::Min), 0.0);
        assert_eq!(upwind_gate(0.0, Side::Max), 0.0);
    }

    #[test]
    fn flux_kernel_examples() {
        assert_eq!(flux_kernel(0.0, 1.0, 0.0, &modules(1.0, None), 1.0), -2.0);
        assert_eq!(flux_kernel(0.4, 0.4, 0.4, &modules(0.3, Some(1.7)), 0.1), 0.0);
        assert_eq!(flux_kernel(0.0, 1.0, 2.0, &modules(0.0, Some(1.0)), 1.0), -1.0);
    }

    #[test]
    fn negative_velocity_takes_the_right_neighbor() {
        // du/dt = -v du/dx with v = -1 on u = x: the exact rate is +1.
        let f = flux_kernel(-1.0, 0.0, 1.0, &modules(0.0, Some(-1.0)), 1.0);
        assert_eq!(f, 1.0);
    }

    proptest! {
        #[test]
        fn upwind_exclusivity(v in -10.0f64..10.0) {
            prop_assume!(v != 0.0);
            let l = upwind_gate(v, Side::Min);
            let r = upwind_gate(v, Side::Max);
            prop_assert!((l == 0.0) != (r == 0.0));
        }

        #[test]
        fn laplacian_reduction(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0, d in 0.0f64..2.0, dx in 0.05f64..1.0) {
            let f = flux_kernel(a, b, c, &modules(d, None), dx);
            let lap = crate::pde::laplacian_stencil(a, b, c, dx);
            prop_assert!((f - d * lap).abs() <= 1e-12 * (1.0 + (d * lap).abs()));
        }
    }

    fn pure_diffusion(grid: Grid, bcs: BoundarySet, d: f64) -> FinnModel {
        let mut cfg = FinnConfig::oracle(Family::AllenCahn, grid, bcs);
        cfg.diffusion = vec![ModuleSpec::fixed(d)];
        cfg.reaction = ModuleSpec::Analytic {
            function: TrueFunction::AllenCahn { rate: 0.0 },
        };
        FinnModel::new(cfg).unwrap()
    }

    #[test]
    fn center_of_three_cells_matches_the_laplacian() {
        let grid = Grid::line(0.0, 3.0, 3, Centering::Cell).unwrap();
        let model = pure_diffusion(grid, BoundarySet::uniform(1, 1, BoundaryCondition::dirichlet(0.0)), 1.0);
        let r = model.rhs_values(&Matrix::column(vec![0.0, 1.0, 0.0])).unwrap();
        assert_eq!(r.data()[1], -2.0);
    }

    #[test]
    fn uniform_field_has_zero_interior_rate() {
        let grid = line(6, Centering::Cell);
        let model = pure_diffusion(grid, BoundarySet::uniform(1, 1, BoundaryCondition::dirichlet(0.0)), 0.3);
        let r = model.rhs_values(&Matrix::filled(6, 1, 0.8)).unwrap();
        assert!(r.data()[1..5].iter().all(|&x| x == 0.0));
        assert!(r.data()[0] < 0.0 && r.data()[5] < 0.0);
    }

    #[test]
    fn periodic_diffusion_conserves_exactly() {
        let grid = line(9, Centering::Cell);
        let model = pure_diffusion(grid, BoundarySet::uniform(1, 1, BoundaryCondition::Periodic), 0.05);
        let u: Vec<f64> = (0..9).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let r = model.rhs_values(&Matrix::column(u)).unwrap();
        assert!(r.sum().abs() < 1e-13, "{}", r.sum());
    }

    #[test]
    fn periodic_advection_wraps_around() {
        // Constant positive velocity: each volume sees its left neighbor,
        // and the first volume's left neighbor is the last one.
        let grid = Grid::line(0.0, 4.0, 4, Centering::Cell).unwrap();
        let mut cfg = FinnConfig::oracle(
            Family::Burgers1d,
            grid,
            BoundarySet::uniform(1, 1, BoundaryCondition::Periodic),
        );
        cfg.diffusion = vec![ModuleSpec::fixed(0.0)];
        let model = FinnModel::new(cfg).unwrap();
        let u = vec![1.0, 2.0, 3.0, 4.0];
        let r = model.rhs_values(&Matrix::column(u.clone())).unwrap();
        for i in 0..4 {
            let left = u[(i + 3) % 4];
            assert_eq!(r.data()[i], u[i] * (left - u[i]));
        }
    }

    #[test]
    fn reaction_oracle_at_origin() {
        let grid = Grid::new(vec![
            Axis::new(-1.0, 1.0, 4, Centering::Cell),
            Axis::new(-1.0, 1.0, 4, Centering::Cell),
        ])
        .unwrap();
        let cfg = FinnConfig::oracle(
            Family::DiffusionReaction,
            grid,
            BoundarySet::uniform(2, 2, BoundaryCondition::no_flow()),
        );
        let model = FinnModel::new(cfg).unwrap();
        let r = model.rhs_values(&Matrix::zeros(16, 2)).unwrap();
        for c in 0..16 {
            assert!((r.get(c, 0) + 5e-3).abs() < 1e-15);
            assert_eq!(r.get(c, 1), 0.0);
        }
    }

    #[test]
    fn dirichlet_steady_state_is_linear() {
        let grid = Grid::line(0.0, 1.0, 8, Centering::Node).unwrap();
        let bcs = BoundarySet {
            species: vec![vec![AxisBoundaries {
                min: BoundaryCondition::dirichlet(1.0),
                max: BoundaryCondition::dirichlet(-0.5),
            }]],
        };
        let model = pure_diffusion(grid.clone(), bcs, 0.2);
        let x = grid.axes[0].coordinates();
        let linear: Vec<f64> = x.iter().map(|x| 1.0 - 1.5 * x).collect();
        let r = model.rhs_values(&Matrix::column(linear.clone())).unwrap();
        assert!(r.data().iter().all(|v| v.abs() < 1e-12), "{:?}", r.data());
        // Relax from zero to the steady state.
        let mut u = Matrix::zeros(8, 1);
        let dt = 0.25 * grid.spacing(0).powi(2) / 0.2;
        for _ in 0..20000 {
            let r = model.rhs_values(&u).unwrap();
            for (a, b) in u.data_mut().iter_mut().zip(r.data()) {
                *a += dt * b;
            }
        }
        for (a, b) in u.data().iter().zip(&linear) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn neumann_faces_pass_no_flux() {
        let grid = line(5, Centering::Cell);
        let model = pure_diffusion(grid, BoundarySet::uniform(1, 1, BoundaryCondition::no_flow()), 0.1);
        let r = model.rhs_values(&Matrix::column(vec![0.3, 1.0, -0.2, 0.5, 0.9])).unwrap();
        assert!(r.sum().abs() < 1e-14);
    }

    #[test]
    fn freshly_built_stencil_reports_its_init() {
        let grid = line(4, Centering::Cell);
        let bcs = BoundarySet::uniform(1, 1, BoundaryCondition::dirichlet(0.0));
        let mut cfg = FinnConfig::learned(Family::Burgers1d, grid.clone(), bcs.clone());
        cfg.stencil.init = StencilInit::Fixed {
            self_weight: -0.7,
            neighbor_weight: 1.2,
        };
        let m = FinnModel::new(cfg).unwrap();
        assert_eq!(m.stencil_report()[0].self_weight, -0.7);
        assert_eq!(m.stencil_report()[0].neighbor_weight, 1.2);
        let frozen = FinnModel::new(FinnConfig::oracle(Family::Burgers1d, grid, bcs)).unwrap();
        assert_eq!(frozen.stencil_report()[0].self_weight, -1.0);
        assert_eq!(frozen.stencil_report()[0].neighbor_weight, 1.0);
    }

    #[test]
    fn learned_parameter_counts() {
        let one = |family: Family| {
            let grid = if family.dim() == 1 {
                line(4, Centering::Cell)
            } else {
                Grid::new(vec![Axis::new(0.0, 1.0, 3, Centering::Cell); 2]).unwrap()
            };
            let bcs = BoundarySet::uniform(family.species(), family.dim(), BoundaryCondition::no_flow());
            FinnModel::new(FinnConfig::learned(family, grid, bcs)).unwrap().param_count()
        };
        // network weights + scalar diffusivities + two stencil weights
        assert_eq!(one(Family::Burgers1d), 420 + 1 + 2);
        assert_eq!(one(Family::DiffusionSorption), 420 + 2);
        assert_eq!(one(Family::DiffusionReaction), 880 + 2 + 2);
        assert_eq!(one(Family::AllenCahn), 420 + 1 + 2);
    }

    #[test]
    fn zero_weight_network_extracts_zeros() {
        let grid = line(4, Centering::Cell);
        let bcs = BoundarySet::uniform(1, 1, BoundaryCondition::dirichlet(0.0));
        let mut m = FinnModel::new(FinnConfig::learned(Family::Burgers1d, grid, bcs)).unwrap();
        let n = m.params().trainable_count();
        m.params_mut().set_flat_trainable(&vec![0.0; n]).unwrap();
        let q = Matrix::column((0..11).map(|i| -1.0 + 0.2 * i as f64).collect());
        let v = m.extract(LearnedFunction::AdvectiveVelocity, &q).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert!(matches!(
            m.extract(LearnedFunction::Reaction, &q),
            Err(CoreError::MissingModule(_))
        ));
    }

    #[test]
    fn config_round_trips_through_json() {
        for family in Family::ALL {
            let grid = if family.dim() == 1 {
                line(4, Centering::Node)
            } else {
                Grid::new(vec![Axis::new(0.0, 1.0, 3, Centering::Cell); 2]).unwrap()
            };
            let bcs = BoundarySet::uniform(family.species(), family.dim(), BoundaryCondition::no_flow());
            for cfg in [
                FinnConfig::learned(family, grid.clone(), bcs.clone()),
                FinnConfig::oracle(family, grid.clone(), bcs.clone()),
            ] {
                let text = serde_json::to_string_pretty(&cfg).unwrap();
                let back: FinnConfig = serde_json::from_str(&text).unwrap();
                assert_eq!(back, cfg);
            }
        }
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let grid = line(4, Centering::Cell);
        let bcs = BoundarySet::uniform(1, 1, BoundaryCondition::dirichlet(0.0));
        let cfg = FinnConfig::learned(Family::Burgers1d, grid, bcs);
        let mut v = serde_json::to_value(&cfg).unwrap();
        v["stencil"]["typo"] = serde_json::json!(1);
        assert!(serde_json::from_value::<FinnConfig>(v).is_err());
    }

    #[test]
    fn polynomial_modules_fit_the_family() {
        let grid = Grid::new(vec![Axis::new(0.0, 1.0, 3, Centering::Cell); 2]).unwrap();
        let bcs = BoundarySet::uniform(2, 2, BoundaryCondition::no_flow());
        let mut cfg = FinnConfig::learned(Family::DiffusionReaction, grid, bcs);
        cfg.reaction = ModuleSpec::Polynomial {
            order: 3,
            positive: false,
            trainable: true,
        };
        let m = FinnModel::new(cfg).unwrap();
        // 10 monomials of degree <= 3 in two variables, two outputs
        assert_eq!(m.param_count(), 20 + 2 + 2);
        assert_eq!(monomials(2, 3).len(), 10);
        assert_eq!(monomials(1, 3), vec![vec![0], vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn state_layout_round_trip() {
        let v: Vec<f64> = (0..10).map(f64::from).collect();
        let s = to_state(&v, 2);
        assert_eq!(s.get(0, 1), 5.0);
        assert_eq!(from_state(&s), v);
    }
}
