//! Benchmark equation families, their physical constants and ground-truth
//! constitutive functions.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use finn_autodiff::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Burgers1d,
    Burgers2d,
    DiffusionSorption,
    DiffusionReaction,
    AllenCahn,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Burgers1d,
        Family::Burgers2d,
        Family::DiffusionSorption,
        Family::DiffusionReaction,
        Family::AllenCahn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Burgers1d => "burgers1d",
            Family::Burgers2d => "burgers2d",
            Family::DiffusionSorption => "diffusion_sorption",
            Family::DiffusionReaction => "diffusion_reaction",
            Family::AllenCahn => "allen_cahn",
        }
    }

    /// Number of state species carried by the model and the datasets.
    pub fn species(self) -> usize {
        match self {
            Family::DiffusionSorption | Family::DiffusionReaction => 2,
            _ => 1,
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Family::Burgers2d | Family::DiffusionReaction => 2,
            _ => 1,
        }
    }

    pub fn is_burgers(self) -> bool {
        matches!(self, Family::Burgers1d | Family::Burgers2d)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown family {s:?}")))
    }
}

pub const BURGERS_DIFFUSIVITY: f64 = 0.01 / PI;

/// Sorbing porous medium with a Freundlich isotherm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SorptionParams {
    /// Effective diffusion coefficient.
    pub diffusivity: f64,
    pub porosity: f64,
    /// Bulk density of the solid.
    pub density: f64,
    /// Freundlich parameter.
    pub freundlich_k: f64,
    /// Freundlich exponent.
    pub exponent: f64,
}

pub const SORPTION: SorptionParams = SorptionParams {
    diffusivity: 5e-4,
    porosity: 0.29,
    density: 2880.0,
    freundlich_k: 3.5e-4,
    exponent: 0.874,
};

pub const REACTION_DIFFUSIVITY: [f64; 2] = [1e-3, 5e-3];
pub const REACTION_K: f64 = 5e-3;

pub const ALLEN_CAHN_DIFFUSIVITY: f64 = 1e-4;
pub const ALLEN_CAHN_RATE: f64 = 5.0;

/// Offset added to the non-negative part of `u` before evaluating the
/// Freundlich retardation inside solvers. The closed form is singular at
/// zero, which would freeze a zero initial state forever.
pub const FREUNDLICH_REGULARIZATION: f64 = 1e-6;

/// Ground-truth constitutive relations of the benchmark families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum TrueFunction {
    /// Advective velocity equal to the transported quantity.
    Identity,
    /// Freundlich retardation factor.
    Freundlich {
        porosity: f64,
        density: f64,
        freundlich_k: f64,
        exponent: f64,
    },
    /// Cubic reaction `rate * (u - u^3)`.
    AllenCahn { rate: f64 },
    /// Activator/inhibitor reaction pair.
    FitzHughNagumo { k: f64 },
}

/// Value of a closed-form function, or a flag that the input lies on a
/// singularity.
#[derive(Clone, Debug, PartialEq)]
pub enum ConstitutiveValue {
    Finite(Vec<f64>),
    Singular,
}

impl TrueFunction {
    pub fn freundlich(p: &SorptionParams) -> Self {
        TrueFunction::Freundlich {
            porosity: p.porosity,
            density: p.density,
            freundlich_k: p.freundlich_k,
            exponent: p.exponent,
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            TrueFunction::FitzHughNagumo { .. } => 2,
            _ => 1,
        }
    }

    pub fn output_width(&self) -> usize {
        self.input_width()
    }

    fn freundlich_scale(porosity: f64, density: f64, k: f64, exponent: f64) -> f64 {
        (1.0 - porosity) / porosity * density * k * exponent
    }

    /// Exact evaluation of the closed form.
    pub fn evaluate(&self, input: &[f64]) -> Result<ConstitutiveValue> {
        if input.len() != self.input_width() {
            return Err(CoreError::Shape(format!(
                "function expects {} inputs, got {}",
                self.input_width(),
                input.len()
            )));
        }
        Ok(match *self {
            TrueFunction::Identity => ConstitutiveValue::Finite(vec![input[0]]),
            TrueFunction::Freundlich {
                porosity,
                density,
                freundlich_k,
                exponent,
            } => {
                let u = input[0];
                if u <= 0.0 && exponent < 1.0 {
                    ConstitutiveValue::Singular
                } else {
                    let c = Self::freundlich_scale(porosity, density, freundlich_k, exponent);
                    ConstitutiveValue::Finite(vec![1.0 + c * u.powf(exponent - 1.0)])
                }
            }
            TrueFunction::AllenCahn { rate } => {
                let u = input[0];
                ConstitutiveValue::Finite(vec![rate * (u - u * u * u)])
            }
            TrueFunction::FitzHughNagumo { k } => {
                let (u1, u2) = (input[0], input[1]);
                ConstitutiveValue::Finite(vec![u1 - u1 * u1 * u1 - k - u2, u1 - u2])
            }
        })
    }

    /// Solver form on a tape: rows are volumes, columns inputs. The
    /// Freundlich factor is regularised near zero (see
    /// [`FREUNDLICH_REGULARIZATION`]).
    pub fn record(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(match *self {
            TrueFunction::Identity => x,
            TrueFunction::Freundlich {
                porosity,
                density,
                freundlich_k,
                exponent,
            } => {
                let c = Self::freundlich_scale(porosity, density, freundlich_k, exponent);
                let pos = tape.relu(x)?;
                let pos = tape.offset(pos, FREUNDLICH_REGULARIZATION)?;
                let p = tape.powf(pos, exponent - 1.0)?;
                let s = tape.scale(p, c)?;
                tape.offset(s, 1.0)?
            }
            TrueFunction::AllenCahn { rate } => {
                let cube = tape.powi(x, 3)?;
                tape.lin_comb(&[(x, rate), (cube, -rate)])?
            }
            TrueFunction::FitzHughNagumo { k } => {
                let u1 = tape.column(x, 0)?;
                let u2 = tape.column(x, 1)?;
                let cube = tape.powi(u1, 3)?;
                let q1 = tape.lin_comb(&[(u1, 1.0), (cube, -1.0), (u2, -1.0)])?;
                let q1 = tape.offset(q1, -k)?;
                let q2 = tape.sub(u1, u2)?;
                tape.hstack(&[q1, q2])?
            }
        })
    }
}

/// Looks up a named ground-truth function of a family.
pub fn true_constitutive(family: Family, name: &str, input: &[f64]) -> Result<ConstitutiveValue> {
    let f = match (family, name) {
        (Family::Burgers1d | Family::Burgers2d, "advective_velocity") => TrueFunction::Identity,
        (Family::DiffusionSorption, "retardation") => TrueFunction::freundlich(&SORPTION),
        (Family::DiffusionReaction, "reaction") => TrueFunction::FitzHughNagumo { k: REACTION_K },
        (Family::AllenCahn, "reaction") => TrueFunction::AllenCahn { rate: ALLEN_CAHN_RATE },
        _ => {
            return Err(CoreError::Config(format!(
                "family {family} has no constitutive function {name:?}"
            )))
        }
    };
    f.evaluate(input)
}
