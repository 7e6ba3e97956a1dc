//! Grids, boundary descriptors and the finite-volume stencil helpers shared
//! by the reference solver and the learned model.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Where the sample points of an axis sit relative to its extent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// `count` cells tile the extent; centers at `min + (i + 1/2) dx`,
    /// `dx = extent / count`. Faces coincide with the domain ends.
    #[default]
    Cell,
    /// `count` interior nodes at `min + (i + 1) dx`, `dx = extent / (count + 1)`.
    /// The virtual neighbors of the first and last node sit exactly on the
    /// domain ends, where boundary values are imposed.
    Node,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
    #[serde(default)]
    pub centering: Centering,
}

impl Axis {
    pub fn new(min: f64, max: f64, count: usize, centering: Centering) -> Self {
        Self {
            min,
            max,
            count,
            centering,
        }
    }

    pub fn extent(&self) -> f64 {
        self.max - self.min
    }

    pub fn spacing(&self) -> f64 {
        match self.centering {
            Centering::Cell => self.extent() / self.count as f64,
            Centering::Node => self.extent() / (self.count + 1) as f64,
        }
    }

    pub fn coordinates(&self) -> Vec<f64> {
        let dx = self.spacing();
        let offset = match self.centering {
            Centering::Cell => 0.5,
            Centering::Node => 1.0,
        };
        (0..self.count).map(|i| self.min + (i as f64 + offset) * dx).collect()
    }

    /// The axis with half the spacing.
    pub fn refined(&self) -> Self {
        let count = match self.centering {
            Centering::Cell => 2 * self.count,
            Centering::Node => 2 * self.count + 1,
        };
        Self { count, ..self.clone() }
    }

    /// Maps values on the refined axis back to this axis: pairwise averages
    /// for cells, injection for nodes.
    pub fn restriction(&self) -> Vec<Vec<(usize, f64)>> {
        (0..self.count)
            .map(|i| match self.centering {
                Centering::Cell => vec![(2 * i, 0.5), (2 * i + 1, 0.5)],
                Centering::Node => vec![(2 * i + 1, 1.0)],
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(CoreError::Grid("axis needs at least one volume".into()));
        }
        if !(self.extent() > 0.0) || !self.extent().is_finite() {
            return Err(CoreError::Grid(format!(
                "axis extent [{}, {}] must be finite and positive",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// Uniform one- or two-dimensional grid. Two-dimensional cells are
/// flattened as `ix * ny + iy`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub axes: Vec<Axis>,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        let g = Self { axes };
        g.validate()?;
        Ok(g)
    }

    pub fn line(min: f64, max: f64, count: usize, centering: Centering) -> Result<Self> {
        Self::new(vec![Axis::new(min, max, count, centering)])
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.axes.len()) {
            return Err(CoreError::Grid(format!(
                "dimensionality must be 1 or 2, got {}",
                self.axes.len()
            )));
        }
        self.axes.iter().try_for_each(Axis::validate)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.count).collect()
    }

    pub fn cells(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.axes[axis].spacing()
    }

    /// Volume (length or area) of one control volume.
    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::spacing).product()
    }

    /// Distance in flat index between neighbors along `axis`.
    pub fn stride(&self, axis: usize) -> usize {
        self.axes[axis + 1..].iter().map(|a| a.count).product()
    }

    /// Index of a cell along `axis`.
    pub fn axis_index(&self, cell: usize, axis: usize) -> usize {
        (cell / self.stride(axis)) % self.axes[axis].count
    }

    pub fn refined(&self) -> Self {
        Self {
            axes: self.axes.iter().map(Axis::refined).collect(),
        }
    }

    /// For each coarse cell, the weighted fine cells that restrict onto it.
    pub fn restriction(&self) -> Vec<Vec<(usize, f64)>> {
        let fine = self.refined();
        match self.dim() {
            1 => self.axes[0].restriction(),
            _ => {
                let rx = self.axes[0].restriction();
                let ry = self.axes[1].restriction();
                let nyf = fine.axes[1].count;
                let mut out = Vec::with_capacity(self.cells());
                for wx in &rx {
                    for wy in &ry {
                        let mut terms = Vec::new();
                        for &(fx, ax) in wx {
                            for &(fy, ay) in wy {
                                terms.push((fx * nyf + fy, ax * ay));
                            }
                        }
                        out.push(terms);
                    }
                }
                out
            }
        }
    }
}

/// How the derivative coefficient of a Cauchy condition is supplied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CauchyCoefficient {
    /// Use the diffusivity at the boundary.
    Diffusivity,
    /// A fixed coefficient, e.g. derived from a flow rate.
    Value(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundaryCondition {
    /// Fixed boundary value.
    Dirichlet { value: f64 },
    /// Fixed face flux; replaces the flux kernel output at the face.
    Neumann { flux: f64 },
    /// `u_b = c * du/dx` at the face, discretised one-sidedly.
    Cauchy { coefficient: CauchyCoefficient },
    Periodic,
}

impl BoundaryCondition {
    pub fn dirichlet(value: f64) -> Self {
        Self::Dirichlet { value }
    }

    pub fn no_flow() -> Self {
        Self::Neumann { flux: 0.0 }
    }
}

/// Inputs needed to resolve the virtual neighbor at one face.
#[derive(Clone, Copy, Debug)]
pub struct FaceContext {
    /// Value in the volume adjacent to the face.
    pub boundary_value: f64,
    /// Value in the volume on the opposite face of the same axis.
    pub opposite_value: f64,
    pub spacing: f64,
    pub diffusivity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ghost {
    /// Value to use as the outer neighbor.
    Value(f64),
    /// The face flux is prescribed instead.
    FluxOverride(f64),
}

/// Multiplier `g` such that the Cauchy ghost value equals `g * u_boundary`.
pub fn cauchy_factor(coefficient: f64, spacing: f64) -> Result<f64> {
    if spacing <= 0.0 {
        return Err(CoreError::Boundary("spacing must be positive".into()));
    }
    let denom = coefficient - spacing;
    if denom.abs() <= f64::EPSILON * spacing.max(coefficient.abs()) {
        return Err(CoreError::SingularCauchy(spacing));
    }
    Ok(coefficient / denom)
}

/// Resolves the virtual neighbor value a boundary flux kernel consumes.
pub fn ghost_value(bc: &BoundaryCondition, ctx: FaceContext) -> Result<Ghost> {
    if ctx.spacing <= 0.0 {
        return Err(CoreError::Boundary("spacing must be positive".into()));
    }
    Ok(match *bc {
        BoundaryCondition::Dirichlet { value } => Ghost::Value(value),
        BoundaryCondition::Neumann { flux } => Ghost::FluxOverride(flux),
        BoundaryCondition::Periodic => Ghost::Value(ctx.opposite_value),
        BoundaryCondition::Cauchy { coefficient } => {
            let c = match coefficient {
                CauchyCoefficient::Diffusivity => ctx.diffusivity,
                CauchyCoefficient::Value(c) => c,
            };
            Ghost::Value(cauchy_factor(c, ctx.spacing)? * ctx.boundary_value)
        }
    })
}

/// Second difference `(l - 2c + r) / dx^2`.
pub fn laplacian_stencil(left: f64, center: f64, right: f64, spacing: f64) -> f64 {
    (left - 2.0 * center + right) / (spacing * spacing)
}

/// Conditions on the two ends of one axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisBoundaries {
    pub min: BoundaryCondition,
    pub max: BoundaryCondition,
}

impl AxisBoundaries {
    pub fn both(bc: BoundaryCondition) -> Self {
        Self { min: bc, max: bc }
    }

    pub fn side(&self, side: Side) -> &BoundaryCondition {
        match side {
            Side::Min => &self.min,
            Side::Max => &self.max,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Min,
    Max,
}

/// One descriptor per face per species: `species[s][axis]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub species: Vec<Vec<AxisBoundaries>>,
}

impl BoundarySet {
    pub fn uniform(species: usize, axes: usize, bc: BoundaryCondition) -> Self {
        Self {
            species: vec![vec![AxisBoundaries::both(bc); axes]; species],
        }
    }

    pub fn get(&self, species: usize, axis: usize) -> &AxisBoundaries {
        &self.species[species][axis]
    }

    pub fn validate(&self, grid: &Grid, species: usize) -> Result<()> {
        if self.species.len() != species {
            return Err(CoreError::Boundary(format!(
                "expected descriptors for {species} species, got {}",
                self.species.len()
            )));
        }
        for (s, axes) in self.species.iter().enumerate() {
            if axes.len() != grid.dim() {
                return Err(CoreError::Boundary(format!(
                    "species {s}: expected {} axes, got {}",
                    grid.dim(),
                    axes.len()
                )));
            }
            for (a, ab) in axes.iter().enumerate() {
                let periodic = |bc: &BoundaryCondition| matches!(bc, BoundaryCondition::Periodic);
                if periodic(&ab.min) != periodic(&ab.max) {
                    return Err(CoreError::Boundary(format!(
                        "species {s}, axis {a}: periodic conditions must be set on both ends"
                    )));
                }
                for bc in [&ab.min, &ab.max] {
                    let finite = match bc {
                        BoundaryCondition::Dirichlet { value } => value.is_finite(),
                        BoundaryCondition::Neumann { flux } => flux.is_finite(),
                        BoundaryCondition::Cauchy {
                            coefficient: CauchyCoefficient::Value(c),
                        } => c.is_finite(),
                        _ => true,
                    };
                    if !finite {
                        return Err(CoreError::Boundary(format!("species {s}, axis {a}: non-finite value")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Values of every species on a grid at one instant, species-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub species: usize,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(species: usize, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let cells: usize = shape.iter().product();
        if values.len() != species * cells {
            return Err(CoreError::Shape(format!(
                "field of {species} species on {shape:?} needs {} values, got {}",
                species * cells,
                values.len()
            )));
        }
        Ok(Self { species, shape, values })
    }

    pub fn cells(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn species_values(&self, s: usize) -> &[f64] {
        let n = self.cells();
        &self.values[s * n..(s + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
