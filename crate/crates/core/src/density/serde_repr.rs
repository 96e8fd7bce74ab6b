//! JSON form of a density: `{schema_version, step, masses}` where runs of
//! zero cells may be written as `{"zeros": n}`.

use serde::{Deserialize, Serialize};

use super::{DensityError, Grid, GridDensity};

pub const DENSITY_SCHEMA_VERSION: u32 = 1;

/// Zero runs shorter than this are written out literally.
const MIN_ZERO_RUN: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MassEntry {
    Value(f64),
    Zeros { zeros: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityRepr {
    #[serde(default = "default_version")]
    pub schema_version: u32,
    pub step: Grid,
    pub masses: Vec<MassEntry>,
}

fn default_version() -> u32 {
    DENSITY_SCHEMA_VERSION
}

impl From<GridDensity> for DensityRepr {
    fn from(d: GridDensity) -> Self {
        let grid = d.grid();
        let masses = d.into_masses();
        let mut out = Vec::new();
        let mut k = 0;
        while k < masses.len() {
            if masses[k] == 0.0 {
                let run = masses[k..].iter().take_while(|&&m| m == 0.0).count();
                if run >= MIN_ZERO_RUN {
                    out.push(MassEntry::Zeros { zeros: run });
                } else {
                    out.extend(std::iter::repeat_n(MassEntry::Value(0.0), run));
                }
                k += run;
            } else {
                out.push(MassEntry::Value(masses[k]));
                k += 1;
            }
        }
        Self {
            schema_version: DENSITY_SCHEMA_VERSION,
            step: grid,
            masses: out,
        }
    }
}

impl TryFrom<DensityRepr> for GridDensity {
    type Error = DensityError;

    fn try_from(repr: DensityRepr) -> Result<Self, Self::Error> {
        let grid = repr.step;
        let mut masses = Vec::with_capacity(grid.len());
        for entry in repr.masses {
            match entry {
                MassEntry::Value(v) => {
                    if !v.is_finite() || v < 0.0 {
                        return Err(DensityError::InvalidMass(format!("cell mass {v}")));
                    }
                    masses.push(v);
                }
                MassEntry::Zeros { zeros } => {
                    if masses.len() + zeros > grid.len() {
                        return Err(DensityError::InvalidMass("zero run past end of grid".into()));
                    }
                    masses.resize(masses.len() + zeros, 0.0);
                }
            }
        }
        if masses.len() != grid.len() {
            return Err(DensityError::InvalidMass(format!(
                "expected {} cells, got {}",
                grid.len(),
                masses.len()
            )));
        }
        let total = crate::numeric::neumaier_sum(masses.iter().copied());
        if (total - 1.0).abs() > 1e-9 {
            return Err(DensityError::InvalidMass(format!("masses sum to {total}, not 1")));
        }
        Ok(GridDensity::from_normalized(grid, masses))
    }
}
