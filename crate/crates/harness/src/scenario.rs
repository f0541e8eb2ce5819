//! Scenario files: parking-lot geometry and vehicle dimensions in TOML.
//!
//! Every length is in meters and every angle in radians; field names carry
//! the unit suffix. Saving writes fields in a fixed order, so
//! `save(load(x))` is stable.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use parkcil_core::env::{EnvError, NamedPolygon, ParkingScene, Slot};
use parkcil_core::geometry::{GeometryError, Point, Polygon};
use parkcil_core::vehicle::VehicleParams;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Major version this build reads.
pub const SCHEMA_MAJOR: u32 = 1;
pub const SCHEMA_VERSION: &str = "1.0";

const BUILTIN: &[(&str, &str)] = &[
    ("open-lot", include_str!("../scenarios/open-lot.toml")),
    ("corridor", include_str!("../scenarios/corridor.toml")),
    ("cul-de-sac", include_str!("../scenarios/cul-de-sac.toml")),
];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("unsupported schema version '{found}'; this build reads {SCHEMA_MAJOR}.x")]
    Version { found: String },
    #[error("polygon '{name}': {source}")]
    Polygon { name: String, source: GeometryError },
    #[error("vehicle: {0}")]
    Vehicle(String),
    #[error("grid_resolution_m must be positive, got {0}")]
    Resolution(f64),
    #[error(transparent)]
    Scene(#[from] EnvError),
    #[error("unknown scenario '{0}' (built-in: open-lot, corridor, cul-de-sac)")]
    Unknown(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    pub wheelbase_m: f64,
    pub length_m: f64,
    pub width_m: f64,
    pub rear_overhang_m: f64,
    pub max_steer_rad: f64,
    pub max_speed_mps: f64,
}

impl From<&VehicleParams> for VehicleSpec {
    fn from(v: &VehicleParams) -> Self {
        Self {
            wheelbase_m: v.wheelbase,
            length_m: v.length,
            width_m: v.width,
            rear_overhang_m: v.rear_overhang,
            max_steer_rad: v.max_steer,
            max_speed_mps: v.max_speed,
        }
    }
}

impl VehicleSpec {
    pub fn params(&self) -> VehicleParams {
        VehicleParams {
            wheelbase: self.wheelbase_m,
            length: self.length_m,
            width: self.width_m,
            rear_overhang: self.rear_overhang_m,
            max_steer: self.max_steer_rad,
            max_speed: self.max_speed_mps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    pub points_m: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub name: String,
    pub points_m: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotSpec {
    pub name: String,
    /// Heading of a parked vehicle, pointing out of the slot.
    pub heading_rad: f64,
    pub points_m: Vec<[f64; 2]>,
}

/// On-disk scenario layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub schema_version: String,
    pub name: String,
    pub seed: u64,
    pub grid_resolution_m: f64,
    pub vehicle: VehicleSpec,
    pub boundary: BoundarySpec,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
    pub slots: Vec<SlotSpec>,
}

/// A validated scenario with its scene grids built.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub scene: Arc<ParkingScene>,
    pub vehicle: VehicleParams,
}

fn polygon(name: &str, points: &[[f64; 2]]) -> Result<Polygon, ScenarioError> {
    Polygon::new(points.iter().map(|p| Point::new(p[0], p[1])).collect()).map_err(|source| {
        ScenarioError::Polygon {
            name: name.to_string(),
            source,
        }
    })
}

fn check_version(v: &str) -> Result<(), ScenarioError> {
    let bad = || ScenarioError::Version { found: v.to_string() };
    let (major, minor) = v.split_once('.').ok_or_else(bad)?;
    let major: u32 = major.parse().map_err(|_| bad())?;
    minor.parse::<u32>().map_err(|_| bad())?;
    if major != SCHEMA_MAJOR {
        return Err(bad());
    }
    Ok(())
}

impl Scenario {
    pub fn from_spec(spec: ScenarioSpec) -> Result<Self, ScenarioError> {
        check_version(&spec.schema_version)?;
        let vehicle = spec.vehicle.params();
        vehicle.validate().map_err(ScenarioError::Vehicle)?;
        if !(spec.grid_resolution_m > 0.0 && spec.grid_resolution_m.is_finite()) {
            return Err(ScenarioError::Resolution(spec.grid_resolution_m));
        }
        let boundary = polygon("boundary", &spec.boundary.points_m)?;
        let obstacles = spec
            .obstacles
            .iter()
            .map(|o| {
                Ok(NamedPolygon {
                    name: o.name.clone(),
                    polygon: polygon(&o.name, &o.points_m)?,
                })
            })
            .collect::<Result<Vec<_>, ScenarioError>>()?;
        let slots = spec
            .slots
            .iter()
            .map(|s| {
                Ok(Slot {
                    name: s.name.clone(),
                    polygon: polygon(&s.name, &s.points_m)?,
                    heading: s.heading_rad,
                })
            })
            .collect::<Result<Vec<_>, ScenarioError>>()?;
        let scene = ParkingScene::new(spec.name.clone(), boundary, obstacles, slots, spec.grid_resolution_m)?;
        Ok(Self {
            spec,
            scene: Arc::new(scene),
            vehicle,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        // Check the version before the full schema so newer files fail on it.
        #[derive(Deserialize)]
        struct Header {
            schema_version: Option<String>,
        }
        if let Ok(Header {
            schema_version: Some(v),
        }) = toml::from_str::<Header>(text)
        {
            check_version(&v)?;
        }
        let spec: ScenarioSpec = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        Self::from_spec(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ScenarioError::Parse(msg) => ScenarioError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// A shipped scenario by name.
    pub fn builtin(name: &str) -> Result<Self, ScenarioError> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ScenarioError::Unknown(name.to_string()))?;
        Self::from_toml_str(text)
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(n, _)| *n)
    }

    /// A built-in name, or else a file path.
    pub fn resolve(name_or_path: &str) -> Result<Self, ScenarioError> {
        if BUILTIN.iter().any(|(n, _)| *n == name_or_path) {
            Self::builtin(name_or_path)
        } else {
            Self::load(Path::new(name_or_path))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.spec).expect("scenario specs always serialize")
    }

    pub fn save(&self, path: &Path) -> Result<(), ScenarioError> {
        std::fs::write(path, self.to_toml()).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
