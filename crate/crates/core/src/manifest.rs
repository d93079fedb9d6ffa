//! Run manifests: which task files exist per city and where each model's
//! embeddings live.
//!
//! ```json
//! {
//!   "cities": {
//!     "London": { "hex_origin": [-0.12, 51.5], "tasks": { "POP": "london_pop.csv" } }
//!   },
//!   "models": {
//!     "pe": { "dim": 192, "support": "coordinate_encoder", "encoder": "pe_spherec_approx" },
//!     "sat": { "dim": 64, "support": "raster", "files": { "London": "london_sat.erf" } }
//!   }
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::align::EntityAggregation;
use crate::dataset::{CityPolicy, Task};
use crate::pe::{PeEncoder, PE_ENCODER_ID};
use crate::repr::{CoordinateEncoder, Representation, Support, SupportKind};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityEntry {
    /// Anchor of the hex grid; defaults to the center of the task extents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hex_origin: Option<(f64, f64)>,
    pub tasks: BTreeMap<Task, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub dim: usize,
    pub support: SupportKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_aggregation: Option<EntityAggregation>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub files: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub cities: BTreeMap<String, CityEntry>,
    pub models: BTreeMap<String, ModelEntry>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn task_path(&self, city: &str, task: Task) -> Option<PathBuf> {
        self.cities.get(city)?.tasks.get(&task).map(|p| self.resolve(p))
    }
}

/// The built-in coordinate encoders by id.
pub fn builtin_encoder(id: &str) -> Option<Arc<dyn CoordinateEncoder>> {
    (id == PE_ENCODER_ID).then(|| Arc::new(PeEncoder::default()) as Arc<dyn CoordinateEncoder>)
}

/// Loads one model's representation of one city.
pub fn load_representation(m: &Manifest, model: &str, city: &str) -> Result<Representation> {
    let entry = m
        .models
        .get(model)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown model {model}")))?;
    let file = || {
        entry
            .files
            .get(city)
            .map(|p| m.resolve(p))
            .ok_or_else(|| Error::Validation(format!("{model} has no file for {city}")))
    };
    let support = match entry.support {
        SupportKind::Raster => Support::Raster(crate::io::read_erf(file()?)?),
        SupportKind::EntitySet => Support::EntitySet(crate::io::read_entity_set(file()?)?),
        SupportKind::CellTable => Support::CellTable(crate::io::read_cell_table(file()?)?),
        SupportKind::CoordinateEncoder => {
            let id = entry.encoder.as_deref().unwrap_or(PE_ENCODER_ID);
            Support::CoordinateEncoder(builtin_encoder(id).ok_or_else(|| Error::Validation(format!("unknown encoder {id}")))?)
        }
    };
    Representation::new(model, entry.dim, support)
}

/// Vector width declared by an embedding file's header, without reading
/// the payload.
pub fn peek_dim(path: &Path, kind: SupportKind) -> Result<usize> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut line = String::new();
    BufReader::new(f).read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    match kind {
        SupportKind::Raster => line
            .split_whitespace()
            .nth(7)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(&origin, 1, "bad erf header")),
        SupportKind::EntitySet | SupportKind::CellTable => Ok(line.trim().split(',').filter(|c| c.trim().starts_with("v_")).count()),
        SupportKind::CoordinateEncoder => Err(Error::InvalidArgument("coordinate encoders have no file".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Combination {
    pub model: String,
    pub city: String,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub resolvable: Vec<Combination>,
    /// Combinations that cannot run, with the reason.
    pub gaps: Vec<(Combination, String)>,
    pub warnings: Vec<String>,
    pub errors: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Checks every (model, city, task) combination without side effects.
/// Missing files are gaps; inconsistent dimensions are errors.
pub fn validate_manifest(m: &Manifest, policy: &CityPolicy) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let mut restricted = BTreeSet::new();
    for (city, ce) in &m.cities {
        for (task, p) in &ce.tasks {
            if !policy.admits(*task, city) {
                restricted.insert((city.clone(), *task));
                rep.warnings
                    .push(format!("AGE restricted: {city} is not one of the evaluated AGE cities"));
            } else if !m.resolve(p).is_file() {
                rep.warnings
                    .push(format!("task file missing for {city} {task}: {}", m.resolve(p).display()));
            }
        }
    }
    for (model, me) in &m.models {
        if me.dim == 0 {
            rep.errors.push(format!("{model}: dimension must be positive"));
        }
        let mut dims: BTreeMap<String, usize> = BTreeMap::new();
        let mut file_ok: BTreeMap<&str, std::result::Result<(), String>> = BTreeMap::new();
        for city in m.cities.keys() {
            let status = match me.support {
                SupportKind::CoordinateEncoder => {
                    let id = me.encoder.as_deref().unwrap_or(PE_ENCODER_ID);
                    match builtin_encoder(id) {
                        Some(e) => {
                            dims.insert(city.clone(), e.dim());
                            Ok(())
                        }
                        None => Err(format!("unknown encoder {id}")),
                    }
                }
                kind => match me.files.get(city).map(|p| m.resolve(p)) {
                    None => Err("no embedding file listed".to_string()),
                    Some(p) if !p.is_file() => Err(format!("embedding file missing: {}", p.display())),
                    Some(p) => match peek_dim(&p, kind) {
                        Ok(d) => {
                            dims.insert(city.clone(), d);
                            Ok(())
                        }
                        Err(e) => Err(e.to_string()),
                    },
                },
            };
            file_ok.insert(city, status);
        }
        for (city, d) in &dims {
            if *d != me.dim {
                rep.errors
                    .push(format!("{model}: dim mismatch for {city}: declared {}, file has {d}", me.dim));
            }
        }
        if dims.values().collect::<BTreeSet<_>>().len() > 1 {
            rep.errors.push(format!("{model}: dimension differs across cities {dims:?}"));
        }
        for (city, ce) in &m.cities {
            for (task, p) in &ce.tasks {
                let combo = Combination {
                    model: model.clone(),
                    city: city.clone(),
                    task: *task,
                };
                if restricted.contains(&(city.clone(), *task)) {
                    rep.gaps.push((combo, "AGE restricted".into()));
                } else if !m.resolve(p).is_file() {
                    rep.gaps.push((combo, "task file missing".into()));
                } else if let Err(why) = &file_ok[city.as_str()] {
                    rep.gaps.push((combo, why.clone()));
                } else {
                    rep.resolvable.push(combo);
                }
            }
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn manifest_with(dir: &Path, cities: &[&str], tasks: &[Task]) -> Manifest {
        let mut m = Manifest {
            base_dir: dir.to_path_buf(),
            ..Manifest::default()
        };
        for c in cities {
            let mut ts = BTreeMap::new();
            for t in tasks {
                let name = format!("{}_{t}.csv", crate::dataset::city_key(c));
                write(dir, &name, "placeholder\n");
                ts.insert(*t, PathBuf::from(name));
            }
            m.cities.insert(
                c.to_string(),
                CityEntry {
                    hex_origin: None,
                    tasks: ts,
                },
            );
        }
        m
    }

    #[test]
    fn all_tasks_resolvable() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest_with(dir.path(), &["London"], &Task::ALL);
        m.models.insert(
            "pe".into(),
            ModelEntry {
                dim: 192,
                support: SupportKind::CoordinateEncoder,
                encoder: Some(PE_ENCODER_ID.into()),
                entity_aggregation: None,
                files: BTreeMap::new(),
            },
        );
        let r = validate_manifest(&m, &CityPolicy::default());
        assert_eq!((r.resolvable.len(), r.gaps.len()), (8, 0));
        assert!(r.is_ok());
    }

    #[test]
    fn age_outside_policy_warns() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest_with(dir.path(), &["Paris"], &[Task::Age]);
        m.models.insert(
            "pe".into(),
            ModelEntry {
                dim: 192,
                support: SupportKind::CoordinateEncoder,
                encoder: None,
                entity_aggregation: None,
                files: BTreeMap::new(),
            },
        );
        let r = validate_manifest(&m, &CityPolicy::default());
        assert!(r.warnings.iter().any(|w| w.contains("AGE restricted")));
        assert!(r.resolvable.is_empty());
    }

    #[test]
    fn missing_files_are_gaps_and_dims_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest_with(dir.path(), &["A", "B", "C"], &[Task::Pop]);
        write(dir.path(), "a.csv", "lon,lat,v_0,v_1\n0,0,1,2\n");
        write(dir.path(), "b.csv", "lon,lat,v_0,v_1,v_2\n0,0,1,2,3\n");
        let files = [("A", "a.csv"), ("B", "b.csv"), ("C", "missing.csv")]
            .iter()
            .map(|(c, f)| (c.to_string(), PathBuf::from(f)))
            .collect();
        m.models.insert(
            "ent".into(),
            ModelEntry {
                dim: 2,
                support: SupportKind::EntitySet,
                encoder: None,
                entity_aggregation: None,
                files,
            },
        );
        let r = validate_manifest(&m, &CityPolicy::default());
        assert_eq!(r.gaps.len(), 1);
        assert_eq!(r.gaps[0].0.city, "C");
        assert!(!r.is_ok());
        assert!(r.errors.iter().any(|e| e.contains("dim mismatch for B")));
    }

    #[test]
    fn manifest_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"{"cities": {"London": {"hex_origin": [-0.1, 51.5], "tasks": {"POP": "pop.csv", "AGE": "age.csv"}}},
                      "models": {"pe": {"dim": 192, "support": "coordinate_encoder"}}}"#;
        let p = write(dir.path(), "manifest.json", text);
        let m = Manifest::load(&p).unwrap();
        assert_eq!(m.task_path("London", Task::Pop), Some(dir.path().join("pop.csv")));
        assert_eq!(m.cities["London"].hex_origin, Some((-0.1, 51.5)));
        let rep = load_representation(&m, "pe", "London").unwrap();
        assert_eq!(rep.dim, 192);
    }
}
