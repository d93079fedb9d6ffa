//! Embedding representations and their spatial supports.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::grid::{HexCell, Rect};
use crate::{Error, Result};

/// A function from longitude/latitude to an embedding vector.
pub trait CoordinateEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, lon: f64, lat: f64) -> Vec<f64>;
}

/// Regular raster of embeddings, row-major with rows running north from
/// `(x0, y0)`. A cell with any NaN component is invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterSupport {
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
    pub ncols: usize,
    pub nrows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl RasterSupport {
    /// Arguments follow the `.erf` header order.
    #[allow(clippy::too_many_arguments)]
    pub fn new(x0: f64, y0: f64, dx: f64, dy: f64, ncols: usize, nrows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if !(dx > 0.0 && dy > 0.0) || !x0.is_finite() || !y0.is_finite() {
            return Err(Error::Validation(format!("raster needs positive cell sizes, got dx={dx} dy={dy}")));
        }
        if ncols == 0 || nrows == 0 || dim == 0 {
            return Err(Error::Validation(format!("raster shape {ncols}x{nrows}x{dim} is empty")));
        }
        let want = ncols * nrows * dim;
        if data.len() != want {
            return Err(Error::Validation(format!(
                "raster holds {} values, shape {ncols}x{nrows}x{dim} needs {want}",
                data.len()
            )));
        }
        Ok(RasterSupport {
            x0,
            y0,
            dx,
            dy,
            ncols,
            nrows,
            dim,
            data,
        })
    }

    pub fn bounds(&self) -> Rect {
        Rect {
            x0: self.x0,
            y0: self.y0,
            x1: self.x0 + self.dx * self.ncols as f64,
            y1: self.y0 + self.dy * self.nrows as f64,
        }
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    /// `(col, row)` of the cell containing the point, half-open per cell.
    pub fn cell_at(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.x0) / self.dx).floor();
        let r = ((y - self.y0) / self.dy).floor();
        if c < 0.0 || r < 0.0 || c >= self.ncols as f64 || r >= self.nrows as f64 || c.is_nan() || r.is_nan() {
            return None;
        }
        Some((c as usize, r as usize))
    }

    pub fn cell_center(&self, col: usize, row: usize) -> (f64, f64) {
        (self.x0 + (col as f64 + 0.5) * self.dx, self.y0 + (row as f64 + 0.5) * self.dy)
    }

    /// Vector of a cell, or `None` when any component is NaN.
    pub fn vector(&self, col: usize, row: usize) -> Option<&[f32]> {
        let off = (row * self.ncols + col) * self.dim;
        let v = &self.data[off..off + self.dim];
        if v.iter().any(|x| x.is_nan()) {
            None
        } else {
            Some(v)
        }
    }
}

/// Embeddings keyed by hexagonal cell.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CellTableSupport {
    pub dim: usize,
    pub cells: BTreeMap<HexCell, Vec<f64>>,
}

impl CellTableSupport {
    /// Builds the table, rejecting duplicate keys and ragged vectors.
    pub fn from_entries(dim: usize, entries: impl IntoIterator<Item = (HexCell, Vec<f64>)>) -> Result<Self> {
        let mut cells = BTreeMap::new();
        for (k, v) in entries {
            if v.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            if cells.insert(k, v).is_some() {
                return Err(Error::Validation(format!("duplicate cell key {k}")));
            }
        }
        Ok(CellTableSupport { dim, cells })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub lon: f64,
    pub lat: f64,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EntitySetSupport {
    pub dim: usize,
    pub entities: Vec<Entity>,
}

impl EntitySetSupport {
    pub fn new(dim: usize, entities: Vec<Entity>) -> Result<Self> {
        if let Some(e) = entities.iter().find(|e| e.vector.len() != dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: e.vector.len(),
            });
        }
        Ok(EntitySetSupport { dim, entities })
    }
}

#[derive(Clone)]
pub enum Support {
    Raster(RasterSupport),
    CellTable(CellTableSupport),
    EntitySet(EntitySetSupport),
    CoordinateEncoder(Arc<dyn CoordinateEncoder>),
}

impl Support {
    pub fn kind(&self) -> SupportKind {
        match self {
            Support::Raster(_) => SupportKind::Raster,
            Support::CellTable(_) => SupportKind::CellTable,
            Support::EntitySet(_) => SupportKind::EntitySet,
            Support::CoordinateEncoder(_) => SupportKind::CoordinateEncoder,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Support::Raster(r) => r.dim,
            Support::CellTable(t) => t.dim,
            Support::EntitySet(e) => e.dim,
            Support::CoordinateEncoder(c) => c.dim(),
        }
    }
}

impl fmt::Debug for Support {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Support::Raster(r) => write!(f, "Raster({}x{}x{})", r.ncols, r.nrows, r.dim),
            Support::CellTable(t) => write!(f, "CellTable({} cells, dim {})", t.cells.len(), t.dim),
            Support::EntitySet(e) => write!(f, "EntitySet({} entities, dim {})", e.entities.len(), e.dim),
            Support::CoordinateEncoder(c) => write!(f, "CoordinateEncoder({})", c.id()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportKind {
    Raster,
    CellTable,
    EntitySet,
    CoordinateEncoder,
}

/// An embedding of one city by one model on its native support.
#[derive(Debug, Clone)]
pub struct Representation {
    pub model_id: String,
    pub dim: usize,
    pub support: Support,
}

impl Representation {
    pub fn new(model_id: impl Into<String>, dim: usize, support: Support) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("representation dimension must be positive".into()));
        }
        if support.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: support.dim(),
            });
        }
        Ok(Representation {
            model_id: model_id.into(),
            dim,
            support,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_shape_validated() {
        assert!(RasterSupport::new(0.0, 0.0, 1.0, 1.0, 2, 2, 1, vec![0.0; 3]).is_err());
        assert!(RasterSupport::new(0.0, 0.0, 0.0, 1.0, 2, 2, 1, vec![0.0; 4]).is_err());
        let r = RasterSupport::new(0.0, 0.0, 1.0, 1.0, 2, 2, 1, vec![0.0, 1.0, f32::NAN, 3.0]).unwrap();
        assert_eq!(r.cell_at(1.5, 0.2), Some((1, 0)));
        assert_eq!(r.cell_at(2.0, 0.2), None);
        assert!(r.vector(0, 1).is_none());
        assert_eq!(r.vector(1, 1), Some(&[3.0f32][..]));
    }

    #[test]
    fn cell_table_rejects_collisions() {
        let c = HexCell::new(1, 1);
        assert!(CellTableSupport::from_entries(1, [(c, vec![1.0]), (c, vec![2.0])]).is_err());
    }

    #[test]
    fn dim_must_agree() {
        let t = CellTableSupport::from_entries(2, [(HexCell::new(0, 0), vec![1.0, 2.0])]).unwrap();
        assert!(Representation::new("m", 3, Support::CellTable(t.clone())).is_err());
        assert!(Representation::new("m", 2, Support::CellTable(t)).is_ok());
    }
}
