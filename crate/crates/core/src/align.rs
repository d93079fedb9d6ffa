//! Alignment of native representation supports onto task units.
//!
//! Every routine returns an [`AlignedMatrix`]: one row per task unit plus a
//! validity mask. Rows that no source vector reaches are marked invalid and
//! never imputed.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::TaskDataset;
use crate::grid::{meters_per_degree, HexCell, HexGrid, Rect};
use crate::repr::{CellTableSupport, CoordinateEncoder, EntitySetSupport, RasterSupport, Representation, Support};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedMatrix {
    pub model_id: String,
    pub rows: Array2<f64>,
    pub valid: Vec<bool>,
    pub warnings: Vec<String>,
}

impl AlignedMatrix {
    fn empty(model_id: &str, n: usize, dim: usize) -> Self {
        AlignedMatrix {
            model_id: model_id.to_string(),
            rows: Array2::zeros((n, dim)),
            valid: vec![false; n],
            warnings: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    fn set(&mut self, i: usize, v: impl IntoIterator<Item = f64>) {
        for (dst, src) in self.rows.row_mut(i).iter_mut().zip(v) {
            *dst = src;
        }
        self.valid[i] = true;
    }
}

/// Fraction of units with a valid aligned row.
pub fn coverage(m: &AlignedMatrix) -> Result<f64> {
    if m.n() == 0 {
        return Err(Error::InvalidArgument("coverage of an empty matrix".into()));
    }
    Ok(m.n_valid() as f64 / m.n() as f64)
}

/// How entity sets reach task units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityAggregation {
    /// Pool into hex cells first, then match cells to units.
    #[default]
    H3First,
    /// Pool directly into each unit's extent.
    Direct,
}

/// Aligns any representation, dispatching on its support.
pub fn align(rep: &Representation, task: &TaskDataset, hex: &HexGrid, entities: EntityAggregation) -> Result<AlignedMatrix> {
    if rep.support.dim() != rep.dim {
        return Err(Error::DimMismatch {
            expected: rep.dim,
            actual: rep.support.dim(),
        });
    }
    let mut m = match &rep.support {
        Support::Raster(r) => align_raster(r, task),
        Support::CellTable(t) => align_cell_table(t, hex, task),
        Support::EntitySet(e) => match entities {
            EntityAggregation::H3First => align_entities_h3_first(e, hex, task),
            EntityAggregation::Direct => align_entities_direct(e, task),
        },
        Support::CoordinateEncoder(c) => align_coordinate_encoder(c.as_ref(), task),
    }?;
    m.model_id = rep.model_id.clone();
    Ok(m)
}

/// Raster sampling and aggregation.
///
/// Raster-cell units larger than a source cell take the mean of the valid
/// source cells whose centers fall inside them. Every other unit takes the
/// source cell containing its representative point, so all units inside one
/// coarse cell share that cell's vector.
pub fn align_raster(rep: &RasterSupport, task: &TaskDataset) -> Result<AlignedMatrix> {
    let mut m = AlignedMatrix::empty("", task.len(), rep.dim);
    let mut acc = vec![0.0f64; rep.dim];
    for (i, u) in task.units.iter().enumerate() {
        match u.cell_extent {
            Some(ext) if ext.area() > rep.cell_area() => {
                acc.iter_mut().for_each(|a| *a = 0.0);
                let mut count = 0usize;
                let (c_lo, c_hi) = center_index_range(ext.x0, ext.x1, rep.x0, rep.dx, rep.ncols);
                let (r_lo, r_hi) = center_index_range(ext.y0, ext.y1, rep.y0, rep.dy, rep.nrows);
                for row in r_lo..r_hi {
                    for col in c_lo..c_hi {
                        let (cx, cy) = rep.cell_center(col, row);
                        if !ext.contains_half_open(cx, cy) {
                            continue;
                        }
                        if let Some(v) = rep.vector(col, row) {
                            acc.iter_mut().zip(v).for_each(|(a, &x)| *a += x as f64);
                            count += 1;
                        }
                    }
                }
                if count > 0 {
                    let n = count as f64;
                    m.set(i, acc.iter().map(|a| a / n));
                }
            }
            _ => {
                if let Some(v) = rep.cell_at(u.lon, u.lat).and_then(|(c, r)| rep.vector(c, r)) {
                    m.set(i, v.iter().map(|&x| x as f64));
                }
            }
        }
    }
    Ok(m)
}

/// Indices of raster cells whose centers may fall in `[lo, hi)`, clamped.
fn center_index_range(lo: f64, hi: f64, origin: f64, step: f64, n: usize) -> (usize, usize) {
    let first = ((lo - origin) / step - 0.5).ceil().max(0.0);
    let last = ((hi - origin) / step - 0.5).ceil().max(0.0);
    ((first as usize).min(n), (last as usize).min(n))
}

/// Coordinate encoders are queried at each unit's representative point.
pub fn align_coordinate_encoder(enc: &dyn CoordinateEncoder, task: &TaskDataset) -> Result<AlignedMatrix> {
    let mut m = AlignedMatrix::empty("", task.len(), enc.dim());
    for (i, u) in task.units.iter().enumerate() {
        let v = enc.encode(u.lon, u.lat);
        if v.len() != enc.dim() {
            return Err(Error::DimMismatch {
                expected: enc.dim(),
                actual: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("encoder {} at unit {}", enc.id(), u.unit_id)));
        }
        m.set(i, v);
    }
    Ok(m)
}

/// Lookup of each unit's containing hex cell in a keyed table.
pub fn align_cell_table(rep: &CellTableSupport, hex: &HexGrid, task: &TaskDataset) -> Result<AlignedMatrix> {
    let mut m = AlignedMatrix::empty("", task.len(), rep.dim);
    for (i, u) in task.units.iter().enumerate() {
        if let Some(v) = hex.hex_cell_of(u.lon, u.lat).ok().and_then(|c| rep.cells.get(&c)) {
            m.set(i, v.iter().copied());
        }
    }
    Ok(m)
}

/// Mean-pools entity vectors per hex cell.
pub fn pool_entities_to_hex(rep: &EntitySetSupport, hex: &HexGrid) -> (BTreeMap<HexCell, Vec<f64>>, usize) {
    let mut sums: BTreeMap<HexCell, (Vec<f64>, usize)> = BTreeMap::new();
    let mut dropped = 0usize;
    for e in &rep.entities {
        let Ok(cell) = hex.hex_cell_of(e.lon, e.lat) else {
            dropped += 1;
            continue;
        };
        let slot = sums.entry(cell).or_insert_with(|| (vec![0.0; rep.dim], 0));
        slot.0.iter_mut().zip(&e.vector).for_each(|(a, b)| *a += b);
        slot.1 += 1;
    }
    let pooled = sums
        .into_iter()
        .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    (pooled, dropped)
}

/// Entities pooled into hex cells, then hex cells matched to units.
///
/// Units whose extent is larger than one hex cell take the mean of the
/// non-empty cells they touch (probed on a half-edge lattice); all other
/// units take their containing cell.
pub fn align_entities_h3_first(rep: &EntitySetSupport, hex: &HexGrid, task: &TaskDataset) -> Result<AlignedMatrix> {
    let mut m = AlignedMatrix::empty("", task.len(), rep.dim);
    if rep.entities.is_empty() {
        m.warnings.push("empty entity set: every unit is invalid".into());
        return Ok(m);
    }
    let (pooled, dropped) = pool_entities_to_hex(rep, hex);
    if dropped > 0 {
        m.warnings.push(format!("{dropped} entities lie outside the hex projection radius"));
    }
    let hex_area = hex.cell_area_m2();
    for (i, u) in task.units.iter().enumerate() {
        match u.cell_extent {
            Some(ext) if area_m2(&ext) > hex_area => {
                let cells = touched_cells(&ext, hex);
                let hits: Vec<&Vec<f64>> = cells.iter().filter_map(|c| pooled.get(c)).collect();
                if !hits.is_empty() {
                    let n = hits.len() as f64;
                    let mean = (0..rep.dim).map(|k| hits.iter().map(|v| v[k]).sum::<f64>() / n);
                    m.set(i, mean);
                }
            }
            _ => {
                if let Some(v) = hex.hex_cell_of(u.lon, u.lat).ok().and_then(|c| pooled.get(&c)) {
                    m.set(i, v.iter().copied());
                }
            }
        }
    }
    Ok(m)
}

fn area_m2(r: &Rect) -> f64 {
    let (mx, my) = meters_per_degree(r.center().1);
    r.width() * mx * r.height() * my
}

fn touched_cells(ext: &Rect, hex: &HexGrid) -> std::collections::BTreeSet<HexCell> {
    let (mx, my) = meters_per_degree(ext.center().1);
    let step = hex.edge_len_m / 2.0;
    let nx = ((ext.width() * mx / step).ceil() as usize).max(1);
    let ny = ((ext.height() * my / step).ceil() as usize).max(1);
    let mut out = std::collections::BTreeSet::new();
    for j in 0..ny {
        let y = ext.y0 + (j as f64 + 0.5) * ext.height() / ny as f64;
        for i in 0..nx {
            let x = ext.x0 + (i as f64 + 0.5) * ext.width() / nx as f64;
            if let Ok(c) = hex.hex_cell_of(x, y) {
                out.insert(c);
            }
        }
    }
    out
}

/// Entities pooled straight into each unit's own extent.
///
/// Units without an extent have no containment region and stay invalid.
pub fn align_entities_direct(rep: &EntitySetSupport, task: &TaskDataset) -> Result<AlignedMatrix> {
    let mut m = AlignedMatrix::empty("", task.len(), rep.dim);
    if rep.entities.is_empty() {
        m.warnings.push("empty entity set: every unit is invalid".into());
        return Ok(m);
    }
    let index = PointBuckets::new(rep.entities.iter().map(|e| (e.lon, e.lat)).collect());
    let mut acc = vec![0.0; rep.dim];
    let mut hits = Vec::new();
    for (i, u) in task.units.iter().enumerate() {
        let Some(ext) = u.cell_extent else { continue };
        hits.clear();
        index.query(&ext, &mut hits);
        if hits.is_empty() {
            continue;
        }
        hits.sort_unstable();
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &h in &hits {
            acc.iter_mut().zip(&rep.entities[h].vector).for_each(|(a, b)| *a += b);
        }
        let n = hits.len() as f64;
        m.set(i, acc.iter().map(|a| a / n));
    }
    Ok(m)
}

/// Uniform bucket index over points for half-open rectangle queries.
struct PointBuckets {
    points: Vec<(f64, f64)>,
    bounds: Rect,
    side: usize,
    buckets: Vec<Vec<usize>>,
}

impl PointBuckets {
    fn new(points: Vec<(f64, f64)>) -> Self {
        let bounds = Rect::bounding(points.iter().copied()).unwrap_or(Rect {
            x0: 0.0,
            y0: 0.0,
            x1: 0.0,
            y1: 0.0,
        });
        let side = ((points.len() as f64 / 4.0).sqrt().ceil() as usize).clamp(1, 1024);
        let mut buckets = vec![Vec::new(); side * side];
        let mut me = PointBuckets {
            points,
            bounds,
            side,
            buckets: Vec::new(),
        };
        for (i, &(x, y)) in me.points.iter().enumerate() {
            let (bx, by) = (me.bucket_x(x), me.bucket_y(y));
            buckets[by * side + bx].push(i);
        }
        me.buckets = buckets;
        me
    }

    fn bucket_x(&self, x: f64) -> usize {
        bucket(x, self.bounds.x0, self.bounds.x1, self.side)
    }

    fn bucket_y(&self, y: f64) -> usize {
        bucket(y, self.bounds.y0, self.bounds.y1, self.side)
    }

    fn query(&self, r: &Rect, out: &mut Vec<usize>) {
        if r.x1 < self.bounds.x0 || r.x0 > self.bounds.x1 || r.y1 < self.bounds.y0 || r.y0 > self.bounds.y1 {
            return;
        }
        for by in self.bucket_y(r.y0)..=self.bucket_y(r.y1) {
            for bx in self.bucket_x(r.x0)..=self.bucket_x(r.x1) {
                for &i in &self.buckets[by * self.side + bx] {
                    let (x, y) = self.points[i];
                    if r.contains_half_open(x, y) {
                        out.push(i);
                    }
                }
            }
        }
    }
}

fn bucket(v: f64, lo: f64, hi: f64, n: usize) -> usize {
    if !(hi > lo) || v <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo) * n as f64) as usize).min(n - 1)
}
