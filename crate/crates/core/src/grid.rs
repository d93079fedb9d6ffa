//! Block grids for spatial splitting and a hexagonal intermediate support.
//!
//! All coordinates enter as WGS84 degrees. Block grids are axis-aligned in
//! degrees over a task extent. The hexagonal grid lives in a local
//! azimuthal-equidistant plane about a per-city anchor and stands in for
//! resolution-8 H3 cells: same mean edge length, no hierarchy.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Mean spherical earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Mean edge length of an H3 resolution-8 cell, in meters.
pub const H3_RES8_EDGE_M: f64 = 461.0;

/// Projection validity radius for [`HexGrid`].
pub const HEX_VALIDITY_RADIUS_M: f64 = 500_000.0;

/// Axis-aligned rectangle in degrees: `[x0, x1] x [y0, y1]` (lon, lat).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let r = Rect { x0, y0, x1, y1 };
        if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite rectangle {r:?}")));
        }
        if x1 < x0 || y1 < y0 {
            return Err(Error::InvalidArgument(format!("inverted rectangle {r:?}")));
        }
        Ok(r)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    /// Closed containment.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    /// Half-open containment `[x0, x1) x [y0, y1)`.
    pub fn contains_half_open(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        self.contains(other.x0, other.y0) && self.contains(other.x1, other.y1)
    }

    pub fn union(&self, other: &Rect) -> Rect {
        Rect {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    /// Smallest rectangle holding every point; `None` for an empty iterator.
    pub fn bounding<I: IntoIterator<Item = (f64, f64)>>(points: I) -> Option<Rect> {
        points.into_iter().fold(None, |acc, (x, y)| {
            let p = Rect {
                x0: x,
                y0: y,
                x1: x,
                y1: y,
            };
            Some(match acc {
                None => p,
                Some(r) => r.union(&p),
            })
        })
    }
}

/// Identifier of a block in a [`BlockGrid`], `row * nx + col`.
pub type BlockId = u32;

/// A regular `nx x ny` partition of an extent in degrees.
///
/// Blocks are half-open `[x0, x1) x [y0, y1)`; the global max edges are
/// closed so every point of the extent lands in exactly one block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockGrid {
    pub extent: Rect,
    pub nx: u32,
    pub ny: u32,
}

pub fn build_block_grid(extent: Rect, nx: u32, ny: u32) -> Result<BlockGrid> {
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument(format!("block grid needs nx, ny >= 1 (got {nx}x{ny})")));
    }
    if extent.is_degenerate() {
        return Err(Error::InvalidArgument(format!("zero-area extent {extent:?}")));
    }
    Ok(BlockGrid { extent, nx, ny })
}

impl BlockGrid {
    pub fn block_count(&self) -> u32 {
        self.nx * self.ny
    }

    /// Column and row of the block holding `(x, y)`; points outside the
    /// extent are clamped onto its boundary.
    pub fn col_row(&self, x: f64, y: f64) -> (u32, u32) {
        (
            axis_index(x, self.extent.x0, self.extent.x1, self.nx),
            axis_index(y, self.extent.y0, self.extent.y1, self.ny),
        )
    }

    pub fn block_of(&self, x: f64, y: f64) -> BlockId {
        let (c, r) = self.col_row(x, y);
        r * self.nx + c
    }

    pub fn block_rect(&self, id: BlockId) -> Rect {
        let (c, r) = (id % self.nx, id / self.nx);
        let w = self.extent.width() / self.nx as f64;
        let h = self.extent.height() / self.ny as f64;
        Rect {
            x0: self.extent.x0 + c as f64 * w,
            y0: self.extent.y0 + r as f64 * h,
            x1: if c + 1 == self.nx {
                self.extent.x1
            } else {
                self.extent.x0 + (c + 1) as f64 * w
            },
            y1: if r + 1 == self.ny {
                self.extent.y1
            } else {
                self.extent.y0 + (r + 1) as f64 * h
            },
        }
    }

    /// Compact textual form recorded in run metadata and split caches.
    pub fn describe(&self) -> String {
        let e = &self.extent;
        format!("{}x{}@{},{},{},{}", self.nx, self.ny, e.x0, e.y0, e.x1, e.y1)
    }
}

fn axis_index(v: f64, lo: f64, hi: f64, n: u32) -> u32 {
    if !(v > lo) {
        return 0;
    }
    if v >= hi {
        return n - 1;
    }
    // multiply before dividing so lattice boundaries on integral extents are exact
    let i = ((v - lo) * n as f64 / (hi - lo)).floor();
    (i as u32).min(n - 1)
}

/// Block id of a unit's representative point.
pub fn assign_block(unit: &crate::dataset::TaskUnit, grid: &BlockGrid) -> BlockId {
    grid.block_of(unit.lon, unit.lat)
}

/// Spherical azimuthal-equidistant projection about an anchor point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalProjection {
    pub origin_lon: f64,
    pub origin_lat: f64,
}

impl LocalProjection {
    pub fn new(origin_lon: f64, origin_lat: f64) -> Self {
        LocalProjection { origin_lon, origin_lat }
    }

    /// Degrees to meters east/north of the anchor.
    pub fn forward(&self, lon: f64, lat: f64) -> (f64, f64) {
        let (phi0, lam0) = (self.origin_lat.to_radians(), self.origin_lon.to_radians());
        let (phi, lam) = (lat.to_radians(), lon.to_radians());
        let dl = lam - lam0;
        let a = phi.cos() * dl.sin();
        let b = phi0.cos() * phi.sin() - phi0.sin() * phi.cos() * dl.cos();
        let cos_c = phi0.sin() * phi.sin() + phi0.cos() * phi.cos() * dl.cos();
        let sin_c = a.hypot(b);
        let c = sin_c.atan2(cos_c);
        let k = if sin_c < 1e-15 { 1.0 } else { c / sin_c };
        (EARTH_RADIUS_M * k * a, EARTH_RADIUS_M * k * b)
    }

    /// Meters east/north of the anchor back to degrees.
    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let rho = x.hypot(y);
        if rho < 1e-12 {
            return (self.origin_lon, self.origin_lat);
        }
        let (phi0, lam0) = (self.origin_lat.to_radians(), self.origin_lon.to_radians());
        let c = rho / EARTH_RADIUS_M;
        let (sin_c, cos_c) = c.sin_cos();
        let phi = (cos_c * phi0.sin() + y * sin_c * phi0.cos() / rho).clamp(-1.0, 1.0).asin();
        let lam = lam0 + (x * sin_c).atan2(rho * phi0.cos() * cos_c - y * phi0.sin() * sin_c);
        let mut lon = lam.to_degrees();
        if lon > 180.0 {
            lon -= 360.0;
        } else if lon < -180.0 {
            lon += 360.0;
        }
        (lon, phi.to_degrees())
    }
}

/// Axial coordinates of a pointy-top hexagon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HexCell {
    pub q: i32,
    pub r: i32,
}

impl HexCell {
    pub fn new(q: i32, r: i32) -> Self {
        HexCell { q, r }
    }

    pub fn neighbors(&self) -> [HexCell; 6] {
        const D: [(i32, i32); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];
        D.map(|(dq, dr)| HexCell::new(self.q + dq, self.r + dr))
    }
}

impl std::fmt::Display for HexCell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.q, self.r)
    }
}

impl std::str::FromStr for HexCell {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed hex cell key {s:?}, expected q:r"));
        let (q, r) = s.trim().split_once(':').ok_or_else(bad)?;
        Ok(HexCell::new(q.parse().map_err(|_| bad())?, r.parse().map_err(|_| bad())?))
    }
}

/// Hexagonal tessellation of a local projected plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HexGrid {
    pub projection: LocalProjection,
    pub edge_len_m: f64,
}

impl HexGrid {
    pub fn new(origin_lon: f64, origin_lat: f64, edge_len_m: f64) -> Result<Self> {
        if !(edge_len_m > 0.0) || !edge_len_m.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "hex edge length must be positive, got {edge_len_m}"
            )));
        }
        Ok(HexGrid {
            projection: LocalProjection::new(origin_lon, origin_lat),
            edge_len_m,
        })
    }

    /// Resolution-8 stand-in anchored at `(lon, lat)`.
    pub fn res8(origin_lon: f64, origin_lat: f64) -> Self {
        Self::new(origin_lon, origin_lat, H3_RES8_EDGE_M).expect("positive edge length")
    }

    /// Area of one hexagon in square meters.
    pub fn cell_area_m2(&self) -> f64 {
        1.5 * 3f64.sqrt() * self.edge_len_m * self.edge_len_m
    }

    pub fn center_xy(&self, cell: HexCell) -> (f64, f64) {
        let s = self.edge_len_m;
        let (q, r) = (cell.q as f64, cell.r as f64);
        (s * 3f64.sqrt() * (q + 0.5 * r), s * 1.5 * r)
    }

    pub fn cell_center(&self, cell: HexCell) -> (f64, f64) {
        let (x, y) = self.center_xy(cell);
        self.projection.inverse(x, y)
    }

    /// Hexagon whose center is nearest to the projected point.
    pub fn cell_of_xy(&self, x: f64, y: f64) -> HexCell {
        let s = self.edge_len_m;
        let fq = (3f64.sqrt() / 3.0 * x - y / 3.0) / s;
        let fr = (2.0 / 3.0 * y) / s;
        cube_round(fq, fr)
    }

    pub fn hex_cell_of(&self, lon: f64, lat: f64) -> Result<HexCell> {
        let (x, y) = self.projection.forward(lon, lat);
        if x.hypot(y) > HEX_VALIDITY_RADIUS_M || !x.is_finite() || !y.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "point ({lon}, {lat}) lies beyond {} km of the hex grid anchor",
                HEX_VALIDITY_RADIUS_M / 1000.0
            )));
        }
        Ok(self.cell_of_xy(x, y))
    }
}

/// Free-function form of [`HexGrid::hex_cell_of`].
pub fn hex_cell_of(lon: f64, lat: f64, grid: &HexGrid) -> Result<HexCell> {
    grid.hex_cell_of(lon, lat)
}

fn cube_round(fq: f64, fr: f64) -> HexCell {
    let fs = -fq - fr;
    let (mut q, mut r, s) = (fq.round(), fr.round(), fs.round());
    let (dq, dr, ds) = ((q - fq).abs(), (r - fr).abs(), (s - fs).abs());
    if dq > dr && dq > ds {
        q = -r - s;
    } else if dr > ds {
        r = -q - s;
    }
    HexCell::new(q as i32, r as i32)
}

/// Approximate meters per degree of longitude and latitude at `lat`.
pub fn meters_per_degree(lat: f64) -> (f64, f64) {
    let m = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
    (m * lat.to_radians().cos(), m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_grid(n: u32) -> BlockGrid {
        build_block_grid(Rect::new(0.0, 0.0, 10.0, 10.0).unwrap(), n, n).unwrap()
    }

    #[test]
    fn ten_by_ten_has_unit_blocks() {
        let g = unit_grid(10);
        assert_eq!(g.block_count(), 100);
        for id in 0..100 {
            let r = g.block_rect(id);
            assert_eq!(r.width(), 1.0);
            assert_eq!(r.height(), 1.0);
        }
    }

    #[test]
    fn single_block_equals_extent() {
        let g = unit_grid(1);
        assert_eq!(g.block_count(), 1);
        assert_eq!(g.block_rect(0), g.extent);
    }

    #[test]
    fn twenty_by_twenty_has_half_unit_blocks() {
        let g = unit_grid(20);
        assert_eq!(g.block_count(), 400);
        assert_eq!(g.block_rect(57).width(), 0.5);
        assert_eq!(g.block_rect(399).height(), 0.5);
    }

    #[test]
    fn zero_area_extent_rejected() {
        let e = Rect::new(0.0, 0.0, 0.0, 5.0).unwrap();
        assert!(build_block_grid(e, 10, 10).is_err());
        assert!(build_block_grid(Rect::new(0.0, 0.0, 1.0, 1.0).unwrap(), 0, 3).is_err());
    }

    #[test]
    fn containment_and_boundaries() {
        let g = unit_grid(10);
        assert_eq!(g.col_row(3.5, 7.2), (3, 7));
        assert_eq!(g.col_row(4.0, 0.5), (4, 0));
        assert_eq!(g.block_of(10.0, 10.0), 99);
        assert_eq!(g.block_of(0.0, 0.0), 0);
        // clamped
        assert_eq!(g.block_of(-3.0, 11.0), 90);
    }

    #[test]
    fn hex_neighbor_spacing() {
        let h = HexGrid::res8(0.0, 0.0);
        let c = HexCell::new(3, -2);
        let (x, y) = h.center_xy(c);
        for n in c.neighbors() {
            let (nx, ny) = h.center_xy(n);
            let d = (nx - x).hypot(ny - y);
            assert!((d - 3f64.sqrt() * 461.0).abs() < 1e-9, "{d}");
        }
    }

    #[test]
    fn hex_center_is_fixed_point() {
        let h = HexGrid::res8(103.8, 1.35);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let c = HexCell::new(rng.random_range(-200..200), rng.random_range(-200..200));
            let (lon, lat) = h.cell_center(c);
            assert_eq!(h.hex_cell_of(lon, lat).unwrap(), c);
        }
    }

    #[test]
    fn hex_matches_brute_force_nearest_center() {
        let h = HexGrid::new(-0.12, 51.5, 461.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let (x, y) = (rng.random_range(-20_000.0..20_000.0), rng.random_range(-20_000.0..20_000.0));
            let got = h.cell_of_xy(x, y);
            // brute force over a window of candidates around the approximate axial position
            let r0 = (y / (1.5 * 461.0)).round() as i32;
            let q0 = (x / (3f64.sqrt() * 461.0) - 0.5 * r0 as f64).round() as i32;
            let mut best = (f64::INFINITY, HexCell::new(0, 0));
            for dq in -3..=3 {
                for dr in -3..=3 {
                    let c = HexCell::new(q0 + dq, r0 + dr);
                    let (cx, cy) = h.center_xy(c);
                    let d = (cx - x).hypot(cy - y);
                    if d < best.0 {
                        best = (d, c);
                    }
                }
            }
            let (gx, gy) = h.center_xy(got);
            assert!(((gx - x).hypot(gy - y) - best.0).abs() < 1e-9);
            assert!(best.0 <= 461.0 + 1e-9);
        }
    }

    #[test]
    fn points_near_center_share_cell() {
        let h = HexGrid::res8(10.0, 45.0);
        let c = HexCell::new(7, 4);
        let (cx, cy) = h.center_xy(c);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let rad = rng.random_range(0.0..461.0 / 2.0);
            let (lon, lat) = h.projection.inverse(cx + rad * ang.cos(), cy + rad * ang.sin());
            assert_eq!(h.hex_cell_of(lon, lat).unwrap(), c);
        }
    }

    #[test]
    fn far_points_rejected() {
        let h = HexGrid::res8(0.0, 0.0);
        assert!(h.hex_cell_of(10.0, 0.0).is_err());
    }

    #[test]
    fn projection_round_trip() {
        let p = LocalProjection::new(151.2, -33.87);
        for &(lon, lat) in &[(151.2, -33.87), (151.5, -33.6), (150.9, -34.1)] {
            let (x, y) = p.forward(lon, lat);
            let (l2, t2) = p.inverse(x, y);
            assert!((l2 - lon).abs() < 1e-10 && (t2 - lat).abs() < 1e-10);
        }
    }

    #[test]
    fn hex_cell_key_parses() {
        let c: HexCell = "-4:17".parse().unwrap();
        assert_eq!(c, HexCell::new(-4, 17));
        assert_eq!(c.to_string(), "-4:17");
        assert!("4;17".parse::<HexCell>().is_err());
    }

    proptest! {
        #[test]
        fn every_point_gets_one_valid_block(x in -5.0f64..15.0, y in -5.0f64..15.0, n in 1u32..25) {
            let g = unit_grid(n);
            let id = g.block_of(x, y);
            prop_assert!(id < g.block_count());
            if g.extent.contains(x, y) {
                let r = g.block_rect(id);
                prop_assert!(r.contains(x, y));
            }
        }

        #[test]
        fn hex_assignment_within_edge(x in -100_000.0f64..100_000.0, y in -100_000.0f64..100_000.0) {
            let h = HexGrid::res8(2.35, 48.85);
            let c = h.cell_of_xy(x, y);
            let (cx, cy) = h.center_xy(c);
            prop_assert!((cx - x).hypot(cy - y) <= 461.0 + 1e-9);
        }
    }
}
