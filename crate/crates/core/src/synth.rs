//! Synthetic cities with spatially autocorrelated labels.
//!
//! A field is white noise smoothed by a Gaussian kernel and standardized.
//! Task units sit at the centers of an `n x n` raster over the extent and
//! take labels derived from the field; the representation is drawn from the
//! same field according to the embedding kind.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::align::{align, EntityAggregation};
use crate::dataset::{write_task_dataset, Label, Task, TaskDataset, TaskUnit};
use crate::grid::{build_block_grid, HexGrid, Rect};
use crate::heads::{HeadConfig, HeadKind};
use crate::manifest::{CityEntry, Manifest, ModelEntry};
use crate::metrics::Metric;
use crate::pe::PeEncoder;
use crate::repr::{Entity, EntitySetSupport, RasterSupport, Representation, Support};
use crate::runner::evaluate;
use crate::split::{context_rng, random_split, spatial_split, DEFAULT_TEST_FRAC, DEFAULT_VAL_FRAC};
use crate::{Error, Result};

/// Meters per degree at the equator on the mean-radius sphere.
const METERS_PER_DEGREE: f64 = 111_195.08;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthLabel {
    Scalar,
    Class { classes: usize },
    Distribution { bins: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthEmbedding {
    /// The field value replicated across `dim`, as a raster.
    FieldValue,
    /// Field value plus i.i.d. Gaussian noise per component, as a raster.
    FieldPlusNoise,
    /// The built-in position encoder.
    CoordinatePe,
    /// One entity per kept cell at a uniform position inside it.
    SparseEntities { density: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub city: String,
    pub extent: Rect,
    pub n: usize,
    /// Kernel standard deviation in extent units.
    pub length_scale: f64,
    #[serde(default)]
    pub noise_sd: f64,
    pub label: SynthLabel,
    pub embedding: SynthEmbedding,
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub seed: u64,
}

fn default_dim() -> usize {
    8
}

impl SynthConfig {
    /// A square city of `n x n` cells of `cell_m` meters centered on
    /// `(lon, lat)`, with a scalar label and the field-value embedding.
    pub fn square(city: impl Into<String>, n: usize, cell_m: f64, center: (f64, f64), length_scale_cells: f64, seed: u64) -> SynthConfig {
        let half_x = n as f64 * cell_m / 2.0 / (METERS_PER_DEGREE * center.1.to_radians().cos());
        let half_y = n as f64 * cell_m / 2.0 / METERS_PER_DEGREE;
        let extent = Rect {
            x0: center.0 - half_x,
            y0: center.1 - half_y,
            x1: center.0 + half_x,
            y1: center.1 + half_y,
        };
        SynthConfig {
            city: city.into(),
            extent,
            n,
            length_scale: length_scale_cells * extent.width() / n as f64,
            noise_sd: 0.0,
            label: SynthLabel::Scalar,
            embedding: SynthEmbedding::FieldValue,
            dim: default_dim(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n < 8 {
            return bad(format!("synthetic grid needs n >= 8, got {}", self.n));
        }
        if !(self.length_scale > 0.0) {
            return bad(format!("length scale must be positive, got {}", self.length_scale));
        }
        if !(self.noise_sd >= 0.0) || self.dim == 0 || self.extent.is_degenerate() {
            return bad(format!("invalid synthetic config for {}", self.city));
        }
        match self.label {
            SynthLabel::Class { classes: c } | SynthLabel::Distribution { bins: c } if c < 2 => {
                return bad("need at least 2 classes or bins".into())
            }
            _ => {}
        }
        if let SynthEmbedding::SparseEntities { density } = self.embedding {
            if !(density > 0.0 && density <= 1.0) {
                return bad(format!("density must lie in (0, 1], got {density}"));
            }
        }
        Ok(())
    }

    /// Kernel standard deviation in cells.
    pub fn length_scale_cells(&self) -> f64 {
        self.length_scale / self.cell_width()
    }

    pub fn cell_width(&self) -> f64 {
        self.extent.width() / self.n as f64
    }

    pub fn cell_height(&self) -> f64 {
        self.extent.height() / self.n as f64
    }

    pub fn task(&self) -> Task {
        match self.label {
            SynthLabel::Scalar => Task::Pop,
            SynthLabel::Class { .. } => Task::Luc,
            SynthLabel::Distribution { .. } => Task::Age,
        }
    }

    pub fn model_id(&self) -> &'static str {
        match self.embedding {
            SynthEmbedding::FieldValue => "field_value",
            SynthEmbedding::FieldPlusNoise => "field_plus_noise",
            SynthEmbedding::CoordinatePe => crate::pe::PE_ENCODER_ID,
            SynthEmbedding::SparseEntities { .. } => "sparse_entities",
        }
    }
}

/// Standardized field on an `n x n` grid, row 0 at the southern edge.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub extent: Rect,
    pub n: usize,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.n + col]
    }

    pub fn cell_rect(&self, col: usize, row: usize) -> Rect {
        let (w, h) = (self.extent.width() / self.n as f64, self.extent.height() / self.n as f64);
        Rect {
            x0: self.extent.x0 + col as f64 * w,
            y0: self.extent.y0 + row as f64 * h,
            x1: self.extent.x0 + (col + 1) as f64 * w,
            y1: self.extent.y0 + (row + 1) as f64 * h,
        }
    }
}

/// Mirror index with period `2n`: `-1 -> 0`, `n -> n - 1`.
fn reflect(i: i64, n: usize) -> usize {
    let p = 2 * n as i64;
    let j = i.rem_euclid(p) as usize;
    if j < n {
        j
    } else {
        2 * n - 1 - j
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn convolve_axis(src: &[f64], n: usize, kernel: &[f64], along_rows: bool) -> Vec<f64> {
    let radius = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let off = k as i64 - radius;
                let (rr, cc) = if along_rows {
                    (r, reflect(c as i64 + off, n))
                } else {
                    (reflect(r as i64 + off, n), c)
                };
                acc += w * src[rr * n + cc];
            }
            out[r * n + c] = acc;
        }
    }
    out
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    for x in v.iter_mut() {
        *x = if sd > 0.0 { (*x - m) / sd } else { 0.0 };
    }
}

/// White noise convolved with a separable Gaussian of standard deviation
/// `length_scale` (extent units, reflect-padded), standardized to mean 0
/// and variance 1.
pub fn generate_field(extent: Rect, n: usize, length_scale: f64, seed: u64) -> Result<ScalarField> {
    if n < 8 {
        return Err(Error::InvalidArgument(format!("synthetic grid needs n >= 8, got {n}")));
    }
    if !(length_scale > 0.0) || extent.is_degenerate() {
        return Err(Error::InvalidArgument(
            "field needs a positive length scale and a nondegenerate extent".into(),
        ));
    }
    let mut rng = context_rng(&["field", &seed.to_string()]);
    let mut values: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let sigma = length_scale / (extent.width() / n as f64);
    let kernel = gaussian_kernel(sigma);
    if kernel.len() > 1 {
        values = convolve_axis(&values, n, &kernel, true);
        values = convolve_axis(&values, n, &kernel, false);
    }
    standardize(&mut values);
    Ok(ScalarField { extent, n, values })
}

/// Mean correlation between horizontally and vertically adjacent cells.
pub fn lag1_autocorrelation(f: &ScalarField) -> f64 {
    let n = f.n;
    let m = f.values.iter().sum::<f64>() / f.values.len() as f64;
    let var = f.values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / f.values.len() as f64;
    let (mut acc, mut pairs) = (0.0, 0usize);
    for r in 0..n {
        for c in 0..n {
            let a = f.at(c, r) - m;
            if c + 1 < n {
                acc += a * (f.at(c + 1, r) - m);
                pairs += 1;
            }
            if r + 1 < n {
                acc += a * (f.at(c, r + 1) - m);
                pairs += 1;
            }
        }
    }
    acc / pairs as f64 / var
}

/// Centers of the distribution bins, evenly spaced over `[-2, 2]`.
fn bin_centers(k: usize) -> Vec<f64> {
    (0..k).map(|i| -2.0 + 4.0 * i as f64 / (k - 1) as f64).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn labels_for(field: &ScalarField, kind: SynthLabel) -> Vec<Label> {
    match kind {
        SynthLabel::Scalar => field.values.iter().map(|&v| Label::Scalar(v)).collect(),
        SynthLabel::Class { classes } => {
            let mut order: Vec<usize> = (0..field.values.len()).collect();
            order.sort_by(|&a, &b| field.values[a].total_cmp(&field.values[b]).then(a.cmp(&b)));
            let n = order.len();
            let mut out = vec![Label::Class(0); n];
            for (rank, &i) in order.iter().enumerate() {
                out[i] = Label::Class(rank * classes / n);
            }
            out
        }
        SynthLabel::Distribution { bins } => {
            let centers = bin_centers(bins);
            field
                .values
                .iter()
                .map(|&f| Label::Distribution(softmax(&centers.iter().map(|c| -(f - c) * (f - c) / 2.0).collect::<Vec<_>>())))
                .collect()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCity {
    pub config: SynthConfig,
    pub field: ScalarField,
    pub task: TaskDataset,
    pub representation: Representation,
}

/// Builds the task dataset and representation for one configuration.
pub fn synth_city(cfg: &SynthConfig) -> Result<SynthCity> {
    cfg.validate()?;
    let field = generate_field(cfg.extent, cfg.n, cfg.length_scale, cfg.seed)?;
    let n = cfg.n;
    let units: Vec<TaskUnit> = (0..n * n)
        .map(|i| {
            let (row, col) = (i / n, i % n);
            TaskUnit::raster_cell(format!("c{row:04}_{col:04}"), field.cell_rect(col, row))
        })
        .collect();
    let n_classes = match cfg.label {
        SynthLabel::Class { classes } => Some(classes),
        _ => None,
    };
    let task = TaskDataset::new(
        cfg.city.clone(),
        cfg.task(),
        units,
        labels_for(&field, cfg.label),
        Some(cfg.extent),
        n_classes,
    )?;

    let seed = cfg.seed.to_string();
    let (dx, dy) = (cfg.cell_width(), cfg.cell_height());
    let support = match cfg.embedding {
        SynthEmbedding::FieldValue | SynthEmbedding::FieldPlusNoise => {
            let noisy = matches!(cfg.embedding, SynthEmbedding::FieldPlusNoise);
            let mut rng = context_rng(&["embedding-noise", &seed]);
            let mut data = Vec::with_capacity(n * n * cfg.dim);
            for &f in &field.values {
                for _ in 0..cfg.dim {
                    let e: f64 = if noisy {
                        cfg.noise_sd * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    data.push((f + e) as f32);
                }
            }
            Support::Raster(RasterSupport::new(cfg.extent.x0, cfg.extent.y0, dx, dy, n, n, cfg.dim, data)?)
        }
        SynthEmbedding::CoordinatePe => Support::CoordinateEncoder(Arc::new(PeEncoder::default())),
        SynthEmbedding::SparseEntities { density } => {
            let mut rng = context_rng(&["entities", &seed]);
            let mut entities = Vec::new();
            for row in 0..n {
                for col in 0..n {
                    if rng.random::<f64>() >= density {
                        continue;
                    }
                    let r = field.cell_rect(col, row);
                    let lon = r.x0 + rng.random::<f64>() * dx;
                    let lat = r.y0 + rng.random::<f64>() * dy;
                    let v = field.at(col, row) + cfg.noise_sd * rng.sample::<f64, _>(StandardNormal);
                    entities.push(Entity {
                        lon,
                        lat,
                        vector: vec![v; cfg.dim],
                    });
                }
            }
            Support::EntitySet(EntitySetSupport::new(cfg.dim, entities)?)
        }
    };
    let dim = support.dim();
    let representation = Representation::new(cfg.model_id(), dim, support)?;
    Ok(SynthCity {
        config: cfg.clone(),
        field,
        task,
        representation,
    })
}

/// Paths written by [`write_synth_city`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthFiles {
    pub task: PathBuf,
    /// `None` for coordinate encoders, which need no file.
    pub embedding: Option<PathBuf>,
}

/// Writes the task dataset and embedding in the standard formats.
pub fn write_synth_city(city: &SynthCity, dir: impl AsRef<Path>) -> Result<SynthFiles> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = crate::dataset::city_key(&city.config.city);
    let task = dir.join(format!("{stem}_{}.csv", city.task.task));
    write_task_dataset(&city.task, &task)?;
    let embedding = match &city.representation.support {
        Support::Raster(r) => {
            let p = dir.join(format!("{stem}_{}.erf", city.representation.model_id));
            crate::io::write_erf(r, &p)?;
            Some(p)
        }
        Support::EntitySet(e) => {
            let p = dir.join(format!("{stem}_{}.csv", city.representation.model_id));
            crate::io::write_entity_set(e, &p)?;
            Some(p)
        }
        Support::CellTable(t) => {
            let p = dir.join(format!("{stem}_{}_cells.csv", city.representation.model_id));
            crate::io::write_cell_table(t, &p)?;
            Some(p)
        }
        Support::CoordinateEncoder(_) => None,
    };
    Ok(SynthFiles { task, embedding })
}

/// Writes every configured city into `dir` and returns a manifest over
/// them, with paths relative to `dir`.
///
/// Configurations sharing a city and task must agree on everything the
/// labels depend on; a model may appear once per city.
pub fn write_synth_suite(configs: &[SynthConfig], dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let mut m = Manifest {
        base_dir: dir.to_path_buf(),
        ..Manifest::default()
    };
    let mut label_source: BTreeMap<(String, Task), &SynthConfig> = BTreeMap::new();
    for cfg in configs {
        let key = (cfg.city.clone(), cfg.task());
        if let Some(prev) = label_source.get(&key) {
            let same = prev.extent == cfg.extent
                && prev.n == cfg.n
                && prev.length_scale == cfg.length_scale
                && prev.seed == cfg.seed
                && prev.label == cfg.label;
            if !same {
                return Err(Error::InvalidArgument(format!("conflicting {} labels for {}", key.1, key.0)));
            }
        }
        label_source.insert(key, cfg);
        let city = synth_city(cfg)?;
        let files = write_synth_city(&city, dir)?;
        let rel = |p: &Path| p.strip_prefix(dir).map_or_else(|_| p.to_path_buf(), Path::to_path_buf);
        m.cities
            .entry(cfg.city.clone())
            .or_insert_with(|| CityEntry {
                hex_origin: None,
                tasks: BTreeMap::new(),
            })
            .tasks
            .insert(cfg.task(), rel(&files.task));
        let rep = &city.representation;
        let entry = m.models.entry(rep.model_id.clone()).or_insert_with(|| ModelEntry {
            dim: rep.dim,
            support: rep.support.kind(),
            encoder: matches!(cfg.embedding, SynthEmbedding::CoordinatePe).then(|| crate::pe::PE_ENCODER_ID.to_string()),
            entity_aggregation: None,
            files: BTreeMap::new(),
        });
        if entry.dim != rep.dim {
            return Err(Error::InvalidArgument(format!(
                "{} has dim {} and {}",
                rep.model_id, entry.dim, rep.dim
            )));
        }
        if let Some(p) = files.embedding {
            if entry.files.insert(cfg.city.clone(), rel(&p)).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "{} configured twice for {}",
                    rep.model_id, cfg.city
                )));
            }
        }
    }
    m.save(dir.join("manifest.json"))?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeakageSeed {
    pub seed: i64,
    pub random_r2: f64,
    pub spatial_r2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeakageOutcome {
    pub per_seed: Vec<LeakageSeed>,
    /// Mean of `random R2 - spatial R2`.
    pub mean_delta: f64,
}

/// Runs the pipeline under both protocols on one synthetic city and
/// reports the mean random-minus-spatial R² over `seeds`.
pub fn leakage_experiment(cfg: &SynthConfig, head: &HeadConfig, seeds: &[i64], grid: (u32, u32)) -> Result<LeakageOutcome> {
    if cfg.label != SynthLabel::Scalar {
        return Err(Error::InvalidArgument(
            "the leakage experiment compares R² and needs scalar labels".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("no seeds".into()));
    }
    let city = synth_city(cfg)?;
    let blocks = build_block_grid(city.task.extent, grid.0, grid.1)?;
    let (cx, cy) = city.task.extent.center();
    let hex = HexGrid::res8(cx, cy);
    let features = align(&city.representation, &city.task, &hex, EntityAggregation::H3First)?;
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut r2 = [0.0; 2];
        for (slot, split) in [
            random_split(&city.task, seed, DEFAULT_TEST_FRAC, DEFAULT_VAL_FRAC)?,
            spatial_split(&city.task, &blocks, seed, DEFAULT_TEST_FRAC, DEFAULT_VAL_FRAC)?,
        ]
        .into_iter()
        .enumerate()
        {
            let run_seed = crate::runner::run_seed(&city.representation.model_id, city.task.task, &cfg.city, split.protocol, seed);
            let eval = evaluate(&features, &city.task, &split, head, run_seed)?;
            r2[slot] = eval.value(Metric::R2);
        }
        per_seed.push(LeakageSeed {
            seed,
            random_r2: r2[0],
            spatial_r2: r2[1],
        });
    }
    let mean_delta = per_seed.iter().map(|s| s.random_r2 - s.spatial_r2).sum::<f64>() / per_seed.len() as f64;
    Ok(LeakageOutcome { per_seed, mean_delta })
}

/// Default scalar head for synthetic experiments.
pub fn linear_scalar_head() -> HeadConfig {
    HeadConfig::new(HeadKind::Linear, crate::heads::OutputKind::Scalar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::coverage;

    fn unit_extent() -> Rect {
        Rect::new(0.0, 0.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
    }

    #[test]
    fn field_is_standardized_and_reproducible() {
        let f = generate_field(unit_extent(), 32, 4.0 / 32.0, 3).unwrap();
        let m = f.values.iter().sum::<f64>() / f.values.len() as f64;
        let v = f.values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / f.values.len() as f64;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        assert_eq!(f, generate_field(unit_extent(), 32, 4.0 / 32.0, 3).unwrap());
        assert_ne!(f, generate_field(unit_extent(), 32, 4.0 / 32.0, 4).unwrap());
    }

    #[test]
    fn white_noise_limit() {
        let n = 64;
        let mean: f64 = (0..10u64)
            .map(|s| lag1_autocorrelation(&generate_field(unit_extent(), n, 0.1 / n as f64, s).unwrap()))
            .sum::<f64>()
            / 10.0;
        assert!(mean.abs() < 0.05, "{mean}");
    }

    #[test]
    fn long_scale_is_smooth() {
        let n = 64;
        let f = generate_field(unit_extent(), n, 0.5, 1).unwrap();
        assert!(lag1_autocorrelation(&f) > 0.9);
    }

    #[test]
    fn autocorrelation_grows_with_scale() {
        let n = 64;
        let r: Vec<f64> = [1.0, 4.0, 16.0]
            .iter()
            .map(|l| lag1_autocorrelation(&generate_field(unit_extent(), n, l / n as f64, 8).unwrap()))
            .collect();
        assert!(r[0] < r[1] && r[1] < r[2], "{r:?}");
    }

    #[test]
    fn quantile_classes_are_balanced() {
        let mut cfg = SynthConfig::square("Q", 40, 50.0, (0.0, 0.0), 5.0, 2);
        cfg.label = SynthLabel::Class { classes: 4 };
        let c = synth_city(&cfg).unwrap();
        let mut counts = [0usize; 4];
        for l in &c.task.labels {
            let Label::Class(k) = l else { panic!() };
            counts[*k] += 1;
        }
        for k in counts {
            assert!((k as f64 / 1600.0 - 0.25).abs() <= 0.02);
        }
    }

    #[test]
    fn distributions_are_normalized() {
        let mut cfg = SynthConfig::square("D", 16, 50.0, (0.0, 0.0), 2.0, 2);
        cfg.label = SynthLabel::Distribution { bins: 5 };
        let c = synth_city(&cfg).unwrap();
        for l in &c.task.labels {
            let Label::Distribution(p) = l else { panic!() };
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(c.task.task, Task::Age);
    }

    #[test]
    fn field_value_raster_aligns_exactly() {
        let cfg = SynthConfig::square("F", 16, 50.0, (0.0, 0.0), 2.0, 5);
        let c = synth_city(&cfg).unwrap();
        let hex = HexGrid::res8(0.0, 0.0);
        let m = align(&c.representation, &c.task, &hex, EntityAggregation::H3First).unwrap();
        assert_eq!(coverage(&m).unwrap(), 1.0);
        for (i, &f) in c.field.values.iter().enumerate() {
            assert!(m.rows.row(i).iter().all(|&v| v == f as f32 as f64));
        }
    }

    #[test]
    fn sparse_entities_cover_better_through_hex() {
        let mut cfg = SynthConfig::square("S", 128, 50.0, (0.0, 0.0), 16.0, 3);
        cfg.embedding = SynthEmbedding::SparseEntities { density: 0.05 };
        cfg.noise_sd = 1.0;
        let c = synth_city(&cfg).unwrap();
        let hex = HexGrid::res8(0.0, 0.0);
        let h = align(&c.representation, &c.task, &hex, EntityAggregation::H3First).unwrap();
        let d = align(&c.representation, &c.task, &hex, EntityAggregation::Direct).unwrap();
        let (ch, cd) = (coverage(&h).unwrap(), coverage(&d).unwrap());
        assert!(cd < ch, "direct {cd} vs h3-first {ch}");
        // each kept cell holds exactly one entity, so direct coverage is the kept fraction
        let Support::EntitySet(e) = &c.representation.support else {
            panic!()
        };
        assert!((cd - e.entities.len() as f64 / (128.0 * 128.0)).abs() < 1e-12);
    }

    #[test]
    fn synthetic_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::square("Round Trip", 8, 50.0, (0.0, 0.0), 1.0, 5);
        let c = synth_city(&cfg).unwrap();
        let files = write_synth_city(&c, dir.path()).unwrap();
        let back = crate::dataset::load_task_dataset(&files.task).unwrap();
        assert_eq!(back.units, c.task.units);
        let r = crate::io::read_erf(files.embedding.unwrap()).unwrap();
        let Support::Raster(orig) = &c.representation.support else {
            panic!()
        };
        assert_eq!(r.data, orig.data);
    }

    #[test]
    fn config_json() {
        let cfg = SynthConfig {
            embedding: SynthEmbedding::SparseEntities { density: 0.05 },
            ..SynthConfig::square("J", 8, 50.0, (0.0, 0.0), 1.0, 5)
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains(r#""embedding":{"kind":"sparse_entities","density":0.05}"#));
        assert_eq!(serde_json::from_str::<SynthConfig>(&s).unwrap(), cfg);
    }

    #[test]
    fn suite_manifest_validates() {
        let dir = tempfile::tempdir().unwrap();
        let base = SynthConfig::square("Suite City", 16, 50.0, (10.0, 45.0), 4.0, 2);
        let pe = SynthConfig {
            embedding: SynthEmbedding::CoordinatePe,
            ..base.clone()
        };
        let m = write_synth_suite(&[base.clone(), pe], dir.path()).unwrap();
        let loaded = Manifest::load(dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.cities, m.cities);
        assert_eq!(loaded.models.len(), 2);
        let report = crate::manifest::validate_manifest(&loaded, &crate::dataset::CityPolicy::default());
        assert!(report.is_ok() && report.gaps.is_empty(), "{report:?}");
        let clash = SynthConfig { seed: 3, ..base.clone() };
        assert!(write_synth_suite(&[base, clash], dir.path()).is_err());
    }
}
