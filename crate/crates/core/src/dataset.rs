//! Task datasets: units, labels and the task registry.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::grid::Rect;
use crate::metrics::{Direction, Metric};
use crate::{Error, Result};

/// Tolerance on the sum of a distribution label when loading.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

/// Distributions whose sum is already within this of 1 are left untouched so
/// that canonical files survive a load/write cycle byte for byte.
const RENORMALIZE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "LUC")]
    Luc,
    #[serde(rename = "RDE")]
    Rde,
    #[serde(rename = "POP")]
    Pop,
    #[serde(rename = "AGE")]
    Age,
    #[serde(rename = "GDP")]
    Gdp,
    #[serde(rename = "NTL")]
    Ntl,
    #[serde(rename = "PM25")]
    Pm25,
    #[serde(rename = "LST")]
    Lst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Scalar,
    Class,
    Distribution,
}

impl Task {
    pub const ALL: [Task; 8] = [
        Task::Luc,
        Task::Rde,
        Task::Pop,
        Task::Age,
        Task::Gdp,
        Task::Ntl,
        Task::Pm25,
        Task::Lst,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Luc => "LUC",
            Task::Rde => "RDE",
            Task::Pop => "POP",
            Task::Age => "AGE",
            Task::Gdp => "GDP",
            Task::Ntl => "NTL",
            Task::Pm25 => "PM25",
            Task::Lst => "LST",
        }
    }

    pub fn label_kind(&self) -> LabelKind {
        match self {
            Task::Luc => LabelKind::Class,
            Task::Age => LabelKind::Distribution,
            _ => LabelKind::Scalar,
        }
    }

    pub fn primary_metric(&self) -> Metric {
        match self.label_kind() {
            LabelKind::Class => Metric::MacroF1,
            LabelKind::Distribution => Metric::Kl,
            LabelKind::Scalar => Metric::R2,
        }
    }

    pub fn direction(&self) -> Direction {
        self.primary_metric().direction()
    }

    /// The three metrics reported for this task, primary first.
    pub fn metrics(&self) -> [Metric; 3] {
        match self.label_kind() {
            LabelKind::Scalar => [Metric::R2, Metric::Mae, Metric::Rmse],
            LabelKind::Class => [Metric::MacroF1, Metric::MacroPrecision, Metric::MacroRecall],
            LabelKind::Distribution => [Metric::Kl, Metric::Chebyshev, Metric::L1],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == up || (up == "PM2.5" && *t == Task::Pm25))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task {s:?}")))
    }
}

/// Cities admitted to age-distribution aggregation.
pub const AGE_CITIES: [&str; 4] = ["London", "New York", "Singapore", "Sydney"];

/// Case- and punctuation-insensitive city key ("New York" == "new_york").
pub fn city_key(city: &str) -> String {
    city.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect()
}

/// Which cities a task is evaluated on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityPolicy {
    pub age_cities: Vec<String>,
}

impl Default for CityPolicy {
    fn default() -> Self {
        CityPolicy {
            age_cities: AGE_CITIES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl CityPolicy {
    pub fn admits(&self, task: Task, city: &str) -> bool {
        task != Task::Age || self.age_cities.iter().any(|c| city_key(c) == city_key(city))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryKind {
    Point,
    RasterCell,
    PolygonRepPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskUnit {
    pub unit_id: String,
    pub lon: f64,
    pub lat: f64,
    pub geometry_kind: GeometryKind,
    pub cell_extent: Option<Rect>,
}

impl TaskUnit {
    pub fn point(unit_id: impl Into<String>, lon: f64, lat: f64) -> Self {
        TaskUnit {
            unit_id: unit_id.into(),
            lon,
            lat,
            geometry_kind: GeometryKind::Point,
            cell_extent: None,
        }
    }

    /// A raster cell unit represented by its center.
    pub fn raster_cell(unit_id: impl Into<String>, extent: Rect) -> Self {
        let (lon, lat) = extent.center();
        TaskUnit {
            unit_id: unit_id.into(),
            lon,
            lat,
            geometry_kind: GeometryKind::RasterCell,
            cell_extent: Some(extent),
        }
    }

    fn validate(&self) -> Result<()> {
        let id = &self.unit_id;
        if !(-180.0..=180.0).contains(&self.lon) || !(-90.0..=90.0).contains(&self.lat) {
            return Err(Error::Validation(format!(
                "unit {id}: coordinate ({}, {}) out of WGS84 range",
                self.lon, self.lat
            )));
        }
        match (self.geometry_kind, &self.cell_extent) {
            (GeometryKind::RasterCell, Some(e)) => {
                if e.is_degenerate() || !e.contains(self.lon, self.lat) {
                    return Err(Error::Validation(format!(
                        "unit {id}: cell extent {e:?} is empty or does not contain its point"
                    )));
                }
            }
            (GeometryKind::RasterCell, None) => {
                return Err(Error::Validation(format!("unit {id}: raster cell without extent")));
            }
            (_, Some(_)) => {
                return Err(Error::Validation(format!("unit {id}: only raster cells carry an extent")));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Scalar(f64),
    Class(usize),
    Distribution(Vec<f64>),
}

impl Label {
    pub fn kind(&self) -> LabelKind {
        match self {
            Label::Scalar(_) => LabelKind::Scalar,
            Label::Class(_) => LabelKind::Class,
            Label::Distribution(_) => LabelKind::Distribution,
        }
    }
}

/// One city-task pair: units, parallel labels and the spatial extent.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub city: String,
    pub task: Task,
    pub units: Vec<TaskUnit>,
    pub labels: Vec<Label>,
    pub extent: Rect,
    /// Declared class count (classification tasks only).
    pub n_classes: Option<usize>,
}

impl TaskDataset {
    /// Validates every invariant and renormalizes distribution labels.
    ///
    /// `extent` defaults to the bounding box of all unit geometry and
    /// `n_classes` to one more than the largest class index.
    pub fn new(
        city: impl Into<String>,
        task: Task,
        units: Vec<TaskUnit>,
        mut labels: Vec<Label>,
        extent: Option<Rect>,
        n_classes: Option<usize>,
    ) -> Result<Self> {
        let city = city.into();
        if units.len() != labels.len() {
            return Err(Error::Validation(format!("{} units but {} labels", units.len(), labels.len())));
        }
        let mut seen = HashSet::with_capacity(units.len());
        for u in &units {
            u.validate()?;
            if !seen.insert(u.unit_id.as_str()) {
                return Err(Error::Validation(format!("duplicate unit_id {}", u.unit_id)));
            }
        }

        let want = task.label_kind();
        let mut bad_sums = Vec::new();
        let mut k_expected: Option<usize> = None;
        let mut max_class = None::<usize>;
        for (u, l) in units.iter().zip(labels.iter_mut()) {
            if l.kind() != want {
                return Err(Error::Validation(format!(
                    "unit {}: task {task} expects {want:?} labels, got {:?}",
                    u.unit_id,
                    l.kind()
                )));
            }
            match l {
                Label::Scalar(v) if !v.is_finite() => {
                    return Err(Error::Validation(format!("unit {}: non-finite label", u.unit_id)));
                }
                Label::Class(c) => max_class = Some(max_class.map_or(*c, |m: usize| m.max(*c))),
                Label::Distribution(p) => {
                    if *k_expected.get_or_insert(p.len()) != p.len() || p.is_empty() {
                        return Err(Error::Validation(format!(
                            "unit {}: distribution length {} differs from {}",
                            u.unit_id,
                            p.len(),
                            k_expected.unwrap_or(0)
                        )));
                    }
                    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
                        bad_sums.push(u.unit_id.clone());
                        continue;
                    }
                    let s: f64 = p.iter().sum();
                    if (s - 1.0).abs() > DISTRIBUTION_TOLERANCE {
                        bad_sums.push(u.unit_id.clone());
                    } else if (s - 1.0).abs() > RENORMALIZE_SLACK {
                        p.iter_mut().for_each(|v| *v /= s);
                    }
                }
                _ => {}
            }
        }
        if !bad_sums.is_empty() {
            let shown: Vec<_> = bad_sums.iter().take(20).map(String::as_str).collect();
            return Err(Error::Validation(format!(
                "{} distribution label(s) are negative or do not sum to 1 within {DISTRIBUTION_TOLERANCE}: {}{}",
                bad_sums.len(),
                shown.join(", "),
                if bad_sums.len() > shown.len() { ", ..." } else { "" }
            )));
        }

        let n_classes = match want {
            LabelKind::Class => {
                let inferred = max_class.map_or(0, |m| m + 1);
                let c = n_classes.unwrap_or(inferred);
                if c == 0 || inferred > c {
                    return Err(Error::Validation(format!(
                        "class index {} exceeds declared class count {c}",
                        inferred.saturating_sub(1)
                    )));
                }
                Some(c)
            }
            _ => None,
        };

        let extent = match extent {
            Some(e) => e,
            None => unit_bounds(&units).ok_or_else(|| Error::Validation("cannot infer extent of an empty dataset".into()))?,
        };
        if let Some(u) = units.iter().find(|u| !extent.contains(u.lon, u.lat)) {
            return Err(Error::Validation(format!(
                "unit {} at ({}, {}) lies outside the dataset extent {extent:?}",
                u.unit_id, u.lon, u.lat
            )));
        }

        Ok(TaskDataset {
            city,
            task,
            units,
            labels,
            extent,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn primary_metric(&self) -> Metric {
        self.task.primary_metric()
    }

    pub fn metric_direction(&self) -> Direction {
        self.task.direction()
    }

    /// Number of distribution bins (distribution tasks only).
    pub fn n_bins(&self) -> Option<usize> {
        self.labels.iter().find_map(|l| match l {
            Label::Distribution(p) => Some(p.len()),
            _ => None,
        })
    }
}

fn unit_bounds(units: &[TaskUnit]) -> Option<Rect> {
    let pts = units.iter().flat_map(|u| {
        let mut v = vec![(u.lon, u.lat)];
        if let Some(e) = u.cell_extent {
            v.extend([(e.x0, e.y0), (e.x1, e.y1)]);
        }
        v
    });
    Rect::bounding(pts)
}

struct FileMeta {
    city: String,
    task: Task,
    extent: Option<Rect>,
    classes: Option<usize>,
}

fn parse_meta(line: &str, path: &str) -> Result<FileMeta> {
    let body = line.trim_start_matches('#').trim();
    let (mut city, mut task, mut extent, mut classes) = (None, None, None, None);
    for field in body.split(';').map(str::trim).filter(|f| !f.is_empty()) {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::parse(path, 1, format!("metadata field {field:?} is not key=value")))?;
        match k.trim() {
            "city" => city = Some(v.trim().to_string()),
            "task" => task = Some(v.parse::<Task>().map_err(|e| Error::parse(path, 1, e.to_string()))?),
            "extent" => {
                let n: Vec<f64> = v
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::parse(path, 1, format!("bad extent {v:?}")))?;
                if n.len() != 4 {
                    return Err(Error::parse(path, 1, format!("extent needs 4 numbers, got {v:?}")));
                }
                extent = Some(Rect::new(n[0], n[1], n[2], n[3]).map_err(|e| Error::parse(path, 1, e.to_string()))?);
            }
            "classes" => {
                classes = Some(
                    v.trim()
                        .parse()
                        .map_err(|_| Error::parse(path, 1, format!("bad class count {v:?}")))?,
                )
            }
            other => return Err(Error::parse(path, 1, format!("unknown metadata key {other:?}"))),
        }
    }
    Ok(FileMeta {
        city: city.ok_or_else(|| Error::parse(path, 1, "metadata line lacks city="))?,
        task: task.ok_or_else(|| Error::parse(path, 1, "metadata line lacks task="))?,
        extent,
        classes,
    })
}

/// Loads a task-dataset CSV.
///
/// The first line is a metadata comment, `# city=<name>; task=<TASK>`,
/// optionally followed by `; extent=x0,y0,x1,y1` and `; classes=C`. Then a
/// header `unit_id,lon,lat[,x0,y0,x1,y1]` followed by `value`, `class`, or
/// `p_0..p_{K-1}`.
pub fn load_task_dataset(path: impl AsRef<Path>) -> Result<TaskDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_task_dataset(&text, &path.display().to_string())
}

pub fn parse_task_dataset(text: &str, origin: &str) -> Result<TaskDataset> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    if !first.starts_with('#') {
        return Err(Error::parse(origin, 1, "missing `# city=...; task=...` metadata line"));
    }
    let meta = parse_meta(first.trim_end_matches('\r'), origin)?;

    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(rest.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::parse(origin, 2, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.len() < 4 || header[0] != "unit_id" || header[1] != "lon" || header[2] != "lat" {
        return Err(Error::parse(origin, 2, "header must start with unit_id,lon,lat"));
    }
    let has_extent = header.len() >= 7 && header[3..7] == ["x0", "y0", "x1", "y1"];
    let label_cols = &header[if has_extent { 7 } else { 3 }..];
    let kind = match label_cols {
        [v] if v == "value" => LabelKind::Scalar,
        [c] if c == "class" => LabelKind::Class,
        ps if !ps.is_empty() && ps.iter().enumerate().all(|(k, p)| *p == format!("p_{k}")) => LabelKind::Distribution,
        _ => return Err(Error::parse(origin, 2, format!("unrecognised label columns {label_cols:?}"))),
    };
    if kind != meta.task.label_kind() {
        return Err(Error::parse(
            origin,
            2,
            format!(
                "task {} expects {:?} labels, header declares {kind:?}",
                meta.task,
                meta.task.label_kind()
            ),
        ));
    }

    let mut units = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize + 1);
            Error::parse(origin, line, e.to_string())
        })?;
        // +1 for the metadata line
        let line = rec.position().map_or(0, |p| p.line() as usize) + 1;
        if rec.len() != header.len() {
            return Err(Error::parse(
                origin,
                line,
                format!("expected {} fields, got {}", header.len(), rec.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::parse(origin, line, format!("column {} is not a number: {:?}", header[i], &rec[i])))
        };
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::parse(origin, line, "empty unit_id"));
        }
        let (lon, lat) = (num(1)?, num(2)?);
        let unit = if has_extent && (3..7).all(|i| !rec[i].trim().is_empty()) {
            let e = Rect::new(num(3)?, num(4)?, num(5)?, num(6)?).map_err(|e| Error::parse(origin, line, e.to_string()))?;
            TaskUnit {
                unit_id: id,
                lon,
                lat,
                geometry_kind: GeometryKind::RasterCell,
                cell_extent: Some(e),
            }
        } else {
            TaskUnit::point(id, lon, lat)
        };
        let off = if has_extent { 7 } else { 3 };
        let label = match kind {
            LabelKind::Scalar => Label::Scalar(num(off)?),
            LabelKind::Class => Label::Class(
                rec[off]
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(origin, line, format!("class is not a non-negative integer: {:?}", &rec[off])))?,
            ),
            LabelKind::Distribution => Label::Distribution((off..rec.len()).map(num).collect::<Result<_>>()?),
        };
        units.push(unit);
        labels.push(label);
    }
    TaskDataset::new(meta.city, meta.task, units, labels, meta.extent, meta.classes)
}

/// Writes the canonical task-dataset CSV read by [`load_task_dataset`].
pub fn write_task_dataset(ds: &TaskDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    render_task_dataset(ds, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn render_task_dataset<W: Write>(ds: &TaskDataset, mut w: W) -> std::io::Result<()> {
    let e = &ds.extent;
    write!(
        w,
        "# city={}; task={}; extent={},{},{},{}",
        ds.city, ds.task, e.x0, e.y0, e.x1, e.y1
    )?;
    if let Some(c) = ds.n_classes {
        write!(w, "; classes={c}")?;
    }
    writeln!(w)?;
    let has_extent = ds.units.iter().any(|u| u.cell_extent.is_some());
    write!(w, "unit_id,lon,lat")?;
    if has_extent {
        write!(w, ",x0,y0,x1,y1")?;
    }
    match ds.task.label_kind() {
        LabelKind::Scalar => write!(w, ",value")?,
        LabelKind::Class => write!(w, ",class")?,
        LabelKind::Distribution => {
            for k in 0..ds.n_bins().unwrap_or(0) {
                write!(w, ",p_{k}")?;
            }
        }
    }
    writeln!(w)?;
    for (u, l) in ds.units.iter().zip(&ds.labels) {
        write!(w, "{},{},{}", u.unit_id, u.lon, u.lat)?;
        if has_extent {
            match u.cell_extent {
                Some(e) => write!(w, ",{},{},{},{}", e.x0, e.y0, e.x1, e.y1)?,
                None => write!(w, ",,,,")?,
            }
        }
        match l {
            Label::Scalar(v) => write!(w, ",{v}")?,
            Label::Class(c) => write!(w, ",{c}")?,
            Label::Distribution(p) => {
                for v in p {
                    write!(w, ",{v}")?;
                }
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Distinct cities in a collection of datasets, sorted.
pub fn cities_of<'a>(datasets: impl IntoIterator<Item = &'a TaskDataset>) -> BTreeSet<String> {
    datasets.into_iter().map(|d| d.city.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_file() -> &'static str {
        "# city=Testville; task=POP\nunit_id,lon,lat,value\na,0.5,0.5,1\nb,1.5,0.5,2\nc,0.5,1.5,3\nd,1.5,1.5,4\n"
    }

    #[test]
    fn loads_scalar_rows() {
        let ds = parse_task_dataset(scalar_file(), "mem").unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.city, "Testville");
        assert_eq!(ds.units[2].unit_id, "c");
        assert_eq!(ds.labels[3], Label::Scalar(4.0));
        assert_eq!(ds.primary_metric(), Metric::R2);
    }

    #[test]
    fn accepts_valid_distribution() {
        let f = "# city=London; task=AGE\nunit_id,lon,lat,p_0,p_1\nu,0,51,0.5,0.5\n";
        let ds = parse_task_dataset(f, "mem").unwrap();
        assert_eq!(ds.labels[0], Label::Distribution(vec![0.5, 0.5]));
    }

    #[test]
    fn rejects_distribution_off_by_tenth() {
        let f = "# city=London; task=AGE\nunit_id,lon,lat,p_0,p_1\nok,0,51,0.5,0.5\nbad_unit,0,51.1,0.5,0.6\n";
        let err = parse_task_dataset(f, "mem").unwrap_err().to_string();
        assert!(err.contains("bad_unit"), "{err}");
    }

    #[test]
    fn renormalizes_within_tolerance() {
        let f = "# city=London; task=AGE\nunit_id,lon,lat,p_0,p_1\nu,0,51,0.5000004,0.5\n";
        let ds = parse_task_dataset(f, "mem").unwrap();
        let Label::Distribution(p) = &ds.labels[0] else { panic!() };
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn malformed_row_names_line() {
        let f = "# city=X; task=POP\nunit_id,lon,lat,value\na,0,0,1\nb,zero,0,1\n";
        let err = parse_task_dataset(f, "f.csv").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn unknown_task_rejected() {
        let f = "# city=X; task=CRIME\nunit_id,lon,lat,value\na,0,0,1\n";
        assert!(parse_task_dataset(f, "mem").is_err());
        assert!("crime".parse::<Task>().is_err());
        assert_eq!("pm2.5".parse::<Task>().unwrap(), Task::Pm25);
    }

    #[test]
    fn label_kind_must_match_task() {
        let f = "# city=X; task=LUC\nunit_id,lon,lat,value\na,0,0,1\n";
        assert!(parse_task_dataset(f, "mem").is_err());
    }

    #[test]
    fn class_index_bounded_by_declared_count() {
        let f = "# city=X; task=LUC; classes=2\nunit_id,lon,lat,class\na,0,0,2\n";
        assert!(parse_task_dataset(f, "mem").is_err());
        let f = "# city=X; task=LUC; classes=5\nunit_id,lon,lat,class\na,0,0,2\n";
        assert_eq!(parse_task_dataset(f, "mem").unwrap().n_classes, Some(5));
    }

    #[test]
    fn duplicate_ids_and_bad_coordinates_rejected() {
        let f = "# city=X; task=POP\nunit_id,lon,lat,value\na,0,0,1\na,1,1,1\n";
        assert!(parse_task_dataset(f, "mem").is_err());
        let f = "# city=X; task=POP\nunit_id,lon,lat,value\na,190,0,1\n";
        assert!(parse_task_dataset(f, "mem").is_err());
    }

    #[test]
    fn raster_cell_must_contain_its_point() {
        let f = "# city=X; task=LST\nunit_id,lon,lat,x0,y0,x1,y1,value\na,5,5,0,0,1,1,3\n";
        assert!(parse_task_dataset(f, "mem").is_err());
        let f = "# city=X; task=LST\nunit_id,lon,lat,x0,y0,x1,y1,value\na,0.5,0.5,0,0,1,1,3\n";
        let ds = parse_task_dataset(f, "mem").unwrap();
        assert_eq!(ds.units[0].geometry_kind, GeometryKind::RasterCell);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let f = "# city=New York; task=AGE\nunit_id,lon,lat,x0,y0,x1,y1,p_0,p_1,p_2\nu1,-73.95,40.75,-74,40.7,-73.9,40.8,0.2,0.30000000000000004,0.5\n";
        let ds = parse_task_dataset(f, "mem").unwrap();
        let mut once = Vec::new();
        render_task_dataset(&ds, &mut once).unwrap();
        let again = parse_task_dataset(std::str::from_utf8(&once).unwrap(), "mem").unwrap();
        let mut twice = Vec::new();
        render_task_dataset(&again, &mut twice).unwrap();
        assert_eq!(once, twice);
        assert_eq!(ds, again);
    }

    #[test]
    fn task_mapping_is_total() {
        for t in Task::ALL {
            let m = t.primary_metric();
            assert_eq!(t.metrics()[0], m);
            assert_eq!(t.direction(), m.direction());
        }
        assert_eq!(Task::Luc.primary_metric(), Metric::MacroF1);
        assert_eq!(Task::Age.primary_metric(), Metric::Kl);
        assert_eq!(Task::Age.direction(), Direction::LowerBetter);
        assert_eq!(Task::Gdp.primary_metric(), Metric::R2);
    }

    #[test]
    fn age_restriction() {
        let p = CityPolicy::default();
        assert!(p.admits(Task::Age, "new_york"));
        assert!(p.admits(Task::Age, "Sydney"));
        assert!(!p.admits(Task::Age, "Mumbai"));
        assert!(p.admits(Task::Pop, "Mumbai"));
    }
}
