//! File formats for embeddings and results.
//!
//! * `.erf` raster: one text header line `erf1 x0 y0 dx dy ncols nrows dim`
//!   followed by `ncols * nrows * dim` little-endian f32 values, row-major
//!   from the south-west cell, dims interleaved per cell. NaN marks an
//!   invalid cell.
//! * Entity set: CSV `lon,lat,v_0..v_{dim-1}`.
//! * Cell table: CSV `key,v_0..v_{dim-1}` with `q:r` hex keys; a `lat`
//!   column after the key is accepted and ignored.
//! * Result store: CSV `model,task,city,seed,protocol,metric,value,n_test`,
//!   with degenerate values written as `NaN`.

use std::io::Write;
use std::path::Path;

use crate::aggregate::ResultRecord;
use crate::grid::HexCell;
use crate::repr::{CellTableSupport, Entity, EntitySetSupport, RasterSupport};
use crate::{Error, Result};

pub const ERF_MAGIC: &str = "erf1";
pub const RESULT_COLUMNS: [&str; 8] = ["model", "task", "city", "seed", "protocol", "metric", "value", "n_test"];

pub fn write_erf(r: &RasterSupport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = format!(
        "{ERF_MAGIC} {} {} {} {} {} {} {}\n",
        r.x0, r.y0, r.dx, r.dy, r.ncols, r.nrows, r.dim
    )
    .into_bytes();
    buf.reserve(r.data.len() * 4);
    for v in &r.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_erf(path: impl AsRef<Path>) -> Result<RasterSupport> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_erf(&bytes, &path.display().to_string())
}

pub fn parse_erf(bytes: &[u8], origin: &str) -> Result<RasterSupport> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(origin, 1, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::parse(origin, 1, "header is not UTF-8"))?;
    let f: Vec<&str> = header.split_whitespace().collect();
    if f.len() != 8 || f[0] != ERF_MAGIC {
        return Err(Error::parse(
            origin,
            1,
            format!("expected `{ERF_MAGIC} x0 y0 dx dy ncols nrows dim`, got {header:?}"),
        ));
    }
    let real = |i: usize| {
        f[i].parse::<f64>()
            .map_err(|_| Error::parse(origin, 1, format!("bad number {:?}", f[i])))
    };
    let int = |i: usize| {
        f[i].parse::<usize>()
            .map_err(|_| Error::parse(origin, 1, format!("bad count {:?}", f[i])))
    };
    let (ncols, nrows, dim) = (int(5)?, int(6)?, int(7)?);
    let body = &bytes[nl + 1..];
    let want = ncols
        .checked_mul(nrows)
        .and_then(|n| n.checked_mul(dim))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::parse(origin, 1, "raster shape overflows"))?;
    if body.len() != want {
        return Err(Error::Validation(format!(
            "{origin}: payload has {} bytes, header implies {want}",
            body.len()
        )));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    RasterSupport::new(real(1)?, real(2)?, real(3)?, real(4)?, ncols, nrows, dim, data)
}

fn vector_columns(header: &csv::StringRecord, from: usize, origin: &str) -> Result<usize> {
    let dim = header.len().saturating_sub(from);
    for (k, name) in header.iter().skip(from).enumerate() {
        if name.trim() != format!("v_{k}") {
            return Err(Error::parse(origin, 1, format!("expected column v_{k}, found {name:?}")));
        }
    }
    if dim == 0 {
        return Err(Error::parse(origin, 1, "no vector columns"));
    }
    Ok(dim)
}

fn parse_vector(rec: &csv::StringRecord, from: usize, origin: &str, line: usize) -> Result<Vec<f64>> {
    rec.iter()
        .skip(from)
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::parse(origin, line, format!("not a number: {s:?}")))
        })
        .collect()
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(f))
}

fn record_line(rec: &csv::StringRecord) -> usize {
    rec.position().map_or(0, |p| p.line() as usize)
}

pub fn read_entity_set(path: impl AsRef<Path>) -> Result<EntitySetSupport> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let mut rdr = reader(path)?;
    let header = rdr.headers()?.clone();
    if header.get(0).map(str::trim) != Some("lon") || header.get(1).map(str::trim) != Some("lat") {
        return Err(Error::parse(&origin, 1, "entity file header must start with lon,lat"));
    }
    let dim = vector_columns(&header, 2, &origin)?;
    let mut entities = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = record_line(&rec);
        let num = |i: usize| {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::parse(&origin, line, format!("not a number: {:?}", &rec[i])))
        };
        entities.push(Entity {
            lon: num(0)?,
            lat: num(1)?,
            vector: parse_vector(&rec, 2, &origin, line)?,
        });
    }
    EntitySetSupport::new(dim, entities)
}

pub fn write_entity_set(e: &EntitySetSupport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    let io = |err| Error::io(path, err);
    write!(buf, "lon,lat").map_err(io)?;
    for k in 0..e.dim {
        write!(buf, ",v_{k}").map_err(io)?;
    }
    writeln!(buf).map_err(io)?;
    for ent in &e.entities {
        write!(buf, "{},{}", ent.lon, ent.lat).map_err(io)?;
        for v in &ent.vector {
            write!(buf, ",{v}").map_err(io)?;
        }
        writeln!(buf).map_err(io)?;
    }
    std::fs::write(path, buf).map_err(io)
}

pub fn read_cell_table(path: impl AsRef<Path>) -> Result<CellTableSupport> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let mut rdr = reader(path)?;
    let header = rdr.headers()?.clone();
    if header.get(0).map(str::trim) != Some("key") {
        return Err(Error::parse(&origin, 1, "cell-table header must start with key"));
    }
    let from = if header.get(1).map(str::trim) == Some("lat") { 2 } else { 1 };
    let dim = vector_columns(&header, from, &origin)?;
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = record_line(&rec);
        let key: HexCell = rec[0].parse().map_err(|e: Error| Error::parse(&origin, line, e.to_string()))?;
        entries.push((key, parse_vector(&rec, from, &origin, line)?));
    }
    CellTableSupport::from_entries(dim, entries)
}

pub fn write_cell_table(t: &CellTableSupport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    let io = |err| Error::io(path, err);
    write!(buf, "key").map_err(io)?;
    for k in 0..t.dim {
        write!(buf, ",v_{k}").map_err(io)?;
    }
    writeln!(buf).map_err(io)?;
    for (key, v) in &t.cells {
        write!(buf, "{key}").map_err(io)?;
        for x in v {
            write!(buf, ",{x}").map_err(io)?;
        }
        writeln!(buf).map_err(io)?;
    }
    std::fs::write(path, buf).map_err(io)
}

/// Canonical store order: model, task, city, protocol, seed, metric.
pub fn sort_records(records: &mut [ResultRecord]) {
    records.sort_by(|a, b| {
        (&a.model, a.task, &a.city, a.protocol, a.seed, a.metric).cmp(&(&b.model, b.task, &b.city, b.protocol, b.seed, b.metric))
    });
}

pub fn render_result_store(records: &[ResultRecord]) -> String {
    let mut out = RESULT_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        let value = if r.value.is_finite() {
            format!("{}", r.value)
        } else {
            "NaN".to_string()
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            csv_field(&r.model),
            r.task,
            csv_field(&r.city),
            r.seed,
            r.protocol,
            r.metric,
            value,
            r.n_test
        ));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes the store in canonical order through a temporary file and an
/// atomic rename, so readers never observe a partial store.
pub fn write_result_store(path: impl AsRef<Path>, records: &[ResultRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let tmp = path.with_extension("csv.tmp");
    std::fs::write(&tmp, render_result_store(&sorted)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a result store; a missing file is an empty store.
pub fn read_result_store(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let origin = path.display().to_string();
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != RESULT_COLUMNS {
        return Err(Error::parse(
            &origin,
            1,
            format!("result store header must be {}", RESULT_COLUMNS.join(",")),
        ));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = record_line(&rec);
        let bad = |what: &str| Error::parse(&origin, line, format!("bad {what}"));
        out.push(ResultRecord {
            model: rec[0].to_string(),
            task: rec[1].parse().map_err(|_| bad("task"))?,
            city: rec[2].to_string(),
            seed: rec[3].trim().parse().map_err(|_| bad("seed"))?,
            protocol: rec[4].parse().map_err(|_| bad("protocol"))?,
            metric: rec[5].parse().map_err(|_| bad("metric"))?,
            value: rec[6].trim().parse().map_err(|_| bad("value"))?,
            n_test: rec[7].trim().parse().map_err(|_| bad("n_test"))?,
        });
    }
    Ok(out)
}
