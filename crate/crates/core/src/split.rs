//! Spatial block splits and the random-split diagnostic.
//!
//! A split depends only on the task dataset, the block grid, the fractions
//! and the seed. It never sees a representation, so every model evaluated
//! on one city-task pair receives the same partition.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Task, TaskDataset};
use crate::grid::{BlockGrid, BlockId};
use crate::{Error, Result};

/// Split seeds used throughout the benchmark.
pub const DEFAULT_SEEDS: [i64; 5] = [42, 24, 7, 0, 100];
pub const DEFAULT_TEST_FRAC: f64 = 0.2;
pub const DEFAULT_VAL_FRAC: f64 = 0.1;

/// Generator used for every seeded draw in the harness.
pub const RNG_NAME: &str = "ChaCha8 seeded from SHA-256 of the draw context";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Spatial,
    Random,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::Spatial => "spatial",
            Protocol::Random => "random",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "spatial" => Ok(Protocol::Spatial),
            "random" => Ok(Protocol::Random),
            other => Err(Error::InvalidArgument(format!("unknown split protocol {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitLabel {
    Train,
    Val,
    Test,
}

impl SplitLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitLabel::Train => "train",
            SplitLabel::Val => "val",
            SplitLabel::Test => "test",
        }
    }
}

impl FromStr for SplitLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(SplitLabel::Train),
            "val" => Ok(SplitLabel::Val),
            "test" => Ok(SplitLabel::Test),
            other => Err(Error::InvalidArgument(format!("unknown split label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BlockSets {
    pub train: BTreeSet<BlockId>,
    pub val: BTreeSet<BlockId>,
    pub test: BTreeSet<BlockId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub city: String,
    pub task: Task,
    pub seed: i64,
    pub protocol: Protocol,
    pub test_frac: f64,
    pub val_frac: f64,
    /// Per-unit label, parallel to the dataset's units.
    pub labels: Vec<SplitLabel>,
    /// Spatial protocol only.
    pub grid: Option<BlockGrid>,
    pub blocks: Option<BlockSets>,
    /// Hex SHA-256 over the parameters and every `(unit_id, label)` pair.
    pub hash: String,
}

impl SplitAssignment {
    pub fn indices(&self, which: SplitLabel) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == which)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, which: SplitLabel) -> usize {
        self.labels.iter().filter(|l| **l == which).count()
    }

    fn header(&self) -> String {
        format!(
            "city={}; task={}; protocol={}; seed={}; test_frac={}; val_frac={}; grid={}",
            self.city,
            self.task,
            self.protocol,
            self.seed,
            self.test_frac,
            self.val_frac,
            self.grid.map_or_else(|| "none".to_string(), |g| g.describe())
        )
    }
}

/// Deterministic RNG for a named draw.
///
/// The seed material is a SHA-256 digest of the context parts, so streams
/// are stable across platforms and independent of iteration order.
pub fn context_rng(parts: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let seed: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(seed)
}

/// A 64-bit seed derived from named context parts, for draws that take a
/// plain integer seed.
pub fn derive_seed(parts: &[&str]) -> u64 {
    use rand::RngCore;
    context_rng(parts).next_u64()
}

fn split_rng(city: &str, task: Task, protocol: Protocol, seed: i64) -> ChaCha8Rng {
    context_rng(&["split", city, task.as_str(), protocol.as_str(), &seed.to_string()])
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Number of test and validation items out of `total`.
///
/// Counts round half up with a floor of one per requested partition;
/// validation is drawn from what remains after the test draw.
pub fn partition_counts(total: usize, test_frac: f64, val_frac: f64) -> Result<(usize, usize)> {
    if !(test_frac > 0.0 && test_frac < 1.0) || !(0.0..1.0).contains(&val_frac) {
        return Err(Error::InvalidArgument(format!(
            "fractions must satisfy 0 < test < 1 and 0 <= val < 1 (got {test_frac}, {val_frac})"
        )));
    }
    if total < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 items to form train/val/test partitions, got {total}"
        )));
    }
    let n_test = round_half_up(test_frac * total as f64).clamp(1, total - 2);
    let rest = total - n_test;
    let n_val = if val_frac > 0.0 {
        round_half_up(val_frac * rest as f64).clamp(1, rest - 1)
    } else {
        0
    };
    Ok((n_test, n_val))
}

/// Shuffles `items` and labels positions: test first, then validation.
fn draw(items: &mut [usize], rng: &mut ChaCha8Rng, n_test: usize, n_val: usize) -> Vec<SplitLabel> {
    items.shuffle(rng);
    (0..items.len())
        .map(|pos| {
            if pos < n_test {
                SplitLabel::Test
            } else if pos < n_test + n_val {
                SplitLabel::Val
            } else {
                SplitLabel::Train
            }
        })
        .collect()
}

fn hash_assignment(header: &str, task: &TaskDataset, labels: &[SplitLabel]) -> String {
    let mut h = Sha256::new();
    h.update(header.as_bytes());
    for (u, l) in task.units.iter().zip(labels) {
        h.update(b"\n");
        h.update(u.unit_id.as_bytes());
        h.update(b",");
        h.update(l.as_str().as_bytes());
    }
    hex::encode(h.finalize())
}

/// Block-level split: occupied blocks are drawn into test, then validation,
/// and units inherit the label of their block.
pub fn spatial_split(task: &TaskDataset, grid: &BlockGrid, seed: i64, test_frac: f64, val_frac: f64) -> Result<SplitAssignment> {
    let unit_blocks: Vec<BlockId> = task.units.iter().map(|u| crate::grid::assign_block(u, grid)).collect();
    let occupied: BTreeSet<BlockId> = unit_blocks.iter().copied().collect();
    if occupied.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "{} {}: only {} occupied block(s); spatial split needs at least 3",
            task.city,
            task.task,
            occupied.len()
        )));
    }
    let (n_test, n_val) = partition_counts(occupied.len(), test_frac, val_frac)?;
    let blocks: Vec<BlockId> = occupied.into_iter().collect();
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    let mut rng = split_rng(&task.city, task.task, Protocol::Spatial, seed);
    order.shuffle(&mut rng);

    let mut sets = BlockSets::default();
    let mut block_label = BTreeMap::new();
    for (pos, &i) in order.iter().enumerate() {
        let (label, set) = if pos < n_test {
            (SplitLabel::Test, &mut sets.test)
        } else if pos < n_test + n_val {
            (SplitLabel::Val, &mut sets.val)
        } else {
            (SplitLabel::Train, &mut sets.train)
        };
        set.insert(blocks[i]);
        block_label.insert(blocks[i], label);
    }
    let labels: Vec<SplitLabel> = unit_blocks.iter().map(|b| block_label[b]).collect();

    let mut a = SplitAssignment {
        city: task.city.clone(),
        task: task.task,
        seed,
        protocol: Protocol::Spatial,
        test_frac,
        val_frac,
        labels,
        grid: Some(*grid),
        blocks: Some(sets),
        hash: String::new(),
    };
    a.hash = hash_assignment(&a.header(), task, &a.labels);
    Ok(a)
}

/// Unit-level split with the same fractions and seeds.
pub fn random_split(task: &TaskDataset, seed: i64, test_frac: f64, val_frac: f64) -> Result<SplitAssignment> {
    let (n_test, n_val) = partition_counts(task.len(), test_frac, val_frac)?;
    let mut order: Vec<usize> = (0..task.len()).collect();
    let mut rng = split_rng(&task.city, task.task, Protocol::Random, seed);
    let by_pos = draw(&mut order, &mut rng, n_test, n_val);
    let mut labels = vec![SplitLabel::Train; task.len()];
    for (pos, &unit) in order.iter().enumerate() {
        labels[unit] = by_pos[pos];
    }
    let mut a = SplitAssignment {
        city: task.city.clone(),
        task: task.task,
        seed,
        protocol: Protocol::Random,
        test_frac,
        val_frac,
        labels,
        grid: None,
        blocks: None,
        hash: String::new(),
    };
    a.hash = hash_assignment(&a.header(), task, &a.labels);
    Ok(a)
}

/// How many of the given spatial assignments hold out each block as test.
///
/// Every block of the shared grid appears in the result, including blocks
/// that were never tested.
pub fn test_block_frequency(assignments: &[SplitAssignment]) -> Result<BTreeMap<BlockId, usize>> {
    let first = assignments
        .first()
        .ok_or_else(|| Error::InvalidArgument("no assignments given".into()))?;
    let grid = first
        .grid
        .ok_or_else(|| Error::InvalidArgument("test-block frequency needs spatial assignments".into()))?;
    let mut freq: BTreeMap<BlockId, usize> = (0..grid.block_count()).map(|b| (b, 0)).collect();
    for a in assignments {
        if a.grid != Some(grid) || a.task != first.task || a.city != first.city {
            return Err(Error::InvalidArgument("assignments do not share one grid and task".into()));
        }
        for b in &a.blocks.as_ref().expect("spatial assignments carry block sets").test {
            *freq.get_mut(b).expect("block id within grid") += 1;
        }
    }
    Ok(freq)
}

/// Writes the split cache: a comment header with parameters and hash, then
/// `unit_id,label` rows.
pub fn write_split_cache(a: &SplitAssignment, task: &TaskDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    let io = |e| Error::io(path, e);
    writeln!(buf, "# {}", a.header()).map_err(io)?;
    writeln!(buf, "# hash={}", a.hash).map_err(io)?;
    writeln!(buf, "unit_id,label").map_err(io)?;
    for (u, l) in task.units.iter().zip(&a.labels) {
        writeln!(buf, "{},{}", u.unit_id, l.as_str()).map_err(io)?;
    }
    std::fs::write(path, buf).map_err(io)
}

/// Reads per-unit labels back from a split cache, checking them against the
/// task's units and the recorded hash.
pub fn read_split_cache(path: impl AsRef<Path>, task: &TaskDataset) -> Result<(Vec<SplitLabel>, String)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let mut hash = None;
    let mut labels = Vec::with_capacity(task.len());
    for (i, line) in &mut lines {
        if let Some(h) = line.strip_prefix("# hash=") {
            hash = Some(h.trim().to_string());
        } else if line.starts_with('#') || line == "unit_id,label" {
            continue;
        } else {
            let (id, l) = line
                .split_once(',')
                .ok_or_else(|| Error::parse(&origin, i + 1, "expected unit_id,label"))?;
            let k = labels.len();
            match task.units.get(k) {
                Some(u) if u.unit_id == id => labels.push(l.parse().map_err(|e: Error| Error::parse(&origin, i + 1, e.to_string()))?),
                _ => return Err(Error::parse(&origin, i + 1, format!("unit {id} does not match dataset order"))),
            }
        }
    }
    if labels.len() != task.len() {
        return Err(Error::Validation(format!(
            "split cache covers {} of {} units",
            labels.len(),
            task.len()
        )));
    }
    let hash = hash.ok_or_else(|| Error::parse(&origin, 1, "missing hash line"))?;
    Ok((labels, hash))
}
