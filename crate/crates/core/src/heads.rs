//! Fixed downstream heads: a linear probe and a one-hidden-layer MLP.
//!
//! Every model is probed with the same head family and training protocol:
//! Adam, mini-batches of 512, learning rate 1e-3, at most 100 epochs with
//! early stopping on validation loss (patience 10). Scalar targets are
//! standardized with statistics of the training units only.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::AlignedMatrix;
use crate::dataset::{Label, LabelKind};
use crate::split::{SplitAssignment, SplitLabel};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
/// Validation loss must drop by more than this to count as an improvement.
pub const EARLY_STOP_TOLERANCE: f64 = 1e-7;
pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Mlp,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(HeadKind::Linear),
            "mlp" => Ok(HeadKind::Mlp),
            other => Err(Error::InvalidArgument(format!("unknown head kind {other:?}"))),
        }
    }
}

impl HeadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Linear => "linear",
            HeadKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Scalar,
    /// Class logits over `C` classes, trained with softmax cross-entropy.
    Logits(usize),
    /// Distribution over `K` bins, trained with KL(target || softmax).
    Distribution(usize),
}

impl OutputKind {
    pub fn width(&self) -> usize {
        match *self {
            OutputKind::Scalar => 1,
            OutputKind::Logits(c) | OutputKind::Distribution(c) => c,
        }
    }

    pub fn label_kind(&self) -> LabelKind {
        match self {
            OutputKind::Scalar => LabelKind::Scalar,
            OutputKind::Logits(_) => LabelKind::Class,
            OutputKind::Distribution(_) => LabelKind::Distribution,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub output: OutputKind,
}

impl HeadConfig {
    /// The benchmark protocol for the given head and output.
    pub fn new(kind: HeadKind, output: OutputKind) -> Self {
        HeadConfig {
            kind,
            hidden_dim: 1024,
            batch_size: 512,
            learning_rate: 1e-3,
            max_epochs: 100,
            patience: 10,
            output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.hidden_dim > 0 && self.batch_size > 0 && self.max_epochs > 0 && self.patience > 0 && self.output.width() > 0;
        if !positive || self.patience >= self.max_epochs || !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid head config {self:?}")));
        }
        if matches!(self.output, OutputKind::Logits(1) | OutputKind::Distribution(1)) {
            return Err(Error::InvalidArgument(
                "class and distribution heads need at least 2 outputs".into(),
            ));
        }
        Ok(())
    }
}

/// Standardization of scalar targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    /// Population standard deviation of the training targets.
    pub std: f64,
    /// Zero training variance: the scaler is the identity.
    pub degenerate: bool,
}

impl TargetScaler {
    pub fn transform(&self, y: f64) -> f64 {
        if self.degenerate {
            y
        } else {
            (y - self.mean) / self.std
        }
    }

    pub fn inverse(&self, z: f64) -> f64 {
        if self.degenerate {
            z
        } else {
            z * self.std + self.mean
        }
    }
}

pub fn fit_scaler(train: &[f64]) -> Result<TargetScaler> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("cannot fit a scaler on no targets".into()));
    }
    if let Some(v) = train.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("training target {v}")));
    }
    let n = train.len() as f64;
    let mean = train.iter().sum::<f64>() / n;
    let std = (train.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n).sqrt();
    if std > 0.0 {
        Ok(TargetScaler {
            mean,
            std,
            degenerate: false,
        })
    } else {
        Ok(TargetScaler {
            mean,
            std: 0.0,
            degenerate: true,
        })
    }
}

/// Training targets in the layout the loss functions consume.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Scalar(Vec<f64>),
    Class(Vec<usize>),
    Distribution(Array2<f64>),
}

impl Targets {
    /// Gathers the labels at `idx`, checking they match the head output.
    pub fn gather(labels: &[Label], idx: &[usize], output: OutputKind) -> Result<Targets> {
        let mismatch = |i: usize| Error::InvalidArgument(format!("label {i} does not match head output {output:?}"));
        match output {
            OutputKind::Scalar => idx
                .iter()
                .map(|&i| match labels[i] {
                    Label::Scalar(v) => Ok(v),
                    _ => Err(mismatch(i)),
                })
                .collect::<Result<_>>()
                .map(Targets::Scalar),
            OutputKind::Logits(c) => idx
                .iter()
                .map(|&i| match labels[i] {
                    Label::Class(k) if k < c => Ok(k),
                    _ => Err(mismatch(i)),
                })
                .collect::<Result<_>>()
                .map(Targets::Class),
            OutputKind::Distribution(k) => {
                let mut m = Array2::zeros((idx.len(), k));
                for (r, &i) in idx.iter().enumerate() {
                    match &labels[i] {
                        Label::Distribution(p) if p.len() == k => m.row_mut(r).assign(&Array1::from(p.clone())),
                        _ => return Err(mismatch(i)),
                    }
                }
                Ok(Targets::Distribution(m))
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Targets::Scalar(v) => v.len(),
            Targets::Class(v) => v.len(),
            Targets::Distribution(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Scalar(v) => Targets::Scalar(rows.iter().map(|&i| v[i]).collect()),
            Targets::Class(v) => Targets::Class(rows.iter().map(|&i| v[i]).collect()),
            Targets::Distribution(m) => Targets::Distribution(m.select(Axis(0), rows)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    /// `fan_in x fan_out`
    w: Array2<f64>,
    b: Array1<f64>,
}

/// Head parameters; an MLP has two layers with a ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    layers: Vec<Layer>,
}

impl Params {
    fn init(kind: HeadKind, input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Params {
        let shapes: Vec<(usize, usize)> = match kind {
            HeadKind::Linear => vec![(input, output)],
            HeadKind::Mlp => vec![(input, hidden), (hidden, output)],
        };
        let layers = shapes
            .into_iter()
            .map(|(fi, fo)| {
                let a = (6.0 / (fi + fo) as f64).sqrt();
                let w = Array2::from_shape_fn((fi, fo), |_| rng.random_range(-a..=a));
                Layer { w, b: Array1::zeros(fo) }
            })
            .collect();
        Params { layers }
    }

    fn zeros_like(&self) -> Params {
        Params {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All parameters in a fixed order: per layer, weights row-major then biases.
    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied()).collect()
    }

    fn get_mut(&mut self, mut k: usize) -> &mut f64 {
        for l in &mut self.layers {
            if k < l.w.len() {
                let c = l.w.ncols();
                return &mut l.w[(k / c, k % c)];
            }
            k -= l.w.len();
            if k < l.b.len() {
                return &mut l.b[k];
            }
            k -= l.b.len();
        }
        panic!("parameter index out of range")
    }

    /// Pre-activations of every layer; the last entry is the output.
    fn forward(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut zs = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let z = a.dot(&l.w) + &l.b;
            if i + 1 < self.layers.len() {
                a = z.mapv(relu);
            }
            zs.push(z);
        }
        zs
    }

    /// Parameter gradients given the output gradient `dz`.
    fn backward(&self, x: ArrayView2<f64>, zs: &[Array2<f64>], mut dz: Array2<f64>) -> Params {
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let input = if i == 0 { x.to_owned() } else { zs[i - 1].mapv(relu) };
            let gw = input.t().dot(&dz);
            let gb = dz.sum_axis(Axis(0));
            if i > 0 {
                let da = dz.dot(&self.layers[i].w.t());
                dz = da * zs[i - 1].mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });
            }
            grads.push(Layer { w: gw, b: gb });
        }
        grads.reverse();
        Params { layers: grads }
    }
}

fn relu(z: f64) -> f64 {
    z.max(0.0)
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut q = z.clone();
    for mut row in q.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    q
}

fn log_softmax_row(z: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    z.mapv(|v| v - lse)
}

/// Mean loss over the batch and its gradient with respect to the outputs.
///
/// Scalar targets must already be scaled. The distribution loss is exact
/// KL(p || softmax(z)) with 0 ln 0 = 0.
fn loss_and_dz(z: &Array2<f64>, t: &Targets) -> (f64, Array2<f64>) {
    let b = z.nrows() as f64;
    match t {
        Targets::Scalar(y) => {
            let mut dz = z.clone();
            let mut loss = 0.0;
            for (i, yi) in y.iter().enumerate() {
                let r = z[(i, 0)] - yi;
                loss += r * r;
                dz[(i, 0)] = 2.0 * r / b;
            }
            (loss / b, dz)
        }
        Targets::Class(y) => {
            let mut dz = softmax_rows(z);
            let mut loss = 0.0;
            for (i, &k) in y.iter().enumerate() {
                loss -= log_softmax_row(z.row(i))[k];
                dz[(i, k)] -= 1.0;
            }
            (loss / b, dz / b)
        }
        Targets::Distribution(p) => {
            let q = softmax_rows(z);
            let mut loss = 0.0;
            for (i, prow) in p.rows().into_iter().enumerate() {
                let lq = log_softmax_row(z.row(i));
                for (pk, lqk) in prow.iter().zip(lq.iter()) {
                    if *pk > 0.0 {
                        loss += pk * (pk.ln() - lqk);
                    }
                }
            }
            (loss / b, (q - p) / b)
        }
    }
}

fn batch_loss(params: &Params, x: ArrayView2<f64>, t: &Targets) -> f64 {
    let zs = params.forward(x);
    loss_and_dz(zs.last().expect("at least one layer"), t).0
}

fn loss_and_grad(params: &Params, x: ArrayView2<f64>, t: &Targets) -> (f64, Params) {
    let zs = params.forward(x);
    let (loss, dz) = loss_and_dz(zs.last().expect("at least one layer"), t);
    (loss, params.backward(x, &zs, dz))
}

struct Adam {
    lr: f64,
    t: i32,
    m: Params,
    v: Params,
}

impl Adam {
    fn new(params: &Params, lr: f64) -> Adam {
        Adam {
            lr,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    fn step(&mut self, params: &mut Params, grads: &Params) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        let lr = self.lr;
        for (((p, g), m), v) in params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPSILON);
            };
            ndarray::Zip::from(&mut p.w)
                .and(&g.w)
                .and(&mut m.w)
                .and(&mut v.w)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut p.b)
                .and(&g.b)
                .and(&mut m.b)
                .and(&mut v.b)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}

/// Patience-based early stopping on a loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records the loss after `epoch` (1-based). Returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best - EARLY_STOP_TOLERANCE {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    pub cfg: HeadConfig,
    pub params: Params,
    pub scaler: Option<TargetScaler>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Constant training targets: the scaler was disabled.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Scalar(Vec<f64>),
    Class(Vec<usize>),
    Distribution(Vec<Vec<f64>>),
}

impl TrainedHead {
    pub fn input_dim(&self) -> usize {
        self.params.input_dim()
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Predictions> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        let zs = self.params.forward(x);
        let z = zs.last().expect("at least one layer");
        Ok(match self.cfg.output {
            OutputKind::Scalar => {
                let s = self.scaler.expect("scalar heads carry a scaler");
                Predictions::Scalar(z.column(0).iter().map(|&v| s.inverse(v)).collect())
            }
            OutputKind::Logits(_) => Predictions::Class(
                z.rows()
                    .into_iter()
                    .map(|r| argmax(r.as_slice().expect("standard layout")))
                    .collect(),
            ),
            OutputKind::Distribution(_) => Predictions::Distribution(softmax_rows(z).rows().into_iter().map(|r| r.to_vec()).collect()),
        })
    }
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn scale_targets(t: &Targets, s: Option<TargetScaler>) -> Targets {
    match (t, s) {
        (Targets::Scalar(y), Some(s)) => Targets::Scalar(y.iter().map(|&v| s.transform(v)).collect()),
        _ => t.clone(),
    }
}

/// Trains a head on explicit train and validation rows.
///
/// Only `train_t` and `val_t` are read, so units outside those sets cannot
/// influence the scaler or the stopping decision.
pub fn train_rows(
    x_train: ArrayView2<f64>,
    train_t: &Targets,
    x_val: ArrayView2<f64>,
    val_t: &Targets,
    cfg: &HeadConfig,
    run_seed: u64,
) -> Result<TrainedHead> {
    cfg.validate()?;
    if train_t.is_empty() || val_t.is_empty() {
        return Err(Error::Training(format!(
            "need nonempty train and validation sets (got {} and {})",
            train_t.len(),
            val_t.len()
        )));
    }
    if x_train.nrows() != train_t.len() || x_val.nrows() != val_t.len() || x_train.ncols() != x_val.ncols() {
        return Err(Error::InvalidArgument("feature rows and targets disagree".into()));
    }
    if x_train.iter().chain(x_val.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training features".into()));
    }

    let scaler = match train_t {
        Targets::Scalar(y) => Some(fit_scaler(y)?),
        _ => None,
    };
    let train_s = scale_targets(train_t, scaler);
    let val_s = scale_targets(val_t, scaler);

    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    let mut params = Params::init(cfg.kind, x_train.ncols(), cfg.hidden_dim, cfg.output.width(), &mut rng);
    let mut adam = Adam::new(&params, cfg.learning_rate);
    let mut stop = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut order: Vec<usize> = (0..train_t.len()).collect();
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x_train.select(Axis(0), chunk);
            let tb = train_s.select(chunk);
            let (loss, grads) = loss_and_grad(&params, xb.view(), &tb);
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite training loss at epoch {epoch}")));
            }
            adam.step(&mut params, &grads);
        }
        epochs_run = epoch;
        let val_loss = batch_loss(&params, x_val, &val_s);
        if !val_loss.is_finite() {
            return Err(Error::Training(format!("non-finite validation loss at epoch {epoch}")));
        }
        if stop.observe(epoch, val_loss) {
            best.clone_from(&params);
        }
        if stop.should_stop() {
            break;
        }
    }

    Ok(TrainedHead {
        cfg: *cfg,
        params: best,
        scaler,
        epochs_run,
        best_epoch: stop.best_epoch(),
        best_val_loss: stop.best(),
        degenerate: scaler.is_some_and(|s| s.degenerate),
    })
}

/// Valid row indices carrying the given split label.
pub fn split_rows(features: &AlignedMatrix, split: &SplitAssignment, which: SplitLabel) -> Vec<usize> {
    split
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, l)| *l == which && features.valid[i])
        .map(|(i, _)| i)
        .collect()
}

/// Trains on the valid training units of `split`, stopping on its
/// validation units.
pub fn train_head(
    features: &AlignedMatrix,
    labels: &[Label],
    split: &SplitAssignment,
    cfg: &HeadConfig,
    run_seed: u64,
) -> Result<TrainedHead> {
    if labels.len() != features.n() || split.labels.len() != features.n() {
        return Err(Error::InvalidArgument(format!(
            "features cover {} units, labels {}, split {}",
            features.n(),
            labels.len(),
            split.labels.len()
        )));
    }
    let tr = split_rows(features, split, SplitLabel::Train);
    let va = split_rows(features, split, SplitLabel::Val);
    if tr.is_empty() || va.is_empty() {
        return Err(Error::Training(format!(
            "after masking invalid rows: {} train and {} validation units",
            tr.len(),
            va.len()
        )));
    }
    let train_t = Targets::gather(labels, &tr, cfg.output)?;
    let val_t = Targets::gather(labels, &va, cfg.output)?;
    let x_train = features.rows.select(Axis(0), &tr);
    let x_val = features.rows.select(Axis(0), &va);
    train_rows(x_train.view(), &train_t, x_val.view(), &val_t, cfg, run_seed)
}

/// A small batch for comparing analytic and numerical gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckBatch {
    pub x: Array2<f64>,
    pub targets: Targets,
}

impl GradCheckBatch {
    /// Seeded random inputs and targets matching `cfg.output`.
    pub fn random(cfg: &HeadConfig, n: usize, dim: usize, seed: u64) -> GradCheckBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0));
        let targets = match cfg.output {
            OutputKind::Scalar => Targets::Scalar((0..n).map(|_| rng.random_range(-2.0..2.0)).collect()),
            OutputKind::Logits(c) => Targets::Class((0..n).map(|_| rng.random_range(0..c)).collect()),
            OutputKind::Distribution(k) => {
                let mut p = Array2::from_shape_fn((n, k), |_| rng.random_range(0.05..1.0));
                for mut row in p.rows_mut() {
                    let s = row.sum();
                    row /= s;
                }
                Targets::Distribution(p)
            }
        };
        GradCheckBatch { x, targets }
    }
}

/// Largest relative error between analytic parameter gradients and central
/// differences with step [`GRADCHECK_STEP`], where the relative error of a
/// pair is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check(cfg: &HeadConfig, batch: &GradCheckBatch, run_seed: u64) -> Result<f64> {
    cfg.validate()?;
    if batch.x.nrows() != batch.targets.len() || batch.x.nrows() == 0 {
        return Err(Error::InvalidArgument("gradient-check batch rows and targets disagree".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    let mut params = Params::init(cfg.kind, batch.x.ncols(), cfg.hidden_dim, cfg.output.width(), &mut rng);
    // nonzero biases so their gradients are exercised away from the origin
    for l in &mut params.layers {
        l.b.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    }
    let x = batch.x.view();
    let (_, grads) = loss_and_grad(&params, x, &batch.targets);
    let analytic = grads.flat();
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.into_iter().enumerate() {
        let orig = *params.get_mut(k);
        *params.get_mut(k) = orig + GRADCHECK_STEP;
        let up = batch_loss(&params, x, &batch.targets);
        *params.get_mut(k) = orig - GRADCHECK_STEP;
        let down = batch_loss(&params, x, &batch.targets);
        *params.get_mut(k) = orig;
        let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Relative-error bound for linear heads, whose loss is smooth and cheap.
pub const GRADCHECK_LINEAR_TOL: f64 = 1e-6;
/// Relative-error bound for MLP heads, loosened for ReLU kinks.
pub const GRADCHECK_MLP_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckCase {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// The standard checks: linear with MSE, MLP with cross-entropy, MLP with
/// KL. The MLP uses a hidden width of 32 so every parameter can be
/// perturbed; the gradient code does not depend on the width.
pub fn standard_gradient_checks() -> Result<Vec<GradCheckCase>> {
    let cases = [
        ("linear+mse", HeadKind::Linear, OutputKind::Scalar, GRADCHECK_LINEAR_TOL),
        ("mlp+cross_entropy", HeadKind::Mlp, OutputKind::Logits(4), GRADCHECK_MLP_TOL),
        ("mlp+kl", HeadKind::Mlp, OutputKind::Distribution(5), GRADCHECK_MLP_TOL),
    ];
    cases
        .into_iter()
        .map(|(name, kind, output, tolerance)| {
            let cfg = HeadConfig {
                hidden_dim: 32,
                ..HeadConfig::new(kind, output)
            };
            let batch = GradCheckBatch::random(&cfg, 16, 12, 7);
            Ok(GradCheckCase {
                name,
                max_rel_error: gradient_check(&cfg, &batch, 13)?,
                tolerance,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::regression_metrics;

    fn small(kind: HeadKind, output: OutputKind) -> HeadConfig {
        HeadConfig {
            hidden_dim: 16,
            ..HeadConfig::new(kind, output)
        }
    }

    #[test]
    fn scaler_population_convention() {
        let s = fit_scaler(&[0.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.std, s.degenerate), (1.0, 1.0, false));
        assert!(fit_scaler(&[3.0, 3.0, 3.0]).unwrap().degenerate);
        let s = fit_scaler(&[0.3, -1.7, 12.5, 4.0]).unwrap();
        for y in [-3.0, 0.0, 0.1, 1e3] {
            assert!((s.inverse(s.transform(y)) - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn config_validation() {
        assert!(HeadConfig::new(HeadKind::Mlp, OutputKind::Scalar).validate().is_ok());
        let mut c = HeadConfig::new(HeadKind::Linear, OutputKind::Scalar);
        c.patience = 100;
        assert!(c.validate().is_err());
        assert!(HeadConfig::new(HeadKind::Linear, OutputKind::Logits(1)).validate().is_err());
    }

    #[test]
    fn early_stopping_on_rising_trace() {
        let mut s = EarlyStopping::new(10);
        let mut stopped_at = None;
        for epoch in 1..=100 {
            s.observe(epoch, epoch as f64);
            if s.should_stop() {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(11));
        assert_eq!(s.best_epoch(), 1);
    }

    #[test]
    fn early_stopping_ignores_tiny_gains() {
        let mut s = EarlyStopping::new(2);
        assert!(s.observe(1, 1.0));
        assert!(!s.observe(2, 1.0 - 5e-8));
        assert!(s.observe(3, 0.5));
        assert!(!s.should_stop());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cases = [
            (HeadKind::Linear, OutputKind::Scalar, 1e-6),
            (HeadKind::Linear, OutputKind::Logits(3), 1e-6),
            (HeadKind::Mlp, OutputKind::Scalar, 1e-4),
            (HeadKind::Mlp, OutputKind::Logits(4), 1e-4),
            (HeadKind::Mlp, OutputKind::Distribution(5), 1e-4),
        ];
        for (kind, out, tol) in cases {
            let cfg = small(kind, out);
            let batch = GradCheckBatch::random(&cfg, 8, 16, 3);
            let err = gradient_check(&cfg, &batch, 11).unwrap();
            assert!(err < tol, "{kind:?} {out:?}: {err}");
        }
    }

    fn toy_rows(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn separable_two_class() {
        let x = toy_rows(200, 1);
        let y: Vec<usize> = x.rows().into_iter().map(|r| usize::from(r[0] + 0.5 * r[1] > 0.0)).collect();
        let cfg = HeadConfig {
            batch_size: 16,
            learning_rate: 1e-2,
            ..small(HeadKind::Mlp, OutputKind::Logits(2))
        };
        let t = Targets::Class(y.clone());
        let h = train_rows(x.view(), &t, x.view(), &t, &cfg, 5).unwrap();
        let Predictions::Class(p) = h.predict(x.view()).unwrap() else {
            panic!()
        };
        let acc = p.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
        assert!(acc >= 0.99, "training accuracy {acc}");
    }

    #[test]
    fn identity_task_linear() {
        // features are the target replicated over 8 columns; at lr 1e-3 the
        // protocol needs a few thousand batches to reach the optimum
        let y: Vec<f64> = toy_rows(12_000, 2).column(0).to_vec();
        let x = Array2::from_shape_fn((y.len(), 8), |(i, _)| y[i]);
        let (tr, va, te) = (0..10_000, 10_000..11_000, 11_000..12_000);
        let sel = |r: std::ops::Range<usize>| x.slice(ndarray::s![r, ..]);
        let cfg = small(HeadKind::Linear, OutputKind::Scalar);
        let h = train_rows(
            sel(tr.clone()),
            &Targets::Scalar(y[tr].to_vec()),
            sel(va.clone()),
            &Targets::Scalar(y[va].to_vec()),
            &cfg,
            9,
        )
        .unwrap();
        let Predictions::Scalar(p) = h.predict(sel(te.clone())).unwrap() else {
            panic!()
        };
        let r2 = regression_metrics(&y[te], &p).unwrap().r2.value;
        assert!(r2 > 0.99, "{r2}");
    }

    #[test]
    fn training_is_deterministic() {
        let x = toy_rows(300, 4);
        let y: Vec<f64> = x.rows().into_iter().map(|r| r[0] - r[1]).collect();
        let t = Targets::Scalar(y);
        let cfg = HeadConfig {
            max_epochs: 5,
            patience: 2,
            batch_size: 64,
            ..small(HeadKind::Mlp, OutputKind::Scalar)
        };
        let a = train_rows(x.view(), &t, x.view(), &t, &cfg, 77).unwrap();
        let b = train_rows(x.view(), &t, x.view(), &t, &cfg, 77).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, train_rows(x.view(), &t, x.view(), &t, &cfg, 78).unwrap().params);
    }

    #[test]
    fn distribution_outputs_sum_to_one() {
        let cfg = HeadConfig {
            max_epochs: 3,
            patience: 1,
            ..small(HeadKind::Mlp, OutputKind::Distribution(4))
        };
        let b = GradCheckBatch::random(&cfg, 50, 6, 8);
        let h = train_rows(b.x.view(), &b.targets, b.x.view(), &b.targets, &cfg, 1).unwrap();
        let Predictions::Distribution(q) = h.predict(b.x.view()).unwrap() else {
            panic!()
        };
        for row in &q {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        assert_eq!(h.predict(b.x.view()).unwrap(), Predictions::Distribution(q));
        assert!(h.predict(Array2::zeros((2, 5)).view()).is_err());
    }

    #[test]
    fn zero_head_predicts_train_mean() {
        let x = toy_rows(40, 6);
        let y: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let cfg = HeadConfig {
            max_epochs: 2,
            patience: 1,
            ..small(HeadKind::Linear, OutputKind::Scalar)
        };
        let t = Targets::Scalar(y.clone());
        let mut h = train_rows(x.view(), &t, x.view(), &t, &cfg, 0).unwrap();
        h.params = h.params.zeros_like();
        let Predictions::Scalar(p) = h.predict(x.view()).unwrap() else {
            panic!()
        };
        assert!(p.iter().all(|&v| (v - 19.5).abs() < 1e-12));
    }

    #[test]
    fn tiny_step_does_not_raise_loss() {
        let b = GradCheckBatch::random(&small(HeadKind::Mlp, OutputKind::Logits(3)), 8, 5, 2);
        for out in [OutputKind::Scalar, OutputKind::Logits(3)] {
            let cfg = small(HeadKind::Mlp, out);
            let b = GradCheckBatch {
                targets: GradCheckBatch::random(&cfg, 8, 5, 2).targets,
                ..b.clone()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut p = Params::init(cfg.kind, 5, cfg.hidden_dim, out.width(), &mut rng);
            let (before, g) = loss_and_grad(&p, b.x.view(), &b.targets);
            for (l, gl) in p.layers.iter_mut().zip(&g.layers) {
                l.w.scaled_add(-1e-6, &gl.w);
                l.b.scaled_add(-1e-6, &gl.b);
            }
            assert!(batch_loss(&p, b.x.view(), &b.targets) <= before);
        }
    }

    #[test]
    fn rejects_empty_partitions() {
        let x = toy_rows(4, 0);
        let t = Targets::Scalar(vec![1.0; 4]);
        let none = Targets::Scalar(vec![]);
        let cfg = small(HeadKind::Linear, OutputKind::Scalar);
        assert!(train_rows(x.view(), &t, x.slice(ndarray::s![0..0, ..]), &none, &cfg, 0).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    }
}
