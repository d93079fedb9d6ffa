//! Regression, classification and distribution metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Stabilizer added to predicted probabilities inside the KL logarithm.
pub const KL_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    /// Maps a score so that larger is always better.
    pub fn orient(&self, v: f64) -> f64 {
        match self {
            Direction::HigherBetter => v,
            Direction::LowerBetter => -v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    R2,
    Mae,
    Rmse,
    MacroF1,
    MacroPrecision,
    MacroRecall,
    Kl,
    Chebyshev,
    L1,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Metric::R2,
        Metric::Mae,
        Metric::Rmse,
        Metric::MacroF1,
        Metric::MacroPrecision,
        Metric::MacroRecall,
        Metric::Kl,
        Metric::Chebyshev,
        Metric::L1,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::R2 => "r2",
            Metric::Mae => "mae",
            Metric::Rmse => "rmse",
            Metric::MacroF1 => "macro_f1",
            Metric::MacroPrecision => "macro_precision",
            Metric::MacroRecall => "macro_recall",
            Metric::Kl => "kl",
            Metric::Chebyshev => "chebyshev",
            Metric::L1 => "l1",
        }
    }

    pub fn direction(&self) -> Direction {
        match self {
            Metric::R2 | Metric::MacroF1 | Metric::MacroPrecision | Metric::MacroRecall => Direction::HigherBetter,
            _ => Direction::LowerBetter,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: Metric,
    pub value: f64,
    /// Set when a denominator in the formula vanished.
    pub degenerate: bool,
}

impl MetricValue {
    fn new(metric: Metric, value: f64, degenerate: bool) -> Self {
        MetricValue { metric, value, degenerate }
    }

    pub fn direction(&self) -> Direction {
        self.metric.direction()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionMetrics {
    pub r2: MetricValue,
    pub mae: MetricValue,
    pub rmse: MetricValue,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationMetrics {
    pub macro_f1: MetricValue,
    pub macro_precision: MetricValue,
    pub macro_recall: MetricValue,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistributionMetrics {
    pub kl: MetricValue,
    pub chebyshev: MetricValue,
    pub l1: MetricValue,
}

macro_rules! impl_values {
    ($t:ty, $a:ident, $b:ident, $c:ident) => {
        impl $t {
            /// Primary metric first.
            pub fn values(&self) -> [MetricValue; 3] {
                [self.$a, self.$b, self.$c]
            }
        }
    };
}
impl_values!(RegressionMetrics, r2, mae, rmse);
impl_values!(ClassificationMetrics, macro_f1, macro_precision, macro_recall);
impl_values!(DistributionMetrics, kl, chebyshev, l1);

/// R², MAE and RMSE. Zero target variance makes R² degenerate (NaN).
pub fn regression_metrics(y: &[f64], y_hat: &[f64]) -> Result<RegressionMetrics> {
    if y.len() != y_hat.len() {
        return Err(Error::DimMismatch {
            expected: y.len(),
            actual: y_hat.len(),
        });
    }
    if y.is_empty() {
        return Err(Error::InvalidArgument("regression metrics need at least one sample".into()));
    }
    if y.iter().chain(y_hat).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression target or prediction".into()));
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let (mut ss_res, mut ss_tot, mut abs) = (0.0, 0.0, 0.0);
    for (t, p) in y.iter().zip(y_hat) {
        let e = t - p;
        ss_res += e * e;
        abs += e.abs();
        ss_tot += (t - mean) * (t - mean);
    }
    let r2 = if ss_tot > 0.0 {
        MetricValue::new(Metric::R2, 1.0 - ss_res / ss_tot, false)
    } else {
        MetricValue::new(Metric::R2, f64::NAN, true)
    };
    Ok(RegressionMetrics {
        r2,
        mae: MetricValue::new(Metric::Mae, abs / n, false),
        rmse: MetricValue::new(Metric::Rmse, (ss_res / n).sqrt(), false),
    })
}

/// Macro-averaged F1, precision and recall over `n_classes` classes.
///
/// A class whose precision or recall denominator is zero contributes 0 to
/// that average and marks the result degenerate.
pub fn classification_metrics(y: &[usize], y_hat: &[usize], n_classes: usize) -> Result<ClassificationMetrics> {
    if n_classes == 0 {
        return Err(Error::InvalidArgument("class count must be positive".into()));
    }
    if y.len() != y_hat.len() {
        return Err(Error::DimMismatch {
            expected: y.len(),
            actual: y_hat.len(),
        });
    }
    if let Some(c) = y.iter().chain(y_hat).find(|&&c| c >= n_classes) {
        return Err(Error::InvalidArgument(format!("class {c} outside [0, {n_classes})")));
    }
    let mut tp = vec![0usize; n_classes];
    let mut pred = vec![0usize; n_classes];
    let mut actual = vec![0usize; n_classes];
    for (&t, &p) in y.iter().zip(y_hat) {
        pred[p] += 1;
        actual[t] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    let (mut dp, mut dr, mut df) = (false, false, false);
    for c in 0..n_classes {
        let p = if pred[c] > 0 {
            tp[c] as f64 / pred[c] as f64
        } else {
            dp = true;
            0.0
        };
        let r = if actual[c] > 0 {
            tp[c] as f64 / actual[c] as f64
        } else {
            dr = true;
            0.0
        };
        // zero precision and recall leave F1 undefined: counted as 0
        let f = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            df = true;
            0.0
        };
        sp += p;
        sr += r;
        sf += f;
    }
    let c = n_classes as f64;
    Ok(ClassificationMetrics {
        macro_f1: MetricValue::new(Metric::MacroF1, sf / c, df || dp || dr),
        macro_precision: MetricValue::new(Metric::MacroPrecision, sp / c, dp),
        macro_recall: MetricValue::new(Metric::MacroRecall, sr / c, dr),
    })
}

/// KL(p || q) in nats with `q + KL_EPSILON` in the denominator, Chebyshev
/// and L1 distances, each averaged over units.
pub fn distribution_metrics(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<DistributionMetrics> {
    if p.len() != q.len() {
        return Err(Error::DimMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    if p.is_empty() {
        return Err(Error::InvalidArgument("distribution metrics need at least one unit".into()));
    }
    let (mut kl, mut cheb, mut l1) = (0.0, 0.0, 0.0);
    for (i, (pi, qi)) in p.iter().zip(q).enumerate() {
        if pi.len() != qi.len() {
            return Err(Error::DimMismatch {
                expected: pi.len(),
                actual: qi.len(),
            });
        }
        for v in pi.iter().chain(qi) {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "unit {i}: distribution entry {v} is negative or non-finite"
                )));
            }
        }
        for (name, d) in [("target", pi), ("prediction", qi)] {
            let s: f64 = d.iter().sum();
            if (s - 1.0).abs() > crate::dataset::DISTRIBUTION_TOLERANCE {
                return Err(Error::InvalidArgument(format!("unit {i}: {name} sums to {s}")));
            }
        }
        let mut k_kl = 0.0;
        let mut k_max = 0.0f64;
        let mut k_l1 = 0.0;
        for (&a, &b) in pi.iter().zip(qi) {
            if a > 0.0 {
                k_kl += a * (a / (b + KL_EPSILON)).ln();
            }
            let d = (a - b).abs();
            k_max = k_max.max(d);
            k_l1 += d;
        }
        kl += k_kl;
        cheb += k_max;
        l1 += k_l1;
    }
    let n = p.len() as f64;
    Ok(DistributionMetrics {
        kl: MetricValue::new(Metric::Kl, kl / n, false),
        chebyshev: MetricValue::new(Metric::Chebyshev, cheb / n, false),
        l1: MetricValue::new(Metric::L1, l1 / n, false),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_regression() {
        let y = [1.0, 5.0, -2.0];
        let m = regression_metrics(&y, &y).unwrap();
        assert_eq!(m.r2.value, 1.0);
        assert_eq!(m.mae.value, 0.0);
        assert_eq!(m.rmse.value, 0.0);
    }

    #[test]
    fn mean_predictor_has_zero_r2() {
        let y = [1.0, 2.0, 6.0];
        let m = regression_metrics(&y, &[3.0; 3]).unwrap();
        assert!(m.r2.value.abs() < 1e-15);
    }

    #[test]
    fn hand_regression_example() {
        let m = regression_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((m.mae.value - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.rmse.value - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((m.r2.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_target_r2_is_degenerate() {
        let m = regression_metrics(&[2.0, 2.0], &[1.0, 3.0]).unwrap();
        assert!(m.r2.degenerate && m.r2.value.is_nan());
        assert!(!m.mae.degenerate);
    }

    #[test]
    fn regression_length_mismatch() {
        assert!(regression_metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn perfect_classification() {
        let y = [0, 1, 2, 1];
        let m = classification_metrics(&y, &y, 3).unwrap();
        for v in m.values() {
            assert_eq!(v.value, 1.0);
            assert!(!v.degenerate);
        }
    }

    #[test]
    fn hand_macro_f1() {
        let m = classification_metrics(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert!((m.macro_f1.value - 11.0 / 15.0).abs() < 1e-12);
        assert!((m.macro_precision.value - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((m.macro_recall.value - 0.75).abs() < 1e-12);
    }

    #[test]
    fn all_predicted_as_class_zero() {
        let m = classification_metrics(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap();
        // P0 = 1/2, R0 = 1, F1_0 = 2/3; class 1 never predicted
        assert!((m.macro_f1.value - (2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(m.macro_recall.value, 0.5);
        assert!(m.macro_precision.degenerate);
        assert!(m.macro_f1.degenerate);
    }

    #[test]
    fn zero_classes_is_an_error() {
        assert!(classification_metrics(&[], &[], 0).is_err());
        assert!(classification_metrics(&[2], &[0], 2).is_err());
    }

    #[test]
    fn identical_distributions() {
        let p = vec![vec![0.1, 0.6, 0.3], vec![1.0, 0.0, 0.0]];
        let m = distribution_metrics(&p, &p).unwrap();
        assert!(m.kl.value.abs() < 1e-7);
        assert_eq!(m.chebyshev.value, 0.0);
        assert_eq!(m.l1.value, 0.0);
    }

    #[test]
    fn hand_kl_example() {
        let m = distribution_metrics(&[vec![0.5, 0.5]], &[vec![0.25, 0.75]]).unwrap();
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        // epsilon shifts the value by O(1e-8)
        assert!((m.kl.value - want).abs() < 1e-7);
        assert!((m.kl.value - 0.1438).abs() < 1e-4);
        assert_eq!(m.chebyshev.value, 0.25);
        assert_eq!(m.l1.value, 0.5);
    }

    #[test]
    fn one_hot_vs_uniform() {
        let m = distribution_metrics(&[vec![0.0, 1.0, 0.0, 0.0]], &[vec![0.25; 4]]).unwrap();
        assert!((m.kl.value - 4f64.ln()).abs() < 1e-7);
    }

    #[test]
    fn negative_entries_rejected() {
        assert!(distribution_metrics(&[vec![1.1, -0.1]], &[vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn directions() {
        use Direction::*;
        let hb: Vec<_> = Metric::ALL.iter().filter(|m| m.direction() == HigherBetter).collect();
        assert_eq!(hb, [&Metric::R2, &Metric::MacroF1, &Metric::MacroPrecision, &Metric::MacroRecall]);
        assert_eq!("macro_recall".parse::<Metric>().unwrap(), Metric::MacroRecall);
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(1e-3f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn r2_bounded_and_mae_below_rmse(pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..50)) {
            let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = regression_metrics(&y, &p).unwrap();
            if !m.r2.degenerate {
                prop_assert!(m.r2.value <= 1.0);
            }
            prop_assert!(m.mae.value <= m.rmse.value + 1e-12);
        }

        #[test]
        fn distance_ordering(p in simplex(5), q in simplex(5)) {
            let m = distribution_metrics(&[p], &[q]).unwrap();
            prop_assert!(m.chebyshev.value <= m.l1.value + 1e-15);
            prop_assert!(m.l1.value <= 2.0 + 1e-12);
            prop_assert!(m.kl.value >= -1e-6);
        }
    }
}
