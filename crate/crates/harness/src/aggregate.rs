//! Across-seed statistics and Welch comparisons between arms.

use allo_core::metrics::{Cell, MetricsLog};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::HarnessError;

/// Two-sided p-values below this are reported as significant.
pub const SIGNIFICANCE_LEVEL: f64 = 0.01;

/// Normal quantile for a two-sided 95% interval.
const Z_95: f64 = 1.959963984540054;

/// Columns of the aggregate CSV consumed by the plotting tools.
pub const AGGREGATE_COLUMNS: [&str; 10] =
    ["map", "arm", "metric", "step", "n", "mean", "std", "ci_low", "ci_high", "ci_defined"];

/// Columns of the comparison CSV consumed by the plotting tools.
pub const COMPARISON_COLUMNS: [&str; 13] =
    ["map", "metric", "arm_a", "arm_b", "n_a", "n_b", "mean_a", "mean_b", "diff", "t", "df", "p", "significant"];

/// Sample statistics of one metric at one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; NaN for a single value.
    pub std: f64,
    /// Normal-approximation 95% interval; NaN bounds unless `n >= 2`.
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 };
        let std = if n < 2 {
            f64::NAN
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        let (ci_low, ci_high) = if n < 2 {
            (f64::NAN, f64::NAN)
        } else {
            let half = Z_95 * std / (n as f64).sqrt();
            (mean - half, mean + half)
        };
        Stats { n, mean, std, ci_low, ci_high }
    }

    pub fn ci_defined(&self) -> bool {
        self.n >= 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointStats {
    pub step: f64,
    pub stats: Stats,
}

/// Per-checkpoint statistics of `column` across runs sharing a checkpoint
/// grid. The grid is the first column of each log.
pub fn aggregate(logs: &[&MetricsLog], column: &str) -> Result<Vec<CheckpointStats>, HarnessError> {
    let Some(first) = logs.first() else {
        return Ok(Vec::new());
    };
    let grid_name = first.header().first().cloned().unwrap_or_default();
    let grid = first.column(&grid_name).unwrap_or_default();
    let mut columns = Vec::with_capacity(logs.len());
    for (k, log) in logs.iter().enumerate() {
        if log.column(&grid_name).as_ref() != Some(&grid) {
            return Err(HarnessError::MismatchedGrids(format!("log {k} differs from log 0 in `{grid_name}`")));
        }
        let values = log
            .column(column)
            .ok_or_else(|| HarnessError::MismatchedGrids(format!("log {k} has no column `{column}`")))?;
        columns.push(values);
    }
    Ok(grid
        .iter()
        .enumerate()
        .map(|(row, &step)| {
            let values: Vec<f64> = columns.iter().map(|c| c[row]).collect();
            CheckpointStats { step, stats: Stats::of(&values) }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchTest {
    pub t: f64,
    /// Welch-Satterthwaite degrees of freedom.
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

impl WelchTest {
    pub fn significant(&self) -> bool {
        self.p < SIGNIFICANCE_LEVEL
    }
}

/// Welch's unequal-variance t-test of `mean(a) - mean(b)`. Needs at least
/// two values per arm.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Option<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (sa, sb) = (Stats::of(a), Stats::of(b));
    let va = sa.std.powi(2) / a.len() as f64;
    let vb = sb.std.powi(2) / b.len() as f64;
    let diff = sa.mean - sb.mean;
    let se2 = va + vb;
    if se2 == 0.0 {
        // Both arms are constant.
        let (t, p) = if diff == 0.0 { (0.0, 1.0) } else { (diff.signum() * f64::INFINITY, 0.0) };
        return Some(WelchTest { t, df: (a.len() + b.len() - 2) as f64, p });
    }
    let t = diff / se2.sqrt();
    let df = se2.powi(2) / (va.powi(2) / (a.len() - 1) as f64 + vb.powi(2) / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    let p = 2.0 * dist.cdf(-t.abs());
    Some(WelchTest { t, df, p })
}

/// A Welch comparison of one metric between two arms on one map.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub map: String,
    pub metric: String,
    pub arm_a: String,
    pub arm_b: String,
    pub a: Stats,
    pub b: Stats,
    pub test: Option<WelchTest>,
}

impl Comparison {
    pub fn new(map: &str, metric: &str, (arm_a, a): (&str, &[f64]), (arm_b, b): (&str, &[f64])) -> Self {
        Comparison {
            map: map.into(),
            metric: metric.into(),
            arm_a: arm_a.into(),
            arm_b: arm_b.into(),
            a: Stats::of(a),
            b: Stats::of(b),
            test: welch_t_test(a, b),
        }
    }

    pub fn row(&self) -> Vec<Cell> {
        let (t, df, p, sig) = match self.test {
            Some(w) => (w.t, w.df, w.p, w.significant() as usize),
            None => (f64::NAN, f64::NAN, f64::NAN, 0),
        };
        vec![
            self.map.clone().into(),
            self.metric.clone().into(),
            self.arm_a.clone().into(),
            self.arm_b.clone().into(),
            self.a.n.into(),
            self.b.n.into(),
            self.a.mean.into(),
            self.b.mean.into(),
            (self.a.mean - self.b.mean).into(),
            t.into(),
            df.into(),
            p.into(),
            sig.into(),
        ]
    }
}

pub fn comparison_log(comparisons: &[Comparison]) -> MetricsLog {
    let mut log = MetricsLog::new(COMPARISON_COLUMNS);
    for c in comparisons {
        log.push(c.row()).expect("row matches header");
    }
    log
}

pub fn push_curve(log: &mut MetricsLog, map: &str, arm: &str, metric: &str, curve: &[CheckpointStats]) {
    for c in curve {
        let s = c.stats;
        let row = vec![
            map.into(),
            arm.into(),
            metric.into(),
            c.step.into(),
            s.n.into(),
            s.mean.into(),
            s.std.into(),
            s.ci_low.into(),
            s.ci_high.into(),
            (s.ci_defined() as usize).into(),
        ];
        log.push(row).expect("row matches header");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(values: &[(f64, f64)]) -> MetricsLog {
        let mut log = MetricsLog::new(["step", "avg_cos_sim"]);
        for &(s, v) in values {
            log.push(vec![s.into(), v.into()]).unwrap();
        }
        log
    }

    #[test]
    fn single_run_has_undefined_interval() {
        let run = log(&[(0.0, 0.2), (10.0, 0.7)]);
        let curve = aggregate(&[&run], "avg_cos_sim").unwrap();
        assert_eq!(curve[1].stats.mean, 0.7);
        assert!(!curve[1].stats.ci_defined());
        assert!(curve[1].stats.ci_low.is_nan() && curve[1].stats.std.is_nan());
    }

    #[test]
    fn identical_runs_have_zero_spread() {
        let run = log(&[(0.0, 0.2), (10.0, 0.7)]);
        let curve = aggregate(&[&run, &run.clone()], "avg_cos_sim").unwrap();
        for c in &curve {
            assert_eq!(c.stats.std, 0.0);
            assert_eq!(c.stats.ci_low, c.stats.mean);
            assert_eq!(c.stats.ci_high, c.stats.mean);
        }
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let a = log(&[(0.0, 0.2), (10.0, 0.7)]);
        let b = log(&[(0.0, 0.2), (20.0, 0.7)]);
        assert!(matches!(aggregate(&[&a, &b], "avg_cos_sim"), Err(HarnessError::MismatchedGrids(_))));
        assert!(aggregate(&[&a], "missing").is_err());
    }

    #[test]
    fn welch_matches_hand_computation() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 6.0];
        // means 2.5 and 4; variances 5/3 and 4
        let va: f64 = 5.0 / 3.0 / 4.0;
        let vb = 4.0 / 3.0;
        let t = (2.5 - 4.0) / (va + vb).sqrt();
        let df = (va + vb).powi(2) / (va * va / 3.0 + vb * vb / 2.0);
        let w = welch_t_test(&a, &b).unwrap();
        assert!((w.t - t).abs() < 1e-12);
        assert!((w.df - df).abs() < 1e-12);
        // symmetric in the sign of t
        let back = welch_t_test(&b, &a).unwrap();
        assert!((back.t + w.t).abs() < 1e-12 && (back.p - w.p).abs() < 1e-12);
        assert!(w.p > 0.0 && w.p < 1.0);
    }

    #[test]
    fn welch_p_value_reference() {
        // Equal sizes and variances reduce to Student's t with 2n-2 degrees
        // of freedom; t = 3 with 10 df has two-sided p = 0.0133437...
        let a: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let sd = Stats::of(&a).std;
        let shift = 3.0 * sd * (2.0f64 / 6.0).sqrt();
        let b: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let w = welch_t_test(&b, &a).unwrap();
        assert!((w.t - 3.0).abs() < 1e-12);
        assert!((w.df - 10.0).abs() < 1e-12);
        assert!((w.p - 0.0133437).abs() < 1e-7, "{}", w.p);
        assert!(!w.significant());
    }

    #[test]
    fn degenerate_inputs() {
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_none());
        let same = welch_t_test(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!((same.t, same.p), (0.0, 1.0));
        let apart = welch_t_test(&[2.0, 2.0], &[1.0, 1.0]).unwrap();
        assert!(apart.t.is_infinite() && apart.significant());
    }
}
