//! Binary classification metrics, paired significance testing and the
//! branch ablation grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::BranchMasks;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{train, Dataset, TrainConfig};

/// Confusion counts plus the four headline metrics, with PCL (label 1) as
/// the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub recall: f64,
    pub precision: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Set when some metric hit a zero denominator and was reported as 0.
    pub zero_division: bool,
}

fn ratio(num: usize, den: usize, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64, flag: &mut bool) -> f64 {
    if p + r == 0.0 {
        *flag = true;
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl MetricsReport {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let mut zero_division = false;
        let n = tp + fp + tn + fn_;
        let accuracy = ratio(tp + tn, n, &mut zero_division);
        let precision = ratio(tp, tp + fp, &mut zero_division);
        let recall = ratio(tp, tp + fn_, &mut zero_division);
        // Negative class: "precision" over predicted negatives, "recall" over true negatives.
        let neg_precision = ratio(tn, tn + fn_, &mut zero_division);
        let neg_recall = ratio(tn, tn + fp, &mut zero_division);
        let macro_f1 = 0.5 * (f1(precision, recall, &mut zero_division) + f1(neg_precision, neg_recall, &mut zero_division));
        Self {
            accuracy,
            macro_f1,
            recall,
            precision,
            tp,
            fp,
            tn,
            fn_,
            zero_division,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn summary(&self) -> MetricSummary {
        MetricSummary {
            accuracy: self.accuracy,
            macro_f1: self.macro_f1,
            recall: self.recall,
            precision: self.precision,
        }
    }
}

pub fn compute_metrics(preds: &[u8], labels: &[u8]) -> Result<MetricsReport> {
    if preds.len() != labels.len() {
        return Err(Error::DimMismatch(format!("{} predictions vs {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 0) => tn += 1,
            (0, 1) => fn_ += 1,
            (p, y) => return Err(Error::InvalidLabel(p.max(y))),
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, tn, fn_))
}

/// The four metrics without counts; also used for means over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub recall: f64,
    pub precision: f64,
}

impl MetricSummary {
    pub fn mean(items: &[MetricSummary]) -> MetricSummary {
        if items.is_empty() {
            return MetricSummary::default();
        }
        let n = items.len() as f64;
        let sum = |f: fn(&MetricSummary) -> f64| items.iter().map(f).sum::<f64>() / n;
        MetricSummary {
            accuracy: sum(|m| m.accuracy),
            macro_f1: sum(|m| m.macro_f1),
            recall: sum(|m| m.recall),
            precision: sum(|m| m.precision),
        }
    }
}

/// Plain-text table with the columns `Accuracy, F1_m, Recall, Precision`.
pub fn format_metrics_table(rows: &[(String, MetricSummary)]) -> String {
    let width = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}  {:>8}  {:>8}  {:>8}  {:>9}\n", "Model", "Accuracy", "F1_m", "Recall", "Precision");
    for (name, m) in rows {
        let pad = width - name.chars().count() + name.len();
        out += &format!(
            "{:<pad$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>9.4}\n",
            name, m.accuracy, m.macro_f1, m.recall, m.precision
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch(format!("{} vs {} paired observations", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return Err(Error::DegenerateTest);
    }
    let t = mean / (sd / (n as f64).sqrt());
    let df = n - 1;
    Ok(TTest { t, p: student_t_two_sided(t, df as f64), df })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    regularized_beta(x, 0.5 * df, 0.5).clamp(0.0, 1.0)
}

pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn regularized_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(1.0 - x, b, a) / b
    }
}

fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        for num in [num, -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0))] {
            d = 1.0 + num * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + num / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
        }
        if (d * c - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// The four ablation variants in reporting order.
pub const ABLATION_VARIANTS: [(&str, BranchMasks); 4] = [
    ("Full Model", BranchMasks { comment: true, sentiment: true }),
    ("-- Comment Information Processing Module", BranchMasks { comment: false, sentiment: true }),
    ("-- Knowledge-Enhanced Sentiment Analysis Module", BranchMasks { comment: true, sentiment: false }),
    ("Without Both Modules", BranchMasks { comment: false, sentiment: false }),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub masks: BranchMasks,
    pub mean: MetricSummary,
    pub per_seed_accuracy: Vec<f64>,
    /// Mean accuracy drop against the full model; `None` on the full-model row.
    pub accuracy_drop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn from_runs(seeds: Vec<u64>, runs: Vec<(String, BranchMasks, Vec<MetricSummary>)>) -> Self {
        let full_acc = runs.first().map(|(_, _, m)| MetricSummary::mean(m).accuracy).unwrap_or(0.0);
        let rows = runs
            .into_iter()
            .enumerate()
            .map(|(i, (name, masks, per_seed))| {
                let mean = MetricSummary::mean(&per_seed);
                AblationRow {
                    name,
                    masks,
                    accuracy_drop: (i > 0).then_some(full_acc - mean.accuracy),
                    per_seed_accuracy: per_seed.iter().map(|m| m.accuracy).collect(),
                    mean,
                }
            })
            .collect();
        Self { seeds, rows }
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Seeds where `full >= each single removal >= both removed` holds.
    pub fn ordered_seed_count(&self) -> usize {
        if self.rows.len() != 4 {
            return 0;
        }
        (0..self.seeds.len())
            .filter(|&s| {
                let acc = |r: usize| self.rows[r].per_seed_accuracy[s];
                acc(0) >= acc(1) && acc(0) >= acc(2) && acc(1) >= acc(3) && acc(2) >= acc(3)
            })
            .count()
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.chars().count()).max().unwrap_or(0);
        let mut out = format!("{:<width$}  {:>8}  {:>8}  {:>8}  {:>9}  {:>13}\n", "Model", "Accuracy", "F1_m", "Recall", "Precision", "Accuracy Drop");
        for r in &self.rows {
            let pad = width - r.name.chars().count() + r.name.len();
            let drop = r.accuracy_drop.map_or(String::new(), |d| format!("{:.2}%", 100.0 * d));
            out += &format!(
                "{:<pad$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>9.4}  {:>13}\n",
                r.name, r.mean.accuracy, r.mean.macro_f1, r.mean.recall, r.mean.precision, drop
            );
        }
        out
    }
}

/// Trains and evaluates the four variants over the configured seeds.
pub fn run_ablation(data: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<AblationTable> {
    let runs = ABLATION_VARIANTS
        .par_iter()
        .map(|(name, masks)| {
            let out = train(data, model_cfg, cfg, *masks)?;
            Ok((name.to_string(), *masks, out.runs.iter().map(|r| r.metrics.summary()).collect()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable::from_runs(cfg.seeds.clone(), runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let m = compute_metrics(&[1, 0, 1, 1], &[1, 0, 1, 1]).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
    }

    #[test]
    fn hand_counted_confusion() {
        let m = compute_metrics(&[1, 0, 1, 0], &[1, 0, 0, 0]).unwrap();
        assert_eq!((m.tp, m.fp, m.tn, m.fn_), (1, 1, 2, 0));
        assert_eq!((m.accuracy, m.precision, m.recall), (0.75, 0.5, 1.0));
        assert!(!m.zero_division);
    }

    #[test]
    fn zero_denominators_flagged() {
        let m = compute_metrics(&[0, 0], &[0, 0]).unwrap();
        assert_eq!((m.precision, m.recall), (0.0, 0.0));
        assert!(m.zero_division);
        assert!(compute_metrics(&[0], &[0, 1]).is_err());
        assert!(compute_metrics(&[2], &[0]).is_err());
    }

    #[test]
    fn t_test_examples() {
        assert!(matches!(paired_t_test(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::DegenerateTest)));
        let r = paired_t_test(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let r = paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
        assert!((r.t - 4.242640687).abs() < 1e-8);
        assert!((r.p - 0.0132).abs() < 1e-4);
        let s = paired_t_test(&[0.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!((s.t, s.p), (-r.t, r.p));
    }

    #[test]
    fn t_tail_matches_closed_forms() {
        // df = 1 is Cauchy: p = 1 - 2 atan(|t|) / pi.
        for t in [0.3, 1.0, 2.5, 12.0] {
            let p = 1.0 - 2.0 * f64::atan(t) / std::f64::consts::PI;
            assert!((student_t_two_sided(t, 1.0) - p).abs() < 1e-12);
        }
        // df = 2: p = 1 - t / sqrt(2 + t^2).
        for t in [0.1f64, 0.7, 3.0, 40.0] {
            let p = 1.0 - t / (2.0 + t * t).sqrt();
            assert!((student_t_two_sided(t, 2.0) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn ablation_table_shape() {
        let m = |a: f64| MetricSummary { accuracy: a, ..Default::default() };
        let runs = ABLATION_VARIANTS
            .iter()
            .zip([0.9, 0.85, 0.88, 0.8])
            .map(|((n, k), a)| (n.to_string(), *k, vec![m(a)]))
            .collect();
        let t = AblationTable::from_runs(vec![7], runs);
        assert_eq!(t.rows[0].accuracy_drop, None);
        assert!((t.rows[3].accuracy_drop.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(t.ordered_seed_count(), 1);
        assert!(t.to_text().contains("Without Both Modules"));
    }
}
