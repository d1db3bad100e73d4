//! Dice scores, paired t-tests, report tables and error masks.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{write_raw_volume, Volume};

fn labels_of(v: &Volume, classes: usize) -> Result<Vec<u32>> {
    v.data()
        .iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 && (x as usize) < classes {
                Ok(x as u32)
            } else {
                Err(Error::InvalidInput(format!(
                    "label {x} is not a class index below {classes}"
                )))
            }
        })
        .collect()
}

/// Per-class Dice `2TP / (2TP + FP + FN)`; `None` for classes absent from
/// both prediction and truth.
pub fn dice_per_class(pred: &Volume, truth: &Volume, classes: usize) -> Result<Vec<Option<f64>>> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and truth {:?} differ in shape",
            pred.dims(),
            truth.dims()
        )));
    }
    dice_from_labels(
        &labels_of(pred, classes)?,
        &labels_of(truth, classes)?,
        classes,
    )
}

pub fn dice_from_labels(pred: &[u32], truth: &[u32], classes: usize) -> Result<Vec<Option<f64>>> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predicted labels for {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut tp = vec![0u64; classes];
    let mut fp = vec![0u64; classes];
    let mut fneg = vec![0u64; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p as usize >= classes || t as usize >= classes {
            return Err(Error::InvalidInput(format!(
                "label pair ({p}, {t}) outside {classes} classes"
            )));
        }
        if p == t {
            tp[p as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fneg[t as usize] += 1;
        }
    }
    Ok((0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            (denom > 0).then(|| 2.0 * tp[c] as f64 / denom as f64)
        })
        .collect())
}

/// Mean over the classes present in prediction or truth.
pub fn mean_dice(per_class: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Binary volume with 1 where the labels disagree.
pub fn error_mask(pred: &Volume, truth: &Volume) -> Result<Volume> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and truth {:?} differ in shape",
            pred.dims(),
            truth.dims()
        )));
    }
    Volume::new(
        pred.data()
            .iter()
            .zip(truth.data())
            .map(|(p, t)| if p == t { 0.0 } else { 1.0 })
            .collect(),
        pred.dims(),
    )
}

/// Writes the error mask as a raw volume and returns it.
pub fn export_error_mask(pred: &Volume, truth: &Volume, path: &Path) -> Result<Volume> {
    let mask = error_mask(pred, truth)?;
    write_raw_volume(&mask, path)?;
    Ok(mask)
}

/// Lanczos approximation (g = 7, nine terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
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
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + adaptive(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature to an absolute tolerance.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    adaptive(f, a, b, fa, fm, fb, simpson(a, b, fa, fm, fb), tol, 50)
}

/// Two-tailed p-value of Student's t with `df` degrees of freedom.
///
/// With `x = √ν·tan θ` the density mass on `[0, |t|]` becomes
/// `c_ν ∫₀^atan(|t|/√ν) cos^(ν−1) θ dθ`, a smooth integrand on a bounded
/// interval, integrated to an absolute tolerance of 1e-10 in `p`.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let c = (ln_gamma(0.5 * (df + 1.0)) - ln_gamma(0.5 * df)).exp() / PI.sqrt();
    let upper = (t.abs() / df.sqrt()).atan();
    let tol = 1e-10 / (2.0 * c);
    let mass = c * integrate(&|th: f64| th.cos().powf(df - 1.0), 0.0, upper, tol);
    (1.0 - 2.0 * mass).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub mean_difference: f64,
    /// The differences had zero variance: `p` is 1 when they are all zero
    /// and 0 otherwise.
    pub degenerate: bool,
}

/// Two-tailed paired t-test on `a − b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "paired samples differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidInput(
            "a paired t-test needs at least two pairs".into(),
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        };
        return Ok(PairedTTest {
            t,
            p,
            df,
            mean_difference: mean,
            degenerate: true,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    Ok(PairedTTest {
        t,
        p: student_t_two_tailed(t, df as f64),
        df,
        mean_difference: mean,
        degenerate: false,
    })
}

/// Dice of one class of one volume under one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceRow {
    pub condition: String,
    pub dataset: String,
    pub volume: String,
    pub class: usize,
    pub dice: f64,
}

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub condition: String,
    /// Mean volume Dice per in-distribution dataset, in column order.
    pub dataset_means: Vec<f64>,
    /// Dataset means weighted by test-volume counts.
    pub weighted_average: f64,
    pub heldout_mean: Option<f64>,
}

pub const TIDY_HEADER: &str = "condition,dataset,volume,class,dice";

/// Per-class, per-volume Dice for every condition and dataset, plus the
/// aggregates derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    pub rows: Vec<DiceRow>,
    /// In-distribution datasets, in summary column order.
    pub datasets: Vec<String>,
    /// Evaluation-only pool, reported separately from the weighted average.
    pub heldout: Option<String>,
}

impl DiceReport {
    pub fn new(datasets: Vec<String>, heldout: Option<String>) -> Self {
        Self {
            rows: Vec::new(),
            datasets,
            heldout,
        }
    }

    /// Adds the present classes of one volume's Dice vector.
    pub fn add_volume(
        &mut self,
        condition: &str,
        dataset: &str,
        volume: &str,
        per_class: &[Option<f64>],
    ) {
        for (class, d) in per_class.iter().enumerate() {
            if let Some(dice) = d {
                self.rows.push(DiceRow {
                    condition: condition.to_string(),
                    dataset: dataset.to_string(),
                    volume: volume.to_string(),
                    class,
                    dice: *dice,
                });
            }
        }
    }

    /// Conditions in order of first appearance.
    pub fn conditions(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.condition) {
                out.push(r.condition.clone());
            }
        }
        out
    }

    /// Mean present-class Dice per volume, volumes in order of appearance.
    pub fn volume_scores(&self, condition: &str, dataset: &str) -> Vec<(String, f64)> {
        let mut order: Vec<String> = Vec::new();
        let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for r in self
            .rows
            .iter()
            .filter(|r| r.condition == condition && r.dataset == dataset)
        {
            let e = sums.entry(r.volume.as_str()).or_insert_with(|| {
                order.push(r.volume.clone());
                (0.0, 0)
            });
            e.0 += r.dice;
            e.1 += 1;
        }
        order
            .into_iter()
            .map(|v| {
                let (s, n) = sums[v.as_str()];
                (v, s / n as f64)
            })
            .collect()
    }

    pub fn dataset_mean(&self, condition: &str, dataset: &str) -> Option<f64> {
        let scores = self.volume_scores(condition, dataset);
        (!scores.is_empty())
            .then(|| scores.iter().map(|(_, s)| s).sum::<f64>() / scores.len() as f64)
    }

    /// Dataset means weighted by each dataset's test-volume count.
    pub fn weighted_average(&self, condition: &str) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0usize;
        for d in &self.datasets {
            let scores = self.volume_scores(condition, d);
            if scores.is_empty() {
                return None;
            }
            let mean = scores.iter().map(|(_, s)| s).sum::<f64>() / scores.len() as f64;
            num += mean * scores.len() as f64;
            den += scores.len();
        }
        (den > 0).then(|| num / den as f64)
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        self.conditions()
            .into_iter()
            .filter_map(|c| {
                let dataset_means = self
                    .datasets
                    .iter()
                    .map(|d| self.dataset_mean(&c, d))
                    .collect::<Option<Vec<f64>>>()?;
                let weighted_average = self.weighted_average(&c)?;
                let heldout_mean = self.heldout.as_ref().and_then(|h| self.dataset_mean(&c, h));
                Some(SummaryRow {
                    condition: c,
                    dataset_means,
                    weighted_average,
                    heldout_mean,
                })
            })
            .collect()
    }

    pub fn tidy_csv(&self) -> String {
        let mut out = format!("{TIDY_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.condition, r.dataset, r.volume, r.class, r.dice
            );
        }
        out
    }

    pub fn summary_header(&self) -> String {
        let mut h = String::from("condition");
        for d in &self.datasets {
            h.push(',');
            h.push_str(d);
        }
        h.push_str(",weighted_avg");
        if let Some(hd) = &self.heldout {
            h.push(',');
            h.push_str(hd);
        }
        h
    }

    /// Table with one row per condition: dataset means, weighted average and
    /// the held-out pool mean.
    pub fn summary_csv(&self) -> String {
        let mut out = self.summary_header();
        out.push('\n');
        for row in self.summary() {
            out.push_str(&row.condition);
            for m in &row.dataset_means {
                let _ = write!(out, ",{m}");
            }
            let _ = write!(out, ",{}", row.weighted_average);
            if self.heldout.is_some() {
                match row.heldout_mean {
                    Some(m) => {
                        let _ = write!(out, ",{m}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_tidy_csv(
        text: &str,
        datasets: Vec<String>,
        heldout: Option<String>,
    ) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(TIDY_HEADER) {
            return Err(Error::InvalidInput(format!(
                "tidy report must start with `{TIDY_HEADER}`"
            )));
        }
        let mut report = Self::new(datasets, heldout);
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::InvalidInput(format!("tidy report line {}: `{line}`", i + 2));
            if f.len() != 5 {
                return Err(bad());
            }
            report.rows.push(DiceRow {
                condition: f[0].to_string(),
                dataset: f[1].to_string(),
                volume: f[2].to_string(),
                class: f[3].parse().map_err(|_| bad())?,
                dice: f[4].parse().map_err(|_| bad())?,
            });
        }
        Ok(report)
    }

    /// Checks Dice ranges and that `summary` matches the aggregates
    /// recomputed from the per-volume rows within 1e-9.
    pub fn check_consistency(&self, summary: &[SummaryRow]) -> Result<()> {
        if let Some(r) = self.rows.iter().find(|r| !(0.0..=1.0).contains(&r.dice)) {
            return Err(Error::InvalidInput(format!(
                "Dice {} outside [0, 1]: {r:?}",
                r.dice
            )));
        }
        let fresh = self.summary();
        if fresh.len() != summary.len() {
            return Err(Error::InvalidInput(format!(
                "summary has {} rows, per-volume data gives {}",
                summary.len(),
                fresh.len()
            )));
        }
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
        for (a, b) in fresh.iter().zip(summary) {
            let ok = a.condition == b.condition
                && a.dataset_means.len() == b.dataset_means.len()
                && a.dataset_means
                    .iter()
                    .zip(&b.dataset_means)
                    .all(|(x, y)| close(*x, *y))
                && close(a.weighted_average, b.weighted_average)
                && match (a.heldout_mean, b.heldout_mean) {
                    (Some(x), Some(y)) => close(x, y),
                    (None, None) => true,
                    _ => false,
                };
            if !ok {
                return Err(Error::InvalidInput(format!(
                    "summary row {b:?} disagrees with recomputed {a:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn parse_summary_csv(&self, text: &str) -> Result<Vec<SummaryRow>> {
        let mut lines = text.lines();
        let header = self.summary_header();
        if lines.next() != Some(header.as_str()) {
            return Err(Error::InvalidInput(format!(
                "summary must start with `{header}`"
            )));
        }
        let nd = self.datasets.len();
        lines
            .enumerate()
            .map(|(i, line)| {
                let bad = || Error::InvalidInput(format!("summary line {}: `{line}`", i + 2));
                let f: Vec<&str> = line.split(',').collect();
                let want = 2 + nd + usize::from(self.heldout.is_some());
                if f.len() != want {
                    return Err(bad());
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
                Ok(SummaryRow {
                    condition: f[0].to_string(),
                    dataset_means: f[1..=nd].iter().map(|s| num(s)).collect::<Result<_>>()?,
                    weighted_average: num(f[nd + 1])?,
                    heldout_mean: match f.get(nd + 2) {
                        Some(s) if !s.is_empty() => Some(num(s)?),
                        _ => None,
                    },
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(v: &[f32]) -> Volume {
        Volume::new(v.to_vec(), [1, 1, v.len()]).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = vol(&[0.0, 1.0, 2.0, 1.0]);
        let d = dice_per_class(&a, &a, 4).unwrap();
        assert_eq!(d, vec![Some(1.0), Some(1.0), Some(1.0), None]);

        let p = vol(&[1.0, 1.0, 0.0, 0.0]);
        let t = vol(&[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(
            dice_per_class(&p, &t, 2).unwrap(),
            vec![Some(0.0), Some(0.0)]
        );

        // TP = 2, FP = 1, FN = 1 for class 1.
        let p = vol(&[1.0, 1.0, 1.0, 0.0, 0.0]);
        let t = vol(&[1.0, 1.0, 0.0, 1.0, 0.0]);
        let d = dice_per_class(&p, &t, 2).unwrap();
        assert!((d[1].unwrap() - 4.0 / 6.0).abs() < 1e-12);

        assert!(dice_per_class(&vol(&[0.0]), &vol(&[0.0, 1.0]), 2).is_err());
        assert!(dice_per_class(&vol(&[5.0]), &vol(&[0.0]), 2).is_err());
        assert_eq!(mean_dice(&[Some(1.0), None, Some(0.5)]), Some(0.75));
    }

    #[test]
    fn ttest_examples() {
        let r = paired_ttest(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((r.t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.df, 2);
        assert!((r.p - 0.0742).abs() < 5e-5, "{}", r.p);
        let s = paired_ttest(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.t, -r.t);
        assert_eq!(s.p, r.p);

        let same = paired_ttest(&[0.3, 0.5], &[0.3, 0.5]).unwrap();
        assert!(same.degenerate && same.p == 1.0);
        let shifted = paired_ttest(&[1.0, 2.0], &[0.5, 1.5]).unwrap();
        assert!(shifted.degenerate && shifted.p == 0.0);
        assert!(paired_ttest(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn cauchy_case_is_exact() {
        // One degree of freedom: p = 1 − 2·atan(|t|)/π.
        for t in [0.1f64, 1.0, 3.0, 40.0] {
            let want = 1.0 - 2.0 * t.atan() / PI;
            assert!((student_t_two_tailed(t, 1.0) - want).abs() < 1e-10);
        }
        assert_eq!(student_t_two_tailed(0.0, 5.0), 1.0);
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-13);
        assert!((ln_gamma(0.5) - PI.sqrt().ln()).abs() < 1e-13);
        assert!((ln_gamma(10.0) - 362_880f64.ln()).abs() < 1e-11);
    }

    #[test]
    fn error_masks() {
        let a = vol(&[0.0, 1.0, 2.0]);
        assert!(error_mask(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        let b = vol(&[1.0, 2.0, 0.0]);
        assert!(error_mask(&a, &b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn report_aggregates_and_round_trip() {
        let mut r = DiceReport::new(vec!["H".into(), "N".into()], Some("A".into()));
        r.add_volume("X", "H", "H-000", &[Some(1.0), Some(0.5)]);
        r.add_volume("X", "H", "H-001", &[Some(0.5), None]);
        r.add_volume("X", "N", "N-000", &[Some(0.0), Some(1.0)]);
        r.add_volume("X", "A", "A-000", &[Some(0.25)]);
        assert_eq!(r.dataset_mean("X", "H"), Some(0.625));
        // (0.75 + 0.5 + 0.5) / 3 volumes.
        assert!((r.weighted_average("X").unwrap() - 1.75 / 3.0).abs() < 1e-15);
        let s = r.summary();
        assert_eq!(s[0].heldout_mean, Some(0.25));
        let back = DiceReport::parse_tidy_csv(&r.tidy_csv(), r.datasets.clone(), r.heldout.clone())
            .unwrap();
        assert_eq!(back, r);
        let parsed = r.parse_summary_csv(&r.summary_csv()).unwrap();
        r.check_consistency(&parsed).unwrap();
        let mut wrong = parsed.clone();
        wrong[0].weighted_average += 1e-6;
        assert!(r.check_consistency(&wrong).is_err());
    }
}
