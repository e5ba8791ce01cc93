//! Segmentation and interval scoring, and the evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::pimethods::{ClassInterval, PIRecord, ALL_METHODS, TRIAD};

/// `2|A∩B| / (|A|+|B|)` for one class; `1` when both masks are empty.
pub fn dsc(pred: &[u8], gt: &[u8], class_id: u8) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("dsc", gt.len(), pred.len()));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (ip, ig) = (p == class_id, g == class_id);
        a += ip as usize;
        b += ig as usize;
        both += (ip && ig) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::config("MAE of an empty list"));
    }
    if pred.len() != truth.len() {
        return Err(Error::shape("mae", truth.len(), pred.len()));
    }
    Ok(pred.iter().zip(truth).map(|(p, y)| (p - y).abs()).sum::<f64>() / pred.len() as f64)
}

/// Signed `(empirical − target) · 100`.
pub fn coverage_error(intervals: &[ClassInterval], truths: &[f64], target: f64) -> Result<f64> {
    Ok((crate::calibration::empirical_coverage(intervals, truths)? - target) * 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthSummary {
    /// Mean over bounded intervals; infinite if none is bounded.
    #[serde(with = "crate::serde_float")]
    pub mean_ml: f64,
    pub n_bounded: usize,
    pub n_unbounded: usize,
}

pub fn mean_width(intervals: &[ClassInterval]) -> Result<WidthSummary> {
    if intervals.is_empty() {
        return Err(Error::config("width of an empty list"));
    }
    let finite: Vec<f64> = intervals.iter().filter(|i| i.is_bounded()).map(|i| i.width()).collect();
    let mean_ml = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(WidthSummary {
        mean_ml,
        n_bounded: finite.len(),
        n_unbounded: intervals.len() - finite.len(),
    })
}

/// `(mean forward passes, mean wall time in seconds)`.
pub fn cost_summary(records: &[PIRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::config("cost of an empty record list"));
    }
    let n = records.len() as f64;
    Ok((
        records.iter().map(|r| r.forward_passes as f64).sum::<f64>() / n,
        records.iter().map(|r| r.wall_time_s).sum::<f64>() / n,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p_value: f64,
    /// `true` when the p-value uses the normal approximation (n ≥ 30).
    pub normal_approx: bool,
}

/// Two-sided paired t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::shape("paired t-test", a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::config("paired t-test needs at least 2 pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let t = if se > 0.0 {
        mean / se
    } else if mean == 0.0 {
        0.0
    } else {
        mean.signum() * f64::INFINITY
    };
    let normal_approx = n >= 30;
    let tail = if t.is_infinite() {
        0.0
    } else if normal_approx {
        1.0 - Normal::new(0.0, 1.0).expect("standard normal").cdf(t.abs())
    } else {
        1.0 - StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("dof >= 1").cdf(t.abs())
    };
    Ok(PairedTTest {
        n,
        mean_diff: mean,
        t,
        p_value: (2.0 * tail).min(1.0),
        normal_approx,
    })
}

// ---------------------------------------------------------------------------
// Report

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSd {
    pub delta_f_percent: f64,
    pub width_ml: f64,
    pub mae_ml: f64,
    pub dsc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub class_name: String,
    pub n_cases: usize,
    pub delta_f_percent: f64,
    #[serde(with = "crate::serde_float")]
    pub width_ml: f64,
    pub n_unbounded: usize,
    pub mae_ml: f64,
    pub dsc: f64,
    pub mean_forward_passes: f64,
    pub mean_wall_time_s: f64,
    /// Fraction of cases whose raw head volumes were out of order.
    pub head_order_violation_rate: Option<f64>,
    /// Paired t-test of per-case widths against the three-head method.
    pub width_t_vs_triad: Option<PairedTTest>,
    /// Across-run standard deviations when several runs were merged.
    pub sd: Option<MetricSd>,
    pub n_runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target_coverage: f64,
    pub rows: Vec<ReportRow>,
}

fn method_order(m: &str) -> usize {
    ALL_METHODS.iter().position(|&x| x == m).unwrap_or(ALL_METHODS.len())
}

fn widths_by_case(records: &[&PIRecord], class: usize) -> BTreeMap<String, f64> {
    records
        .iter()
        .filter(|r| r.interval.classes[class].is_bounded())
        .map(|r| (r.case_id.clone(), r.interval.classes[class].width()))
        .collect()
}

/// Aggregates per-(method, class) metrics. Methods appear in canonical order,
/// then by name; records within a method keep their input order.
pub fn build_report(records: &[PIRecord], class_names: &[String], target_coverage: f64) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::config("report over an empty record list"));
    }
    let n_cls = class_names.len();
    for r in records {
        if r.truth_ml.len() != n_cls || r.interval.classes.len() != n_cls || r.dsc.len() != n_cls {
            return Err(Error::shape(
                "record classes",
                n_cls,
                (r.truth_ml.len(), r.interval.classes.len(), r.dsc.len()),
            ));
        }
    }
    let mut methods: Vec<&str> = records.iter().map(|r| r.method_id.as_str()).collect();
    methods.sort_by(|a, b| method_order(a).cmp(&method_order(b)).then(a.cmp(b)));
    methods.dedup();

    let by_method = |m: &str| records.iter().filter(|r| r.method_id == m).collect::<Vec<_>>();
    let triad = by_method(TRIAD);
    let mut rows = Vec::new();
    for m in methods {
        let recs = by_method(m);
        let (passes, wall) = cost_summary(&recs.iter().map(|r| (*r).clone()).collect::<Vec<_>>())?;
        for (c, name) in class_names.iter().enumerate() {
            let ivs: Vec<ClassInterval> = recs.iter().map(|r| r.interval.classes[c]).collect();
            let truths: Vec<f64> = recs.iter().map(|r| r.truth_ml[c]).collect();
            let means: Vec<f64> = ivs.iter().map(|i| i.mean_ml).collect();
            let width = mean_width(&ivs)?;
            let violation = if recs.iter().all(|r| r.head_order_violation.len() == n_cls) {
                Some(recs.iter().filter(|r| r.head_order_violation[c]).count() as f64 / recs.len() as f64)
            } else {
                None
            };
            let t_test = if m != TRIAD && !triad.is_empty() {
                let mine = widths_by_case(&recs, c);
                let theirs = widths_by_case(&triad, c);
                let (a, b): (Vec<f64>, Vec<f64>) = mine
                    .iter()
                    .filter_map(|(id, w)| theirs.get(id).map(|t| (*w, *t)))
                    .unzip();
                paired_t_test(&a, &b).ok()
            } else {
                None
            };
            rows.push(ReportRow {
                method: m.to_string(),
                class_name: name.clone(),
                n_cases: recs.len(),
                delta_f_percent: coverage_error(&ivs, &truths, target_coverage)?,
                width_ml: width.mean_ml,
                n_unbounded: width.n_unbounded,
                mae_ml: mae(&means, &truths)?,
                dsc: recs.iter().map(|r| r.dsc[c]).sum::<f64>() / recs.len() as f64,
                mean_forward_passes: passes,
                mean_wall_time_s: wall,
                head_order_violation_rate: violation,
                width_t_vs_triad: t_test,
                sd: None,
                n_runs: 1,
            });
        }
    }
    Ok(EvalReport {
        target_coverage,
        rows,
    })
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Merges reports from independent training runs into mean ± across-run SD.
pub fn merge_runs(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| Error::config("no runs to merge"))?;
    for r in reports {
        let same = r.rows.len() == first.rows.len()
            && r.rows.iter().zip(&first.rows).all(|(a, b)| a.method == b.method && a.class_name == b.class_name);
        if !same {
            return Err(Error::shape("run reports", first.rows.len(), r.rows.len()));
        }
    }
    let rows = first
        .rows
        .iter()
        .enumerate()
        .map(|(i, base)| {
            let col = |f: &dyn Fn(&ReportRow) -> f64| -> (f64, f64) {
                mean_sd(&reports.iter().map(|r| f(&r.rows[i])).collect::<Vec<_>>())
            };
            let df = col(&|r| r.delta_f_percent);
            let w = col(&|r| r.width_ml);
            let mae = col(&|r| r.mae_ml);
            let dsc = col(&|r| r.dsc);
            let passes = col(&|r| r.mean_forward_passes);
            let wall = col(&|r| r.mean_wall_time_s);
            let viol = base
                .head_order_violation_rate
                .map(|_| col(&|r| r.head_order_violation_rate.unwrap_or(f64::NAN)).0);
            ReportRow {
                method: base.method.clone(),
                class_name: base.class_name.clone(),
                n_cases: reports.iter().map(|r| r.rows[i].n_cases).sum(),
                delta_f_percent: df.0,
                width_ml: w.0,
                n_unbounded: reports.iter().map(|r| r.rows[i].n_unbounded).sum(),
                mae_ml: mae.0,
                dsc: dsc.0,
                mean_forward_passes: passes.0,
                mean_wall_time_s: wall.0,
                head_order_violation_rate: viol,
                width_t_vs_triad: None,
                sd: Some(MetricSd {
                    delta_f_percent: df.1,
                    width_ml: w.1,
                    mae_ml: mae.1,
                    dsc: dsc.1,
                }),
                n_runs: reports.len(),
            }
        })
        .collect();
    Ok(EvalReport {
        target_coverage: first.target_coverage,
        rows,
    })
}

fn fmt6(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn opt6(x: Option<f64>) -> String {
    x.map(fmt6).unwrap_or_default()
}

impl EvalReport {
    /// One row per method × class. Wall time is left out so that reruns of
    /// the same configuration produce identical files.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "method",
            "class",
            "n_cases",
            "n_runs",
            "delta_f_percent",
            "width_mL",
            "n_unbounded",
            "mae_mL",
            "dsc",
            "mean_forward_passes",
            "head_order_violation_rate",
            "width_t_vs_triad",
            "width_p_vs_triad",
            "sd_delta_f_percent",
            "sd_width_mL",
            "sd_mae_mL",
            "sd_dsc",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.class_name.clone(),
                r.n_cases.to_string(),
                r.n_runs.to_string(),
                fmt6(r.delta_f_percent),
                fmt6(r.width_ml),
                r.n_unbounded.to_string(),
                fmt6(r.mae_ml),
                fmt6(r.dsc),
                fmt6(r.mean_forward_passes),
                opt6(r.head_order_violation_rate),
                opt6(r.width_t_vs_triad.map(|t| t.t)),
                opt6(r.width_t_vs_triad.map(|t| t.p_value)),
                opt6(r.sd.as_ref().map(|s| s.delta_f_percent)),
                opt6(r.sd.as_ref().map(|s| s.width_ml)),
                opt6(r.sd.as_ref().map(|s| s.mae_ml)),
                opt6(r.sd.as_ref().map(|s| s.dsc)),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("ascii csv"))
    }

    /// Per-method timing, kept apart from the reproducible CSV.
    pub fn timing_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "mean_forward_passes", "mean_wall_time_s"]).map_err(csv_err)?;
        let mut seen = Vec::new();
        for r in &self.rows {
            if seen.contains(&r.method) {
                continue;
            }
            seen.push(r.method.clone());
            w.write_record([r.method.clone(), fmt6(r.mean_forward_passes), fmt6(r.mean_wall_time_s)])
                .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("ascii csv"))
    }

    /// Aligned text table: one block per method, one line per class.
    pub fn to_table(&self) -> String {
        let cell = |v: f64, sd: Option<f64>, prec: usize| match sd {
            Some(s) => format!("{v:.prec$} ± {s:.prec$}"),
            None => format!("{v:.prec$}"),
        };
        let header = ["Method", "Class", "Δf (%)", "W (mL)", "MAE (mL)", "DSC", "Passes", "Time (s)"];
        let mut lines: Vec<[String; 8]> = vec![header.map(String::from)];
        for r in &self.rows {
            let sd = r.sd.as_ref();
            let mut width = cell(r.width_ml, sd.map(|s| s.width_ml), 2);
            if r.n_unbounded > 0 {
                width.push_str(&format!(" ({} unb.)", r.n_unbounded));
            }
            lines.push([
                r.method.clone(),
                r.class_name.clone(),
                cell(r.delta_f_percent, sd.map(|s| s.delta_f_percent), 1),
                width,
                cell(r.mae_ml, sd.map(|s| s.mae_ml), 2),
                cell(r.dsc, sd.map(|s| s.dsc), 3),
                format!("{:.1}", r.mean_forward_passes),
                format!("{:.3}", r.mean_wall_time_s),
            ]);
        }
        let widths: Vec<usize> = (0..8)
            .map(|j| lines.iter().map(|l| l[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let mut prev_method = String::new();
        for (i, l) in lines.iter().enumerate() {
            if i > 0 && l[0] != prev_method && i > 1 {
                out.push('\n');
            }
            let method = if i > 0 && l[0] == prev_method { "" } else { &l[0] };
            let mut line = format!("{:<w$}", method, w = widths[0]);
            for j in 1..8 {
                let pad = widths[j] - l[j].chars().count();
                if j == 1 {
                    let _ = write!(line, "  {}{}", l[j], " ".repeat(pad));
                } else {
                    let _ = write!(line, "  {}{}", " ".repeat(pad), l[j]);
                }
            }
            out.push_str(line.trim_end());
            out.push('\n');
            if i == 0 {
                let total: usize = widths.iter().sum::<usize>() + 2 * 7;
                out.push_str(&"-".repeat(total));
                out.push('\n');
            } else {
                prev_method = l[0].clone();
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.to_csv()?)?;
        std::fs::write(dir.join("report.txt"), self.to_table())?;
        std::fs::write(dir.join("timing.csv"), self.timing_csv()?)?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Per test case and class: truth against the finalized interval.
pub fn interval_plot_csv(records: &[PIRecord], class_names: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["case_id", "class", "truth_mL", "lower_mL", "mean_mL", "upper_mL", "covered"])
        .map_err(csv_err)?;
    for r in records {
        for (c, name) in class_names.iter().enumerate() {
            let i = r.interval.classes[c];
            let y = r.truth_ml[c];
            w.write_record([
                r.case_id.clone(),
                name.clone(),
                fmt6(y),
                fmt6(i.lower_ml),
                fmt6(i.mean_ml),
                fmt6(i.upper_ml),
                (i.contains(y) as u8).to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("ascii csv"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pimethods::{RawPrediction, VolumeInterval, MC};
    use proptest::prelude::*;

    #[test]
    fn dsc_examples() {
        assert_eq!(dsc(&[1, 1, 0], &[1, 1, 0], 1).unwrap(), 1.0);
        assert_eq!(dsc(&[1, 0, 0], &[0, 1, 0], 1).unwrap(), 0.0);
        assert_eq!(dsc(&[1, 1, 0, 0], &[0, 1, 1, 0], 1).unwrap(), 0.5);
        assert_eq!(dsc(&[0, 0], &[0, 0], 2).unwrap(), 1.0);
        assert!(dsc(&[0], &[0, 0], 1).is_err());
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 1.0);
        assert_eq!(mae(&[10.0], &[7.0]).unwrap(), 3.0);
        assert_eq!(mae(&[2.0, 5.0], &[2.0, 5.0]).unwrap(), 0.0);
        assert!(mae(&[], &[]).is_err());
    }

    #[test]
    fn coverage_error_sign() {
        let ivs: Vec<_> = (0..1000).map(|_| ClassInterval::new(0.0, 1.0, 2.0)).collect();
        let truths: Vec<f64> = (0..1000).map(|i| if i < 887 { 1.0 } else { 5.0 }).collect();
        assert!((coverage_error(&ivs, &truths, 0.9).unwrap() + 1.3).abs() < 1e-9);
        let truths: Vec<f64> = (0..1000).map(|i| if i < 950 { 1.0 } else { 5.0 }).collect();
        assert!((coverage_error(&ivs, &truths, 0.9).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn width_examples() {
        let w = mean_width(&[ClassInterval::new(6.7, 10.0, 13.3), ClassInterval::new(3.0, 4.0, 5.0)]).unwrap();
        assert!((w.mean_ml - 4.3).abs() < 1e-12);
        let w = mean_width(&[
            ClassInterval::new(1.0, 2.0, 3.0),
            ClassInterval::new(0.0, 2.0, f64::INFINITY),
            ClassInterval::new(2.0, 2.0, 2.0),
        ])
        .unwrap();
        assert_eq!((w.mean_ml, w.n_unbounded), (1.0, 1));
        assert!(mean_width(&[]).is_err());
    }

    #[test]
    fn t_test_against_reference_values() {
        // differences 1, 2, 3, 4: mean 2.5, sd 1.29099, t = 3.87298, p(df=3) = 0.030466
        let t = paired_t_test(&[2.0, 4.0, 6.0, 8.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((t.t - 3.872983).abs() < 1e-5);
        assert!((t.p_value - 0.030466).abs() < 1e-5);
        assert!(!t.normal_approx);
        let same = paired_t_test(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((same.t, same.p_value), (0.0, 1.0));
    }

    #[test]
    fn t_test_uses_normal_tail_for_large_n() {
        let a: Vec<f64> = (0..40).map(|i| (i % 5) as f64).collect();
        let b: Vec<f64> = (0..40).map(|i| (i % 3) as f64).collect();
        let t = paired_t_test(&a, &b).unwrap();
        assert!(t.normal_approx);
        let z = Normal::new(0.0, 1.0).unwrap();
        assert!((t.p_value - 2.0 * (1.0 - z.cdf(t.t.abs()))).abs() < 1e-15);
    }

    fn record(case: &str, method: &str, iv: ClassInterval, truth: f64, passes: usize) -> PIRecord {
        let vi = VolumeInterval {
            method_id: method.into(),
            calibrated: true,
            classes: vec![iv],
        };
        PIRecord {
            run: 0,
            case_id: case.into(),
            method_id: method.into(),
            truth_ml: vec![truth],
            raw: RawPrediction::Direct(vi.clone()),
            interval: vi,
            dsc: vec![0.8],
            head_order_violation: if method == TRIAD { vec![case == "b"] } else { vec![] },
            head_volumes_ml: vec![],
            forward_passes: passes,
            wall_time_s: 0.5,
        }
    }

    #[test]
    fn report_rows_and_ordering() {
        let recs = vec![
            record("a", MC, ClassInterval::new(0.0, 1.0, 2.0), 1.0, 20),
            record("a", TRIAD, ClassInterval::new(0.5, 1.0, 1.5), 1.2, 1),
            record("b", TRIAD, ClassInterval::new(0.5, 1.0, 1.5), 3.0, 1),
            record("b", MC, ClassInterval::new(0.0, 1.0, 4.0), 3.0, 20),
        ];
        let rep = build_report(&recs, &["c1".into()], 0.9).unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert_eq!(rep.rows[0].method, TRIAD);
        assert_eq!(rep.rows[0].mean_forward_passes, 1.0);
        assert_eq!(rep.rows[1].mean_forward_passes, 20.0);
        assert!((rep.rows[0].delta_f_percent - -40.0).abs() < 1e-9);
        assert_eq!(rep.rows[0].head_order_violation_rate, Some(0.5));
        assert_eq!(rep.rows[1].head_order_violation_rate, None);
        assert!(rep.rows[1].width_t_vs_triad.is_some());
        let csv = rep.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(!csv.contains("wall"));
        assert!(rep.to_table().contains("Δf (%)"));
    }

    #[test]
    fn merged_runs_carry_sd() {
        let recs = vec![
            record("a", TRIAD, ClassInterval::new(0.5, 1.0, 1.5), 1.2, 1),
            record("b", TRIAD, ClassInterval::new(0.5, 1.0, 1.5), 1.0, 1),
        ];
        let r1 = build_report(&recs, &["c1".into()], 0.9).unwrap();
        let mut r2 = r1.clone();
        r2.rows[0].mae_ml += 0.2;
        let m = merge_runs(&[r1.clone(), r2]).unwrap();
        assert_eq!(m.rows[0].n_runs, 2);
        let sd = m.rows[0].sd.as_ref().unwrap();
        assert!((sd.mae_ml - 0.2 / 2f64.sqrt()).abs() < 1e-12);
        assert!((m.rows[0].mae_ml - (r1.rows[0].mae_ml + 0.1)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn dsc_is_symmetric(a in prop::collection::vec(0u8..3, 30), b in prop::collection::vec(0u8..3, 30)) {
            for c in 0..3 {
                let x = dsc(&a, &b, c).unwrap();
                prop_assert_eq!(x, dsc(&b, &a, c).unwrap());
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }

        #[test]
        fn width_grows_with_additive_q(
            ls in prop::collection::vec((0.0f64..10.0, 0.0f64..5.0), 1..20),
            q1 in 0.0f64..3.0,
            dq in 0.0f64..3.0,
        ) {
            let w = |q: f64| {
                let ivs: Vec<_> = ls.iter().map(|&(l, d)| ClassInterval::new(l - q, l, l + d + q).around_mean()).collect();
                mean_width(&ivs).unwrap().mean_ml
            };
            prop_assert!(w(q1 + dq) >= w(q1));
        }
    }
}
