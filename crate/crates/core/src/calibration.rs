//! Post-hoc interval calibration and temperature scaling.
//!
//! Both calibration modes use the split-conformal order statistic: with `n`
//! calibration scores and miscoverage `alpha`, the corrective value is the
//! `k`-th smallest score, `k = ⌈(n+1)(1−alpha)⌉`. When `k > n` no finite
//! value carries the guarantee and the factor is marked unbounded.

use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pimethods::{ClassInterval, RawPrediction, SamplingStats, VolumeInterval};
use crate::tensor::{Real, Volume};

/// Relative padding applied to calibrated bounds so that a score equal to
/// `q` still lands inside its interval after floating-point rounding.
const BOUND_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    AdditiveMl,
    Multiplicative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    #[serde(with = "crate::serde_float")]
    pub min: f64,
    #[serde(with = "crate::serde_float")]
    pub median: f64,
    #[serde(with = "crate::serde_float")]
    pub max: f64,
    pub n_infinite: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassFactor {
    #[serde(with = "crate::serde_float")]
    pub q: f64,
    pub unbounded: bool,
    pub n_cal: usize,
    /// Rank of the selected order statistic (1-based).
    pub rank: usize,
    pub scores: ScoreSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFactor {
    pub method_id: String,
    pub mode: CalibrationMode,
    pub alpha: f64,
    pub pooled: bool,
    pub classes: Vec<ClassFactor>,
}

impl CalibrationFactor {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::format(path, "calibration.json", e.to_string()))
    }
}

/// `⌈(n+1)(1−alpha)⌉`, robust to the product landing a hair above an integer.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    (x - 1e-9).ceil().max(1.0) as usize
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Conformal quantile of one class's scores.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<ClassFactor> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::config("calibration needs at least one record"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN calibration score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let k = conformal_rank(n, alpha);
    let (q, unbounded) = if k > n {
        (f64::INFINITY, true)
    } else {
        let q = sorted[k - 1];
        (q, q.is_infinite())
    };
    Ok(ClassFactor {
        q,
        unbounded,
        n_cal: n,
        rank: k,
        scores: ScoreSummary {
            min: sorted[0],
            median: sorted[(n - 1) / 2],
            max: sorted[n - 1],
            n_infinite: sorted.iter().filter(|s| s.is_infinite()).count(),
        },
    })
}

/// `s = max(l − y, y − u)`: negative inside the interval, positive outside.
pub fn additive_score(lower: f64, upper: f64, truth: f64) -> f64 {
    (lower - truth).max(truth - upper)
}

/// `s = |y − μ| / σ`, with `0/0 = 0` and `x/0 = ∞` for `x > 0`.
pub fn multiplicative_score(mu: f64, sigma: f64, truth: f64) -> f64 {
    let dev = (truth - mu).abs();
    if sigma == 0.0 {
        if dev == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        dev / sigma
    }
}

fn fit(
    method_id: &str,
    mode: CalibrationMode,
    scores: Vec<Vec<f64>>,
    alpha: f64,
    pooled: bool,
) -> Result<CalibrationFactor> {
    if scores.is_empty() {
        return Err(Error::config("calibration needs at least one class"));
    }
    let classes = if pooled {
        let all: Vec<f64> = scores.iter().flatten().copied().collect();
        let f = conformal_quantile(&all, alpha)?;
        vec![f; scores.len()]
    } else {
        scores
            .iter()
            .map(|s| conformal_quantile(s, alpha))
            .collect::<Result<_>>()?
    };
    Ok(CalibrationFactor {
        method_id: method_id.into(),
        mode,
        alpha,
        pooled,
        classes,
    })
}

/// `records[c][i] = (lower, upper, truth)` for class `c`, case `i`.
pub fn fit_additive_q(
    method_id: &str,
    records: &[Vec<(f64, f64, f64)>],
    alpha: f64,
    pooled: bool,
) -> Result<CalibrationFactor> {
    let scores = records
        .iter()
        .map(|r| r.iter().map(|&(l, u, y)| additive_score(l, u, y)).collect())
        .collect();
    fit(method_id, CalibrationMode::AdditiveMl, scores, alpha, pooled)
}

/// `records[c][i] = (mu, sigma, truth)` for class `c`, case `i`.
pub fn fit_multiplicative_q(
    method_id: &str,
    records: &[Vec<(f64, f64, f64)>],
    alpha: f64,
    pooled: bool,
) -> Result<CalibrationFactor> {
    let scores = records
        .iter()
        .map(|r| r.iter().map(|&(m, s, y)| multiplicative_score(m, s, y)).collect())
        .collect();
    fit(method_id, CalibrationMode::Multiplicative, scores, alpha, pooled)
}

fn unbounded_interval(mean: f64) -> ClassInterval {
    ClassInterval::new(0.0, mean.max(0.0), f64::INFINITY)
}

/// `[l − q, u + q]` per class; the mean stays inside and bounds are clamped.
pub fn apply_additive(interval: &VolumeInterval, factor: &CalibrationFactor) -> Result<VolumeInterval> {
    if factor.mode != CalibrationMode::AdditiveMl {
        return Err(Error::config("additive calibration requires an additive factor"));
    }
    if factor.classes.len() != interval.classes.len() {
        return Err(Error::shape("calibration classes", factor.classes.len(), interval.classes.len()));
    }
    let classes = interval
        .classes
        .iter()
        .zip(&factor.classes)
        .map(|(c, f)| {
            if f.unbounded {
                return unbounded_interval(c.mean_ml);
            }
            let tol = BOUND_SLACK * (1.0 + c.lower_ml.abs() + c.upper_ml.abs() + f.q.abs());
            ClassInterval::new(c.lower_ml - f.q - tol, c.mean_ml, c.upper_ml + f.q + tol).around_mean()
        })
        .collect();
    Ok(VolumeInterval {
        method_id: interval.method_id.clone(),
        calibrated: true,
        classes,
    })
}

/// `[μ − qσ, μ + qσ]` per class, clamped at zero.
pub fn apply_multiplicative(
    stats: &SamplingStats,
    method_id: &str,
    factor: &CalibrationFactor,
) -> Result<VolumeInterval> {
    if factor.mode != CalibrationMode::Multiplicative {
        return Err(Error::config("multiplicative calibration requires a multiplicative factor"));
    }
    if factor.classes.len() != stats.classes.len() {
        return Err(Error::shape("calibration classes", factor.classes.len(), stats.classes.len()));
    }
    let classes = stats
        .classes
        .iter()
        .zip(&factor.classes)
        .map(|(s, f)| {
            if f.unbounded {
                return unbounded_interval(s.mu_ml);
            }
            let half = if s.sigma_ml == 0.0 { 0.0 } else { f.q * s.sigma_ml };
            let tol = BOUND_SLACK * (1.0 + s.mu_ml.abs() + half.abs());
            ClassInterval::new(s.mu_ml - half - tol, s.mu_ml, s.mu_ml + half + tol).around_mean()
        })
        .collect();
    Ok(VolumeInterval {
        method_id: method_id.into(),
        calibrated: true,
        classes,
    })
}

pub fn apply_calibration(raw: &RawPrediction, method_id: &str, factor: &CalibrationFactor) -> Result<VolumeInterval> {
    if factor.classes.iter().any(|c| c.unbounded) {
        warn!("{method_id}: unbounded calibration factor, emitting [0, inf) intervals");
    }
    match raw {
        RawPrediction::Direct(interval) => apply_additive(interval, factor),
        RawPrediction::Sampling(stats) => apply_multiplicative(stats, method_id, factor),
    }
}

/// Fraction of truths inside their closed interval.
pub fn empirical_coverage(intervals: &[ClassInterval], truths: &[f64]) -> Result<f64> {
    if intervals.is_empty() {
        return Err(Error::config("coverage of an empty record list"));
    }
    if intervals.len() != truths.len() {
        return Err(Error::shape("coverage records", intervals.len(), truths.len()));
    }
    let covered = intervals.iter().zip(truths).filter(|(i, &y)| i.contains(y)).count();
    Ok(covered as f64 / intervals.len() as f64)
}

// ---------------------------------------------------------------------------
// Temperature scaling

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub tau: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    pub n_samples: usize,
    /// All sampled voxels share one label.
    pub single_class: bool,
}

impl Temperature {
    pub fn identity() -> Self {
        Self {
            tau: 1.0,
            nll_before: f64::NAN,
            nll_after: f64::NAN,
            n_samples: 0,
            single_class: false,
        }
    }
}

/// Voxel-level logits and labels collected for temperature fitting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LogitSamples {
    pub n_classes: usize,
    /// Sample-major: `logits[i * n_classes + c]`.
    pub logits: Vec<f64>,
    pub labels: Vec<u8>,
}

impl LogitSamples {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Adds `count` voxels drawn without replacement from one case.
    pub fn push_subsample<T: Real, R: Rng>(
        &mut self,
        logits: &Volume<T>,
        labels: &[u8],
        count: usize,
        rng: &mut R,
    ) -> Result<()> {
        if logits.channels() != self.n_classes || labels.len() != logits.voxels() {
            return Err(Error::shape(
                "temperature samples",
                (self.n_classes, logits.voxels()),
                (logits.channels(), labels.len()),
            ));
        }
        let v = logits.voxels();
        let mut idx = sample(rng, v, count.min(v)).into_vec();
        idx.sort_unstable();
        for i in idx {
            for c in 0..self.n_classes {
                self.logits.push(logits.channel(c)[i].f64());
            }
            self.labels.push(labels[i]);
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of `softmax(logits / tau)`.
pub fn nll(samples: &LogitSamples, tau: f64) -> f64 {
    let n = samples.n_classes;
    let mut total = 0.0;
    for (row, &y) in samples.logits.chunks_exact(n).zip(&samples.labels) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / tau;
        let lse = m + row.iter().map(|&z| (z / tau - m).exp()).sum::<f64>().ln();
        total += lse - row[y as usize] / tau;
    }
    total / samples.len() as f64
}

/// `0.05, 0.10, …, 5.00`.
pub fn temperature_grid() -> Vec<f64> {
    (1..=100).map(|j| j as f64 / 20.0).collect()
}

/// Grid search for the NLL-minimizing temperature; ties go to the smaller tau.
pub fn fit_temperature(samples: &LogitSamples) -> Result<Temperature> {
    if samples.is_empty() {
        return Err(Error::config("temperature fitting needs at least one sample"));
    }
    if samples.labels.iter().any(|&l| l as usize >= samples.n_classes) {
        return Err(Error::shape("temperature labels", samples.n_classes, "out of range"));
    }
    let nll_before = nll(samples, 1.0);
    let mut best = (1.0, nll_before);
    for tau in temperature_grid() {
        let v = nll(samples, tau);
        if v < best.1 || (v == best.1 && tau < best.0) {
            best = (tau, v);
        }
    }
    let single_class = samples.labels.iter().all(|&l| l == samples.labels[0]);
    if single_class {
        warn!("temperature fitted on single-class labels");
    }
    Ok(Temperature {
        tau: best.0,
        nll_before,
        nll_after: best.1,
        n_samples: samples.len(),
        single_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn iv(l: f64, m: f64, u: f64) -> VolumeInterval {
        VolumeInterval {
            method_id: "triad".into(),
            calibrated: false,
            classes: vec![ClassInterval::new(l, m, u)],
        }
    }

    #[test]
    fn ranks() {
        assert_eq!(conformal_rank(19, 0.1), 18);
        assert_eq!(conformal_rank(1, 0.1), 2);
        assert_eq!(conformal_rank(200, 0.1), 181);
        assert_eq!(conformal_rank(9, 0.1), 9);
    }

    #[test]
    fn zero_scores_give_zero_q() {
        let recs = vec![[(1.0, 3.0, 1.0), (1.0, 3.0, 3.0), (2.0, 2.0, 2.0)].repeat(4)];
        let f = fit_additive_q("triad", &recs, 0.1, false).unwrap();
        assert_eq!(f.classes[0].q, 0.0);
        let recs = vec![vec![(5.0, 1.0, 5.0); 10]];
        assert_eq!(fit_multiplicative_q("mc", &recs, 0.1, false).unwrap().classes[0].q, 0.0);
    }

    #[test]
    fn single_record_is_unbounded() {
        let f = fit_additive_q("triad", &[vec![(1.0, 2.0, 1.5)]], 0.1, false).unwrap();
        assert!(f.classes[0].unbounded);
        assert!(f.classes[0].q.is_infinite());
        assert!(fit_additive_q("triad", &[vec![]], 0.1, false).is_err());
    }

    #[test]
    fn crafted_multiplicative_scores() {
        // scores 0.1·i for i = 1..=19 via sigma = 1, mu = 0
        let recs = vec![(1..=19).map(|i| (0.0, 1.0, 0.1 * i as f64)).collect::<Vec<_>>()];
        let f = fit_multiplicative_q("mc", &recs, 0.1, false).unwrap();
        assert!((f.classes[0].q - 1.8).abs() < 1e-12);
    }

    #[test]
    fn infinite_scores_below_rank_keep_q_finite() {
        // one sigma = 0 miss among 20: rank 19 of 20 is still finite
        let mut recs: Vec<_> = (1..=19).map(|i| (0.0, 1.0, i as f64)).collect();
        recs.push((0.0, 0.0, 1.0));
        let f = fit_multiplicative_q("mc", &[recs.clone()], 0.1, false).unwrap();
        assert_eq!(f.classes[0].q, 19.0);
        assert!(!f.classes[0].unbounded);
        recs.push((0.0, 0.0, 2.0));
        recs.push((0.0, 0.0, 3.0));
        let f = fit_multiplicative_q("mc", &[recs], 0.1, false).unwrap();
        assert!(f.classes[0].unbounded);
        assert_eq!(f.classes[0].scores.n_infinite, 3);
    }

    #[test]
    fn additive_application() {
        let f = CalibrationFactor {
            method_id: "triad".into(),
            mode: CalibrationMode::AdditiveMl,
            alpha: 0.1,
            pooled: false,
            classes: vec![conformal_quantile(&[2.0], 0.5).unwrap()],
        };
        assert_eq!(f.classes[0].q, 2.0);
        let out = apply_additive(&iv(3.0, 5.0, 8.0), &f).unwrap().classes[0];
        assert!((out.lower_ml - 1.0).abs() < 1e-9 && (out.upper_ml - 10.0).abs() < 1e-9);
        assert_eq!(out.mean_ml, 5.0);

        let mut zero = f.clone();
        zero.classes[0].q = 0.0;
        let out = apply_additive(&iv(3.0, 5.0, 8.0), &zero).unwrap().classes[0];
        assert!((out.lower_ml - 3.0).abs() < 1e-9 && (out.upper_ml - 8.0).abs() < 1e-9);

        let mut neg = f.clone();
        neg.classes[0].q = -2.5;
        let out = apply_additive(&iv(3.0, 5.0, 8.0), &neg).unwrap().classes[0];
        assert_eq!(out.lower_ml, 5.0);
        assert!((out.upper_ml - 5.5).abs() < 1e-9);

        let mut unb = f.clone();
        unb.classes[0].unbounded = true;
        let out = apply_additive(&iv(3.0, 5.0, 8.0), &unb).unwrap().classes[0];
        assert_eq!((out.lower_ml, out.upper_ml), (0.0, f64::INFINITY));

        let mut wrong = f;
        wrong.mode = CalibrationMode::Multiplicative;
        assert!(apply_additive(&iv(3.0, 5.0, 8.0), &wrong).is_err());
    }

    #[test]
    fn multiplicative_application() {
        let f = CalibrationFactor {
            method_id: "mc".into(),
            mode: CalibrationMode::Multiplicative,
            alpha: 0.1,
            pooled: false,
            classes: vec![ClassFactor {
                q: 1.65,
                unbounded: false,
                n_cal: 10,
                rank: 10,
                scores: ScoreSummary { min: 0.0, median: 1.0, max: 1.65, n_infinite: 0 },
            }],
        };
        let stats = SamplingStats {
            classes: vec![crate::pimethods::ClassStats { mu_ml: 10.0, sigma_ml: 2.0 }],
            n_samples: 20,
        };
        let out = apply_multiplicative(&stats, "mc", &f).unwrap().classes[0];
        assert!((out.lower_ml - 6.7).abs() < 1e-9 && (out.upper_ml - 13.3).abs() < 1e-9);
    }

    #[test]
    fn coverage_examples() {
        let ivs: Vec<_> = (0..10).map(|_| ClassInterval::new(0.0, 1.0, 2.0)).collect();
        let truths: Vec<f64> = (0..10).map(|i| if i < 7 { 1.0 } else { 3.0 }).collect();
        assert!((empirical_coverage(&ivs, &truths).unwrap() - 0.7).abs() < 1e-15);
        let open = vec![ClassInterval::new(0.0, 1.0, f64::INFINITY); 3];
        assert_eq!(empirical_coverage(&open, &[1e9, 0.0, 5.0]).unwrap(), 1.0);
        // closed boundary
        assert_eq!(empirical_coverage(&[ClassInterval::new(1.0, 1.5, 2.0)], &[2.0]).unwrap(), 1.0);
        assert!(empirical_coverage(&[], &[]).is_err());
    }

    #[test]
    fn factor_round_trips_with_infinity() {
        let dir = tempfile::tempdir().unwrap();
        let f = fit_additive_q("triad", &[vec![(1.0, 2.0, 1.5)], vec![(0.0, 1.0, 3.0); 30]], 0.1, false).unwrap();
        let path = dir.path().join("calibration.json");
        f.save(&path).unwrap();
        assert_eq!(CalibrationFactor::load(&path).unwrap(), f);
    }

    fn synthetic_logits(scale: f64, n: usize, seed: u64) -> LogitSamples {
        // labels drawn from softmax(z), logits reported as scale·z
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = LogitSamples::new(3);
        for _ in 0..n {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
            let tot: f64 = e.iter().sum();
            let u: f64 = rng.random_range(0.0..1.0) * tot;
            let mut acc = 0.0;
            let mut y = 2;
            for (c, &v) in e.iter().enumerate() {
                acc += v;
                if u < acc {
                    y = c;
                    break;
                }
            }
            s.logits.extend(z.iter().map(|v| v * scale));
            s.labels.push(y as u8);
        }
        s
    }

    #[test]
    fn calibrated_logits_keep_unit_temperature() {
        let s = synthetic_logits(1.0, 20000, 1);
        let t = fit_temperature(&s).unwrap();
        assert!((t.tau - 1.0).abs() <= 0.1, "tau {}", t.tau);
        assert!(t.nll_after <= t.nll_before);
    }

    #[test]
    fn doubled_logits_recover_temperature_two() {
        let s = synthetic_logits(2.0, 20000, 2);
        let t = fit_temperature(&s).unwrap();
        // oracle: brute-force sweep on a finer grid
        let fine = (100..=300)
            .map(|j| j as f64 / 100.0)
            .min_by(|&a, &b| nll(&s, a).total_cmp(&nll(&s, b)))
            .unwrap();
        assert!((t.tau - fine).abs() <= 0.05, "tau {} vs oracle {fine}", t.tau);
        assert!((t.tau - 2.0).abs() <= 0.15, "tau {}", t.tau);
    }

    #[test]
    fn single_class_labels_are_flagged() {
        let s = LogitSamples { n_classes: 2, logits: vec![1.0, 0.0, 2.0, 0.5], labels: vec![0, 0] };
        let t = fit_temperature(&s).unwrap();
        assert!(t.single_class);
        assert!(t.nll_after.is_finite());
        assert!(fit_temperature(&LogitSamples::new(2)).is_err());
    }

    #[test]
    fn subsampling_is_seeded_and_sized() {
        let logits = crate::nets::random_input::<f32>(3, [4, 4, 4], 1);
        let labels = vec![1u8; 64];
        let mut a = LogitSamples::new(3);
        a.push_subsample(&logits, &labels, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut b = LogitSamples::new(3);
        b.push_subsample(&logits, &labels, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert_eq!(a.logits.len(), 30);
    }

    proptest! {
        #[test]
        fn calibration_fold_coverage_holds(
            recs in prop::collection::vec((0.0f64..10.0, 0.0f64..5.0, 0.0f64..20.0), 10..60),
            alpha in 0.05f64..0.5,
        ) {
            let recs: Vec<_> = recs.into_iter().map(|(l, w, y)| (l, l + w, y)).collect();
            let f = fit_additive_q("triad", &[recs.clone()], alpha, false).unwrap();
            prop_assume!(!f.classes[0].unbounded);
            let ivs: Vec<_> = recs
                .iter()
                .map(|&(l, u, _)| apply_additive(&iv(l, 0.5 * (l + u), u), &f).unwrap().classes[0])
                .collect();
            let truths: Vec<f64> = recs.iter().map(|r| r.2).collect();
            prop_assert!(empirical_coverage(&ivs, &truths).unwrap() >= 1.0 - alpha);
        }

        #[test]
        fn coverage_is_monotone_in_q(
            recs in prop::collection::vec((0.0f64..10.0, 0.0f64..5.0, 0.0f64..20.0), 5..40),
            q1 in -3.0f64..3.0,
            dq in 0.0f64..3.0,
        ) {
            let mk = |q: f64| {
                let f = CalibrationFactor {
                    method_id: "triad".into(),
                    mode: CalibrationMode::AdditiveMl,
                    alpha: 0.1,
                    pooled: false,
                    classes: vec![ClassFactor {
                        q,
                        unbounded: false,
                        n_cal: 1,
                        rank: 1,
                        scores: ScoreSummary { min: q, median: q, max: q, n_infinite: 0 },
                    }],
                };
                let ivs: Vec<_> = recs
                    .iter()
                    .map(|&(l, w, _)| apply_additive(&iv(l, l + 0.5 * w, l + w), &f).unwrap().classes[0])
                    .collect();
                let truths: Vec<f64> = recs.iter().map(|r| r.2).collect();
                empirical_coverage(&ivs, &truths).unwrap()
            };
            prop_assert!(mk(q1 + dq) >= mk(q1));
        }
    }
}
