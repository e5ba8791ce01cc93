//! Predictive-interval constructors for per-class lesion volumes.
//!
//! Direct methods (three-head net, quantile regressor) emit a
//! [`VolumeInterval`] from a single pass. Sampling methods (confidence
//! thresholding, MC dropout, test-time augmentation) emit
//! [`SamplingStats`], turned into `μ ± zσ` by [`interval_from_stats`].

pub mod augment;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::nets::{forward, forward_mc, regress, Net, SoftMaskSet};
use crate::phantom::voxel_volume_ml;
use crate::tensor::{argmax_channels, Real, Volume};

pub use augment::{sample_augmentations, Augmentation};

pub const TRIAD: &str = "triad";
pub const CT: &str = "ct";
pub const MC: &str = "mc";
pub const TTA: &str = "tta";
pub const REGCNN: &str = "regcnn";
pub const ALL_METHODS: [&str; 5] = [TRIAD, CT, MC, TTA, REGCNN];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Direct,
    Sampling,
}

pub fn method_kind(method: &str) -> Result<MethodKind> {
    match method {
        TRIAD | REGCNN => Ok(MethodKind::Direct),
        CT | MC | TTA => Ok(MethodKind::Sampling),
        other => Err(Error::config(format!(
            "unknown method `{other}`, expected one of {ALL_METHODS:?}"
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInterval {
    #[serde(with = "crate::serde_float")]
    pub lower_ml: f64,
    pub mean_ml: f64,
    #[serde(with = "crate::serde_float")]
    pub upper_ml: f64,
}

impl ClassInterval {
    pub fn new(lower_ml: f64, mean_ml: f64, upper_ml: f64) -> Self {
        Self {
            lower_ml,
            mean_ml,
            upper_ml,
        }
    }

    /// Sorts the triple and clamps every component at zero.
    pub fn sorted_clamped(self) -> Self {
        let [l, m, u] = sort_triple([self.lower_ml, self.mean_ml, self.upper_ml]);
        Self::new(l.max(0.0), m.max(0.0), u.max(0.0))
    }

    /// Widens the bounds to include the mean if needed, then clamps at zero.
    /// Unlike sorting, the mean stays fixed.
    pub fn around_mean(self) -> Self {
        let m = self.mean_ml.max(0.0);
        Self::new(
            self.lower_ml.min(self.mean_ml).max(0.0),
            m,
            self.upper_ml.max(self.mean_ml).max(0.0),
        )
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lower_ml <= y && y <= self.upper_ml
    }

    pub fn width(&self) -> f64 {
        self.upper_ml - self.lower_ml
    }

    pub fn is_bounded(&self) -> bool {
        self.lower_ml.is_finite() && self.upper_ml.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeInterval {
    pub method_id: String,
    pub calibrated: bool,
    /// One entry per foreground class.
    pub classes: Vec<ClassInterval>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mu_ml: f64,
    pub sigma_ml: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingStats {
    pub classes: Vec<ClassStats>,
    pub n_samples: usize,
}

/// Uncalibrated output of a constructor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RawPrediction {
    Direct(VolumeInterval),
    Sampling(SamplingStats),
}

/// One (case, method) evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PIRecord {
    /// Training run the prediction came from.
    #[serde(default)]
    pub run: usize,
    pub case_id: String,
    pub method_id: String,
    pub truth_ml: Vec<f64>,
    pub raw: RawPrediction,
    /// Finalized interval, calibrated when a factor was available.
    pub interval: VolumeInterval,
    /// Per-class Dice of the method's segmentation against ground truth.
    pub dsc: Vec<f64>,
    /// Per-class flag: raw head volumes were out of order (three-head net only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub head_order_violation: Vec<bool>,
    /// Per-class `(lower, mean, upper)` head volumes before sorting.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub head_volumes_ml: Vec<[f64; 3]>,
    pub forward_passes: usize,
    pub wall_time_s: f64,
}

pub fn write_jsonl(path: &Path, records: &[PIRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PIRecord>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}", i + 1), e.to_string()))?,
        );
    }
    Ok(records)
}

pub fn sort_triple(mut v: [f64; 3]) -> [f64; 3] {
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// Foreground volumes of the argmax segmentation (ties to the lowest class).
pub fn mask_volumes<T: Real>(probs: &Volume<T>, spacing_mm: [f64; 3]) -> Vec<f64> {
    label_volumes(&argmax_channels(probs), probs.channels(), spacing_mm)
}

pub fn label_volumes(labels: &[u8], n_classes: usize, spacing_mm: [f64; 3]) -> Vec<f64> {
    crate::phantom::true_volumes(labels, n_classes, spacing_mm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriadPrediction {
    pub interval: VolumeInterval,
    /// Head volumes `(lower, mean, upper)` per class, before sorting.
    pub raw: Vec<[f64; 3]>,
    pub violations: Vec<bool>,
}

pub fn triad_intervals<T: Real>(masks: &SoftMaskSet<T>, spacing_mm: [f64; 3]) -> Result<TriadPrediction> {
    if masks.n_heads() != 3 {
        return Err(Error::shape("triad heads", 3, masks.n_heads()));
    }
    let vols: Vec<Vec<f64>> = (0..3).map(|h| mask_volumes(masks.probs(h), spacing_mm)).collect();
    let raw: Vec<[f64; 3]> = (0..vols[0].len())
        .map(|c| [vols[0][c], vols[1][c], vols[2][c]])
        .collect();
    Ok(triad_from_volumes(raw))
}

pub fn triad_from_volumes(raw: Vec<[f64; 3]>) -> TriadPrediction {
    let violations = raw.iter().map(|t| !(t[0] <= t[1] && t[1] <= t[2])).collect();
    let classes = raw
        .iter()
        .map(|&t| ClassInterval::new(t[0], t[1], t[2]).sorted_clamped())
        .collect();
    TriadPrediction {
        interval: VolumeInterval {
            method_id: TRIAD.into(),
            calibrated: false,
            classes,
        },
        raw,
        violations,
    }
}

/// Sample mean and Bessel-corrected standard deviation per class.
/// `samples[s][c]` is the volume of class `c` in sample `s`.
pub fn sample_stats(samples: &[Vec<f64>]) -> Result<SamplingStats> {
    if samples.len() < 2 {
        return Err(Error::config(format!("need at least 2 samples, got {}", samples.len())));
    }
    let n_cls = samples[0].len();
    if samples.iter().any(|s| s.len() != n_cls) {
        return Err(Error::shape("sample volumes", n_cls, "ragged"));
    }
    let n = samples.len() as f64;
    let classes = (0..n_cls)
        .map(|c| {
            let first = samples[0][c];
            if samples.iter().all(|s| s[c] == first) {
                return ClassStats {
                    mu_ml: first,
                    sigma_ml: 0.0,
                };
            }
            let mu = samples.iter().map(|s| s[c]).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s[c] - mu).powi(2)).sum::<f64>() / (n - 1.0);
            ClassStats {
                mu_ml: mu,
                sigma_ml: var.sqrt(),
            }
        })
        .collect();
    Ok(SamplingStats {
        classes,
        n_samples: samples.len(),
    })
}

/// `n` thresholds evenly spaced over `[0.01, 0.99]`.
pub fn ct_thresholds(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5];
    }
    (0..n).map(|i| 0.01 + 0.98 * i as f64 / (n - 1) as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSweep {
    pub stats: SamplingStats,
    /// `volumes[c][k]`: class `c` volume at threshold `k`.
    pub volumes: Vec<Vec<f64>>,
}

/// Binarizes each foreground class's own probability map at every threshold.
pub fn ct_stats<T: Real>(probs: &Volume<T>, thresholds: &[f64], spacing_mm: [f64; 3]) -> Result<ThresholdSweep> {
    if thresholds.len() < 2 {
        return Err(Error::config("confidence thresholding needs at least 2 thresholds"));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) || thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::config("thresholds must be strictly increasing within (0, 1)"));
    }
    let vv = voxel_volume_ml(spacing_mm);
    let mut volumes = Vec::with_capacity(probs.channels().saturating_sub(1));
    for c in 1..probs.channels() {
        let mut p: Vec<f64> = probs.channel(c).iter().map(|v| v.f64()).collect();
        p.sort_by(|a, b| a.total_cmp(b));
        // count of p >= t is len minus the number strictly below t
        let per_t = thresholds
            .iter()
            .map(|&t| (p.len() - p.partition_point(|&x| x < t)) as f64 * vv)
            .collect();
        volumes.push(per_t);
    }
    let samples: Vec<Vec<f64>> = (0..thresholds.len())
        .map(|k| volumes.iter().map(|v: &Vec<f64>| v[k]).collect())
        .collect();
    Ok(ThresholdSweep {
        stats: sample_stats(&samples)?,
        volumes,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPrediction<T> {
    pub stats: SamplingStats,
    /// Average of the per-sample probability maps in the original frame.
    pub mean_probs: Volume<T>,
    pub forward_passes: usize,
}

fn average<T: Real>(maps: &[Volume<T>]) -> Volume<T> {
    let mut acc = maps[0].clone();
    for m in &maps[1..] {
        for (a, &b) in acc.data_mut().iter_mut().zip(m.data()) {
            *a += b;
        }
    }
    let inv = T::of(1.0 / maps.len() as f64);
    acc.data_mut().iter_mut().for_each(|a| *a *= inv);
    acc
}

pub fn mc_stats<T: Real>(
    net: &Net<T>,
    x: &Volume<T>,
    passes: usize,
    seed: u64,
    spacing_mm: [f64; 3],
) -> Result<SamplingPrediction<T>> {
    if passes < 2 {
        return Err(Error::config("MC dropout needs at least 2 passes"));
    }
    let outs = forward_mc(net, x, passes, seed)?;
    let probs: Vec<Volume<T>> = outs.into_iter().map(|mut o| o.heads.swap_remove(0).probs).collect();
    let samples: Vec<Vec<f64>> = probs.iter().map(|p| mask_volumes(p, spacing_mm)).collect();
    Ok(SamplingPrediction {
        stats: sample_stats(&samples)?,
        mean_probs: average(&probs),
        forward_passes: passes,
    })
}

/// Test-time augmentation around an arbitrary probability predictor. Each
/// prediction is mapped back to the original frame before counting; voxels
/// that left the field of view count as background.
pub fn tta_stats_with<T: Real>(
    mut predict: impl FnMut(&Volume<T>) -> Result<Volume<T>>,
    x: &Volume<T>,
    augmentations: &[Augmentation],
    spacing_mm: [f64; 3],
) -> Result<SamplingPrediction<T>> {
    if augmentations.len() < 2 {
        return Err(Error::config("TTA needs at least 2 augmentations"));
    }
    let mut maps = Vec::with_capacity(augmentations.len());
    for aug in augmentations {
        let pred = predict(&aug.apply(x))?;
        let mut fill = vec![T::zero(); pred.channels()];
        fill[0] = T::one();
        maps.push(aug.invert(&pred, &fill));
    }
    let samples: Vec<Vec<f64>> = maps.iter().map(|p| mask_volumes(p, spacing_mm)).collect();
    Ok(SamplingPrediction {
        stats: sample_stats(&samples)?,
        mean_probs: average(&maps),
        forward_passes: augmentations.len(),
    })
}

pub fn tta_stats<T: Real>(
    net: &Net<T>,
    x: &Volume<T>,
    n_aug: usize,
    seed: u64,
    spacing_mm: [f64; 3],
) -> Result<SamplingPrediction<T>> {
    let augs = sample_augmentations(x.dims(), n_aug, seed);
    tta_stats_with(
        |input| Ok(forward(net, input)?.heads.swap_remove(0).probs),
        x,
        &augs,
        spacing_mm,
    )
}

/// Sorts and clamps raw `(q_lo, q_med, q_hi)` triples.
pub fn regcnn_from_outputs(outputs: &[f64]) -> Result<VolumeInterval> {
    if outputs.len() % 3 != 0 {
        return Err(Error::shape("regressor outputs", "multiple of 3", outputs.len()));
    }
    let classes = outputs
        .chunks_exact(3)
        .map(|t| ClassInterval::new(t[0], t[1], t[2]).sorted_clamped())
        .collect();
    Ok(VolumeInterval {
        method_id: REGCNN.into(),
        calibrated: false,
        classes,
    })
}

pub fn regcnn_intervals<T: Real>(
    regressor: &Net<T>,
    intensities: &Volume<T>,
    segmentation_one_hot: &Volume<T>,
) -> Result<VolumeInterval> {
    regcnn_from_outputs(&regress(regressor, intensities, segmentation_one_hot)?)
}

/// Two-sided normal critical value; exactly 1.65 at `alpha = 0.1`.
pub fn z_value(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if (alpha - 0.1).abs() < 1e-12 {
        return Ok(1.65);
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(1.0 - alpha / 2.0))
}

pub fn interval_from_stats(stats: &SamplingStats, alpha: f64, method_id: &str) -> Result<VolumeInterval> {
    interval_with_factor(stats, &vec![z_value(alpha)?; stats.classes.len()], method_id)
}

/// `[μ − kσ, μ + kσ]` per class, clamped at zero.
pub fn interval_with_factor(stats: &SamplingStats, k: &[f64], method_id: &str) -> Result<VolumeInterval> {
    if k.len() != stats.classes.len() {
        return Err(Error::shape("per-class factors", stats.classes.len(), k.len()));
    }
    let classes = stats
        .classes
        .iter()
        .zip(k)
        .map(|(s, &k)| {
            // 0·∞ would be NaN; a zero-width interval stays zero-width
            let half = if s.sigma_ml == 0.0 { 0.0 } else { k * s.sigma_ml };
            ClassInterval::new(s.mu_ml - half, s.mu_ml, s.mu_ml + half).around_mean()
        })
        .collect();
    Ok(VolumeInterval {
        method_id: method_id.into(),
        calibrated: false,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_net, random_input, NetSpec};
    use crate::tensor::one_hot;
    use proptest::prelude::*;

    const MM1: [f64; 3] = [1.0, 1.0, 1.0];

    #[test]
    fn uniform_probabilities_yield_empty_foreground() {
        let p = Volume::from_vec(4, [2, 2, 2], vec![0.25f64; 32]).unwrap();
        assert_eq!(mask_volumes(&p, MM1), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn three_voxels_of_class_one() {
        let mut labels = vec![0u8; 27];
        labels[..3].fill(1);
        let p = one_hot::<f64>(&labels, 3, [3, 3, 3]).unwrap();
        let v = mask_volumes(&p, MM1);
        assert!((v[0] - 0.003).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn triad_sorting_and_flags() {
        let p = triad_from_volumes(vec![[2.0, 3.0, 4.0], [3.0, 2.0, 4.0]]);
        assert_eq!(p.interval.classes[0], ClassInterval::new(2.0, 3.0, 4.0));
        assert_eq!(p.interval.classes[1], ClassInterval::new(2.0, 3.0, 4.0));
        assert_eq!(p.violations, vec![false, true]);
    }

    #[test]
    fn identical_heads_give_degenerate_interval() {
        let net = build_net::<f64>(&NetSpec { base_filters: 2, depth: 2, ..NetSpec::triad(2, 3) }, 1).unwrap();
        let out = forward(&net, &random_input(2, [8, 8, 8], 2)).unwrap();
        let t = triad_intervals(&out, MM1).unwrap();
        for c in &t.interval.classes {
            assert_eq!(c.lower_ml, c.mean_ml);
            assert_eq!(c.mean_ml, c.upper_ml);
        }
        let single = SoftMaskSet {
            heads: vec![out.heads[0].clone()],
            head_names: vec!["mask".into()],
        };
        assert!(triad_intervals(&single, MM1).is_err());
    }

    #[test]
    fn ct_counts_by_threshold() {
        // class-1 probabilities {0.2, 0.6, 0.9}
        let p = Volume::from_vec(2, [1, 1, 3], vec![0.8f64, 0.4, 0.1, 0.2, 0.6, 0.9]).unwrap();
        let sweep = ct_stats(&p, &[0.5, 0.8], [10.0, 10.0, 10.0]).unwrap();
        assert_eq!(sweep.volumes[0], vec![2.0, 1.0]);
        assert!(ct_stats(&p, &[0.5], MM1).is_err());
        assert!(ct_stats(&p, &[0.5, 0.5], MM1).is_err());
    }

    #[test]
    fn ct_all_ones_has_zero_sigma() {
        let mut data = vec![0.0f64; 8];
        data.extend(vec![1.0; 8]);
        let p = Volume::from_vec(2, [2, 2, 2], data).unwrap();
        let sweep = ct_stats(&p, &ct_thresholds(20), MM1).unwrap();
        assert_eq!(sweep.stats.classes[0].sigma_ml, 0.0);
        assert!((sweep.stats.classes[0].mu_ml - 0.008).abs() < 1e-15);
    }

    #[test]
    fn thresholds_span_the_range() {
        let t = ct_thresholds(20);
        assert_eq!(t.len(), 20);
        assert!((t[0] - 0.01).abs() < 1e-15 && (t[19] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn stats_use_bessel_correction() {
        let s = sample_stats(&[vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(s.classes[0].mu_ml, 2.0);
        assert!((s.classes[0].sigma_ml - 2f64.sqrt()).abs() < 1e-15);
        assert!(sample_stats(&[vec![1.0]]).is_err());
    }

    #[test]
    fn interval_from_stats_examples() {
        let stats = |mu, sigma| SamplingStats {
            classes: vec![ClassStats { mu_ml: mu, sigma_ml: sigma }],
            n_samples: 20,
        };
        let i = interval_from_stats(&stats(10.0, 2.0), 0.1, MC).unwrap().classes[0];
        assert!((i.lower_ml - 6.7).abs() < 1e-12 && (i.upper_ml - 13.3).abs() < 1e-12);
        let i = interval_from_stats(&stats(10.0, 0.0), 0.1, MC).unwrap().classes[0];
        assert_eq!((i.lower_ml, i.upper_ml), (10.0, 10.0));
        let i = interval_from_stats(&stats(1.0, 1.0), 0.1, MC).unwrap().classes[0];
        assert_eq!(i.lower_ml, 0.0);
        assert!((i.upper_ml - 2.65).abs() < 1e-12);
    }

    #[test]
    fn z_values() {
        assert_eq!(z_value(0.1).unwrap(), 1.65);
        assert!((z_value(0.05).unwrap() - 1.959964).abs() < 1e-5);
        assert!(z_value(1.0).is_err());
    }

    #[test]
    fn regcnn_clamps_and_sorts() {
        let v = regcnn_from_outputs(&[-0.5, 2.0, 3.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!(v.classes[0], ClassInterval::new(0.0, 2.0, 3.0));
        assert_eq!(v.classes[1], ClassInterval::new(2.0, 3.0, 4.0));
        assert!(regcnn_from_outputs(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn mc_is_seeded_and_needs_dropout() {
        let spec = NetSpec { base_filters: 2, depth: 2, ..NetSpec::dropout(2, 3) };
        let net = build_net::<f64>(&spec, 4).unwrap();
        let x = random_input(2, [8, 8, 8], 5);
        let a = mc_stats(&net, &x, 4, 9, MM1).unwrap();
        assert_eq!(a, mc_stats(&net, &x, 4, 9, MM1).unwrap());
        assert_eq!(a.forward_passes, 4);
        assert!(mc_stats(&net, &x, 1, 9, MM1).is_err());
        let plain = build_net::<f64>(&NetSpec { base_filters: 2, depth: 2, ..NetSpec::segmentation(2, 3) }, 4).unwrap();
        assert!(mc_stats(&plain, &x, 4, 9, MM1).is_err());
    }

    fn oracle_case() -> Volume<f64> {
        let dims = [8, 8, 8];
        let mut labels = vec![0u8; 512];
        for z in 1..5 {
            for y in 2..6 {
                for x in 0..3 {
                    labels[(z * 8 + y) * 8 + x] = if x == 0 { 2 } else { 1 };
                }
            }
        }
        one_hot(&labels, 3, dims).unwrap()
    }

    #[test]
    fn tta_identity_gives_single_pass_volume() {
        let g = oracle_case();
        let augs = vec![Augmentation::identity(); 5];
        let s = tta_stats_with(|x| Ok(x.clone()), &g, &augs, MM1).unwrap();
        assert_eq!(s.forward_passes, 5);
        let single = mask_volumes(&g, MM1);
        for (c, v) in s.stats.classes.iter().zip(&single) {
            assert_eq!(c.sigma_ml, 0.0);
            assert!((c.mu_ml - v).abs() < 1e-15);
        }
    }

    #[test]
    fn tta_flips_with_equivariant_oracle_are_exact() {
        let g = oracle_case();
        let augs: Vec<_> = (0..8)
            .map(|i| Augmentation::flip([i & 1 == 1, i & 2 == 2, i & 4 == 4]))
            .collect();
        let s = tta_stats_with(|x| Ok(x.clone()), &g, &augs, MM1).unwrap();
        assert!(s.stats.classes.iter().all(|c| c.sigma_ml == 0.0));
        assert_eq!(s.mean_probs, g);
        assert!(tta_stats_with(|x| Ok(x.clone()), &g, &augs[..1], MM1).is_err());
    }

    #[test]
    fn tta_is_seeded() {
        let net = build_net::<f64>(&NetSpec { base_filters: 2, depth: 2, ..NetSpec::segmentation(2, 3) }, 1).unwrap();
        let x = random_input(2, [8, 8, 8], 2);
        let a = tta_stats(&net, &x, 3, 5, MM1).unwrap();
        assert_eq!(a, tta_stats(&net, &x, 3, 5, MM1).unwrap());
    }

    #[test]
    fn records_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let rec = PIRecord {
            run: 0,
            case_id: "case_0001".into(),
            method_id: TRIAD.into(),
            truth_ml: vec![1.5],
            raw: RawPrediction::Direct(VolumeInterval {
                method_id: TRIAD.into(),
                calibrated: false,
                classes: vec![ClassInterval::new(1.0, 1.4, 2.0)],
            }),
            interval: VolumeInterval {
                method_id: TRIAD.into(),
                calibrated: true,
                classes: vec![ClassInterval::new(0.0, 1.4, f64::INFINITY)],
            },
            dsc: vec![0.9],
            head_order_violation: vec![false],
            head_volumes_ml: vec![[1.0, 2.0, 3.0]],
            forward_passes: 1,
            wall_time_s: 0.01,
        };
        let path = dir.path().join("r.jsonl");
        write_jsonl(&path, &[rec.clone(), rec.clone()]).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), vec![rec.clone(), rec]);
    }

    proptest! {
        #[test]
        fn ct_volumes_never_increase(data in prop::collection::vec(0.0f64..1.0, 2 * 27)) {
            let p = Volume::from_vec(2, [3, 3, 3], data).unwrap();
            let sweep = ct_stats(&p, &ct_thresholds(20), MM1).unwrap();
            for w in sweep.volumes[0].windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }

        #[test]
        fn finalized_intervals_are_ordered(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0) {
            for i in [ClassInterval::new(a, b, c).sorted_clamped(), ClassInterval::new(a, b.abs(), c).around_mean()] {
                prop_assert!(0.0 <= i.lower_ml && i.lower_ml <= i.mean_ml && i.mean_ml <= i.upper_ml);
            }
        }
    }
}
