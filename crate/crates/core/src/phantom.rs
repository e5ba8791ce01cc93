//! Synthetic multi-channel 3D phantoms with nested lesions and exact
//! ground-truth volumes, plus the on-disk dataset format.
//!
//! A lesion is a family of concentric axis-aligned ellipsoids, one per
//! foreground class, listed from outermost to innermost in
//! [`PhantomSpec::nesting_order`]. With the default order `[2, 1, 3]` every
//! class-3 voxel lies inside the class-1 ellipsoid of its family, which lies
//! inside the class-2 ellipsoid. Where families overlap, the deeper layer
//! wins.
//!
//! Intensities are the per-class table value, blurred to mimic partial
//! volume, scaled by a per-case channel gain and corrupted by Gaussian noise.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::tensor::{voxel_count, Dims, Volume};

const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub grid_size: Dims,
    pub n_channels: usize,
    pub n_classes: usize,
    pub voxel_spacing_mm: [f64; 3],
    pub lesion_count_range: [usize; 2],
    /// Semi-axis range of the outermost ellipsoid, in mm.
    pub lesion_radius_range_mm: [f64; 2],
    /// Ratio between the semi-axes of consecutive nested layers.
    pub shell_ratio_range: [f64; 2],
    pub noise_sigma: f64,
    /// Gaussian blur (in voxels) applied to the piecewise-constant image.
    pub partial_volume_sigma: f64,
    /// Maximum relative deviation of the per-case channel gain.
    pub gain_jitter: f64,
    /// Mean intensity per `[class][channel]`.
    pub intensity_table: Vec<Vec<f64>>,
    /// Foreground classes from outermost to innermost layer.
    pub nesting_order: Vec<u8>,
    pub class_names: Vec<String>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid_size: [32, 32, 32],
            n_channels: 4,
            n_classes: 4,
            voxel_spacing_mm: [1.0, 1.0, 1.0],
            lesion_count_range: [1, 2],
            lesion_radius_range_mm: [5.0, 10.0],
            shell_ratio_range: [0.55, 0.8],
            noise_sigma: 0.1,
            partial_volume_sigma: 0.8,
            gain_jitter: 0.1,
            // channels mimic FLAIR, T1, T2, T1ce
            intensity_table: vec![
                vec![0.30, 0.50, 0.30, 0.40],
                vec![0.50, 0.20, 0.80, 0.35],
                vec![0.80, 0.40, 0.70, 0.45],
                vec![0.60, 0.45, 0.55, 0.90],
            ],
            nesting_order: vec![2, 1, 3],
            class_names: vec![
                "background".into(),
                "necrotic".into(),
                "edematous".into(),
                "enhancing".into(),
            ],
        }
    }
}

impl PhantomSpec {
    pub fn voxel_volume_ml(&self) -> f64 {
        voxel_volume_ml(self.voxel_spacing_mm)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size.iter().any(|&n| n < 8) {
            return Err(Error::config(format!("grid_size must be >= 8 on every axis, got {:?}", self.grid_size)));
        }
        if self.n_classes < 2 || self.n_classes > 255 {
            return Err(Error::config("n_classes must lie in 2..=255"));
        }
        if self.n_channels == 0 {
            return Err(Error::config("n_channels must be >= 1"));
        }
        if self.voxel_spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config("voxel spacing must be positive"));
        }
        let [cmin, cmax] = self.lesion_count_range;
        if cmin == 0 || cmin > cmax {
            return Err(Error::config("lesion_count_range must satisfy 1 <= min <= max"));
        }
        let [rmin, rmax] = self.lesion_radius_range_mm;
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::config("lesion_radius_range_mm must satisfy 0 < min <= max"));
        }
        let [smin, smax] = self.shell_ratio_range;
        if !(smin > 0.0 && smin <= smax && smax < 1.0) {
            return Err(Error::config("shell_ratio_range must satisfy 0 < min <= max < 1"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.partial_volume_sigma >= 0.0) {
            return Err(Error::config("noise and blur sigmas must be >= 0"));
        }
        if !(self.gain_jitter >= 0.0 && self.gain_jitter < 1.0) {
            return Err(Error::config("gain_jitter must lie in [0, 1)"));
        }
        if self.intensity_table.len() != self.n_classes
            || self.intensity_table.iter().any(|row| row.len() != self.n_channels)
        {
            return Err(Error::config("intensity_table must be n_classes x n_channels"));
        }
        let mut order = self.nesting_order.clone();
        order.sort_unstable();
        if order != (1..self.n_classes as u8).collect::<Vec<_>>() {
            return Err(Error::config("nesting_order must be a permutation of the foreground classes"));
        }
        if self.class_names.len() != self.n_classes {
            return Err(Error::config("class_names must have n_classes entries"));
        }
        Ok(())
    }

    /// The outermost ellipsoid must fit inside the grid along every axis.
    fn check_radii_fit(&self) -> Result<()> {
        let rmax = self.lesion_radius_range_mm[1];
        for axis in 0..3 {
            let diameter_vox = 2.0 * rmax / self.voxel_spacing_mm[axis];
            if diameter_vox >= (self.grid_size[axis] - 1) as f64 {
                return Err(Error::Generation(format!(
                    "lesion radius {rmax} mm does not fit a grid of {} voxels at {} mm spacing (axis {axis})",
                    self.grid_size[axis], self.voxel_spacing_mm[axis]
                )));
            }
        }
        Ok(())
    }
}

pub fn voxel_volume_ml(spacing_mm: [f64; 3]) -> f64 {
    spacing_mm[0] * spacing_mm[1] * spacing_mm[2] / 1000.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub case_id: String,
    pub seed: u64,
    pub intensities: Volume<f32>,
    pub labels: Vec<u8>,
    pub spacing_mm: [f64; 3],
    pub class_names: Vec<String>,
    /// Foreground class volumes (classes `1..N`), in mL.
    pub true_volumes_ml: Vec<f64>,
}

impl PhantomCase {
    pub fn dims(&self) -> Dims {
        self.intensities.dims()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Foreground volumes `count(labels == c) · voxel volume`, for `c = 1..N`.
pub fn true_volumes(labels: &[u8], n_classes: usize, spacing_mm: [f64; 3]) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        if (l as usize) < n_classes {
            counts[l as usize] += 1;
        }
    }
    let vv = voxel_volume_ml(spacing_mm);
    counts[1..].iter().map(|&c| c as f64 * vv).collect()
}

struct Lesion {
    center: [f64; 3],
    /// Semi-axes in mm per layer, outermost first.
    layers: Vec<[f64; 3]>,
}

fn sample_lesion(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Lesion {
    let [rmin, rmax] = spec.lesion_radius_range_mm;
    let [smin, smax] = spec.shell_ratio_range;
    let mut axes = [0.0; 3];
    for a in &mut axes {
        *a = if rmin < rmax { rng.random_range(rmin..rmax) } else { rmin };
    }
    let mut center = [0.0; 3];
    for axis in 0..3 {
        let half = axes[axis] / spec.voxel_spacing_mm[axis];
        let lo = half;
        let hi = (spec.grid_size[axis] - 1) as f64 - half;
        center[axis] = if lo < hi { rng.random_range(lo..hi) } else { 0.5 * (lo + hi) };
    }
    let mut layers = vec![axes];
    for _ in 1..spec.nesting_order.len() {
        let ratio = if smin < smax { rng.random_range(smin..smax) } else { smin };
        let prev = *layers.last().expect("nonempty");
        layers.push([prev[0] * ratio, prev[1] * ratio, prev[2] * ratio]);
    }
    Lesion { center, layers }
}

fn rasterize(spec: &PhantomSpec, lesions: &[Lesion]) -> Vec<u8> {
    let [d, h, w] = spec.grid_size;
    let sp = spec.voxel_spacing_mm;
    // nesting depth per voxel, 0 = background
    let mut depth = vec![0usize; d * h * w];
    for lesion in lesions {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = [z as f64, y as f64, x as f64];
                    let idx = (z * h + y) * w + x;
                    for (k, axes) in lesion.layers.iter().enumerate() {
                        let mut r2 = 0.0;
                        for axis in 0..3 {
                            let t = (p[axis] - lesion.center[axis]) * sp[axis] / axes[axis];
                            r2 += t * t;
                        }
                        if r2 > 1.0 {
                            break;
                        }
                        depth[idx] = depth[idx].max(k + 1);
                    }
                }
            }
        }
    }
    depth
        .into_iter()
        .map(|k| if k == 0 { 0 } else { spec.nesting_order[k - 1] })
        .collect()
}

/// Separable Gaussian blur with clamped borders, in place.
fn blur(data: &mut [f32], dims: Dims, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut tmp = vec![0.0f32; data.len()];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        for (i, out) in tmp.iter_mut().enumerate() {
            let coord = ((i / strides[axis]) % dims[axis]) as isize;
            let base = i as isize - coord * strides[axis] as isize;
            let mut acc = 0.0f64;
            for (j, &kv) in kernel.iter().enumerate() {
                let c = (coord + j as isize - radius).clamp(0, n - 1);
                acc += kv * data[(base + c * strides[axis] as isize) as usize] as f64;
            }
            *out = acc as f32;
        }
        data.copy_from_slice(&tmp);
    }
}

pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<PhantomCase> {
    spec.validate()?;
    spec.check_radii_fit()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_fg = spec.n_classes - 1;
    for _ in 0..MAX_ATTEMPTS {
        let [cmin, cmax] = spec.lesion_count_range;
        let count = rng.random_range(cmin..=cmax);
        let lesions: Vec<Lesion> = (0..count).map(|_| sample_lesion(spec, &mut rng)).collect();
        let labels = rasterize(spec, &lesions);
        let volumes = true_volumes(&labels, spec.n_classes, spec.voxel_spacing_mm);
        if volumes.iter().filter(|&&v| v > 0.0).count() < n_fg {
            continue;
        }
        let intensities = render_intensities(spec, &labels, &mut rng);
        return Ok(PhantomCase {
            case_id: format!("case_{seed:016x}"),
            seed,
            intensities,
            labels,
            spacing_mm: spec.voxel_spacing_mm,
            class_names: spec.class_names.clone(),
            true_volumes_ml: volumes,
        });
    }
    Err(Error::Generation(format!(
        "no phantom with every foreground class present after {MAX_ATTEMPTS} attempts (seed {seed})"
    )))
}

fn render_intensities(spec: &PhantomSpec, labels: &[u8], rng: &mut ChaCha8Rng) -> Volume<f32> {
    let dims = spec.grid_size;
    let v = voxel_count(dims);
    let mut vol = Volume::zeros(spec.n_channels, dims);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    for c in 0..spec.n_channels {
        let gain = 1.0 + rng.random_range(-1.0..=1.0) * spec.gain_jitter;
        let ch = vol.channel_mut(c);
        for (dst, &l) in ch.iter_mut().zip(labels) {
            *dst = spec.intensity_table[l as usize][c] as f32;
        }
        blur(ch, dims, spec.partial_volume_sigma);
        for dst in ch.iter_mut() {
            let n = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            *dst = (*dst as f64 * gain + n) as f32;
        }
    }
    debug_assert_eq!(vol.voxels(), v);
    vol
}

// ---------------------------------------------------------------------------
// Splitting

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub calibration_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Fold sizes by largest remainder; remainder ties go to the earlier fold.
pub fn fold_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| !(f >= 0.0)) {
        return Err(Error::config(format!("split fractions must be >= 0 and sum to 1, got {fractions:?}")));
    }
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, r) in sizes.iter_mut().zip(&raw) {
        *s = r.floor() as usize;
    }
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    Ok(sizes)
}

pub fn split_dataset(ids: &[String], fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    let sizes = fold_sizes(ids.len(), fractions)?;
    for (name, &s) in ["train", "calibration", "test"].iter().zip(&sizes) {
        if s == 0 {
            return Err(Error::config(format!("{name} fold would be empty")));
        }
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_ids = shuffled.split_off(sizes[0] + sizes[1]);
    let calibration_ids = shuffled.split_off(sizes[0]);
    Ok(DatasetSplit {
        train_ids: shuffled,
        calibration_ids,
        test_ids,
    })
}

// ---------------------------------------------------------------------------
// On-disk format

fn field<'a>(meta: &'a Value, name: &str, path: &Path) -> Result<&'a Value> {
    meta.get(name)
        .ok_or_else(|| Error::format(path, name, "missing"))
}

fn parse_field<T: serde::de::DeserializeOwned>(meta: &Value, name: &str, path: &Path) -> Result<T> {
    serde_json::from_value(field(meta, name, path)?.clone())
        .map_err(|e| Error::format(path, name, e.to_string()))
}

/// Writes `meta.json`, `intensities.bin` (f32 LE) and `labels.bin` (u8).
pub fn write_case(case: &PhantomCase, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let [d, h, w] = case.dims();
    let meta = json!({
        "case_id": case.case_id,
        "seed": case.seed,
        "shape": [case.intensities.channels(), d, h, w],
        "dtype": "f32",
        "spacing_mm": case.spacing_mm,
        "class_names": case.class_names,
        "true_volumes_mL": case.true_volumes_ml,
    });
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    let mut bytes = Vec::with_capacity(case.intensities.data().len() * 4);
    for v in case.intensities.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join("intensities.bin"), bytes)?;
    fs::write(dir.join("labels.bin"), &case.labels)?;
    Ok(())
}

pub fn read_case(dir: &Path) -> Result<PhantomCase> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::MissingArtifact(meta_path.display().to_string()));
    }
    let meta: Value = serde_json::from_str(&fs::read_to_string(&meta_path)?)
        .map_err(|e| Error::format(&meta_path, "meta.json", e.to_string()))?;
    let case_id: String = parse_field(&meta, "case_id", &meta_path)?;
    let seed: u64 = parse_field(&meta, "seed", &meta_path)?;
    let shape: [usize; 4] = parse_field(&meta, "shape", &meta_path)?;
    let dtype: String = parse_field(&meta, "dtype", &meta_path)?;
    if dtype != "f32" {
        return Err(Error::format(&meta_path, "dtype", format!("unsupported dtype {dtype}")));
    }
    let spacing_mm: [f64; 3] = parse_field(&meta, "spacing_mm", &meta_path)?;
    let class_names: Vec<String> = parse_field(&meta, "class_names", &meta_path)?;
    let true_volumes_ml: Vec<f64> = parse_field(&meta, "true_volumes_mL", &meta_path)?;

    let [c, d, h, w] = shape;
    let dims = [d, h, w];
    let v = voxel_count(dims);
    let int_path = dir.join("intensities.bin");
    let bytes = fs::read(&int_path)?;
    if bytes.len() != c * v * 4 {
        return Err(Error::format(
            &int_path,
            "shape",
            format!("header implies {} bytes, payload has {}", c * v * 4, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let lab_path = dir.join("labels.bin");
    let labels = fs::read(&lab_path)?;
    if labels.len() != v {
        return Err(Error::format(
            &lab_path,
            "shape",
            format!("header implies {v} bytes, payload has {}", labels.len()),
        ));
    }
    if class_names.len() < 2 || labels.iter().any(|&l| l as usize >= class_names.len()) {
        return Err(Error::format(&lab_path, "labels", "label outside 0..N-1"));
    }
    if true_volumes(&labels, class_names.len(), spacing_mm) != true_volumes_ml {
        return Err(Error::format(&meta_path, "true_volumes_mL", "inconsistent with labels.bin"));
    }
    Ok(PhantomCase {
        case_id,
        seed,
        intensities: Volume::from_vec(c, dims, data)?,
        labels,
        spacing_mm,
        class_names,
        true_volumes_ml,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: PhantomSpec,
    pub seed: u64,
    pub ids: Vec<String>,
    pub case_seeds: Vec<u64>,
    pub split: DatasetSplit,
    pub fractions: [f64; 3],
}

/// Per-case seeds derived from the dataset seed (SplitMix64 sequence).
pub fn case_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut state = seed;
    (0..n)
        .map(|_| {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        })
        .collect()
}

/// Generates `n` cases, writes them under `root/cases/<id>` and writes
/// `root/manifest.json`.
pub fn write_dataset(
    root: &Path,
    spec: &PhantomSpec,
    n: usize,
    fractions: [f64; 3],
    seed: u64,
) -> Result<Manifest> {
    let seeds = case_seeds(seed, n);
    let mut ids = Vec::with_capacity(n);
    // check the split before generating anything
    fold_sizes(n, fractions)?;
    for (i, &s) in seeds.iter().enumerate() {
        let mut case = generate_phantom(spec, s)?;
        case.case_id = format!("case_{i:04}");
        write_case(&case, &root.join("cases").join(&case.case_id))?;
        ids.push(case.case_id);
    }
    let split = split_dataset(&ids, fractions, seed)?;
    let manifest = Manifest {
        spec: spec.clone(),
        seed,
        ids,
        case_seeds: seeds,
        split,
        fractions,
    };
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    serde_json::from_str(&fs::read_to_string(&path)?)
        .map_err(|e| Error::format(&path, "manifest.json", e.to_string()))
}

pub fn read_cases(root: &Path, ids: &[String]) -> Result<Vec<PhantomCase>> {
    ids.iter().map(|id| read_case(&root.join("cases").join(id))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            grid_size: [16, 16, 16],
            lesion_radius_range_mm: [3.0, 6.0],
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = PhantomSpec::default();
        assert_eq!(generate_phantom(&spec, 7).unwrap(), generate_phantom(&spec, 7).unwrap());
        assert_ne!(generate_phantom(&spec, 7).unwrap(), generate_phantom(&spec, 8).unwrap());
    }

    #[test]
    fn every_foreground_class_present() {
        for seed in 0..10 {
            let case = generate_phantom(&small_spec(), seed).unwrap();
            assert!(case.true_volumes_ml.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn oversized_radius_is_rejected() {
        let spec = PhantomSpec {
            lesion_radius_range_mm: [5.0, 40.0],
            ..Default::default()
        };
        assert!(matches!(generate_phantom(&spec, 1), Err(Error::Generation(_))));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            PhantomSpec { grid_size: [4, 32, 32], ..Default::default() },
            PhantomSpec { voxel_spacing_mm: [1.0, 0.0, 1.0], ..Default::default() },
            PhantomSpec { nesting_order: vec![1, 1, 3], ..Default::default() },
        ];
        for spec in bad {
            assert!(spec.validate().is_err());
        }
    }

    #[test]
    fn nesting_holds_within_each_family() {
        // with a single lesion family, class 3 voxels must have only
        // class 3 or class 1 neighbours, and class 1 only 1/2/3
        let spec = PhantomSpec {
            lesion_count_range: [1, 1],
            ..Default::default()
        };
        let case = generate_phantom(&spec, 3).unwrap();
        let [d, h, w] = case.dims();
        let at = |z: usize, y: usize, x: usize| case.labels[(z * h + y) * w + x];
        for z in 1..d - 1 {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let l = at(z, y, x);
                    let nbrs = [
                        at(z - 1, y, x),
                        at(z + 1, y, x),
                        at(z, y - 1, x),
                        at(z, y + 1, x),
                        at(z, y, x - 1),
                        at(z, y, x + 1),
                    ];
                    match l {
                        3 => assert!(nbrs.iter().all(|&n| n == 3 || n == 1)),
                        1 => assert!(nbrs.iter().all(|&n| n != 0)),
                        _ => {}
                    }
                }
            }
        }
    }

    #[test]
    fn volume_examples() {
        let mut labels = vec![0u8; 1000];
        labels[..100].fill(1);
        let v = true_volumes(&labels, 3, [1.0, 1.0, 1.0]);
        assert!((v[0] - 0.1).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
        let mut labels = vec![0u8; 20];
        labels[..10].fill(1);
        let v = true_volumes(&labels, 2, [2.0, 2.0, 2.0]);
        assert!((v[0] - 0.08).abs() < 1e-15);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ids: Vec<String> = (0..10).map(|i| format!("id{i}")).collect();
        let s = split_dataset(&ids, [0.5, 0.2, 0.3], 1).unwrap();
        assert_eq!(
            (s.train_ids.len(), s.calibration_ids.len(), s.test_ids.len()),
            (5, 2, 3)
        );
        assert_eq!(s, split_dataset(&ids, [0.5, 0.2, 0.3], 1).unwrap());
        assert!(split_dataset(&ids, [1.0, 0.0, 0.0], 1).is_err());
        assert!(split_dataset(&ids, [0.5, 0.2, 0.2], 1).is_err());
        let mut all: Vec<_> = s.train_ids.iter().chain(&s.calibration_ids).chain(&s.test_ids).cloned().collect();
        all.sort();
        let mut expected = ids.clone();
        expected.sort();
        assert_eq!(all, expected);
    }

    #[test]
    fn largest_remainder_rounding() {
        assert_eq!(fold_sizes(7, [0.5, 0.25, 0.25]).unwrap(), [3, 2, 2]);
        assert_eq!(fold_sizes(500, [0.4, 0.2, 0.4]).unwrap(), [200, 100, 200]);
        assert_eq!(fold_sizes(3, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap(), [1, 1, 1]);
    }

    #[test]
    fn case_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let case = generate_phantom(&small_spec(), 5).unwrap();
        write_case(&case, dir.path()).unwrap();
        assert_eq!(read_case(dir.path()).unwrap(), case);

        let bin = dir.path().join("intensities.bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes.pop();
        fs::write(&bin, &bytes).unwrap();
        match read_case(dir.path()) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "shape"),
            other => panic!("expected shape error, got {other:?}"),
        }

        write_case(&case, dir.path()).unwrap();
        let meta_path = dir.path().join("meta.json");
        let mut meta: Value = serde_json::from_str(&fs::read_to_string(&meta_path).unwrap()).unwrap();
        meta.as_object_mut().unwrap().remove("spacing_mm");
        fs::write(&meta_path, meta.to_string()).unwrap();
        match read_case(dir.path()) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "spacing_mm"),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
