//! Experiment pipeline: phantom dataset generation, training of the model
//! variants, per-method calibration and test-fold evaluation.
//!
//! Artifacts live under `out_dir`:
//!
//! ```text
//! data/         manifest.json, input_norm.json, cases/
//! models/       run{r}/{baseline,dropout,triad,regcnn}/
//! calibration/  run{r}/{method}/calibration.json, cal_records.jsonl (+ temperature.json for ct)
//! eval/         pi_records.jsonl, report.csv, report.txt, timing.csv, fig2_data.csv, run.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{
    apply_calibration, empirical_coverage, fit_additive_q, fit_multiplicative_q, fit_temperature, CalibrationFactor,
    LogitSamples, Temperature,
};
use crate::error::{Error, Result};
use crate::metrics::{build_report, interval_plot_csv, merge_runs, EvalReport};
use crate::nets::{
    build_net, forward, train, CheckpointMeta, Example, LossId, Net, NetSpec, SoftMaskSet, Target, TrainConfig,
};
use crate::nn::ops::softmax_channels;
use crate::phantom::{read_case, read_manifest, write_dataset, Manifest, PhantomCase, PhantomSpec};
use crate::pimethods::{
    ct_stats, ct_thresholds, interval_from_stats, method_kind, mc_stats, regcnn_intervals, triad_intervals,
    tta_stats, write_jsonl, MethodKind, PIRecord, RawPrediction, VolumeInterval, ALL_METHODS, CT, MC, REGCNN, TRIAD,
    TTA,
};
use crate::tensor::{argmax_channels, one_hot, Volume};

pub const BASELINE: &str = "baseline";
pub const DROPOUT: &str = "dropout";
pub const TRIAD_NET: &str = "triad";
pub const REGRESSOR: &str = "regcnn";
pub const VARIANTS: [&str; 4] = [BASELINE, DROPOUT, TRIAD_NET, REGRESSOR];
pub const DEFAULT_GAMMAS: [f64; 4] = [0.1, 0.2, 0.3, 0.4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSettings {
    pub base_filters: usize,
    pub depth: usize,
    /// Dropout rate of the MC-dropout variant.
    pub dropout_rate: f64,
    pub background_bias: f64,
}

impl Default for NetSettings {
    fn default() -> Self {
        Self {
            base_filters: 4,
            depth: 3,
            dropout_rate: 0.2,
            background_bias: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            epochs: 8,
            batch_size: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorSettings {
    pub base_filters: usize,
    pub depth: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for RegressorSettings {
    fn default() -> Self {
        Self {
            base_filters: 4,
            depth: 3,
            learning_rate: 2e-3,
            epochs: 30,
            batch_size: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub phantom: PhantomSpec,
    pub n_cases: usize,
    /// Train, calibration and test fractions.
    pub splits: [f64; 3],
    pub net: NetSettings,
    pub train: TrainSettings,
    pub regressor: RegressorSettings,
    pub alpha: f64,
    pub gamma: f64,
    pub methods: Vec<String>,
    /// MC-dropout passes.
    #[serde(rename = "T", alias = "mc_passes")]
    pub mc_passes: usize,
    pub n_thresholds: usize,
    pub n_aug: usize,
    pub n_runs: usize,
    /// Calibration voxels subsampled for temperature fitting.
    pub temperature_voxels: usize,
    pub pooled_calibration: bool,
    pub gammas: Vec<f64>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::default(),
            n_cases: 500,
            splits: [0.4, 0.2, 0.4],
            net: NetSettings::default(),
            train: TrainSettings::default(),
            regressor: RegressorSettings::default(),
            alpha: 0.1,
            gamma: 0.2,
            methods: ALL_METHODS.iter().map(|m| m.to_string()).collect(),
            mc_passes: 20,
            n_thresholds: 20,
            n_aug: 20,
            n_runs: 1,
            temperature_voxels: 100_000,
            pooled_calibration: false,
            gammas: DEFAULT_GAMMAS.to_vec(),
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 0.5) {
        return Err(Error::config(format!("gamma must lie in (0, 0.5), got {gamma}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::config(format!("config file {} not found", path.display())));
        }
        serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        check_gamma(self.gamma)?;
        for &g in &self.gammas {
            check_gamma(g)?;
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods must not be empty"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            method_kind(m)?;
            if self.methods[..i].contains(m) {
                return Err(Error::config(format!("method `{m}` listed twice")));
            }
        }
        crate::phantom::fold_sizes(self.n_cases, self.splits)?;
        if self.mc_passes < 2 || self.n_thresholds < 2 || self.n_aug < 2 {
            return Err(Error::config("T, n_thresholds and n_aug must be >= 2"));
        }
        if self.n_runs == 0 || self.temperature_voxels == 0 {
            return Err(Error::config("n_runs and temperature_voxels must be >= 1"));
        }
        if self.net.depth == 0 || self.regressor.depth == 0 {
            return Err(Error::config("network depth must be >= 1"));
        }
        let grid = self.phantom.grid_size;
        let fits = |min: usize, multiple: usize| grid.iter().all(|&n| n >= min && n % multiple == 0);
        if !fits(1 << self.net.depth, 1 << (self.net.depth - 1)) {
            return Err(Error::config(format!(
                "grid {grid:?} is incompatible with segmentation depth {}",
                self.net.depth
            )));
        }
        if !fits(1 << self.regressor.depth, 1 << self.regressor.depth) {
            return Err(Error::config(format!(
                "grid {grid:?} is incompatible with regressor depth {}",
                self.regressor.depth
            )));
        }
        for spec in [
            self.seg_spec(BASELINE)?,
            self.seg_spec(DROPOUT)?,
            self.seg_spec(TRIAD_NET)?,
            self.reg_spec(),
        ] {
            spec.validate()?;
        }
        self.train_config(LossId::Dice, 0).validate()?;
        self.regressor_train_config(0).validate()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn model_dir(&self, run: usize, variant: &str) -> PathBuf {
        self.out_dir.join("models").join(format!("run{run}")).join(variant)
    }

    pub fn calibration_dir(&self, run: usize, method: &str) -> PathBuf {
        self.out_dir.join("calibration").join(format!("run{run}")).join(method)
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir.join("eval")
    }

    fn image_channels(&self) -> usize {
        self.phantom.n_channels
    }

    fn seg_spec(&self, variant: &str) -> Result<NetSpec> {
        let (ch, n) = (self.image_channels(), self.phantom.n_classes);
        let base = match variant {
            BASELINE => NetSpec::segmentation(ch, n),
            DROPOUT => NetSpec {
                dropout_rate: self.net.dropout_rate,
                ..NetSpec::dropout(ch, n)
            },
            v if v.starts_with(TRIAD_NET) => NetSpec::triad(ch, n),
            other => return Err(Error::config(format!("`{other}` is not a segmentation variant"))),
        };
        Ok(NetSpec {
            base_filters: self.net.base_filters,
            depth: self.net.depth,
            background_bias: self.net.background_bias,
            ..base
        })
    }

    fn reg_spec(&self) -> NetSpec {
        let grid_ml = self.phantom.grid_size.iter().product::<usize>() as f64 * self.phantom.voxel_volume_ml();
        NetSpec {
            base_filters: self.regressor.base_filters,
            depth: self.regressor.depth,
            output_scale: grid_ml,
            ..NetSpec::regressor(self.image_channels(), self.phantom.n_classes)
        }
    }

    fn train_config(&self, loss: LossId, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            loss,
            seed,
        }
    }

    fn regressor_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.regressor.learning_rate,
            epochs: self.regressor.epochs,
            batch_size: self.regressor.batch_size,
            loss: LossId::PinballCompound { alpha: self.alpha },
            seed,
        }
    }

    /// Model variants the configured methods depend on, in training order.
    pub fn required_variants(&self) -> Vec<&'static str> {
        let has = |m: &str| self.methods.iter().any(|x| x == m);
        let mut out = Vec::new();
        if has(CT) || has(TTA) || has(REGCNN) {
            out.push(BASELINE);
        }
        if has(MC) {
            out.push(DROPOUT);
        }
        if has(TRIAD) {
            out.push(TRIAD_NET);
        }
        if has(REGCNN) {
            out.push(REGRESSOR);
        }
        out
    }

    fn methods_in_order(&self) -> Vec<&'static str> {
        ALL_METHODS
            .iter()
            .copied()
            .filter(|m| self.methods.iter().any(|x| x == m))
            .collect()
    }
}

/// Mixes a seed with a salt (one SplitMix64 step).
fn mix(seed: u64, salt: u64) -> u64 {
    crate::phantom::case_seeds(seed ^ salt.wrapping_mul(0xA24B_AED4_963E_E407), 1)[0]
}

fn variant_salt(variant: &str) -> u64 {
    match variant {
        BASELINE => 1,
        DROPOUT => 2,
        REGRESSOR => 4,
        _ => 3,
    }
}

fn method_salt(method: &str) -> u64 {
    ALL_METHODS.iter().position(|&m| m == method).unwrap_or(ALL_METHODS.len()) as u64 + 11
}

// ---------------------------------------------------------------------------
// Input normalization

/// Per-channel affine normalization fitted on the training fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn fit(cases: &[PhantomCase]) -> Result<Self> {
        let first = cases.first().ok_or_else(|| Error::config("cannot fit normalization on zero cases"))?;
        let ch = first.intensities.channels();
        let mut sum = vec![0.0f64; ch];
        let mut sq = vec![0.0f64; ch];
        let mut count = 0usize;
        for case in cases {
            if case.intensities.channels() != ch {
                return Err(Error::shape("normalization channels", ch, case.intensities.channels()));
            }
            for c in 0..ch {
                for &v in case.intensities.channel(c) {
                    let v = v as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += case.intensities.voxels();
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / n - m * m).max(0.0).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &Volume<f32>) -> Result<Volume<f32>> {
        if x.channels() != self.mean.len() {
            return Err(Error::shape("normalization channels", self.mean.len(), x.channels()));
        }
        let mut out = x.clone();
        for c in 0..x.channels() {
            let (m, s) = (self.mean[c], self.std[c]);
            for v in out.channel_mut(c) {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::format(path, "input_norm.json", e.to_string()))
    }
}

struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    norm: InputNorm,
}

impl Dataset {
    fn open(cfg: &ExperimentConfig) -> Result<Self> {
        let root = cfg.data_dir();
        let manifest = read_manifest(&root)?;
        if manifest.spec != cfg.phantom {
            warn!("phantom settings differ from the generated dataset; using the dataset's");
        }
        let norm = InputNorm::load(&root.join("input_norm.json"))?;
        Ok(Self { root, manifest, norm })
    }

    fn spec(&self) -> &PhantomSpec {
        &self.manifest.spec
    }

    fn foreground_names(&self) -> Vec<String> {
        self.spec().class_names[1..].to_vec()
    }

    fn read(&self, id: &str) -> Result<(PhantomCase, Volume<f32>)> {
        let case = read_case(&self.root.join("cases").join(id))?;
        let x = self.norm.apply(&case.intensities)?;
        Ok((case, x))
    }
}

// ---------------------------------------------------------------------------
// gen

/// Writes the phantom dataset, its split and the input normalization.
pub fn cmd_gen(cfg: &ExperimentConfig, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        if !force {
            return Err(Error::config(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                out.display()
            )));
        }
        for sub in ["data", "models", "calibration", "eval"] {
            let p = out.join(sub);
            if p.exists() {
                fs::remove_dir_all(&p)?;
            }
        }
    }
    let root = cfg.data_dir();
    fs::create_dir_all(&root)?;
    info!("generating {} phantoms in {}", cfg.n_cases, root.display());
    let manifest = write_dataset(&root, &cfg.phantom, cfg.n_cases, cfg.splits, cfg.seed)?;
    let train_cases = manifest
        .split
        .train_ids
        .iter()
        .map(|id| read_case(&root.join("cases").join(id)))
        .collect::<Result<Vec<_>>>()?;
    let norm = if train_cases.is_empty() {
        warn!("empty training fold; input normalization is the identity");
        InputNorm {
            mean: vec![0.0; cfg.phantom.n_channels],
            std: vec![1.0; cfg.phantom.n_channels],
        }
    } else {
        InputNorm::fit(&train_cases)?
    };
    norm.save(&root.join("input_norm.json"))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// train

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub run: usize,
    pub variant: String,
    pub dir: PathBuf,
    pub loss_trace: Vec<f64>,
    pub seconds: f64,
}

fn load_net(dir: &Path) -> Result<Net<f32>> {
    Ok(Net::<f32>::load(dir)?.0)
}

fn fit_and_save(
    spec: &NetSpec,
    init_seed: u64,
    examples: &[Example<f32>],
    tc: &TrainConfig,
    dir: &Path,
) -> Result<(Vec<f64>, f64)> {
    let start = Instant::now();
    let mut net = build_net::<f32>(spec, init_seed)?;
    let report = train(&mut net, examples, tc)?;
    net.save(
        dir,
        &CheckpointMeta {
            train: Some(tc.clone()),
            loss_trace: report.loss_trace.clone(),
        },
    )?;
    Ok((report.loss_trace, start.elapsed().as_secs_f64()))
}

fn segmentation_examples(data: &Dataset) -> Result<Vec<(PhantomCase, Example<f32>)>> {
    let ids = &data.manifest.split.train_ids;
    if ids.is_empty() {
        return Err(Error::config("training fold is empty"));
    }
    ids.iter()
        .map(|id| {
            let (case, x) = data.read(id)?;
            let target = Target::Labels(case.labels.clone());
            Ok((case, Example { input: x, target }))
        })
        .collect()
}

/// Trains `variant` for every run. A triad variant named `triad_g<γ>` uses
/// that γ instead of the configured one.
pub fn cmd_train(cfg: &ExperimentConfig, variant: &str) -> Result<Vec<TrainOutcome>> {
    cfg.validate()?;
    let gamma = triad_gamma(cfg, variant)?;
    if !VARIANTS.contains(&variant) && gamma.is_none() {
        return Err(Error::config(format!("unknown variant `{variant}`, expected one of {VARIANTS:?}")));
    }
    let data = Dataset::open(cfg)?;
    if variant == REGRESSOR {
        for run in 0..cfg.n_runs {
            let dir = cfg.model_dir(run, BASELINE);
            if !dir.join("model.json").exists() {
                return Err(Error::MissingArtifact(format!(
                    "regcnn needs the baseline checkpoint {} (train `baseline` first)",
                    dir.display()
                )));
            }
        }
    }
    let examples = segmentation_examples(&data)?;
    let mut outcomes = Vec::new();
    for run in 0..cfg.n_runs {
        let init_seed = mix(cfg.seed, (run as u64) << 8 | variant_salt(variant));
        let train_seed = mix(init_seed, 0x7a);
        let dir = cfg.model_dir(run, variant);
        info!("training {variant} (run {run}) on {} cases", examples.len());
        let (trace, seconds) = if variant == REGRESSOR {
            let baseline = load_net(&cfg.model_dir(run, BASELINE))?;
            let n = data.spec().n_classes;
            let reg_examples = examples
                .iter()
                .map(|(case, ex)| {
                    let labels = argmax_channels(forward(&baseline, &ex.input)?.probs(0));
                    let seg = one_hot::<f32>(&labels, n, case.dims())?;
                    Ok(Example {
                        input: ex.input.concat(&seg)?,
                        target: Target::Volumes(case.true_volumes_ml.clone()),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            fit_and_save(&cfg.reg_spec(), init_seed, &reg_examples, &cfg.regressor_train_config(train_seed), &dir)?
        } else {
            let loss = match gamma {
                Some(g) => LossId::Triad { gamma: g },
                None => LossId::Dice,
            };
            let ex: Vec<Example<f32>> = examples.iter().map(|(_, e)| e.clone()).collect();
            fit_and_save(&cfg.seg_spec(variant)?, init_seed, &ex, &cfg.train_config(loss, train_seed), &dir)?
        };
        info!("{variant} run {run}: {seconds:.1}s, final loss {:.5}", trace.last().copied().unwrap_or(f64::NAN));
        outcomes.push(TrainOutcome {
            run,
            variant: variant.into(),
            dir,
            loss_trace: trace,
            seconds,
        });
    }
    Ok(outcomes)
}

fn triad_gamma(cfg: &ExperimentConfig, variant: &str) -> Result<Option<f64>> {
    if variant == TRIAD_NET {
        return Ok(Some(cfg.gamma));
    }
    match variant.strip_prefix("triad_g") {
        Some(g) => {
            let gamma: f64 = g
                .parse()
                .map_err(|_| Error::config(format!("cannot read gamma from variant `{variant}`")))?;
            check_gamma(gamma)?;
            Ok(Some(gamma))
        }
        None => Ok(None),
    }
}

pub fn sweep_variant(gamma: f64) -> String {
    format!("triad_g{gamma:.2}")
}

// ---------------------------------------------------------------------------
// prediction

struct Models {
    baseline: Option<Net<f32>>,
    dropout: Option<Net<f32>>,
    triad: Option<Net<f32>>,
    regressor: Option<Net<f32>>,
    temperature: Temperature,
}

fn required<'a>(net: &'a Option<Net<f32>>, name: &str) -> Result<&'a Net<f32>> {
    net.as_ref()
        .ok_or_else(|| Error::MissingArtifact(format!("{name} checkpoint not loaded")))
}

impl Models {
    fn load(cfg: &ExperimentConfig, run: usize, methods: &[&str], triad_variant: &str) -> Result<Self> {
        let needs = |list: &[&str]| methods.iter().any(|m| list.contains(m));
        let get = |variant: &str, wanted: bool| -> Result<Option<Net<f32>>> {
            if wanted {
                load_net(&cfg.model_dir(run, variant)).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            baseline: get(BASELINE, needs(&[CT, TTA, REGCNN]))?,
            dropout: get(DROPOUT, needs(&[MC]))?,
            triad: get(triad_variant, needs(&[TRIAD]))?,
            regressor: get(REGRESSOR, needs(&[REGCNN]))?,
            temperature: Temperature::identity(),
        })
    }
}

struct Prediction {
    raw: RawPrediction,
    dsc: Vec<f64>,
    violations: Vec<bool>,
    head_volumes: Vec<[f64; 3]>,
    forward_passes: usize,
    wall_time_s: f64,
}

type BaselineCache = Option<(SoftMaskSet<f32>, f64)>;

struct Predictor<'a> {
    cfg: &'a ExperimentConfig,
    models: &'a Models,
    run: usize,
    spacing: [f64; 3],
    thresholds: Vec<f64>,
}

fn foreground_dsc(pred: &[u8], case: &PhantomCase) -> Result<Vec<f64>> {
    (1..case.n_classes())
        .map(|c| crate::metrics::dsc(pred, &case.labels, c as u8))
        .collect()
}

impl Predictor<'_> {
    fn baseline<'c>(&self, x: &Volume<f32>, cache: &'c mut BaselineCache) -> Result<&'c (SoftMaskSet<f32>, f64)> {
        if cache.is_none() {
            let start = Instant::now();
            let out = forward(required(&self.models.baseline, BASELINE)?, x)?;
            *cache = Some((out, start.elapsed().as_secs_f64()));
        }
        Ok(cache.as_ref().expect("filled above"))
    }

    fn sample_seed(&self, case: &PhantomCase, method: &str) -> u64 {
        mix(case.seed, method_salt(method) ^ (self.run as u64) << 16)
    }

    fn predict(&self, method: &str, case: &PhantomCase, x: &Volume<f32>, cache: &mut BaselineCache) -> Result<Prediction> {
        let spacing = self.spacing;
        let start = Instant::now();
        match method {
            TRIAD => {
                let out = forward(required(&self.models.triad, TRIAD_NET)?, x)?;
                let tp = triad_intervals(&out, spacing)?;
                let wall = start.elapsed().as_secs_f64();
                Ok(Prediction {
                    raw: RawPrediction::Direct(tp.interval),
                    dsc: foreground_dsc(&argmax_channels(out.probs(1)), case)?,
                    violations: tp.violations,
                    head_volumes: tp.raw,
                    forward_passes: 1,
                    wall_time_s: wall,
                })
            }
            CT => {
                let (out, seg_time) = self.baseline(x, cache)?;
                let start = Instant::now();
                let tau = self.models.temperature.tau as f32;
                let probs = softmax_channels(&out.heads[0].logits, tau);
                let sweep = ct_stats(&probs, &self.thresholds, spacing)?;
                let wall = seg_time + start.elapsed().as_secs_f64();
                Ok(Prediction {
                    raw: RawPrediction::Sampling(sweep.stats),
                    dsc: foreground_dsc(&argmax_channels(out.probs(0)), case)?,
                    violations: Vec::new(),
                    head_volumes: Vec::new(),
                    forward_passes: 1,
                    wall_time_s: wall,
                })
            }
            MC | TTA => {
                let seed = self.sample_seed(case, method);
                let pred = if method == MC {
                    mc_stats(required(&self.models.dropout, DROPOUT)?, x, self.cfg.mc_passes, seed, spacing)?
                } else {
                    tta_stats(required(&self.models.baseline, BASELINE)?, x, self.cfg.n_aug, seed, spacing)?
                };
                let wall = start.elapsed().as_secs_f64();
                Ok(Prediction {
                    raw: RawPrediction::Sampling(pred.stats),
                    dsc: foreground_dsc(&argmax_channels(&pred.mean_probs), case)?,
                    violations: Vec::new(),
                    head_volumes: Vec::new(),
                    forward_passes: pred.forward_passes,
                    wall_time_s: wall,
                })
            }
            REGCNN => {
                let (out, seg_time) = self.baseline(x, cache)?;
                let start = Instant::now();
                let labels = argmax_channels(out.probs(0));
                let seg = one_hot::<f32>(&labels, case.n_classes(), case.dims())?;
                let interval = regcnn_intervals(required(&self.models.regressor, REGRESSOR)?, x, &seg)?;
                let wall = seg_time + start.elapsed().as_secs_f64();
                Ok(Prediction {
                    raw: RawPrediction::Direct(interval),
                    dsc: foreground_dsc(&labels, case)?,
                    violations: Vec::new(),
                    head_volumes: Vec::new(),
                    forward_passes: 1,
                    wall_time_s: wall,
                })
            }
            other => Err(Error::config(format!("unknown method `{other}`"))),
        }
    }
}

/// Uncalibrated finalized interval: the raw one for direct methods,
/// `μ ± zσ` for sampling methods.
fn uncalibrated(raw: &RawPrediction, method: &str, alpha: f64) -> Result<VolumeInterval> {
    match raw {
        RawPrediction::Direct(iv) => Ok(iv.clone()),
        RawPrediction::Sampling(stats) => interval_from_stats(stats, alpha, method),
    }
}

/// Runs `methods` on every case in `ids`; returns one record list per method.
/// `label` maps a method id to the id written into its records.
fn predict_fold(
    data: &Dataset,
    predictor: &Predictor,
    methods: &[&str],
    ids: &[String],
    label: &dyn Fn(&str) -> String,
) -> Result<Vec<Vec<PIRecord>>> {
    let mut out: Vec<Vec<PIRecord>> = vec![Vec::with_capacity(ids.len()); methods.len()];
    for (i, id) in ids.iter().enumerate() {
        let (case, x) = data.read(id)?;
        let mut cache: BaselineCache = None;
        for (m, &method) in methods.iter().enumerate() {
            let p = predictor.predict(method, &case, &x, &mut cache)?;
            let mut interval = uncalibrated(&p.raw, method, predictor.cfg.alpha)?;
            interval.method_id = label(method);
            out[m].push(PIRecord {
                run: predictor.run,
                case_id: case.case_id.clone(),
                method_id: label(method),
                truth_ml: case.true_volumes_ml.clone(),
                raw: p.raw,
                interval,
                dsc: p.dsc,
                head_order_violation: p.violations,
                head_volumes_ml: p.head_volumes,
                forward_passes: p.forward_passes,
                wall_time_s: p.wall_time_s,
            });
        }
        if (i + 1) % 25 == 0 || i + 1 == ids.len() {
            info!("predicted {}/{} cases", i + 1, ids.len());
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// calibrate

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationOutcome {
    pub run: usize,
    pub method_id: String,
    pub factor: CalibrationFactor,
    pub temperature: Option<Temperature>,
    /// Per-class coverage of the calibrated intervals on the calibration fold;
    /// `None` for classes whose factor is unbounded.
    pub coverage: Vec<Option<f64>>,
    /// Calibration-fold records with calibrated intervals.
    pub records: Vec<PIRecord>,
}

fn fit_ct_temperature(cfg: &ExperimentConfig, data: &Dataset, baseline: &Net<f32>, run: usize) -> Result<Temperature> {
    let ids = &data.manifest.split.calibration_ids;
    let per_case = cfg.temperature_voxels.div_ceil(ids.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x7e ^ (run as u64) << 8));
    let mut samples = LogitSamples::new(data.spec().n_classes);
    for id in ids {
        let (case, x) = data.read(id)?;
        let out = forward(baseline, &x)?;
        samples.push_subsample(&out.heads[0].logits, &case.labels, per_case, &mut rng)?;
    }
    let t = fit_temperature(&samples)?;
    info!(
        "temperature {:.2} (nll {:.4} -> {:.4} on {} voxels)",
        t.tau, t.nll_before, t.nll_after, t.n_samples
    );
    Ok(t)
}

fn fit_factor(cfg: &ExperimentConfig, method: &str, records: &[PIRecord]) -> Result<CalibrationFactor> {
    let n_fg = records[0].truth_ml.len();
    let mut triples: Vec<Vec<(f64, f64, f64)>> = vec![Vec::with_capacity(records.len()); n_fg];
    for r in records {
        for (c, t) in triples.iter_mut().enumerate() {
            let y = r.truth_ml[c];
            t.push(match &r.raw {
                RawPrediction::Direct(iv) => (iv.classes[c].lower_ml, iv.classes[c].upper_ml, y),
                RawPrediction::Sampling(s) => (s.classes[c].mu_ml, s.classes[c].sigma_ml, y),
            });
        }
    }
    match method_kind(method)? {
        MethodKind::Direct => fit_additive_q(method, &triples, cfg.alpha, cfg.pooled_calibration),
        MethodKind::Sampling => fit_multiplicative_q(method, &triples, cfg.alpha, cfg.pooled_calibration),
    }
}

fn calibrate_records(records: &mut [PIRecord], factor: &CalibrationFactor) -> Result<()> {
    for r in records.iter_mut() {
        let mut iv = apply_calibration(&r.raw, &factor.method_id, factor)?;
        iv.method_id = r.method_id.clone();
        r.interval = iv;
    }
    Ok(())
}

fn class_coverage(records: &[PIRecord], factor: &CalibrationFactor) -> Result<Vec<Option<f64>>> {
    factor
        .classes
        .iter()
        .enumerate()
        .map(|(c, f)| {
            if f.unbounded {
                return Ok(None);
            }
            let ivs: Vec<_> = records.iter().map(|r| r.interval.classes[c]).collect();
            let ys: Vec<f64> = records.iter().map(|r| r.truth_ml[c]).collect();
            empirical_coverage(&ivs, &ys).map(Some)
        })
        .collect()
}

/// Fits and stores the calibration factor of `method` for every run.
pub fn cmd_calibrate(cfg: &ExperimentConfig, method: &str) -> Result<Vec<CalibrationOutcome>> {
    cfg.validate()?;
    method_kind(method)?;
    let data = Dataset::open(cfg)?;
    let ids = data.manifest.split.calibration_ids.clone();
    if ids.is_empty() {
        return Err(Error::config("calibration fold is empty"));
    }
    (0..cfg.n_runs)
        .map(|run| calibrate_run(cfg, &data, run, method, TRIAD_NET, &ids, method))
        .collect()
}

fn calibrate_run(
    cfg: &ExperimentConfig,
    data: &Dataset,
    run: usize,
    method: &str,
    triad_variant: &str,
    ids: &[String],
    label: &str,
) -> Result<CalibrationOutcome> {
    let mut models = Models::load(cfg, run, &[method], triad_variant)?;
    let dir = cfg.calibration_dir(run, label);
    fs::create_dir_all(&dir)?;
    let temperature = if method == CT {
        let t = fit_ct_temperature(cfg, data, required(&models.baseline, BASELINE)?, run)?;
        fs::write(dir.join("temperature.json"), serde_json::to_string_pretty(&t)?)?;
        models.temperature = t.clone();
        Some(t)
    } else {
        None
    };
    let predictor = Predictor {
        cfg,
        models: &models,
        run,
        spacing: data.spec().voxel_spacing_mm,
        thresholds: ct_thresholds(cfg.n_thresholds),
    };
    info!("calibrating {label} (run {run}) on {} cases", ids.len());
    let mut records = predict_fold(data, &predictor, &[method], ids, &|_| label.to_string())?.remove(0);
    let mut factor = fit_factor(cfg, method, &records)?;
    factor.method_id = label.into();
    calibrate_records(&mut records, &factor)?;
    let coverage = class_coverage(&records, &factor)?;
    for (c, (f, cov)) in factor.classes.iter().zip(&coverage).enumerate() {
        match cov {
            Some(v) => info!("{label} class {}: q = {:.4}, calibration coverage {:.3}", c + 1, f.q, v),
            None => warn!("{label} class {}: unbounded factor (n_cal = {})", c + 1, f.n_cal),
        }
    }
    factor.save(&dir.join("calibration.json"))?;
    write_jsonl(&dir.join("cal_records.jsonl"), &records)?;
    Ok(CalibrationOutcome {
        run,
        method_id: label.into(),
        factor,
        temperature,
        coverage,
        records,
    })
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    /// Across-run merge when several runs exist, otherwise the single run.
    pub report: EvalReport,
    pub run_reports: Vec<EvalReport>,
    pub records: Vec<PIRecord>,
    pub dir: PathBuf,
}

fn load_temperature(path: &Path) -> Result<Temperature> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::format(path, "temperature.json", e.to_string()))
}

/// Predicts the test fold with every run of `methods`, applies the stored
/// calibration factors and returns the records grouped by run then method.
fn evaluate_runs(
    cfg: &ExperimentConfig,
    data: &Dataset,
    methods: &[&str],
    triad_variant: &str,
    label: &dyn Fn(&str) -> String,
) -> Result<Vec<Vec<PIRecord>>> {
    let ids = data.manifest.split.test_ids.clone();
    if ids.is_empty() {
        return Err(Error::config("test fold is empty"));
    }
    let mut runs = Vec::with_capacity(cfg.n_runs);
    for run in 0..cfg.n_runs {
        let factors = methods
            .iter()
            .map(|m| CalibrationFactor::load(&cfg.calibration_dir(run, &label(m)).join("calibration.json")))
            .collect::<Result<Vec<_>>>()?;
        let mut models = Models::load(cfg, run, methods, triad_variant)?;
        if methods.contains(&CT) {
            models.temperature = load_temperature(&cfg.calibration_dir(run, CT).join("temperature.json"))?;
        }
        let predictor = Predictor {
            cfg,
            models: &models,
            run,
            spacing: data.spec().voxel_spacing_mm,
            thresholds: ct_thresholds(cfg.n_thresholds),
        };
        info!("evaluating {methods:?} (run {run}) on {} test cases", ids.len());
        let per_method = predict_fold(data, &predictor, methods, &ids, label)?;
        let mut records = Vec::new();
        for (mut recs, factor) in per_method.into_iter().zip(&factors) {
            calibrate_records(&mut recs, factor)?;
            records.extend(recs);
        }
        runs.push(records);
    }
    Ok(runs)
}

fn reports_for(runs: &[Vec<PIRecord>], names: &[String], target: f64) -> Result<(EvalReport, Vec<EvalReport>)> {
    let per_run = runs
        .iter()
        .map(|r| build_report(r, names, target))
        .collect::<Result<Vec<_>>>()?;
    let merged = if per_run.len() > 1 {
        merge_runs(&per_run)?
    } else {
        per_run[0].clone()
    };
    Ok((merged, per_run))
}

/// Evaluates every configured method on the test fold and writes the report
/// files, the interval plot data and `run.json`.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<EvalOutcome> {
    cfg.validate()?;
    let data = Dataset::open(cfg)?;
    let methods = cfg.methods_in_order();
    let runs = evaluate_runs(cfg, &data, &methods, TRIAD_NET, &|m| m.to_string())?;
    let names = data.foreground_names();
    let (report, run_reports) = reports_for(&runs, &names, 1.0 - cfg.alpha)?;
    let dir = cfg.eval_dir();
    fs::create_dir_all(&dir)?;
    let records: Vec<PIRecord> = runs.into_iter().flatten().collect();
    write_jsonl(&dir.join("pi_records.jsonl"), &records)?;
    report.write(&dir)?;
    let triad_run0: Vec<PIRecord> = records
        .iter()
        .filter(|r| r.run == 0 && r.method_id == TRIAD)
        .cloned()
        .collect();
    if triad_run0.is_empty() {
        info!("triad not evaluated; skipping fig2_data.csv");
    } else {
        fs::write(dir.join("fig2_data.csv"), interval_plot_csv(&triad_run0, &names)?)?;
    }
    write_run_record(cfg, &dir)?;
    info!("report written to {}", dir.display());
    Ok(EvalOutcome {
        report,
        run_reports,
        records,
        dir,
    })
}

// ---------------------------------------------------------------------------
// sweep-gamma

pub fn sweep_method_id(gamma: f64) -> String {
    format!("triad(gamma={gamma:.2})")
}

/// Trains, calibrates and evaluates one three-head net per γ and writes a
/// merged report to `eval/sweep_gamma/`.
pub fn cmd_sweep_gamma(cfg: &ExperimentConfig, gammas: &[f64]) -> Result<EvalOutcome> {
    cfg.validate()?;
    if gammas.is_empty() {
        return Err(Error::config("gamma sweep needs at least one value"));
    }
    for &g in gammas {
        check_gamma(g)?;
    }
    let data = Dataset::open(cfg)?;
    let cal_ids = data.manifest.split.calibration_ids.clone();
    if cal_ids.is_empty() {
        return Err(Error::config("calibration fold is empty"));
    }
    let mut runs: Vec<Vec<PIRecord>> = vec![Vec::new(); cfg.n_runs];
    for &g in gammas {
        let variant = sweep_variant(g);
        let label = sweep_method_id(g);
        cmd_train(cfg, &variant)?;
        for run in 0..cfg.n_runs {
            calibrate_run(cfg, &data, run, TRIAD, &variant, &cal_ids, &label)?;
        }
        let per_run = evaluate_runs(cfg, &data, &[TRIAD], &variant, &|_| label.clone())?;
        for (acc, recs) in runs.iter_mut().zip(per_run) {
            acc.extend(recs);
        }
    }
    let names = data.foreground_names();
    let (report, run_reports) = reports_for(&runs, &names, 1.0 - cfg.alpha)?;
    let dir = cfg.eval_dir().join("sweep_gamma");
    fs::create_dir_all(&dir)?;
    let records: Vec<PIRecord> = runs.into_iter().flatten().collect();
    write_jsonl(&dir.join("pi_records.jsonl"), &records)?;
    report.write(&dir)?;
    write_run_record(cfg, &dir)?;
    Ok(EvalOutcome {
        report,
        run_reports,
        records,
        dir,
    })
}

// ---------------------------------------------------------------------------
// provenance

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    pub config: ExperimentConfig,
    /// SHA-256 of every artifact, keyed by path relative to `out_dir`.
    pub artifacts: BTreeMap<String, String>,
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io(e.into()))?;
        if entry.file_type().is_file() {
            out.push(entry.into_path());
        }
    }
    Ok(())
}

fn write_run_record(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let root = &cfg.out_dir;
    let mut files = vec![cfg.data_dir().join("manifest.json"), cfg.data_dir().join("input_norm.json")];
    for sub in ["models", "calibration"] {
        collect_files(&root.join(sub), &mut files)?;
    }
    collect_files(dir, &mut files)?;
    let mut artifacts = BTreeMap::new();
    for f in files {
        if f.file_name().is_some_and(|n| n == "run.json") || !f.exists() {
            continue;
        }
        let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        artifacts.insert(rel, hex::encode(Sha256::digest(fs::read(&f)?)));
    }
    let record = RunRecord {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        artifacts,
    };
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// full pipeline

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutcome {
    pub training: Vec<TrainOutcome>,
    pub calibration: Vec<CalibrationOutcome>,
    pub evaluation: EvalOutcome,
}

/// `gen`, then training of every required variant, calibration of every
/// method and evaluation.
pub fn cmd_run_all(cfg: &ExperimentConfig, force: bool) -> Result<PipelineOutcome> {
    cmd_gen(cfg, force)?;
    let mut training = Vec::new();
    for v in cfg.required_variants() {
        training.extend(cmd_train(cfg, v)?);
    }
    let mut calibration = Vec::new();
    for m in cfg.methods_in_order() {
        calibration.extend(cmd_calibrate(cfg, m)?);
    }
    let evaluation = cmd_evaluate(cfg)?;
    Ok(PipelineOutcome {
        training,
        calibration,
        evaluation,
    })
}
