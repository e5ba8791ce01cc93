//! Small 3D encoder-decoder segmentation networks and a volume regressor.
//!
//! The segmentation trunk is U-shaped: `depth` encoder levels (a stride-2
//! convolution enters every level below the first), a decoder that
//! convolves at the coarse level, upsamples by nearest neighbour and
//! concatenates the skip connection, and finally one or three identical
//! output blocks (`1×1×1` conv, ReLU, `1×1×1` conv to `N` logits). With three
//! heads the output block is duplicated and all heads share the trunk.
//!
//! The regressor is a strided convolution encoder followed by global average
//! pooling and a fully connected projection to `3·(N−1)` quantile outputs.
//!
//! All parameters of a net live in one flat vector; layers address it by
//! offset. This keeps the optimizer, checkpoints and gradient checks trivial.

use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{self, TriadLossConfig};
use crate::nn::conv::conv_macs;
use crate::nn::ops::{
    apply_mask, dropout_mask, global_avg_pool, global_avg_pool_backward, instance_norm_backward,
    instance_norm_inplace, relu_backward, relu_inplace, softmax_backward, softmax_channels, upsample2, upsample2_backward,
};
use crate::nn::{Adam, AdamConfig, ConvLayer};
use crate::tensor::{one_hot, Dims, Real, Volume};

pub const TRIAD_HEAD_NAMES: [&str; 3] = ["lower", "mean", "upper"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Segmentation,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub in_channels: usize,
    pub n_classes: usize,
    pub base_filters: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub dropout_rate: f64,
    pub head_kind: HeadKind,
    pub regression_outputs: usize,
    /// Multiplier applied to raw regression outputs (mL per unit).
    #[serde(default = "one")]
    pub output_scale: f64,
    /// Initial output bias of the background channel. A positive value makes
    /// the untrained net predict mostly background, which keeps the Dice
    /// term of large classes from settling on "everywhere".
    #[serde(default = "default_background_bias")]
    pub background_bias: f64,
    /// Instance normalization after every trunk convolution and head hidden
    /// layer.
    #[serde(default)]
    pub instance_norm: bool,
}

fn one() -> f64 {
    1.0
}

fn default_background_bias() -> f64 {
    3.0
}

impl NetSpec {
    /// Single-head segmentation net.
    pub fn segmentation(in_channels: usize, n_classes: usize) -> Self {
        Self {
            in_channels,
            n_classes,
            base_filters: 8,
            depth: 3,
            n_heads: 1,
            dropout_rate: 0.0,
            head_kind: HeadKind::Segmentation,
            regression_outputs: 0,
            output_scale: 1.0,
            background_bias: default_background_bias(),
            instance_norm: true,
        }
    }

    /// Single-head net with dropout after every trunk block.
    pub fn dropout(in_channels: usize, n_classes: usize) -> Self {
        Self {
            dropout_rate: 0.2,
            ..Self::segmentation(in_channels, n_classes)
        }
    }

    pub fn triad(in_channels: usize, n_classes: usize) -> Self {
        Self {
            n_heads: 3,
            ..Self::segmentation(in_channels, n_classes)
        }
    }

    /// Quantile regressor fed with intensities plus a one-hot segmentation.
    pub fn regressor(image_channels: usize, n_classes: usize) -> Self {
        Self {
            in_channels: image_channels + n_classes,
            n_classes,
            base_filters: 8,
            depth: 3,
            n_heads: 1,
            dropout_rate: 0.0,
            head_kind: HeadKind::Regression,
            regression_outputs: 3 * (n_classes - 1),
            output_scale: 1.0,
            background_bias: 0.0,
            instance_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_filters == 0 || self.depth == 0 {
            return Err(Error::config("in_channels, base_filters and depth must be >= 1"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes must be >= 2"));
        }
        if !self.background_bias.is_finite() {
            return Err(Error::config("background_bias must be finite"));
        }
        if !(self.dropout_rate >= 0.0 && self.dropout_rate < 1.0) {
            return Err(Error::config(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        match self.head_kind {
            HeadKind::Segmentation => {
                if self.n_heads != 1 && self.n_heads != 3 {
                    return Err(Error::config("n_heads must be 1 or 3"));
                }
            }
            HeadKind::Regression => {
                if self.n_heads != 1 {
                    return Err(Error::config("regression nets have exactly one head"));
                }
                if self.regression_outputs == 0 {
                    return Err(Error::config("regression_outputs must be >= 1"));
                }
                if !(self.output_scale > 0.0) {
                    return Err(Error::config("output_scale must be positive"));
                }
            }
        }
        Ok(())
    }

    fn level_filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    pub fn head_names(&self) -> Vec<String> {
        if self.n_heads == 3 {
            TRIAD_HEAD_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            vec!["mean".to_string()]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossId {
    Dice,
    Triad { gamma: f64 },
    PinballCompound { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossId,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            epochs: 10,
            batch_size: 1,
            loss: LossId::Dice,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Output of one head: logits and their softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T> {
    pub logits: Volume<T>,
    pub probs: Volume<T>,
}

/// Per-head voxelwise class distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMaskSet<T> {
    pub heads: Vec<HeadOutput<T>>,
    pub head_names: Vec<String>,
}

impl<T: Real> SoftMaskSet<T> {
    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn probs(&self, head: usize) -> &Volume<T> {
        &self.heads[head].probs
    }

    pub fn dims(&self) -> Dims {
        self.heads[0].probs.dims()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Labels(Vec<u8>),
    Volumes(Vec<f64>),
}

/// One training sample: network input and its supervision.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub input: Volume<T>,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct HeadBlock {
    hidden: ConvLayer,
    out: ConvLayer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct SegArch {
    enc: Vec<ConvLayer>,
    down: Vec<ConvLayer>,
    up: Vec<ConvLayer>,
    dec: Vec<ConvLayer>,
    heads: Vec<HeadBlock>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct RegArch {
    convs: Vec<ConvLayer>,
    fc: ConvLayer,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Arch {
    Seg(SegArch),
    Reg(RegArch),
}

struct Alloc(usize);

impl Alloc {
    fn conv(&mut self, cin: usize, cout: usize, kernel: usize, stride: usize) -> ConvLayer {
        let l = ConvLayer::new(cin, cout, kernel, stride, self.0);
        self.0 = l.end();
        l
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Net<T> {
    spec: NetSpec,
    seed: u64,
    arch: Arch,
    params: Vec<T>,
}

/// Per-block record kept for backpropagation.
struct BlockRec<T> {
    input: Volume<T>,
    /// Normalized pre-activation and per-channel inverse std.
    norm: Option<(Volume<T>, Vec<T>)>,
    act: Volume<T>,
    mask: Option<Vec<T>>,
}

struct SegTape<T> {
    blocks: Vec<BlockRec<T>>,
    head_in: Volume<T>,
    hidden: Vec<Volume<T>>,
    hidden_norm: Vec<Option<(Volume<T>, Vec<T>)>>,
}

struct RegTape<T> {
    blocks: Vec<BlockRec<T>>,
    pooled: Volume<T>,
    last_dims: Dims,
}

/// Dropout source for a forward pass; `None` disables dropout.
type DropRng<'a> = Option<&'a mut ChaCha8Rng>;

/// Parameters of one output block (hidden 1×1 conv + output 1×1 conv).
pub fn head_block_params(spec: &NetSpec) -> usize {
    let c = spec.base_filters;
    (c * c + c) + (c * spec.n_classes + spec.n_classes)
}

pub fn build_net<T: Real>(spec: &NetSpec, seed: u64) -> Result<Net<T>> {
    spec.validate()?;
    let mut alloc = Alloc(0);
    let arch = match spec.head_kind {
        HeadKind::Segmentation => {
            let depth = spec.depth;
            let mut enc = Vec::new();
            let mut down = Vec::new();
            for level in 0..depth {
                let c = spec.level_filters(level);
                if level == 0 {
                    enc.push(alloc.conv(spec.in_channels, c, 3, 1));
                } else {
                    down.push(alloc.conv(spec.level_filters(level - 1), c, 3, 2));
                    enc.push(alloc.conv(c, c, 3, 1));
                }
            }
            let mut up = Vec::new();
            let mut dec = Vec::new();
            for level in 0..depth - 1 {
                let c = spec.level_filters(level);
                up.push(alloc.conv(spec.level_filters(level + 1), c, 3, 1));
                dec.push(alloc.conv(2 * c, c, 3, 1));
            }
            let c0 = spec.base_filters;
            let heads = (0..spec.n_heads)
                .map(|_| HeadBlock {
                    hidden: alloc.conv(c0, c0, 1, 1),
                    out: alloc.conv(c0, spec.n_classes, 1, 1),
                })
                .collect();
            Arch::Seg(SegArch {
                enc,
                down,
                up,
                dec,
                heads,
            })
        }
        HeadKind::Regression => {
            let mut convs = Vec::new();
            let mut cin = spec.in_channels;
            for level in 0..spec.depth {
                let c = spec.level_filters(level);
                convs.push(alloc.conv(cin, c, 3, 2));
                cin = c;
            }
            let fc = alloc.conv(cin, spec.regression_outputs, 1, 1);
            Arch::Reg(RegArch { convs, fc })
        }
    };

    let mut params = vec![T::zero(); alloc.0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match &arch {
        Arch::Seg(a) => {
            for l in a.enc.iter().chain(&a.down).chain(&a.up).chain(&a.dec) {
                l.init(&mut params, &mut rng);
            }
            // Heads start identical; only the loss separates them.
            let first = &a.heads[0];
            first.hidden.init(&mut params, &mut rng);
            first.out.init(&mut params, &mut rng);
            params[first.out.offset + first.out.weight_len()] = T::of(spec.background_bias);
            for h in &a.heads[1..] {
                for (src, dst) in [(first.hidden, h.hidden), (first.out, h.out)] {
                    let block = params[src.offset..src.end()].to_vec();
                    params[dst.offset..dst.end()].copy_from_slice(&block);
                }
            }
        }
        Arch::Reg(a) => {
            for l in &a.convs {
                l.init(&mut params, &mut rng);
            }
            a.fc.init(&mut params, &mut rng);
        }
    }
    Ok(Net {
        spec: spec.clone(),
        seed,
        arch,
        params,
    })
}

impl<T: Real> Net<T> {
    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Converts the parameters to another float type.
    pub fn cast<U: Real>(&self) -> Net<U> {
        Net {
            spec: self.spec.clone(),
            seed: self.seed,
            arch: self.arch.clone(),
            params: self.params.iter().map(|&p| U::of(p.f64())).collect(),
        }
    }

    /// Multiply-accumulate count of one forward pass on `dims`.
    pub fn forward_macs(&self, dims: Dims) -> usize {
        let mut total = 0;
        match &self.arch {
            Arch::Seg(a) => {
                let mut d = dims;
                for level in 0..self.spec.depth {
                    if level > 0 {
                        total += conv_macs(&a.down[level - 1], d);
                        d = [d[0] / 2, d[1] / 2, d[2] / 2];
                    }
                    total += conv_macs(&a.enc[level], d);
                }
                for level in (0..self.spec.depth - 1).rev() {
                    let coarse = [dims[0] >> (level + 1), dims[1] >> (level + 1), dims[2] >> (level + 1)];
                    let fine = [dims[0] >> level, dims[1] >> level, dims[2] >> level];
                    total += conv_macs(&a.up[level], coarse) + conv_macs(&a.dec[level], fine);
                }
                for h in &a.heads {
                    total += conv_macs(&h.hidden, dims) + conv_macs(&h.out, dims);
                }
            }
            Arch::Reg(a) => {
                let mut d = dims;
                for l in &a.convs {
                    total += conv_macs(l, d);
                    d = [d[0] / 2, d[1] / 2, d[2] / 2];
                }
            }
        }
        total
    }

    fn check_input(&self, x: &Volume<T>) -> Result<()> {
        if x.channels() != self.spec.in_channels {
            return Err(Error::shape("network input channels", self.spec.in_channels, x.channels()));
        }
        let (min, multiple) = match self.spec.head_kind {
            HeadKind::Segmentation => (1usize << self.spec.depth, 1usize << (self.spec.depth - 1)),
            HeadKind::Regression => (1usize << self.spec.depth, 1usize << self.spec.depth),
        };
        if x.dims().iter().any(|&n| n < min || n % multiple != 0) {
            return Err(Error::shape(
                "network input grid",
                format!("every axis >= {min} and divisible by {multiple}"),
                x.dims(),
            ));
        }
        Ok(())
    }

    /// conv → optional instance norm → ReLU → optional dropout.
    fn block(
        &self,
        layer: &ConvLayer,
        x: Volume<T>,
        drop: &mut DropRng<'_>,
        tape: Option<&mut Vec<BlockRec<T>>>,
    ) -> Result<Volume<T>> {
        let mut act = layer.forward(&self.params, &x)?;
        let norm = if self.spec.instance_norm {
            let inv = instance_norm_inplace(&mut act);
            Some((act.clone(), inv))
        } else {
            None
        };
        relu_inplace(&mut act);
        let rate = self.spec.dropout_rate;
        let mask = match drop {
            Some(rng) if rate > 0.0 => Some(dropout_mask(act.data().len(), rate, &mut **rng)),
            _ => None,
        };
        match tape {
            Some(tape) => {
                let mut out = act.clone();
                if let Some(m) = &mask {
                    apply_mask(out.data_mut(), m);
                }
                tape.push(BlockRec {
                    input: x,
                    norm,
                    act,
                    mask,
                });
                Ok(out)
            }
            None => {
                if let Some(m) = &mask {
                    apply_mask(act.data_mut(), m);
                }
                Ok(act)
            }
        }
    }

    fn block_backward(
        &self,
        layer: &ConvLayer,
        rec: BlockRec<T>,
        mut g: Volume<T>,
        grads: &mut [T],
        input_grad: bool,
    ) -> Option<Volume<T>> {
        if let Some(m) = &rec.mask {
            apply_mask(g.data_mut(), m);
        }
        relu_backward(&rec.act, &mut g);
        if let Some((xhat, inv)) = &rec.norm {
            instance_norm_backward(xhat, inv, &mut g);
        }
        layer.backward(&self.params, &rec.input, &g, grads, input_grad)
    }

    fn seg_arch(&self) -> Result<&SegArch> {
        match &self.arch {
            Arch::Seg(a) => Ok(a),
            Arch::Reg(_) => Err(Error::config("operation requires a segmentation net")),
        }
    }

    fn reg_arch(&self) -> Result<&RegArch> {
        match &self.arch {
            Arch::Reg(a) => Ok(a),
            Arch::Seg(_) => Err(Error::config("operation requires a regression net")),
        }
    }

    fn seg_forward(
        &self,
        x: &Volume<T>,
        mut drop: DropRng<'_>,
        mut tape: Option<&mut SegTape<T>>,
    ) -> Result<SoftMaskSet<T>> {
        crate::nn::flush_subnormals();
        let a = self.seg_arch()?;
        self.check_input(x)?;
        let depth = self.spec.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut h = x.clone();
        for level in 0..depth {
            if level > 0 {
                h = self.block(&a.down[level - 1], h, &mut drop, tape.as_mut().map(|t| &mut t.blocks))?;
            }
            h = self.block(&a.enc[level], h, &mut drop, tape.as_mut().map(|t| &mut t.blocks))?;
            if level + 1 < depth {
                skips.push(h.clone());
            }
        }
        for level in (0..depth - 1).rev() {
            let u = self.block(&a.up[level], h, &mut drop, tape.as_mut().map(|t| &mut t.blocks))?;
            let merged = upsample2(&u).concat(&skips[level])?;
            h = self.block(&a.dec[level], merged, &mut drop, tape.as_mut().map(|t| &mut t.blocks))?;
        }
        let mut heads = Vec::with_capacity(a.heads.len());
        for hb in &a.heads {
            let mut hidden = hb.hidden.forward(&self.params, &h)?;
            let norm = if self.spec.instance_norm {
                let inv = instance_norm_inplace(&mut hidden);
                Some((hidden.clone(), inv))
            } else {
                None
            };
            relu_inplace(&mut hidden);
            let logits = hb.out.forward(&self.params, &hidden)?;
            let probs = softmax_channels(&logits, T::one());
            if let Some(t) = tape.as_mut() {
                t.hidden.push(hidden);
                t.hidden_norm.push(norm);
            }
            heads.push(HeadOutput { logits, probs });
        }
        if let Some(t) = tape {
            t.head_in = h;
        }
        Ok(SoftMaskSet {
            heads,
            head_names: self.spec.head_names(),
        })
    }

    fn seg_backward(&self, mut tape: SegTape<T>, dlogits: &[Volume<T>], grads: &mut [T]) {
        let a = match &self.arch {
            Arch::Seg(a) => a,
            Arch::Reg(_) => unreachable!("checked by caller"),
        };
        let depth = self.spec.depth;
        let mut g = Volume::zeros(tape.head_in.channels(), tape.head_in.dims());
        for (((hb, hidden), norm), dl) in a.heads.iter().zip(&tape.hidden).zip(&tape.hidden_norm).zip(dlogits) {
            let mut gh = hb.out.backward(&self.params, hidden, dl, grads, true).expect("input grad");
            relu_backward(hidden, &mut gh);
            if let Some((xhat, inv)) = norm {
                instance_norm_backward(xhat, inv, &mut gh);
            }
            let gi = hb.hidden.backward(&self.params, &tape.head_in, &gh, grads, true).expect("input grad");
            for (acc, v) in g.data_mut().iter_mut().zip(gi.data()) {
                *acc += *v;
            }
        }
        let mut skip_grads: Vec<Option<Volume<T>>> = (0..depth).map(|_| None).collect();
        for level in 0..depth - 1 {
            let rec = tape.blocks.pop().expect("decoder record");
            let gm = self.block_backward(&a.dec[level], rec, g, grads, true).expect("input grad");
            let c = self.spec.level_filters(level);
            let (gu, gs) = gm.split_channels(c);
            skip_grads[level] = Some(gs);
            let gu = upsample2_backward(&gu);
            let rec = tape.blocks.pop().expect("upsampling record");
            g = self.block_backward(&a.up[level], rec, gu, grads, true).expect("input grad");
        }
        for level in (0..depth).rev() {
            if let Some(gs) = skip_grads[level].take() {
                for (acc, v) in g.data_mut().iter_mut().zip(gs.data()) {
                    *acc += *v;
                }
            }
            let rec = tape.blocks.pop().expect("encoder record");
            let need = level > 0;
            let gi = self.block_backward(&a.enc[level], rec, g, grads, need);
            if level == 0 {
                break;
            }
            let rec = tape.blocks.pop().expect("downsampling record");
            g = self
                .block_backward(&a.down[level - 1], rec, gi.expect("input grad"), grads, true)
                .expect("input grad");
        }
    }

    fn reg_forward(&self, x: &Volume<T>, mut tape: Option<&mut RegTape<T>>) -> Result<Vec<f64>> {
        crate::nn::flush_subnormals();
        let a = self.reg_arch()?;
        self.check_input(x)?;
        let mut h = x.clone();
        let mut none: DropRng<'_> = None;
        for l in &a.convs {
            h = self.block(l, h, &mut none, tape.as_mut().map(|t| &mut t.blocks))?;
        }
        let pooled = global_avg_pool(&h);
        let out = a.fc.forward(&self.params, &pooled)?;
        if let Some(t) = tape {
            t.pooled = pooled;
            t.last_dims = h.dims();
        }
        Ok(out.data().iter().map(|v| v.f64() * self.spec.output_scale).collect())
    }

    fn reg_backward(&self, mut tape: RegTape<T>, dout: &[f64], grads: &mut [T]) {
        let a = match &self.arch {
            Arch::Reg(a) => a,
            Arch::Seg(_) => unreachable!("checked by caller"),
        };
        let scale = self.spec.output_scale;
        let g = Volume::from_vec(
            dout.len(),
            [1, 1, 1],
            dout.iter().map(|&d| T::of(d * scale)).collect(),
        )
        .expect("output shape");
        let gp = a.fc.backward(&self.params, &tape.pooled, &g, grads, true).expect("input grad");
        let mut g = global_avg_pool_backward(&gp, tape.last_dims);
        for (i, l) in a.convs.iter().enumerate().rev() {
            let rec = tape.blocks.pop().expect("conv record");
            match self.block_backward(l, rec, g, grads, i > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
    }

    /// Loss and parameter gradient of one example (gradients accumulate).
    pub fn loss_and_grad(
        &self,
        example: &Example<T>,
        loss: &LossId,
        drop: DropRng<'_>,
        grads: &mut [T],
    ) -> Result<f64> {
        match (&self.arch, loss, &example.target) {
            (Arch::Seg(_), LossId::Dice | LossId::Triad { .. }, Target::Labels(labels)) => {
                let mut tape = SegTape {
                    blocks: Vec::new(),
                    head_in: Volume::zeros(0, [0, 0, 0]),
                    hidden: Vec::new(),
                    hidden_norm: Vec::new(),
                };
                let out = self.seg_forward(&example.input, drop, Some(&mut tape))?;
                let g = one_hot(labels, self.spec.n_classes, example.input.dims())?;
                let (value, dprobs): (T, Vec<Volume<T>>) = match loss {
                    LossId::Dice => {
                        let (l, d) = losses::dice_loss_grad(out.probs(0), &g)?;
                        (l, vec![d])
                    }
                    LossId::Triad { gamma } => {
                        let cfg = TriadLossConfig::new(*gamma)?;
                        let (l, d) = losses::triad_loss_grad(
                            [out.probs(0), out.probs(1), out.probs(2)],
                            &g,
                            &cfg,
                        )?;
                        (l, d.into_iter().collect())
                    }
                    LossId::PinballCompound { .. } => unreachable!(),
                };
                let dlogits: Vec<Volume<T>> = out
                    .heads
                    .iter()
                    .zip(&dprobs)
                    .map(|(h, dp)| softmax_backward(&h.probs, dp))
                    .collect();
                self.seg_backward(tape, &dlogits, grads);
                Ok(value.f64())
            }
            (Arch::Reg(_), LossId::PinballCompound { alpha }, Target::Volumes(y)) => {
                let mut tape = RegTape {
                    blocks: Vec::new(),
                    pooled: Volume::zeros(0, [0, 0, 0]),
                    last_dims: [0, 0, 0],
                };
                let preds = self.reg_forward(&example.input, Some(&mut tape))?;
                let (value, dpred) = losses::pinball_compound_grad(&preds, y, *alpha)?;
                self.reg_backward(tape, &dpred, grads);
                Ok(value)
            }
            _ => Err(Error::config(format!(
                "loss {loss:?} is incompatible with this network or target"
            ))),
        }
    }

    fn check_loss(&self, loss: &LossId) -> Result<()> {
        let ok = match loss {
            LossId::Dice => self.spec.head_kind == HeadKind::Segmentation && self.spec.n_heads == 1,
            LossId::Triad { gamma } => {
                TriadLossConfig::new(*gamma)?;
                self.spec.head_kind == HeadKind::Segmentation && self.spec.n_heads == 3
            }
            LossId::PinballCompound { alpha } => {
                losses::compound_levels(*alpha)?;
                self.spec.head_kind == HeadKind::Regression
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "loss {loss:?} incompatible with {:?} net with {} head(s)",
                self.spec.head_kind, self.spec.n_heads
            )))
        }
    }

    pub fn save(&self, dir: &Path, meta: &CheckpointMeta) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut bytes = Vec::with_capacity(self.params.len() * 8);
        for p in &self.params {
            bytes.extend_from_slice(&p.f64().to_le_bytes());
        }
        let hash = hex::encode(Sha256::digest(&bytes));
        fs::write(dir.join("model.bin"), &bytes)?;
        let record = CheckpointFile {
            spec: self.spec.clone(),
            seed: self.seed,
            param_count: self.params.len(),
            dtype: "f64".into(),
            sha256: hash,
            train: meta.train.clone(),
            loss_trace: meta.loss_trace.clone(),
        };
        fs::write(dir.join("model.json"), serde_json::to_string_pretty(&record)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Net<T>, CheckpointMeta)> {
        let json_path = dir.join("model.json");
        let bin_path = dir.join("model.bin");
        if !json_path.exists() || !bin_path.exists() {
            return Err(Error::MissingArtifact(format!("checkpoint in {}", dir.display())));
        }
        let record: CheckpointFile = serde_json::from_str(&fs::read_to_string(&json_path)?)
            .map_err(|e| Error::format(&json_path, "model.json", e.to_string()))?;
        let bytes = fs::read(&bin_path)?;
        let hash = hex::encode(Sha256::digest(&bytes));
        if hash != record.sha256 {
            return Err(Error::format(&bin_path, "sha256", "content hash mismatch"));
        }
        let mut net = build_net::<T>(&record.spec, record.seed)?;
        if bytes.len() != net.params.len() * 8 || record.param_count != net.params.len() {
            return Err(Error::format(
                &bin_path,
                "param_count",
                format!("expected {} parameters, payload has {} bytes", net.params.len(), bytes.len()),
            ));
        }
        for (p, chunk) in net.params.iter_mut().zip(bytes.chunks_exact(8)) {
            *p = T::of(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
        }
        Ok((
            net,
            CheckpointMeta {
                train: record.train,
                loss_trace: record.loss_trace,
            },
        ))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train: Option<TrainConfig>,
    pub loss_trace: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointFile {
    spec: NetSpec,
    seed: u64,
    param_count: usize,
    dtype: String,
    sha256: String,
    train: Option<TrainConfig>,
    loss_trace: Vec<f64>,
}

/// Deterministic inference; dropout is inactive.
pub fn forward<T: Real>(net: &Net<T>, x: &Volume<T>) -> Result<SoftMaskSet<T>> {
    net.seg_forward(x, None, None)
}

/// `passes` forward passes with dropout active; pass `i` draws its masks from
/// stream `i` of a generator seeded with `seed`.
pub fn forward_mc<T: Real>(
    net: &Net<T>,
    x: &Volume<T>,
    passes: usize,
    seed: u64,
) -> Result<Vec<SoftMaskSet<T>>> {
    if net.spec.dropout_rate == 0.0 {
        return Err(Error::config("Monte Carlo sampling requires dropout_rate > 0"));
    }
    if passes == 0 {
        return Err(Error::config("Monte Carlo sampling requires at least one pass"));
    }
    (0..passes)
        .map(|i| {
            let mut rng = mc_stream(seed, i);
            net.seg_forward(x, Some(&mut rng), None)
        })
        .collect()
}

pub(crate) fn mc_stream(seed: u64, pass: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pass as u64);
    rng
}

/// Predicted `(q_lo, q_med, q_hi)` triples per foreground class, in mL.
pub fn regress<T: Real>(net: &Net<T>, intensities: &Volume<T>, one_hot_seg: &Volume<T>) -> Result<Vec<f64>> {
    if one_hot_seg.channels() != net.spec.n_classes {
        return Err(Error::shape("regressor segmentation channels", net.spec.n_classes, one_hot_seg.channels()));
    }
    let input = intensities.concat(one_hot_seg)?;
    net.reg_forward(&input, None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
}

pub fn train<T: Real>(net: &mut Net<T>, dataset: &[Example<T>], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    net.check_loss(&cfg.loss)?;
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        net.params.len(),
    );
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d409);
    let use_dropout = net.spec.dropout_rate > 0.0;
    let mut grads = vec![T::zero(); net.params.len()];
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            grads.fill(T::zero());
            let mut batch_loss = 0.0;
            for &i in idx {
                let drop = if use_dropout { Some(&mut drop_rng) } else { None };
                batch_loss += net.loss_and_grad(&dataset[i], &cfg.loss, drop, &mut grads)?;
            }
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            let inv = T::of(1.0 / idx.len() as f64);
            for g in grads.iter_mut() {
                *g *= inv;
            }
            opt.step(&mut net.params, &grads);
            epoch_loss += batch_loss;
        }
        let mean = epoch_loss / dataset.len() as f64;
        info!("epoch {}/{}: loss {:.5}", epoch + 1, cfg.epochs, mean);
        trace.push(mean);
    }
    Ok(TrainReport { loss_trace: trace })
}

/// Random-normal helper used by tests and tools needing synthetic inputs.
pub fn random_input<T: Real>(channels: usize, dims: Dims, seed: u64) -> Volume<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = channels * dims.iter().product::<usize>();
    Volume::from_vec(channels, dims, (0..n).map(|_| T::of(rng.random_range(-1.0..1.0))).collect())
        .expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n_heads: usize, dropout: f64) -> NetSpec {
        NetSpec {
            base_filters: 1,
            depth: 2,
            n_heads,
            dropout_rate: dropout,
            ..NetSpec::segmentation(2, 3)
        }
    }

    #[test]
    fn triad_adds_exactly_two_head_blocks() {
        let single: Net<f32> = build_net(&NetSpec::segmentation(4, 4), 1).unwrap();
        let triad: Net<f32> = build_net(&NetSpec::triad(4, 4), 1).unwrap();
        let block = head_block_params(&NetSpec::triad(4, 4));
        assert_eq!(triad.param_count() - single.param_count(), 2 * block);
        assert!((2 * block) as f64 / (triad.param_count() as f64) < 0.15);
    }

    #[test]
    fn build_is_deterministic() {
        let a: Net<f32> = build_net(&NetSpec::triad(4, 4), 9).unwrap();
        let b: Net<f32> = build_net(&NetSpec::triad(4, 4), 9).unwrap();
        let c: Net<f32> = build_net(&NetSpec::triad(4, 4), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn heads_start_identical() {
        let net: Net<f64> = build_net(&tiny(3, 0.0), 4).unwrap();
        let x = random_input(2, [4, 4, 4], 1);
        let out = forward(&net, &x).unwrap();
        assert_eq!(out.head_names, vec!["lower", "mean", "upper"]);
        assert_eq!(out.probs(0), out.probs(1));
        assert_eq!(out.probs(1), out.probs(2));
    }

    #[test]
    fn forward_normalizes_and_repeats() {
        let net: Net<f32> = build_net(&NetSpec::segmentation(4, 4), 2).unwrap();
        let x = random_input(4, [8, 8, 8], 3);
        let a = forward(&net, &x).unwrap();
        let b = forward(&net, &x).unwrap();
        assert_eq!(a, b);
        let p = a.probs(0);
        for i in 0..p.voxels() {
            let s: f32 = (0..4).map(|c| p.channel(c)[i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let net: Net<f32> = build_net(&NetSpec::segmentation(4, 4), 2).unwrap();
        assert!(forward(&net, &random_input(3, [8, 8, 8], 0)).is_err());
        assert!(forward(&net, &random_input(4, [4, 8, 8], 0)).is_err());
        assert!(forward(&net, &random_input(4, [8, 8, 10], 0)).is_err());
    }

    #[test]
    fn mc_requires_dropout_and_is_seeded() {
        let plain: Net<f32> = build_net(&NetSpec::segmentation(4, 4), 2).unwrap();
        let x = random_input(4, [8, 8, 8], 3);
        assert!(forward_mc(&plain, &x, 2, 0).is_err());
        let net: Net<f32> = build_net(&NetSpec::dropout(4, 4), 2).unwrap();
        let a = forward_mc(&net, &x, 2, 7).unwrap();
        let b = forward_mc(&net, &x, 2, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].probs(0), a[1].probs(0));
    }

    #[test]
    fn regressor_output_length() {
        let net: Net<f32> = build_net(&NetSpec::regressor(4, 4), 0).unwrap();
        let x = random_input(4, [8, 8, 8], 1);
        let seg = one_hot(&vec![0u8; 512], 4, [8, 8, 8]).unwrap();
        let out = regress(&net, &x, &seg).unwrap();
        assert_eq!(out.len(), 9);
        assert_eq!(out, regress(&net, &x, &seg).unwrap());
    }

    #[test]
    fn incompatible_loss_is_rejected() {
        let mut net: Net<f32> = build_net(&NetSpec::segmentation(4, 4), 0).unwrap();
        let ex = Example {
            input: random_input(4, [8, 8, 8], 0),
            target: Target::Labels(vec![0; 512]),
        };
        let cfg = TrainConfig {
            loss: LossId::Triad { gamma: 0.2 },
            ..Default::default()
        };
        assert!(train(&mut net, &[ex], &cfg).is_err());
        assert!(train(&mut net, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let net: Net<f32> = build_net(&NetSpec::triad(4, 4), 5).unwrap();
        let meta = CheckpointMeta {
            train: Some(TrainConfig::default()),
            loss_trace: vec![0.5, 0.25],
        };
        net.save(dir.path(), &meta).unwrap();
        let (back, meta2) = Net::<f32>::load(dir.path()).unwrap();
        assert_eq!(meta, meta2);
        let x = random_input(4, [8, 8, 8], 2);
        assert_eq!(forward(&net, &x).unwrap(), forward(&back, &x).unwrap());

        let bin = dir.path().join("model.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[3] ^= 1;
        std::fs::write(&bin, bytes).unwrap();
        assert!(Net::<f32>::load(dir.path()).is_err());
    }

    /// Moves every parameter off zero so no ReLU sits exactly on its kink.
    fn jitter(net: &mut Net<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in net.params_mut() {
            *p += rng.random_range(-0.05..0.05);
        }
    }

    fn fd_check(net: &Net<f64>, ex: &Example<f64>, loss: &LossId) {
        let mut grads = vec![0.0; net.param_count()];
        net.loss_and_grad(ex, loss, None, &mut grads).unwrap();
        let mut worst: f64 = 0.0;
        let h = 1e-6;
        for i in 0..net.param_count() {
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let mut m = net.clone();
            m.params_mut()[i] -= h;
            let mut sink = vec![0.0; net.param_count()];
            let lp = p.loss_and_grad(ex, loss, None, &mut sink).unwrap();
            let lm = m.loss_and_grad(ex, loss, None, &mut sink).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            // floor keeps roundoff on near-zero gradients from dominating
            let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-5);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let x = random_input(2, [4, 4, 4], 21);
        let labels: Vec<u8> = (0..64).map(|i| ((i * 7 + i / 5) % 3) as u8).collect();
        let ex = Example {
            input: x.clone(),
            target: Target::Labels(labels),
        };
        let mut single: Net<f64> = build_net(&tiny(1, 0.0), 3).unwrap();
        jitter(&mut single, 1);
        assert!(single.param_count() <= 1000);
        fd_check(&single, &ex, &LossId::Dice);
        let mut triad: Net<f64> = build_net(&tiny(3, 0.0), 3).unwrap();
        jitter(&mut triad, 2);
        fd_check(&triad, &ex, &LossId::Triad { gamma: 0.2 });
        let mut wider: Net<f64> = build_net(&NetSpec { base_filters: 2, ..tiny(1, 0.0) }, 6).unwrap();
        jitter(&mut wider, 3);
        fd_check(&wider, &ex, &LossId::Dice);

        let reg_spec = NetSpec {
            base_filters: 2,
            depth: 2,
            ..NetSpec::regressor(2, 3)
        };
        let mut reg: Net<f64> = build_net(&reg_spec, 5).unwrap();
        jitter(&mut reg, 4);
        let ex = Example {
            input: random_input(5, [4, 4, 4], 8),
            target: Target::Volumes(vec![0.31, -0.2]),
        };
        fd_check(&reg, &ex, &LossId::PinballCompound { alpha: 0.1 });
    }
}
