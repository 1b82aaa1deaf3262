//! Convolutional feature extractor with cross-stream normalization.
//!
//! The paired variant runs targets and references through one set of weights
//! as a single concatenated batch, so every normalization site sees both
//! streams. The dual variant keeps two independent networks that both read
//! the target image. The baseline reads targets only.

pub mod checkpoint;
pub mod layers;
pub mod norm;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::Image;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Act, Param, Real, Window};
use layers::{Block, BlockCache, ConvUnit, PassMode};
pub use norm::{paired_normalize, GroupStats, NormMode, NormParams, PairedFeatures};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Shared backbone over (target, neutral reference) with joint statistics.
    #[default]
    Paired,
    /// Expression and neutral networks, both fed the target image.
    Dual,
    /// Target image only; its pooled feature is classified directly.
    Baseline,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Paired => "paired",
            Variant::Dual => "dual",
            Variant::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "paired" => Ok(Variant::Paired),
            "dual" => Ok(Variant::Dual),
            "baseline" => Ok(Variant::Baseline),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    /// One stride-2 3×3 conv unit per stage.
    Plain,
    /// 7×7 stem, max pool, then basic residual blocks; stages after the first
    /// downsample with a 1×1 projection shortcut.
    Residual { blocks_per_stage: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub stage_channels: Vec<usize>,
    pub architecture: Architecture,
    pub feature_dim: usize,
    pub norm_mode: NormMode,
    pub epsilon: f64,
    pub variant: Variant,
}

impl BackboneConfig {
    /// Four plain stages (16, 32, 64, 128) over 48×48 inputs.
    pub fn desk(in_channels: usize) -> Self {
        Self {
            in_channels,
            input_size: 48,
            stage_channels: vec![16, 32, 64, 128],
            architecture: Architecture::Plain,
            feature_dim: 128,
            norm_mode: NormMode::Joint,
            epsilon: 1e-5,
            variant: Variant::Paired,
        }
    }

    /// 18-layer residual layout (64, 128, 256, 512) over 224×224 inputs.
    pub fn full(in_channels: usize) -> Self {
        Self {
            in_channels,
            input_size: 224,
            stage_channels: vec![64, 128, 256, 512],
            architecture: Architecture::Residual { blocks_per_stage: 2 },
            feature_dim: 512,
            norm_mode: NormMode::Joint,
            epsilon: 1e-5,
            variant: Variant::Paired,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return bad("stage_channels must be nonempty and positive".into());
        }
        if self.feature_dim != *self.stage_channels.last().unwrap() {
            return bad(format!(
                "feature_dim {} must equal the last stage width {}",
                self.feature_dim,
                self.stage_channels.last().unwrap()
            ));
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if let Architecture::Residual { blocks_per_stage: 0 } = self.architecture {
            return bad("blocks_per_stage must be positive".into());
        }
        let min = match self.architecture {
            Architecture::Plain => 1 << self.stage_channels.len(),
            Architecture::Residual { .. } => 1 << (self.stage_channels.len() + 1),
        };
        if self.input_size < min {
            return bad(format!("input_size must be at least {min}"));
        }
        Ok(())
    }

    /// Normalization mode actually used: only the paired variant mixes streams.
    pub fn effective_norm_mode(&self) -> NormMode {
        match self.variant {
            Variant::Paired => self.norm_mode,
            Variant::Dual | Variant::Baseline => NormMode::PerStream,
        }
    }
}

/// One convolutional feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub blocks: Vec<Block<T>>,
}

/// Caches of one forward pass.
pub struct Tape<T> {
    blocks: Vec<BlockCache<T>>,
    final_shape: [usize; 4],
}

fn win(kernel: usize, stride: usize, pad: usize) -> Window {
    Window {
        kernel,
        stride,
        pad,
    }
}

impl<T: Real> Backbone<T> {
    pub fn new(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, &[0xBB]);
        Ok(Self {
            config: config.clone(),
            blocks: build_blocks(config, &mut r),
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            for u in b.units_mut() {
                out.push(&mut u.conv.weight);
                out.push(&mut u.norm.gamma);
                out.push(&mut u.norm.beta);
            }
        }
        out
    }

    /// Every stored tensor, weights and running statistics, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (bi, b) in self.blocks.iter().enumerate() {
            for (ui, u) in b.units().into_iter().enumerate() {
                let p = format!("block{bi}.unit{ui}");
                out.push((format!("{p}.conv"), u.conv.weight.value.as_slice()));
                out.push((format!("{p}.gamma"), u.norm.gamma.value.as_slice()));
                out.push((format!("{p}.beta"), u.norm.beta.value.as_slice()));
                out.push((format!("{p}.running_mean"), u.norm.running_mean.as_slice()));
                out.push((format!("{p}.running_var"), u.norm.running_var.as_slice()));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        for (bi, b) in self.blocks.iter_mut().enumerate() {
            for (ui, u) in b.units_mut().into_iter().enumerate() {
                let p = format!("block{bi}.unit{ui}");
                out.push((format!("{p}.conv"), &mut u.conv.weight.value));
                out.push((format!("{p}.gamma"), &mut u.norm.gamma.value));
                out.push((format!("{p}.beta"), &mut u.norm.beta.value));
                out.push((format!("{p}.running_mean"), &mut u.norm.running_mean));
                out.push((format!("{p}.running_var"), &mut u.norm.running_var));
            }
        }
        out
    }

    /// Runs the network and global-average-pools the last map into `N × D`
    /// row-major features.
    pub fn forward(&self, x: &Act<T>, norm: NormMode, streams: usize, training: bool) -> Result<(Vec<T>, Tape<T>)> {
        if x.c != self.config.in_channels || x.h != self.config.input_size || x.w != self.config.input_size {
            return Err(Error::Shape(format!(
                "input {}x{}x{} does not match backbone {}x{}x{}",
                x.c, x.h, x.w, self.config.in_channels, self.config.input_size, self.config.input_size
            )));
        }
        let mode = PassMode {
            norm,
            eps: T::lit(self.config.epsilon),
            streams,
            training,
        };
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur: Option<Act<T>> = None;
        for b in &self.blocks {
            let (y, c) = b.forward(cur.as_ref().unwrap_or(x), &mode)?;
            caches.push(c);
            cur = Some(y);
        }
        let last = cur.expect("at least one block");
        let (d, n, hw) = (last.c, last.n, last.hw());
        let inv = T::one() / T::from_usize(hw).unwrap();
        let mut pooled = vec![T::zero(); n * d];
        for ch in 0..d {
            for img in 0..n {
                let s: T = last.data[(ch * n + img) * hw..(ch * n + img + 1) * hw].iter().copied().sum();
                pooled[img * d + ch] = s * inv;
            }
        }
        Ok((
            pooled,
            Tape {
                blocks: caches,
                final_shape: last.shape(),
            },
        ))
    }

    /// Accumulates parameter gradients for `d_pooled` (`N × D`).
    pub fn backward(&mut self, tape: &Tape<T>, d_pooled: &[T]) {
        let [d, n, h, w] = tape.final_shape;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let mut g = Act::zeros(d, n, h, w);
        for ch in 0..d {
            for img in 0..n {
                let v = d_pooled[img * d + ch] * inv;
                g.data[(ch * n + img) * hw..(ch * n + img + 1) * hw]
                    .iter_mut()
                    .for_each(|x| *x = v);
            }
        }
        let last = self.blocks.len() - 1;
        let mut grad = Some(g);
        for (i, (b, c)) in self.blocks.iter_mut().zip(&tape.blocks).enumerate().rev() {
            let dy = grad.take().expect("gradient flows to every block but the first");
            grad = b.backward(c, dy, i > 0);
            debug_assert!(i == 0 || grad.is_some() || i == last);
        }
    }

    pub fn commit_running(&mut self, tape: &Tape<T>) {
        for (b, c) in self.blocks.iter_mut().zip(&tape.blocks) {
            b.commit_running(c);
        }
    }
}

fn build_blocks<T: Real>(config: &BackboneConfig, rng: &mut impl Rng) -> Vec<Block<T>> {
    let mut blocks = Vec::new();
    let mut in_c = config.in_channels;
    match config.architecture {
        Architecture::Plain => {
            for &c in &config.stage_channels {
                blocks.push(Block::Plain(ConvUnit::new(in_c, c, win(3, 2, 1), true, rng)));
                in_c = c;
            }
        }
        Architecture::Residual { blocks_per_stage } => {
            let stem = config.stage_channels[0];
            blocks.push(Block::Plain(ConvUnit::new(in_c, stem, win(7, 2, 3), true, rng)));
            blocks.push(Block::MaxPool(win(3, 2, 1)));
            in_c = stem;
            for (si, &c) in config.stage_channels.iter().enumerate() {
                for bi in 0..blocks_per_stage {
                    let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                    let shortcut = (stride != 1 || in_c != c)
                        .then(|| ConvUnit::new(in_c, c, win(1, stride, 0), false, rng));
                    blocks.push(Block::Residual {
                        first: ConvUnit::new(in_c, c, win(3, stride, 1), true, rng),
                        second: ConvUnit::new(c, c, win(3, 1, 1), false, rng),
                        shortcut,
                    });
                    in_c = c;
                }
            }
        }
    }
    blocks
}

/// Stacks channel-last images into a channel-major batch after checking shape.
pub fn images_to_act<T: Real>(images: &[&Image], config: &BackboneConfig) -> Result<Act<T>> {
    let s = config.input_size;
    for img in images {
        if img.height != s || img.width != s || img.channels != config.in_channels {
            return Err(Error::Shape(format!(
                "image {}x{}x{} does not match input {s}x{s}x{}",
                img.height, img.width, img.channels, config.in_channels
            )));
        }
    }
    let hw = s * s;
    let c = config.in_channels;
    let n = images.len();
    let mut out = Act::zeros(c, n, s, s);
    for (i, img) in images.iter().enumerate() {
        for p in 0..hw {
            for ch in 0..c {
                out.data[(ch * n + i) * hw + p] = T::lit(img.data[p * c + ch] as f64);
            }
        }
    }
    Ok(out)
}

/// Pooled basic features of a batch.
pub struct BasicFeatures<T> {
    pub v_tar: Vec<T>,
    pub v_ref: Option<Vec<T>>,
    pub tape: Tape<T>,
}

/// Paired or baseline feature extraction with one backbone.
///
/// The paired variant concatenates targets and references so every
/// normalization site sees both streams; the baseline ignores references.
pub fn forward_basic<T: Real>(
    net: &Backbone<T>,
    targets: &Act<T>,
    references: Option<&Act<T>>,
    training: bool,
) -> Result<BasicFeatures<T>> {
    let cfg = &net.config;
    match cfg.variant {
        Variant::Paired => {
            let refs = references.ok_or_else(|| Error::Shape("paired variant needs reference images".into()))?;
            if refs.shape() != targets.shape() {
                return Err(Error::Shape("target and reference batches differ in shape".into()));
            }
            let both = Act::concat_batch(targets, refs);
            let (pooled, tape) = net.forward(&both, cfg.effective_norm_mode(), 2, training)?;
            let split = targets.n * cfg.feature_dim;
            let v_ref = pooled[split..].to_vec();
            let mut v_tar = pooled;
            v_tar.truncate(split);
            Ok(BasicFeatures {
                v_tar,
                v_ref: Some(v_ref),
                tape,
            })
        }
        Variant::Baseline => {
            let (v_tar, tape) = net.forward(targets, NormMode::PerStream, 1, training)?;
            Ok(BasicFeatures {
                v_tar,
                v_ref: None,
                tape,
            })
        }
        Variant::Dual => Err(Error::Config("dual variant uses forward_dual".into())),
    }
}

pub struct DualFeatures<T> {
    pub v_tar: Vec<T>,
    pub v_ref: Vec<T>,
    pub expression_tape: Tape<T>,
    pub neutral_tape: Tape<T>,
}

/// Reference-free extraction: the expression network and the neutral network
/// both read the target image, each with its own statistics.
pub fn forward_dual<T: Real>(
    expression: &Backbone<T>,
    neutral: &Backbone<T>,
    targets: &Act<T>,
    training: bool,
) -> Result<DualFeatures<T>> {
    if expression.config.variant != Variant::Dual || neutral.config.variant != Variant::Dual {
        return Err(Error::Config("forward_dual needs dual-variant backbones".into()));
    }
    if expression.config.stage_channels != neutral.config.stage_channels
        || expression.config.input_size != neutral.config.input_size
    {
        return Err(Error::Shape("expression and neutral networks differ in shape".into()));
    }
    let (v_tar, expression_tape) = expression.forward(targets, NormMode::PerStream, 1, training)?;
    let (v_ref, neutral_tape) = neutral.forward(targets, NormMode::PerStream, 1, training)?;
    Ok(DualFeatures {
        v_tar,
        v_ref,
        expression_tape,
        neutral_tape,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(variant: Variant, arch: Architecture) -> BackboneConfig {
        BackboneConfig {
            in_channels: 1,
            input_size: 16,
            stage_channels: vec![3, 4, 5],
            architecture: arch,
            feature_dim: 5,
            norm_mode: NormMode::Joint,
            epsilon: 1e-5,
            variant,
        }
    }

    fn batch(n: usize, size: usize, c: usize, salt: usize) -> Act<f64> {
        let mut a = Act::zeros(c, n, size, size);
        for (i, v) in a.data.iter_mut().enumerate() {
            *v = (((i + salt) * 2654435761) % 1000) as f64 / 1000.0;
        }
        a
    }

    #[test]
    fn config_validation() {
        let mut c = BackboneConfig::desk(3);
        assert!(c.validate().is_ok());
        c.feature_dim = 64;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::desk(3);
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
        assert!(BackboneConfig::full(3).validate().is_ok());
    }

    #[test]
    fn identical_slots_give_identical_features() {
        let cfg = tiny(Variant::Paired, Architecture::Plain);
        let net = Backbone::<f64>::new(&cfg, 1).unwrap();
        let x = batch(3, 16, 1, 0);
        for training in [true, false] {
            let out = forward_basic(&net, &x, Some(&x), training).unwrap();
            assert_eq!(out.v_tar, out.v_ref.unwrap());
        }
    }

    #[test]
    fn swapping_slots_swaps_outputs() {
        let cfg = tiny(Variant::Paired, Architecture::Plain);
        let net = Backbone::<f64>::new(&cfg, 2).unwrap();
        let a = batch(2, 16, 1, 0);
        let b = batch(2, 16, 1, 99);
        let ab = forward_basic(&net, &a, Some(&b), true).unwrap();
        let ba = forward_basic(&net, &b, Some(&a), true).unwrap();
        for (x, y) in ab.v_tar.iter().zip(ba.v_ref.as_ref().unwrap()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in ab.v_ref.as_ref().unwrap().iter().zip(&ba.v_tar) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_returns_no_reference_and_feature_dim() {
        let cfg = tiny(Variant::Baseline, Architecture::Plain);
        let net = Backbone::<f64>::new(&cfg, 3).unwrap();
        for size in [16, 17, 23] {
            let mut cfg2 = cfg.clone();
            cfg2.input_size = size;
            let net2 = Backbone::<f64>::new(&cfg2, 3).unwrap();
            let out = forward_basic(&net2, &batch(2, size, 1, 0), None, false).unwrap();
            assert!(out.v_ref.is_none());
            assert_eq!(out.v_tar.len(), 2 * cfg.feature_dim);
        }
        assert!(forward_basic(&net, &batch(2, 12, 1, 0), None, false).is_err());
    }

    #[test]
    fn paired_without_references_is_rejected() {
        let cfg = tiny(Variant::Paired, Architecture::Plain);
        let net = Backbone::<f64>::new(&cfg, 1).unwrap();
        assert!(forward_basic(&net, &batch(2, 16, 1, 0), None, true).is_err());
    }

    #[test]
    fn inference_is_deterministic() {
        let cfg = tiny(Variant::Paired, Architecture::Residual { blocks_per_stage: 1 });
        let mut cfg = cfg;
        cfg.input_size = 32;
        let net = Backbone::<f32>::new(&cfg, 4).unwrap();
        let mut x = Act::<f32>::zeros(1, 2, 32, 32);
        x.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 17) as f32 / 17.0);
        let a = forward_basic(&net, &x, Some(&x), false).unwrap();
        let b = forward_basic(&net, &x, Some(&x), false).unwrap();
        assert_eq!(a.v_tar, b.v_tar);
        assert_eq!(a.v_tar.len(), 2 * 5);
    }

    #[test]
    fn dual_networks_agree_at_identical_init() {
        let cfg = tiny(Variant::Dual, Architecture::Plain);
        let e = Backbone::<f64>::new(&cfg, 5).unwrap();
        let n = e.clone();
        let out = forward_dual(&e, &n, &batch(4, 16, 1, 1), true).unwrap();
        assert_eq!(out.v_tar, out.v_ref);
        assert_eq!(out.v_tar.len(), 4 * 5);
    }

    /// Finite-difference check of the whole backbone for a linear readout.
    fn check_backbone_gradient(cfg: BackboneConfig) {
        let mut net = Backbone::<f64>::new(&cfg, 11).unwrap();
        let x = batch(2, cfg.input_size, cfg.in_channels, 5);
        let r = batch(2, cfg.input_size, cfg.in_channels, 77);
        let d = cfg.feature_dim;
        let readout: Vec<f64> = (0..4 * d).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.4).collect();
        let loss = |net: &Backbone<f64>| {
            let out = forward_basic(net, &x, Some(&r), true).unwrap();
            out.v_tar
                .iter()
                .chain(out.v_ref.as_ref().unwrap())
                .zip(&readout)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let out = forward_basic(&net, &x, Some(&r), true).unwrap();
        net.backward(&out.tape, &readout);
        let analytic: Vec<Vec<f64>> = net.params_mut().iter().map(|p| p.grad.clone()).collect();
        let h = 1e-5;
        let n_params = analytic.len();
        for pi in 0..n_params {
            for idx in [0, analytic[pi].len() / 2, analytic[pi].len() - 1] {
                let mut plus = net.clone();
                plus.params_mut()[pi].value[idx] += h;
                let mut minus = net.clone();
                minus.params_mut()[pi].value[idx] -= h;
                let num = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let a = analytic[pi][idx];
                assert!(
                    (num - a).abs() <= 1e-5 * (1.0 + num.abs()),
                    "param {pi}[{idx}]: numeric {num} analytic {a}"
                );
            }
        }
    }

    #[test]
    fn plain_backbone_gradients() {
        check_backbone_gradient(tiny(Variant::Paired, Architecture::Plain));
        let mut literal = tiny(Variant::Paired, Architecture::Plain);
        literal.norm_mode = NormMode::Literal;
        check_backbone_gradient(literal);
    }

    #[test]
    fn residual_backbone_gradients() {
        let mut cfg = tiny(Variant::Paired, Architecture::Residual { blocks_per_stage: 1 });
        cfg.input_size = 16;
        cfg.stage_channels = vec![2, 3];
        cfg.feature_dim = 3;
        check_backbone_gradient(cfg);
    }
}
