//! Cross-stream batch normalization.
//!
//! A batch handed to a normalization site holds `streams` equal, contiguous
//! groups of images: one group for a single-stream network, or targets
//! followed by references for the paired network. Statistics are taken per
//! channel:
//!
//! * `Joint` pools every entry of both streams (`2M·h·w` values);
//! * `Literal` sums both streams and divides by the paired-sample count
//!   `M·h·w`, exactly as the paired equations are printed, which doubles the
//!   mean relative to `Joint`;
//! * `PerStream` gives each stream its own statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Act, Real};

pub const RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    Joint,
    Literal,
    PerStream,
}

impl std::str::FromStr for NormMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "joint" => Ok(NormMode::Joint),
            "literal" => Ok(NormMode::Literal),
            "per_stream" => Ok(NormMode::PerStream),
            other => Err(format!("unknown norm mode `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> NormParams<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Per-channel statistics of one normalization group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of entries per channel in the group.
    pub count: usize,
}

/// What the backward pass and the running-statistics update need.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<Vec<T>>,
    scale: T,
    streams: usize,
    pub stats: Vec<GroupStats<T>>,
}

fn groups(mode: NormMode, streams: usize) -> usize {
    match mode {
        NormMode::PerStream => streams,
        NormMode::Joint | NormMode::Literal => 1,
    }
}

/// Normalizes `x` (channel-major, `streams` groups along the image axis).
///
/// Training mode uses batch statistics; inference uses the running statistics
/// in `params`. The activation is left to the caller.
pub fn normalize_forward<T: Real>(
    x: &Act<T>,
    params: &NormParams<T>,
    mode: NormMode,
    eps: T,
    streams: usize,
    training: bool,
) -> Result<(Act<T>, Option<NormCache<T>>)> {
    if x.c != params.channels() {
        return Err(Error::Shape(format!(
            "{} channels into a {}-channel normalization",
            x.c,
            params.channels()
        )));
    }
    if streams == 0 || !x.n.is_multiple_of(streams) {
        return Err(Error::Shape(format!("{} images in {streams} streams", x.n)));
    }
    let hw = x.hw();
    let mut y = x.clone();
    if !training {
        for ch in 0..x.c {
            let inv = T::one() / (params.running_var[ch] + eps).sqrt();
            let (g, b, m) = (params.gamma[ch], params.beta[ch], params.running_mean[ch]);
            for v in y.channel_mut(ch) {
                *v = g * (*v - m) * inv + b;
            }
        }
        return Ok((y, None));
    }
    if x.n == 0 || hw == 0 {
        return Err(Error::EmptyBatch);
    }
    let n_groups = groups(mode, streams);
    let per_group = x.n / n_groups * hw;
    // Divisor of the mean and variance sums.
    let denom = match mode {
        NormMode::Literal if streams == 2 => per_group / 2,
        _ => per_group,
    };
    let scale = T::one() / T::from_usize(denom).expect("count");
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut inv_std = vec![vec![T::zero(); x.c]; n_groups];
    let mut stats: Vec<GroupStats<T>> = (0..n_groups)
        .map(|_| GroupStats {
            mean: vec![T::zero(); x.c],
            var: vec![T::zero(); x.c],
            count: per_group,
        })
        .collect();
    let chan_len = x.n * hw;
    for ch in 0..x.c {
        for g in 0..n_groups {
            let lo = ch * chan_len + g * per_group;
            let seg = &x.data[lo..lo + per_group];
            let mean = seg.iter().copied().sum::<T>() * scale;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * scale;
            let inv = T::one() / (var + eps).sqrt();
            stats[g].mean[ch] = mean;
            stats[g].var[ch] = var;
            inv_std[g][ch] = inv;
            let (gm, bt) = (params.gamma[ch], params.beta[ch]);
            for (i, &v) in seg.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat[lo + i] = h;
                y.data[lo + i] = gm * h + bt;
            }
        }
    }
    Ok((
        y,
        Some(NormCache {
            xhat,
            inv_std,
            scale,
            streams: n_groups,
            stats,
        }),
    ))
}

/// Gradients `(dx, dgamma, dbeta)` for a training-mode forward pass.
///
/// Valid for every mode: with `μ = a·Σx` and `σ² = a·Σ(x-μ)²` over a group of
/// `n` entries, `dx = γ·s·(g - a·Σg - a·x̂·Σ(g·x̂) + a²·Σ(g·x̂)·Σx̂)` where
/// `s = 1/√(σ²+ε)` and `g = dy`. `Joint`/`PerStream` have `a = 1/n` (so
/// `Σx̂ = 0`), `Literal` has `a = 2/n`.
pub fn normalize_backward<T: Real>(
    cache: &NormCache<T>,
    dy: &Act<T>,
    gamma: &[T],
) -> (Act<T>, Vec<T>, Vec<T>) {
    let chan_len = dy.n * dy.hw();
    let per_group = chan_len / cache.streams;
    let a = cache.scale;
    let mut dx = Act::zeros(dy.c, dy.n, dy.h, dy.w);
    let mut dgamma = vec![T::zero(); dy.c];
    let mut dbeta = vec![T::zero(); dy.c];
    for ch in 0..dy.c {
        for g in 0..cache.streams {
            let lo = ch * chan_len + g * per_group;
            let dys = &dy.data[lo..lo + per_group];
            let xh = &cache.xhat[lo..lo + per_group];
            let sum_g: T = dys.iter().copied().sum();
            let sum_gx: T = dys.iter().zip(xh).map(|(&d, &h)| d * h).sum();
            let sum_x: T = xh.iter().copied().sum();
            let offset = a * a * sum_gx * sum_x - a * sum_g;
            dbeta[ch] += sum_g;
            dgamma[ch] += sum_gx;
            let k = gamma[ch] * cache.inv_std[g][ch];
            let out = &mut dx.data[lo..lo + per_group];
            for i in 0..per_group {
                out[i] = k * (dys[i] + offset - a * xh[i] * sum_gx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Exponential moving average of the batch statistics (unbiased variance),
/// averaged over groups when streams are normalized separately.
pub fn update_running<T: Real>(params: &mut NormParams<T>, stats: &[GroupStats<T>]) {
    let m = T::lit(RUNNING_MOMENTUM);
    let inv_groups = T::one() / T::from_usize(stats.len()).expect("count");
    for ch in 0..params.channels() {
        let mut mean = T::zero();
        let mut var = T::zero();
        for s in stats {
            mean += s.mean[ch];
            let correction = if s.count > 1 {
                T::from_usize(s.count).unwrap() / T::from_usize(s.count - 1).unwrap()
            } else {
                T::one()
            };
            var += s.var[ch] * correction;
        }
        mean *= inv_groups;
        var *= inv_groups;
        params.running_mean[ch] = (T::one() - m) * params.running_mean[ch] + m * mean;
        params.running_var[ch] = (T::one() - m) * params.running_var[ch] + m * var;
    }
}

/// Target and reference feature maps of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedFeatures<T> {
    pub target: Act<T>,
    pub reference: Option<Act<T>>,
}

/// Normalizes a target/reference pair of feature batches with shared `γ, β`.
///
/// Returns the normalized pair and, in training mode, the statistics of each
/// normalization group. Running statistics are updated in training mode.
pub fn paired_normalize<T: Real>(
    feats: &PairedFeatures<T>,
    params: &mut NormParams<T>,
    mode: NormMode,
    eps: T,
    training: bool,
) -> Result<(PairedFeatures<T>, Vec<GroupStats<T>>)> {
    let (batch, streams) = match &feats.reference {
        Some(r) => {
            if r.shape() != feats.target.shape() {
                return Err(Error::Shape("target and reference maps differ".into()));
            }
            (Act::concat_batch(&feats.target, r), 2)
        }
        None => (feats.target.clone(), 1),
    };
    if training && feats.target.n == 0 {
        return Err(Error::EmptyBatch);
    }
    let (y, cache) = normalize_forward(&batch, params, mode, eps, streams, training)?;
    let stats = match cache {
        Some(c) => {
            update_running(params, &c.stats);
            c.stats
        }
        None => Vec::new(),
    };
    let m = feats.target.n;
    let out = if streams == 2 {
        PairedFeatures {
            target: y.slice_batch(0, m),
            reference: Some(y.slice_batch(m, 2 * m)),
        }
    } else {
        PairedFeatures {
            target: y,
            reference: None,
        }
    };
    Ok((out, stats))
}
