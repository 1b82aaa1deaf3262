use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::norm::{normalize_backward, normalize_forward, update_running, NormCache, NormMode, NormParams};
use crate::error::Result;
use crate::tensor::{col2im, im2col, Act, Param, Real, Window};

/// Bias-free 2-D convolution; weights are `[out, in·k·k]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub window: Window,
    pub weight: Param<T>,
}

pub struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: [usize; 4],
}

impl<T: Real> Conv<T> {
    /// He fan-in initialization.
    pub fn new(in_channels: usize, out_channels: usize, window: Window, rng: &mut impl Rng) -> Self {
        let fan_in = in_channels * window.kernel * window.kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let weight = (0..out_channels * fan_in)
            .map(|_| T::lit(normal.sample(rng)))
            .collect();
        Self {
            in_channels,
            out_channels,
            window,
            weight: Param::new(weight),
        }
    }

    pub fn forward(&self, x: &Act<T>) -> (Act<T>, ConvCache<T>) {
        let mut cols = Vec::new();
        let (ho, wo) = im2col(x, self.window, &mut cols);
        let k = self.in_channels * self.window.kernel * self.window.kernel;
        let p = x.n * ho * wo;
        let mut out = Act::zeros(self.out_channels, x.n, ho, wo);
        crate::tensor::matmul(self.out_channels, k, p, &self.weight.value, &cols, T::zero(), &mut out.data);
        (
            out,
            ConvCache {
                cols,
                in_shape: x.shape(),
            },
        )
    }

    /// Accumulates the weight gradient; returns the input gradient when asked.
    pub fn backward(&mut self, cache: &ConvCache<T>, dy: &Act<T>, need_dx: bool) -> Option<Act<T>> {
        let k = self.in_channels * self.window.kernel * self.window.kernel;
        let p = dy.n * dy.hw();
        // dW[out, k] += dY[out, p] · cols[k, p]^T
        T::gemm(
            self.out_channels,
            p,
            k,
            T::one(),
            &dy.data,
            p as isize,
            1,
            &cache.cols,
            1,
            p as isize,
            T::one(),
            &mut self.weight.grad,
            k as isize,
            1,
        );
        if !need_dx {
            return None;
        }
        // dcols[k, p] = W[out, k]^T · dY[out, p]
        let mut dcols = vec![T::zero(); k * p];
        T::gemm(
            k,
            self.out_channels,
            p,
            T::one(),
            &self.weight.value,
            1,
            k as isize,
            &dy.data,
            p as isize,
            1,
            T::zero(),
            &mut dcols,
            p as isize,
            1,
        );
        let [c, n, h, w] = cache.in_shape;
        Some(col2im(&dcols, c, n, h, w, self.window))
    }
}

/// Trainable normalization site.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> Norm<T> {
    pub fn new(channels: usize) -> Self {
        let p = NormParams::<T>::identity(channels);
        Self {
            gamma: Param::new(p.gamma),
            beta: Param::new(p.beta),
            running_mean: p.running_mean,
            running_var: p.running_var,
        }
    }

    pub fn params(&self) -> NormParams<T> {
        NormParams {
            gamma: self.gamma.value.clone(),
            beta: self.beta.value.clone(),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
        }
    }

    pub fn commit_running(&mut self, cache: &NormCache<T>) {
        let mut p = self.params();
        update_running(&mut p, &cache.stats);
        self.running_mean = p.running_mean;
        self.running_var = p.running_var;
    }
}

/// How a forward pass treats normalization.
#[derive(Clone, Copy, Debug)]
pub struct PassMode<T> {
    pub norm: NormMode,
    pub eps: T,
    pub streams: usize,
    pub training: bool,
}

/// Convolution, normalization and an optional rectifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit<T> {
    pub conv: Conv<T>,
    pub norm: Norm<T>,
    pub relu: bool,
}

pub struct UnitCache<T> {
    conv: ConvCache<T>,
    norm: Option<NormCache<T>>,
    out: Option<Act<T>>,
}

impl<T: Real> ConvUnit<T> {
    pub fn new(in_c: usize, out_c: usize, window: Window, relu: bool, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv::new(in_c, out_c, window, rng),
            norm: Norm::new(out_c),
            relu,
        }
    }

    pub fn forward(&self, x: &Act<T>, mode: &PassMode<T>) -> Result<(Act<T>, UnitCache<T>)> {
        let (z, conv) = self.conv.forward(x);
        let (mut y, norm) =
            normalize_forward(&z, &self.norm.params(), mode.norm, mode.eps, mode.streams, mode.training)?;
        if self.relu {
            y.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
        }
        let out = (self.relu && mode.training).then(|| y.clone());
        Ok((y, UnitCache { conv, norm, out }))
    }

    pub fn backward(&mut self, cache: &UnitCache<T>, mut dy: Act<T>, need_dx: bool) -> Option<Act<T>> {
        if let Some(out) = &cache.out {
            for (d, &o) in dy.data.iter_mut().zip(&out.data) {
                if o <= T::zero() {
                    *d = T::zero();
                }
            }
        }
        let norm = cache.norm.as_ref().expect("backward after a training pass");
        let (dz, dgamma, dbeta) = normalize_backward(norm, &dy, &self.norm.gamma.value);
        for (g, d) in self.norm.gamma.grad.iter_mut().zip(dgamma) {
            *g += d;
        }
        for (g, d) in self.norm.beta.grad.iter_mut().zip(dbeta) {
            *g += d;
        }
        self.conv.backward(&cache.conv, &dz, need_dx)
    }

    pub fn commit_running(&mut self, cache: &UnitCache<T>) {
        if let Some(n) = &cache.norm {
            self.norm.commit_running(n);
        }
    }
}

pub struct PoolCache {
    argmax: Vec<usize>,
    in_shape: [usize; 4],
}

/// Max pooling with implicit `-inf` padding.
pub fn max_pool_forward<T: Real>(x: &Act<T>, win: Window) -> (Act<T>, PoolCache) {
    let (ho, wo) = (win.out_dim(x.h), win.out_dim(x.w));
    let mut out = Act::zeros(x.c, x.n, ho, wo);
    let mut argmax = vec![0usize; out.data.len()];
    let hw = x.hw();
    for plane in 0..x.c * x.n {
        let src = &x.data[plane * hw..(plane + 1) * hw];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = 0;
                for ky in 0..win.kernel {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..win.kernel {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix < 0 || ix >= x.w as isize {
                            continue;
                        }
                        let idx = iy as usize * x.w + ix as usize;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = plane * ho * wo + oy * wo + ox;
                out.data[o] = best;
                argmax[o] = plane * hw + best_idx;
            }
        }
    }
    (
        out,
        PoolCache {
            argmax,
            in_shape: x.shape(),
        },
    )
}

pub fn max_pool_backward<T: Real>(cache: &PoolCache, dy: &Act<T>) -> Act<T> {
    let [c, n, h, w] = cache.in_shape;
    let mut dx = Act::zeros(c, n, h, w);
    for (&src, &d) in cache.argmax.iter().zip(&dy.data) {
        dx.data[src] += d;
    }
    dx
}

/// One stage element of a backbone.
#[derive(Clone, Debug, PartialEq)]
pub enum Block<T> {
    Plain(ConvUnit<T>),
    Residual {
        first: ConvUnit<T>,
        second: ConvUnit<T>,
        shortcut: Option<ConvUnit<T>>,
    },
    MaxPool(Window),
}

pub enum BlockCache<T> {
    Plain(UnitCache<T>),
    Residual {
        first: UnitCache<T>,
        second: UnitCache<T>,
        shortcut: Option<UnitCache<T>>,
        out: Option<Act<T>>,
    },
    MaxPool(PoolCache),
}

impl<T: Real> Block<T> {
    pub fn forward(&self, x: &Act<T>, mode: &PassMode<T>) -> Result<(Act<T>, BlockCache<T>)> {
        match self {
            Block::Plain(u) => {
                let (y, c) = u.forward(x, mode)?;
                Ok((y, BlockCache::Plain(c)))
            }
            Block::MaxPool(win) => {
                let (y, c) = max_pool_forward(x, *win);
                Ok((y, BlockCache::MaxPool(c)))
            }
            Block::Residual {
                first,
                second,
                shortcut,
            } => {
                let (a, ca) = first.forward(x, mode)?;
                let (mut b, cb) = second.forward(&a, mode)?;
                let cs = match shortcut {
                    Some(s) => {
                        let (sx, cs) = s.forward(x, mode)?;
                        b.data.iter_mut().zip(&sx.data).for_each(|(v, &s)| *v += s);
                        Some(cs)
                    }
                    None => {
                        b.data.iter_mut().zip(&x.data).for_each(|(v, &s)| *v += s);
                        None
                    }
                };
                b.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
                let out = mode.training.then(|| b.clone());
                Ok((
                    b,
                    BlockCache::Residual {
                        first: ca,
                        second: cb,
                        shortcut: cs,
                        out,
                    },
                ))
            }
        }
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, dy: Act<T>, need_dx: bool) -> Option<Act<T>> {
        match (self, cache) {
            (Block::Plain(u), BlockCache::Plain(c)) => u.backward(c, dy, need_dx),
            (Block::MaxPool(_), BlockCache::MaxPool(c)) => Some(max_pool_backward(c, &dy)),
            (
                Block::Residual {
                    first,
                    second,
                    shortcut,
                },
                BlockCache::Residual {
                    first: ca,
                    second: cb,
                    shortcut: cs,
                    out,
                },
            ) => {
                let mut d = dy;
                let out = out.as_ref().expect("backward after a training pass");
                for (g, &o) in d.data.iter_mut().zip(&out.data) {
                    if o <= T::zero() {
                        *g = T::zero();
                    }
                }
                let da = second.backward(cb, d.clone(), true).expect("dx requested");
                let dx_main = first.backward(ca, da, need_dx);
                let dx_short = match (shortcut, cs) {
                    (Some(s), Some(c)) => s.backward(c, d, need_dx),
                    _ => need_dx.then_some(d),
                };
                match (dx_main, dx_short) {
                    (Some(mut m), Some(s)) => {
                        m.data.iter_mut().zip(&s.data).for_each(|(a, &b)| *a += b);
                        Some(m)
                    }
                    _ => None,
                }
            }
            _ => unreachable!("cache does not belong to this block"),
        }
    }

    pub fn commit_running(&mut self, cache: &BlockCache<T>) {
        match (self, cache) {
            (Block::Plain(u), BlockCache::Plain(c)) => u.commit_running(c),
            (
                Block::Residual {
                    first,
                    second,
                    shortcut,
                },
                BlockCache::Residual {
                    first: ca,
                    second: cb,
                    shortcut: cs,
                    ..
                },
            ) => {
                first.commit_running(ca);
                second.commit_running(cb);
                if let (Some(s), Some(c)) = (shortcut, cs) {
                    s.commit_running(c);
                }
            }
            _ => {}
        }
    }

    pub fn units(&self) -> Vec<&ConvUnit<T>> {
        match self {
            Block::Plain(u) => vec![u],
            Block::Residual {
                first,
                second,
                shortcut,
            } => {
                let mut v = vec![first, second];
                if let Some(s) = shortcut {
                    v.push(s);
                }
                v
            }
            Block::MaxPool(_) => vec![],
        }
    }

    pub fn units_mut(&mut self) -> Vec<&mut ConvUnit<T>> {
        match self {
            Block::Plain(u) => vec![u],
            Block::Residual {
                first,
                second,
                shortcut,
            } => {
                let mut v = vec![first, second];
                if let Some(s) = shortcut {
                    v.push(s);
                }
                v
            }
            Block::MaxPool(_) => vec![],
        }
    }
}
