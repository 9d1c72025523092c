//! The 3D encoder-decoder segmentation network.
//!
//! Each resolution level holds `blocks_per_level` blocks of
//! conv 3³ → instance norm → ReLU. Levels are linked by a strided 2³
//! convolution on the way down and a transposed 2³ convolution on the way
//! up; decoder levels concatenate `[upsampled, skip]` along channels. A 1³
//! convolution maps the top decoder level to one logit channel.
//!
//! Block convolutions carry no bias because the following instance norm
//! removes any per-channel offset.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::kernels::{self, NormCache};
use super::loss;
use super::real::Real;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::types::LabelMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegNetConfig {
    pub in_channels: usize,
    /// Channels per resolution level, finest first.
    pub channels: Vec<usize>,
    pub blocks_per_level: usize,
    pub norm_eps: f64,
    pub threshold: f32,
}

impl SegNetConfig {
    pub fn paper() -> Self {
        SegNetConfig {
            in_channels: 2,
            channels: vec![32, 64, 128, 256, 512],
            blocks_per_level: 2,
            norm_eps: 1e-5,
            threshold: 0.5,
        }
    }

    pub fn desk() -> Self {
        SegNetConfig { channels: vec![8, 16, 32, 64, 128], ..Self::paper() }
    }

    pub fn n_scales(&self) -> usize {
        self.channels.len()
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.n_scales() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Invalid("in_channels must be >= 1".into()));
        }
        if self.channels.is_empty() || self.channels[0] == 0 {
            return Err(Error::Invalid(format!("invalid channel list {:?}", self.channels)));
        }
        if self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid(format!(
                "channel list must be strictly increasing, got {:?}",
                self.channels
            )));
        }
        if self.blocks_per_level == 0 {
            return Err(Error::Invalid("blocks_per_level must be >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Invalid(format!("threshold {} not in (0,1)", self.threshold)));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Invalid("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Ordered `(name, shape)` list of every parameter tensor.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.channels;
        let mut out = Vec::new();
        let block = |out: &mut Vec<(String, Vec<usize>)>, pre: &str, ci: usize, co: usize| {
            out.push((format!("{pre}.conv.weight"), vec![co, ci, 3, 3, 3]));
            out.push((format!("{pre}.norm.weight"), vec![co]));
            out.push((format!("{pre}.norm.bias"), vec![co]));
        };
        for l in 0..c.len() {
            if l > 0 {
                out.push((format!("enc{l}.down.weight"), vec![c[l], c[l - 1], 2, 2, 2]));
                out.push((format!("enc{l}.down.bias"), vec![c[l]]));
            }
            for b in 0..self.blocks_per_level {
                let ci = match (l, b) {
                    (0, 0) => self.in_channels,
                    _ => c[l],
                };
                block(&mut out, &format!("enc{l}.block{b}"), ci, c[l]);
            }
        }
        for l in (0..c.len() - 1).rev() {
            out.push((format!("dec{l}.up.weight"), vec![c[l + 1], c[l], 2, 2, 2]));
            out.push((format!("dec{l}.up.bias"), vec![c[l]]));
            for b in 0..self.blocks_per_level {
                let ci = if b == 0 { 2 * c[l] } else { c[l] };
                block(&mut out, &format!("dec{l}.block{b}"), ci, c[l]);
            }
        }
        out.push(("head.weight".into(), vec![1, c[0], 1, 1, 1]));
        out.push(("head.bias".into(), vec![1]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Gradients aligned with [`SegNet::params`].
pub type Grads<T> = Vec<Vec<T>>;

#[derive(Clone, Debug)]
pub struct SegNet<T = f32> {
    config: SegNetConfig,
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

struct BlockCache<T> {
    input: Vec<T>,
    ci: usize,
    norm: NormCache<T>,
}

struct LevelCache<T> {
    dims: [usize; 3],
    /// Input of the down convolution (enc levels ≥ 1).
    down_in: Option<Vec<T>>,
    blocks: Vec<BlockCache<T>>,
}

/// Everything the backward pass needs for one batch item.
pub struct ItemCache<T> {
    enc: Vec<LevelCache<T>>,
    /// Indexed by level; the up convolution input is the output of level l+1.
    dec: Vec<Option<LevelCache<T>>>,
    up_in: Vec<Option<Vec<T>>>,
    head_in: Vec<T>,
}

fn fan_in_std(shape: &[usize], transposed: bool) -> f64 {
    let k: usize = shape[2..].iter().product();
    let fan = if transposed { shape[0] } else { shape[1] } * k;
    (2.0 / fan as f64).sqrt()
}

impl<T: Real> SegNet<T> {
    /// He-initialized network. Each tensor draws from its own seed stream.
    pub fn build(config: SegNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with("norm.weight") {
                    vec![T::ONE; n]
                } else if name.ends_with("weight") {
                    let std = fan_in_std(&shape, name.contains(".up."));
                    let dist = Normal::new(0.0, std).expect("finite std");
                    let mut r = rng::stream(seed, &["segnet", &name]);
                    (0..n).map(|_| T::from_f64(dist.sample(&mut r))).collect()
                } else {
                    vec![T::ZERO; n]
                };
                Param { name, shape, data }
            })
            .collect();
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: SegNetConfig, params: Vec<Param<T>>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        SegNet { config, params, index }
    }

    /// Rebuilds a network from named tensors, checking names and shapes.
    pub fn from_params(config: SegNetConfig, tensors: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<Self> {
        config.validate()?;
        let mut by_name: HashMap<String, (Vec<usize>, Vec<T>)> =
            tensors.into_iter().map(|(n, s, d)| (n, (s, d))).collect();
        let mut params = Vec::new();
        for (name, shape) in config.param_shapes() {
            let (s, d) = by_name
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if s != shape || d.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {s:?} does not match architecture {shape:?}"
                )));
            }
            params.push(Param { name, shape, data: d });
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(Self::assemble(config, params))
    }

    /// Converts the element type (f32 ↔ f64).
    pub fn cast<U: Real>(&self) -> SegNet<U> {
        SegNet::assemble(
            self.config.clone(),
            self.params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        )
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.params.iter().map(|p| vec![T::ZERO; p.data.len()]).collect()
    }

    fn idx(&self, name: &str) -> usize {
        self.index[name]
    }

    fn p(&self, name: &str) -> &[T] {
        &self.params[self.idx(name)].data
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected (batch, {}, D, H, W), got {shape:?}",
                self.config.in_channels
            )));
        }
        let k = self.config.divisor();
        if shape[2..].iter().any(|&d| d == 0 || d % k != 0) {
            return Err(Error::Shape(format!(
                "spatial dims {:?} must be positive multiples of {k} (2^(n_scales-1))",
                &shape[2..]
            )));
        }
        Ok(())
    }

    fn run_block(&self, pre: &str, x: Vec<T>, ci: usize, co: usize, dims: [usize; 3], keep: bool) -> (Vec<T>, Option<BlockCache<T>>) {
        let v: usize = dims.iter().product();
        let y = kernels::conv3_forward(&x, ci, dims, self.p(&format!("{pre}.conv.weight")), None, co);
        let norm = kernels::instnorm_relu_forward(
            &y,
            co,
            v,
            self.p(&format!("{pre}.norm.weight")),
            self.p(&format!("{pre}.norm.bias")),
            self.config.norm_eps,
        );
        if keep {
            let out = norm.out.clone();
            (out, Some(BlockCache { input: x, ci, norm }))
        } else {
            (norm.out, None)
        }
    }

    /// Logits for one item `(in_channels, D, H, W)`, plus the observed
    /// `(channels, D, H, W)` of every encoder level's output.
    fn forward_item(&self, x: &[T], dims: [usize; 3], keep: bool) -> (Vec<T>, Option<ItemCache<T>>, Vec<[usize; 4]>) {
        let c = &self.config.channels;
        let nl = c.len();
        let nb = self.config.blocks_per_level;
        let mut enc_caches = Vec::new();
        let mut trace = Vec::with_capacity(nl);
        let mut skips: Vec<Vec<T>> = Vec::new();
        let mut h = x.to_vec();
        let mut d = dims;
        for l in 0..nl {
            let mut lc = LevelCache { dims: d, down_in: None, blocks: Vec::new() };
            let mut ci = if l == 0 { self.config.in_channels } else { c[l - 1] };
            if l > 0 {
                let y = kernels::down_forward(
                    &h,
                    ci,
                    d,
                    self.p(&format!("enc{l}.down.weight")),
                    self.p(&format!("enc{l}.down.bias")),
                    c[l],
                );
                d = [d[0] / 2, d[1] / 2, d[2] / 2];
                lc.dims = d;
                if keep {
                    lc.down_in = Some(std::mem::replace(&mut h, y));
                } else {
                    h = y;
                }
                ci = c[l];
            }
            for b in 0..nb {
                let (y, bc) = self.run_block(&format!("enc{l}.block{b}"), h, ci, c[l], d, keep);
                h = y;
                ci = c[l];
                lc.blocks.extend(bc);
            }
            debug_assert_eq!(h.len(), c[l] * d.iter().product::<usize>());
            trace.push([c[l], d[0], d[1], d[2]]);
            if l + 1 < nl {
                skips.push(h.clone());
            }
            enc_caches.push(lc);
        }
        let mut dec_caches: Vec<Option<LevelCache<T>>> = (0..nl).map(|_| None).collect();
        let mut up_in: Vec<Option<Vec<T>>> = (0..nl).map(|_| None).collect();
        for l in (0..nl - 1).rev() {
            let coarse = d;
            d = [d[0] * 2, d[1] * 2, d[2] * 2];
            let v: usize = d.iter().product();
            let up = kernels::up_forward(
                &h,
                c[l + 1],
                coarse,
                self.p(&format!("dec{l}.up.weight")),
                self.p(&format!("dec{l}.up.bias")),
                c[l],
            );
            if keep {
                up_in[l] = Some(std::mem::take(&mut h));
            }
            let skip = skips.pop().expect("one skip per level");
            let mut cat = up;
            cat.extend_from_slice(&skip);
            debug_assert_eq!(cat.len(), 2 * c[l] * v);
            let mut lc = LevelCache { dims: d, down_in: None, blocks: Vec::new() };
            h = cat;
            let mut ci = 2 * c[l];
            for b in 0..nb {
                let (y, bc) = self.run_block(&format!("dec{l}.block{b}"), h, ci, c[l], d, keep);
                h = y;
                ci = c[l];
                lc.blocks.extend(bc);
            }
            dec_caches[l] = Some(lc);
        }
        let v: usize = dims.iter().product();
        let head_w = self.p("head.weight");
        let logits = kernels::head_forward(&h, c[0], v, head_w, self.p("head.bias")[0]);
        let cache = keep.then(|| ItemCache { enc: enc_caches, dec: dec_caches, up_in, head_in: h });
        (logits, cache, trace)
    }

    /// Logits for a `(batch, in_channels, D, H, W)` input; shape
    /// `(batch, 1, D, H, W)`.
    pub fn forward_logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_traced(input)?.0)
    }

    /// [`SegNet::forward_logits`] that also reports the encoder feature
    /// shapes `(channels, D, H, W)` seen on the first item; the last entry is
    /// the bottleneck.
    pub fn forward_traced(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Vec<[usize; 4]>)> {
        self.check_input(input.shape())?;
        let s = input.shape();
        let dims = [s[2], s[3], s[4]];
        let mut out = Vec::with_capacity(s[0] * dims.iter().product::<usize>());
        let mut trace = Vec::new();
        for b in 0..s[0] {
            let (z, _, t) = self.forward_item(input.slab(b), dims, false);
            out.extend(z);
            if b == 0 {
                trace = t;
            }
        }
        Ok((Tensor::new(vec![s[0], 1, s[2], s[3], s[4]], out)?, trace))
    }

    /// Sigmoid probabilities, kept strictly inside (0, 1).
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let lo = T::from_f64(loss::P_MIN);
        let hi = T::from_f64(loss::P_MAX);
        Ok(self
            .forward_logits(input)?
            .map(|z| kernels::sigmoid(z).max(lo).min(hi)))
    }

    /// Forward pass retaining activations for [`SegNet::backward`].
    pub fn forward_train(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Vec<ItemCache<T>>)> {
        self.check_input(input.shape())?;
        let s = input.shape();
        let dims = [s[2], s[3], s[4]];
        let mut out = Vec::new();
        let mut caches = Vec::new();
        for b in 0..s[0] {
            let (z, c, _) = self.forward_item(input.slab(b), dims, true);
            out.extend(z);
            caches.push(c.expect("cache requested"));
        }
        Ok((Tensor::new(vec![s[0], 1, s[2], s[3], s[4]], out)?, caches))
    }

    fn block_backward(
        &self,
        pre: &str,
        bc: &BlockCache<T>,
        co: usize,
        dims: [usize; 3],
        dy: &[T],
        g: &mut Grads<T>,
        need_dx: bool,
    ) -> Vec<T> {
        let v: usize = dims.iter().product();
        let (iw, inw, inb) = (
            self.idx(&format!("{pre}.conv.weight")),
            self.idx(&format!("{pre}.norm.weight")),
            self.idx(&format!("{pre}.norm.bias")),
        );
        let (dgamma, dbeta) = two_mut(g, inw, inb);
        let dconv = kernels::instnorm_relu_backward(&bc.norm, dy, co, v, &self.params[inw].data, dgamma, dbeta);
        kernels::conv3_backward_weights(&bc.input, bc.ci, dims, &dconv, co, &mut g[iw], None);
        if !need_dx {
            return Vec::new();
        }
        kernels::conv3_backward_data(&dconv, co, dims, &self.params[iw].data, bc.ci)
    }

    /// Parameter gradients given d(loss)/d(logits) for each item.
    pub fn backward(&self, caches: &[ItemCache<T>], d_logits: &[T]) -> Grads<T> {
        let mut g = self.zero_grads();
        let c = &self.config.channels;
        let nl = c.len();
        let per = d_logits.len() / caches.len().max(1);
        for (b, cache) in caches.iter().enumerate() {
            let dz = &d_logits[b * per..(b + 1) * per];
            let v = per;
            let (hw, hb) = (self.idx("head.weight"), self.idx("head.bias"));
            let (dw, db) = two_mut(&mut g, hw, hb);
            let mut dh = kernels::head_backward(&cache.head_in, c[0], v, &self.params[hw].data, dz, dw, &mut db[0]);
            let mut dskips: Vec<Vec<T>> = vec![Vec::new(); nl];
            for l in 0..nl - 1 {
                let lc = cache.dec[l].as_ref().expect("decoder cache");
                for (bi, bc) in lc.blocks.iter().enumerate().rev() {
                    dh = self.block_backward(&format!("dec{l}.block{bi}"), bc, c[l], lc.dims, &dh, &mut g, true);
                }
                let vl: usize = lc.dims.iter().product();
                dskips[l] = dh.split_off(c[l] * vl);
                let coarse = [lc.dims[0] / 2, lc.dims[1] / 2, lc.dims[2] / 2];
                let (uw, ub) = (self.idx(&format!("dec{l}.up.weight")), self.idx(&format!("dec{l}.up.bias")));
                let (dw, db) = two_mut(&mut g, uw, ub);
                dh = kernels::up_backward(
                    cache.up_in[l].as_ref().expect("up input"),
                    c[l + 1],
                    coarse,
                    &self.params[uw].data,
                    c[l],
                    &dh,
                    dw,
                    db,
                );
            }
            for l in (0..nl).rev() {
                let lc = &cache.enc[l];
                if l + 1 < nl {
                    for (a, s) in dh.iter_mut().zip(&dskips[l]) {
                        *a += *s;
                    }
                }
                for (bi, bc) in lc.blocks.iter().enumerate().rev() {
                    let need_dx = l > 0 || bi > 0;
                    dh = self.block_backward(&format!("enc{l}.block{bi}"), bc, c[l], lc.dims, &dh, &mut g, need_dx);
                }
                if l > 0 {
                    let fine = [lc.dims[0] * 2, lc.dims[1] * 2, lc.dims[2] * 2];
                    let (dwi, dbi) = (self.idx(&format!("enc{l}.down.weight")), self.idx(&format!("enc{l}.down.bias")));
                    let (dw, db) = two_mut(&mut g, dwi, dbi);
                    dh = kernels::down_backward(
                        lc.down_in.as_ref().expect("down input"),
                        c[l - 1],
                        fine,
                        &self.params[dwi].data,
                        c[l],
                        &dh,
                        dw,
                        db,
                    );
                }
            }
        }
        g
    }

    /// Compound loss and its parameter gradients for a batch.
    pub fn loss_and_grads(&self, input: &Tensor<T>, labels: &[T]) -> Result<(T, Grads<T>)> {
        let (z, caches) = self.forward_train(input)?;
        if labels.len() != z.len() {
            return Err(Error::Shape(format!(
                "labels hold {} voxels, output {}",
                labels.len(),
                z.len()
            )));
        }
        let (l, dz) = loss::loss_and_logit_grad(z.data(), labels);
        Ok((l, self.backward(&caches, &dz)))
    }
}

fn two_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

/// Thresholds probabilities: 1 where `p >= tau`.
pub fn predict_binary(probs: &[f32], dims: [usize; 3], tau: f32) -> Result<LabelMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Invalid(format!("threshold {tau} not in (0,1)")));
    }
    LabelMask::from_data(dims, probs.iter().map(|&p| u8::from(p >= tau)).collect())
}
