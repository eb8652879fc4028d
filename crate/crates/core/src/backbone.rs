//! Convolutional encoder producing spatial feature maps and pooled embeddings.
//!
//! Each block is `conv3x3 → channel norm → ReLU → 2×2 max pool`. The channel
//! norm uses running statistics only (never per-batch statistics in the
//! forward value), so a single image encodes identically alone or in a batch.
//! Statistics move only in [`StatsMode::Update`] passes; inner adaptation runs
//! with them frozen.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Image, LabeledImage, CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{maxpool2_backward, maxpool2_forward, Conv3x3};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Ordered collection of named tensors. Holds trainable parameters
/// (θ, θ′) as well as non-trainable buffers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamState {
    tensors: IndexMap<String, Tensor>,
}

impl ParamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_owned()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_owned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Overwrites every tensor of `self` from `source`. Fails, leaving `self`
    /// untouched, if any name is missing or any shape differs.
    pub fn load_from(&mut self, source: &ParamState) -> Result<()> {
        for (name, t) in &self.tensors {
            let s = source.get(name)?;
            if s.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "`{name}`: expected {:?}, got {:?}",
                    t.shape(),
                    s.shape()
                )));
            }
        }
        for (name, t) in self.tensors.iter_mut() {
            t.data_mut().copy_from_slice(source.tensors[name].data());
        }
        Ok(())
    }

    /// Copies the subset of tensors whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamState {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Adds `other` into `self` where names match (used to merge gradient parts).
    pub fn accumulate(&mut self, other: &ParamState) -> Result<()> {
        for (name, g) in &other.tensors {
            self.get_mut(name)?.add_assign(g);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Largest absolute element-wise difference; `None` if layouts differ.
    pub fn max_abs_diff(&self, other: &ParamState) -> Option<f64> {
        if self.tensors.len() != other.tensors.len() {
            return None;
        }
        let mut m = 0.0f64;
        for (name, t) in &self.tensors {
            let o = other.tensors.get(name)?;
            if o.shape() != t.shape() {
                return None;
            }
            for (a, b) in t.data().iter().zip(o.data()) {
                m = m.max((a - b).abs());
            }
        }
        Some(m)
    }

    /// Bitwise equality of every element.
    pub fn bitwise_eq(&self, other: &ParamState) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().all(|(k, t)| {
                other.tensors.get(k).is_some_and(|o| {
                    o.shape() == t.shape()
                        && t.data()
                            .iter()
                            .zip(o.data())
                            .all(|(a, b)| a.to_bits() == b.to_bits())
                })
            })
    }
}

/// Deep copy of a parameter state.
pub fn clone_params(params: &ParamState) -> ParamState {
    params.clone()
}

/// Spatial features of one image: D × h × w.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[1] < 1 || s[2] < 1 {
            return Err(Error::Shape(format!("feature map shape {s:?}")));
        }
        Ok(Self { values })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    #[inline]
    pub fn at(&self, d: usize, y: usize, x: usize) -> f64 {
        self.values.data()[(d * self.height() + y) * self.width() + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
}

/// Global average pooling over the spatial positions of each channel.
pub fn pool(map: &FeatureMap) -> Embedding {
    let hw = map.height() * map.width();
    Embedding {
        values: map
            .values
            .data()
            .chunks_exact(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect(),
    }
}

/// Pools a batch B × D × h × w into B × D.
pub fn pool_batch(maps: &Tensor) -> Tensor {
    let s = maps.shape();
    let (b, d, hw) = (s[0], s[1], s[2] * s[3]);
    let data = maps
        .data()
        .chunks_exact(hw)
        .map(|c| c.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::from_vec(&[b, d], data).expect("pool shape")
}

/// Gradient of [`pool_batch`]: spreads each entry evenly over its plane.
pub fn pool_batch_backward(d_emb: &Tensor, h: usize, w: usize) -> Tensor {
    let s = d_emb.shape();
    let hw = h * w;
    let mut out = Vec::with_capacity(d_emb.len() * hw);
    for g in d_emb.data() {
        out.extend(std::iter::repeat_n(g / hw as f64, hw));
    }
    Tensor::from_vec(&[s[0], s[1], h, w], out).expect("pool grad shape")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub width: usize,
    pub blocks: usize,
    pub side: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: CHANNELS,
            width: 64,
            blocks: 4,
            side: 84,
        }
    }
}

impl EncoderConfig {
    /// Spatial side of the output map.
    pub fn out_side(&self) -> usize {
        (0..self.blocks).fold(self.side, |s, _| s / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.blocks == 0 || self.in_channels == 0 {
            return Err(Error::Config(format!("degenerate encoder {self:?}")));
        }
        if self.out_side() < 2 {
            return Err(Error::Config(format!(
                "side {} with {} blocks leaves a {}×{} map; CAM needs at least 2×2",
                self.side,
                self.blocks,
                self.out_side(),
                self.out_side()
            )));
        }
        Ok(())
    }
}

const INPUT_EPS: f64 = 1e-4;

/// Shifts and scales each `hw`-sized plane to zero mean and unit variance
/// (`INPUT_EPS` added to the variance). Applied to every image before encoding.
pub fn standardize_planes(chw: &mut [f64], hw: usize) {
    for plane in chw.chunks_mut(hw) {
        let n = plane.len() as f64;
        let mean = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + INPUT_EPS).sqrt();
        plane.iter_mut().for_each(|x| *x = (*x - mean) * inv);
    }
}

/// How the channel-norm running statistics are treated during a forward pass.
pub enum StatsMode<'a> {
    Frozen(&'a ParamState),
    /// Blend batch statistics into the buffers (EMA with this momentum) before
    /// normalizing. The very first update copies the batch statistics.
    Update(&'a mut ParamState, f64),
}

impl StatsMode<'_> {
    fn buffers(&self) -> &ParamState {
        match self {
            StatsMode::Frozen(b) => b,
            StatsMode::Update(b, _) => b,
        }
    }
}

struct BlockTape {
    input: Vec<f64>,
    xhat: Vec<f64>,
    argmax: Vec<u32>,
    inv_std: Vec<f64>,
    side_in: usize,
}

/// Activations recorded by [`Encoder::forward`] for the backward pass.
pub struct EncoderTape {
    blocks: Vec<BlockTape>,
    batch: usize,
}

#[derive(Clone, Debug)]
struct BlockNames {
    weight: String,
    bias: String,
    gamma: String,
    beta: String,
    mean: String,
    var: String,
}

const TRACKED: &str = "encoder.norm.tracked";

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    names: Vec<BlockNames>,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let names = (0..config.blocks)
            .map(|i| BlockNames {
                weight: format!("encoder.block{i}.conv.weight"),
                bias: format!("encoder.block{i}.conv.bias"),
                gamma: format!("encoder.block{i}.norm.weight"),
                beta: format!("encoder.block{i}.norm.bias"),
                mean: format!("encoder.block{i}.norm.running_mean"),
                var: format!("encoder.block{i}.norm.running_var"),
            })
            .collect();
        Ok(Self { config, names })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn out_channels(&self) -> usize {
        self.config.width
    }

    fn block_in(&self, i: usize) -> usize {
        if i == 0 {
            self.config.in_channels
        } else {
            self.config.width
        }
    }

    /// Fan-in scaled (He) normal conv weights, zero biases, unit norm scale.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamState {
        let mut p = ParamState::new();
        let w = self.config.width;
        for (i, n) in self.names.iter().enumerate() {
            let c_in = self.block_in(i);
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("std > 0");
            let data = (0..w * c_in * 9).map(|_| normal.sample(rng)).collect();
            p.insert(
                &n.weight,
                Tensor::from_vec(&[w, c_in, 3, 3], data).expect("shape"),
            );
            p.insert(&n.bias, Tensor::zeros(&[w]));
            p.insert(
                &n.gamma,
                Tensor::from_vec(&[w], vec![1.0; w]).expect("shape"),
            );
            p.insert(&n.beta, Tensor::zeros(&[w]));
        }
        p
    }

    /// Running statistics: mean 0, variance 1, zero updates seen.
    pub fn init_buffers(&self) -> ParamState {
        let mut b = ParamState::new();
        let w = self.config.width;
        for n in &self.names {
            b.insert(&n.mean, Tensor::zeros(&[w]));
            b.insert(&n.var, Tensor::from_vec(&[w], vec![1.0; w]).expect("shape"));
        }
        b.insert(TRACKED, Tensor::zeros(&[1]));
        b
    }

    /// Stacks images into a B × C × side × side tensor, each channel
    /// standardized per image.
    pub fn batch_images<'a>(
        &self,
        images: impl IntoIterator<Item = &'a LabeledImage>,
    ) -> Result<Tensor> {
        self.batch_pixels(images.into_iter().map(|l| &l.image))
    }

    pub fn batch_pixels<'a>(&self, images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
        let side = self.config.side;
        let mut data = Vec::new();
        let mut n = 0;
        for img in images {
            if img.side() != side {
                return Err(Error::Shape(format!(
                    "image side {} does not match encoder side {side}",
                    img.side()
                )));
            }
            let mut chw = img.to_chw();
            standardize_planes(&mut chw, side * side);
            data.extend(chw);
            n += 1;
        }
        Tensor::from_vec(&[n, self.config.in_channels, side, side], data)
    }

    /// Forward pass over a batch B × C × side × side → B × width × h × w.
    pub fn forward(
        &self,
        params: &ParamState,
        mut stats: StatsMode<'_>,
        input: &Tensor,
    ) -> Result<(Tensor, EncoderTape)> {
        let s = input.shape();
        if s.len() != 4
            || s[1] != self.config.in_channels
            || s[2] != self.config.side
            || s[3] != self.config.side
        {
            return Err(Error::Shape(format!(
                "encoder input {:?}, expected [B, {}, {}, {}]",
                s, self.config.in_channels, self.config.side, self.config.side
            )));
        }
        let batch = s[0];
        let mut x = input.data().to_vec();
        let mut side = self.config.side;
        let mut tapes = Vec::with_capacity(self.config.blocks);

        for (i, n) in self.names.iter().enumerate() {
            let c_out = self.config.width;
            let conv = Conv3x3 {
                c_in: self.block_in(i),
                c_out,
                h: side,
                w: side,
            };
            let mut y = conv.forward(
                &x,
                params.get(&n.weight)?.data(),
                params.get(&n.bias)?.data(),
                batch,
            );

            let hw = side * side;
            if let StatsMode::Update(buffers, momentum) = &mut stats {
                let count = (batch * hw) as f64;
                let mut mean = vec![0.0; c_out];
                let mut var = vec![0.0; c_out];
                for b in 0..batch {
                    for c in 0..c_out {
                        let plane = &y[(b * c_out + c) * hw..][..hw];
                        mean[c] += plane.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for b in 0..batch {
                    for c in 0..c_out {
                        let plane = &y[(b * c_out + c) * hw..][..hw];
                        var[c] += plane.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                let first = buffers.get(TRACKED)?.data()[0] == 0.0;
                let m = if first { 1.0 } else { *momentum };
                for (dst, src) in buffers.get_mut(&n.mean)?.data_mut().iter_mut().zip(&mean) {
                    *dst = (1.0 - m) * *dst + m * src;
                }
                for (dst, src) in buffers.get_mut(&n.var)?.data_mut().iter_mut().zip(&var) {
                    *dst = (1.0 - m) * *dst + m * src;
                }
            }

            let buffers = stats.buffers();
            let mean = buffers.get(&n.mean)?.data();
            let inv_std: Vec<f64> = buffers
                .get(&n.var)?
                .data()
                .iter()
                .map(|v| 1.0 / (v + NORM_EPS).sqrt())
                .collect();
            let gamma = params.get(&n.gamma)?.data();
            let beta = params.get(&n.beta)?.data();
            let mut xhat = vec![0.0; y.len()];
            for b in 0..batch {
                for c in 0..c_out {
                    let off = (b * c_out + c) * hw;
                    for (yv, xh) in y[off..off + hw].iter_mut().zip(&mut xhat[off..off + hw]) {
                        *xh = (*yv - mean[c]) * inv_std[c];
                        *yv = (*xh * gamma[c] + beta[c]).max(0.0);
                    }
                }
            }
            let (pooled, argmax) = maxpool2_forward(&y, batch * c_out, side, side);
            tapes.push(BlockTape {
                input: x,
                xhat,
                argmax,
                inv_std,
                side_in: side,
            });
            x = pooled;
            side /= 2;
        }

        if let StatsMode::Update(buffers, _) = &mut stats {
            buffers.get_mut(TRACKED)?.data_mut()[0] += 1.0;
        }
        let out = Tensor::from_vec(&[batch, self.config.width, side, side], x)?;
        Ok((
            out,
            EncoderTape {
                blocks: tapes,
                batch,
            },
        ))
    }

    /// Accumulates parameter gradients for `d_maps` (same shape as the forward output).
    pub fn backward(
        &self,
        params: &ParamState,
        tape: &EncoderTape,
        d_maps: &Tensor,
        grads: &mut ParamState,
    ) -> Result<()> {
        let batch = tape.batch;
        let mut d = d_maps.data().to_vec();
        for (i, (n, bt)) in self.names.iter().zip(&tape.blocks).enumerate().rev() {
            let c_out = self.config.width;
            let side = bt.side_in;
            let hw = side * side;
            let mut dy = maxpool2_backward(&d, &bt.argmax, batch * c_out, side, side);
            let gamma = params.get(&n.gamma)?.data().to_vec();
            let beta = params.get(&n.beta)?.data().to_vec();
            let mut dgamma = vec![0.0; c_out];
            let mut dbeta = vec![0.0; c_out];
            for b in 0..batch {
                for c in 0..c_out {
                    let off = (b * c_out + c) * hw;
                    for (g, xh) in dy[off..off + hw].iter_mut().zip(&bt.xhat[off..off + hw]) {
                        if xh * gamma[c] + beta[c] <= 0.0 {
                            *g = 0.0;
                            continue;
                        }
                        dgamma[c] += *g * xh;
                        dbeta[c] += *g;
                        *g *= gamma[c] * bt.inv_std[c];
                    }
                }
            }
            grads
                .get_mut(&n.gamma)?
                .data_mut()
                .iter_mut()
                .zip(&dgamma)
                .for_each(|(a, b)| *a += b);
            grads
                .get_mut(&n.beta)?
                .data_mut()
                .iter_mut()
                .zip(&dbeta)
                .for_each(|(a, b)| *a += b);

            let conv = Conv3x3 {
                c_in: self.block_in(i),
                c_out,
                h: side,
                w: side,
            };
            let weight = params.get(&n.weight)?.data().to_vec();
            let mut dw = grads.get(&n.weight)?.data().to_vec();
            let mut db = grads.get(&n.bias)?.data().to_vec();
            let dx = conv.backward(&bt.input, &weight, &dy, batch, &mut dw, &mut db, i > 0);
            grads.get_mut(&n.weight)?.data_mut().copy_from_slice(&dw);
            grads.get_mut(&n.bias)?.data_mut().copy_from_slice(&db);
            if let Some(dx) = dx {
                d = dx;
            }
        }
        Ok(())
    }

    /// Feature map of a single image.
    pub fn encode_map(
        &self,
        params: &ParamState,
        buffers: &ParamState,
        image: &LabeledImage,
    ) -> Result<FeatureMap> {
        let input = self.batch_images(std::iter::once(image))?;
        let (maps, _) = self.forward(params, StatsMode::Frozen(buffers), &input)?;
        let s = maps.shape()[1..].to_vec();
        FeatureMap::new(Tensor::from_vec(&s, maps.into_data())?)
    }

    /// Splits a batch of maps into per-image [`FeatureMap`]s.
    pub fn split_maps(maps: &Tensor) -> Vec<FeatureMap> {
        let shape = maps.shape()[1..].to_vec();
        (0..maps.shape()[0])
            .map(|i| FeatureMap {
                values: Tensor::from_vec(&shape, maps.item(i).to_vec()).expect("shape"),
            })
            .collect()
    }
}
