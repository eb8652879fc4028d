//! Inner-task adaptation: episodes drawn from the expanded support set, a
//! joint few-shot + rotation loss, and SGD steps on a private copy θ′.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{pool_batch, pool_batch_backward, Encoder, ParamState, StatsMode};
use crate::error::{Error, Result};
use crate::expand::ExpandedSupportSet;
use crate::heads::{Head, RotationHead};
use crate::optim::Sgd;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Indices into an [`ExpandedSupportSet`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnerEpisode {
    pub way: usize,
    pub shot: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    /// True when some query items repeat support items.
    pub reused_support: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InnerConfig {
    /// Adaptation steps α.
    pub alpha: usize,
    /// Rotation loss weight λ.
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    /// Inner query items per class (upper bound).
    pub queries_per_class: usize,
    pub rotation_hidden: usize,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            alpha: 4,
            lambda: 0.1,
            lr: 1e-3,
            momentum: 0.9,
            queries_per_class: 5,
            rotation_hidden: 256,
        }
    }
}

/// Stratified support of `shot` per class; queries are up to
/// `queries_per_class` of the remaining members. A class with no remaining
/// members reuses its support items as queries.
pub fn sample_inner_episode(
    set: &ExpandedSupportSet,
    shot: usize,
    queries_per_class: usize,
    rng: &mut StreamRng,
) -> Result<InnerEpisode> {
    let mut support = Vec::with_capacity(set.way * shot);
    let mut query = Vec::new();
    let mut reused = false;
    for (class, members) in set.by_class.iter().enumerate() {
        if members.len() < shot || shot == 0 {
            return Err(Error::InsufficientData {
                way: set.way,
                reason: format!(
                    "class {class} has {} expanded samples, need {shot}",
                    members.len()
                ),
            });
        }
        let mut order = members.clone();
        order.shuffle(rng);
        support.extend_from_slice(&order[..shot]);
        let rest = &order[shot..];
        if rest.is_empty() {
            reused = true;
            query.extend(order[..shot].iter().take(queries_per_class.max(1)));
        } else {
            query.extend(rest.iter().take(queries_per_class.max(1)));
        }
    }
    Ok(InnerEpisode {
        way: set.way,
        shot,
        support,
        query,
        reused_support: reused,
    })
}

/// Loss parts and gradients of one inner evaluation.
#[derive(Clone, Debug)]
pub struct InnerLoss {
    pub td: f64,
    pub rot: f64,
    pub total: f64,
    /// Gradient of `total` for encoder and head parameters.
    pub grads: ParamState,
    /// Gradient of `total` for rotation-head parameters.
    pub rot_grads: ParamState,
}

/// The model pieces an inner step needs.
#[derive(Clone, Copy)]
pub struct InnerModel<'a> {
    pub encoder: &'a Encoder,
    pub head: &'a Head,
    pub rotation: &'a RotationHead,
    pub buffers: &'a ParamState,
}

/// `Loss_TD + λ · Loss_rot` on one inner episode, with running statistics frozen.
pub fn inner_loss(
    model: InnerModel<'_>,
    params: &ParamState,
    rot_params: &ParamState,
    set: &ExpandedSupportSet,
    episode: &InnerEpisode,
    lambda: f64,
) -> Result<InnerLoss> {
    let ns = episode.support.len();
    let idx = episode.support.iter().chain(&episode.query);
    let input = model
        .encoder
        .batch_pixels(idx.map(|&i| &set.samples[i].image))?;
    let (maps, tape) = model
        .encoder
        .forward(params, StatsMode::Frozen(model.buffers), &input)?;
    let total_items = maps.shape()[0];
    let (h, w) = (maps.shape()[2], maps.shape()[3]);
    let s_maps = maps.slice_items(0, ns);
    let q_maps = maps.slice_items(ns, total_items);
    let s_labels: Vec<usize> = episode
        .support
        .iter()
        .map(|&i| set.samples[i].class_label)
        .collect();
    let q_labels: Vec<usize> = episode
        .query
        .iter()
        .map(|&i| set.samples[i].class_label)
        .collect();
    let r_labels: Vec<usize> = episode
        .support
        .iter()
        .map(|&i| set.samples[i].rotation_label)
        .collect();

    let head_loss = model
        .head
        .loss(params, &s_maps, &s_labels, &q_maps, &q_labels, episode.way)?;
    let s_emb = pool_batch(&s_maps);
    let (rot, d_emb, mut rot_grads) = model.rotation.loss(rot_params, &s_emb, &r_labels)?;
    let total = head_loss.loss + lambda * rot;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            stage: "inner loss",
            value: total,
        });
    }

    let mut d_support = head_loss.d_support;
    let mut d_rot = pool_batch_backward(&d_emb, h, w);
    d_rot.scale(lambda);
    d_support.add_assign(&d_rot);
    let d_maps = Tensor::concat(&[&d_support, &head_loss.d_query])?;
    let mut grads = params.zeros_like();
    model.encoder.backward(params, &tape, &d_maps, &mut grads)?;
    grads.accumulate(&head_loss.param_grads)?;
    for (_, g) in rot_grads.iter_mut() {
        g.scale(lambda);
    }
    Ok(InnerLoss {
        td: head_loss.loss,
        rot,
        total,
        grads,
        rot_grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerStepLog {
    pub step: usize,
    pub td: f64,
    pub rot: f64,
    pub total: f64,
    pub reused_support: bool,
}

#[derive(Clone, Debug)]
pub struct Adapted {
    /// θ′ after α steps.
    pub params: ParamState,
    pub rot_params: ParamState,
    pub trace: Vec<InnerStepLog>,
}

/// Runs α inner steps on a clone of `outer`, each on a freshly sampled inner
/// episode. The rotation head is initialized from `rng` on every call.
pub fn adapt(
    model: InnerModel<'_>,
    outer: &ParamState,
    set: &ExpandedSupportSet,
    shot: usize,
    config: &InnerConfig,
    rng: &mut StreamRng,
) -> Result<Adapted> {
    let mut params = outer.clone();
    let mut rot_params = model.rotation.init_params(rng);
    let mut trace = Vec::with_capacity(config.alpha);
    if config.alpha == 0 {
        return Ok(Adapted {
            params,
            rot_params,
            trace,
        });
    }
    let mut opt = Sgd::new(&params, config.lr, config.momentum);
    let mut rot_opt = Sgd::new(&rot_params, config.lr, config.momentum);
    for step in 0..config.alpha {
        let ep = sample_inner_episode(set, shot, config.queries_per_class, rng)?;
        let l = inner_loss(model, &params, &rot_params, set, &ep, config.lambda)?;
        if !l.grads.is_finite() || !l.rot_grads.is_finite() {
            return Err(Error::NonFinite {
                stage: "inner gradient",
                value: f64::NAN,
            });
        }
        opt.step(&mut params, &l.grads)?;
        rot_opt.step(&mut rot_params, &l.rot_grads)?;
        trace.push(InnerStepLog {
            step,
            td: l.td,
            rot: l.rot,
            total: l.total,
            reused_support: ep.reused_support,
        });
    }
    Ok(Adapted {
        params,
        rot_params,
        trace,
    })
}
