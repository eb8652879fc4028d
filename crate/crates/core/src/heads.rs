//! Metric few-shot heads and the rotation-prediction head.
//!
//! Every head consumes encoder maps (B × D × h × w) and returns the episode
//! loss together with gradients w.r.t. the support and query maps, so the
//! encoder backward pass is head-agnostic.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{pool_batch, pool_batch_backward, ParamState};
use crate::error::{Error, Result};
use crate::nn::{linear_backward, linear_forward, log_softmax, softmax, Conv3x3};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Proto,
    Matching,
    Relation,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proto" => Ok(HeadKind::Proto),
            "matching" => Ok(HeadKind::Matching),
            "relation" => Ok(HeadKind::Relation),
            other => Err(Error::Config(format!(
                "unknown head `{other}` (expected proto | matching | relation)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

const DIST_EPS: f64 = 1e-12;

impl Distance {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match self {
            Distance::SquaredEuclidean => sq,
            Distance::Euclidean => (sq + DIST_EPS).sqrt(),
        }
    }

    /// ∂d/∂a (∂d/∂b is its negation).
    fn grad_a(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        match self {
            Distance::SquaredEuclidean => a.iter().zip(b).map(|(x, y)| 2.0 * (x - y)).collect(),
            Distance::Euclidean => {
                let d = self.eval(a, b);
                a.iter().zip(b).map(|(x, y)| (x - y) / d).collect()
            }
        }
    }
}

/// Per-class mean embeddings `c_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub protos: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

/// Probability vector over the episode's classes for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub probs: Vec<f64>,
}

impl ClassScores {
    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0
    }
}

/// Mean embedding per class. `embeddings` is B × D.
pub fn prototypes(embeddings: &Tensor, labels: &[usize], way: usize) -> Result<PrototypeSet> {
    let d = embeddings.item_len();
    if labels.len() != embeddings.shape()[0] {
        return Err(Error::Shape(format!(
            "{} labels for {} embeddings",
            labels.len(),
            embeddings.shape()[0]
        )));
    }
    let mut protos = vec![vec![0.0; d]; way];
    let mut counts = vec![0usize; way];
    for (i, &l) in labels.iter().enumerate() {
        if l >= way {
            return Err(Error::Shape(format!("label {l} outside {way}-way episode")));
        }
        counts[l] += 1;
        for (p, v) in protos[l].iter_mut().zip(embeddings.item(i)) {
            *p += v;
        }
    }
    for (k, (p, &n)) in protos.iter_mut().zip(&counts).enumerate() {
        if n == 0 {
            return Err(Error::EmptyClass(k));
        }
        p.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(PrototypeSet { protos, counts })
}

/// Softmax over negative distances to each prototype.
pub fn classify(query: &[f64], protos: &PrototypeSet, distance: Distance) -> Result<ClassScores> {
    if protos
        .protos
        .first()
        .is_some_and(|p| p.len() != query.len())
    {
        return Err(Error::Shape(format!(
            "query dim {} vs prototype dim {}",
            query.len(),
            protos.protos[0].len()
        )));
    }
    let logits: Vec<f64> = protos
        .protos
        .iter()
        .map(|c| -distance.eval(query, c))
        .collect();
    Ok(ClassScores {
        probs: softmax(&logits),
    })
}

/// Mean over queries of `logsumexp_k(−d(q, c_k)) + d(q, c_label)`.
pub fn fewshot_nll(
    queries: &Tensor,
    labels: &[usize],
    protos: &PrototypeSet,
    distance: Distance,
) -> f64 {
    let m = labels.len();
    (0..m)
        .map(|i| {
            let q = queries.item(i);
            let neg: Vec<f64> = protos.protos.iter().map(|c| -distance.eval(q, c)).collect();
            let mx = neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + neg.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            lse + distance.eval(q, &protos.protos[labels[i]])
        })
        .sum::<f64>()
        / m as f64
}

/// Loss, accuracy and gradients of one head evaluation.
#[derive(Clone, Debug)]
pub struct HeadLoss {
    pub loss: f64,
    pub correct: usize,
    pub scores: Vec<ClassScores>,
    pub d_support: Tensor,
    pub d_query: Tensor,
    /// Gradients of head-owned parameters (empty for parameter-free heads).
    pub param_grads: ParamState,
}

impl HeadLoss {
    pub fn accuracy(&self) -> f64 {
        if self.scores.is_empty() {
            0.0
        } else {
            self.correct as f64 / self.scores.len() as f64
        }
    }
}

fn nll_from_log_probs(logp: &[f64], label: usize) -> f64 {
    -logp[label]
}

/// Prototype head on pooled embeddings (B × D), with gradients.
pub fn proto_loss(
    support: &Tensor,
    s_labels: &[usize],
    query: &Tensor,
    q_labels: &[usize],
    way: usize,
    distance: Distance,
) -> Result<(f64, usize, Vec<ClassScores>, Tensor, Tensor)> {
    let ps = prototypes(support, s_labels, way)?;
    let d = support.item_len();
    let m = q_labels.len();
    let mut loss = 0.0;
    let mut correct = 0;
    let mut scores = Vec::with_capacity(m);
    let mut d_query = Tensor::zeros(query.shape());
    let mut d_proto = vec![vec![0.0; d]; way];
    for (i, &y) in q_labels.iter().enumerate() {
        let q = query.item(i);
        let logits: Vec<f64> = ps.protos.iter().map(|c| -distance.eval(q, c)).collect();
        let logp = log_softmax(&logits);
        loss += nll_from_log_probs(&logp, y);
        let probs: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
        let cs = ClassScores { probs };
        if cs.argmax() == y {
            correct += 1;
        }
        let dq = d_query.item_mut(i);
        for k in 0..way {
            // ∂L/∂logit_k, logit_k = −d(q, c_k)
            let g = (cs.probs[k] - if k == y { 1.0 } else { 0.0 }) / m as f64;
            let ga = distance.grad_a(q, &ps.protos[k]);
            for j in 0..d {
                dq[j] -= g * ga[j];
                d_proto[k][j] += g * ga[j];
            }
        }
        scores.push(cs);
    }
    let mut d_support = Tensor::zeros(support.shape());
    for (i, &l) in s_labels.iter().enumerate() {
        let n = ps.counts[l] as f64;
        for (o, g) in d_support.item_mut(i).iter_mut().zip(&d_proto[l]) {
            *o = g / n;
        }
    }
    Ok((loss / m as f64, correct, scores, d_support, d_query))
}

const COS_EPS: f64 = 1e-8;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt() + COS_EPS
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Matching-network label distribution: softmax attention over cosine
/// similarities to each support sample, summed per class.
pub fn matching_scores(
    query: &[f64],
    support: &Tensor,
    s_labels: &[usize],
    way: usize,
) -> Result<ClassScores> {
    if support.item_len() != query.len() {
        return Err(Error::Shape(format!(
            "query dim {} vs support dim {}",
            query.len(),
            support.item_len()
        )));
    }
    let nq = norm(query);
    let cos: Vec<f64> = (0..s_labels.len())
        .map(|i| dot(query, support.item(i)) / (nq * norm(support.item(i))))
        .collect();
    let att = softmax(&cos);
    let mut probs = vec![0.0; way];
    for (a, &l) in att.iter().zip(s_labels) {
        probs[l] += a;
    }
    Ok(ClassScores { probs })
}

/// Matching head loss on pooled embeddings, with gradients.
pub fn matching_loss(
    support: &Tensor,
    s_labels: &[usize],
    query: &Tensor,
    q_labels: &[usize],
    way: usize,
) -> Result<(f64, usize, Vec<ClassScores>, Tensor, Tensor)> {
    let m = q_labels.len();
    let ns = s_labels.len();
    let d = support.item_len();
    let s_norm: Vec<f64> = (0..ns).map(|i| norm(support.item(i))).collect();
    let mut d_support = Tensor::zeros(support.shape());
    let mut d_query = Tensor::zeros(query.shape());
    let mut loss = 0.0;
    let mut correct = 0;
    let mut scores = Vec::with_capacity(m);
    for (qi, &y) in q_labels.iter().enumerate() {
        let q = query.item(qi);
        let nq = norm(q);
        let cos: Vec<f64> = (0..ns)
            .map(|i| dot(q, support.item(i)) / (nq * s_norm[i]))
            .collect();
        let att = softmax(&cos);
        let mut probs = vec![0.0; way];
        for (a, &l) in att.iter().zip(s_labels) {
            probs[l] += a;
        }
        let py = probs[y].max(1e-300);
        loss += -py.ln();
        let cs = ClassScores { probs };
        if cs.argmax() == y {
            correct += 1;
        }
        scores.push(cs);
        let dq = d_query.item_mut(qi);
        for i in 0..ns {
            // ∂L/∂cos_i = a_i − a_i·[y_i = y] / p_y
            let g = (att[i] - if s_labels[i] == y { att[i] / py } else { 0.0 }) / m as f64;
            if g == 0.0 {
                continue;
            }
            let s = support.item(i);
            let c = cos[i];
            let ds = d_support.item_mut(i);
            for j in 0..d {
                dq[j] += g * (s[j] / (nq * s_norm[i]) - c * q[j] / (nq * nq));
                ds[j] += g * (q[j] / (nq * s_norm[i]) - c * s[j] / (s_norm[i] * s_norm[i]));
            }
        }
    }
    Ok((loss / m as f64, correct, scores, d_support, d_query))
}

/// Relation module: `conv3x3(2D → R) → ReLU → GAP → fc(R → H) → ReLU → fc(H → 1)`
/// applied to each (query map, class-mean support map) pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationConfig {
    pub channels: usize,
    pub hidden: usize,
}

impl Default for RelationConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            hidden: 8,
        }
    }
}

pub mod relation_names {
    pub const CONV_W: &str = "relation.conv.weight";
    pub const CONV_B: &str = "relation.conv.bias";
    pub const FC1_W: &str = "relation.fc1.weight";
    pub const FC1_B: &str = "relation.fc1.bias";
    pub const FC2_W: &str = "relation.fc2.weight";
    pub const FC2_B: &str = "relation.fc2.bias";
}

impl RelationConfig {
    pub fn init_params<R: Rng>(&self, feature_dim: usize, rng: &mut R) -> ParamState {
        use relation_names::*;
        let mut p = ParamState::new();
        let he = |n_in: usize, n: usize, rng: &mut R| -> Vec<f64> {
            let normal = Normal::new(0.0, (2.0 / n_in as f64).sqrt()).expect("std");
            (0..n).map(|_| normal.sample(rng)).collect()
        };
        let (r, h) = (self.channels, self.hidden);
        let c_in = 2 * feature_dim;
        p.insert(
            CONV_W,
            Tensor::from_vec(&[r, c_in, 3, 3], he(c_in * 9, r * c_in * 9, rng)).expect("shape"),
        );
        p.insert(CONV_B, Tensor::zeros(&[r]));
        p.insert(
            FC1_W,
            Tensor::from_vec(&[h, r], he(r, h * r, rng)).expect("shape"),
        );
        p.insert(FC1_B, Tensor::zeros(&[h]));
        p.insert(
            FC2_W,
            Tensor::from_vec(&[1, h], he(h, h, rng)).expect("shape"),
        );
        p.insert(FC2_B, Tensor::zeros(&[1]));
        p
    }
}

/// Class-mean maps per class from support maps (B × D × h × w).
fn class_mean_maps(
    support: &Tensor,
    s_labels: &[usize],
    way: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let item = support.item_len();
    let mut shape = support.shape().to_vec();
    shape[0] = way;
    let mut out = Tensor::zeros(&shape);
    let mut counts = vec![0usize; way];
    for (i, &l) in s_labels.iter().enumerate() {
        counts[l] += 1;
        for (o, v) in out.item_mut(l).iter_mut().zip(support.item(i)) {
            *o += v;
        }
    }
    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::EmptyClass(k));
        }
        out.item_mut(k).iter_mut().for_each(|v| *v /= n as f64);
    }
    debug_assert_eq!(out.item_len(), item);
    Ok((out, counts))
}

struct RelationForward {
    logits: Vec<f64>,
    pairs: Vec<f64>,
    conv_out: Vec<f64>,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
}

fn relation_forward(
    params: &ParamState,
    query: &Tensor,
    means: &Tensor,
) -> Result<(RelationForward, Conv3x3)> {
    use relation_names::*;
    let s = query.shape();
    let (nq, d, h, w) = (s[0], s[1], s[2], s[3]);
    let way = means.shape()[0];
    if means.shape()[1..] != s[1..] {
        return Err(Error::Shape(format!(
            "relation: query maps {:?} vs support maps {:?}",
            s,
            means.shape()
        )));
    }
    let cw = params.get(CONV_W)?;
    let r = cw.shape()[0];
    if cw.shape()[1] != 2 * d {
        return Err(Error::Shape(format!(
            "relation conv expects {} input channels, maps give {}",
            cw.shape()[1],
            2 * d
        )));
    }
    let plane = d * h * w;
    let mut pairs = Vec::with_capacity(nq * way * 2 * plane);
    for qi in 0..nq {
        for k in 0..way {
            pairs.extend_from_slice(query.item(qi));
            pairs.extend_from_slice(means.item(k));
        }
    }
    let conv = Conv3x3 {
        c_in: 2 * d,
        c_out: r,
        h,
        w,
    };
    let mut conv_out = conv.forward(&pairs, cw.data(), params.get(CONV_B)?.data(), nq * way);
    conv_out.iter_mut().for_each(|v| *v = v.max(0.0));
    let hw = h * w;
    let pooled: Vec<f64> = conv_out
        .chunks_exact(hw)
        .map(|c| c.iter().sum::<f64>() / hw as f64)
        .collect();
    let hid_n = params.get(FC1_B)?.len();
    let mut hidden = linear_forward(
        &pooled,
        nq * way,
        r,
        params.get(FC1_W)?.data(),
        params.get(FC1_B)?.data(),
    );
    hidden.iter_mut().for_each(|v| *v = v.max(0.0));
    let logits = linear_forward(
        &hidden,
        nq * way,
        hid_n,
        params.get(FC2_W)?.data(),
        params.get(FC2_B)?.data(),
    );
    Ok((
        RelationForward {
            logits,
            pairs,
            conv_out,
            pooled,
            hidden,
        },
        conv,
    ))
}

/// Relation scores: softmax over the per-class relation logits of each query.
pub fn relation_scores(
    params: &ParamState,
    query: &Tensor,
    support: &Tensor,
    s_labels: &[usize],
    way: usize,
) -> Result<Vec<ClassScores>> {
    let (means, _) = class_mean_maps(support, s_labels, way)?;
    let (fwd, _) = relation_forward(params, query, &means)?;
    Ok(fwd
        .logits
        .chunks_exact(way)
        .map(|l| ClassScores { probs: softmax(l) })
        .collect())
}

fn relation_loss(
    params: &ParamState,
    support: &Tensor,
    s_labels: &[usize],
    query: &Tensor,
    q_labels: &[usize],
    way: usize,
) -> Result<HeadLoss> {
    use relation_names::*;
    let (means, counts) = class_mean_maps(support, s_labels, way)?;
    let (fwd, conv) = relation_forward(params, query, &means)?;
    let nq = q_labels.len();
    let rows = nq * way;
    let s = query.shape();
    let (h, w) = (s[2], s[3]);
    let hw = h * w;
    let r = conv.c_out;
    let hid_n = params.get(FC1_B)?.len();

    let mut loss = 0.0;
    let mut correct = 0;
    let mut scores = Vec::with_capacity(nq);
    let mut d_logits = vec![0.0; rows];
    for (qi, &y) in q_labels.iter().enumerate() {
        let l = &fwd.logits[qi * way..(qi + 1) * way];
        let logp = log_softmax(l);
        loss += -logp[y];
        let cs = ClassScores {
            probs: logp.iter().map(|v| v.exp()).collect(),
        };
        for k in 0..way {
            d_logits[qi * way + k] = (cs.probs[k] - if k == y { 1.0 } else { 0.0 }) / nq as f64;
        }
        if cs.argmax() == y {
            correct += 1;
        }
        scores.push(cs);
    }

    let mut grads = params.subset("relation.").zeros_like();
    let mut d_fc2_w = vec![0.0; hid_n];
    let mut d_fc2_b = vec![0.0; 1];
    let mut d_hidden = linear_backward(
        &fwd.hidden,
        rows,
        hid_n,
        params.get(FC2_W)?.data(),
        &d_logits,
        &mut d_fc2_w,
        &mut d_fc2_b,
    );
    for (g, hv) in d_hidden.iter_mut().zip(&fwd.hidden) {
        if *hv <= 0.0 {
            *g = 0.0;
        }
    }
    let mut d_fc1_w = vec![0.0; hid_n * r];
    let mut d_fc1_b = vec![0.0; hid_n];
    let d_pooled = linear_backward(
        &fwd.pooled,
        rows,
        r,
        params.get(FC1_W)?.data(),
        &d_hidden,
        &mut d_fc1_w,
        &mut d_fc1_b,
    );
    let mut d_conv = vec![0.0; rows * r * hw];
    for (p, g) in d_pooled.iter().enumerate() {
        for j in 0..hw {
            let idx = p * hw + j;
            if fwd.conv_out[idx] > 0.0 {
                d_conv[idx] = g / hw as f64;
            }
        }
    }
    let mut d_conv_w = vec![0.0; params.get(CONV_W)?.len()];
    let mut d_conv_b = vec![0.0; r];
    let d_pairs = conv
        .backward(
            &fwd.pairs,
            params.get(CONV_W)?.data(),
            &d_conv,
            rows,
            &mut d_conv_w,
            &mut d_conv_b,
            true,
        )
        .expect("input grad requested");
    grads.get_mut(CONV_W)?.data_mut().copy_from_slice(&d_conv_w);
    grads.get_mut(CONV_B)?.data_mut().copy_from_slice(&d_conv_b);
    grads.get_mut(FC1_W)?.data_mut().copy_from_slice(&d_fc1_w);
    grads.get_mut(FC1_B)?.data_mut().copy_from_slice(&d_fc1_b);
    grads.get_mut(FC2_W)?.data_mut().copy_from_slice(&d_fc2_w);
    grads.get_mut(FC2_B)?.data_mut().copy_from_slice(&d_fc2_b);

    let plane = query.item_len();
    let mut d_query = Tensor::zeros(query.shape());
    let mut d_means = Tensor::zeros(means.shape());
    for qi in 0..nq {
        for k in 0..way {
            let base = (qi * way + k) * 2 * plane;
            for (o, g) in d_query
                .item_mut(qi)
                .iter_mut()
                .zip(&d_pairs[base..base + plane])
            {
                *o += g;
            }
            for (o, g) in d_means
                .item_mut(k)
                .iter_mut()
                .zip(&d_pairs[base + plane..base + 2 * plane])
            {
                *o += g;
            }
        }
    }
    let mut d_support = Tensor::zeros(support.shape());
    for (i, &l) in s_labels.iter().enumerate() {
        let n = counts[l] as f64;
        for (o, g) in d_support.item_mut(i).iter_mut().zip(d_means.item(l)) {
            *o = g / n;
        }
    }
    Ok(HeadLoss {
        loss: loss / nq as f64,
        correct,
        scores,
        d_support,
        d_query,
        param_grads: grads,
    })
}

/// A few-shot head selected by [`HeadKind`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub kind: HeadKind,
    pub distance: Distance,
    pub relation: RelationConfig,
}

impl Head {
    pub fn new(kind: HeadKind, distance: Distance) -> Self {
        Self {
            kind,
            distance,
            relation: RelationConfig::default(),
        }
    }

    /// Head-owned trainable parameters (only the relation head has any).
    pub fn init_params<R: Rng>(&self, feature_dim: usize, rng: &mut R) -> ParamState {
        match self.kind {
            HeadKind::Relation => self.relation.init_params(feature_dim, rng),
            _ => ParamState::new(),
        }
    }

    /// Episode loss on encoder maps. `params` must contain the head's
    /// parameters (it may contain others).
    pub fn loss(
        &self,
        params: &ParamState,
        support_maps: &Tensor,
        s_labels: &[usize],
        query_maps: &Tensor,
        q_labels: &[usize],
        way: usize,
    ) -> Result<HeadLoss> {
        if q_labels.is_empty() {
            return Err(Error::Shape("episode has no queries".into()));
        }
        let (h, w) = (support_maps.shape()[2], support_maps.shape()[3]);
        let pooled = |kind: HeadKind| -> Result<HeadLoss> {
            let s = pool_batch(support_maps);
            let q = pool_batch(query_maps);
            let (loss, correct, scores, ds, dq) = match kind {
                HeadKind::Matching => matching_loss(&s, s_labels, &q, q_labels, way)?,
                _ => proto_loss(&s, s_labels, &q, q_labels, way, self.distance)?,
            };
            Ok(HeadLoss {
                loss,
                correct,
                scores,
                d_support: pool_batch_backward(&ds, h, w),
                d_query: pool_batch_backward(&dq, h, w),
                param_grads: ParamState::new(),
            })
        };
        match self.kind {
            HeadKind::Proto | HeadKind::Matching => pooled(self.kind),
            HeadKind::Relation => {
                relation_loss(params, support_maps, s_labels, query_maps, q_labels, way)
            }
        }
    }

    /// Class scores for each query, without gradients.
    pub fn scores(
        &self,
        params: &ParamState,
        support_maps: &Tensor,
        s_labels: &[usize],
        query_maps: &Tensor,
        way: usize,
    ) -> Result<Vec<ClassScores>> {
        match self.kind {
            HeadKind::Proto => {
                let ps = prototypes(&pool_batch(support_maps), s_labels, way)?;
                let q = pool_batch(query_maps);
                (0..q.shape()[0])
                    .map(|i| classify(q.item(i), &ps, self.distance))
                    .collect()
            }
            HeadKind::Matching => {
                let s = pool_batch(support_maps);
                let q = pool_batch(query_maps);
                (0..q.shape()[0])
                    .map(|i| matching_scores(q.item(i), &s, s_labels, way))
                    .collect()
            }
            HeadKind::Relation => relation_scores(params, query_maps, support_maps, s_labels, way),
        }
    }
}

/// Two-layer rotation classifier `D → hidden → 4` with ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationHead {
    pub feature_dim: usize,
    pub hidden: usize,
}

pub mod rotation_names {
    pub const FC1_W: &str = "rot.fc1.weight";
    pub const FC1_B: &str = "rot.fc1.bias";
    pub const FC2_W: &str = "rot.fc2.weight";
    pub const FC2_B: &str = "rot.fc2.bias";
}

pub const ROTATION_CLASSES: usize = 4;

impl RotationHead {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            hidden: 256,
        }
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamState {
        use rotation_names::*;
        let (d, h) = (self.feature_dim, self.hidden);
        let n1 = Normal::new(0.0, (2.0 / d as f64).sqrt()).expect("std");
        let n2 = Normal::new(0.0, (1.0 / h as f64).sqrt()).expect("std");
        let mut p = ParamState::new();
        p.insert(
            FC1_W,
            Tensor::from_vec(&[h, d], (0..h * d).map(|_| n1.sample(rng)).collect()).expect("shape"),
        );
        p.insert(FC1_B, Tensor::zeros(&[h]));
        p.insert(
            FC2_W,
            Tensor::from_vec(
                &[ROTATION_CLASSES, h],
                (0..ROTATION_CLASSES * h).map(|_| n2.sample(rng)).collect(),
            )
            .expect("shape"),
        );
        p.insert(FC2_B, Tensor::zeros(&[ROTATION_CLASSES]));
        p
    }

    /// Rotation logits, rows × 4.
    pub fn logits(&self, params: &ParamState, embeddings: &Tensor) -> Result<Vec<f64>> {
        use rotation_names::*;
        let rows = embeddings.shape()[0];
        if embeddings.item_len() != self.feature_dim {
            return Err(Error::Shape(format!(
                "rotation head expects dim {}, got {}",
                self.feature_dim,
                embeddings.item_len()
            )));
        }
        let mut hid = linear_forward(
            embeddings.data(),
            rows,
            self.feature_dim,
            params.get(FC1_W)?.data(),
            params.get(FC1_B)?.data(),
        );
        hid.iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(linear_forward(
            &hid,
            rows,
            self.hidden,
            params.get(FC2_W)?.data(),
            params.get(FC2_B)?.data(),
        ))
    }

    /// Mean cross-entropy against rotation labels; returns (loss, ∂/∂embeddings, ∂/∂params).
    pub fn loss(
        &self,
        params: &ParamState,
        embeddings: &Tensor,
        labels: &[usize],
    ) -> Result<(f64, Tensor, ParamState)> {
        use rotation_names::*;
        let rows = embeddings.shape()[0];
        if labels.len() != rows {
            return Err(Error::Shape(format!(
                "{} rotation labels for {rows} embeddings",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= ROTATION_CLASSES) {
            return Err(Error::Shape(format!("rotation label {bad} outside 0..4")));
        }
        let (d, h) = (self.feature_dim, self.hidden);
        let pre = linear_forward(
            embeddings.data(),
            rows,
            d,
            params.get(FC1_W)?.data(),
            params.get(FC1_B)?.data(),
        );
        let hid: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let logits = linear_forward(
            &hid,
            rows,
            h,
            params.get(FC2_W)?.data(),
            params.get(FC2_B)?.data(),
        );
        let mut loss = 0.0;
        let mut d_logits = vec![0.0; rows * ROTATION_CLASSES];
        for (r, &y) in labels.iter().enumerate() {
            let logp = log_softmax(&logits[r * ROTATION_CLASSES..(r + 1) * ROTATION_CLASSES]);
            loss -= logp[y];
            for k in 0..ROTATION_CLASSES {
                d_logits[r * ROTATION_CLASSES + k] =
                    (logp[k].exp() - if k == y { 1.0 } else { 0.0 }) / rows as f64;
            }
        }
        let mut grads = params.subset("rot.").zeros_like();
        let mut dw2 = vec![0.0; ROTATION_CLASSES * h];
        let mut db2 = vec![0.0; ROTATION_CLASSES];
        let d_hid = linear_backward(
            &hid,
            rows,
            h,
            params.get(FC2_W)?.data(),
            &d_logits,
            &mut dw2,
            &mut db2,
        );
        let d_pre: Vec<f64> = pre
            .iter()
            .zip(&d_hid)
            .map(|(p, g)| if *p > 0.0 { *g } else { 0.0 })
            .collect();
        let mut dw1 = vec![0.0; h * d];
        let mut db1 = vec![0.0; h];
        let d_emb = linear_backward(
            embeddings.data(),
            rows,
            d,
            params.get(FC1_W)?.data(),
            &d_pre,
            &mut dw1,
            &mut db1,
        );
        grads.get_mut(FC1_W)?.data_mut().copy_from_slice(&dw1);
        grads.get_mut(FC1_B)?.data_mut().copy_from_slice(&db1);
        grads.get_mut(FC2_W)?.data_mut().copy_from_slice(&dw2);
        grads.get_mut(FC2_B)?.data_mut().copy_from_slice(&db2);
        Ok((
            loss / rows as f64,
            Tensor::from_vec(embeddings.shape(), d_emb)?,
            grads,
        ))
    }
}

#[cfg(test)]
mod tests;
