//! Outer episodic training: localize → expand → adapt θ′ → outer step.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{pool_batch, Encoder, ParamState, StatsMode};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{load_domain, sample_episode, Collection, Episode, EpisodeItem, Image, Split};
use crate::error::{Error, Result};
use crate::expand::{build_expanded_set, ExpandedSupportSet};
use crate::heads::{prototypes, Head, RotationHead};
use crate::inner::{adapt, InnerModel, InnerStepLog};
use crate::optim::Adam;
use crate::rng::{stream, tags, StreamRng};
use crate::wsol::{localize, split_fg_bg, FgBgPair, Localization};

/// Encoder, few-shot head and rotation head with their state.
#[derive(Clone, Debug)]
pub struct Learner {
    pub encoder: Encoder,
    pub head: Head,
    pub rotation: RotationHead,
    /// Encoder and head parameters (f_μ).
    pub params: ParamState,
    /// Channel-norm running statistics.
    pub buffers: ParamState,
}

impl Learner {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let encoder = Encoder::new(cfg.encoder_config())?;
        let head = Head::new(cfg.head, cfg.distance);
        let mut rng = stream(cfg.seed, &[tags::INIT]);
        let mut params = encoder.init_params(&mut rng);
        for (k, v) in head.init_params(encoder.out_channels(), &mut rng).iter() {
            params.insert(k, v.clone());
        }
        Ok(Self {
            rotation: RotationHead {
                feature_dim: encoder.out_channels(),
                hidden: cfg.rotation_hidden,
            },
            buffers: encoder.init_buffers(),
            encoder,
            head,
            params,
        })
    }

    /// Rebuilds a learner from a checkpoint, using the checkpoint's own config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut l = Self::new(&ckpt.config)?;
        l.load_state(&ckpt.params, &ckpt.buffers)?;
        Ok(l)
    }

    /// Overwrites parameters and buffers; all names must be present.
    pub fn load_state(&mut self, params: &ParamState, buffers: &ParamState) -> Result<()> {
        self.params.load_from(params)?;
        self.buffers.load_from(buffers)
    }

    pub fn inner_model(&self) -> InnerModel<'_> {
        InnerModel {
            encoder: &self.encoder,
            head: &self.head,
            rotation: &self.rotation,
            buffers: &self.buffers,
        }
    }

    /// Localizes each image with `params` and frozen statistics. With the
    /// prototype CAM, each image uses its class prototype from the batch.
    pub fn localize_items(
        &self,
        params: &ParamState,
        items: &[EpisodeItem],
        way: usize,
        cfg: &TrainConfig,
    ) -> Result<Vec<Localization>> {
        let input = self.encoder.batch_images(items.iter().map(|i| &i.image))?;
        let (maps, _) = self
            .encoder
            .forward(params, StatsMode::Frozen(&self.buffers), &input)?;
        let protos = match cfg.cam {
            crate::wsol::CamMode::PrototypeCosine => {
                let labels: Vec<usize> = items.iter().map(|i| i.label).collect();
                Some(prototypes(&pool_batch(&maps), &labels, way)?)
            }
            crate::wsol::CamMode::ChannelMean => None,
        };
        Encoder::split_maps(&maps)
            .iter()
            .zip(items)
            .map(|(m, it)| {
                let p = protos.as_ref().map(|p| p.protos[it.label].as_slice());
                localize(m, self.encoder.config().side, cfg.tau, p)
            })
            .collect()
    }

    /// Runs the per-episode pipeline up to (not including) the outer loss.
    pub fn prepare(
        &self,
        episode: &Episode,
        cfg: &TrainConfig,
        expand_rng: &mut StreamRng,
        inner_rng: &mut StreamRng,
    ) -> Result<Prepared> {
        let ecfg = cfg.expand_config();
        let needs_set = cfg.td_enabled || cfg.expands();
        let mut localizations = Vec::new();
        let set = if needs_set {
            let pairs: Option<Vec<FgBgPair>> = if ecfg.uses_wsol() {
                localizations =
                    self.localize_items(&self.params, &episode.support, episode.way, cfg)?;
                Some(
                    episode
                        .support
                        .iter()
                        .zip(&localizations)
                        .map(|(it, l)| split_fg_bg(&it.image.image, Some(l.bbox)))
                        .collect(),
                )
            } else {
                None
            };
            Some(build_expanded_set(
                &episode.support,
                episode.way,
                pairs.as_deref(),
                &ecfg,
                expand_rng,
            )?)
        } else {
            None
        };

        let (params, trace) = match (&set, cfg.td_enabled) {
            (Some(s), true) => {
                let a = adapt(
                    self.inner_model(),
                    &self.params,
                    s,
                    episode.shot,
                    &cfg.inner_config(),
                    inner_rng,
                )?;
                (Some(a.params), a.trace)
            }
            _ => (None, Vec::new()),
        };

        let (support_images, support_labels) = match (&set, cfg.td_enabled) {
            (Some(s), false) => (
                s.samples.iter().map(|x| x.image.clone()).collect(),
                s.samples.iter().map(|x| x.class_label).collect(),
            ),
            _ => (
                episode
                    .support
                    .iter()
                    .map(|i| i.image.image.clone())
                    .collect(),
                episode.support_labels(),
            ),
        };
        Ok(Prepared {
            adapted: params,
            support_images,
            support_labels,
            expanded: set,
            localizations,
            trace,
        })
    }
}

/// Output of [`Learner::prepare`].
#[derive(Clone, Debug)]
pub struct Prepared {
    /// θ′ when inner adaptation ran.
    pub adapted: Option<ParamState>,
    /// Outer support: the original support, or S′ when folded in.
    pub support_images: Vec<Image>,
    pub support_labels: Vec<usize>,
    pub expanded: Option<ExpandedSupportSet>,
    pub localizations: Vec<Localization>,
    pub trace: Vec<InnerStepLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// True when the outer step was skipped for a non-finite value.
    pub skipped: bool,
    pub expanded_size: usize,
    pub inner_trace: Vec<InnerStepLog>,
    pub wall_ms: f64,
}

/// One outer episode. `index` selects the derived RNG streams.
pub fn train_episode(
    learner: &mut Learner,
    adam: &mut Adam,
    source: &Collection,
    cfg: &TrainConfig,
    index: usize,
) -> Result<EpisodeResult> {
    let start = Instant::now();
    let i = index as u64;
    let episode = sample_episode(
        source,
        cfg.way,
        cfg.shot,
        cfg.queries_per_class,
        &mut stream(cfg.seed, &[tags::EPISODE, i]),
    )?;
    let prep = match learner.prepare(
        &episode,
        cfg,
        &mut stream(cfg.seed, &[tags::EXPAND, i]),
        &mut stream(cfg.seed, &[tags::INNER, i]),
    ) {
        Ok(p) => p,
        Err(Error::NonFinite { stage, value }) => {
            log::warn!("episode {index}: {stage} is {value}; skipping outer step");
            return Ok(skipped(index, start));
        }
        Err(e) => return Err(e),
    };
    let initial = match &prep.adapted {
        Some(theta) if !cfg.carry_adapted => {
            Some(std::mem::replace(&mut learner.params, theta.clone()))
        }
        Some(theta) => {
            learner.params.load_from(theta)?;
            None
        }
        None => None,
    };
    let enc = &learner.encoder;
    let queries: Vec<&Image> = episode.query.iter().map(|q| &q.image.image).collect();
    let input = enc.batch_pixels(prep.support_images.iter().chain(queries.iter().copied()))?;
    let ns = prep.support_images.len();
    let mut buffers = learner.buffers.clone();
    let (maps, tape) = enc.forward(
        &learner.params,
        StatsMode::Update(&mut buffers, cfg.norm_momentum),
        &input,
    )?;
    let s_maps = maps.slice_items(0, ns);
    let q_maps = maps.slice_items(ns, maps.shape()[0]);
    let hl = learner.head.loss(
        &learner.params,
        &s_maps,
        &prep.support_labels,
        &q_maps,
        &episode.query_labels(),
        cfg.way,
    )?;
    if !hl.loss.is_finite() {
        log::warn!(
            "episode {index}: outer loss is {}; skipping outer step",
            hl.loss
        );
        if let Some(p) = initial {
            learner.params = p;
        }
        return Ok(skipped(index, start));
    }
    let d_maps = crate::tensor::Tensor::concat(&[&hl.d_support, &hl.d_query])?;
    let mut grads = learner.params.zeros_like();
    enc.backward(&learner.params, &tape, &d_maps, &mut grads)?;
    grads.accumulate(&hl.param_grads)?;
    if !grads.is_finite() {
        log::warn!("episode {index}: non-finite outer gradient; skipping outer step");
        if let Some(p) = initial {
            learner.params = p;
        }
        return Ok(skipped(index, start));
    }
    learner.buffers = buffers;
    if let Some(p) = initial {
        learner.params = p;
    }
    adam.step(&mut learner.params, &grads)?;
    Ok(EpisodeResult {
        episode: index,
        loss: hl.loss,
        accuracy: hl.accuracy(),
        skipped: false,
        expanded_size: prep.expanded.as_ref().map_or(0, ExpandedSupportSet::len),
        inner_trace: prep.trace,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn skipped(index: usize, start: Instant) -> EpisodeResult {
    EpisodeResult {
        episode: index,
        loss: f64::NAN,
        accuracy: 0.0,
        skipped: true,
        expanded_size: 0,
        inner_trace: Vec::new(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Output directory for metrics and checkpoints; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Continue from `<out_dir>/latest.ckpt` when it exists.
    pub resume: bool,
    /// Start from these weights (parameters and buffers only).
    pub init_checkpoint: Option<PathBuf>,
    /// Root for relative directory domains.
    pub data_root: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub episode: usize,
    pub accuracy: f64,
    pub ci95: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub learner: Learner,
    pub results: Vec<EpisodeResult>,
    pub validation: Vec<ValidationRecord>,
    pub best_val_accuracy: Option<f64>,
    pub episodes_done: usize,
}

pub const LATEST: &str = "latest.ckpt";
pub const BEST: &str = "best.ckpt";
pub const METRICS: &str = "metrics.jsonl";
pub const VALIDATION: &str = "validation.jsonl";
/// `latest.ckpt` cadence when no validation is due.
pub const CHECKPOINT_EVERY: usize = 50;

fn append_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let line = serde_json::to_string(value)?;
    writeln!(f, "{line}").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn snapshot(
    learner: &Learner,
    adam: &Adam,
    cfg: &TrainConfig,
    done: usize,
    best: Option<f64>,
) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        episodes_done: done,
        best_val_accuracy: best,
        params: learner.params.clone(),
        buffers: learner.buffers.clone(),
        adam: Some(adam.clone()),
    }
}

/// Runs `cfg.episodes` outer episodes on the source domain's training split.
pub fn train(cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let source = load_domain(&cfg.domain(&cfg.source, Split::Train, opts.data_root.as_deref())?)?;
    let val = if cfg.val_every > 0 {
        Some(load_domain(&cfg.domain(
            &cfg.source,
            Split::Val,
            opts.data_root.as_deref(),
        )?)?)
    } else {
        None
    };
    train_on(cfg, opts, &source, val.as_ref())
}

/// [`train`] with preloaded collections.
pub fn train_on(
    cfg: &TrainConfig,
    opts: &TrainOptions,
    source: &Collection,
    val: Option<&Collection>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut learner = Learner::new(cfg)?;
    let mut adam = Adam::new(&learner.params, cfg.outer_lr);
    let mut start = 0;
    let mut best: Option<f64> = None;

    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let latest = opts.out_dir.as_ref().map(|d| d.join(LATEST));
    match (&latest, opts.resume) {
        (Some(p), true) if p.exists() => {
            let ck = Checkpoint::load(p)?;
            learner.load_state(&ck.params, &ck.buffers)?;
            if let Some(a) = ck.adam {
                adam = a;
                adam.lr = cfg.outer_lr;
            }
            start = ck.episodes_done;
            best = ck.best_val_accuracy;
            log::info!("resuming from {} at episode {start}", p.display());
        }
        _ => {
            if let Some(init) = &opts.init_checkpoint {
                let ck = Checkpoint::load(init)?;
                learner
                    .load_state(&ck.params, &ck.buffers)
                    .map_err(|e| Error::Checkpoint {
                        path: init.clone(),
                        msg: format!("incompatible with the configured model: {e}"),
                    })?;
            }
            if let Some(dir) = &opts.out_dir {
                for f in [METRICS, VALIDATION] {
                    let p = dir.join(f);
                    if p.exists() {
                        fs::remove_file(&p)
                            .map_err(|e| Error::io(format!("removing {}", p.display()), e))?;
                    }
                }
            }
        }
    }

    let mut results = Vec::new();
    let mut validation = Vec::new();
    for index in start..cfg.episodes {
        let r = train_episode(&mut learner, &mut adam, source, cfg, index)?;
        if let Some(dir) = &opts.out_dir {
            append_line(&dir.join(METRICS), &r)?;
        }
        if (index + 1) % 10 == 0 || index + 1 == cfg.episodes {
            log::info!(
                "episode {}/{}: loss {:.4} acc {:.3}",
                index + 1,
                cfg.episodes,
                r.loss,
                r.accuracy
            );
        }
        results.push(r);
        let done = index + 1;
        if let (Some(v), true) = (val, cfg.val_every > 0 && done % cfg.val_every == 0) {
            let rep = crate::eval::evaluate_with(
                &learner,
                v,
                cfg,
                &crate::eval::EvalOptions {
                    episodes: cfg.val_episodes,
                    stream_tag: tags::VALIDATION,
                    ..crate::eval::EvalOptions::from_config(cfg)
                },
            )?;
            let rec = ValidationRecord {
                episode: done,
                accuracy: rep.report.mean_accuracy,
                ci95: rep.report.ci95,
            };
            log::info!(
                "validation after {done}: {:.4} ± {:.4}",
                rec.accuracy,
                rec.ci95
            );
            let improved = best.is_none_or(|b| rec.accuracy > b);
            if improved {
                best = Some(rec.accuracy);
            }
            if let Some(dir) = &opts.out_dir {
                append_line(&dir.join(VALIDATION), &rec)?;
                if improved {
                    snapshot(&learner, &adam, cfg, done, best).save(&dir.join(BEST))?;
                }
                snapshot(&learner, &adam, cfg, done, best).save(&dir.join(LATEST))?;
            }
            validation.push(rec);
        } else if let Some(dir) = opts
            .out_dir
            .as_ref()
            .filter(|_| done % CHECKPOINT_EVERY == 0)
        {
            snapshot(&learner, &adam, cfg, done, best).save(&dir.join(LATEST))?;
        }
    }
    if let Some(dir) = &opts.out_dir {
        let ck = snapshot(&learner, &adam, cfg, cfg.episodes.max(start), best);
        ck.save(&dir.join(LATEST))?;
        if val.is_none() || !dir.join(BEST).exists() {
            ck.save(&dir.join(BEST))?;
        }
    }
    Ok(TrainOutcome {
        learner,
        results,
        validation,
        best_val_accuracy: best,
        episodes_done: cfg.episodes.max(start),
    })
}
