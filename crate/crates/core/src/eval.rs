//! Episode-level evaluation with 95 % confidence intervals, the α sweep and
//! the component ablation grid.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{pool_batch, StatsMode};
use crate::config::TrainConfig;
use crate::data::{sample_episode, Collection};
use crate::error::{Error, Result};
use crate::rng::{stream, tags};
use crate::trainer::{train_on, Learner, TrainOptions};

/// `(mean, sample standard deviation, 1.96 · s / √E)`. A single value has
/// zero spread.
pub fn confidence_interval(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    (mean, sd, 1.96 * sd / (n as f64).sqrt())
}

/// FNV-1a over the config's JSON encoding.
pub fn config_fingerprint(cfg: &TrainConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domain: String,
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub alpha: usize,
    pub mean_accuracy: f64,
    pub stdev: f64,
    pub ci95: f64,
    pub accuracies: Vec<f64>,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn from_accuracies(
        domain: &str,
        cfg: &TrainConfig,
        alpha: usize,
        accuracies: Vec<f64>,
    ) -> Self {
        let (mean, sd, ci) = confidence_interval(&accuracies);
        Self {
            domain: domain.to_owned(),
            episodes: accuracies.len(),
            way: cfg.way,
            shot: cfg.shot,
            alpha,
            mean_accuracy: mean,
            stdev: sd,
            ci95: ci,
            accuracies,
            config_fingerprint: config_fingerprint(cfg),
        }
    }
}

/// One query embedding for external visualization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub episode: usize,
    pub query: usize,
    /// Episode-local label.
    pub label: usize,
    /// Dataset class index.
    pub class_id: usize,
    pub predicted: usize,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub episodes: usize,
    pub queries_per_class: usize,
    /// Inner steps at test time.
    pub alpha: usize,
    pub seed: u64,
    /// First tag of the per-episode RNG path.
    pub stream_tag: u64,
    pub dump_embeddings: bool,
}

impl EvalOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            episodes: cfg.eval_episodes,
            queries_per_class: cfg.queries_per_class,
            alpha: cfg.alpha,
            seed: cfg.seed,
            stream_tag: tags::EVAL,
            dump_embeddings: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub embeddings: Vec<EmbeddingRecord>,
}

/// Accuracy over `opts.episodes` episodes of `target`. Each episode runs the
/// same localization, expansion and adaptation as training (per `cfg`), then
/// classifies the queries with frozen statistics.
pub fn evaluate_with(
    learner: &Learner,
    target: &Collection,
    cfg: &TrainConfig,
    opts: &EvalOptions,
) -> Result<EvalOutput> {
    let mut cfg = cfg.clone();
    cfg.alpha = opts.alpha;
    let mut accs = Vec::with_capacity(opts.episodes);
    let mut embeddings = Vec::new();
    for e in 0..opts.episodes {
        let path = |t: u64| [opts.stream_tag, e as u64, t];
        let ep = sample_episode(
            target,
            cfg.way,
            cfg.shot,
            opts.queries_per_class,
            &mut stream(opts.seed, &path(tags::EPISODE)),
        )?;
        let prep = learner.prepare(
            &ep,
            &cfg,
            &mut stream(opts.seed, &path(tags::EXPAND)),
            &mut stream(opts.seed, &path(tags::INNER)),
        )?;
        let params = prep.adapted.as_ref().unwrap_or(&learner.params);
        let enc = &learner.encoder;
        let input = enc.batch_pixels(
            prep.support_images
                .iter()
                .chain(ep.query.iter().map(|q| &q.image.image)),
        )?;
        let (maps, _) = enc.forward(params, StatsMode::Frozen(&learner.buffers), &input)?;
        let ns = prep.support_images.len();
        let s_maps = maps.slice_items(0, ns);
        let q_maps = maps.slice_items(ns, maps.shape()[0]);
        let scores =
            learner
                .head
                .scores(params, &s_maps, &prep.support_labels, &q_maps, cfg.way)?;
        let labels = ep.query_labels();
        let preds: Vec<usize> = scores.iter().map(|s| s.argmax()).collect();
        let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        accs.push(correct as f64 / labels.len() as f64);
        if opts.dump_embeddings {
            let emb = pool_batch(&q_maps);
            for (q, item) in ep.query.iter().enumerate() {
                embeddings.push(EmbeddingRecord {
                    episode: e,
                    query: q,
                    label: item.label,
                    class_id: item.image.class_id,
                    predicted: preds[q],
                    embedding: emb.item(q).to_vec(),
                });
            }
        }
    }
    Ok(EvalOutput {
        report: EvalReport::from_accuracies(&target.name, &cfg, opts.alpha, accs),
        embeddings,
    })
}

pub fn evaluate(
    learner: &Learner,
    target: &Collection,
    cfg: &TrainConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    evaluate_with(learner, target, cfg, opts).map(|o| o.report)
}

/// One evaluation per α, all on the same episodes.
pub fn sweep_alpha(
    learner: &Learner,
    target: &Collection,
    cfg: &TrainConfig,
    alphas: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    alphas
        .iter()
        .map(|&a| {
            log::info!("sweep: α = {a}");
            evaluate(
                learner,
                target,
                cfg,
                &EvalOptions {
                    alpha: a,
                    ..opts.clone()
                },
            )
        })
        .collect()
}

pub fn sweep_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("alpha,episodes,mean_accuracy,ci95\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6}",
            r.alpha, r.episodes, r.mean_accuracy, r.ci95
        );
    }
    s
}

/// Plot-ready sweep summary: parallel arrays plus the full reports.
pub fn sweep_json(reports: &[EvalReport]) -> serde_json::Value {
    serde_json::json!({
        "alpha": reports.iter().map(|r| r.alpha).collect::<Vec<_>>(),
        "mean_accuracy": reports.iter().map(|r| r.mean_accuracy).collect::<Vec<_>>(),
        "ci95": reports.iter().map(|r| r.ci95).collect::<Vec<_>>(),
        "reports": reports,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Component switches of one ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub wsol_rot: bool,
    pub wsol_exc_rot: bool,
    pub whole_rot: bool,
    pub td: bool,
}

impl AblationRow {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.wsol_rot {
            parts.push("wsol-rot");
        }
        if self.wsol_exc_rot {
            parts.push("wsol-exc-rot");
        }
        if self.whole_rot {
            parts.push("whole-rot");
        }
        if self.td {
            parts.push("td");
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        TrainConfig {
            wsol_rot: self.wsol_rot,
            wsol_exc_rot: self.wsol_exc_rot,
            whole_rot: self.whole_rot,
            td_enabled: self.td,
            ..cfg.clone()
        }
    }
}

/// The nine component combinations, baseline first and full method last.
pub fn ablation_grid() -> Vec<AblationRow> {
    let row = |wsol_rot, wsol_exc_rot, whole_rot, td| AblationRow {
        wsol_rot,
        wsol_exc_rot,
        whole_rot,
        td,
    };
    vec![
        row(false, false, false, false),
        row(true, false, false, false),
        row(false, true, false, false),
        row(false, false, true, false),
        row(false, false, false, true),
        row(true, false, false, true),
        row(false, true, false, true),
        row(false, false, true, true),
        row(true, true, false, true),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub label: String,
    pub report: EvalReport,
}

/// Trains and evaluates every row with the same seed and budget.
pub fn ablate(
    cfg: &TrainConfig,
    rows: &[AblationRow],
    source: &Collection,
    target: &Collection,
    opts: &EvalOptions,
) -> Result<Vec<AblationResult>> {
    rows.iter()
        .map(|row| {
            let c = row.apply(cfg);
            log::info!("ablation row {}", row.label());
            let trained = train_on(
                &TrainConfig {
                    val_every: 0,
                    ..c.clone()
                },
                &TrainOptions::default(),
                source,
                None,
            )?;
            let report = evaluate(&trained.learner, target, &c, opts)?;
            Ok(AblationResult {
                row: *row,
                label: row.label(),
                report,
            })
        })
        .collect()
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut s = String::from("wsol_rot,wsol_exc_rot,whole_rot,td,label,mean_accuracy,ci95\n");
    for r in results {
        let b = |v: bool| if v { 1 } else { 0 };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6}",
            b(r.row.wsol_rot),
            b(r.row.wsol_exc_rot),
            b(r.row.whole_rot),
            b(r.row.td),
            r.label,
            r.report.mean_accuracy,
            r.report.ci95
        );
    }
    s
}
