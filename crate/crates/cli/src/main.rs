use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use selftaught::checkpoint::Checkpoint;
use selftaught::config::{TrainConfig, DATA_ROOT_ENV};
use selftaught::data::{
    export_collection, generate_synthetic_domain, load_domain, sample_episode, synth, Collection,
    Split, TextureFamily,
};
use selftaught::eval::{self, ablation_grid, EvalOptions};
use selftaught::expand::build_expanded_set;
use selftaught::rng::{stream, tags};
use selftaught::trainer::{train, Learner, TrainOptions};
use selftaught::viz;
use selftaught::wsol::split_fg_bg;

#[derive(Parser, Debug)]
#[command(
    name = "selftaught",
    version,
    about = "Cross-domain few-shot training and evaluation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML file with TrainConfig fields, applied on top of the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base configuration: `full` or `desk`.
    #[arg(long, global = true, default_value = "full")]
    preset: String,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root for relative dataset directories.
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    /// Repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(flatten)]
    overrides: Overrides,
}

/// Per-field overrides. Each replaces the value from preset and config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true)]
    way: Option<usize>,
    #[arg(long, global = true)]
    shot: Option<usize>,
    #[arg(long, global = true)]
    queries_per_class: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<usize>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    inner_lr: Option<f64>,
    #[arg(long, global = true)]
    outer_lr: Option<f64>,
    #[arg(long, global = true)]
    episodes: Option<usize>,
    /// proto | matching | relation
    #[arg(long, global = true)]
    head: Option<String>,
    #[arg(long, global = true)]
    source: Option<String>,
    #[arg(long, global = true)]
    target: Option<String>,
    #[arg(long, global = true)]
    side: Option<usize>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    eval_episodes: Option<usize>,
    #[arg(long, global = true)]
    td_enabled: Option<bool>,
    #[arg(long, global = true)]
    wsol_rot: Option<bool>,
    #[arg(long, global = true)]
    wsol_exc_rot: Option<bool>,
    #[arg(long, global = true)]
    whole_rot: Option<bool>,
    /// Any other field as KEY=VALUE with a TOML value, e.g. `--set p_rc=0.3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Episodic training on the source domain.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/latest.ckpt` when present.
        #[arg(long)]
        resume: bool,
        /// Start from these weights instead of a fresh initialization.
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the target domain.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report JSON path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write one JSON line per query embedding to this file.
        #[arg(long)]
        dump_embeddings: Option<PathBuf>,
    },
    /// Evaluate one checkpoint at several adaptation step counts.
    SweepAlpha {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8")]
        alphas: Vec<usize>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train and evaluate each component combination.
    Ablate {
        /// Grid row indices (0 = baseline, 8 = full); all rows when omitted.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Render activation maps and boxes for a domain's images.
    WsolViz {
        /// Weights to localize with; a fresh initialization when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        domain: Option<String>,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the expanded support set of one sampled episode.
    ExpandViz {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic domain to disk as class folders.
    SynthExport {
        /// A, B or C.
        #[arg(long)]
        family: char,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Overrides {
    /// Flag values as a TOML table keyed by field name; `--set` entries last.
    fn to_table(&self) -> Result<toml::Table> {
        use toml::Value;
        let mut t = toml::Table::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                t.insert(k.to_owned(), v);
            }
        };
        let int = |v: Option<usize>| v.map(|x| Value::Integer(x as i64));
        let float = |v: Option<f64>| v.map(Value::Float);
        let boolean = |v: Option<bool>| v.map(Value::Boolean);
        let string = |v: &Option<String>| v.clone().map(Value::String);
        put("way", int(self.way));
        put("shot", int(self.shot));
        put("queries_per_class", int(self.queries_per_class));
        put("alpha", int(self.alpha));
        put("lambda", float(self.lambda));
        put("inner_lr", float(self.inner_lr));
        put("outer_lr", float(self.outer_lr));
        put("episodes", int(self.episodes));
        put("head", string(&self.head));
        put("source", string(&self.source));
        put("target", string(&self.target));
        put("side", int(self.side));
        put("tau", float(self.tau));
        put("eval_episodes", int(self.eval_episodes));
        put("td_enabled", boolean(self.td_enabled));
        put("wsol_rot", boolean(self.wsol_rot));
        put("wsol_exc_rot", boolean(self.wsol_exc_rot));
        put("whole_rot", boolean(self.whole_rot));
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{kv}`");
            };
            let v = v.trim();
            let value = match toml::from_str::<toml::Table>(&format!("v = {v}")) {
                Ok(mut parsed) => parsed.remove("v").expect("key present"),
                Err(_) => Value::String(v.to_owned()),
            };
            put(k.trim(), Some(value));
        }
        Ok(t)
    }
}

impl Common {
    /// Base config, then the config file, then flags.
    fn resolve(&self, base: TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            cfg = TrainConfig::from_toml_file(path, &cfg)?;
        }
        let overlay = toml::to_string(&self.overrides.to_table()?)?;
        cfg = TrainConfig::from_toml_str(&overlay, &cfg).context("invalid flag value")?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn preset_config(&self) -> Result<TrainConfig> {
        self.resolve(TrainConfig::preset(&self.preset)?)
    }

    fn data_root(&self) -> Option<&Path> {
        self.data_root.as_deref()
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => bail!("unknown split `{other}` (expected train | val | test)"),
    }
}

/// Loads a checkpoint and returns the learner with the config resolved on
/// top of the checkpoint's own.
fn load_learner(common: &Common, path: &Path) -> Result<(Learner, TrainConfig)> {
    let ck = Checkpoint::load(path)?;
    let cfg = common.resolve(ck.config.clone())?;
    let mut learner = Learner::new(&cfg)?;
    learner
        .load_state(&ck.params, &ck.buffers)
        .with_context(|| {
            format!(
                "checkpoint {} does not match the configured model",
                path.display()
            )
        })?;
    Ok((learner, cfg))
}

fn learner_or_fresh(common: &Common, path: Option<&Path>) -> Result<(Learner, TrainConfig)> {
    match path {
        Some(p) => load_learner(common, p),
        None => {
            let cfg = common.preset_config()?;
            Ok((Learner::new(&cfg)?, cfg))
        }
    }
}

fn load(cfg: &TrainConfig, name: &str, split: Split, root: Option<&Path>) -> Result<Collection> {
    let spec = cfg.domain(name, split, root)?;
    load_domain(&spec).with_context(|| format!("loading domain `{name}`"))
}

/// Prints a line; a closed stdout is not an error.
fn say(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn emit_json(value: &impl serde::Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => eval::write_text(p, &(text + "\n"))?,
        None => say(&text),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::Train {
            out,
            resume,
            init_checkpoint,
        } => {
            let cfg = common.preset_config()?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            eval::write_text(&out.join("config.toml"), &cfg.to_toml())?;
            let outcome = train(
                &cfg,
                &TrainOptions {
                    out_dir: Some(out.clone()),
                    resume,
                    init_checkpoint,
                    data_root: common.data_root.clone(),
                },
            )?;
            let last = outcome.results.last();
            emit_json(
                &serde_json::json!({
                    "episodes_done": outcome.episodes_done,
                    "episodes_run": outcome.results.len(),
                    "skipped": outcome.results.iter().filter(|r| r.skipped).count(),
                    "last_loss": last.map(|r| r.loss),
                    "last_accuracy": last.map(|r| r.accuracy),
                    "best_val_accuracy": outcome.best_val_accuracy,
                    "out_dir": out,
                }),
                None,
            )
        }
        Command::Eval {
            checkpoint,
            split,
            out,
            dump_embeddings,
        } => {
            let (learner, cfg) = load_learner(common, &checkpoint)?;
            let target = load(&cfg, &cfg.target, parse_split(&split)?, common.data_root())?;
            let opts = EvalOptions {
                dump_embeddings: dump_embeddings.is_some(),
                ..EvalOptions::from_config(&cfg)
            };
            let output = eval::evaluate_with(&learner, &target, &cfg, &opts)?;
            if let Some(path) = dump_embeddings {
                let mut text = String::new();
                for rec in &output.embeddings {
                    text.push_str(&serde_json::to_string(rec)?);
                    text.push('\n');
                }
                eval::write_text(&path, &text)?;
            }
            emit_json(&output.report, out.as_deref())
        }
        Command::SweepAlpha {
            checkpoint,
            alphas,
            split,
            csv,
            json,
        } => {
            let (learner, cfg) = load_learner(common, &checkpoint)?;
            let target = load(&cfg, &cfg.target, parse_split(&split)?, common.data_root())?;
            let reports = eval::sweep_alpha(
                &learner,
                &target,
                &cfg,
                &alphas,
                &EvalOptions::from_config(&cfg),
            )?;
            let table = eval::sweep_csv(&reports);
            if let Some(p) = &csv {
                eval::write_text(p, &table)?;
            }
            if let Some(p) = &json {
                emit_json(&eval::sweep_json(&reports), Some(p))?;
            }
            say(table.trim_end());
            Ok(())
        }
        Command::Ablate { rows, csv } => {
            let cfg = common.preset_config()?;
            let grid = ablation_grid();
            let picked: Vec<_> = if rows.is_empty() {
                grid.clone()
            } else {
                rows.iter()
                    .map(|&i| {
                        grid.get(i)
                            .copied()
                            .with_context(|| format!("row {i} out of range (0..{})", grid.len()))
                    })
                    .collect::<Result<_>>()?
            };
            let source = load(&cfg, &cfg.source, Split::Train, common.data_root())?;
            let target = load(&cfg, &cfg.target, Split::Test, common.data_root())?;
            let results = eval::ablate(
                &cfg,
                &picked,
                &source,
                &target,
                &EvalOptions::from_config(&cfg),
            )?;
            let table = eval::ablation_csv(&results);
            if let Some(p) = &csv {
                eval::write_text(p, &table)?;
            }
            say(table.trim_end());
            Ok(())
        }
        Command::WsolViz {
            checkpoint,
            domain,
            split,
            count,
            out,
        } => {
            let (learner, cfg) = learner_or_fresh(common, checkpoint.as_deref())?;
            let name = domain.unwrap_or_else(|| cfg.source.clone());
            let coll = load(&cfg, &name, parse_split(&split)?, common.data_root())?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let items: Vec<_> = coll
                .images()
                .take(count)
                .enumerate()
                .map(|(i, img)| selftaught::data::EpisodeItem {
                    image: img.clone(),
                    label: i,
                })
                .collect();
            let locs = learner.localize_items(&learner.params, &items, items.len(), &cfg)?;
            let mut summary = Vec::new();
            for (i, (item, loc)) in items.iter().zip(&locs).enumerate() {
                let gt = item.image.gt_box;
                viz::save_png(
                    &viz::wsol_panel(&item.image.image, loc, gt),
                    &out.join(format!("{i:04}.png")),
                )?;
                summary.push(serde_json::json!({
                    "index": i,
                    "class_id": item.image.class_id,
                    "predicted": loc.bbox.to_bbox(),
                    "fallback": loc.detected.is_none(),
                    "ground_truth": gt,
                    "iou": gt.map(|g| g.iou(&loc.bbox.to_bbox())),
                }));
            }
            emit_json(&summary, Some(&out.join("boxes.json")))?;
            say(&format!(
                "wrote {} panels to {}",
                items.len(),
                out.display()
            ));
            Ok(())
        }
        Command::ExpandViz {
            checkpoint,
            episode,
            out,
        } => {
            let (learner, cfg) = learner_or_fresh(common, checkpoint.as_deref())?;
            let source = load(&cfg, &cfg.source, Split::Train, common.data_root())?;
            let i = episode as u64;
            let ep = sample_episode(
                &source,
                cfg.way,
                cfg.shot,
                cfg.queries_per_class,
                &mut stream(cfg.seed, &[tags::EPISODE, i]),
            )?;
            let ecfg = cfg.expand_config();
            let pairs = if ecfg.uses_wsol() {
                let locs = learner.localize_items(&learner.params, &ep.support, ep.way, &cfg)?;
                Some(
                    ep.support
                        .iter()
                        .zip(&locs)
                        .map(|(it, l)| split_fg_bg(&it.image.image, Some(l.bbox)))
                        .collect::<Vec<_>>(),
                )
            } else {
                None
            };
            let set = build_expanded_set(
                &ep.support,
                ep.way,
                pairs.as_deref(),
                &ecfg,
                &mut stream(cfg.seed, &[tags::EXPAND, i]),
            )?;
            viz::save_png(&viz::expansion_grid(&set), &out)?;
            let provenance: Vec<_> = set.samples.iter().map(|s| &s.provenance).collect();
            emit_json(&provenance, Some(&out.with_extension("json")))?;
            say(&format!("wrote {} samples to {}", set.len(), out.display()));
            Ok(())
        }
        Command::SynthExport { family, out } => {
            let cfg = common.preset_config()?;
            let Some(fam) = TextureFamily::from_letter(family.to_ascii_uppercase()) else {
                bail!("unknown family `{family}` (expected A, B or C)");
            };
            let coll = generate_synthetic_domain(
                cfg.data_seed,
                synth::CATALOG.len(),
                cfg.images_per_class,
                fam,
                cfg.side,
            )?;
            export_collection(&coll, &out)?;
            let mut boxes = BTreeMap::new();
            for class in &coll.classes {
                for (i, img) in class.images.iter().enumerate() {
                    boxes.insert(format!("{}/{i:05}.png", class.name), img.gt_box);
                }
            }
            emit_json(&boxes, Some(&out.join("boxes.json")))?;
            say(&format!(
                "wrote {} images in {} classes to {}",
                coll.num_images(),
                coll.classes.len(),
                out.display()
            ));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
