//! Training configuration, read from TOML with field names matching
//! [`TrainConfig`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::EncoderConfig;
use crate::data::{DomainSource, DomainSpec, Split, TextureFamily, CHANNELS};
use crate::error::{Error, Result};
use crate::expand::ExpandConfig;
use crate::heads::{Distance, HeadKind};
use crate::inner::InnerConfig;
use crate::wsol::CamMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    /// Inner adaptation steps.
    pub alpha: usize,
    /// Rotation loss weight.
    pub lambda: f64,
    pub inner_lr: f64,
    pub inner_momentum: f64,
    pub inner_queries_per_class: usize,
    pub outer_lr: f64,
    /// Keep θ′ as the starting point of the outer step. When false the outer
    /// gradient is taken at θ′ but applied to the pre-adaptation weights.
    pub carry_adapted: bool,
    pub episodes: usize,
    pub seed: u64,
    pub head: HeadKind,
    pub distance: Distance,

    pub wsol_rot: bool,
    pub wsol_exc_rot: bool,
    pub whole_rot: bool,
    pub td_enabled: bool,
    pub g_self: usize,
    pub g_exch: usize,
    pub whole_rot_count: usize,
    pub tau: f64,
    pub cam: CamMode,
    pub p_rc: f64,
    pub rc_sigma: f64,

    pub side: usize,
    pub width: usize,
    pub blocks: usize,
    pub norm_momentum: f64,
    pub rotation_hidden: usize,

    /// Source domain: `synthA` / `synthB` / `synthC` or a class-per-directory path.
    pub source: String,
    /// Target domain for evaluation, same syntax as `source`.
    pub target: String,
    /// Images per class for synthetic domains.
    pub images_per_class: usize,
    pub data_seed: u64,
    pub min_images: usize,

    /// Validation cadence in episodes; 0 disables validation.
    pub val_every: usize,
    pub val_episodes: usize,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 1,
            queries_per_class: 15,
            alpha: 4,
            lambda: 0.1,
            inner_lr: 1e-3,
            inner_momentum: 0.9,
            inner_queries_per_class: 5,
            outer_lr: 1e-4,
            carry_adapted: true,
            episodes: 200,
            seed: 0,
            head: HeadKind::Proto,
            distance: Distance::SquaredEuclidean,
            wsol_rot: true,
            wsol_exc_rot: true,
            whole_rot: false,
            td_enabled: true,
            g_self: 1,
            g_exch: 3,
            whole_rot_count: 3,
            tau: 0.2,
            cam: CamMode::ChannelMean,
            p_rc: 0.5,
            rc_sigma: 0.1,
            side: 84,
            width: 64,
            blocks: 4,
            norm_momentum: 0.1,
            rotation_hidden: 256,
            source: "synthA".into(),
            target: "synthB".into(),
            images_per_class: 60,
            data_seed: 0,
            min_images: 1,
            val_every: 50,
            val_episodes: 100,
            eval_episodes: 600,
        }
    }
}

pub const DATA_ROOT_ENV: &str = "SELFTAUGHT_DATA_ROOT";

impl TrainConfig {
    /// Reduced model and episode sizes for single-core CPU runs.
    pub fn desk() -> Self {
        Self {
            side: 48,
            width: 32,
            blocks: 3,
            queries_per_class: 8,
            outer_lr: 1e-3,
            images_per_class: 40,
            ..Self::default()
        }
    }

    /// Named preset: `full` (defaults) or `desk`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected full | desk)"
            ))),
        }
    }

    /// Parses TOML on top of `base`: keys present in the file replace the
    /// corresponding fields.
    pub fn from_toml_str(text: &str, base: &TrainConfig) -> Result<Self> {
        let overlay: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overlay {
            merged.insert(k, v);
        }
        let cfg: TrainConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path, base: &TrainConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.way < 2 {
            return bad(format!("way = {}, need at least 2", self.way));
        }
        if self.shot == 0 || self.queries_per_class == 0 {
            return bad("shot and queries_per_class must be positive".into());
        }
        if self.episodes == 0 {
            return bad("episodes must be at least 1".into());
        }
        for (name, v) in [("inner_lr", self.inner_lr), ("outer_lr", self.outer_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v}, must be positive"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda = {}, must be non-negative", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau = {} outside [0, 1]", self.tau));
        }
        if !(0.0..1.0).contains(&self.inner_momentum) || !(0.0..=1.0).contains(&self.norm_momentum)
        {
            return bad("momentum values must lie in [0, 1)".into());
        }
        self.encoder_config().validate()?;
        self.expand_config().validate()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: CHANNELS,
            width: self.width,
            blocks: self.blocks,
            side: self.side,
        }
    }

    pub fn expand_config(&self) -> ExpandConfig {
        ExpandConfig {
            g_self: self.g_self,
            g_exch: self.g_exch,
            whole_rot_count: self.whole_rot_count,
            wsol_rot: self.wsol_rot,
            wsol_exc_rot: self.wsol_exc_rot,
            whole_rot: self.whole_rot,
            p_rc: self.p_rc,
            rc_sigma: self.rc_sigma,
        }
    }

    pub fn inner_config(&self) -> InnerConfig {
        InnerConfig {
            alpha: self.alpha,
            lambda: self.lambda,
            lr: self.inner_lr,
            momentum: self.inner_momentum,
            queries_per_class: self.inner_queries_per_class,
            rotation_hidden: self.rotation_hidden,
        }
    }

    /// True when any expansion variant is produced.
    pub fn expands(&self) -> bool {
        (self.wsol_rot && self.g_self > 0)
            || (self.wsol_exc_rot && self.g_exch > 0)
            || (self.whole_rot && self.whole_rot_count > 0)
    }

    pub fn domain(&self, name: &str, split: Split, data_root: Option<&Path>) -> Result<DomainSpec> {
        resolve_domain(
            name,
            split,
            self.side,
            self.images_per_class,
            self.data_seed,
            self.min_images,
            data_root,
        )
    }
}

/// `synthA`..`synthC` select a synthetic texture family; anything else is a
/// directory, resolved against `data_root` when relative.
pub fn resolve_domain(
    name: &str,
    split: Split,
    side: usize,
    images_per_class: usize,
    data_seed: u64,
    min_images: usize,
    data_root: Option<&Path>,
) -> Result<DomainSpec> {
    if let Some(letter) = name.strip_prefix("synth") {
        if let Some(family) = letter
            .chars()
            .next()
            .filter(|_| letter.len() == 1)
            .and_then(TextureFamily::from_letter)
        {
            let mut spec = DomainSpec::synthetic(family, data_seed, images_per_class, split, side);
            spec.min_images = min_images;
            return Ok(spec);
        }
    }
    let path = PathBuf::from(name);
    let path = match data_root {
        Some(root) if path.is_relative() => root.join(path),
        _ => path,
    };
    let label = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_owned());
    Ok(DomainSpec {
        name: label,
        source: DomainSource::Directory(path),
        split,
        classes: None,
        side,
        min_images,
    })
}
