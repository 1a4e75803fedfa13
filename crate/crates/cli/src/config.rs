//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use attnpyr_core::eval::{Metric, Protocol};
use attnpyr_core::losses::LossConfig;
use attnpyr_core::model::{ModelConfig, SyntheticSpec, TrainConfig};
use attnpyr_core::pyramid::{AttentionKind, PyramidConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Level i splits into radix^i parts.
    Split,
    /// Same attention stacked per level, no splitting (radix 1).
    Stacked,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Split => "split",
            Mode::Stacked => "stacked",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "split" => Ok(Mode::Split),
            "stacked" => Ok(Mode::Stacked),
            _ => Err(format!("expected split or stacked, got {s:?}")),
        }
    }
}

/// Which split plays the query role in `eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySplit {
    Query,
    Gallery,
}

impl FromStr for QuerySplit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "query" => Ok(QuerySplit::Query),
            "gallery" => Ok(QuerySplit::Gallery),
            _ => Err(format!("expected query or gallery, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub pyramid_kind: AttentionKind,
    pub pyramid_radix: usize,
    pub pyramid_levels: usize,
    pub pyramid_mode: Mode,
    pub model_channels: Vec<usize>,
    pub loss_margin: f64,
    pub loss_epsilon: f64,
    pub loss_lambda: f64,
    pub optim_lr: f64,
    pub optim_epochs: usize,
    pub optim_milestones: Vec<usize>,
    pub optim_lr_factor: f64,
    pub batch_p: usize,
    pub batch_k: usize,
    pub data: SyntheticSpec,
    pub data_seed: u64,
    pub data_dir: Option<PathBuf>,
    pub eval_metric: Metric,
    pub eval_flip_average: bool,
    pub eval_every: usize,
    pub eval_batch: usize,
    pub eval_camera_filter: bool,
    pub eval_query_split: QuerySplit,
    pub eval_dump_embeddings: bool,
    pub eval_dump_attention: usize,
    pub ablate_levels: Vec<usize>,
    pub ablate_radix: Vec<usize>,
    pub ablate_modes: Vec<Mode>,
    pub ablate_workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pyramid_kind: AttentionKind::Channel,
            pyramid_radix: 2,
            pyramid_levels: 2,
            pyramid_mode: Mode::Split,
            model_channels: vec![16, 32, 64, 128],
            loss_margin: 0.3,
            loss_epsilon: 0.1,
            loss_lambda: 1.0,
            optim_lr: 4e-4,
            optim_epochs: 60,
            optim_milestones: vec![30, 45],
            optim_lr_factor: 0.1,
            batch_p: 8,
            batch_k: 4,
            data: SyntheticSpec::default(),
            data_seed: 1,
            data_dir: None,
            eval_metric: Metric::Cosine,
            eval_flip_average: true,
            eval_every: 1,
            eval_batch: 64,
            eval_camera_filter: true,
            eval_query_split: QuerySplit::Query,
            eval_dump_embeddings: false,
            eval_dump_attention: 0,
            ablate_levels: vec![0, 1, 2, 3],
            ablate_radix: vec![1, 2, 4, 8],
            ablate_modes: vec![Mode::Split, Mode::Stacked],
            ablate_workers: 1,
        }
    }
}

/// Every accepted key with its one-line description, in dump order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "model initialization and batch sampling seed"),
    ("pyramid.kind", "channel | spatial"),
    ("pyramid.radix", "split radix r; level i has r^i parts"),
    ("pyramid.levels", "pyramid depth L per stage (0 = no attention)"),
    ("pyramid.mode", "split | stacked (stacked ignores the radix)"),
    ("model.channels", "output channels of each conv stage"),
    ("loss.margin", "triplet margin m"),
    ("loss.epsilon", "label smoothing epsilon"),
    ("loss.lambda", "weight of the triplet term"),
    ("optim.lr", "initial Adam learning rate"),
    ("optim.epochs", "training epochs"),
    ("optim.milestones", "epochs at which the rate is multiplied by optim.lr_factor"),
    ("optim.lr_factor", "step decay factor"),
    ("batch.p", "identities per batch"),
    ("batch.k", "images per identity per batch"),
    ("data.seed", "synthetic dataset seed"),
    ("data.dir", "load the dataset from this directory instead of synthesizing (empty = synthesize)"),
    ("data.train_identities", "training identities"),
    ("data.test_identities", "query/gallery identities"),
    ("data.train_per_identity", "training images per identity"),
    ("data.query_per_identity", "query images per identity"),
    ("data.gallery_per_identity", "gallery images per identity"),
    ("data.height", "image height"),
    ("data.width", "image width"),
    ("data.jitter", "maximum translation in pixels"),
    ("data.brightness", "maximum relative brightness change"),
    ("data.occlusion", "probability of an occluding rectangle"),
    ("data.occlusion_min", "smallest occluder side, fraction of the image side"),
    ("data.occlusion_max", "largest occluder side, fraction of the image side"),
    ("data.occlude_query_only", "occlude query images only"),
    ("data.flip", "random horizontal mirroring"),
    ("data.clutter", "background noise amplitude and camera tint"),
    ("eval.metric", "cosine | euclidean"),
    ("eval.flip_average", "average features of each image and its mirror"),
    ("eval.every", "evaluate every N epochs during training (0 = final only)"),
    ("eval.batch", "images per inference batch"),
    ("eval.camera_filter", "drop gallery items with the query's identity and camera"),
    ("eval.query_split", "query | gallery (gallery = gallery against itself)"),
    ("eval.dump_embeddings", "write query and gallery features as tensor files"),
    ("eval.dump_attention", "dump attention gates of the first N queries"),
    ("ablate.levels", "pyramid depths swept by ablate"),
    ("ablate.radix", "radices swept by ablate"),
    ("ablate.modes", "modes swept by ablate"),
    ("ablate.workers", "concurrent ablation cells"),
];

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| format!("bad list item {p:?}")))
        .collect()
}

fn parse<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: ToString,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

impl RunConfig {
    /// Current value of `key` in its textual form.
    pub fn get(&self, key: &str) -> Option<String> {
        let d = &self.data;
        Some(match key {
            "seed" => self.seed.to_string(),
            "pyramid.kind" => self.pyramid_kind.name().to_string(),
            "pyramid.radix" => self.pyramid_radix.to_string(),
            "pyramid.levels" => self.pyramid_levels.to_string(),
            "pyramid.mode" => self.pyramid_mode.name().to_string(),
            "model.channels" => list(&self.model_channels),
            "loss.margin" => self.loss_margin.to_string(),
            "loss.epsilon" => self.loss_epsilon.to_string(),
            "loss.lambda" => self.loss_lambda.to_string(),
            "optim.lr" => self.optim_lr.to_string(),
            "optim.epochs" => self.optim_epochs.to_string(),
            "optim.milestones" => list(&self.optim_milestones),
            "optim.lr_factor" => self.optim_lr_factor.to_string(),
            "batch.p" => self.batch_p.to_string(),
            "batch.k" => self.batch_k.to_string(),
            "data.seed" => self.data_seed.to_string(),
            "data.dir" => self
                .data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "data.train_identities" => d.train_identities.to_string(),
            "data.test_identities" => d.test_identities.to_string(),
            "data.train_per_identity" => d.train_per_identity.to_string(),
            "data.query_per_identity" => d.query_per_identity.to_string(),
            "data.gallery_per_identity" => d.gallery_per_identity.to_string(),
            "data.height" => d.height.to_string(),
            "data.width" => d.width.to_string(),
            "data.jitter" => d.jitter.to_string(),
            "data.brightness" => d.brightness.to_string(),
            "data.occlusion" => d.occlusion.to_string(),
            "data.occlusion_min" => d.occlusion_size.0.to_string(),
            "data.occlusion_max" => d.occlusion_size.1.to_string(),
            "data.occlude_query_only" => d.occlude_query_only.to_string(),
            "data.flip" => d.flip.to_string(),
            "data.clutter" => d.clutter.to_string(),
            "eval.metric" => match self.eval_metric {
                Metric::Cosine => "cosine",
                Metric::Euclidean => "euclidean",
            }
            .to_string(),
            "eval.flip_average" => self.eval_flip_average.to_string(),
            "eval.every" => self.eval_every.to_string(),
            "eval.batch" => self.eval_batch.to_string(),
            "eval.camera_filter" => self.eval_camera_filter.to_string(),
            "eval.query_split" => match self.eval_query_split {
                QuerySplit::Query => "query",
                QuerySplit::Gallery => "gallery",
            }
            .to_string(),
            "eval.dump_embeddings" => self.eval_dump_embeddings.to_string(),
            "eval.dump_attention" => self.eval_dump_attention.to_string(),
            "ablate.levels" => list(&self.ablate_levels),
            "ablate.radix" => list(&self.ablate_radix),
            "ablate.modes" => self.ablate_modes.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
            "ablate.workers" => self.ablate_workers.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        let bad = |msg: String| CliError::Config {
            key: key.to_string(),
            message: msg,
        };
        let d = &mut self.data;
        let r: Result<(), String> = (|| {
            match key {
                "seed" => self.seed = parse(v)?,
                "pyramid.kind" => self.pyramid_kind = parse(v)?,
                "pyramid.radix" => self.pyramid_radix = parse(v)?,
                "pyramid.levels" => self.pyramid_levels = parse(v)?,
                "pyramid.mode" => self.pyramid_mode = v.parse()?,
                "model.channels" => self.model_channels = parse_list(v)?,
                "loss.margin" => self.loss_margin = parse(v)?,
                "loss.epsilon" => self.loss_epsilon = parse(v)?,
                "loss.lambda" => self.loss_lambda = parse(v)?,
                "optim.lr" => self.optim_lr = parse(v)?,
                "optim.epochs" => self.optim_epochs = parse(v)?,
                "optim.milestones" => self.optim_milestones = parse_list(v)?,
                "optim.lr_factor" => self.optim_lr_factor = parse(v)?,
                "batch.p" => self.batch_p = parse(v)?,
                "batch.k" => self.batch_k = parse(v)?,
                "data.seed" => self.data_seed = parse(v)?,
                "data.dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
                "data.train_identities" => d.train_identities = parse(v)?,
                "data.test_identities" => d.test_identities = parse(v)?,
                "data.train_per_identity" => d.train_per_identity = parse(v)?,
                "data.query_per_identity" => d.query_per_identity = parse(v)?,
                "data.gallery_per_identity" => d.gallery_per_identity = parse(v)?,
                "data.height" => d.height = parse(v)?,
                "data.width" => d.width = parse(v)?,
                "data.jitter" => d.jitter = parse(v)?,
                "data.brightness" => d.brightness = parse(v)?,
                "data.occlusion" => d.occlusion = parse(v)?,
                "data.occlusion_min" => d.occlusion_size.0 = parse(v)?,
                "data.occlusion_max" => d.occlusion_size.1 = parse(v)?,
                "data.occlude_query_only" => d.occlude_query_only = parse(v)?,
                "data.flip" => d.flip = parse(v)?,
                "data.clutter" => d.clutter = parse(v)?,
                "eval.metric" => self.eval_metric = parse(v)?,
                "eval.flip_average" => self.eval_flip_average = parse(v)?,
                "eval.every" => self.eval_every = parse(v)?,
                "eval.batch" => self.eval_batch = parse(v)?,
                "eval.camera_filter" => self.eval_camera_filter = parse(v)?,
                "eval.query_split" => self.eval_query_split = v.parse()?,
                "eval.dump_embeddings" => self.eval_dump_embeddings = parse(v)?,
                "eval.dump_attention" => self.eval_dump_attention = parse(v)?,
                "ablate.levels" => self.ablate_levels = parse_list(v)?,
                "ablate.radix" => self.ablate_radix = parse_list(v)?,
                "ablate.modes" => self.ablate_modes = parse_list(v)?,
                "ablate.workers" => self.ablate_workers = parse(v)?,
                _ => return Err("unknown key".to_string()),
            }
            Ok(())
        })();
        r.map_err(bad)
    }

    /// Apply a `key = value` file. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CliError::Config {
                key: format!("line {}", n + 1),
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            key: "--config".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        self.apply_text(&text)
    }

    /// Apply `key=value` overrides.
    pub fn apply_sets(&mut self, sets: &[String]) -> Result<(), CliError> {
        for s in sets {
            let (k, v) = s.split_once('=').ok_or_else(|| CliError::Config {
                key: s.clone(),
                message: "expected key=value".into(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn resolved(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .map(|(k, _)| (k.to_string(), self.get(k).expect("every listed key has a value")))
            .collect()
    }

    /// Config file text that reproduces `self`.
    pub fn to_text(&self, with_docs: bool) -> String {
        let mut out = String::new();
        for (k, doc) in KEYS {
            if with_docs {
                let _ = writeln!(out, "# {doc}");
            }
            let _ = writeln!(out, "{k} = {}", self.get(k).unwrap());
        }
        out
    }

    /// Range checks that do not need the model geometry.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, message: &str| {
            Err(CliError::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.pyramid_radix == 0 {
            return bad("pyramid.radix", "must be at least 1");
        }
        if self.model_channels.is_empty() || self.model_channels.contains(&0) {
            return bad("model.channels", "need at least one stage, all widths positive");
        }
        if !(self.optim_lr > 0.0 && self.optim_lr.is_finite()) {
            return bad("optim.lr", "must be positive");
        }
        if !(self.optim_lr_factor > 0.0) {
            return bad("optim.lr_factor", "must be positive");
        }
        if self.batch_p < 2 {
            return bad("batch.p", "triplet mining needs at least 2 identities per batch");
        }
        if self.batch_k < 2 {
            return bad("batch.k", "triplet mining needs at least 2 images per identity");
        }
        if self.eval_batch == 0 {
            return bad("eval.batch", "must be positive");
        }
        if self.ablate_workers == 0 {
            return bad("ablate.workers", "must be positive");
        }
        let loss = self.loss_config(2);
        if let Err(e) = loss.validate() {
            let key = if !(loss.margin >= 0.0) { "loss.margin" } else { "loss.epsilon" };
            return bad(key, &e.to_string());
        }
        if !(self.loss_lambda >= 0.0 && self.loss_lambda.is_finite()) {
            return bad("loss.lambda", "must be a finite value >= 0");
        }
        if self.data_dir.is_none() {
            self.data.validate().map_err(|e| CliError::Config {
                key: "data".into(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn pyramid(&self) -> PyramidConfig {
        match self.pyramid_mode {
            Mode::Split => PyramidConfig::new(self.pyramid_kind, self.pyramid_radix, self.pyramid_levels),
            Mode::Stacked => PyramidConfig::stacked(self.pyramid_kind, self.pyramid_levels),
        }
    }

    pub fn model_config(&self, classes: usize, height: usize, width: usize) -> ModelConfig {
        ModelConfig {
            channels: self.model_channels.clone(),
            height,
            width,
            classes,
            pyramid: self.pyramid(),
            ..ModelConfig::default()
        }
    }

    pub fn loss_config(&self, classes: usize) -> LossConfig {
        LossConfig {
            margin: self.loss_margin,
            epsilon: self.loss_epsilon,
            lambda: self.loss_lambda,
            classes,
        }
    }

    pub fn train_config(&self, classes: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.optim_epochs,
            lr: self.optim_lr,
            milestones: self.optim_milestones.clone(),
            lr_factor: self.optim_lr_factor,
            p: self.batch_p,
            k: self.batch_k,
            loss: self.loss_config(classes),
            seed: sampler_seed(self.seed),
        }
    }

    pub fn protocol(&self) -> Protocol {
        Protocol {
            same_camera_filter: self.eval_camera_filter,
            ..Protocol::default()
        }
    }
}

/// Batch sampling stream, kept apart from the initialization stream.
pub fn sampler_seed(seed: u64) -> u64 {
    seed ^ 0x5a3c_e11e_d00d_f00d
}
