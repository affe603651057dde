//! Run configuration: a line-oriented `key = value` file with `#` comments.
//!
//! ```text
//! interactions = data/interactions.tsv
//! visual_features = data/visual.feat
//! textual_features = data/textual.feat
//! output_dir = runs/mm
//! variant = multimodal_iris
//! loss = pointwise_log
//! max_epochs = 50
//! patience = 5
//! embedding_dim = 16
//! ```
//!
//! Relative paths resolve against the directory holding the config file.
//! Every hyper-parameter key of [`Hyperparams`] is accepted; anything else
//! is rejected.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::MIN_POSITIVES_FOR_SPLIT;
use crate::error::{Error, Result};
use crate::model::{Hyperparams, Variant};
use crate::training::LossKind;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub interactions: PathBuf,
    pub visual_features: Option<PathBuf>,
    pub textual_features: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub variant: Variant,
    pub loss: LossKind,
    pub hp: Hyperparams,
    pub max_epochs: usize,
    pub patience: usize,
    /// Users with fewer interactions are dropped at load time.
    pub min_user_interactions: usize,
}

impl RunConfig {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("model.ckpt")
    }

    pub fn report_path(&self) -> PathBuf {
        self.output_dir.join("train_report.csv")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.output_dir.join("metrics.csv")
    }

    /// The load-time filter actually applied: leave-one-out needs at least
    /// three positives per user.
    pub fn effective_min_interactions(&self) -> usize {
        self.min_user_interactions.max(MIN_POSITIVES_FOR_SPLIT)
    }

    /// Checks that the files the chosen variant needs exist and that the
    /// hyper-parameters are in range.
    pub fn validate(&self) -> Result<()> {
        self.hp.validate().map_err(Error::Config)?;
        let must_exist = |what: &str, path: &Path| {
            if path.is_file() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} file {} does not exist", path.display())))
            }
        };
        must_exist("interactions", &self.interactions)?;
        if self.variant.uses_visual() {
            let path = self
                .visual_features
                .as_deref()
                .ok_or_else(|| Error::Config(format!("{} requires visual_features", self.variant)))?;
            must_exist("visual feature", path)?;
        }
        if self.variant.uses_textual() {
            let path = self
                .textual_features
                .as_deref()
                .ok_or_else(|| Error::Config(format!("{} requires textual_features", self.variant)))?;
            must_exist("textual feature", path)?;
        }
        if let (Variant::ImageIris, Some(path)) = (self.variant, self.textual_features.as_deref()) {
            must_exist("textual feature", path)?;
        }
        Ok(())
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut interactions = None;
        let mut visual_features = None;
        let mut textual_features = None;
        let mut output_dir = None;
        let mut variant = None;
        let mut loss = LossKind::default();
        let mut hp = Hyperparams::default();
        let mut max_epochs = 50;
        let mut patience = 5;
        let mut min_user_interactions = MIN_POSITIVES_FOR_SPLIT;
        let mut seen = HashSet::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected 'key = value', found '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_owned()) {
                return Err(err(format!("duplicate key '{key}'")));
            }
            let path = || base_dir.join(value);
            let count = || {
                value
                    .parse::<usize>()
                    .map_err(|_| err(format!("invalid value '{value}' for {key}")))
            };
            match key {
                "interactions" => interactions = Some(path()),
                "visual_features" => visual_features = Some(path()),
                "textual_features" => textual_features = Some(path()),
                "output_dir" => output_dir = Some(path()),
                "variant" => variant = Some(value.parse::<Variant>().map_err(err)?),
                "loss" => loss = value.parse().map_err(err)?,
                "max_epochs" => max_epochs = count()?,
                "patience" => patience = count()?,
                "min_user_interactions" => min_user_interactions = count()?,
                _ if Hyperparams::KEYS.contains(&key) => hp.set(key, value).map_err(err)?,
                _ => return Err(err(format!("unknown key '{key}'"))),
            }
        }

        Ok(RunConfig {
            interactions: interactions.ok_or_else(|| Error::Config("missing key 'interactions'".into()))?,
            visual_features,
            textual_features,
            output_dir: output_dir.unwrap_or_else(|| base_dir.to_path_buf()),
            variant: variant.ok_or_else(|| Error::Config("missing key 'variant'".into()))?,
            loss,
            hp,
            max_epochs,
            patience,
            min_user_interactions,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }
}
