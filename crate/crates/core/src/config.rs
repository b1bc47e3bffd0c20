//! Run configuration: a flat `key=value` file with dotted section keys,
//! `#` comments, and flag overrides applied on top. Every key has a
//! default; the canonical rendering is hashed into each artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{NegativeSource, SplitPlan};
use crate::error::{Error, Result};
use crate::losses::Formulation;
use crate::nn::{Architecture, SignetWidths};
use crate::preprocess::PreprocessConfig;
use crate::seed::derive_seed;
use crate::training::TrainConfig;
use crate::wd::{KernelKind, WdConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// The `<root>/<dataset>` directory.
    pub path: PathBuf,
    pub exploitation_users: u32,
    pub validation_users: u32,
    /// Zero means every remaining user.
    pub development_users: u32,
    pub references: usize,
    pub negatives: NegativeSource,
    pub holdout_percent: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            path: PathBuf::from("data/synthetic"),
            exploitation_users: 10,
            validation_users: 0,
            development_users: 0,
            references: 5,
            negatives: NegativeSource::Development,
            holdout_percent: 10,
        }
    }
}

impl DatasetConfig {
    pub fn plan(&self, num_users: u32) -> Result<SplitPlan> {
        let fixed = self.exploitation_users + self.validation_users;
        if fixed > num_users {
            return Err(Error::Protocol(format!(
                "{fixed} exploitation and validation users requested from {num_users}"
            )));
        }
        let development = match self.development_users {
            0 => num_users - fixed,
            d if fixed + d <= num_users => d,
            d => {
                return Err(Error::Protocol(format!(
                    "{d} development users do not fit beside {fixed} others in {num_users}"
                )))
            }
        };
        let mut plan = SplitPlan::contiguous(
            self.exploitation_users,
            self.validation_users,
            development,
            self.references,
            self.negatives,
        );
        plan.holdout_percent = self.holdout_percent;
        plan.validate(num_users)?;
        Ok(plan)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Writer-dependent trainings on independently drawn splits.
    pub replications: usize,
    /// Images per inference batch when extracting features.
    pub feature_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            replications: 10,
            feature_batch: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub preprocess: PreprocessConfig,
    pub network: SignetWidths,
    pub training: TrainConfig,
    pub wd: WdConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 0,
            dataset: DatasetConfig::default(),
            preprocess: PreprocessConfig::with_canvas(400, 600),
            network: SignetWidths::default(),
            training: TrainConfig::default(),
            wd: WdConfig::default(),
            eval: EvalConfig::default(),
        };
        cfg.training.seed = derive_seed(0, "train-cnn");
        cfg
    }
}

/// Artifact families, each hashed over the keys it depends on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Preprocess,
    Cnn,
    Full,
}

impl Stage {
    fn covers(self, key: &str) -> bool {
        let pre = key == "dataset.path" || key.starts_with("preprocess.");
        match self {
            Stage::Preprocess => pre,
            Stage::Cnn => {
                pre || key == "seed"
                    || key.starts_with("dataset.")
                    || key.starts_with("network.")
                    || key.starts_with("training.")
                    || key.starts_with("loss.")
            }
            Stage::Full => true,
        }
    }
}

fn dims(h: usize, w: usize) -> String {
    format!("{h}x{w}")
}

fn parse_dims(key: &str, v: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("{key}: expected HxW, got `{v}`"));
    let (h, w) = v.split_once('x').ok_or_else(bad)?;
    Ok((
        h.trim().parse().map_err(|_| bad())?,
        w.trim().parse().map_err(|_| bad())?,
    ))
}

fn parse_list<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = v
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated integers")))?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated integers")))
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Canonical `(key, value)` pairs, sorted by key.
    pub fn pairs(&self) -> BTreeMap<String, String> {
        let d = &self.dataset;
        let p = &self.preprocess;
        let t = &self.training;
        let w = &self.wd;
        let entries: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("dataset.path", d.path.display().to_string()),
            (
                "dataset.exploitation_users",
                d.exploitation_users.to_string(),
            ),
            ("dataset.validation_users", d.validation_users.to_string()),
            ("dataset.development_users", d.development_users.to_string()),
            ("dataset.references", d.references.to_string()),
            ("dataset.negatives", d.negatives.name().to_string()),
            ("dataset.holdout_percent", d.holdout_percent.to_string()),
            ("preprocess.canvas", dims(p.canvas_height, p.canvas_width)),
            ("preprocess.resize", dims(p.resize_height, p.resize_width)),
            ("preprocess.crop", dims(p.input_height, p.input_width)),
            ("preprocess.input_scale", p.input_scale.to_string()),
            ("network.conv", join(&self.network.conv)),
            ("network.fc", join(&self.network.fc)),
            ("training.batch_size", t.batch_size.to_string()),
            ("training.momentum", t.momentum.to_string()),
            ("training.weight_decay", t.weight_decay.to_string()),
            ("training.epochs", t.epochs.to_string()),
            ("training.lr_initial", t.lr_initial.to_string()),
            ("training.lr_drop_factor", t.lr_drop_factor.to_string()),
            ("training.lr_drop_every", t.lr_drop_every.to_string()),
            ("training.head_init_std", t.head_init_std.to_string()),
            ("loss.formulation", t.loss.formulation.name().to_string()),
            ("loss.lambda", t.loss.lambda.to_string()),
            ("wd.kernel", w.kernel.name().to_string()),
            ("wd.c_minus", w.c_minus.to_string()),
            ("wd.gamma", w.gamma.to_string()),
            ("wd.tolerance", w.solver.tolerance.to_string()),
            (
                "wd.max_iter_per_sample",
                w.solver.max_iter_per_sample.to_string(),
            ),
            ("wd.cache_mb", (w.solver.cache_bytes >> 20).to_string()),
            ("eval.replications", self.eval.replications.to_string()),
            ("eval.feature_batch", self.eval.feature_batch.to_string()),
        ];
        entries
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    /// Sets one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let d = &mut self.dataset;
        let p = &mut self.preprocess;
        let t = &mut self.training;
        let w = &mut self.wd;
        match key {
            "seed" => {
                self.seed = parse_num(key, v)?;
                t.seed = derive_seed(self.seed, "train-cnn");
            }
            "dataset.path" => d.path = PathBuf::from(v),
            "dataset.exploitation_users" => d.exploitation_users = parse_num(key, v)?,
            "dataset.validation_users" => d.validation_users = parse_num(key, v)?,
            "dataset.development_users" => d.development_users = parse_num(key, v)?,
            "dataset.references" => d.references = parse_num(key, v)?,
            "dataset.negatives" => {
                d.negatives = NegativeSource::parse(v).ok_or_else(|| {
                    Error::Config(format!("{key}: `{v}` is not development|other_users"))
                })?
            }
            "dataset.holdout_percent" => d.holdout_percent = parse_num(key, v)?,
            "preprocess.canvas" => (p.canvas_height, p.canvas_width) = parse_dims(key, v)?,
            "preprocess.resize" => (p.resize_height, p.resize_width) = parse_dims(key, v)?,
            "preprocess.crop" => (p.input_height, p.input_width) = parse_dims(key, v)?,
            "preprocess.input_scale" => p.input_scale = parse_num(key, v)?,
            "network.conv" => self.network.conv = parse_list(key, v)?,
            "network.fc" => self.network.fc = parse_list(key, v)?,
            "training.batch_size" => t.batch_size = parse_num(key, v)?,
            "training.momentum" => t.momentum = parse_num(key, v)?,
            "training.weight_decay" => t.weight_decay = parse_num(key, v)?,
            "training.epochs" => t.epochs = parse_num(key, v)?,
            "training.lr_initial" => t.lr_initial = parse_num(key, v)?,
            "training.lr_drop_factor" => t.lr_drop_factor = parse_num(key, v)?,
            "training.lr_drop_every" => t.lr_drop_every = parse_num(key, v)?,
            "training.head_init_std" => t.head_init_std = parse_num(key, v)?,
            "loss.formulation" => {
                t.loss.formulation = Formulation::parse(v)
                    .ok_or_else(|| Error::Config(format!("{key}: unknown formulation `{v}`")))?
            }
            "loss.lambda" => t.loss.lambda = parse_num(key, v)?,
            "wd.kernel" => {
                w.kernel = KernelKind::parse(v)
                    .ok_or_else(|| Error::Config(format!("{key}: `{v}` is not linear|rbf")))?
            }
            "wd.c_minus" => w.c_minus = parse_num(key, v)?,
            "wd.gamma" => w.gamma = parse_num(key, v)?,
            "wd.tolerance" => w.solver.tolerance = parse_num(key, v)?,
            "wd.max_iter_per_sample" => w.solver.max_iter_per_sample = parse_num(key, v)?,
            "wd.cache_mb" => w.solver.cache_bytes = parse_num::<usize>(key, v)? << 20,
            "eval.replications" => self.eval.replications = parse_num(key, v)?,
            "eval.feature_batch" => self.eval.feature_batch = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.pairs()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn hash(&self, stage: Stage) -> u64 {
        let mut h = Sha256::new();
        for (k, v) in self.pairs().iter().filter(|(k, _)| stage.covers(k)) {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.training.validate()?;
        self.wd.validate()?;
        if self.dataset.references == 0 {
            return Err(Error::Config("dataset.references must be positive".into()));
        }
        if self.dataset.holdout_percent >= 100 {
            return Err(Error::Config(
                "dataset.holdout_percent must be below 100".into(),
            ));
        }
        if self.eval.replications == 0 || self.eval.feature_batch == 0 {
            return Err(Error::Config(
                "eval.replications and eval.feature_batch must be positive".into(),
            ));
        }
        self.architecture(2)?.validate()
    }

    /// The network for `num_users` development users under the configured
    /// formulation and input size.
    pub fn architecture(&self, num_users: usize) -> Result<Architecture> {
        let f = self.training.loss.formulation;
        let mut arch = Architecture::signet(
            self.network,
            Some(f.user_classes(num_users)),
            f.has_forgery_head(),
        );
        arch.input = [1, self.preprocess.input_height, self.preprocess.input_width];
        arch.validate()?;
        Ok(arch)
    }
}
