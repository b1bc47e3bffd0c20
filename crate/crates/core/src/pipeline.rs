//! The two-phase experiment: preprocess, train the CNN on development
//! users, finalize batch-norm statistics, extract features, then per
//! replication draw a split, train one SVM per enrolled user, score and
//! evaluate. Every stage writes an artifact carrying the config hash of
//! what produced it and is skipped on rerun when that artifact is present.
//!
//! Processed-image file: magic `SGPI` | version u32 | config hash u64 |
//! count u32 | records of (user u32, kind u8, sample u32, h u32, w u32,
//! u8 pixels).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Stage};
use crate::dataset::{
    build_split, load_index, write_manifest, DatasetIndex, SampleKind, Split, SplitTag, WdGroup,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    eer_global, evaluate, percent, pick_global_threshold, write_scores, EvalReport, ScoredSample,
};
use crate::io::{read_u32, read_u64, read_u8};
use crate::losses::{Formulation, LossConfig};
use crate::nn::checkpoint::{read_checkpoint, write_checkpoint};
use crate::nn::Network;
use crate::preprocess::{preprocess, PreprocessConfig, ProcessedImage, RawImage};
use crate::seed::derive_seed;
use crate::training::{
    evaluate_accuracy, finalize_bn_statistics, init_parameters, read_training_checkpoint, train,
    write_training_checkpoint, EpochMetrics, OptimizerState, TrainingSet,
};
use crate::wd::{
    extract_features, load_model, save_model, train_wd, FeatureRecord, WdConfig, WdModel,
};

pub const PROCESSED_MAGIC: &[u8; 4] = b"SGPI";
const PROCESSED_VERSION: u32 = 1;

/// Sample identity: `(user, kind, sample)`.
pub type SampleKey = (u32, SampleKind, u32);

#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedRecord {
    pub user: u32,
    pub kind: SampleKind,
    pub sample: u32,
    pub image: ProcessedImage,
}

impl ProcessedRecord {
    pub fn key(&self) -> SampleKey {
        (self.user, self.kind, self.sample)
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Use artifacts even when their config hash differs.
    pub force: bool,
    /// Worker threads for per-image and per-user work.
    pub jobs: usize,
    /// Progress lines on stderr.
    pub verbose: bool,
    /// Shared processed-image cache; defaults to `<work>/processed.sgpi`.
    pub processed_cache: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            force: false,
            jobs: 1,
            verbose: false,
            processed_cache: None,
        }
    }
}

impl RunOptions {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name,
            source: Box::new(e),
        },
    })
}

pub fn check_hash(path: &Path, expected: u64, found: u64, force: bool) -> Result<()> {
    if found == expected || force {
        Ok(())
    } else {
        Err(Error::ConfigMismatch {
            path: path.to_path_buf(),
            expected,
            found,
        })
    }
}

/// Writes through a temporary sibling and renames, so a crash never
/// leaves a truncated artifact under the final name.
pub fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        f(&mut w)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs `f` on a pool of `jobs` threads.
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Loads and preprocesses every sample of `index`.
pub fn preprocess_index(
    index: &DatasetIndex,
    pcfg: &PreprocessConfig,
) -> Result<Vec<ProcessedRecord>> {
    pcfg.validate()?;
    index
        .records
        .par_iter()
        .map(|r| {
            let raw = RawImage::load_png(&r.path)?;
            let image = preprocess(&raw, pcfg).map_err(|e| Error::parse(&r.path, e.to_string()))?;
            Ok(ProcessedRecord {
                user: r.user,
                kind: r.kind,
                sample: r.sample,
                image,
            })
        })
        .collect()
}

pub fn write_processed<W: Write>(
    w: &mut W,
    records: &[ProcessedRecord],
    config_hash: u64,
) -> Result<()> {
    w.write_all(PROCESSED_MAGIC)?;
    w.write_all(&PROCESSED_VERSION.to_le_bytes())?;
    w.write_all(&config_hash.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        w.write_all(&r.user.to_le_bytes())?;
        w.write_all(&[r.kind.code()])?;
        w.write_all(&r.sample.to_le_bytes())?;
        let raw = r.image.to_raw();
        w.write_all(&(raw.height() as u32).to_le_bytes())?;
        w.write_all(&(raw.width() as u32).to_le_bytes())?;
        w.write_all(raw.pixels())?;
    }
    Ok(())
}

pub fn read_processed<R: Read>(r: &mut R) -> Result<(Vec<ProcessedRecord>, u64)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PROCESSED_MAGIC {
        return Err(Error::Format("not a processed-image file".into()));
    }
    let version = read_u32(r)?;
    if version != PROCESSED_VERSION {
        return Err(Error::Format(format!(
            "processed-image file version {version}"
        )));
    }
    let hash = read_u64(r)?;
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let user = read_u32(r)?;
        let code = read_u8(r)?;
        let kind = SampleKind::from_code(code)
            .ok_or_else(|| Error::Format(format!("unknown sample kind {code}")))?;
        let sample = read_u32(r)?;
        let h = read_u32(r)? as usize;
        let w = read_u32(r)? as usize;
        let mut pixels = vec![0u8; h * w];
        r.read_exact(&mut pixels)?;
        out.push(ProcessedRecord {
            user,
            kind,
            sample,
            image: ProcessedImage::from_raw(&RawImage::new(h, w, pixels)?),
        });
    }
    Ok((out, hash))
}

/// Preprocessed dataset, from `cache` when it exists with a matching hash.
pub fn processed_stage(
    cfg: &RunConfig,
    index: &DatasetIndex,
    cache: &Path,
    opts: &RunOptions,
) -> Result<Vec<ProcessedRecord>> {
    let hash = cfg.hash(Stage::Preprocess);
    if cache.exists() {
        let (records, found) = read_processed(&mut BufReader::new(File::open(cache)?))?;
        check_hash(cache, hash, found, opts.force)?;
        opts.log(format!(
            "preprocess: reusing {} images from {}",
            records.len(),
            cache.display()
        ));
        return Ok(records);
    }
    let records = preprocess_index(index, &cfg.preprocess)?;
    write_atomic(cache, |w| write_processed(w, &records, hash))?;
    opts.log(format!("preprocess: {} images", records.len()));
    Ok(records)
}

pub fn processed_lookup(records: &[ProcessedRecord]) -> BTreeMap<SampleKey, &ProcessedImage> {
    records.iter().map(|r| (r.key(), &r.image)).collect()
}

/// Development samples under `tag` (`Lc` or `Vc`), labelled by the user's
/// position among the development users.
pub fn cnn_set(
    split: &Split,
    images: &BTreeMap<SampleKey, &ProcessedImage>,
    tag: SplitTag,
    loss: &LossConfig,
) -> Result<TrainingSet> {
    let label: BTreeMap<u32, usize> = split
        .plan
        .development
        .iter()
        .enumerate()
        .map(|(i, &u)| (u, i))
        .collect();
    let mut imgs = Vec::new();
    let mut labels = Vec::new();
    for e in split.tagged(tag) {
        let img = images
            .get(&(e.user, e.kind, e.sample))
            .ok_or_else(|| Error::Index(format!("no processed image for {}", e.path.display())))?;
        imgs.push((*img).clone());
        labels.push((label[&e.user], e.kind.is_forgery()));
    }
    Ok(TrainingSet::new(imgs, labels, split.plan.development.len())?.for_loss(loss))
}

/// Where the CNN stage keeps its artifacts.
#[derive(Clone, Debug)]
pub struct CnnPaths {
    /// Trained network with finalized batch-norm statistics.
    pub final_checkpoint: PathBuf,
    /// Network plus optimizer state after the last completed epoch.
    pub partial_checkpoint: PathBuf,
    /// Append-only `epoch,loss,user_acc,forgery_acc,lr` log.
    pub metrics: PathBuf,
}

impl CnnPaths {
    pub fn in_dir(dir: &Path) -> Self {
        CnnPaths {
            final_checkpoint: dir.join("cnn.sgnt"),
            partial_checkpoint: dir.join("cnn.partial.sgnt"),
            metrics: dir.join("train_metrics.csv"),
        }
    }
}

fn keep_metric_rows(path: &Path, epochs: usize) -> Result<()> {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let mut lines: Vec<&str> = text.lines().collect();
    if lines.first() != Some(&EpochMetrics::CSV_HEADER) {
        lines = vec![EpochMetrics::CSV_HEADER];
    }
    lines.truncate(epochs + 1);
    let mut out = lines.join("\n");
    out.push('\n');
    std::fs::write(path, out)?;
    Ok(())
}

/// Trains (or resumes) the CNN and finalizes its batch-norm statistics.
/// A finished checkpoint at `paths.final_checkpoint` short-circuits.
pub fn cnn_stage(
    cfg: &RunConfig,
    set: &TrainingSet,
    paths: &CnnPaths,
    opts: &RunOptions,
) -> Result<Network<f32>> {
    let hash = cfg.hash(Stage::Cnn);
    if paths.final_checkpoint.exists() {
        let ck = read_checkpoint(&mut BufReader::new(File::open(&paths.final_checkpoint)?))?;
        check_hash(&paths.final_checkpoint, hash, ck.config_hash, opts.force)?;
        opts.log(format!(
            "train-cnn: reusing {}",
            paths.final_checkpoint.display()
        ));
        return Ok(ck.network);
    }
    let arch = cfg.architecture(set.num_users)?;
    let (mut net, mut state) = if paths.partial_checkpoint.exists() {
        let (net, state, found) =
            read_training_checkpoint(&mut BufReader::new(File::open(&paths.partial_checkpoint)?))?;
        check_hash(&paths.partial_checkpoint, hash, found, opts.force)?;
        if net.arch != arch {
            return Err(Error::Format(format!(
                "{} holds a different architecture",
                paths.partial_checkpoint.display()
            )));
        }
        let state = state.ok_or_else(|| {
            Error::Format(format!(
                "{} has no optimizer state",
                paths.partial_checkpoint.display()
            ))
        })?;
        opts.log(format!("train-cnn: resuming after epoch {}", state.epoch));
        (net, state)
    } else {
        let mut net = Network::new(arch)?;
        init_parameters(&mut net, cfg.training.seed, cfg.training.head_init_std)?;
        let state = OptimizerState::new(&net);
        (net, state)
    };
    keep_metric_rows(&paths.metrics, state.epoch)?;
    train(
        &mut net,
        set,
        &cfg.training,
        &cfg.preprocess,
        &mut state,
        |m, net, st| {
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(&paths.metrics)?;
            writeln!(f, "{}", m.csv_row())?;
            write_atomic(&paths.partial_checkpoint, |w| {
                write_training_checkpoint(w, net, st, hash)
            })?;
            opts.log(format!(
                "train-cnn: epoch {} loss {:.4} user_acc {:.4} forgery_acc {:.4} lr {:e}",
                m.epoch, m.loss, m.user_acc, m.forgery_acc, m.lr
            ));
            Ok(())
        },
    )?;
    finalize_bn_statistics(
        &mut net,
        &set.images,
        &cfg.preprocess,
        cfg.eval.feature_batch,
    )?;
    write_atomic(&paths.final_checkpoint, |w| {
        write_checkpoint(w, &net, hash, &[])
    })?;
    if paths.partial_checkpoint.exists() {
        std::fs::remove_file(&paths.partial_checkpoint)?;
    }
    Ok(net)
}

/// Samples whose features the writer-dependent stage can need: everything
/// of validation and exploitation users, genuine samples of development
/// users.
pub fn feature_keys(split: &Split, records: &[ProcessedRecord]) -> Vec<SampleKey> {
    let wd_users: std::collections::BTreeSet<u32> = split
        .plan
        .validation
        .iter()
        .chain(&split.plan.exploitation)
        .copied()
        .collect();
    let dev: std::collections::BTreeSet<u32> = split.plan.development.iter().copied().collect();
    records
        .iter()
        .filter(|r| {
            wd_users.contains(&r.user) || (dev.contains(&r.user) && r.kind == SampleKind::Genuine)
        })
        .map(ProcessedRecord::key)
        .collect()
}

pub fn features_stage(
    cfg: &RunConfig,
    net: &Network<f32>,
    records: &[ProcessedRecord],
    keys: &[SampleKey],
    path: &Path,
    opts: &RunOptions,
) -> Result<Vec<FeatureRecord>> {
    let hash = cfg.hash(Stage::Cnn);
    if path.exists() {
        let (features, found) = crate::wd::load_features(path)?;
        check_hash(path, hash, found, opts.force)?;
        opts.log(format!("extract: reusing {} features", features.len()));
        return Ok(features);
    }
    let lookup = processed_lookup(records);
    let images = keys
        .iter()
        .map(|k| {
            lookup
                .get(k)
                .map(|img| (*img).clone())
                .ok_or_else(|| Error::Index(format!("no processed image for {k:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let values = extract_features(net, &images, &cfg.preprocess, cfg.eval.feature_batch)?;
    let features: Vec<FeatureRecord> = keys
        .iter()
        .zip(values)
        .map(|(&(user, kind, sample), values)| FeatureRecord {
            user,
            kind,
            sample,
            values,
        })
        .collect();
    write_atomic(path, |w| crate::wd::write_features(w, &features, hash))?;
    opts.log(format!("extract: {} features", features.len()));
    Ok(features)
}

/// `uNNNN.sgwd`, the model file of `user` inside a models directory.
pub fn model_file_name(user: u32) -> String {
    format!("u{user:04}.sgwd")
}

pub type FeatureMap = BTreeMap<SampleKey, Vec<f32>>;

pub fn feature_map(features: Vec<FeatureRecord>) -> FeatureMap {
    features
        .into_iter()
        .map(|f| ((f.user, f.kind, f.sample), f.values))
        .collect()
}

fn feature(map: &FeatureMap, key: SampleKey) -> Result<&[f32]> {
    map.get(&key).map(Vec::as_slice).ok_or_else(|| {
        Error::Index(format!(
            "no feature for user {} {} sample {}",
            key.0,
            key.1.name(),
            key.2
        ))
    })
}

/// The SVM of `user`: its references against the negatives the split
/// assigns to it.
pub fn train_user(
    split: &Split,
    group: WdGroup,
    user: u32,
    features: &FeatureMap,
    wd: &WdConfig,
) -> Result<WdModel> {
    let pos = split
        .tagged_user(group.tags().0, user)
        .map(|e| feature(features, (e.user, e.kind, e.sample)))
        .collect::<Result<Vec<_>>>()?;
    let neg = split
        .negatives(group, user)
        .iter()
        .map(|e| feature(features, (e.user, e.kind, e.sample)))
        .collect::<Result<Vec<_>>>()?;
    train_wd(user, &pos, &neg, wd)
}

/// Trains one SVM per user of `group` and scores that user's test samples
/// plus one random forgery per other group user (the first test genuine of
/// that user; its `sample` field holds the source user id). Models are
/// cached as `<models_dir>/uNNNN.sgwd` when a directory is given.
pub fn score_group(
    split: &Split,
    group: WdGroup,
    features: &FeatureMap,
    wd: &WdConfig,
    models_dir: Option<&Path>,
    config_hash: u64,
    force: bool,
) -> Result<Vec<ScoredSample>> {
    let test_tag = group.tags().1;
    let users = split.users(group);
    if let Some(dir) = models_dir {
        std::fs::create_dir_all(dir)?;
    }
    let per_user: Vec<Vec<ScoredSample>> = users
        .par_iter()
        .map(|&u| {
            let cached = models_dir.map(|d| d.join(model_file_name(u)));
            let model = match &cached {
                Some(p) if p.exists() => {
                    let (m, found) = load_model(p)?;
                    check_hash(p, config_hash, found, force)?;
                    m
                }
                _ => {
                    let m = train_user(split, group, u, features, wd)?;
                    if let Some(p) = &cached {
                        save_model(p, &m, config_hash)?;
                    }
                    m
                }
            };
            let mut out = Vec::new();
            for e in split.tagged_user(test_tag, u) {
                out.push(ScoredSample {
                    user: u,
                    sample: e.sample,
                    kind: e.kind,
                    score: model.decision_value(feature(features, (e.user, e.kind, e.sample))?)?,
                });
            }
            for &v in users.iter().filter(|&&v| v != u) {
                if let Some(e) = split
                    .tagged_user(test_tag, v)
                    .find(|e| e.kind == SampleKind::Genuine)
                {
                    out.push(ScoredSample {
                        user: u,
                        sample: v,
                        kind: SampleKind::Random,
                        score: model
                            .decision_value(feature(features, (e.user, e.kind, e.sample))?)?,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_user.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub index: usize,
    pub seed: u64,
    /// Global threshold applied to the exploitation users.
    pub threshold: f64,
    /// Validation users, at their own EER threshold.
    pub validation: Option<EvalReport>,
    pub exploitation: Option<EvalReport>,
}

#[derive(Serialize, Deserialize)]
struct ReplicationFile {
    config_hash: String,
    result: ReplicationResult,
}

pub fn replication_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, &format!("replication/{index}"))
}

/// One writer-dependent round on a freshly drawn split, cached in `dir`.
pub fn replication_stage(
    cfg: &RunConfig,
    index: &DatasetIndex,
    features: &FeatureMap,
    r: usize,
    dir: &Path,
    opts: &RunOptions,
) -> Result<ReplicationResult> {
    let hash = cfg.hash(Stage::Full);
    let result_path = dir.join("result.json");
    if result_path.exists() {
        let file: ReplicationFile = serde_json::from_str(&std::fs::read_to_string(&result_path)?)?;
        let found = u64::from_str_radix(&file.config_hash, 16)
            .map_err(|_| Error::Format(format!("{}: bad config hash", result_path.display())))?;
        check_hash(&result_path, hash, found, opts.force)?;
        opts.log(format!(
            "replication {r}: reusing {}",
            result_path.display()
        ));
        return Ok(file.result);
    }
    std::fs::create_dir_all(dir)?;
    let seed = replication_seed(cfg.seed, r);
    let plan = cfg.dataset.plan(index.num_users)?;
    let split = build_split(index, &plan, seed)?;
    write_atomic(&dir.join("manifest.tsv"), |w| write_manifest(w, &split))?;
    let models = dir.join("models");
    let mut scores = BTreeMap::new();
    for (group, name) in [
        (WdGroup::Validation, "validation"),
        (WdGroup::Exploitation, "exploitation"),
    ] {
        if split.users(group).is_empty() {
            continue;
        }
        let s = score_group(
            &split,
            group,
            features,
            &cfg.wd,
            Some(&models),
            hash,
            opts.force,
        )?;
        write_atomic(&dir.join(format!("scores_{name}.csv")), |w| {
            write_scores(w, &s, Some(hash))
        })?;
        scores.insert(name, s);
    }
    let validation_scores = scores.get("validation");
    let threshold = pick_global_threshold(validation_scores.map(Vec::as_slice))?;
    let validation = validation_scores
        .map(|v| evaluate(v, eer_global(v)?.1))
        .transpose()?;
    let exploitation = scores
        .get("exploitation")
        .map(|s| evaluate(s, threshold))
        .transpose()?;
    let result = ReplicationResult {
        index: r,
        seed,
        threshold,
        validation,
        exploitation,
    };
    let file = ReplicationFile {
        config_hash: format!("{hash:016x}"),
        result: result.clone(),
    };
    write_atomic(&result_path, |w| {
        serde_json::to_writer_pretty(&mut *w, &file)?;
        Ok(())
    })?;
    if let Some(e) = &result.exploitation {
        opts.log(format!(
            "replication {r}: EER_global {:.2}% EER_user {:.2}% AUC {:.4}",
            percent(e.eer_global),
            percent(e.eer_user),
            e.mean_auc
        ));
    }
    Ok(result)
}

/// Headline metrics as fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub frr: f64,
    pub far_random: Option<f64>,
    pub far_simple: Option<f64>,
    pub far_skilled: f64,
    pub eer_global: f64,
    pub eer_user: f64,
    pub mean_auc: f64,
    pub aer: f64,
    pub aer_genuine_skilled: f64,
}

impl Summary {
    pub fn of(r: &EvalReport) -> Self {
        Summary {
            frr: r.frr,
            far_random: r.far_random,
            far_simple: r.far_simple,
            far_skilled: r.far_skilled,
            eer_global: r.eer_global,
            eer_user: r.eer_user,
            mean_auc: r.mean_auc,
            aer: r.aer,
            aer_genuine_skilled: r.aer_genuine_skilled,
        }
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_stdev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Summary,
    pub stdev: Summary,
}

impl Aggregate {
    pub fn of(reports: &[&EvalReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let col = |f: fn(&EvalReport) -> f64| {
            mean_stdev(&reports.iter().map(|r| f(r)).collect::<Vec<_>>())
        };
        let opt = |f: fn(&EvalReport) -> Option<f64>| {
            reports
                .iter()
                .map(|r| f(r))
                .collect::<Option<Vec<f64>>>()
                .map(|v| mean_stdev(&v))
        };
        let (frr, eg, eu, auc, aer, ags, fs) = (
            col(|r| r.frr),
            col(|r| r.eer_global),
            col(|r| r.eer_user),
            col(|r| r.mean_auc),
            col(|r| r.aer),
            col(|r| r.aer_genuine_skilled),
            col(|r| r.far_skilled),
        );
        let (fr, fsi) = (opt(|r| r.far_random), opt(|r| r.far_simple));
        let pick = |which: fn((f64, f64)) -> f64| Summary {
            frr: which(frr),
            far_random: fr.map(which),
            far_simple: fsi.map(which),
            far_skilled: which(fs),
            eer_global: which(eg),
            eer_user: which(eu),
            mean_auc: which(auc),
            aer: which(aer),
            aer_genuine_skilled: which(ags),
        };
        Some(Aggregate {
            mean: pick(|p| p.0),
            stdev: pick(|p| p.1),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub replications: Vec<ReplicationResult>,
    pub validation: Option<Aggregate>,
    pub exploitation: Option<Aggregate>,
}

impl ExperimentRecord {
    pub fn new(cfg: &RunConfig, replications: Vec<ReplicationResult>) -> Self {
        let mut record = ExperimentRecord {
            config_hash: format!("{:016x}", cfg.hash(Stage::Full)),
            config: cfg.pairs(),
            replications,
            validation: None,
            exploitation: None,
        };
        record.recompute();
        record
    }

    /// Rebuilds the aggregates from the per-replication reports.
    pub fn recompute(&mut self) {
        let v: Vec<&EvalReport> = self
            .replications
            .iter()
            .filter_map(|r| r.validation.as_ref())
            .collect();
        let e: Vec<&EvalReport> = self
            .replications
            .iter()
            .filter_map(|r| r.exploitation.as_ref())
            .collect();
        self.validation = Aggregate::of(&v);
        self.exploitation = Aggregate::of(&e);
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn pm(mean: f64, stdev: f64) -> String {
    format!("{:.2} (+- {:.2})", percent(mean), percent(stdev))
}

/// Human-readable table of the aggregates, percentages with two decimals.
pub fn render_report(record: &ExperimentRecord) -> Result<String> {
    if record.replications.is_empty()
        || (record.validation.is_none() && record.exploitation.is_none())
    {
        return Err(Error::Empty("experiment record has no replications".into()));
    }
    let mut out = format!(
        "config {} | {} replication(s)\n",
        record.config_hash,
        record.replications.len()
    );
    let header = [
        "group",
        "FRR",
        "FAR_random",
        "FAR_simple",
        "FAR_skilled",
        "EER_global",
        "EER_user",
        "mean AUC",
    ];
    let mut rows = vec![header.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    for (name, agg) in [
        ("validation", &record.validation),
        ("exploitation", &record.exploitation),
    ] {
        let Some(a) = agg else { continue };
        let (m, s) = (&a.mean, &a.stdev);
        let opt = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => pm(m, s),
            _ => "-".to_string(),
        };
        rows.push(vec![
            name.to_string(),
            pm(m.frr, s.frr),
            opt(m.far_random, s.far_random),
            opt(m.far_simple, s.far_simple),
            pm(m.far_skilled, s.far_skilled),
            pm(m.eer_global, s.eer_global),
            pm(m.eer_user, s.eer_user),
            format!("{:.4} (+- {:.4})", m.mean_auc, s.mean_auc),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    Ok(out)
}

/// Full run in `work`: every stage reuses its artifact when present.
pub fn run_pipeline(cfg: &RunConfig, work: &Path, opts: &RunOptions) -> Result<ExperimentRecord> {
    cfg.validate()?;
    std::fs::create_dir_all(work)?;
    std::fs::write(work.join("config.txt"), cfg.to_text())?;
    with_jobs(opts.jobs, || run_stages(cfg, work, opts))?
}

fn run_stages(cfg: &RunConfig, work: &Path, opts: &RunOptions) -> Result<ExperimentRecord> {
    let index = stage("index", load_index(&cfg.dataset.path))?;
    let cache = opts
        .processed_cache
        .clone()
        .unwrap_or_else(|| work.join("processed.sgpi"));
    let records = stage("preprocess", processed_stage(cfg, &index, &cache, opts))?;
    let split = stage("split", cnn_split(cfg, &index))?;
    stage(
        "split",
        write_atomic(&work.join("cnn_manifest.tsv"), |w| {
            write_manifest(w, &split)
        }),
    )?;
    let formulation = cfg.training.loss.formulation;
    let lookup = processed_lookup(&records);
    let net = stage("train-cnn", {
        let set = cnn_set(&split, &lookup, SplitTag::Lc, &cfg.training.loss)?;
        cnn_stage(cfg, &set, &CnnPaths::in_dir(work), opts)
    })?;
    if opts.verbose {
        let vc = stage(
            "train-cnn",
            cnn_set(&split, &lookup, SplitTag::Vc, &cfg.training.loss),
        )?;
        if !vc.is_empty() {
            let (ua, fa) = stage(
                "train-cnn",
                evaluate_accuracy(
                    &net,
                    &vc,
                    formulation,
                    &cfg.preprocess,
                    cfg.eval.feature_batch,
                ),
            )?;
            opts.log(format!(
                "train-cnn: V_c user_acc {ua:.4} forgery_acc {fa:.4}"
            ));
        }
    }
    let keys = feature_keys(&split, &records);
    let features = feature_map(stage(
        "extract",
        features_stage(
            cfg,
            &net,
            &records,
            &keys,
            &work.join("features.sgfv"),
            opts,
        ),
    )?);
    let mut reps = Vec::with_capacity(cfg.eval.replications);
    for r in 0..cfg.eval.replications {
        reps.push(stage(
            "train-wd",
            replication_stage(
                cfg,
                &index,
                &features,
                r,
                &work.join(format!("rep_{r:02}")),
                opts,
            ),
        )?);
    }
    let record = ExperimentRecord::new(cfg, reps);
    stage(
        "report",
        write_atomic(&work.join("record.json"), |w| {
            w.write_all(record.to_json()?.as_bytes())?;
            Ok(())
        }),
    )?;
    Ok(record)
}

/// The split that fixes the CNN's `L_c` / `V_c` samples for a run.
pub fn cnn_split(cfg: &RunConfig, index: &DatasetIndex) -> Result<Split> {
    let plan = cfg.dataset.plan(index.num_users)?;
    if plan.development.len() < 2 && cfg.training.loss.formulation != Formulation::MultitaskL2 {
        return Err(Error::Protocol(
            "feature learning needs at least 2 development users".into(),
        ));
    }
    build_split(index, &plan, derive_seed(cfg.seed, "split/cnn"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub eer_global: f64,
    pub eer_user: f64,
    pub mean_auc: f64,
}

/// Trains one CNN per `lambda` and evaluates writer-dependent classifiers
/// on the validation users; each run lives in `<work>/lambda_<value>`.
pub fn lambda_sweep(
    base: &RunConfig,
    formulation: Formulation,
    lambdas: &[f64],
    work: &Path,
    opts: &RunOptions,
) -> Result<Vec<SweepRow>> {
    if base.dataset.validation_users == 0 {
        return Err(Error::Config(
            "the lambda sweep evaluates on validation users; set dataset.validation_users".into(),
        ));
    }
    std::fs::create_dir_all(work)?;
    let mut opts = opts.clone();
    opts.processed_cache
        .get_or_insert_with(|| work.join("processed.sgpi"));
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut cfg = base.clone();
        cfg.training.loss.formulation = formulation;
        cfg.training.loss.lambda = lambda;
        opts.log(format!(
            "lambda-sweep: {} lambda={lambda}",
            formulation.name()
        ));
        let record = run_pipeline(&cfg, &work.join(format!("lambda_{lambda}")), &opts)?;
        let v = record
            .validation
            .ok_or_else(|| Error::Empty("no validation results".into()))?;
        rows.push(SweepRow {
            lambda,
            eer_global: v.mean.eer_global,
            eer_user: v.mean.eer_user,
            mean_auc: v.mean.mean_auc,
        });
    }
    Ok(rows)
}

/// `lambda,eer_global,eer_user,mean_auc` with EERs in percent.
pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["lambda", "eer_global", "eer_user", "mean_auc"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        csv.write_record([
            r.lambda.to_string(),
            format!("{:.2}", percent(r.eer_global)),
            format!("{:.2}", percent(r.eer_user)),
            format!("{:.4}", r.mean_auc),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    csv.flush()?;
    Ok(())
}
