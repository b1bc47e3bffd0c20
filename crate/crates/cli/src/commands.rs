use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Result};
use rayon::prelude::*;

// Stdout writes return errors instead of panicking, so a closed pipe
// (`signet evaluate ... | head`) ends the command quietly.
macro_rules! outln {
    ($($t:tt)*) => {
        writeln!(std::io::stdout().lock(), $($t)*)?
    };
}

macro_rules! out {
    ($($t:tt)*) => {
        write!(std::io::stdout().lock(), $($t)*)?
    };
}

use signet_core::config::{RunConfig, Stage};
use signet_core::dataset::{
    build_split, file_name, generate_synthetic, load_index, read_manifest, user_dir_name,
    write_dataset, DatasetIndex, NegativeSource, SampleRecord, Split, SplitPlan, SplitTag,
    SyntheticSpec, WdGroup,
};
use signet_core::evaluation::{
    evaluate, percent, pick_global_threshold, read_scores, report_to_json, roc_points,
    write_scores, EvalReport, ScoredSample,
};
use signet_core::io::write_tensor_file;
use signet_core::losses::Formulation;
use signet_core::nn::checkpoint::read_checkpoint;
use signet_core::pipeline::{
    check_hash, cnn_set, cnn_split, cnn_stage, feature_map, lambda_sweep, model_file_name,
    preprocess_index, processed_lookup, processed_stage, render_report, run_pipeline, score_group,
    train_user, with_jobs, write_atomic, write_processed, write_sweep_csv, CnnPaths,
    ExperimentRecord, RunOptions,
};
use signet_core::preprocess::{center_crop, random_crop};
use signet_core::seed::derive_seed;
use signet_core::training::evaluate_accuracy;
use signet_core::wd::{extract_features, load_features, save_features, save_model, FeatureRecord};

use crate::{Cli, Command, ConfigArgs};

pub fn run(cli: Cli) -> Result<()> {
    let opts = RunOptions {
        force: cli.force,
        jobs: cli.jobs.max(1),
        verbose: !cli.quiet,
        processed_cache: None,
    };
    let jobs = opts.jobs;
    with_jobs(jobs, move || dispatch(cli.command, &opts))?
}

fn load_config(args: &ConfigArgs, data: Option<&PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.set)?;
    if let Some(d) = data {
        cfg.dataset.path = d.clone();
    }
    if let Some(s) = seed {
        cfg.set("seed", &s.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set_opt(cfg: &mut RunConfig, key: &str, value: Option<String>) -> Result<()> {
    if let Some(v) = value {
        cfg.set(key, &v)?;
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| anyhow!("{}: {e}", dir.display()))?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    ensure_parent(path)?;
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn dispatch(command: Command, opts: &RunOptions) -> Result<()> {
    match command {
        Command::Preprocess {
            config,
            data,
            out,
            canvas,
            resize,
            crop,
            seed,
        } => {
            let mut cfg = load_config(&config, data.as_ref(), None)?;
            set_opt(&mut cfg, "preprocess.canvas", canvas)?;
            set_opt(&mut cfg, "preprocess.resize", resize)?;
            set_opt(&mut cfg, "preprocess.crop", crop)?;
            cfg.validate()?;
            cmd_preprocess(&cfg, &out, seed)
        }
        Command::GenSynthetic {
            users,
            genuine,
            forgeries,
            seed,
            out,
            name,
        } => {
            let samples =
                generate_synthetic(users, genuine, forgeries, &SyntheticSpec::default(), seed)?;
            let index = write_dataset(&out, &name, &samples)?;
            outln!(
                "{}: {} users, {} images",
                out.join(&name).display(),
                index.num_users,
                index.records.len()
            );
            Ok(())
        }
        Command::TrainCnn {
            config,
            data,
            out,
            seed,
            resume,
            metrics,
        } => {
            let cfg = load_config(&config, data.as_ref(), seed)?;
            cmd_train_cnn(&cfg, &out, resume, metrics, opts)
        }
        Command::Extract {
            config,
            data,
            checkpoint,
            out,
        } => {
            let cfg = load_config(&config, data.as_ref(), None)?;
            cmd_extract(&cfg, &checkpoint, &out, opts)
        }
        Command::TrainWd {
            config,
            features,
            user,
            refs,
            kernel,
            c_minus,
            gamma,
            seed,
            manifest,
            out,
        } => {
            let mut cfg = load_config(&config, None, None)?;
            set_opt(&mut cfg, "dataset.references", refs.map(|r| r.to_string()))?;
            set_opt(&mut cfg, "wd.kernel", kernel)?;
            set_opt(&mut cfg, "wd.c_minus", c_minus.map(|c| c.to_string()))?;
            set_opt(&mut cfg, "wd.gamma", gamma.map(|g| g.to_string()))?;
            cfg.validate()?;
            let (features, hash) =
                load_features(&features).map_err(|e| anyhow!("{}: {e}", features.display()))?;
            let split = wd_split(&features, manifest.as_deref(), cfg.dataset.references, seed)?;
            let group = group_of(&split, user)?;
            let model = train_user(&split, group, user, &feature_map(features), &cfg.wd)?;
            ensure_parent(&out)?;
            save_model(&out, &model, hash)?;
            outln!(
                "user {user}: {} kernel, C+ {} C- {} (psi {})",
                model.kernel_kind().name(),
                model.c_plus,
                model.c_minus,
                model.psi
            );
            Ok(())
        }
        Command::Score {
            config,
            features,
            models,
            refs,
            seed,
            manifest,
            group,
            out,
        } => {
            let mut cfg = load_config(&config, None, None)?;
            set_opt(&mut cfg, "dataset.references", refs.map(|r| r.to_string()))?;
            let group = match group.as_str() {
                "exploitation" => WdGroup::Exploitation,
                "validation" => WdGroup::Validation,
                g => bail!("unknown group `{g}` (exploitation|validation)"),
            };
            let (features, hash) =
                load_features(&features).map_err(|e| anyhow!("{}: {e}", features.display()))?;
            let split = wd_split(&features, manifest.as_deref(), cfg.dataset.references, seed)?;
            if split.users(group).is_empty() {
                bail!("the split has no users in that group");
            }
            for &u in split.users(group) {
                let p = models.join(model_file_name(u));
                if !p.exists() {
                    bail!("missing model {}", p.display());
                }
            }
            let scores = score_group(
                &split,
                group,
                &feature_map(features),
                &cfg.wd,
                Some(&models),
                hash,
                opts.force,
            )?;
            write_scores(create(&out)?, &scores, Some(hash))?;
            outln!("{} scores -> {}", scores.len(), out.display());
            Ok(())
        }
        Command::Evaluate {
            scores,
            validation_scores,
            report,
            roc,
        } => cmd_evaluate(
            &scores,
            validation_scores.as_deref(),
            report.as_deref(),
            roc.as_deref(),
            opts,
        ),
        Command::Pipeline {
            config,
            data,
            seed,
            work,
        } => {
            let cfg = load_config(&config, data.as_ref(), seed)?;
            let record = run_pipeline(&cfg, &work, opts)?;
            let table = render_report(&record)?;
            std::fs::write(work.join("report.txt"), &table)?;
            out!("{table}");
            Ok(())
        }
        Command::LambdaSweep {
            config,
            data,
            seed,
            work,
            loss,
            lambdas,
            out,
        } => {
            let cfg = load_config(&config, data.as_ref(), seed)?;
            let formulation = match Formulation::parse(&loss) {
                Some(f @ (Formulation::MultitaskL1 | Formulation::MultitaskL2)) => f,
                _ => bail!("--loss must be L1 or L2, got `{loss}`"),
            };
            if lambdas.is_empty() {
                bail!("empty lambda list");
            }
            let rows = lambda_sweep(&cfg, formulation, &lambdas, &work, opts)?;
            let mut text = Vec::new();
            write_sweep_csv(&mut text, &rows)?;
            if let Some(out) = out {
                create(&out)?.write_all(&text)?;
            }
            std::io::stdout().write_all(&text)?;
            Ok(())
        }
        Command::Report {
            record,
            json,
            scores,
            roc,
        } => {
            let stored = ExperimentRecord::from_json(&std::fs::read_to_string(&record)?)?;
            let mut rec = stored.clone();
            rec.recompute();
            if rec != stored {
                eprintln!("warning: stored aggregates differ from the replications; showing recomputed values");
            }
            out!("{}", render_report(&rec)?);
            if let Some(path) = json {
                create(&path)?.write_all(rec.to_json()?.as_bytes())?;
            }
            if let (Some(scores), Some(roc)) = (scores, roc) {
                let (samples, _) = read_scores(open(&scores)?)?;
                write_roc(&roc, &samples)?;
            }
            Ok(())
        }
    }
}

fn cmd_preprocess(cfg: &RunConfig, out: &Path, seed: Option<u64>) -> Result<()> {
    let index = load_index(&cfg.dataset.path)?;
    let hash = cfg.hash(Stage::Preprocess);
    let records = preprocess_index(&index, &cfg.preprocess)?;
    let p = &cfg.preprocess;
    records.par_iter().try_for_each(|r| -> Result<()> {
        let dir = out.join(user_dir_name(r.user));
        std::fs::create_dir_all(&dir)?;
        let stem = Path::new(&file_name(r.user, r.kind, r.sample)).with_extension("");
        r.image
            .to_raw()
            .save_png(&dir.join(stem.with_extension("png")))?;
        let crop = match seed {
            Some(s) => {
                let label = format!("crop/{}/{}/{}", r.user, r.kind.letter(), r.sample);
                random_crop(
                    &r.image,
                    p.input_height,
                    p.input_width,
                    derive_seed(s, &label),
                    p.input_scale,
                )?
            }
            None => center_crop(&r.image, p.input_height, p.input_width, p.input_scale)?,
        };
        write_tensor_file(&dir.join(stem.with_extension("sgtn")), &crop, hash)?;
        Ok(())
    })?;
    write_atomic(&out.join("processed.sgpi"), |w| {
        write_processed(w, &records, hash)
    })?;
    outln!("{} images -> {}", records.len(), out.display());
    Ok(())
}

fn cmd_train_cnn(
    cfg: &RunConfig,
    out: &Path,
    resume: Option<PathBuf>,
    metrics: Option<PathBuf>,
    opts: &RunOptions,
) -> Result<()> {
    if let Some(r) = &resume {
        if !r.exists() {
            bail!("no checkpoint to resume at {}", r.display());
        }
    }
    ensure_parent(out)?;
    let index = load_index(&cfg.dataset.path)?;
    let records = processed_stage(cfg, &index, &out.with_extension("processed.sgpi"), opts)?;
    let split = cnn_split(cfg, &index)?;
    let lookup = processed_lookup(&records);
    let formulation = cfg.training.loss.formulation;
    let set = cnn_set(&split, &lookup, SplitTag::Lc, &cfg.training.loss)?;
    let paths = CnnPaths {
        final_checkpoint: out.to_path_buf(),
        partial_checkpoint: resume.unwrap_or_else(|| out.with_extension("partial.sgnt")),
        metrics: metrics.unwrap_or_else(|| out.with_extension("metrics.csv")),
    };
    let net = cnn_stage(cfg, &set, &paths, opts)?;
    let vc = cnn_set(&split, &lookup, SplitTag::Vc, &cfg.training.loss)?;
    if !vc.is_empty() {
        let (ua, fa) = evaluate_accuracy(
            &net,
            &vc,
            formulation,
            &cfg.preprocess,
            cfg.eval.feature_batch,
        )?;
        outln!("validation user_acc {ua:.4} forgery_acc {fa:.4}");
    }
    outln!("checkpoint -> {}", out.display());
    Ok(())
}

fn cmd_extract(cfg: &RunConfig, checkpoint: &Path, out: &Path, opts: &RunOptions) -> Result<()> {
    let ck = read_checkpoint(&mut open(checkpoint)?)?;
    let index = load_index(&cfg.dataset.path)?;
    let records = preprocess_index(&index, &cfg.preprocess)?;
    let images: Vec<_> = records.iter().map(|r| r.image.clone()).collect();
    let values = extract_features(
        &ck.network,
        &images,
        &cfg.preprocess,
        cfg.eval.feature_batch,
    )?;
    let features: Vec<FeatureRecord> = records
        .iter()
        .zip(values)
        .map(|(r, values)| FeatureRecord {
            user: r.user,
            kind: r.kind,
            sample: r.sample,
            values,
        })
        .collect();
    ensure_parent(out)?;
    save_features(out, &features, ck.config_hash)?;
    if opts.verbose {
        eprintln!(
            "extract: {} features of dim {}",
            features.len(),
            ck.network.feature_dim()
        );
    }
    outln!("features -> {}", out.display());
    Ok(())
}

/// The split from `manifest`, or else one drawn over the users of the
/// feature file: `refs` seeded genuine references per user, the rest as
/// tests, and other users' references as negatives.
fn wd_split(
    features: &[FeatureRecord],
    manifest: Option<&Path>,
    refs: usize,
    seed: u64,
) -> Result<Split> {
    if let Some(m) = manifest {
        return Ok(read_manifest(open(m)?, m)?);
    }
    let records = features
        .iter()
        .map(|f| SampleRecord {
            user: f.user,
            kind: f.kind,
            sample: f.sample,
            path: PathBuf::from(user_dir_name(f.user)).join(file_name(f.user, f.kind, f.sample)),
        })
        .collect();
    let index = DatasetIndex::new("features", records)?;
    let mut plan = SplitPlan::contiguous(index.num_users, 0, 0, refs, NegativeSource::OtherUsers);
    plan.holdout_percent = 0;
    Ok(build_split(&index, &plan, seed)?)
}

fn group_of(split: &Split, user: u32) -> Result<WdGroup> {
    if split.plan.exploitation.contains(&user) {
        Ok(WdGroup::Exploitation)
    } else if split.plan.validation.contains(&user) {
        Ok(WdGroup::Validation)
    } else {
        bail!("user {user} is not enrolled in the split")
    }
}

fn cmd_evaluate(
    scores: &Path,
    validation: Option<&Path>,
    report: Option<&Path>,
    roc: Option<&Path>,
    opts: &RunOptions,
) -> Result<()> {
    let (test, test_hash) = read_scores(open(scores)?)?;
    let validation_path = validation;
    let validation = validation
        .map(|p| -> Result<_> { Ok(read_scores(open(p)?)?) })
        .transpose()?;
    if let (Some(a), Some(p), Some((_, Some(b)))) = (test_hash, validation_path, &validation) {
        check_hash(p, a, *b, opts.force)?;
    }
    let threshold = pick_global_threshold(validation.as_ref().map(|v| v.0.as_slice()))?;
    let r = evaluate(&test, threshold)?;
    print_report(&r)?;
    if let Some(path) = report {
        create(path)?.write_all(report_to_json(&r)?.as_bytes())?;
    }
    if let Some(path) = roc {
        write_roc(path, &test)?;
    }
    Ok(())
}

fn print_report(r: &EvalReport) -> Result<()> {
    let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.2}", percent(v)));
    outln!("threshold    {:.6}", r.threshold);
    outln!("FRR          {:.2}", percent(r.frr));
    outln!("FAR_random   {}", opt(r.far_random));
    outln!("FAR_simple   {}", opt(r.far_simple));
    outln!("FAR_skilled  {:.2}", percent(r.far_skilled));
    outln!("EER_global   {:.2}", percent(r.eer_global));
    outln!("EER_user     {:.2}", percent(r.eer_user));
    outln!("mean AUC     {:.4}", r.mean_auc);
    outln!("AER          {:.2}", percent(r.aer));
    outln!("AER_gs       {:.2}", percent(r.aer_genuine_skilled));
    Ok(())
}

fn write_roc(path: &Path, samples: &[ScoredSample]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "threshold,frr,far_skilled")?;
    for (t, frr, far) in roc_points(samples) {
        writeln!(w, "{t},{frr},{far}")?;
    }
    w.flush()?;
    Ok(())
}
