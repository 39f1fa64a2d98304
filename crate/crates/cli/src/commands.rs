//! Command implementations. Every command is generic over the scalar type
//! chosen by `SSRL_PRECISION`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use semiseg_core::augment::StrongAugConfig;
use semiseg_core::checkpoint::{peek_precision, sidecar_path, Checkpoint};
use semiseg_core::metrics::{csv_row, evaluate, to_csv, to_markdown, MetricsReport};
use semiseg_core::model::UNetConfig;
use semiseg_core::phantom::{
    dataset_file_len, generate, load_dataset, save_dataset, split, LabeledSet, PhantomConfig,
    PhantomSample, UnlabeledSet,
};
use semiseg_core::rng::{derive_seed, Stream};
use semiseg_core::trainer::{EvalSet, Mode, RunLog, TrainConfig, TrainData, Trainer};
use semiseg_core::{Error, Precision, Scalar};

use crate::manifest::{artifact_digest, digest_outputs, AccessAudit, FileDigest, RunManifest};
use crate::{AblationArgs, EvalArgs, GenDataArgs, HyperArgs, TestArgs, TrainArgs, VerifyArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.ssck";
pub const METRICS_FILE: &str = "metrics.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_MD: &str = "ablation.md";
pub const ABLATION_PARTIAL: &str = "ablation.partial.csv";

/// Name of the reference row trained on every training sample.
pub const FULL_LABEL_ROW: &str = "baseline_full";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn context<T, E: fmt::Display>(r: Result<T, E>, what: impl fmt::Display) -> CliResult<T> {
    r.map_err(|e| CliError::Runtime(format!("{what}: {e}")))
}

fn precision() -> CliResult<Precision> {
    Ok(Precision::from_env()?)
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let cfg = PhantomConfig {
        size: a.size,
        intensity_noise: a.noise,
        geometry_jitter: a.jitter,
        seed: a.seed,
    };
    cfg.validate()?;
    let n = a.n as usize;
    let samples = generate(&cfg, n)?;
    context(
        save_dataset(&samples, &a.out),
        format!("cannot write {}", a.out.display()),
    )?;
    println!(
        "wrote {} phantoms of size {}x{} (seed {}) to {} ({} bytes)",
        n,
        a.size,
        a.size,
        a.seed,
        a.out.display(),
        dataset_file_len(n, a.size, a.size)
    );
    Ok(())
}

fn load(path: &Path) -> CliResult<(Vec<PhantomSample>, FileDigest)> {
    let samples = context(
        load_dataset(path),
        format!("cannot load {}", path.display()),
    )?;
    let digest = context(
        FileDigest::of(path, path.display().to_string()),
        path.display(),
    )?;
    Ok((samples, digest))
}

/// Training samples, held-out test samples and their file digests.
struct Prepared {
    train: Vec<PhantomSample>,
    test: Vec<PhantomSample>,
    dataset: FileDigest,
    test_dataset: Option<FileDigest>,
}

fn prepare(data: &Path, test: &TestArgs, seed: u64) -> CliResult<Prepared> {
    let (samples, dataset) = load(data)?;
    if let Some(path) = &test.test_data {
        let (test_samples, digest) = load(path)?;
        return Ok(Prepared {
            train: samples,
            test: test_samples,
            dataset,
            test_dataset: Some(digest),
        });
    }
    if !(test.test_fraction > 0.0 && test.test_fraction < 1.0) {
        return Err(CliError::Usage(format!(
            "--test-fraction must lie in (0, 1) when --test-data is absent, got {}",
            test.test_fraction
        )));
    }
    if samples.len() < 2 {
        return Err(CliError::Usage(
            "need at least two samples to hold out a test set".into(),
        ));
    }
    let (train, mut held) = split(
        samples,
        1.0 - test.test_fraction,
        derive_seed(seed, Stream::Split, 1),
    )?;
    if held.is_empty() {
        return Err(CliError::Usage(
            "--test-fraction leaves no test samples".into(),
        ));
    }
    held.unseal();
    let images = held.images().to_vec();
    let labels = held.ground_truth()?.to_vec();
    let test = images
        .into_iter()
        .zip(labels)
        .map(|(image, labels)| PhantomSample { image, labels })
        .collect();
    Ok(Prepared {
        train: train.samples,
        test,
        dataset,
        test_dataset: None,
    })
}

fn train_config(mode: Mode, h: &HyperArgs, size: (usize, usize)) -> TrainConfig {
    TrainConfig {
        mode,
        steps: h.steps,
        lr: h.lr,
        batch_labeled: h.batch_labeled,
        batch_unlabeled: h.batch_unlabeled,
        tau: h.tau,
        beta: h.beta,
        seed: h.seed,
        eval_every: h.eval_every,
        strong: StrongAugConfig::for_size(size.0, size.1),
        supervised_loss: h.supervised_loss.into(),
        supervised_weight: h.supervised_weight,
        model: UNetConfig {
            base_channels: h.base_channels,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn image_size(samples: &[PhantomSample]) -> CliResult<(usize, usize)> {
    samples
        .first()
        .map(|s| (s.image.height, s.image.width))
        .ok_or_else(|| CliError::Runtime("dataset is empty".into()))
}

/// Result of one training run.
struct Finished<T> {
    trainer: Trainer<T>,
    log: RunLog,
    audit: AccessAudit,
}

fn run_one<T: Scalar>(
    name: &str,
    config: TrainConfig,
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    test: &[PhantomSample],
) -> CliResult<Finished<T>> {
    info!(
        "{name}: {} steps, {} labeled, {} unlabeled",
        config.steps,
        labeled.len(),
        unlabeled.len()
    );
    let mut trainer = Trainer::<T>::new(config)?;
    let eval = EvalSet::from_samples(test);
    let data = TrainData {
        labeled: &labeled.samples,
        unlabeled: unlabeled.images(),
    };
    let log = trainer
        .run(&data, Some(&eval))
        .map_err(|e| CliError::Runtime(format!("{name}: {e}")))?;
    let audit = AccessAudit {
        run: name.to_string(),
        labeled_samples: labeled.len(),
        unlabeled_samples: unlabeled.len(),
        unlabeled_sealed: unlabeled.is_sealed(),
        forbidden_attempts: unlabeled.forbidden_attempts(),
    };
    if !audit.unlabeled_sealed || audit.forbidden_attempts > 0 {
        return Err(CliError::Runtime(format!(
            "{name}: unlabeled ground truth was accessed during training"
        )));
    }
    Ok(Finished {
        trainer,
        log,
        audit,
    })
}

fn final_report(log: &RunLog) -> &MetricsReport {
    &log.evals.last().expect("run evaluates at the end").1
}

/// Replaces a semi mode with weak_aug when there is nothing unlabeled.
fn effective_mode(mode: Mode, unlabeled: &UnlabeledSet, notes: &mut Vec<String>) -> Mode {
    if mode.is_semi() && unlabeled.is_empty() {
        let note = format!(
            "{mode} needs unlabeled data but the labeled fraction leaves none; trained as weak_aug"
        );
        warn!("{note}");
        notes.push(note);
        Mode::WeakAug
    } else {
        mode
    }
}

fn losses_csv(log: &RunLog) -> String {
    let mut out = String::from("step,loss_x,loss_u,total\n");
    for r in &log.losses {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.loss_x, r.loss_u, r.total
        ));
    }
    out
}

fn create_dir(dir: &Path) -> CliResult<()> {
    context(
        fs::create_dir_all(dir),
        format!("cannot create {}", dir.display()),
    )
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    match precision()? {
        Precision::F32 => train_with::<f32>(a, Precision::F32),
        Precision::F64 => train_with::<f64>(a, Precision::F64),
    }
}

fn train_with<T: Scalar>(a: &TrainArgs, prec: Precision) -> CliResult<()> {
    let start = Instant::now();
    let p = prepare(&a.data, &a.test, a.hyper.seed)?;
    let size = image_size(&p.train)?;
    let (labeled, unlabeled) = split(p.train, a.hyper.labeled_fraction, a.hyper.seed)?;
    let mut notes = Vec::new();
    let mode = effective_mode(a.mode, &unlabeled, &mut notes);
    let config = train_config(mode, &a.hyper, size);
    config.validate()?;
    let done = run_one::<T>(mode.name(), config.clone(), &labeled, &unlabeled, &p.test)?;

    create_dir(&a.out)?;
    let report = final_report(&done.log).clone();
    let metrics = to_csv(&[(mode.name().to_string(), report)]);
    let history: Vec<(String, MetricsReport)> = done
        .log
        .evals
        .iter()
        .map(|(step, r)| (format!("{}@{step}", mode.name()), r.clone()))
        .collect();
    done.trainer
        .checkpoint()
        .save(&a.out.join(CHECKPOINT_FILE))?;
    fs::write(a.out.join(METRICS_FILE), &metrics)?;
    fs::write(a.out.join(HISTORY_FILE), to_csv(&history))?;
    fs::write(a.out.join(LOSSES_FILE), losses_csv(&done.log))?;

    let sidecar = sidecar_path(Path::new(CHECKPOINT_FILE));
    let names = [
        CHECKPOINT_FILE,
        sidecar.to_str().expect("ascii"),
        METRICS_FILE,
        HISTORY_FILE,
        LOSSES_FILE,
    ];
    let outputs = digest_outputs(&a.out, &names)?;
    let manifest = RunManifest {
        command: "train".into(),
        precision: precision_name(prec).into(),
        config: serde_json::to_value(&config).map_err(|e| CliError::Runtime(e.to_string()))?,
        dataset: p.dataset,
        test_dataset: p.test_dataset,
        artifact_digest: artifact_digest(&outputs),
        outputs,
        duration_secs: start.elapsed().as_secs_f64(),
        audit: vec![done.audit],
        notes,
    };
    manifest.write(&a.out)?;
    print!("{metrics}");
    Ok(())
}

/// Row name, mode and labeled fraction of each ablation run.
pub fn ablation_rows(labeled_fraction: f64) -> Vec<(String, Mode, f64)> {
    let mut rows: Vec<(String, Mode, f64)> = Mode::ALL
        .iter()
        .map(|&m| (m.name().to_string(), m, labeled_fraction))
        .collect();
    rows.push((FULL_LABEL_ROW.to_string(), Mode::Baseline, 1.0));
    rows
}

pub fn ablation(a: &AblationArgs) -> CliResult<()> {
    match precision()? {
        Precision::F32 => ablation_with::<f32>(a, Precision::F32),
        Precision::F64 => ablation_with::<f64>(a, Precision::F64),
    }
}

fn ablation_with<T: Scalar>(a: &AblationArgs, prec: Precision) -> CliResult<()> {
    let start = Instant::now();
    let p = prepare(&a.data, &a.test, a.hyper.seed)?;
    let size = image_size(&p.train)?;
    create_dir(&a.out_dir)?;
    let partial = a.out_dir.join(ABLATION_PARTIAL);
    let mut rows: Vec<(String, MetricsReport)> = Vec::new();
    let mut audit = Vec::new();
    let mut notes = Vec::new();
    let mut configs = serde_json::Map::new();
    for (name, mode, fraction) in ablation_rows(a.hyper.labeled_fraction) {
        let (labeled, unlabeled) = split(p.train.clone(), fraction, a.hyper.seed)?;
        let mode = effective_mode(mode, &unlabeled, &mut notes);
        let config = train_config(mode, &a.hyper, size);
        config.validate()?;
        configs.insert(
            name.clone(),
            serde_json::to_value(&config).map_err(|e| CliError::Runtime(e.to_string()))?,
        );
        match run_one::<T>(&name, config, &labeled, &unlabeled, &p.test) {
            Ok(done) => {
                info!("{}", csv_row(&name, final_report(&done.log)));
                rows.push((name, final_report(&done.log).clone()));
                audit.push(done.audit);
                fs::write(&partial, to_csv(&rows))?;
            }
            Err(e) => {
                fs::write(&partial, to_csv(&rows))?;
                return Err(CliError::Runtime(format!(
                    "ablation aborted at row `{name}`: {e}; {} completed rows in {}",
                    rows.len(),
                    partial.display()
                )));
            }
        }
    }
    let table = to_markdown(&rows);
    fs::write(a.out_dir.join(ABLATION_CSV), to_csv(&rows))?;
    fs::write(a.out_dir.join(ABLATION_MD), &table)?;
    fs::remove_file(&partial)?;
    let outputs = digest_outputs(&a.out_dir, &[ABLATION_CSV, ABLATION_MD])?;
    let manifest = RunManifest {
        command: "ablation".into(),
        precision: precision_name(prec).into(),
        config: serde_json::Value::Object(configs),
        dataset: p.dataset,
        test_dataset: p.test_dataset,
        artifact_digest: artifact_digest(&outputs),
        outputs,
        duration_secs: start.elapsed().as_secs_f64(),
        audit,
        notes,
    };
    manifest.write(&a.out_dir)?;
    print!("{table}");
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let bytes = context(
        fs::read(&a.checkpoint),
        format!("cannot read {}", a.checkpoint.display()),
    )?;
    match peek_precision(&bytes)? {
        32 => eval_with::<f32>(a),
        _ => eval_with::<f64>(a),
    }
}

fn eval_with<T: Scalar>(a: &EvalArgs) -> CliResult<()> {
    let ckpt = Checkpoint::<T>::load(&a.checkpoint)?;
    let (samples, _) = load(&a.data)?;
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let labels: Vec<_> = samples.iter().map(|s| &s.labels).collect();
    let report = evaluate(&ckpt.params, &images, &labels)?;
    let name = a
        .name
        .clone()
        .unwrap_or_else(|| ckpt.config.mode.name().to_string());
    let csv = to_csv(&[(name, report)]);
    if let Some(out) = &a.out {
        context(
            fs::write(out, &csv),
            format!("cannot write {}", out.display()),
        )?;
    }
    print!("{csv}");
    Ok(())
}

pub fn verify(a: &VerifyArgs) -> CliResult<()> {
    let manifest = context(
        RunManifest::read(&a.manifest),
        format!("cannot read {}", a.manifest.display()),
    )?;
    let dir: PathBuf = a
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let problems = manifest.verify(&dir);
    if problems.is_empty() {
        println!(
            "{} outputs verified, artifact digest {}",
            manifest.outputs.len(),
            manifest.artifact_digest
        );
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "manifest check failed: {}",
            problems.join("; ")
        )))
    }
}
