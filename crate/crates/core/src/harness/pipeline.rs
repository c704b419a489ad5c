use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Precision};
use super::report::cmd_report;
use super::{io_error, write_file, HarnessError};
use crate::graph::{Task, Variant};
use crate::metrics::{eval_protocol, EvalReport};
use crate::models::{Batch, LossBreakdown, Model, ModelError, Trainer};
use crate::nn::Real;
use crate::synth::{
    manifest_path, read_log_all, read_manifest, write_log, DatasetManifest, GenerativeModel,
    ImpressionRecord,
};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CURVE_FILE: &str = "loss_curve.tsv";
pub const METRICS_FILE: &str = "metrics.kv";
pub const METRICS_TABLE_FILE: &str = "metrics.txt";
pub const RUN_RECORD_FILE: &str = "run_record.json";
const CONFIG_FILE: &str = "config.toml";
const GENERATOR_FILE: &str = "generator.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub dir: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
}

impl DatasetPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            train: dir.join("train.csv"),
            test: dir.join("test.csv"),
        }
    }
}

/// Samples the hidden model and calibrates it to the configured rates.
pub fn build_generator(config: &ExperimentConfig) -> Result<GenerativeModel, HarnessError> {
    Ok(GenerativeModel::build(config.generator.clone())?)
}

#[derive(Debug, Clone)]
pub struct GenSummary {
    pub paths: DatasetPaths,
    pub train: DatasetManifest,
    pub test: DatasetManifest,
    pub biases: [f64; 6],
}

/// Writes train and test logs with disjoint impression ids, then re-reads both
/// manifests and checks them against the logs.
pub fn cmd_gen(config: &ExperimentConfig, out: &Path) -> Result<GenSummary, HarnessError> {
    config.validate()?;
    let generator = build_generator(config)?;
    let paths = DatasetPaths::new(out);
    std::fs::create_dir_all(out).map_err(io_error(out))?;

    let n_train = config.data.train_impressions;
    let n_test = config.data.test_impressions;
    let seed = Some(config.generator.seed);
    let mut manifests = Vec::new();
    for (path, ids) in [
        (&paths.train, 0..n_train),
        (&paths.test, n_train..n_train + n_test),
    ] {
        let records = generator.generate(ids.clone());
        let manifest = write_log(&records, path, seed)?;
        let mpath = manifest_path(path);
        let mut text = manifest.to_text();
        let t = &config.generator.targets;
        let _ = writeln!(text, "preset = {}", config.data.preset);
        let _ = writeln!(text, "impression_ids = {}..{}", ids.start, ids.end);
        let _ = writeln!(
            text,
            "rate_targets = click {} dmi {} dma {} purchase {}",
            t.click, t.dmi, t.dma, t.purchase
        );
        write_file(&mpath, &text)?;

        let reread = read_manifest(path)?;
        if reread != manifest {
            return Err(HarnessError::Verification(format!(
                "manifest {} does not match its log",
                mpath.display()
            )));
        }
        manifests.push(manifest);
    }

    let b = generator.biases();
    let mut text = String::new();
    for (j, v) in b.iter().enumerate() {
        let _ = writeln!(text, "bias_y{} = {v}", j + 1);
    }
    let rates = generator.expected_rates();
    for (name, v) in rates.named() {
        let _ = writeln!(text, "expected_{name}_rate = {v}");
    }
    write_file(&out.join(GENERATOR_FILE), &text)?;

    let test = manifests.pop().expect("two manifests");
    let train = manifests.pop().expect("two manifests");
    Ok(GenSummary {
        paths,
        train,
        test,
        biases: b,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
    pub steps: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn curve_line<T: Real>(epoch: usize, step: u64, loss: &LossBreakdown<T>) -> String {
    let mut line = format!("{epoch}\t{step}\t{}", loss.total.to_f64().unwrap_or(f64::NAN));
    for task in [Task::Ctr, Task::Dmi, Task::Dma, Task::Ctcvr, Task::Cvr] {
        match loss.task(task) {
            Some(v) => {
                let _ = write!(line, "\t{}", v.to_f64().unwrap_or(f64::NAN));
            }
            None => line.push_str("\t-"),
        }
    }
    line.push('\n');
    line
}

fn train_with<T: Real>(
    config: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    records: &[ImpressionRecord],
    run_dir: &Path,
) -> Result<TrainOutcome, HarnessError> {
    let model = Model::<T>::build(config.model_spec(variant, seed))?;
    let mut trainer = Trainer::new(model, config.training.adam());
    let checkpoint = run_dir.join(CHECKPOINT_FILE);
    let curve_path = run_dir.join(CURVE_FILE);
    let mut curve = String::from("epoch\tstep\ttotal\tctr\tdmi\tdma\tctcvr\tcvr\n");
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut initial_loss = None;
    let mut final_loss = f64::NAN;
    let mut batch_records = Vec::with_capacity(config.training.batch_size);

    for epoch in 0..config.training.epochs {
        if epoch > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(config.training.batch_size) {
            batch_records.clear();
            batch_records.extend(chunk.iter().map(|&i| records[i]));
            let batch = Batch::from_records(&batch_records);
            match trainer.train_step(&batch) {
                Ok(loss) => {
                    let step = trainer.step_count();
                    curve.push_str(&curve_line(epoch, step, &loss));
                    final_loss = loss.total.to_f64().unwrap_or(f64::NAN);
                    initial_loss.get_or_insert(final_loss);
                }
                Err(ModelError::Diverged) => {
                    trainer
                        .model
                        .write_checkpoint(&checkpoint, trainer.step_count())?;
                    write_file(&curve_path, &curve)?;
                    return Err(HarnessError::Runtime(format!(
                        "{variant} seed {seed}: non-finite loss at step {}; last good checkpoint in {}",
                        trainer.step_count() + 1,
                        checkpoint.display()
                    )));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    trainer
        .model
        .write_checkpoint(&checkpoint, trainer.step_count())?;
    write_file(&curve_path, &curve)?;
    Ok(TrainOutcome {
        checkpoint,
        curve: curve_path,
        steps: trainer.step_count(),
        initial_loss: initial_loss.unwrap_or(f64::NAN),
        final_loss,
    })
}

/// Trains one variant on the training log over the entire impression space.
pub fn cmd_train(
    config: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    data_dir: &Path,
    run_dir: &Path,
) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    let paths = DatasetPaths::new(data_dir);
    if !paths.train.exists() {
        return Err(HarnessError::Validation(format!(
            "training log {} not found; run `gen` first",
            paths.train.display()
        )));
    }
    let records = read_log_all(&paths.train)?;
    std::fs::create_dir_all(run_dir).map_err(io_error(run_dir))?;
    match config.training.precision {
        Precision::F32 => train_with::<f32>(config, variant, seed, &records, run_dir),
        Precision::F64 => train_with::<f64>(config, variant, seed, &records, run_dir),
    }
}

fn write_metrics(
    out_dir: &Path,
    header: &[(&str, String)],
    report: &EvalReport,
) -> Result<(), HarnessError> {
    let mut kv = String::new();
    for (k, v) in header {
        let _ = writeln!(kv, "{k} = {v}");
    }
    kv.push_str(&report.to_kv());
    write_file(&out_dir.join(METRICS_FILE), &kv)?;
    let mut table = String::new();
    for (k, v) in header {
        let _ = writeln!(table, "{k}: {v}");
    }
    table.push_str(&report.to_table());
    write_file(&out_dir.join(METRICS_TABLE_FILE), &table)
}

fn eval_checkpoint<T: Real>(
    checkpoint: &Path,
    records: &[ImpressionRecord],
) -> Result<(EvalReport, Variant, u64, u64), HarnessError> {
    let (model, step) = Model::<T>::read_checkpoint(checkpoint)?;
    let vocab = &model.spec().vocab_sizes;
    if let Some(r) = records.iter().find(|r| {
        r.features()
            .iter()
            .zip(vocab)
            .any(|(&id, &size)| id as usize >= size)
    }) {
        return Err(HarnessError::Validation(format!(
            "test impression {} has features {:?} outside the model vocabularies {vocab:?}",
            r.impression_id,
            r.features()
        )));
    }
    let report = eval_protocol(&model, records)?;
    Ok((report, model.variant(), model.spec().seed, step))
}

/// Scores a checkpoint on a test log and writes `metrics.kv` / `metrics.txt`.
pub fn cmd_eval(
    checkpoint: &Path,
    test_log: &Path,
    precision: Precision,
    out_dir: &Path,
) -> Result<EvalReport, HarnessError> {
    if !checkpoint.exists() {
        return Err(HarnessError::Validation(format!(
            "checkpoint {} not found",
            checkpoint.display()
        )));
    }
    let records = read_log_all(test_log)?;
    let (report, variant, seed, step) = match precision {
        Precision::F32 => eval_checkpoint::<f32>(checkpoint, &records)?,
        Precision::F64 => eval_checkpoint::<f64>(checkpoint, &records)?,
    };
    write_metrics(
        out_dir,
        &[
            ("scorer", "model".into()),
            ("variant", variant.name().into()),
            ("seed", seed.to_string()),
            ("steps", step.to_string()),
        ],
        &report,
    )?;
    Ok(report)
}

/// Scores the test log with the generator's exact targets: the ceiling row.
pub fn cmd_eval_oracle(
    config: &ExperimentConfig,
    test_log: &Path,
    out_dir: &Path,
) -> Result<EvalReport, HarnessError> {
    let generator = build_generator(config)?;
    let records = read_log_all(test_log)?;
    let report = eval_protocol(&generator, &records)?;
    write_metrics(out_dir, &[("scorer", "ground-truth".into())], &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub variant: Variant,
    pub seed: u64,
    /// Paths are relative to the output directory.
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub cvr_auc: Option<f64>,
    pub ctcvr_auc: Option<f64>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub config: PathBuf,
    pub runs: Vec<RunEntry>,
    pub oracle_metrics: PathBuf,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    pub fn load(output_dir: &Path) -> Result<Self, HarnessError> {
        let path = output_dir.join(RUN_RECORD_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_error(&path))?;
        serde_json::from_str(&text)
            .map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display())))
    }

    /// Recomputes the config hash from the stored config and checks that every
    /// referenced file exists.
    pub fn verify(&self, output_dir: &Path) -> Result<(), HarnessError> {
        let cpath = output_dir.join(&self.config);
        let text = std::fs::read_to_string(&cpath).map_err(io_error(&cpath))?;
        let hash = hex::encode(Sha256::digest(text.as_bytes()));
        if hash != self.config_hash {
            return Err(HarnessError::Verification(format!(
                "config hash {hash} does not match recorded {}",
                self.config_hash
            )));
        }
        let mut files = vec![&self.oracle_metrics];
        for r in &self.runs {
            files.push(&r.metrics);
            files.push(&r.checkpoint);
        }
        for f in files {
            if !output_dir.join(f).exists() {
                return Err(HarnessError::Verification(format!(
                    "referenced file {} is missing",
                    f.display()
                )));
            }
        }
        Ok(())
    }
}

/// Full pipeline: generate, train and evaluate every (variant, seed), score the
/// oracle, write the comparison report and the run record.
pub fn cmd_run(config: &ExperimentConfig) -> Result<RunRecord, HarnessError> {
    let start = Instant::now();
    config.validate()?;
    let out = &config.output_dir;
    let canonical = config.to_toml();
    write_file(&out.join(CONFIG_FILE), &canonical)?;

    let data = cmd_gen(config, &config.data_dir())?;
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        for &variant in &config.variants {
            let t = Instant::now();
            let dir = config.run_dir(variant, seed);
            let trained = cmd_train(config, variant, seed, &data.paths.dir, &dir)?;
            let report = cmd_eval(
                &trained.checkpoint,
                &data.paths.test,
                config.training.precision,
                &dir,
            )?;
            let rel = |p: &Path| p.strip_prefix(out).unwrap_or(p).to_path_buf();
            runs.push(RunEntry {
                variant,
                seed,
                metrics: rel(&dir.join(METRICS_FILE)),
                checkpoint: rel(&trained.checkpoint),
                cvr_auc: report.cvr_auc.ok(),
                ctcvr_auc: report.ctcvr_auc.ok(),
                wall_clock_seconds: t.elapsed().as_secs_f64(),
            });
        }
    }
    cmd_eval_oracle(config, &data.paths.test, &config.oracle_dir())?;
    let report = cmd_report(config)?;
    if !config.training.deterministic {
        let mut timed = report.to_table();
        timed.push_str("\nwall-clock seconds per run\n");
        for r in &runs {
            let _ = writeln!(
                timed,
                "  {}-seed{}  {:.1}",
                r.variant.name(),
                r.seed,
                r.wall_clock_seconds
            );
        }
        write_file(&out.join(super::report::REPORT_TABLE_FILE), &timed)?;
    }

    let record = RunRecord {
        config_hash: hex::encode(Sha256::digest(canonical.as_bytes())),
        config: PathBuf::from(CONFIG_FILE),
        runs,
        oracle_metrics: config
            .oracle_dir()
            .join(METRICS_FILE)
            .strip_prefix(out)
            .map(Path::to_path_buf)
            .unwrap_or_default(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&record)
        .map_err(|e| HarnessError::Runtime(format!("run record: {e}")))?;
    write_file(&out.join(RUN_RECORD_FILE), &json)?;
    Ok(record)
}
