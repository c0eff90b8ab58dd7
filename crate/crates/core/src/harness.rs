//! Experiment configuration and the run driver.
//!
//! A run is described by one JSON document. Every field except `schedule`
//! has a default; unknown keys are rejected. [`run`] writes into its output
//! directory:
//!
//! - `effective_config.json`: the config with all defaults filled in,
//! - `run_log.jsonl`: one JSON record per federated round,
//! - `metrics.csv`: per-task, per-class IoU with a mIoU row per task,
//! - `checkpoints/task-<t>.ckpt` and `checkpoints/final.ckpt`,
//! - `result.json`: the [`ExperimentResult`].

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FissError, Result};
use crate::federation::{
    derive_seed, run_experiment, AggregationMode, ExperimentOutcome, ExperimentResult,
    FederationSettings, Method, TAG_POOL, TAG_TEST,
};
use crate::metrics::write_metrics_csv;
use crate::monitor::EntropyMode;
use crate::pseudo_label::RhoSchedule;
use crate::synth_data::{
    dump_dataset, generate_dataset, generate_task_pool, GridSize, TaskSchedule,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `B-IxN`: `B` base classes, then `N` tasks of `I` classes. `B-I` means
    /// one increment and a bare `B` a single task.
    pub schedule: String,
    /// Side length of the square images.
    pub grid: usize,
    pub hidden: [usize; 2],
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub initial_clients: usize,
    pub new_clients_per_task: usize,
    pub old_client_fraction: f64,
    pub class_fraction: f64,
    pub sample_fraction: f64,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub rounds_per_task: usize,
    pub batch_size: usize,
    pub lr_base: f64,
    pub lr_incremental: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Defaults to the entropy mode's own threshold.
    pub tau: Option<f64>,
    pub entropy_mode: EntropyMode,
    pub rho: RhoSchedule,
    pub apl_threshold: f64,
    pub head_init_scale: f64,
    pub aggregation: AggregationMode,
    pub method: Method,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schedule: String::new(),
            grid: 16,
            hidden: [8, 16],
            samples_per_class: 24,
            test_samples_per_class: 8,
            initial_clients: 10,
            new_clients_per_task: 4,
            old_client_fraction: 0.25,
            class_fraction: 1.0,
            sample_fraction: 0.4,
            clients_per_round: 4,
            local_epochs: 6,
            rounds_per_task: 10,
            batch_size: 4,
            lr_base: 1e-3,
            lr_incremental: 3e-4,
            lambda1: 0.5,
            lambda2: 0.0005,
            tau: None,
            entropy_mode: EntropyMode::Raw,
            rho: RhoSchedule::default(),
            apl_threshold: 0.9,
            head_init_scale: 0.01,
            aggregation: AggregationMode::SampleWeighted,
            method: Method::Fbl,
            seed: 0,
        }
    }
}

/// Class counts per task from a schedule string such as `4-1x3`.
pub fn parse_schedule(spec: &str) -> Result<Vec<usize>> {
    let bad = |msg: &str| FissError::config("schedule", format!("`{spec}`: {msg}"));
    let num = |s: &str| -> Result<usize> {
        match s.trim().parse::<usize>() {
            Ok(0) => Err(bad("class counts must be positive")),
            Ok(n) => Ok(n),
            Err(_) => Err(bad("expected B, B-I or B-IxN")),
        }
    };
    let spec_trim = spec.trim();
    if spec_trim.is_empty() {
        return Err(bad("a schedule is required"));
    }
    let (base, rest) = match spec_trim.split_once('-') {
        Some((b, r)) => (b, Some(r)),
        None => (spec_trim, None),
    };
    let mut counts = vec![num(base)?];
    if let Some(rest) = rest {
        let (inc, times) = match rest.split_once('x') {
            Some((i, n)) => (num(i)?, num(n)?),
            None => (num(rest)?, 1),
        };
        counts.extend(std::iter::repeat_n(inc, times));
    }
    TaskSchedule::from_counts(&counts)?;
    Ok(counts)
}

fn check(ok: bool, key: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(FissError::config(key, msg))
    }
}

impl ExperimentConfig {
    /// Range checks; fills `tau` when absent.
    pub fn validate(mut self) -> Result<Self> {
        parse_schedule(&self.schedule)?;
        check(self.grid >= 8, "grid", "must be at least 8")?;
        check(
            self.hidden.iter().all(|&c| c > 0),
            "hidden",
            "channel counts must be positive",
        )?;
        check(
            self.samples_per_class > 0,
            "samples_per_class",
            "must be positive",
        )?;
        check(
            self.test_samples_per_class > 0,
            "test_samples_per_class",
            "must be positive",
        )?;
        check(
            self.initial_clients > 0,
            "initial_clients",
            "must be positive",
        )?;
        check(
            (0.0..1.0).contains(&self.old_client_fraction),
            "old_client_fraction",
            "must lie in [0, 1)",
        )?;
        check(
            self.class_fraction > 0.0 && self.class_fraction <= 1.0,
            "class_fraction",
            "must lie in (0, 1]",
        )?;
        check(
            self.sample_fraction > 0.0 && self.sample_fraction <= 1.0,
            "sample_fraction",
            "must lie in (0, 1]",
        )?;
        check(
            self.clients_per_round > 0 && self.clients_per_round <= self.initial_clients,
            "clients_per_round",
            "must lie in 1..=initial_clients",
        )?;
        check(
            self.rounds_per_task > 0,
            "rounds_per_task",
            "must be positive",
        )?;
        check(self.batch_size > 0, "batch_size", "must be positive")?;
        for (key, v) in [
            ("lr_base", self.lr_base),
            ("lr_incremental", self.lr_incremental),
        ] {
            check(v > 0.0 && v.is_finite(), key, "must be positive and finite")?;
        }
        for (key, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            check(
                v >= 0.0 && v.is_finite(),
                key,
                "must be nonnegative and finite",
            )?;
        }
        let tau = self.tau.unwrap_or(self.entropy_mode.default_tau());
        check(
            tau > 0.0 && tau.is_finite(),
            "tau",
            "must be positive and finite",
        )?;
        self.tau = Some(tau);
        let r = self.rho;
        check(
            r.init > 0.0 && r.init <= 1.0,
            "rho.init",
            "must lie in (0, 1]",
        )?;
        check(
            r.step >= 0.0 && r.step.is_finite(),
            "rho.step",
            "must be nonnegative",
        )?;
        check(
            r.max >= r.init && r.max <= 1.0,
            "rho.max",
            "must lie in [rho.init, 1]",
        )?;
        check(
            self.apl_threshold > 0.0 && self.apl_threshold <= 1.0,
            "apl_threshold",
            "must lie in (0, 1]",
        )?;
        check(
            self.head_init_scale >= 0.0 && self.head_init_scale.is_finite(),
            "head_init_scale",
            "must be nonnegative",
        )?;
        Ok(self)
    }

    pub fn to_settings(&self) -> Result<FederationSettings> {
        let c = self.clone().validate()?;
        Ok(FederationSettings {
            schedule: parse_schedule(&c.schedule)?,
            grid: GridSize::new(c.grid, c.grid),
            hidden: c.hidden,
            samples_per_class: c.samples_per_class,
            test_samples_per_class: c.test_samples_per_class,
            initial_clients: c.initial_clients,
            new_clients_per_task: c.new_clients_per_task,
            old_client_fraction: c.old_client_fraction,
            class_fraction: c.class_fraction,
            sample_fraction: c.sample_fraction,
            clients_per_round: c.clients_per_round,
            local_epochs: c.local_epochs,
            rounds_per_task: c.rounds_per_task,
            batch_size: c.batch_size,
            lr_base: c.lr_base,
            lr_incremental: c.lr_incremental,
            lambda1: c.lambda1,
            lambda2: c.lambda2,
            tau: c.tau.expect("validated"),
            entropy_mode: c.entropy_mode,
            rho: c.rho,
            apl_threshold: c.apl_threshold,
            head_init_scale: c.head_init_scale,
            aggregation: c.aggregation,
            method: c.method,
            seed: c.seed,
        })
    }
}

/// Parses and validates a config document. Errors name the offending key.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." {
            "<root>".to_string()
        } else {
            path
        };
        FissError::config(key, e.into_inner().to_string())
    })?;
    config.validate()
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&fs::read_to_string(path)?)
}

/// Files written by [`run`].
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub result: ExperimentResult,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Writes `contents` next to `path` and renames it into place.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| FissError::Io(e.error))?;
    Ok(())
}

/// Writes every artifact of a finished experiment.
pub fn write_outcome(out_dir: &Path, outcome: &ExperimentOutcome) -> Result<()> {
    let mut log = BufWriter::new(File::create(out_dir.join("run_log.jsonl"))?);
    for record in &outcome.rounds {
        serde_json::to_writer(&mut log, record)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;

    let ckpt = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt)?;
    for (i, model) in outcome.task_models.iter().enumerate() {
        model.save(&ckpt.join(format!("task-{}.ckpt", i + 1)))?;
    }
    if let Some(last) = outcome.task_models.last() {
        last.save(&ckpt.join("final.ckpt"))?;
    }

    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &outcome.result.tasks)?;
    write_atomic(&out_dir.join("metrics.csv"), &csv)?;
    write_json(&out_dir.join("result.json"), &outcome.result)
}

/// Runs one experiment and writes its artifacts under `out_dir`.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunArtifacts> {
    let config = config.clone().validate()?;
    let settings = config.to_settings()?;
    fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("effective_config.json"), &config)?;
    let outcome = run_experiment(&settings)?;
    write_outcome(out_dir, &outcome)?;
    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        result: outcome.result,
    })
}

/// Dumps every task's training pool and the test set of `config` under
/// `out_dir/task-<t>` and `out_dir/test`.
pub fn dump_datasets(config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let settings = config.to_settings()?;
    let schedule = TaskSchedule::from_counts(&settings.schedule)?;
    for t in 1..=schedule.num_tasks() {
        let seed = derive_seed(settings.seed, TAG_POOL, 0, 0);
        let pool = generate_task_pool(
            &schedule,
            t,
            settings.grid,
            settings.samples_per_class,
            seed,
        )?;
        dump_dataset(&out_dir.join(format!("task-{t}")), &pool, seed)?;
    }
    let seed = derive_seed(settings.seed, TAG_TEST, 0, 0);
    let test = generate_dataset(
        schedule.total_classes(),
        settings.grid,
        settings.test_samples_per_class,
        seed,
    )?;
    dump_dataset(&out_dir.join("test"), &test, seed)?;
    Ok(())
}
