//! Experiment configs and the runner behind the command line.
//!
//! A config expands into a list of runs. Runs execute on a worker pool and
//! write into their own directories; the combined outputs are assembled in
//! plan order, so results do not depend on the worker count.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::data::{Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::harness::{
    evaluate, train_autoencoder, train_codebook_direct, train_residual_direct, AutoencoderArch, CodebookInit,
    Evaluation, ReplacementLog, TrainingSchedule,
};
use crate::metrics::{export_alignment_snapshot, rate_distortion_table, MetricsRecord, RateDistortionTable};
use crate::quantizers::{Method, QuantizerConfig};
use crate::replacement::{ReplacementKind, ReplacementPolicy};
use crate::tensor::Tensor;

/// Column order of every metrics CSV; the combined file prepends `run`.
pub const METRICS_COLUMNS: [&str; 14] = [
    "iteration",
    "epoch",
    "total_loss",
    "recon",
    "codebook_term",
    "commitment_term",
    "kl_term",
    "distortion",
    "perplexity",
    "usage_fraction",
    "distortion_per_bit",
    "lr",
    "tau",
    "replaced_count",
];

/// Largest accepted bitrate.
pub const MAX_BITRATE: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExperimentKind {
    /// Codebook fitted directly to the dataset vectors.
    CodebookDirect,
    /// MLP autoencoder with a quantized bottleneck.
    Autoencoder,
    /// Direct training over every method and bitrate.
    RdSweep,
    /// Replacement policies from the same init and seed.
    ReplacementRace,
    /// Direct training over a grid of noise variances.
    SigmaAblation,
    /// Direct residual VQ over stage counts and bitrates.
    RvqSweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub dataset: DatasetSpec,
    pub quantizer: QuantizerConfig,
    /// Methods compared by `RD_SWEEP`; empty means `quantizer.method`.
    pub methods: Vec<Method>,
    pub schedule: TrainingSchedule,
    pub replacement: Option<ReplacementPolicy>,
    /// Policies compared by `REPLACEMENT_RACE`.
    pub race_kinds: Vec<ReplacementKind>,
    /// A race run has finished once batch perplexity reaches this fraction of K.
    pub race_target: f64,
    /// Codebook sizes are `2^B`.
    pub bitrates: Vec<u32>,
    pub sigma2_values: Vec<f64>,
    pub stage_counts: Vec<usize>,
    pub init: CodebookInit,
    pub architecture: AutoencoderArch,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    /// Latent rows exported with each alignment snapshot.
    pub snapshot_rows: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::CodebookDirect,
            dataset: DatasetSpec::default(),
            quantizer: QuantizerConfig::default(),
            methods: Vec::new(),
            schedule: TrainingSchedule::default(),
            replacement: None,
            race_kinds: vec![ReplacementKind::Importance, ReplacementKind::NsvqUniform],
            race_target: 0.9,
            bitrates: vec![3],
            sigma2_values: vec![1e-1, 1e-2, 1e-3, 1e-4],
            stage_counts: vec![1, 3],
            init: CodebookInit::KmeansPlusPlus,
            architecture: AutoencoderArch::default(),
            seeds: vec![0],
            output_dir: None,
            snapshot_rows: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

/// One finding of [`ExperimentConfig::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Dotted path of the offending field, e.g. `quantizer.sigma2`.
    pub path: String,
    pub message: String,
    pub severity: Severity,
}

impl Violation {
    fn error(path: impl Into<String>, message: impl Into<String>) -> Self {
        Violation {
            path: path.into(),
            message: message.into(),
            severity: Severity::Error,
        }
    }

    fn warning(path: impl Into<String>, message: impl Into<String>) -> Self {
        Violation {
            path: path.into(),
            message: message.into(),
            severity: Severity::Warning,
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{tag}: {}: {}", self.path, self.message)
    }
}

/// One training run of an expanded experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    /// Directory name under `runs/`; unique within the experiment.
    pub name: String,
    pub method: Method,
    pub bitrate: u32,
    pub k: usize,
    pub seed: u64,
    pub sigma2: f64,
    pub replacement: Option<ReplacementPolicy>,
    pub stages: usize,
}

impl RunSpec {
    fn quantizer(&self, base: &QuantizerConfig) -> QuantizerConfig {
        QuantizerConfig {
            method: self.method,
            sigma2: self.sigma2,
            seed: self.seed,
            ..*base
        }
    }
}

/// Final numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub method: Method,
    pub bitrate: u32,
    pub k: usize,
    pub seed: u64,
    pub sigma2: f64,
    pub replacement: Option<ReplacementKind>,
    pub stages: usize,
    /// Hard-assignment distortion; residual runs report the last residual.
    pub distortion: f64,
    pub evaluation: Evaluation,
    pub iterations: usize,
    pub replacement_events: usize,
    /// First iteration whose batch perplexity reached `race_target * K`.
    pub reached_target_at: Option<usize>,
    /// Test-set reconstruction MSE of autoencoder runs.
    pub test_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateDistortionSeries {
    /// Method name, with the stage count for residual sweeps.
    pub label: String,
    pub table: RateDistortionTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaRow {
    pub sigma2: f64,
    pub mean_distortion: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceRow {
    pub seed: u64,
    pub kind: ReplacementKind,
    pub reached_target_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub kind: ExperimentKind,
    pub version: String,
    pub runs: Vec<RunSummary>,
    pub rate_distortion: Vec<RateDistortionSeries>,
    pub sigma_ablation: Vec<SigmaRow>,
    pub race: Vec<RaceRow>,
}

/// Everything a finished run hands back to the assembler.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub spec: RunSpec,
    pub summary: RunSummary,
    pub records: Vec<MetricsRecord>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Replaces the seed list by `seed`.
    pub fn with_seed_override(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        self
    }

    fn methods(&self) -> Vec<Method> {
        if self.methods.is_empty() {
            vec![self.quantizer.method]
        } else {
            self.methods.clone()
        }
    }

    /// Schema and cross-field checks. Runs can start iff no entry is an error.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut nested = |prefix: &str, items: Vec<(&'static str, String)>| {
            for (name, reason) in items {
                out.push(Violation::error(format!("{prefix}.{name}"), reason));
            }
        };
        nested("dataset", self.dataset.violations());
        nested("quantizer", self.quantizer.violations());
        nested("schedule", self.schedule.violations());
        if let Some(p) = &self.replacement {
            nested("replacement", p.violations());
        }

        let methods = self.methods();
        for (i, &m) in methods.iter().enumerate() {
            let path = if self.methods.is_empty() {
                "quantizer.method".to_string()
            } else {
                format!("methods[{i}]")
            };
            if m == Method::Hard {
                out.push(Violation::error(path.clone(), "HARD has no training signal"));
            }
            if m.is_space_filling() && self.replacement.is_some() && self.kind != ExperimentKind::ReplacementRace {
                out.push(Violation::warning(
                    "replacement",
                    format!("{m} keeps all codewords in use; the policy is ignored"),
                ));
            }
        }

        if self.bitrates.is_empty() {
            out.push(Violation::error("bitrates", "at least one bitrate is required"));
        }
        let rows = match self.kind {
            ExperimentKind::Autoencoder => (self.dataset.size as f64 * crate::data::TRAIN_FRACTION).round() as usize,
            _ => self.dataset.size,
        };
        for (i, &b) in self.bitrates.iter().enumerate() {
            if b == 0 || b > MAX_BITRATE {
                out.push(Violation::error(format!("bitrates[{i}]"), format!("must lie in 1..={MAX_BITRATE}, got {b}")));
            } else if (1usize << b) > rows {
                out.push(Violation::error(
                    format!("bitrates[{i}]"),
                    format!("K = {} exceeds the {rows} training rows", 1usize << b),
                ));
            } else if let Some(p) = &self.replacement {
                if (1usize << b) as f64 * p.discard_threshold > 1.0 {
                    out.push(Violation::warning(
                        "replacement.discard_threshold",
                        format!("with K = {} even uniform usage falls below the threshold", 1usize << b),
                    ));
                }
            }
        }
        if self.seeds.is_empty() {
            out.push(Violation::error("seeds", "at least one seed is required"));
        }
        if self.snapshot_rows == 0 {
            out.push(Violation::warning("snapshot_rows", "snapshots will hold codewords only"));
        }

        match self.kind {
            ExperimentKind::RdSweep => {
                let mut distinct = self.bitrates.clone();
                distinct.sort_unstable();
                distinct.dedup();
                if distinct.len() < 2 {
                    out.push(Violation::error("bitrates", "a rate-distortion sweep needs at least two bitrates"));
                }
            }
            ExperimentKind::ReplacementRace => {
                if self.race_kinds.is_empty() {
                    out.push(Violation::error("race_kinds", "at least one replacement kind is required"));
                }
                if self.quantizer.method.is_space_filling() {
                    out.push(Violation::error("quantizer.method", "space-filling methods never replace codewords"));
                }
                if !(self.race_target > 0.0 && self.race_target <= 1.0) {
                    out.push(Violation::error("race_target", format!("must lie in (0, 1], got {}", self.race_target)));
                }
            }
            ExperimentKind::SigmaAblation => {
                if self.sigma2_values.is_empty() {
                    out.push(Violation::error("sigma2_values", "at least one variance is required"));
                }
                for (i, &s) in self.sigma2_values.iter().enumerate() {
                    if !(s > 0.0 && s.is_finite()) {
                        out.push(Violation::error(format!("sigma2_values[{i}]"), format!("must be > 0, got {s}")));
                    }
                }
                if !self.quantizer.method.uses_sigma2() {
                    out.push(Violation::warning(
                        "quantizer.method",
                        format!("{} ignores sigma2", self.quantizer.method),
                    ));
                }
            }
            ExperimentKind::RvqSweep => {
                if self.stage_counts.is_empty() {
                    out.push(Violation::error("stage_counts", "at least one stage count is required"));
                }
                for (i, &s) in self.stage_counts.iter().enumerate() {
                    if s == 0 {
                        out.push(Violation::error(format!("stage_counts[{i}]"), "must be >= 1"));
                    }
                }
            }
            ExperimentKind::Autoencoder => {
                if self.quantizer.method.is_space_filling() && self.schedule.sf_warmup == 0 {
                    out.push(Violation::error("schedule.sf_warmup", "space-filling training needs at least one warmup epoch"));
                }
                if self.architecture.latent_dim == 0 {
                    out.push(Violation::error("architecture.latent_dim", "must be >= 1"));
                }
            }
            ExperimentKind::CodebookDirect => {}
        }
        out
    }

    /// Fails with every error-level violation.
    pub fn check(&self) -> Result<()> {
        let errors: Vec<String> = self
            .validate()
            .into_iter()
            .filter(|v| v.severity == Severity::Error)
            .map(|v| v.to_string())
            .collect();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors.join("; ")))
        }
    }

    /// Expands the config into runs, in output order.
    pub fn plan(&self) -> Vec<RunSpec> {
        let base = |method: Method, bitrate: u32, seed: u64| RunSpec {
            name: String::new(),
            method,
            bitrate,
            k: 1usize << bitrate,
            seed,
            sigma2: self.quantizer.sigma2,
            replacement: self.replacement,
            stages: 1,
        };
        let mut runs = Vec::new();
        match self.kind {
            ExperimentKind::CodebookDirect | ExperimentKind::Autoencoder | ExperimentKind::RdSweep => {
                for method in self.methods() {
                    for &b in &self.bitrates {
                        for &seed in &self.seeds {
                            let mut r = base(method, b, seed);
                            r.name = format!("{method}_b{b}_s{seed}");
                            runs.push(r);
                        }
                    }
                }
            }
            ExperimentKind::ReplacementRace => {
                let b = self.bitrates[0];
                for &seed in &self.seeds {
                    for &kind in &self.race_kinds {
                        let mut r = base(self.quantizer.method, b, seed);
                        r.replacement = Some(ReplacementPolicy {
                            kind,
                            ..self.replacement.unwrap_or_default()
                        });
                        r.name = format!("{}_b{b}_{}_s{seed}", self.quantizer.method, kind_name(kind));
                        runs.push(r);
                    }
                }
            }
            ExperimentKind::SigmaAblation => {
                for &s2 in &self.sigma2_values {
                    for &b in &self.bitrates {
                        for &seed in &self.seeds {
                            let mut r = base(self.quantizer.method, b, seed);
                            r.sigma2 = s2;
                            r.name = format!("{}_b{b}_sigma2_{s2:e}_s{seed}", self.quantizer.method);
                            runs.push(r);
                        }
                    }
                }
            }
            ExperimentKind::RvqSweep => {
                for &stages in &self.stage_counts {
                    for &b in &self.bitrates {
                        for &seed in &self.seeds {
                            let mut r = base(self.quantizer.method, b, seed);
                            r.stages = stages;
                            r.name = format!("{}_b{b}_stages{stages}_s{seed}", self.quantizer.method);
                            runs.push(r);
                        }
                    }
                }
            }
        }
        runs
    }

    /// Output directory: `out` if given, else `output_dir`.
    pub fn resolve_output(&self, out: Option<&Path>) -> Result<PathBuf> {
        out.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .ok_or_else(|| Error::Config("output_dir: no output directory given".into()))
    }
}

fn kind_name(kind: ReplacementKind) -> &'static str {
    match kind {
        ReplacementKind::Importance => "IMPORTANCE",
        ReplacementKind::NsvqUniform => "NSVQ_UNIFORM",
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    library: &'static str,
    version: &'static str,
    kind: ExperimentKind,
    seeds: &'a [u64],
    dataset_seed: u64,
}

#[derive(Serialize)]
struct RunProvenance<'a> {
    library: &'static str,
    version: &'static str,
    run: &'a str,
    seed: u64,
    dataset_seed: u64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn record_fields(r: &MetricsRecord) -> [String; 14] {
    [
        r.iteration.to_string(),
        r.epoch.to_string(),
        r.total_loss.to_string(),
        r.recon.to_string(),
        r.codebook_term.to_string(),
        r.commitment_term.to_string(),
        r.kl_term.to_string(),
        r.distortion.to_string(),
        r.perplexity.to_string(),
        r.usage_fraction.to_string(),
        r.distortion_per_bit.to_string(),
        r.lr.to_string(),
        r.tau.map(|t| t.to_string()).unwrap_or_default(),
        r.replaced_count.to_string(),
    ]
}

/// Writes records in the fixed column order; `run` adds a leading column.
pub fn write_metrics_csv<W: Write>(w: W, rows: &[(Option<&str>, &[MetricsRecord])]) -> Result<()> {
    let with_run = rows.iter().any(|(run, _)| run.is_some());
    let mut csv = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = Vec::with_capacity(15);
    if with_run {
        header.push("run");
    }
    header.extend(METRICS_COLUMNS);
    csv.write_record(&header)?;
    for (run, records) in rows {
        for r in records.iter() {
            let fields = record_fields(r);
            if with_run {
                csv.write_record(std::iter::once(run.unwrap_or("")).chain(fields.iter().map(String::as_str)))?;
            } else {
                csv.write_record(&fields)?;
            }
        }
    }
    csv.flush()?;
    Ok(())
}

fn write_replacements(path: &Path, log: &[ReplacementLog]) -> Result<()> {
    let mut csv = csv::Writer::from_path(path)?;
    csv.write_record(["iteration", "replaced", "donors", "perturbation_std"])?;
    let join = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
    for entry in log {
        csv.write_record([
            entry.iteration.to_string(),
            join(&entry.event.replaced),
            join(&entry.event.donors),
            entry.event.perturbation_std.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

fn head_rows(t: &Tensor, n: usize) -> Tensor {
    let take: Vec<usize> = (0..t.rows().min(n)).collect();
    t.select_rows(&take)
}

/// Executes one run and writes its directory.
pub fn execute_run(config: &ExperimentConfig, dataset: &Dataset, spec: &RunSpec, dir: &Path) -> Result<RunOutput> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), &serde_json::json!({ "experiment": config, "run": spec }))?;
    write_json(
        &dir.join("provenance.json"),
        &RunProvenance {
            library: "diveq",
            version: env!("CARGO_PKG_VERSION"),
            run: &spec.name,
            seed: spec.seed,
            dataset_seed: config.dataset.seed,
        },
    )?;
    let quantizer = spec.quantizer(&config.quantizer);
    let policy = spec.replacement.as_ref();
    let mut test_mse = None;
    let (records, replacements, codebooks, latents, evaluation, distortion) = match config.kind {
        ExperimentKind::Autoencoder => {
            let run = train_autoencoder(
                &dataset.train,
                &dataset.test,
                &config.architecture,
                spec.k,
                &quantizer,
                &config.schedule,
                policy,
            )?;
            test_mse = Some(run.test_mse);
            let latents = run.model.encode(&head_rows(&dataset.test, config.snapshot_rows))?;
            let d = run.test_evaluation.distortion;
            (run.records, run.replacements, vec![run.codebook], latents, run.test_evaluation, d)
        }
        ExperimentKind::RvqSweep => {
            let run = train_residual_direct(&dataset.data, spec.k, spec.stages, &quantizer, &config.schedule)?;
            let evaluation = evaluate(&dataset.data, run.codebooks[0].vectors())?;
            let latents = head_rows(&dataset.data, config.snapshot_rows);
            (run.records, Vec::new(), run.codebooks, latents, evaluation, run.distortion)
        }
        _ => {
            let run = train_codebook_direct(&dataset.data, spec.k, &quantizer, &config.schedule, policy, &config.init)?;
            let latents = head_rows(&dataset.data, config.snapshot_rows);
            let d = run.evaluation.distortion;
            (run.records, run.replacements, vec![run.codebook], latents, run.evaluation, d)
        }
    };

    write_metrics_csv(BufWriter::new(File::create(dir.join("metrics.csv"))?), &[(None, &records)])?;
    for (s, cb) in codebooks.iter().enumerate() {
        let suffix = if codebooks.len() > 1 { format!("_stage{}", s + 1) } else { String::new() };
        cb.save(dir.join(format!("codebook{suffix}.bin")))?;
    }
    export_alignment_snapshot(&codebooks[0], &latents, dir.join("snapshot.bin"))?;
    if !replacements.is_empty() {
        write_replacements(&dir.join("replacements.csv"), &replacements)?;
    }

    let target = config.race_target * spec.k as f64;
    let summary = RunSummary {
        name: spec.name.clone(),
        method: spec.method,
        bitrate: spec.bitrate,
        k: spec.k,
        seed: spec.seed,
        sigma2: spec.sigma2,
        replacement: spec.replacement.map(|p| p.kind),
        stages: spec.stages,
        distortion,
        evaluation,
        iterations: records.len(),
        replacement_events: replacements.len(),
        reached_target_at: records.iter().find(|r| r.perplexity >= target).map(|r| r.iteration),
        test_mse,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(RunOutput {
        spec: spec.clone(),
        summary,
        records,
    })
}

fn summarize(config: &ExperimentConfig, outputs: &[RunOutput]) -> Result<ExperimentSummary> {
    let runs: Vec<RunSummary> = outputs.iter().map(|o| o.summary.clone()).collect();
    let mut rate_distortion = Vec::new();
    let mut series = |label: String, keep: &dyn Fn(&RunSummary) -> bool| -> Result<()> {
        let points: Vec<(u32, f64)> = runs.iter().filter(|r| keep(r)).map(|r| (r.bitrate, r.distortion)).collect();
        let distinct = {
            let mut b: Vec<u32> = points.iter().map(|p| p.0).collect();
            b.sort_unstable();
            b.dedup();
            b.len()
        };
        if distinct >= 2 {
            rate_distortion.push(RateDistortionSeries {
                label,
                table: rate_distortion_table(&points)?,
            });
        }
        Ok(())
    };
    match config.kind {
        ExperimentKind::RvqSweep => {
            for &stages in &config.stage_counts {
                series(format!("{}_stages{stages}", config.quantizer.method), &|r| r.stages == stages)?;
            }
        }
        ExperimentKind::ReplacementRace => {}
        _ => {
            for method in config.methods() {
                series(method.to_string(), &|r| r.method == method)?;
            }
        }
    }
    let sigma_ablation = if config.kind == ExperimentKind::SigmaAblation {
        config
            .sigma2_values
            .iter()
            .map(|&s2| {
                let ds: Vec<f64> = runs.iter().filter(|r| r.sigma2 == s2).map(|r| r.distortion).collect();
                SigmaRow {
                    sigma2: s2,
                    mean_distortion: ds.iter().sum::<f64>() / ds.len().max(1) as f64,
                    runs: ds.len(),
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let race = if config.kind == ExperimentKind::ReplacementRace {
        runs.iter()
            .filter_map(|r| {
                r.replacement.map(|kind| RaceRow {
                    seed: r.seed,
                    kind,
                    reached_target_at: r.reached_target_at,
                })
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(ExperimentSummary {
        kind: config.kind,
        version: env!("CARGO_PKG_VERSION").to_string(),
        runs,
        rate_distortion,
        sigma_ablation,
        race,
    })
}

/// Validates, runs every planned run on `workers` threads and writes
/// `config.json`, `provenance.json`, `metrics.csv`, `summary.json` and one
/// directory per run under `runs/`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path, workers: usize) -> Result<ExperimentSummary> {
    config.check()?;
    let dataset = config.dataset.generate()?;
    fs::create_dir_all(out.join("runs"))?;
    fs::write(out.join("config.json"), config.to_json()? + "\n")?;
    write_json(
        &out.join("provenance.json"),
        &Provenance {
            library: "diveq",
            version: env!("CARGO_PKG_VERSION"),
            kind: config.kind,
            seeds: &config.seeds,
            dataset_seed: config.dataset.seed,
        },
    )?;
    let plan = config.plan();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("worker pool: {e}")))?;
    let outputs: Vec<RunOutput> = pool.install(|| {
        plan.par_iter()
            .map(|spec| execute_run(config, &dataset, spec, &out.join("runs").join(&spec.name)))
            .collect::<Result<Vec<_>>>()
    })?;

    let rows: Vec<(Option<&str>, &[MetricsRecord])> =
        outputs.iter().map(|o| (Some(o.spec.name.as_str()), o.records.as_slice())).collect();
    write_metrics_csv(BufWriter::new(File::create(out.join("metrics.csv"))?), &rows)?;
    let summary = summarize(config, &outputs)?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Loads a codebook checkpoint and writes it, with optional latents, as an
/// alignment snapshot.
pub fn export_snapshot(checkpoint: &Path, latents: Option<&Path>, out: &Path) -> Result<()> {
    let codebook = Codebook::load(checkpoint)?;
    let latents = match latents {
        Some(p) => crate::data::load_dataset(p)?,
        None => Tensor::zeros(&[0, codebook.dim()]),
    };
    export_alignment_snapshot(&codebook, &latents, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: ExperimentKind) -> ExperimentConfig {
        ExperimentConfig {
            kind,
            dataset: DatasetSpec { size: 200, ..Default::default() },
            schedule: TrainingSchedule {
                batch_size: 32,
                learning_rate: 0.05,
                lr_milestones: vec![],
                iterations: Some(20),
                sf_warmup: 1,
                sf_init_window: 4,
                ..Default::default()
            },
            bitrates: vec![2],
            snapshot_rows: 10,
            ..Default::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        assert!(ExperimentConfig::default().validate().is_empty());
    }

    #[test]
    fn negative_sigma2_is_reported_at_its_path() {
        let mut c = ExperimentConfig::default();
        c.quantizer.sigma2 = -1.0;
        let v = c.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].path, "quantizer.sigma2");
        assert_eq!(v[0].severity, Severity::Error);
    }

    #[test]
    fn sf_with_replacement_warns() {
        let c = ExperimentConfig {
            quantizer: QuantizerConfig::with_method(Method::SfDiveq),
            replacement: Some(ReplacementPolicy::default()),
            ..Default::default()
        };
        let v = c.validate();
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].path.as_str(), v[0].severity), ("replacement", Severity::Warning));
        assert!(c.check().is_ok());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"kind": "RD_SWEEP", "bitratez": [1]}"#).unwrap_err();
        assert!(err.to_string().contains("bitratez"), "{err}");
    }

    #[test]
    fn bitrate_bounds() {
        let c = ExperimentConfig {
            bitrates: vec![0, 14],
            ..Default::default()
        };
        let paths: Vec<String> = c.validate().into_iter().map(|v| v.path).collect();
        assert_eq!(paths, ["bitrates[0]", "bitrates[1]"]);
    }

    #[test]
    fn rd_sweep_plan_cardinality() {
        let c = ExperimentConfig {
            kind: ExperimentKind::RdSweep,
            bitrates: vec![2, 4, 6],
            seeds: vec![0, 1, 2],
            ..Default::default()
        };
        let plan = c.plan();
        assert_eq!(plan.len(), 9);
        let mut names: Vec<&str> = plan.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 9);
    }

    #[test]
    fn race_plan_swaps_only_the_kind() {
        let c = ExperimentConfig {
            kind: ExperimentKind::ReplacementRace,
            bitrates: vec![4],
            ..Default::default()
        };
        let plan = c.plan();
        assert_eq!(plan.len(), 2);
        let (a, b) = (plan[0].replacement.unwrap(), plan[1].replacement.unwrap());
        assert_eq!((a.kind, b.kind), (ReplacementKind::Importance, ReplacementKind::NsvqUniform));
        assert_eq!(ReplacementPolicy { kind: a.kind, ..b }, a);
        assert_eq!(plan[0].seed, plan[1].seed);
    }

    #[test]
    fn every_kind_runs_and_writes_artifacts() {
        let kinds = [
            ExperimentKind::CodebookDirect,
            ExperimentKind::Autoencoder,
            ExperimentKind::RdSweep,
            ExperimentKind::ReplacementRace,
            ExperimentKind::SigmaAblation,
            ExperimentKind::RvqSweep,
        ];
        for kind in kinds {
            let mut c = tiny(kind);
            if kind == ExperimentKind::RdSweep {
                c.bitrates = vec![1, 2];
            }
            if kind == ExperimentKind::SigmaAblation {
                c.sigma2_values = vec![1e-2, 1e-3];
            }
            let dir = tempfile::tempdir().unwrap();
            let summary = run_experiment(&c, dir.path(), 2).unwrap();
            let plan = c.plan();
            assert_eq!(summary.runs.len(), plan.len(), "{kind:?}");
            for f in ["config.json", "provenance.json", "metrics.csv", "summary.json"] {
                assert!(dir.path().join(f).is_file(), "{kind:?} {f}");
            }
            for spec in &plan {
                let run = dir.path().join("runs").join(&spec.name);
                for f in ["config.json", "provenance.json", "metrics.csv", "snapshot.bin", "summary.json"] {
                    assert!(run.join(f).is_file(), "{kind:?} {} {f}", spec.name);
                }
            }
            let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
            assert!(csv.starts_with("run,iteration,epoch,total_loss"));
            assert_eq!(csv.lines().count(), 1 + 20 * plan.len());
        }
    }

    #[test]
    fn worker_count_does_not_change_outputs() {
        let mut c = tiny(ExperimentKind::RdSweep);
        c.bitrates = vec![1, 2];
        c.seeds = vec![0, 1];
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_experiment(&c, a.path(), 1).unwrap();
        run_experiment(&c, b.path(), 4).unwrap();
        for f in ["metrics.csv", "summary.json"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn invalid_config_does_not_run() {
        let mut c = tiny(ExperimentKind::CodebookDirect);
        c.seeds.clear();
        let dir = tempfile::tempdir().unwrap();
        let err = run_experiment(&c, dir.path(), 1).unwrap_err();
        assert_eq!(err.kind(), crate::error::ErrorKind::Config);
        assert!(!dir.path().join("metrics.csv").exists());
    }

    #[test]
    fn snapshot_export_without_latents() {
        let dir = tempfile::tempdir().unwrap();
        let cb = Codebook::new(Tensor::from_rows(&[&[0.0, 1.0][..], &[2.0, 3.0]]).unwrap()).unwrap();
        cb.save(dir.path().join("cb.bin")).unwrap();
        export_snapshot(&dir.path().join("cb.bin"), None, &dir.path().join("snap.bin")).unwrap();
        let (rows, roles) = crate::metrics::load_alignment_snapshot(dir.path().join("snap.bin")).unwrap();
        assert_eq!(rows, *cb.vectors());
        assert_eq!(roles, [1, 1]);
    }
}
