//! Experiment layout: config loading, the run directory writer, snapshot
//! aggregation, similarity reports, and the ablation batch.
//!
//! A run directory looks like:
//!
//! ```text
//! <out>/
//!   manifest.json                     resolved config echo; re-runnable as a config
//!   suite.json                        resolved suite descriptor
//!   logs/generations.csv              one row per generation
//!   snapshots/gen-<t>/archive-<k>.json
//!   heatmaps/gen-<t>/archive-<k>.csv
//!   result/aggregated.json            the merged model (bare parameter set)
//!   result/summary.json               its fitness vector, mixing weights, elites
//! ```

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::SamplingParams;
use crate::engine::{
    aggregate_elites, AggregateOutcome, Bound, BoundsRule, CycleMode, EvalMode, MutationConfig,
    MutationMode, RunConfig, Trainer, AUTO_LOWER_FACTOR, AUTO_UPPER_FACTOR,
};
use crate::error::{Error, Result};
use crate::ops::CrossoverParams;
use crate::params::{compute_task_vector, ParameterSet};
use crate::snapshot::{
    generation_csv_row, generations_csv_header, read_snapshot_set, snapshot_to_archive,
    write_heatmaps, write_snapshot_set,
};
use crate::suite::{build_suite, SuiteDescriptor, SuiteSpec};
use crate::svd::{model_similarity_report, SimilarityReport};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUITE_FILE: &str = "suite.json";
pub const GENERATIONS_CSV: &str = "logs/generations.csv";
pub const AGGREGATED_FILE: &str = "result/aggregated.json";
pub const SUMMARY_FILE: &str = "result/summary.json";

/// Environment variable naming the default output root for the CLI.
pub const OUT_ROOT_ENV: &str = "QDMERGE_OUT";

/// Seeds used by the ablation batch unless overridden.
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub fn snapshot_dir(run: &Path, generation: u64) -> PathBuf {
    run.join("snapshots").join(format!("gen-{generation}"))
}

pub fn heatmap_dir(run: &Path, generation: u64) -> PathBuf {
    run.join("heatmaps").join(format!("gen-{generation}"))
}

/// Parse a run config file. Unknown fields are ignored, so a previously
/// written manifest is itself a valid config.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundRuleEcho {
    pub mode: String,
    pub low_factor: f64,
    pub high_factor: f64,
}

/// Resolved-config echo. Field names line up with [`RunConfig`] so the
/// manifest can be fed back in as a config and reproduce the run exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub generations: u64,
    pub suite: SuiteDescriptor,
    pub bins: Vec<usize>,
    pub bounds: Vec<Bound>,
    pub bound_rule: BoundRuleEcho,
    pub cell_capacity: usize,
    pub crossover: CrossoverParams,
    pub mutation: MutationConfig,
    pub sampling: SamplingParams,
    pub cycle: CycleMode,
    pub snapshot_cadence: u64,
}

fn build_manifest(config: &RunConfig, trainer: &Trainer, descriptor: &SuiteDescriptor) -> Manifest {
    let bounds = trainer
        .bounds()
        .axes()
        .iter()
        .map(|a| Bound { lower: a.lower, upper: a.upper })
        .collect();
    Manifest {
        master_seed: config.master_seed,
        generations: config.generations,
        suite: descriptor.clone(),
        bins: trainer.bounds().axes().iter().map(|a| a.bins).collect(),
        bounds,
        bound_rule: BoundRuleEcho {
            mode: match config.bounds {
                BoundsRule::Auto => "auto".into(),
                BoundsRule::Explicit(_) => "explicit".into(),
            },
            low_factor: AUTO_LOWER_FACTOR,
            high_factor: AUTO_UPPER_FACTOR,
        },
        cell_capacity: 1,
        crossover: config.crossover,
        mutation: config.mutation.clone(),
        sampling: config.sampling,
        cycle: config.cycle,
        snapshot_cadence: config.snapshot_cadence,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub generation: u64,
    #[serde(serialize_with = "crate::params::ser_f17_vec")]
    pub fitness: Vec<f64>,
    #[serde(serialize_with = "crate::params::ser_f17")]
    pub mean_fitness: f64,
    #[serde(serialize_with = "crate::params::ser_f17_vec")]
    pub coefficients: Vec<f64>,
    pub elite_ids: Vec<u64>,
    #[serde(serialize_with = "crate::params::ser_f17_vec")]
    pub elite_fitness: Vec<f64>,
}

impl RunSummary {
    fn from_aggregate(generation: u64, agg: &AggregateOutcome) -> Self {
        RunSummary {
            generation,
            fitness: agg.fitness.clone(),
            mean_fitness: agg.mean_fitness,
            coefficients: agg.coefficients.clone(),
            elite_ids: agg.elite_ids.clone(),
            elite_fitness: agg.elite_fitness.clone(),
        }
    }
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_parameter_set(path: &Path) -> Result<ParameterSet> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_parameter_set(path: &Path, ps: &ParameterSet) -> Result<()> {
    write_json_pretty(path, ps)
}

/// Execute one configured run and write the full directory layout.
/// The generation log is streamed, so a failing run leaves partial logs
/// behind for inspection.
pub fn run_experiment(config: &RunConfig, out: &Path, eval_mode: EvalMode) -> Result<RunSummary> {
    let suite = build_suite(&config.suite)?;
    let descriptor = suite.descriptor.clone();
    let mut trainer = Trainer::with_eval_mode(config.clone(), suite, eval_mode)?;
    let tasks = trainer.tasks();

    fs::create_dir_all(out.join("logs"))?;
    fs::create_dir_all(out.join("result"))?;
    write_json_pretty(&out.join(MANIFEST_FILE), &build_manifest(config, &trainer, &descriptor))?;
    write_json_pretty(&out.join(SUITE_FILE), &descriptor)?;

    let mut log_file = std::io::BufWriter::new(fs::File::create(out.join(GENERATIONS_CSV))?);
    log_file.write_all(generations_csv_header(tasks).as_bytes())?;

    let mut snapshot_now = |trainer: &Trainer, t: u64| -> Result<()> {
        write_snapshot_set(&snapshot_dir(out, t), t, trainer.archives())?;
        let snaps = trainer
            .archives()
            .iter()
            .map(|a| crate::snapshot::archive_snapshot(a, t))
            .collect::<Vec<_>>();
        write_heatmaps(&heatmap_dir(out, t), &snaps)
    };
    snapshot_now(&trainer, 0)?;

    let n = config.generations;
    let cadence = config.snapshot_cadence;
    for _ in 0..n {
        let log = match trainer.step() {
            Ok(log) => log,
            Err(e) => {
                log_file.flush()?;
                return Err(e);
            }
        };
        log_file.write_all(generation_csv_row(&log, tasks).as_bytes())?;
        let t = trainer.generation();
        if (cadence > 0 && t % cadence == 0 && t < n) || t == n {
            snapshot_now(&trainer, t)?;
        }
    }
    log_file.flush()?;

    let agg = trainer.aggregate()?;
    write_json_pretty(&out.join(AGGREGATED_FILE), &agg.model)?;
    let summary = RunSummary::from_aggregate(trainer.generation(), &agg);
    write_json_pretty(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Locate the run root that owns a snapshot directory (two levels up, holding
/// `manifest.json`).
fn run_root_of(snapshot_dir: &Path) -> Result<PathBuf> {
    let root = snapshot_dir
        .parent()
        .and_then(|p| p.parent())
        .ok_or_else(|| Error::Config(format!("{} has no run root", snapshot_dir.display())))?;
    if !root.join(MANIFEST_FILE).exists() {
        return Err(Error::Config(format!(
            "{} does not look like part of a run directory (no {MANIFEST_FILE} at {})",
            snapshot_dir.display(),
            root.display()
        )));
    }
    Ok(root.to_path_buf())
}

/// Re-aggregate the elites stored in one snapshot directory and rewrite the
/// run's `result/` files. The suite is rebuilt from the run's manifest.
pub fn aggregate_snapshot_dir(snapshot: &Path, eval_mode: EvalMode) -> Result<RunSummary> {
    let root = run_root_of(snapshot)?;
    let manifest_text = fs::read_to_string(root.join(MANIFEST_FILE))?;
    let config: RunConfig = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::Config(format!("invalid manifest: {e}")))?;
    let suite = build_suite(&config.suite)?;

    let snaps = read_snapshot_set(snapshot)?;
    let generation = snaps[0].generation;
    let archives = snaps
        .iter()
        .map(snapshot_to_archive)
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate_elites(&archives, &suite.base, &suite.evaluators, eval_mode)?;
    write_json_pretty(&root.join(AGGREGATED_FILE), &agg.model)?;
    let summary = RunSummary::from_aggregate(generation, &agg);
    write_json_pretty(&root.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Export heatmap CSVs for one snapshot directory into `out`.
pub fn heatmaps_from_snapshot_dir(snapshot: &Path, out: &Path) -> Result<usize> {
    let snaps = read_snapshot_set(snapshot)?;
    write_heatmaps(out, &snaps)?;
    Ok(snaps.len())
}

/// Compare two models' task vectors over a shared base and write
/// `similarity.json`.
pub fn similarity_files(
    model_a: &Path,
    model_b: &Path,
    base: &Path,
    out: &Path,
) -> Result<SimilarityReport> {
    let a = read_parameter_set(model_a)?;
    let b = read_parameter_set(model_b)?;
    let base = read_parameter_set(base)?;
    let tva = compute_task_vector(&a, &base)?;
    let tvb = compute_task_vector(&b, &base)?;
    let report = model_similarity_report(&tva, &tvb)?;
    write_json_pretty(out, &report)?;
    Ok(report)
}

// ── Ablation batch ───────────────────────────────────────────────────

/// The five ablation variants, ordered from the plain fixed-quality baseline
/// to the full configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    FixedQd,
    CyclicPlain,
    CyclicGaussian,
    CyclicSvd,
    CyclicSvdElite,
}

pub const VARIANTS: [Variant; 5] = [
    Variant::FixedQd,
    Variant::CyclicPlain,
    Variant::CyclicGaussian,
    Variant::CyclicSvd,
    Variant::CyclicSvdElite,
];

impl Variant {
    pub fn index(self) -> usize {
        VARIANTS.iter().position(|v| *v == self).expect("listed")
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::FixedQd => "QD + No mutation + Random sampling",
            Variant::CyclicPlain => "Cyclic QD + No mutation + Random sampling",
            Variant::CyclicGaussian => "Cyclic QD + Gaussian mutation + Random sampling",
            Variant::CyclicSvd => "Cyclic QD + SVD mutation + Random sampling",
            Variant::CyclicSvdElite => "Cyclic QD + SVD mutation + Elite sampling",
        }
    }

    fn mutation(self) -> MutationMode {
        match self {
            Variant::FixedQd | Variant::CyclicPlain => MutationMode::None,
            Variant::CyclicGaussian => MutationMode::Gaussian,
            Variant::CyclicSvd | Variant::CyclicSvdElite => MutationMode::Svd,
        }
    }

    fn sampling(self) -> crate::archive::SamplingMode {
        match self {
            Variant::CyclicSvdElite => crate::archive::SamplingMode::Elite,
            _ => crate::archive::SamplingMode::Random,
        }
    }
}

/// Bind one seed to a base config: the seed drives both the run and the
/// suite realization, so each seed is an independent instance.
pub fn config_for_seed(base: &RunConfig, seed: u64) -> RunConfig {
    let mut config = base.clone();
    config.master_seed = seed;
    match &mut config.suite {
        SuiteSpec::Analytic(s) => s.seed = seed,
        SuiteSpec::Network(s) => s.seed = seed,
    }
    config
}

/// Derive the exact config(s) a variant runs. The fixed-quality baseline
/// spends the same total budget as the cyclic runs, split into one
/// fixed-task run per task.
pub fn variant_configs(base: &RunConfig, variant: Variant, seed: u64) -> Vec<RunConfig> {
    let mut config = config_for_seed(base, seed);
    config.mutation.mode = variant.mutation();
    config.sampling.mode = variant.sampling();
    match variant {
        Variant::FixedQd => {
            let tasks = config.suite.tasks() as u64;
            let n = config.generations;
            (0..tasks)
                .map(|k| {
                    let mut c = config.clone();
                    c.cycle = CycleMode::Fixed(k as usize);
                    c.generations = n / tasks + u64::from(k < n % tasks);
                    c
                })
                .collect()
        }
        _ => {
            config.cycle = CycleMode::Cyclic;
            vec![config]
        }
    }
}

/// Run one variant at one seed and return the aggregated model's per-task
/// fitness. The fixed-quality baseline aggregates each sub-run's own-task
/// elite.
pub fn run_variant(base: &RunConfig, variant: Variant, seed: u64, eval_mode: EvalMode) -> Result<Vec<f64>> {
    let configs = variant_configs(base, variant, seed);
    if configs.len() == 1 {
        let suite = build_suite(&configs[0].suite)?;
        let out = crate::engine::train(configs[0].clone(), suite, eval_mode)?;
        return Ok(out.aggregate.fitness);
    }
    // One fixed-task run per task; aggregate each run's own-task elite.
    let suite = build_suite(&configs[0].suite)?;
    let mut elites = Vec::with_capacity(configs.len());
    for (k, c) in configs.iter().enumerate() {
        let run_suite = build_suite(&c.suite)?;
        let out = crate::engine::train(c.clone(), run_suite, eval_mode)?;
        let elite = out.final_archives[k].elite()?.clone();
        elites.push((elite.tv.clone(), elite.fitness[k]));
    }
    let pairs: Vec<(&crate::params::TaskVector, f64)> =
        elites.iter().map(|(tv, f)| (tv.as_ref(), *f)).collect();
    let model = crate::ops::aggregate(&suite.base, &pairs)?;
    match eval_mode {
        EvalMode::Auto => crate::suite::evaluate_all(&model, &suite.evaluators),
        EvalMode::Sequential => crate::suite::evaluate_all_seq(&model, &suite.evaluators),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: usize,
    pub label: &'static str,
    pub seed: u64,
    #[serde(serialize_with = "crate::params::ser_f17")]
    pub mean_fitness: f64,
    #[serde(serialize_with = "crate::params::ser_f17_vec")]
    pub fitness: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant, seed: u64) -> &AblationRow {
        self.rows
            .iter()
            .find(|r| r.variant == variant.index() && r.seed == seed)
            .expect("every (variant, seed) pair has a row")
    }

    pub fn mean_over_seeds(&self, variant: Variant) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant.index())
            .map(|r| r.mean_fitness)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn csv(&self) -> String {
        let tasks = self.rows.first().map(|r| r.fitness.len()).unwrap_or(0);
        let mut out = String::from("variant,label,seed,mean_fitness");
        for k in 0..tasks {
            out.push_str(&format!(",fitness_{k}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}",
                r.variant,
                r.label,
                r.seed,
                crate::params::format_f17(r.mean_fitness)
            ));
            for v in &r.fitness {
                out.push(',');
                out.push_str(&crate::params::format_f17(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// Run all five variants over the seed set. Jobs are independent and run on
/// the rayon pool when the `parallel` feature is on; row order is fixed
/// either way.
pub fn run_ablation(base: &RunConfig, seeds: &[u64], eval_mode: EvalMode) -> Result<AblationReport> {
    let jobs: Vec<(Variant, u64)> = VARIANTS
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();

    #[cfg(feature = "parallel")]
    let results: Vec<Result<Vec<f64>>> = {
        use rayon::prelude::*;
        jobs.par_iter().map(|(v, s)| run_variant(base, *v, *s, eval_mode)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<Vec<f64>>> =
        jobs.iter().map(|(v, s)| run_variant(base, *v, *s, eval_mode)).collect();

    let mut rows = Vec::with_capacity(jobs.len());
    for ((variant, seed), result) in jobs.into_iter().zip(results) {
        let fitness = result?;
        let mean_fitness = fitness.iter().sum::<f64>() / fitness.len() as f64;
        rows.push(AblationRow {
            variant: variant.index(),
            label: variant.label(),
            seed,
            mean_fitness,
            fitness,
        });
    }
    Ok(AblationReport { seeds: seeds.to_vec(), rows })
}

/// Run the ablation and write `ablation.csv` plus a JSON echo into `out`.
pub fn run_ablation_to_dir(
    base: &RunConfig,
    seeds: &[u64],
    out: &Path,
    eval_mode: EvalMode,
) -> Result<AblationReport> {
    let report = run_ablation(base, seeds, eval_mode)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("ablation.csv"), report.csv())?;
    write_json_pretty(&out.join("ablation.json"), &report)?;
    Ok(report)
}
