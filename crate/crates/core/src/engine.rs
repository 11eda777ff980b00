//! Run orchestration: expert seeding, cyclic task rotation, the per-generation
//! QD step with cross-archive insertion, and deterministic randomness.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::archive::{
    sample_parents, seed_with_experts, Archive, BinAxis, BinSpec, Genome, Placement,
    SamplingParams,
};
use crate::error::{Error, Result};
use crate::ops::{aggregate, aggregation_coefficients, crossover, gaussian_mutate, svd_mutate, CrossoverParams, MutationParams};
use crate::params::{add_scaled, compute_task_vector, ParameterSet};
use crate::stream::derive_stream;
use crate::suite::{evaluate_all, evaluate_all_seq, SuiteBundle, TaskEvaluator};

/// Bound factors of the automatic bin rule: the lower bound sits at 85% of
/// the weakest expert, the upper at 115% of the strongest.
pub const AUTO_LOWER_FACTOR: f64 = 0.85;
pub const AUTO_UPPER_FACTOR: f64 = 1.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MutationMode {
    Svd,
    Gaussian,
    None,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MutationConfig {
    pub mode: MutationMode,
    #[serde(flatten)]
    pub params: MutationParams,
}

impl Default for MutationConfig {
    fn default() -> Self {
        MutationConfig { mode: MutationMode::Svd, params: MutationParams::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CycleMode {
    Cyclic,
    Fixed(usize),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum BinCount {
    Uniform(usize),
    PerTask(Vec<usize>),
}

impl Default for BinCount {
    fn default() -> Self {
        BinCount::Uniform(15)
    }
}

impl BinCount {
    pub fn resolve(&self, tasks: usize) -> Result<Vec<usize>> {
        match self {
            BinCount::Uniform(n) => Ok(vec![*n; tasks]),
            BinCount::PerTask(v) => {
                if v.len() != tasks {
                    return Err(Error::Config(format!(
                        "bins lists {} tasks but the suite has {tasks}",
                        v.len()
                    )));
                }
                Ok(v.clone())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Bound {
    pub lower: f64,
    pub upper: f64,
}

/// Either the automatic 85%/115% rule over the expert scores or explicit
/// per-task bounds. Serialized as the string `"auto"` or a bound array.
#[derive(Clone, Debug, Default)]
pub enum BoundsRule {
    #[default]
    Auto,
    Explicit(Vec<Bound>),
}

impl Serialize for BoundsRule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BoundsRule::Auto => s.serialize_str("auto"),
            BoundsRule::Explicit(b) => b.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for BoundsRule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let v = serde_json::Value::deserialize(d)?;
        match &v {
            serde_json::Value::String(s) if s == "auto" => Ok(BoundsRule::Auto),
            serde_json::Value::Array(_) => {
                let bounds: Vec<Bound> =
                    serde_json::from_value(v).map_err(D::Error::custom)?;
                Ok(BoundsRule::Explicit(bounds))
            }
            _ => Err(D::Error::custom("bounds must be \"auto\" or an array of {lower, upper}")),
        }
    }
}

/// All hyperparameters, task bindings, seed, and budget for one experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub master_seed: u64,
    pub generations: u64,
    pub suite: crate::suite::SuiteSpec,
    pub bins: BinCount,
    pub bounds: BoundsRule,
    pub crossover: CrossoverParams,
    pub mutation: MutationConfig,
    pub sampling: SamplingParams,
    pub cycle: CycleMode,
    pub snapshot_cadence: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 0,
            generations: 300,
            suite: Default::default(),
            bins: Default::default(),
            bounds: Default::default(),
            crossover: Default::default(),
            mutation: Default::default(),
            sampling: Default::default(),
            cycle: CycleMode::Cyclic,
            snapshot_cadence: 100,
        }
    }
}

impl RunConfig {
    pub fn validate(&self, tasks: usize) -> Result<()> {
        if tasks < 2 {
            return Err(Error::Config("need at least 2 tasks".into()));
        }
        if let CycleMode::Fixed(k) = self.cycle {
            if k >= tasks {
                return Err(Error::Config(format!("fixed cycle task {k} out of range (K={tasks})")));
            }
        }
        if !(self.mutation.params.w_max > 0.0) {
            return Err(Error::Config("w_max must be > 0".into()));
        }
        if !(self.mutation.params.gaussian_sigma > 0.0) {
            return Err(Error::Config("gaussian_sigma must be > 0".into()));
        }
        if !(self.crossover.sigma > 0.0) {
            return Err(Error::Config("crossover sigma must be > 0".into()));
        }
        if !(self.sampling.alpha_low >= 0.0 && self.sampling.alpha_low <= self.sampling.alpha_high) {
            return Err(Error::Config("need 0 <= alpha_low <= alpha_high".into()));
        }
        if let BinCount::Uniform(0) = self.bins {
            return Err(Error::Config("bins must be >= 1".into()));
        }
        Ok(())
    }

    /// The active quality task of generation `t` (1-based).
    pub fn active_task(&self, t: u64, tasks: usize) -> usize {
        match self.cycle {
            CycleMode::Cyclic => ((t - 1) % tasks as u64) as usize,
            CycleMode::Fixed(k) => k,
        }
    }
}

/// Per-task bounds from the expert fitness table: rows are experts, columns
/// are tasks.
pub fn auto_bounds(expert_fitness: &[Vec<f64>], bins: &[usize]) -> Result<BinSpec> {
    let tasks = bins.len();
    if expert_fitness.is_empty() {
        return Err(Error::Config("auto bounds need at least one expert".into()));
    }
    let mut axes = Vec::with_capacity(tasks);
    for (k, &b) in bins.iter().enumerate() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in expert_fitness {
            lo = lo.min(row[k]);
            hi = hi.max(row[k]);
        }
        let lower = AUTO_LOWER_FACTOR * lo;
        let upper = AUTO_UPPER_FACTOR * hi;
        if !(lower < upper) {
            return Err(Error::DegenerateBounds { task: k });
        }
        axes.push(BinAxis { lower, upper, bins: b });
    }
    BinSpec::new(axes)
}

/// Whether candidate evaluation goes through the parallel pool or the
/// sequential fallback. Results are identical; the switch exists for the
/// bench suite and for verifying that identity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalMode {
    #[default]
    Auto,
    Sequential,
}

fn run_evaluators(
    mode: EvalMode,
    candidate: &ParameterSet,
    evaluators: &[Box<dyn TaskEvaluator>],
) -> Result<Vec<f64>> {
    match mode {
        EvalMode::Auto => evaluate_all(candidate, evaluators),
        EvalMode::Sequential => evaluate_all_seq(candidate, evaluators),
    }
}

/// What one generation did. `fitness` is `None` when the child's evaluation
/// failed and the child was discarded. `elapsed` is diagnostic only and never
/// serialized, so run outputs stay byte-reproducible.
#[derive(Clone, Debug)]
pub struct GenerationLog {
    pub generation: u64,
    pub active_task: usize,
    pub parent_a: u64,
    pub parent_b: u64,
    pub child_id: u64,
    pub fitness: Option<Vec<f64>>,
    pub placements: Vec<Placement>,
    pub elapsed: Duration,
}

/// One QD step: sample two parents from the active archive, cross them,
/// mutate, evaluate on all K tasks, and offer the child to every archive.
#[allow(clippy::too_many_arguments)]
pub fn qd_step(
    archives: &mut [Archive],
    active: usize,
    config: &RunConfig,
    base: &ParameterSet,
    evaluators: &[Box<dyn TaskEvaluator>],
    t: u64,
    next_id: &mut u64,
    eval_mode: EvalMode,
) -> Result<GenerationLog> {
    let started = Instant::now();
    let seed = config.master_seed;

    let mut sampling_rng = derive_stream(seed, "sampling", t);
    let (p1, p2) = sample_parents(&archives[active], &config.sampling, &mut sampling_rng)?;

    let mut crossover_rng = derive_stream(seed, "crossover", t);
    let child_tv = crossover(&p1.tv, &p2.tv, &config.crossover, &mut crossover_rng)?;

    let mut mutation_rng = derive_stream(seed, "mutation", t);
    let mutated = match config.mutation.mode {
        MutationMode::Svd => svd_mutate(&child_tv, &config.mutation.params, &mut mutation_rng)?,
        MutationMode::Gaussian => gaussian_mutate(&child_tv, &config.mutation.params, &mut mutation_rng),
        MutationMode::None => child_tv,
    };

    let child_id = *next_id;
    *next_id += 1;

    let candidate = add_scaled(base, &[(1.0, &mutated)])?;
    let log = match run_evaluators(eval_mode, &candidate, evaluators) {
        Ok(fitness) => {
            let genome = Genome::new(child_id, Arc::new(mutated), fitness.clone(), t)?;
            let placements = archives
                .iter_mut()
                .map(|a| a.update(genome.clone()).outcome)
                .collect();
            GenerationLog {
                generation: t,
                active_task: active,
                parent_a: p1.id,
                parent_b: p2.id,
                child_id,
                fitness: Some(fitness),
                placements,
                elapsed: started.elapsed(),
            }
        }
        Err(_) => GenerationLog {
            generation: t,
            active_task: active,
            parent_a: p1.id,
            parent_b: p2.id,
            child_id,
            fitness: None,
            placements: Vec::new(),
            elapsed: started.elapsed(),
        },
    };
    Ok(log)
}

/// The final merged model and how it was put together.
#[derive(Clone, Debug)]
pub struct AggregateOutcome {
    pub model: ParameterSet,
    pub coefficients: Vec<f64>,
    pub elite_ids: Vec<u64>,
    pub elite_fitness: Vec<f64>,
    pub fitness: Vec<f64>,
    pub mean_fitness: f64,
}

/// Softmax-aggregate the per-archive elites over the base and re-evaluate
/// the merged model.
pub fn aggregate_elites(
    archives: &[Archive],
    base: &ParameterSet,
    evaluators: &[Box<dyn TaskEvaluator>],
    eval_mode: EvalMode,
) -> Result<AggregateOutcome> {
    let mut elites = Vec::with_capacity(archives.len());
    for a in archives {
        elites.push(a.elite()?);
    }
    let elite_fitness: Vec<f64> = elites
        .iter()
        .zip(archives)
        .map(|(g, a)| g.fitness[a.quality_task()])
        .collect();
    let pairs: Vec<(&crate::params::TaskVector, f64)> = elites
        .iter()
        .zip(&elite_fitness)
        .map(|(g, &f)| (g.tv.as_ref(), f))
        .collect();
    let model = aggregate(base, &pairs)?;
    let coefficients = aggregation_coefficients(&elite_fitness)?;
    let fitness = run_evaluators(eval_mode, &model, evaluators)?;
    let mean_fitness = fitness.iter().sum::<f64>() / fitness.len() as f64;
    Ok(AggregateOutcome {
        model,
        coefficients,
        elite_ids: elites.iter().map(|g| g.id).collect(),
        elite_fitness,
        fitness,
        mean_fitness,
    })
}

/// Stepwise run driver. Owns the archives and the generation counter;
/// callers decide when to snapshot and when to stop.
pub struct Trainer {
    config: RunConfig,
    base: ParameterSet,
    evaluators: Vec<Box<dyn TaskEvaluator>>,
    archives: Vec<Archive>,
    bounds: BinSpec,
    expert_fitness: Vec<Vec<f64>>,
    t: u64,
    next_id: u64,
    pub eval_mode: EvalMode,
}

impl Trainer {
    pub fn new(config: RunConfig, suite: SuiteBundle) -> Result<Self> {
        Self::with_eval_mode(config, suite, EvalMode::Auto)
    }

    pub fn with_eval_mode(config: RunConfig, suite: SuiteBundle, eval_mode: EvalMode) -> Result<Self> {
        let SuiteBundle { base, experts, evaluators, .. } = suite;
        let tasks = evaluators.len();
        config.validate(tasks)?;
        if experts.is_empty() {
            return Err(Error::Config("need at least one expert".into()));
        }

        let mut expert_fitness = Vec::with_capacity(experts.len());
        for e in &experts {
            if !e.shape_compatible(&base) {
                return Err(Error::IncompatibleParameters(
                    "expert is not shape-compatible with the base".into(),
                ));
            }
            expert_fitness.push(run_evaluators(eval_mode, e, &evaluators)?);
        }

        let bin_counts = config.bins.resolve(tasks)?;
        let bounds = match &config.bounds {
            BoundsRule::Auto => auto_bounds(&expert_fitness, &bin_counts)?,
            BoundsRule::Explicit(bounds) => {
                if bounds.len() != tasks {
                    return Err(Error::Config(format!(
                        "explicit bounds list {} tasks but the suite has {tasks}",
                        bounds.len()
                    )));
                }
                BinSpec::new(
                    bounds
                        .iter()
                        .zip(&bin_counts)
                        .map(|(b, &n)| BinAxis { lower: b.lower, upper: b.upper, bins: n })
                        .collect(),
                )?
            }
        };

        let mut archives = (0..tasks)
            .map(|k| Archive::new(k, bounds.clone()))
            .collect::<Result<Vec<_>>>()?;

        let expert_genomes = experts
            .iter()
            .zip(&expert_fitness)
            .enumerate()
            .map(|(k, (e, f))| {
                let tv = compute_task_vector(e, &base)?;
                Genome::new(k as u64, Arc::new(tv), f.clone(), 0)
            })
            .collect::<Result<Vec<_>>>()?;
        seed_with_experts(&mut archives, &expert_genomes);

        let next_id = experts.len() as u64;
        Ok(Trainer {
            config,
            base,
            evaluators,
            archives,
            bounds,
            expert_fitness,
            t: 0,
            next_id,
            eval_mode,
        })
    }

    pub fn tasks(&self) -> usize {
        self.evaluators.len()
    }

    pub fn generation(&self) -> u64 {
        self.t
    }

    pub fn archives(&self) -> &[Archive] {
        &self.archives
    }

    pub fn bounds(&self) -> &BinSpec {
        &self.bounds
    }

    pub fn base(&self) -> &ParameterSet {
        &self.base
    }

    pub fn expert_fitness(&self) -> &[Vec<f64>] {
        &self.expert_fitness
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Advance one generation.
    pub fn step(&mut self) -> Result<GenerationLog> {
        self.t += 1;
        let active = self.config.active_task(self.t, self.tasks());
        qd_step(
            &mut self.archives,
            active,
            &self.config,
            &self.base,
            &self.evaluators,
            self.t,
            &mut self.next_id,
            self.eval_mode,
        )
    }

    /// Aggregate the current per-archive elites into one model.
    pub fn aggregate(&self) -> Result<AggregateOutcome> {
        aggregate_elites(&self.archives, &self.base, &self.evaluators, self.eval_mode)
    }

    pub fn evaluate(&self, candidate: &ParameterSet) -> Result<Vec<f64>> {
        run_evaluators(self.eval_mode, candidate, &self.evaluators)
    }
}

/// A captured archive state at one generation.
pub struct SnapshotSet {
    pub generation: u64,
    pub archives: Vec<Archive>,
}

/// A full run's results.
pub struct RunOutcome {
    pub logs: Vec<GenerationLog>,
    pub snapshots: Vec<SnapshotSet>,
    pub aggregate: AggregateOutcome,
    pub bounds: BinSpec,
    pub expert_fitness: Vec<Vec<f64>>,
    pub final_archives: Vec<Archive>,
}

/// Run the configured number of generations, snapshotting after seeding, at
/// the configured cadence, and at the final generation.
pub fn train(config: RunConfig, suite: SuiteBundle, eval_mode: EvalMode) -> Result<RunOutcome> {
    let generations = config.generations;
    let cadence = config.snapshot_cadence;
    let mut trainer = Trainer::with_eval_mode(config, suite, eval_mode)?;
    let mut logs = Vec::with_capacity(generations as usize);
    let mut snapshots = vec![SnapshotSet { generation: 0, archives: trainer.archives().to_vec() }];
    for _ in 0..generations {
        logs.push(trainer.step()?);
        let t = trainer.generation();
        if (cadence > 0 && t % cadence == 0 && t < generations) || t == generations {
            snapshots.push(SnapshotSet { generation: t, archives: trainer.archives().to_vec() });
        }
    }
    let aggregate = trainer.aggregate()?;
    Ok(RunOutcome {
        logs,
        snapshots,
        aggregate,
        bounds: trainer.bounds().clone(),
        expert_fitness: trainer.expert_fitness().to_vec(),
        final_archives: trainer.archives().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::suite::{make_analytic_suite, AnalyticSpec};

    fn quick_config(generations: u64) -> RunConfig {
        RunConfig { generations, snapshot_cadence: 100, ..Default::default() }
    }

    fn quick_suite() -> SuiteBundle {
        make_analytic_suite(&AnalyticSpec::default()).unwrap()
    }

    #[test]
    fn auto_bounds_hand_examples() {
        let bins = vec![15];
        let spec = auto_bounds(&[vec![0.4], vec![0.6]], &bins).unwrap();
        assert!((spec.axis(0).lower - 0.34).abs() < 1e-12);
        assert!((spec.axis(0).upper - 0.69).abs() < 1e-12);

        let spec = auto_bounds(&[vec![1.0]], &bins).unwrap();
        assert!((spec.axis(0).lower - 0.85).abs() < 1e-12);
        assert!((spec.axis(0).upper - 1.15).abs() < 1e-12);
    }

    #[test]
    fn auto_bounds_matches_min_max_oracle() {
        let mut rng = crate::stream::derive_stream(5, "b", 0);
        use rand::Rng;
        let table: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.random_range(0.05..0.95)).collect())
            .collect();
        let spec = auto_bounds(&table, &[15, 15, 15]).unwrap();
        for k in 0..3 {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for row in &table {
                lo = lo.min(row[k]);
                hi = hi.max(row[k]);
            }
            assert_eq!(spec.axis(k).lower, 0.85 * lo);
            assert_eq!(spec.axis(k).upper, 1.15 * hi);
        }
    }

    #[test]
    fn auto_bounds_rejects_all_zero_scores() {
        let r = auto_bounds(&[vec![0.0], vec![0.0]], &[15]);
        assert!(matches!(r, Err(Error::DegenerateBounds { task: 0 })));
    }

    #[test]
    fn cyclic_rotation_starts_at_task_zero() {
        let config = quick_config(6);
        let seq: Vec<usize> = (1..=6).map(|t| config.active_task(t, 3)).collect();
        assert_eq!(seq, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn fixed_mode_pins_the_task() {
        let config = RunConfig { cycle: CycleMode::Fixed(2), ..quick_config(4) };
        let seq: Vec<usize> = (1..=4).map(|t| config.active_task(t, 3)).collect();
        assert_eq!(seq, vec![2, 2, 2, 2]);
    }

    #[test]
    fn zero_generations_leaves_expert_archives() {
        let out = train(quick_config(0), quick_suite(), EvalMode::Auto).unwrap();
        assert!(out.logs.is_empty());
        assert_eq!(out.snapshots.len(), 1);
        for a in &out.final_archives {
            assert!(a.len() <= 3);
            assert!(a.genomes().all(|g| g.id < 3));
        }
        assert_eq!(out.aggregate.elite_ids.len(), 3);
    }

    #[test]
    fn single_expert_step_mutates_that_expert() {
        let spec = AnalyticSpec::default();
        let mut suite = make_analytic_suite(&spec).unwrap();
        suite.experts.truncate(1);
        let config = quick_config(1);
        let mut trainer = Trainer::new(config, suite).unwrap();
        let log = trainer.step().unwrap();
        assert_eq!(log.parent_a, 0);
        assert_eq!(log.parent_b, 0);
        assert_eq!(log.placements.len(), 3);
    }

    #[test]
    fn no_mutation_copy_children_never_replace() {
        let config = RunConfig {
            mutation: MutationConfig { mode: MutationMode::None, ..Default::default() },
            ..quick_config(30)
        };
        let mut trainer = Trainer::new(config, quick_suite()).unwrap();
        for _ in 0..30 {
            let log = trainer.step().unwrap();
            if log.parent_a == log.parent_b {
                // Identical parents, no mutation: the child is an exact copy
                // and strict replacement must reject it everywhere.
                assert!(
                    log.placements.iter().all(|p| *p == Placement::Rejected),
                    "copy child changed an archive: {log:?}"
                );
            }
        }
    }

    #[test]
    fn fixed_cycle_task_out_of_range_is_a_config_error() {
        let config = RunConfig { cycle: CycleMode::Fixed(9), ..quick_config(1) };
        assert!(matches!(
            Trainer::new(config, quick_suite()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn no_experts_is_a_config_error() {
        let mut suite = quick_suite();
        suite.experts.clear();
        assert!(matches!(
            Trainer::new(quick_config(1), suite),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn snapshots_follow_the_cadence() {
        let config = RunConfig { snapshot_cadence: 10, ..quick_config(25) };
        let out = train(config, quick_suite(), EvalMode::Auto).unwrap();
        let gens: Vec<u64> = out.snapshots.iter().map(|s| s.generation).collect();
        assert_eq!(gens, vec![0, 10, 20, 25]);
    }
}
