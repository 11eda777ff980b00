//! Built-in task suites: an analytic landscape family and a small
//! trainable-network family behind one evaluator contract.
//!
//! Both families map fitness into [0, 1] so the auto bound rule and softmax
//! aggregation behave like rate-valued metrics. Construction is fully seeded;
//! the resolved descriptor is echoed to `suite.json` for exact reproduction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Entry, ParameterSet, Tensor};
use crate::stream::derive_stream;

/// One task's scoring function. Deterministic, total on finite inputs, and
/// bounded to [0, 1].
pub trait TaskEvaluator: Send + Sync {
    fn task_id(&self) -> usize;
    fn evaluate(&self, params: &ParameterSet) -> Result<f64>;
}

pub type EvaluatorSet = Vec<Box<dyn TaskEvaluator>>;

/// Everything a run needs from its task suite.
pub struct SuiteBundle {
    pub base: ParameterSet,
    pub experts: Vec<ParameterSet>,
    pub evaluators: EvaluatorSet,
    pub descriptor: SuiteDescriptor,
}

/// Suite selection as it appears in run configs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum SuiteSpec {
    Analytic(AnalyticSpec),
    Network(NetworkSpec),
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec::Analytic(AnalyticSpec::default())
    }
}

impl SuiteSpec {
    pub fn tasks(&self) -> usize {
        match self {
            SuiteSpec::Analytic(s) => s.tasks,
            SuiteSpec::Network(s) => s.tasks,
        }
    }
}

/// Resolved suite description, including derived constants.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum SuiteDescriptor {
    Analytic {
        #[serde(flatten)]
        spec: AnalyticSpec,
        /// Gaussian width derived from the conflict level.
        width: f64,
        center_norm: f64,
    },
    Network {
        #[serde(flatten)]
        spec: NetworkSpec,
        grid_points: usize,
    },
}

pub fn build_suite(spec: &SuiteSpec) -> Result<SuiteBundle> {
    match spec {
        SuiteSpec::Analytic(s) => make_analytic_suite(s),
        SuiteSpec::Network(s) => make_network_suite(s),
    }
}

/// Score a candidate on every task. Runs the evaluators on the rayon pool
/// when the `parallel` feature is enabled; the result is identical to
/// [`evaluate_all_seq`] either way.
pub fn evaluate_all(candidate: &ParameterSet, evaluators: &[Box<dyn TaskEvaluator>]) -> Result<Vec<f64>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let results: Vec<Result<f64>> =
            evaluators.par_iter().map(|e| e.evaluate(candidate)).collect();
        results.into_iter().collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        evaluate_all_seq(candidate, evaluators)
    }
}

/// Sequential fallback for [`evaluate_all`].
pub fn evaluate_all_seq(
    candidate: &ParameterSet,
    evaluators: &[Box<dyn TaskEvaluator>],
) -> Result<Vec<f64>> {
    evaluators.iter().map(|e| e.evaluate(candidate)).collect()
}

fn flat_distance_sq(a: &ParameterSet, b: &ParameterSet) -> f64 {
    a.flat_values()
        .zip(b.flat_values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

// ── Analytic family ──────────────────────────────────────────────────

/// Gaussian-bump landscape: `f_k(p) = exp(-|p - center_k|^2 / (2 width^2))`
/// over the flattened parameter vector.
///
/// Task centers live in the bias coordinates (their weight matrices are
/// zero), while the experts' seeded perturbations live in the weight
/// matrices. Getting a task right therefore means carrying the right bias
/// signal with clean weights, which is exactly the kind of structure the
/// spectrum-rescaling mutation can exploit and plain noise cannot.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticSpec {
    pub tasks: usize,
    pub seed: u64,
    pub layers: usize,
    pub layer_width: usize,
    /// Norm of every task center.
    pub center_scale: f64,
    /// Fitness of one task's center evaluated on another task. Lower values
    /// mean more conflicting tasks.
    pub conflict: f64,
    /// Expert offset from its center, relative to the center norm.
    pub perturbation_scale: f64,
}

impl Default for AnalyticSpec {
    fn default() -> Self {
        AnalyticSpec {
            tasks: 3,
            seed: 7,
            layers: 2,
            layer_width: 8,
            center_scale: 1.0,
            conflict: 0.1,
            perturbation_scale: 0.05,
        }
    }
}

struct AnalyticEvaluator {
    task: usize,
    center: ParameterSet,
    width: f64,
}

impl TaskEvaluator for AnalyticEvaluator {
    fn task_id(&self) -> usize {
        self.task
    }

    fn evaluate(&self, params: &ParameterSet) -> Result<f64> {
        if !params.shape_compatible(&self.center) {
            return Err(Error::Evaluation(format!(
                "candidate is not shape-compatible with task {}",
                self.task
            )));
        }
        let d2 = flat_distance_sq(params, &self.center);
        Ok((-d2 / (2.0 * self.width * self.width)).exp())
    }
}

fn entry_template(layers: usize, width: usize) -> Result<ParameterSet> {
    let mut pairs = Vec::with_capacity(layers * 2);
    for l in 0..layers {
        pairs.push((
            format!("layer{l}.weight"),
            Tensor::matrix(width, width, vec![0.0; width * width])?,
        ));
        pairs.push((format!("layer{l}.bias"), Tensor::vector(vec![0.0; width])));
    }
    ParameterSet::new(
        pairs
            .into_iter()
            .map(|(name, tensor)| Entry { name, tensor })
            .collect(),
    )
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

fn set_bias_coords(ps: &mut ParameterSet, values: &[f64]) {
    let mut it = values.iter();
    let entries: Vec<Entry> = ps
        .entries()
        .iter()
        .map(|e| {
            let tensor = if is_bias(&e.name) {
                let mut t = e.tensor.clone();
                for v in t.values_mut() {
                    *v = *it.next().expect("bias coordinate count");
                }
                t
            } else {
                e.tensor.clone()
            };
            Entry { name: e.name.clone(), tensor }
        })
        .collect();
    *ps = ParameterSet::new(entries).expect("template entries stay valid");
}

pub fn make_analytic_suite(spec: &AnalyticSpec) -> Result<SuiteBundle> {
    if spec.tasks < 2 {
        return Err(Error::Config("analytic suite needs at least 2 tasks".into()));
    }
    if !(spec.conflict > 0.0 && spec.conflict < 1.0) {
        return Err(Error::Config("conflict must lie in (0, 1)".into()));
    }
    let bias_dims = spec.layers * spec.layer_width;
    if spec.tasks > bias_dims {
        return Err(Error::Config(format!(
            "{} tasks need at least {} bias coordinates, have {}",
            spec.tasks, spec.tasks, bias_dims
        )));
    }
    let template = entry_template(spec.layers, spec.layer_width)?;

    // Orthonormal center directions in the bias coordinates.
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(spec.tasks);
    for k in 0..spec.tasks {
        let mut rng = derive_stream(spec.seed, "suite-centers", k as u64);
        loop {
            let mut v: Vec<f64> =
                (0..bias_dims).map(|_| normal_draw(&mut rng)).collect();
            for u in &directions {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= proj * ui;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for vi in &mut v {
                    *vi /= norm;
                }
                directions.push(v);
                break;
            }
        }
    }

    let centers: Vec<ParameterSet> = directions
        .iter()
        .map(|u| {
            let mut c = template.clone();
            let scaled: Vec<f64> = u.iter().map(|x| x * spec.center_scale).collect();
            set_bias_coords(&mut c, &scaled);
            c
        })
        .collect();

    // Width from the mean pairwise center distance and the conflict level.
    let mut d2_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..centers.len() {
        for j in (i + 1)..centers.len() {
            d2_sum += flat_distance_sq(&centers[i], &centers[j]);
            pairs += 1;
        }
    }
    let d2_mean = d2_sum / pairs as f64;
    let width = (d2_mean / (2.0 * (1.0 / spec.conflict).ln())).sqrt();

    // Experts: centers plus seeded weight-matrix noise of fixed norm.
    let experts: Vec<ParameterSet> = centers
        .iter()
        .enumerate()
        .map(|(k, center)| {
            if spec.perturbation_scale == 0.0 {
                return Ok(center.clone());
            }
            let mut rng = derive_stream(spec.seed, "suite-perturbation", k as u64);
            let mut noise: Vec<Vec<f64>> = center
                .entries()
                .iter()
                .map(|e| {
                    if is_bias(&e.name) {
                        vec![0.0; e.tensor.len()]
                    } else {
                        (0..e.tensor.len()).map(|_| normal_draw(&mut rng)).collect()
                    }
                })
                .collect();
            let norm: f64 = noise
                .iter()
                .flat_map(|v| v.iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            let center_norm: f64 = center.flat_values().map(|x| x * x).sum::<f64>().sqrt();
            let scale = spec.perturbation_scale * center_norm / norm;
            for v in &mut noise {
                for x in v {
                    *x *= scale;
                }
            }
            let entries: Vec<Entry> = center
                .entries()
                .iter()
                .zip(&noise)
                .map(|(e, n)| {
                    let mut t = e.tensor.clone();
                    for (v, d) in t.values_mut().iter_mut().zip(n) {
                        *v += d;
                    }
                    Ok(Entry { name: e.name.clone(), tensor: t })
                })
                .collect::<Result<_>>()?;
            ParameterSet::new(entries)
        })
        .collect::<Result<_>>()?;

    let evaluators: EvaluatorSet = centers
        .into_iter()
        .enumerate()
        .map(|(task, center)| {
            Box::new(AnalyticEvaluator { task, center, width }) as Box<dyn TaskEvaluator>
        })
        .collect();

    Ok(SuiteBundle {
        base: template,
        experts,
        evaluators,
        descriptor: SuiteDescriptor::Analytic {
            spec: spec.clone(),
            width,
            center_norm: spec.center_scale,
        },
    })
}

fn normal_draw(rng: &mut crate::stream::Stream) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

// ── Network family ───────────────────────────────────────────────────

/// K regression tasks against seeded teacher networks, evaluated on a fixed
/// lattice over `[-1, 1]^inputs`. Fitness is `exp(-mse)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub tasks: usize,
    pub seed: u64,
    pub inputs: usize,
    pub hidden: usize,
    /// Lattice resolution per input axis.
    pub grid: usize,
    pub train_steps: usize,
    pub step_size: f64,
    /// Scale of the teacher networks' weights.
    pub target_scale: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            tasks: 3,
            seed: 7,
            inputs: 2,
            hidden: 8,
            grid: 8,
            train_steps: 300,
            step_size: 0.3,
            target_scale: 1.5,
        }
    }
}

/// The frozen evaluation data of one network task.
#[derive(Clone, Debug)]
pub struct NetworkTask {
    pub points: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

/// All K frozen tasks plus the architecture they are evaluated against.
pub struct NetworkTasks {
    pub spec: NetworkSpec,
    pub tasks: Vec<NetworkTask>,
}

fn network_template(spec: &NetworkSpec) -> Result<ParameterSet> {
    ParameterSet::new(vec![
        Entry {
            name: "layer0.weight".into(),
            tensor: Tensor::matrix(spec.hidden, spec.inputs, vec![0.0; spec.hidden * spec.inputs])?,
        },
        Entry { name: "layer0.bias".into(), tensor: Tensor::vector(vec![0.0; spec.hidden]) },
        Entry {
            name: "layer1.weight".into(),
            tensor: Tensor::matrix(1, spec.hidden, vec![0.0; spec.hidden])?,
        },
        Entry { name: "layer1.bias".into(), tensor: Tensor::vector(vec![0.0]) },
    ])
}

fn network_forward(params: &ParameterSet, x: &[f64]) -> f64 {
    let e = params.entries();
    let w1 = e[0].tensor.values();
    let b1 = e[1].tensor.values();
    let w2 = e[2].tensor.values();
    let b2 = e[3].tensor.values();
    let hidden = b1.len();
    let inputs = x.len();
    let mut y = b2[0];
    for i in 0..hidden {
        let mut a = b1[i];
        for (j, xj) in x.iter().enumerate().take(inputs) {
            a += w1[i * inputs + j] * xj;
        }
        y += w2[i] * a.tanh();
    }
    y
}

fn lattice_points(inputs: usize, grid: usize) -> Vec<Vec<f64>> {
    let total = grid.pow(inputs as u32);
    let coord = |idx: usize| -1.0 + 2.0 * idx as f64 / (grid - 1) as f64;
    (0..total)
        .map(|mut flat| {
            let mut p = vec![0.0; inputs];
            for d in (0..inputs).rev() {
                p[d] = coord(flat % grid);
                flat /= grid;
            }
            p
        })
        .collect()
}

/// Mean squared error on a task's lattice plus its gradient, laid out like
/// the parameter set's entries.
pub fn network_loss_and_grad(
    params: &ParameterSet,
    task: &NetworkTask,
) -> (f64, Vec<Vec<f64>>) {
    let e = params.entries();
    let w1 = e[0].tensor.values();
    let b1 = e[1].tensor.values();
    let w2 = e[2].tensor.values();
    let b2 = e[3].tensor.values();
    let hidden = b1.len();
    let inputs = task.points[0].len();
    let n = task.points.len() as f64;

    let mut g_w1 = vec![0.0; w1.len()];
    let mut g_b1 = vec![0.0; b1.len()];
    let mut g_w2 = vec![0.0; w2.len()];
    let mut g_b2 = vec![0.0; 1];
    let mut loss = 0.0;
    let mut h = vec![0.0; hidden];

    for (x, &t) in task.points.iter().zip(&task.targets) {
        let mut y = b2[0];
        for i in 0..hidden {
            let mut a = b1[i];
            for (j, xj) in x.iter().enumerate() {
                a += w1[i * inputs + j] * xj;
            }
            h[i] = a.tanh();
            y += w2[i] * h[i];
        }
        let err = y - t;
        loss += err * err / n;
        let dy = 2.0 * err / n;
        g_b2[0] += dy;
        for i in 0..hidden {
            g_w2[i] += dy * h[i];
            let da = dy * w2[i] * (1.0 - h[i] * h[i]);
            g_b1[i] += da;
            for (j, xj) in x.iter().enumerate() {
                g_w1[i * inputs + j] += da * xj;
            }
        }
    }
    (loss, vec![g_w1, g_b1, g_w2, g_b2])
}

fn apply_grad(params: &ParameterSet, grads: &[Vec<f64>], step_size: f64) -> ParameterSet {
    let entries: Vec<Entry> = params
        .entries()
        .iter()
        .zip(grads)
        .map(|(e, g)| {
            let mut t = e.tensor.clone();
            for (v, gi) in t.values_mut().iter_mut().zip(g) {
                *v -= step_size * gi;
            }
            Entry { name: e.name.clone(), tensor: t }
        })
        .collect();
    ParameterSet::new(entries).expect("gradient step keeps entries valid")
}

/// Build the K frozen tasks of a network suite.
pub fn make_network_tasks(spec: &NetworkSpec) -> Result<NetworkTasks> {
    if spec.tasks < 2 {
        return Err(Error::Config("network suite needs at least 2 tasks".into()));
    }
    if spec.grid < 2 {
        return Err(Error::Config("grid must be >= 2".into()));
    }
    let total = spec.grid.pow(spec.inputs as u32);
    if total > 10_000 {
        return Err(Error::Config(format!("evaluation lattice too large ({total} points)")));
    }
    let points = lattice_points(spec.inputs, spec.grid);
    let tasks = (0..spec.tasks)
        .map(|k| {
            let mut rng = derive_stream(spec.seed, "suite-target", k as u64);
            let mut teacher = network_template(spec)?;
            let entries: Vec<Entry> = teacher
                .entries()
                .iter()
                .map(|e| {
                    let mut t = e.tensor.clone();
                    for v in t.values_mut() {
                        *v = normal_draw(&mut rng) * spec.target_scale;
                    }
                    Entry { name: e.name.clone(), tensor: t }
                })
                .collect();
            teacher = ParameterSet::new(entries)?;
            let targets = points.iter().map(|x| network_forward(&teacher, x)).collect();
            Ok(NetworkTask { points: points.clone(), targets })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NetworkTasks { spec: spec.clone(), tasks })
}

/// Deterministic full-batch gradient descent from the shared base, one expert
/// per task. Also returns the recorded loss traces.
pub fn train_network_experts(
    family: &NetworkTasks,
    base: &ParameterSet,
    steps: usize,
    step_size: f64,
) -> Result<(Vec<ParameterSet>, Vec<Vec<f64>>)> {
    let mut experts = Vec::with_capacity(family.tasks.len());
    let mut traces = Vec::with_capacity(family.tasks.len());
    for (k, task) in family.tasks.iter().enumerate() {
        let mut p = base.clone();
        let mut trace = Vec::with_capacity(steps + 1);
        for _ in 0..steps {
            let (loss, grads) = network_loss_and_grad(&p, task);
            if !loss.is_finite() {
                return Err(Error::TrainingFailure(format!(
                    "non-finite loss while training expert {k}"
                )));
            }
            trace.push(loss);
            p = apply_grad(&p, &grads, step_size);
        }
        let (final_loss, _) = network_loss_and_grad(&p, task);
        if !final_loss.is_finite() {
            return Err(Error::TrainingFailure(format!(
                "non-finite loss while training expert {k}"
            )));
        }
        trace.push(final_loss);
        experts.push(p);
        traces.push(trace);
    }
    Ok((experts, traces))
}

struct NetworkEvaluator {
    task_id: usize,
    task: NetworkTask,
}

impl TaskEvaluator for NetworkEvaluator {
    fn task_id(&self) -> usize {
        self.task_id
    }

    fn evaluate(&self, params: &ParameterSet) -> Result<f64> {
        if params.entries().len() != 4 {
            return Err(Error::Evaluation("candidate does not match the network layout".into()));
        }
        let n = self.task.points.len() as f64;
        let mse: f64 = self
            .task
            .points
            .iter()
            .zip(&self.task.targets)
            .map(|(x, &t)| {
                let e = network_forward(params, x) - t;
                e * e / n
            })
            .sum();
        Ok((-mse).exp())
    }
}

pub fn make_network_suite(spec: &NetworkSpec) -> Result<SuiteBundle> {
    let family = make_network_tasks(spec)?;
    let mut rng = derive_stream(spec.seed, "suite-init", 0);
    let template = network_template(spec)?;
    let entries: Vec<Entry> = template
        .entries()
        .iter()
        .map(|e| {
            let fan_in = match &e.tensor {
                Tensor::Matrix { cols, .. } => *cols as f64,
                Tensor::Vector(_) => 1.0,
            };
            let scale = 0.5 / fan_in.sqrt();
            let mut t = e.tensor.clone();
            for v in t.values_mut() {
                *v = normal_draw(&mut rng) * scale;
            }
            Entry { name: e.name.clone(), tensor: t }
        })
        .collect();
    let base = ParameterSet::new(entries)?;
    let (experts, _traces) =
        train_network_experts(&family, &base, spec.train_steps, spec.step_size)?;
    let grid_points = family.tasks[0].points.len();
    let evaluators: EvaluatorSet = family
        .tasks
        .into_iter()
        .enumerate()
        .map(|(task_id, task)| Box::new(NetworkEvaluator { task_id, task }) as Box<dyn TaskEvaluator>)
        .collect();
    Ok(SuiteBundle {
        base,
        experts,
        evaluators,
        descriptor: SuiteDescriptor::Network { spec: spec.clone(), grid_points },
    })
}
