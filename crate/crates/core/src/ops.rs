//! Genome-producing operators: merging crossover, spectrum mutation (plus the
//! plain Gaussian variant), and final elite aggregation.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{add_scaled, Entry, ParameterSet, Tensor, TaskVector};
use crate::svd::{factorize_matrix, tensor_to_matrix};

/// How many times the crossover weights are redrawn when their sum is too
/// close to zero before giving up.
const MAX_WEIGHT_REDRAWS: usize = 100;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossoverParams {
    /// Mean of the raw mixing weights.
    pub mu: f64,
    /// Standard deviation of the raw mixing weights.
    pub sigma: f64,
    /// Redraw both weights when `|w1 + w2|` falls below this.
    pub degenerate_threshold: f64,
}

impl Default for CrossoverParams {
    fn default() -> Self {
        CrossoverParams { mu: 1.0, sigma: 0.03, degenerate_threshold: 1e-6 }
    }
}

impl CrossoverParams {
    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("crossover sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.degenerate_threshold > 0.0) {
            return Err(Error::Config(format!(
                "degenerate_threshold must be > 0, got {}",
                self.degenerate_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MutationParams {
    /// Upper bound of the per-component spectrum rescaling factors.
    pub w_max: f64,
    /// Noise level for the plain Gaussian variant.
    pub gaussian_sigma: f64,
}

impl Default for MutationParams {
    fn default() -> Self {
        MutationParams { w_max: 0.3, gaussian_sigma: 0.01 }
    }
}

/// Blend two task vectors with explicit raw weights. The coefficients are
/// normalized so they sum to exactly 1; negative raw weights are allowed, so
/// the blend can extrapolate outside the segment between its parents.
pub fn blend_task_vectors(
    p1: &TaskVector,
    p2: &TaskVector,
    omega1: f64,
    omega2: f64,
) -> Result<TaskVector> {
    if !p1.shape_compatible(p2) {
        return Err(Error::IncompatibleParameters(
            "crossover parents have different name/shape sequences".into(),
        ));
    }
    if p1.base_id() != p2.base_id() {
        return Err(Error::IncompatibleParameters(
            "crossover parents are relative to different bases".into(),
        ));
    }
    let sum = omega1 + omega2;
    if !sum.is_finite() || sum == 0.0 {
        return Err(Error::InvalidCoefficient(sum));
    }
    if p1.entries() == p2.entries() {
        // Merging a vector with itself is the identity, bit for bit.
        return Ok(p1.clone());
    }
    let c1 = omega1 / sum;
    let c2 = 1.0 - c1;
    Ok(p1.zip_map(p2, |a, b| c1 * a + c2 * b))
}

/// Merging crossover: draw two i.i.d. normal weights, normalize them into
/// mixing coefficients that sum to 1, and blend the parents' task vectors.
pub fn crossover(
    p1: &TaskVector,
    p2: &TaskVector,
    params: &CrossoverParams,
    rng: &mut impl Rng,
) -> Result<TaskVector> {
    params.validate()?;
    let normal = Normal::new(params.mu, params.sigma)
        .map_err(|e| Error::Config(format!("crossover weight distribution: {e}")))?;
    for _ in 0..MAX_WEIGHT_REDRAWS {
        let omega1 = normal.sample(rng);
        let omega2 = normal.sample(rng);
        if (omega1 + omega2).abs() >= params.degenerate_threshold {
            return blend_task_vectors(p1, p2, omega1, omega2);
        }
    }
    Err(Error::DegenerateCrossover {
        attempts: MAX_WEIGHT_REDRAWS,
        threshold: params.degenerate_threshold,
    })
}

/// Spectrum mutation with caller-supplied rescaling weights.
///
/// For every rank-2 entry with `min(rows, cols) > 1` the entry is factorized,
/// each singular value is multiplied by the matching weight, and the entry is
/// rebuilt from the rescaled spectrum. All other entries pass through
/// unchanged. `draw` receives the entry name and its spectrum length and must
/// return that many weights.
pub fn svd_mutate_with(
    child: &TaskVector,
    mut draw: impl FnMut(&str, usize) -> Vec<f64>,
) -> Result<TaskVector> {
    let mut entries = Vec::with_capacity(child.entries().len());
    for e in child.entries() {
        let tensor = match tensor_to_matrix(&e.tensor) {
            Some(m) => {
                let f = factorize_matrix(&e.name, &m)?;
                let r = f.singular_values.len();
                let w = draw(&e.name, r);
                assert_eq!(w.len(), r, "weight vector length must match the spectrum");
                let mut scaled = f.singular_values.clone();
                for i in 0..r {
                    scaled[i] *= w[i];
                }
                let rebuilt = &f.u * DMatrix::from_diagonal(&scaled) * f.v.transpose();
                let (rows, cols) = (rebuilt.nrows(), rebuilt.ncols());
                let mut data = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    for j in 0..cols {
                        data.push(rebuilt[(i, j)]);
                    }
                }
                Tensor::Matrix { rows, cols, data }
            }
            None => e.tensor.clone(),
        };
        entries.push(Entry { name: e.name.clone(), tensor });
    }
    Ok(child.with_entries(entries))
}

/// Spectrum mutation: a fresh weight vector with components i.i.d. uniform on
/// `[0, w_max]` is drawn for every mutable entry.
pub fn svd_mutate(
    child: &TaskVector,
    params: &MutationParams,
    rng: &mut impl Rng,
) -> Result<TaskVector> {
    let w_max = params.w_max;
    svd_mutate_with(child, |_, r| (0..r).map(|_| rng.random_range(0.0..w_max)).collect())
}

/// Plain additive mutation: i.i.d. zero-mean Gaussian noise on every element
/// of every entry.
pub fn gaussian_mutate(
    child: &TaskVector,
    params: &MutationParams,
    rng: &mut impl Rng,
) -> TaskVector {
    let normal = Normal::new(0.0, params.gaussian_sigma).expect("gaussian_sigma must be >= 0");
    let entries = child
        .entries()
        .iter()
        .map(|e| {
            let mut t = e.tensor.clone();
            for v in t.values_mut() {
                *v += normal.sample(rng);
            }
            Entry { name: e.name.clone(), tensor: t }
        })
        .collect();
    child.with_entries(entries)
}

/// Numerically stable softmax.
pub fn softmax(fitness: &[f64]) -> Result<Vec<f64>> {
    for &f in fitness {
        if !f.is_finite() {
            return Err(Error::InvalidFitness(f));
        }
    }
    let max = fitness.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = fitness.iter().map(|&f| (f - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Combine one elite task vector per archive into a single model:
/// `base + sum(beta_k * tv_k)` with softmax mixing coefficients over the
/// elites' own-task fitnesses.
pub fn aggregate(base: &ParameterSet, elites: &[(&TaskVector, f64)]) -> Result<ParameterSet> {
    if elites.is_empty() {
        return Err(Error::Config("aggregation needs at least one elite".into()));
    }
    let fitness: Vec<f64> = elites.iter().map(|(_, f)| *f).collect();
    let beta = softmax(&fitness)?;
    let terms: Vec<(f64, &TaskVector)> =
        beta.iter().zip(elites).map(|(&b, (tv, _))| (b, *tv)).collect();
    add_scaled(base, &terms)
}

/// The softmax coefficients used by [`aggregate`], exposed for reporting.
pub fn aggregation_coefficients(fitness: &[f64]) -> Result<Vec<f64>> {
    softmax(fitness)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::compute_task_vector;
    use crate::stream::derive_stream;

    fn vec_tv(base: &ParameterSet, values: Vec<f64>) -> TaskVector {
        let model =
            ParameterSet::from_pairs(vec![("b", Tensor::vector(values))]).unwrap();
        compute_task_vector(&model, base).unwrap()
    }

    fn vec_base(n: usize) -> ParameterSet {
        ParameterSet::from_pairs(vec![("b", Tensor::vector(vec![0.0; n]))]).unwrap()
    }

    #[test]
    fn crossover_of_identical_vectors_is_identity() {
        let base = vec_base(3);
        let tv = vec_tv(&base, vec![0.1, -0.2, 0.3]);
        let mut rng = derive_stream(1, "x", 0);
        let child = crossover(&tv, &tv, &CrossoverParams::default(), &mut rng).unwrap();
        assert_eq!(child, tv);
    }

    #[test]
    fn blend_equal_weights() {
        let base = vec_base(2);
        let p1 = vec_tv(&base, vec![2.0, 0.0]);
        let p2 = vec_tv(&base, vec![0.0, 2.0]);
        let child = blend_task_vectors(&p1, &p2, 1.0, 1.0).unwrap();
        assert_eq!(child.entries()[0].tensor.values(), &[1.0, 1.0]);
    }

    #[test]
    fn blend_negative_weight_extrapolates() {
        let base = vec_base(2);
        let p1 = vec_tv(&base, vec![1.0, 0.0]);
        let p2 = vec_tv(&base, vec![0.0, 1.0]);
        let child = blend_task_vectors(&p1, &p2, 1.5, -0.5).unwrap();
        assert_eq!(child.entries()[0].tensor.values(), &[1.5, -0.5]);
    }

    #[test]
    fn blend_rejects_mismatched_bases() {
        let base_a = vec_base(2);
        let base_b =
            ParameterSet::from_pairs(vec![("b", Tensor::vector(vec![1.0, 1.0]))]).unwrap();
        let p1 = vec_tv(&base_a, vec![1.0, 0.0]);
        let p2 = compute_task_vector(
            &ParameterSet::from_pairs(vec![("b", Tensor::vector(vec![2.0, 1.0]))]).unwrap(),
            &base_b,
        )
        .unwrap();
        assert!(blend_task_vectors(&p1, &p2, 1.0, 1.0).is_err());
    }

    #[test]
    fn degenerate_weights_error_after_bounded_redraws() {
        let base = vec_base(1);
        let p1 = vec_tv(&base, vec![1.0]);
        let p2 = vec_tv(&base, vec![2.0]);
        let params = CrossoverParams { mu: 0.0, sigma: 1e-12, ..Default::default() };
        let mut rng = derive_stream(1, "x", 0);
        assert!(matches!(
            crossover(&p1, &p2, &params, &mut rng),
            Err(Error::DegenerateCrossover { attempts: 100, .. })
        ));
    }

    #[test]
    fn near_degenerate_weights_are_redrawn() {
        let base = vec_base(1);
        let p1 = vec_tv(&base, vec![1.0]);
        let p2 = vec_tv(&base, vec![2.0]);
        // Weights centered on zero: many draws land below the threshold but a
        // valid pair always shows up within the redraw budget.
        let params = CrossoverParams { mu: 0.0, sigma: 1.0, degenerate_threshold: 1e-2 };
        let mut rng = derive_stream(2, "x", 0);
        for _ in 0..50 {
            crossover(&p1, &p2, &params, &mut rng).unwrap();
        }
    }

    fn matrix_tv(data: Vec<f64>, rows: usize, cols: usize) -> TaskVector {
        let base = ParameterSet::from_pairs(vec![
            ("w", Tensor::matrix(rows, cols, vec![0.0; rows * cols]).unwrap()),
            ("b", Tensor::vector(vec![0.0, 0.0])),
        ])
        .unwrap();
        let model = ParameterSet::from_pairs(vec![
            ("w", Tensor::matrix(rows, cols, data).unwrap()),
            ("b", Tensor::vector(vec![1.0, -1.0])),
        ])
        .unwrap();
        compute_task_vector(&model, &base).unwrap()
    }

    #[test]
    fn unit_weights_reproduce_the_input() {
        let mut rng = derive_stream(9, "m", 0);
        use rand::Rng;
        let data: Vec<f64> = (0..12).map(|_| rng.random_range(-5.0..5.0)).collect();
        let tv = matrix_tv(data, 3, 4);
        let out = svd_mutate_with(&tv, |_, r| vec![1.0; r]).unwrap();
        let orig = tv.entry("w").unwrap();
        let got = out.entry("w").unwrap();
        let num: f64 = orig
            .values()
            .iter()
            .zip(got.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = orig.values().iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(num / den <= 1e-9);
    }

    #[test]
    fn zero_weights_zero_out_mutable_entries_only() {
        let tv = matrix_tv(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0], 3, 4);
        let out = svd_mutate_with(&tv, |_, r| vec![0.0; r]).unwrap();
        assert!(out.entry("w").unwrap().values().iter().all(|&v| v.abs() < 1e-12));
        assert_eq!(out.entry("b").unwrap().values(), tv.entry("b").unwrap().values());
    }

    #[test]
    fn diagonal_spectrum_rescaling() {
        let tv = matrix_tv(vec![3.0, 0.0, 0.0, 1.0], 2, 2);
        let out = svd_mutate_with(&tv, |_, _| vec![0.5, 2.0]).unwrap();
        let got = out.entry("w").unwrap().values();
        let expected = [1.5, 0.0, 0.0, 2.0];
        for (g, e) in got.iter().zip(expected.iter()) {
            assert!((g - e).abs() <= 1e-9, "got {got:?}");
        }
    }

    #[test]
    fn scaled_spectrum_is_preserved_as_a_multiset() {
        let mut rng = derive_stream(4, "m", 1);
        use rand::Rng;
        let data: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tv = matrix_tv(data, 4, 4);
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..2.0)).collect();
        let f_in = crate::svd::svd_factorize(&tv).unwrap();
        let crate::svd::SvdEntry::Factors(f_in) = f_in.entry("w").unwrap() else { panic!() };
        let mut expected: Vec<f64> =
            f_in.singular_values.iter().zip(&w).map(|(s, wi)| s * wi).collect();
        expected.sort_by(|a, b| b.partial_cmp(a).unwrap());

        let mut w_iter = Some(w.clone());
        let out = svd_mutate_with(&tv, |_, _| w_iter.take().unwrap()).unwrap();
        let f_out = crate::svd::svd_factorize(&out).unwrap();
        let crate::svd::SvdEntry::Factors(f_out) = f_out.entry("w").unwrap() else { panic!() };
        for (got, exp) in f_out.singular_values.iter().zip(&expected) {
            assert!((got - exp).abs() <= 1e-9, "{got} vs {exp}");
        }
    }

    #[test]
    fn gaussian_mutation_is_deterministic_and_vanishes_at_zero_sigma() {
        let base = vec_base(4);
        let tv = vec_tv(&base, vec![0.0, 1.0, -1.0, 0.5]);
        let params = MutationParams { gaussian_sigma: 0.1, ..Default::default() };
        let a = gaussian_mutate(&tv, &params, &mut derive_stream(5, "g", 3));
        let b = gaussian_mutate(&tv, &params, &mut derive_stream(5, "g", 3));
        assert_eq!(a, b);
        assert_ne!(a, tv);

        let zero = MutationParams { gaussian_sigma: 0.0, ..Default::default() };
        let c = gaussian_mutate(&tv, &zero, &mut derive_stream(5, "g", 4));
        assert_eq!(c, tv);
    }

    #[test]
    fn softmax_examples() {
        let b = softmax(&[0.7, 0.7]).unwrap();
        assert_eq!(b, vec![0.5, 0.5]);
        let b = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((b[0] - 0.25).abs() < 1e-12);
        assert!((b[1] - 0.75).abs() < 1e-12);
        assert!(matches!(softmax(&[0.1, f64::NAN]), Err(Error::InvalidFitness(_))));
    }

    #[test]
    fn aggregate_equal_fitness_averages_the_elites() {
        let base = vec_base(2);
        let t1 = vec_tv(&base, vec![1.0, 0.0]);
        let t2 = vec_tv(&base, vec![0.0, 1.0]);
        let out = aggregate(&base, &[(&t1, 0.4), (&t2, 0.4)]).unwrap();
        assert_eq!(out.entries()[0].tensor.values(), &[0.5, 0.5]);
    }

    #[test]
    fn aggregate_rejects_empty_and_non_finite() {
        let base = vec_base(1);
        assert!(aggregate(&base, &[]).is_err());
        let t = vec_tv(&base, vec![1.0]);
        assert!(matches!(
            aggregate(&base, &[(&t, f64::INFINITY)]),
            Err(Error::InvalidFitness(_))
        ));
    }
}
