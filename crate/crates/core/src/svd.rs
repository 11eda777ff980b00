//! Singular value decomposition of task-vector entries and the
//! spectrum-based model similarity metric.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::params::{Tensor, TaskVector};

/// Singular values this far below the entry's largest one are flagged
/// negligible. They are kept (never truncated) so reconstruction stays exact.
pub const NEGLIGIBLE_RATIO: f64 = 1e-10;

/// Factors of one rank-2 entry: `u * diag(singular_values) * v^T`
/// reconstructs the source matrix. Singular values are sorted descending.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
    pub negligible: Vec<bool>,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.singular_values) * self.v.transpose()
    }
}

/// Per-entry factorization outcome. Rank-1 entries (vectors, and matrices
/// with a single row or column) pass through untouched.
#[derive(Clone, Debug)]
pub enum SvdEntry {
    PassThrough,
    Factors(SvdFactors),
}

#[derive(Clone, Debug)]
pub struct SvdFactorization {
    entries: Vec<(String, SvdEntry)>,
}

impl SvdFactorization {
    pub fn entries(&self) -> &[(String, SvdEntry)] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&SvdEntry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }
}

pub(crate) fn tensor_to_matrix(t: &Tensor) -> Option<DMatrix<f64>> {
    match t {
        Tensor::Matrix { rows, cols, data } if *rows.min(cols) > 1 => {
            Some(DMatrix::from_row_slice(*rows, *cols, data))
        }
        _ => None,
    }
}

pub(crate) fn factorize_matrix(name: &str, m: &DMatrix<f64>) -> Result<SvdFactors> {
    let svd = nalgebra::linalg::SVD::try_new(m.clone(), true, true, f64::EPSILON, 1000)
        .ok_or_else(|| Error::NumericalFailure { entry: name.to_string() })?;
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let sigma = svd.singular_values;

    // Re-sort descending ourselves rather than trusting the library's order.
    let r = sigma.len();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).unwrap().then(a.cmp(&b)));

    let mut u_sorted = DMatrix::zeros(u.nrows(), r);
    let mut v_sorted = DMatrix::zeros(v_t.ncols(), r);
    let mut s_sorted = DVector::zeros(r);
    for (dst, &src) in order.iter().enumerate() {
        u_sorted.set_column(dst, &u.column(src));
        v_sorted.set_column(dst, &v_t.row(src).transpose());
        s_sorted[dst] = sigma[src].max(0.0);
    }
    let cutoff = s_sorted[0] * NEGLIGIBLE_RATIO;
    let negligible = s_sorted.iter().map(|&s| s < cutoff).collect();
    Ok(SvdFactors { u: u_sorted, singular_values: s_sorted, v: v_sorted, negligible })
}

/// Factorize every rank-2 entry of a task vector; mark the rest pass-through.
pub fn svd_factorize(tv: &TaskVector) -> Result<SvdFactorization> {
    let mut entries = Vec::with_capacity(tv.entries().len());
    for e in tv.entries() {
        let item = match tensor_to_matrix(&e.tensor) {
            Some(m) => SvdEntry::Factors(factorize_matrix(&e.name, &m)?),
            None => SvdEntry::PassThrough,
        };
        entries.push((e.name.clone(), item));
    }
    Ok(SvdFactorization { entries })
}

/// Spectral alignment of one pair of matrix entries.
///
/// Computed as the absolute Frobenius cosine `|<a, b>| / (|a| * |b|)`, which
/// equals the cosine between the two entries' singular-value vectors taken
/// in matching component order whenever the entries share singular
/// directions. Two all-zero entries count as perfectly aligned; a zero
/// against a nonzero entry as fully unaligned.
fn entry_alignment(a: &[f64], b: &[f64]) -> f64 {
    let na2: f64 = a.iter().map(|x| x * x).sum();
    let nb2: f64 = b.iter().map(|x| x * x).sum();
    if na2 == 0.0 && nb2 == 0.0 {
        return 1.0;
    }
    if na2 == 0.0 || nb2 == 0.0 {
        return 0.0;
    }
    if a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()) {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot.abs() / (na2 * nb2).sqrt()).min(1.0)
}

/// One line of the per-entry similarity breakdown. `cosine` is `None` for
/// entries that do not qualify (rank-1 shapes).
#[derive(Clone, Debug, serde::Serialize)]
pub struct EntryAlignment {
    pub name: String,
    pub cosine: Option<f64>,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct SimilarityReport {
    pub similarity: f64,
    pub entries: Vec<EntryAlignment>,
}

/// Average spectral alignment over all entries with `min(rows, cols) > 1`.
pub fn model_similarity_report(a: &TaskVector, b: &TaskVector) -> Result<SimilarityReport> {
    if !a.shape_compatible(b) {
        return Err(Error::IncompatibleParameters(
            "task vectors have different name/shape sequences".into(),
        ));
    }
    let mut entries = Vec::with_capacity(a.entries().len());
    let mut total = 0.0;
    let mut qualifying = 0usize;
    for (ea, eb) in a.entries().iter().zip(b.entries()) {
        let cosine = match &ea.tensor {
            Tensor::Matrix { rows, cols, .. } if *rows.min(cols) > 1 => {
                let c = entry_alignment(ea.tensor.values(), eb.tensor.values());
                total += c;
                qualifying += 1;
                Some(c)
            }
            _ => None,
        };
        entries.push(EntryAlignment { name: ea.name.clone(), cosine });
    }
    if qualifying == 0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok(SimilarityReport { similarity: total / qualifying as f64, entries })
}

/// See [`model_similarity_report`]; returns just the averaged value.
pub fn model_similarity(a: &TaskVector, b: &TaskVector) -> Result<f64> {
    Ok(model_similarity_report(a, b)?.similarity)
}
