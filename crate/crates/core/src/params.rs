//! Named-tensor parameter sets and task-vector arithmetic.
//!
//! A [`ParameterSet`] is an ordered list of named rank-1 or rank-2 tensors
//! standing in for model weights. A [`TaskVector`] is the entrywise delta
//! between a parameter set and a shared base; all merging operators work on
//! task vectors and only go back to full parameter sets at the end.
//!
//! All tensors are `f64`. JSON serialization writes every value with 17
//! significant digits so a serialize/deserialize round trip is bit-exact.

use std::fmt::Write as _;

use serde::de::Error as _;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A rank-1 or rank-2 real tensor. Matrices are stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    Vector(Vec<f64>),
    Matrix { rows: usize, cols: usize, data: Vec<f64> },
}

impl Tensor {
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::Vector(data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::IncompatibleParameters(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor::Matrix { rows, cols, data })
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            Tensor::Vector(d) => vec![d.len()],
            Tensor::Matrix { rows, cols, .. } => vec![*rows, *cols],
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Tensor::Vector(d) => d,
            Tensor::Matrix { data, .. } => data,
        }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        match self {
            Tensor::Vector(d) => d,
            Tensor::Matrix { data, .. } => data,
        }
    }

    pub fn len(&self) -> usize {
        self.values().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros_like(&self) -> Tensor {
        match self {
            Tensor::Vector(d) => Tensor::Vector(vec![0.0; d.len()]),
            Tensor::Matrix { rows, cols, .. } => Tensor::Matrix {
                rows: *rows,
                cols: *cols,
                data: vec![0.0; rows * cols],
            },
        }
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        match (self, other) {
            (Tensor::Vector(a), Tensor::Vector(b)) => a.len() == b.len(),
            (
                Tensor::Matrix { rows: r1, cols: c1, .. },
                Tensor::Matrix { rows: r2, cols: c2, .. },
            ) => r1 == r2 && c1 == c2,
            _ => false,
        }
    }

    pub(crate) fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert!(self.same_shape(other));
        let data: Vec<f64> = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(&a, &b)| f(a, b))
            .collect();
        match self {
            Tensor::Vector(_) => Tensor::Vector(data),
            Tensor::Matrix { rows, cols, .. } => Tensor::Matrix { rows: *rows, cols: *cols, data },
        }
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.values().iter().map(|&a| f(a)).collect();
        match self {
            Tensor::Vector(_) => Tensor::Vector(data),
            Tensor::Matrix { rows, cols, .. } => Tensor::Matrix { rows: *rows, cols: *cols, data },
        }
    }
}

/// One named tensor inside a parameter set or task vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered collection of named tensors; the genotype substrate.
///
/// Entry names are unique and the order is fixed. Two sets are
/// shape-compatible iff their name/shape sequences are identical.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParameterSet {
    entries: Vec<Entry>,
}

/// A parameter delta relative to a base [`ParameterSet`], identified by the
/// base's content id.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskVector {
    base_id: String,
    entries: Vec<Entry>,
}

fn validate_entries(entries: &[Entry]) -> Result<()> {
    for (i, e) in entries.iter().enumerate() {
        if entries[..i].iter().any(|p| p.name == e.name) {
            return Err(Error::IncompatibleParameters(format!(
                "duplicate entry name `{}`",
                e.name
            )));
        }
        if let Some(v) = e.tensor.values().iter().find(|v| !v.is_finite()) {
            return Err(Error::IncompatibleParameters(format!(
                "non-finite value {v} in entry `{}`",
                e.name
            )));
        }
    }
    Ok(())
}

fn entries_compatible(a: &[Entry], b: &[Entry]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.name == y.name && x.tensor.same_shape(&y.tensor))
}

impl ParameterSet {
    pub fn new(entries: Vec<Entry>) -> Result<Self> {
        validate_entries(&entries)?;
        Ok(ParameterSet { entries })
    }

    pub fn from_pairs(pairs: Vec<(&str, Tensor)>) -> Result<Self> {
        Self::new(
            pairs
                .into_iter()
                .map(|(name, tensor)| Entry { name: name.to_string(), tensor })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn shape_compatible(&self, other: &ParameterSet) -> bool {
        entries_compatible(&self.entries, &other.entries)
    }

    pub fn flat_len(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn flat_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().flat_map(|e| e.tensor.values().iter().copied())
    }

    pub fn zeros_like(&self) -> ParameterSet {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), tensor: e.tensor.zeros_like() })
                .collect(),
        }
    }

    /// Stable content hash used to tie task vectors to their base.
    pub fn content_id(&self) -> String {
        let mut h = Fnv64::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update(&[0xff]);
            for d in e.tensor.shape() {
                h.update(&(d as u64).to_le_bytes());
            }
            for v in e.tensor.values() {
                h.update(&v.to_bits().to_le_bytes());
            }
        }
        format!("{:016x}", h.finish())
    }
}

impl TaskVector {
    pub(crate) fn from_parts(base_id: String, entries: Vec<Entry>) -> Self {
        TaskVector { base_id, entries }
    }

    pub fn base_id(&self) -> &str {
        &self.base_id
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn shape_compatible(&self, other: &TaskVector) -> bool {
        entries_compatible(&self.entries, &other.entries)
    }

    pub fn compatible_with_base(&self, base: &ParameterSet) -> bool {
        entries_compatible(&self.entries, &base.entries)
    }

    pub fn flat_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().flat_map(|e| e.tensor.values().iter().copied())
    }

    pub(crate) fn zip_map(&self, other: &TaskVector, f: impl Fn(f64, f64) -> f64) -> TaskVector {
        debug_assert!(self.shape_compatible(other));
        TaskVector {
            base_id: self.base_id.clone(),
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| Entry { name: a.name.clone(), tensor: a.tensor.zip_map(&b.tensor, &f) })
                .collect(),
        }
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> TaskVector {
        TaskVector {
            base_id: self.base_id.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), tensor: e.tensor.map(&f) })
                .collect(),
        }
    }

    pub(crate) fn with_entries(&self, entries: Vec<Entry>) -> TaskVector {
        TaskVector { base_id: self.base_id.clone(), entries }
    }
}

/// Entrywise `model - base`.
pub fn compute_task_vector(model: &ParameterSet, base: &ParameterSet) -> Result<TaskVector> {
    if !model.shape_compatible(base) {
        return Err(Error::IncompatibleParameters(
            "model and base have different name/shape sequences".into(),
        ));
    }
    let entries = model
        .entries
        .iter()
        .zip(&base.entries)
        .map(|(m, b)| Entry { name: m.name.clone(), tensor: m.tensor.zip_map(&b.tensor, |x, y| x - y) })
        .collect();
    Ok(TaskVector { base_id: base.content_id(), entries })
}

/// `base + sum(coefficient * tv)`, entrywise. The shared kernel behind both
/// crossover and final aggregation.
pub fn add_scaled(base: &ParameterSet, terms: &[(f64, &TaskVector)]) -> Result<ParameterSet> {
    for (c, tv) in terms {
        if !c.is_finite() {
            return Err(Error::InvalidCoefficient(*c));
        }
        if !tv.compatible_with_base(base) {
            return Err(Error::IncompatibleParameters(
                "task vector is not shape-compatible with the base".into(),
            ));
        }
    }
    let mut out = base.clone();
    for (c, tv) in terms {
        for (oe, te) in out.entries.iter_mut().zip(&tv.entries) {
            for (o, t) in oe.tensor.values_mut().iter_mut().zip(te.tensor.values()) {
                *o += c * t;
            }
        }
    }
    Ok(out)
}

/// Equal-weight merge of task vectors over the base (the "naive average"
/// baseline).
pub fn average_merge(base: &ParameterSet, tvs: &[&TaskVector]) -> Result<ParameterSet> {
    if tvs.is_empty() {
        return Ok(base.clone());
    }
    let w = 1.0 / tvs.len() as f64;
    let terms: Vec<(f64, &TaskVector)> = tvs.iter().map(|tv| (w, *tv)).collect();
    add_scaled(base, &terms)
}

// ── JSON plumbing ────────────────────────────────────────────────────

/// Format a float with 17 significant digits (round-trips any f64 exactly).
pub fn format_f17(v: f64) -> String {
    format!("{v:.16e}")
}

/// `serialize_with` helper: one float as a 17-significant-digit JSON number.
pub(crate) fn ser_f17<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    let raw = serde_json::value::RawValue::from_string(format_f17(*v))
        .map_err(serde::ser::Error::custom)?;
    raw.serialize(s)
}

/// `serialize_with` helper: a float vector as 17-significant-digit numbers.
pub(crate) fn ser_f17_vec<S: Serializer>(
    v: &Vec<f64>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    F17Values(v).serialize(s)
}

struct F17Values<'a>(&'a [f64]);

impl Serialize for F17Values<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut out = String::with_capacity(self.0.len() * 25 + 2);
        out.push('[');
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{v:.16e}").expect("write to string");
        }
        out.push(']');
        let raw = serde_json::value::RawValue::from_string(out)
            .map_err(serde::ser::Error::custom)?;
        raw.serialize(serializer)
    }
}

impl Serialize for Entry {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = serializer.serialize_struct("Entry", 3)?;
        st.serialize_field("name", &self.name)?;
        st.serialize_field("shape", &self.tensor.shape())?;
        st.serialize_field("values", &F17Values(self.tensor.values()))?;
        st.end()
    }
}

#[derive(Deserialize)]
struct EntryRepr {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl<'de> Deserialize<'de> for Entry {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = EntryRepr::deserialize(deserializer)?;
        let tensor = match repr.shape.as_slice() {
            [n] => {
                if repr.values.len() != *n {
                    return Err(D::Error::custom(format!(
                        "entry `{}`: shape [{n}] but {} values",
                        repr.name,
                        repr.values.len()
                    )));
                }
                Tensor::Vector(repr.values)
            }
            [r, c] => Tensor::matrix(*r, *c, repr.values)
                .map_err(|e| D::Error::custom(e.to_string()))?,
            other => {
                return Err(D::Error::custom(format!(
                    "entry `{}`: rank {} not supported (only 1 and 2)",
                    repr.name,
                    other.len()
                )))
            }
        };
        Ok(Entry { name: repr.name, tensor })
    }
}

impl<'de> Deserialize<'de> for ParameterSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            entries: Vec<Entry>,
        }
        let repr = Repr::deserialize(deserializer)?;
        ParameterSet::new(repr.entries).map_err(|e| D::Error::custom(e.to_string()))
    }
}

impl<'de> Deserialize<'de> for TaskVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            base_id: String,
            entries: Vec<Entry>,
        }
        let repr = Repr::deserialize(deserializer)?;
        validate_entries(&repr.entries).map_err(|e| D::Error::custom(e.to_string()))?;
        Ok(TaskVector { base_id: repr.base_id, entries: repr.entries })
    }
}

/// FNV-1a 64-bit. Pinned here so content ids never depend on the std hasher.
pub(crate) struct Fnv64(u64);

impl Fnv64 {
    pub(crate) fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ps(pairs: Vec<(&str, Tensor)>) -> ParameterSet {
        ParameterSet::from_pairs(pairs).unwrap()
    }

    #[test]
    fn task_vector_of_base_against_itself_is_zero() {
        let base = ps(vec![
            ("w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
            ("b", Tensor::vector(vec![0.5, -0.5])),
        ]);
        let tv = compute_task_vector(&base, &base).unwrap();
        assert!(tv.flat_values().all(|v| v == 0.0));
        assert_eq!(tv.base_id(), base.content_id());
    }

    #[test]
    fn task_vector_direct_arithmetic() {
        let base = ps(vec![("b", Tensor::vector(vec![1.0, 2.0]))]);
        let model = ps(vec![("b", Tensor::vector(vec![3.0, 5.0]))]);
        let tv = compute_task_vector(&model, &base).unwrap();
        assert_eq!(tv.entries()[0].tensor.values(), &[2.0, 3.0]);
    }

    #[test]
    fn task_vector_round_trip_reconstructs_model() {
        // Values drawn on a shared dyadic grid so the subtraction is exact.
        let mut rng = crate::stream::derive_stream(7, "test-roundtrip", 0);
        let grid = |rng: &mut crate::stream::Stream| {
            use rand::Rng;
            (rng.random_range(-671088640i64..=671088640) as f64) * 2f64.powi(-26)
        };
        let base = ps(vec![(
            "w",
            Tensor::matrix(4, 3, (0..12).map(|_| grid(&mut rng)).collect()).unwrap(),
        )]);
        let model = ps(vec![(
            "w",
            Tensor::matrix(4, 3, (0..12).map(|_| grid(&mut rng)).collect()).unwrap(),
        )]);
        let tv = compute_task_vector(&model, &base).unwrap();
        let back = add_scaled(&base, &[(1.0, &tv)]).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = ps(vec![("w", Tensor::vector(vec![1.0]))]);
        let b = ps(vec![("w", Tensor::vector(vec![1.0, 2.0]))]);
        assert!(matches!(
            compute_task_vector(&a, &b),
            Err(Error::IncompatibleParameters(_))
        ));
    }

    #[test]
    fn add_scaled_empty_terms_copies_base() {
        let base = ps(vec![("b", Tensor::vector(vec![1.0, 2.0]))]);
        assert_eq!(add_scaled(&base, &[]).unwrap(), base);
    }

    #[test]
    fn add_scaled_symmetric_halves() {
        let base = ps(vec![("b", Tensor::vector(vec![1.0, 1.0]))]);
        let model = ps(vec![("b", Tensor::vector(vec![2.0, 3.0]))]);
        let tv = compute_task_vector(&model, &base).unwrap();
        let out = add_scaled(&base, &[(0.5, &tv), (0.5, &tv)]).unwrap();
        assert_eq!(out, model);
    }

    #[test]
    fn add_scaled_signed_coefficients() {
        let base = ps(vec![("b", Tensor::vector(vec![0.0, 0.0]))]);
        let t1 = compute_task_vector(&ps(vec![("b", Tensor::vector(vec![1.0, 0.0]))]), &base).unwrap();
        let t2 = compute_task_vector(&ps(vec![("b", Tensor::vector(vec![0.0, 1.0]))]), &base).unwrap();
        let out = add_scaled(&base, &[(1.5, &t1), (-0.5, &t2)]).unwrap();
        assert_eq!(out.entries()[0].tensor.values(), &[1.5, -0.5]);
    }

    #[test]
    fn add_scaled_rejects_non_finite_coefficient() {
        let base = ps(vec![("b", Tensor::vector(vec![0.0]))]);
        let tv = compute_task_vector(&base, &base).unwrap();
        assert!(matches!(
            add_scaled(&base, &[(f64::NAN, &tv)]),
            Err(Error::InvalidCoefficient(_))
        ));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let set = ps(vec![
            ("w", Tensor::matrix(2, 3, vec![0.1, -0.2, 1.0 / 3.0, -0.0, 5e-17, 1e10]).unwrap()),
            ("b", Tensor::vector(vec![f64::MIN_POSITIVE, -10.0])),
        ]);
        let json = serde_json::to_string(&set).unwrap();
        let back: ParameterSet = serde_json::from_str(&json).unwrap();
        for (a, b) in back.flat_values().zip(set.flat_values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // 17 significant digits on every value
        assert!(json.contains("1.0000000000000000e10"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let r = ParameterSet::from_pairs(vec![
            ("w", Tensor::vector(vec![1.0])),
            ("w", Tensor::vector(vec![2.0])),
        ]);
        assert!(r.is_err());
    }
}
