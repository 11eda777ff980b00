//! Per-task MAP-Elites lattices: binning, insertion, elite extraction, and
//! parent sampling.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::TaskVector;

/// A stored candidate: its task vector plus cached fitness on all K tasks.
#[derive(Clone, Debug)]
pub struct Genome {
    pub id: u64,
    pub tv: Arc<TaskVector>,
    pub fitness: Vec<f64>,
    pub birth_generation: u64,
}

impl Genome {
    pub fn new(id: u64, tv: Arc<TaskVector>, fitness: Vec<f64>, birth_generation: u64) -> Result<Self> {
        if let Some(&f) = fitness.iter().find(|f| !f.is_finite()) {
            return Err(Error::InvalidFitness(f));
        }
        Ok(Genome { id, tv, fitness, birth_generation })
    }
}

/// Bin layout of one task axis.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BinAxis {
    pub lower: f64,
    pub upper: f64,
    pub bins: usize,
}

/// Bin layout for all K task axes. Each archive excludes its own quality
/// task's axis when indexing cells.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BinSpec {
    axes: Vec<BinAxis>,
}

impl BinSpec {
    pub fn new(axes: Vec<BinAxis>) -> Result<Self> {
        for (k, a) in axes.iter().enumerate() {
            if !(a.lower < a.upper) {
                return Err(Error::DegenerateBounds { task: k });
            }
            if a.bins < 1 {
                return Err(Error::Config(format!("task {k}: bins must be >= 1")));
            }
        }
        Ok(BinSpec { axes })
    }

    pub fn tasks(&self) -> usize {
        self.axes.len()
    }

    pub fn axis(&self, task: usize) -> &BinAxis {
        &self.axes[task]
    }

    pub fn axes(&self) -> &[BinAxis] {
        &self.axes
    }
}

/// Map a fitness value to a bin, clamping out-of-range values to the edge
/// bins so early low-fitness candidates are kept at the archive boundary.
pub fn bin_index(f: f64, axis: &BinAxis) -> usize {
    let width = (axis.upper - axis.lower) / axis.bins as f64;
    let raw = ((f - axis.lower) / width).floor();
    if raw < 0.0 {
        0
    } else {
        (raw as usize).min(axis.bins - 1)
    }
}

/// What happened when a genome was offered to one archive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Placement {
    Inserted,
    Replaced { previous: u64 },
    Rejected,
}

#[derive(Clone, Debug)]
pub struct PlacementReport {
    pub cell: Vec<usize>,
    pub outcome: Placement,
}

/// One MAP-Elites lattice. Cells are indexed by the bins of every task
/// except the archive's own quality task, and hold at most one genome.
#[derive(Clone, Debug)]
pub struct Archive {
    quality_task: usize,
    bins: BinSpec,
    cells: BTreeMap<Vec<usize>, Genome>,
}

impl Archive {
    pub fn new(quality_task: usize, bins: BinSpec) -> Result<Self> {
        if quality_task >= bins.tasks() {
            return Err(Error::Config(format!(
                "quality task {quality_task} out of range for {} tasks",
                bins.tasks()
            )));
        }
        Ok(Archive { quality_task, bins, cells: BTreeMap::new() })
    }

    pub fn quality_task(&self) -> usize {
        self.quality_task
    }

    pub fn bins(&self) -> &BinSpec {
        &self.bins
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Total number of cells in the lattice.
    pub fn lattice_size(&self) -> usize {
        (0..self.bins.tasks())
            .filter(|&k| k != self.quality_task)
            .map(|k| self.bins.axis(k).bins)
            .product()
    }

    /// Occupied cells in deterministic coordinate order.
    pub fn cells(&self) -> impl Iterator<Item = (&Vec<usize>, &Genome)> {
        self.cells.iter()
    }

    /// Occupied genomes in deterministic coordinate order.
    pub fn genomes(&self) -> impl Iterator<Item = &Genome> {
        self.cells.values()
    }

    pub fn get(&self, cell: &[usize]) -> Option<&Genome> {
        self.cells.get(cell)
    }

    /// Cell coordinates of a fitness vector: bins of every non-quality task.
    pub fn cell_coords(&self, fitness: &[f64]) -> Vec<usize> {
        assert_eq!(fitness.len(), self.bins.tasks(), "fitness length must equal K");
        (0..self.bins.tasks())
            .filter(|&k| k != self.quality_task)
            .map(|k| bin_index(fitness[k], self.bins.axis(k)))
            .collect()
    }

    fn quality_of(&self, g: &Genome) -> f64 {
        g.fitness[self.quality_task]
    }

    /// Offer a genome: insert into an empty cell, replace only on strictly
    /// greater quality, otherwise leave the incumbent.
    pub fn update(&mut self, genome: Genome) -> PlacementReport {
        assert_eq!(genome.fitness.len(), self.bins.tasks(), "fitness length must equal K");
        let cell = self.cell_coords(&genome.fitness);
        let outcome = match self.cells.get(&cell) {
            None => {
                self.cells.insert(cell.clone(), genome);
                Placement::Inserted
            }
            Some(incumbent) if self.quality_of(&genome) > self.quality_of(incumbent) => {
                let previous = incumbent.id;
                self.cells.insert(cell.clone(), genome);
                Placement::Replaced { previous }
            }
            Some(_) => Placement::Rejected,
        };
        PlacementReport { cell, outcome }
    }

    /// The genome with the highest quality; ties go to the higher birth
    /// generation, then the higher id.
    pub fn elite(&self) -> Result<&Genome> {
        self.genomes()
            .max_by(|a, b| {
                self.quality_of(a)
                    .partial_cmp(&self.quality_of(b))
                    .unwrap()
                    .then(a.birth_generation.cmp(&b.birth_generation))
                    .then(a.id.cmp(&b.id))
            })
            .ok_or(Error::EmptyArchive)
    }

    pub(crate) fn insert_raw(&mut self, cell: Vec<usize>, genome: Genome) {
        self.cells.insert(cell, genome);
    }
}

/// Pass every expert through every archive's update.
pub fn seed_with_experts(archives: &mut [Archive], experts: &[Genome]) -> Vec<Vec<PlacementReport>> {
    archives
        .iter_mut()
        .map(|a| experts.iter().map(|e| a.update(e.clone())).collect())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Elite,
    Random,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub mode: SamplingMode,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams { alpha_low: 0.5, alpha_high: 0.8, mode: SamplingMode::Elite }
    }
}

impl SamplingParams {
    fn validate(&self) -> Result<()> {
        if !(0.0 <= self.alpha_low && self.alpha_low <= self.alpha_high) {
            return Err(Error::Config(format!(
                "need 0 <= alpha_low <= alpha_high, got ({}, {})",
                self.alpha_low, self.alpha_high
            )));
        }
        Ok(())
    }
}

/// Selection probabilities over the occupied cells, aligned with the order of
/// [`Archive::genomes`].
///
/// In elite mode each genome's weight is the product over all K tasks of
/// `alpha_low + norm(f) * (alpha_high - alpha_low)`, where `norm` is the
/// min-max normalization over the occupied genomes of that task (0.5 when
/// max == min). Random mode is uniform.
pub fn sampling_weights(archive: &Archive, params: &SamplingParams) -> Result<Vec<f64>> {
    params.validate()?;
    let n = archive.len();
    if n == 0 {
        return Err(Error::EmptyArchive);
    }
    match params.mode {
        SamplingMode::Random => Ok(vec![1.0 / n as f64; n]),
        SamplingMode::Elite => {
            let tasks = archive.bins().tasks();
            let mut lo = vec![f64::INFINITY; tasks];
            let mut hi = vec![f64::NEG_INFINITY; tasks];
            for g in archive.genomes() {
                for k in 0..tasks {
                    lo[k] = lo[k].min(g.fitness[k]);
                    hi[k] = hi[k].max(g.fitness[k]);
                }
            }
            let spread = params.alpha_high - params.alpha_low;
            let gammas: Vec<f64> = archive
                .genomes()
                .map(|g| {
                    (0..tasks)
                        .map(|k| {
                            let norm = if hi[k] > lo[k] {
                                (g.fitness[k] - lo[k]) / (hi[k] - lo[k])
                            } else {
                                0.5
                            };
                            params.alpha_low + norm * spread
                        })
                        .product::<f64>()
                })
                .collect();
            let total: f64 = gammas.iter().sum();
            if total > 0.0 {
                Ok(gammas.into_iter().map(|g| g / total).collect())
            } else {
                Ok(vec![1.0 / n as f64; n])
            }
        }
    }
}

/// Two independent weighted draws (with replacement) over the occupied cells.
pub fn sample_parents(
    archive: &Archive,
    params: &SamplingParams,
    rng: &mut impl Rng,
) -> Result<(Genome, Genome)> {
    let weights = sampling_weights(archive, params)?;
    let genomes: Vec<&Genome> = archive.genomes().collect();
    let mut draw = |rng: &mut dyn rand::RngCore| {
        let x: f64 = rng.random();
        let mut acc = 0.0;
        for (g, w) in genomes.iter().zip(&weights) {
            acc += w;
            if x < acc {
                return (*g).clone();
            }
        }
        (*genomes.last().expect("archive non-empty")).clone()
    };
    let p1 = draw(rng);
    let p2 = draw(rng);
    Ok((p1, p2))
}
