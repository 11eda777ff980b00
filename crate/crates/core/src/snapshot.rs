//! On-disk formats: archive snapshots (JSON), heatmap exports (CSV), and the
//! generation log (CSV). All floats are written with 17 significant digits so
//! repeated runs produce byte-identical files.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::archive::{Archive, BinAxis, BinSpec, Genome, Placement};
use crate::engine::GenerationLog;
use crate::error::{Error, Result};
use crate::params::{format_f17, TaskVector};

/// Task vectors with more scalars than this are written to side files
/// instead of inline snapshot payloads.
pub const INLINE_SCALAR_LIMIT: usize = 100_000;

/// Marker used for unoccupied cells in heatmap CSVs.
pub const EMPTY_CELL: &str = "NA";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskVectorPayload {
    Inline(TaskVector),
    External { file: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenomeSnapshot {
    pub id: u64,
    pub birth_generation: u64,
    #[serde(serialize_with = "crate::params::ser_f17_vec")]
    pub fitness: Vec<f64>,
    pub task_vector: TaskVectorPayload,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellSnapshot {
    pub cell: Vec<usize>,
    pub genome: GenomeSnapshot,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArchiveSnapshot {
    pub generation: u64,
    pub quality_task: usize,
    pub bins: Vec<BinAxis>,
    pub cells: Vec<CellSnapshot>,
}

/// Capture an archive with inline task-vector payloads.
pub fn archive_snapshot(archive: &Archive, generation: u64) -> ArchiveSnapshot {
    ArchiveSnapshot {
        generation,
        quality_task: archive.quality_task(),
        bins: archive.bins().axes().to_vec(),
        cells: archive
            .cells()
            .map(|(cell, g)| CellSnapshot {
                cell: cell.clone(),
                genome: GenomeSnapshot {
                    id: g.id,
                    birth_generation: g.birth_generation,
                    fitness: g.fitness.clone(),
                    task_vector: TaskVectorPayload::Inline((*g.tv).clone()),
                },
            })
            .collect(),
    }
}

/// Write `archive-<k>.json` for every archive into `dir`, spilling oversized
/// task vectors into `dir/tv/genome-<id>.json`.
pub fn write_snapshot_set(dir: &Path, generation: u64, archives: &[Archive]) -> Result<()> {
    write_snapshot_set_with_limit(dir, generation, archives, INLINE_SCALAR_LIMIT)
}

pub fn write_snapshot_set_with_limit(
    dir: &Path,
    generation: u64,
    archives: &[Archive],
    inline_limit: usize,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, archive) in archives.iter().enumerate() {
        let mut snap = archive_snapshot(archive, generation);
        for cell in &mut snap.cells {
            let TaskVectorPayload::Inline(tv) = &cell.genome.task_vector else { continue };
            let scalars: usize = tv.entries().iter().map(|e| e.tensor.len()).sum();
            if scalars > inline_limit {
                let rel = format!("tv/genome-{}.json", cell.genome.id);
                let path = dir.join(&rel);
                fs::create_dir_all(path.parent().expect("tv dir"))?;
                if !path.exists() {
                    fs::write(&path, serde_json::to_string(tv)?)?;
                }
                cell.genome.task_vector = TaskVectorPayload::External { file: rel };
            }
        }
        fs::write(dir.join(format!("archive-{k}.json")), serde_json::to_string(&snap)?)?;
    }
    Ok(())
}

/// Read back every `archive-<k>.json` in a snapshot directory, resolving
/// external task-vector payloads.
pub fn read_snapshot_set(dir: &Path) -> Result<Vec<ArchiveSnapshot>> {
    let mut snaps = Vec::new();
    for k in 0.. {
        let path = dir.join(format!("archive-{k}.json"));
        if !path.exists() {
            break;
        }
        let mut snap: ArchiveSnapshot = serde_json::from_str(&fs::read_to_string(&path)?)?;
        for cell in &mut snap.cells {
            if let TaskVectorPayload::External { file } = &cell.genome.task_vector {
                let tv: TaskVector = serde_json::from_str(&fs::read_to_string(dir.join(file))?)?;
                cell.genome.task_vector = TaskVectorPayload::Inline(tv);
            }
        }
        snaps.push(snap);
    }
    if snaps.is_empty() {
        return Err(Error::Snapshot(format!("no archive-<k>.json files in {}", dir.display())));
    }
    Ok(snaps)
}

/// Rebuild a live archive from a snapshot, verifying that every stored cell
/// coordinate matches the genome's fitness under the recorded bins.
pub fn snapshot_to_archive(snap: &ArchiveSnapshot) -> Result<Archive> {
    let bins = BinSpec::new(snap.bins.clone())?;
    let mut archive = Archive::new(snap.quality_task, bins)?;
    for cell in &snap.cells {
        let TaskVectorPayload::Inline(tv) = &cell.genome.task_vector else {
            return Err(Error::Snapshot(format!(
                "genome {} payload was not resolved",
                cell.genome.id
            )));
        };
        let genome = Genome::new(
            cell.genome.id,
            Arc::new(tv.clone()),
            cell.genome.fitness.clone(),
            cell.genome.birth_generation,
        )?;
        let coords = archive.cell_coords(&genome.fitness);
        if coords != cell.cell {
            return Err(Error::Snapshot(format!(
                "genome {}: stored cell {:?} does not match its fitness (expected {:?})",
                cell.genome.id, cell.cell, coords
            )));
        }
        archive.insert_raw(coords, genome);
    }
    Ok(archive)
}

// ── Heatmap CSV ──────────────────────────────────────────────────────

/// One CSV over the full lattice: the behavior-characteristic bin axes, the
/// cell quality, and the occupying genome id, with explicit markers for
/// empty cells.
pub fn heatmap_csv(snap: &ArchiveSnapshot) -> String {
    let bc_tasks: Vec<usize> =
        (0..snap.bins.len()).filter(|&k| k != snap.quality_task).collect();
    let mut out = String::new();
    for &k in &bc_tasks {
        out.push_str(&format!("bc_task{k},"));
    }
    out.push_str("quality,genome_id\n");

    let dims: Vec<usize> = bc_tasks.iter().map(|&k| snap.bins[k].bins).collect();
    let total: usize = dims.iter().product();
    let occupied: std::collections::BTreeMap<&[usize], &CellSnapshot> =
        snap.cells.iter().map(|c| (c.cell.as_slice(), c)).collect();

    let mut coords = vec![0usize; dims.len()];
    for _ in 0..total {
        for c in &coords {
            out.push_str(&format!("{c},"));
        }
        match occupied.get(coords.as_slice()) {
            Some(cell) => {
                out.push_str(&format_f17(cell.genome.fitness[snap.quality_task]));
                out.push(',');
                out.push_str(&cell.genome.id.to_string());
            }
            None => {
                out.push_str(EMPTY_CELL);
                out.push(',');
                out.push_str(EMPTY_CELL);
            }
        }
        out.push('\n');
        for d in (0..coords.len()).rev() {
            coords[d] += 1;
            if coords[d] < dims[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

/// Write `archive-<k>.csv` for every snapshot into `dir`.
pub fn write_heatmaps(dir: &Path, snaps: &[ArchiveSnapshot]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, snap) in snaps.iter().enumerate() {
        fs::write(dir.join(format!("archive-{k}.csv")), heatmap_csv(snap))?;
    }
    Ok(())
}

// ── Generation log CSV ───────────────────────────────────────────────

pub fn placement_label(p: &Placement) -> &'static str {
    match p {
        Placement::Inserted => "inserted",
        Placement::Replaced { .. } => "replaced",
        Placement::Rejected => "rejected",
    }
}

pub fn generations_csv_header(tasks: usize) -> String {
    let mut out = String::from("generation,active_task,parent_a,parent_b,child_id,outcome");
    for k in 0..tasks {
        out.push_str(&format!(",fitness_{k}"));
    }
    for k in 0..tasks {
        out.push_str(&format!(",placement_{k}"));
    }
    out.push('\n');
    out
}

pub fn generation_csv_row(log: &GenerationLog, tasks: usize) -> String {
    let mut out = format!(
        "{},{},{},{},{},{}",
        log.generation,
        log.active_task,
        log.parent_a,
        log.parent_b,
        log.child_id,
        if log.fitness.is_some() { "ok" } else { "discarded" },
    );
    match &log.fitness {
        Some(f) => {
            for v in f {
                out.push(',');
                out.push_str(&format_f17(*v));
            }
            for p in &log.placements {
                out.push(',');
                out.push_str(placement_label(p));
            }
        }
        None => {
            for _ in 0..tasks * 2 {
                out.push(',');
            }
        }
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{train, EvalMode, RunConfig};
    use crate::suite::{make_analytic_suite, AnalyticSpec};

    fn small_run() -> crate::engine::RunOutcome {
        let config = RunConfig { generations: 20, snapshot_cadence: 10, ..Default::default() };
        train(config, make_analytic_suite(&AnalyticSpec::default()).unwrap(), EvalMode::Auto)
            .unwrap()
    }

    #[test]
    fn snapshot_round_trips_through_disk() {
        let out = small_run();
        let dir = tempfile::tempdir().unwrap();
        write_snapshot_set(dir.path(), 20, &out.final_archives).unwrap();
        let snaps = read_snapshot_set(dir.path()).unwrap();
        assert_eq!(snaps.len(), 3);
        for (snap, archive) in snaps.iter().zip(&out.final_archives) {
            let rebuilt = snapshot_to_archive(snap).unwrap();
            assert_eq!(rebuilt.len(), archive.len());
            for ((c1, g1), (c2, g2)) in rebuilt.cells().zip(archive.cells()) {
                assert_eq!(c1, c2);
                assert_eq!(g1.id, g2.id);
                assert_eq!(g1.fitness, g2.fitness);
                assert_eq!(*g1.tv, *g2.tv);
            }
        }
    }

    #[test]
    fn oversized_task_vectors_go_to_side_files() {
        let out = small_run();
        let dir = tempfile::tempdir().unwrap();
        write_snapshot_set_with_limit(dir.path(), 20, &out.final_archives, 10).unwrap();
        assert!(dir.path().join("tv").exists());
        let snaps = read_snapshot_set(dir.path()).unwrap();
        let rebuilt = snapshot_to_archive(&snaps[0]).unwrap();
        assert_eq!(rebuilt.len(), out.final_archives[0].len());
    }

    #[test]
    fn heatmap_covers_the_whole_lattice() {
        let out = small_run();
        let snap = archive_snapshot(&out.final_archives[0], 20);
        let csv = heatmap_csv(&snap);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "bc_task1,bc_task2,quality,genome_id");
        assert_eq!(lines.len() - 1, out.final_archives[0].lattice_size());
        let occupied = lines[1..].iter().filter(|l| !l.ends_with(EMPTY_CELL)).count();
        assert_eq!(occupied, out.final_archives[0].len());
    }

    #[test]
    fn heatmap_quality_matches_snapshot_json_strings() {
        let out = small_run();
        let snap = archive_snapshot(&out.final_archives[1], 20);
        let json = serde_json::to_string(&snap).unwrap();
        let csv = heatmap_csv(&snap);
        for cell in &snap.cells {
            let q = format_f17(cell.genome.fitness[snap.quality_task]);
            assert!(json.contains(&q), "snapshot JSON lost {q}");
            assert!(csv.contains(&q), "heatmap CSV lost {q}");
        }
    }

    #[test]
    fn generation_rows_have_a_fixed_column_count() {
        let out = small_run();
        let header = generations_csv_header(3);
        let cols = header.trim().split(',').count();
        for log in &out.logs {
            let row = generation_csv_row(log, 3);
            assert_eq!(row.trim_end().split(',').count(), cols, "row: {row}");
        }
    }
}
