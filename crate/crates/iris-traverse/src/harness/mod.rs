//! Experiment harness: expand a plan into a grid of traversal cells, run
//! them across worker threads, and write deterministic result tables.
//!
//! Every cell is self-contained — its own start latent, its own contexts —
//! so thread scheduling cannot change any number in the output. Rows land
//! in plan order regardless of which worker finished first, which makes
//! reruns byte-identical.

pub mod stats;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::attributes::{band_power, AttributeKind, AttributeSpec, AttributeValues, Baseline};
use crate::autodiff::{Array, Context};
use crate::config::{Direction, ExperimentPlan, SingleRun};
use crate::decoders::{Decoder, LatentSpace};
use crate::error::{Error, Result};
use crate::geometry::{self, PolarConfig};
use crate::identity::{self, GaborBank, IrisCode};
use crate::imageio;
use crate::traversal::{self, TraversalStatus};
use stats::{mean, median, rank_sum_less, RankSumTest};

// ── Shared plumbing ──────────────────────────────────────────────────────

/// Deterministic standard-normal start vector for a seed, in the requested
/// space. A `w`-space start is the mapping image of the `z`-space start for
/// the same seed, so both spaces begin from the same rendered image.
pub fn start_latent(decoder: &dyn Decoder, seed: u64, space: LatentSpace) -> Result<Array> {
    let dim = decoder.latent_dim();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let z = Array::new(
        vec![dim],
        (0..dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect(),
    )?;
    match space {
        LatentSpace::Z => Ok(z),
        LatentSpace::W => decoder.mapping().forward_detached(&z),
    }
}

/// Render a latent to a detached image array.
pub fn render_detached(decoder: &dyn Decoder, v: &Array, space: LatentSpace) -> Result<Array> {
    let ctx = Context::new();
    Ok(decoder.decode_from(&ctx, &ctx.constant(v), space)?.detach())
}

/// Segment an image and extract its iris code with the given bank.
pub fn eval_code(image: &Array, polar: &PolarConfig, bank: &GaborBank) -> Result<IrisCode> {
    let ctx = Context::new();
    let x = ctx.constant(image);
    let m = geometry::soft_mask(&x)?;
    let circles = geometry::estimate_circles(&x, &m)?;
    let unwrap = geometry::normalize(&x, &circles, polar)?;
    identity::iris_code(bank, &unwrap.image.detach())
}

/// Collapse divergence-class failures to `None`; let real bugs propagate.
fn if_measurable<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e) if traversal::is_divergence(&e) => Ok(None),
        Err(e) => Err(e),
    }
}

fn soft_mask_array(image: &Array) -> Result<Array> {
    let ctx = Context::new();
    Ok(geometry::soft_mask(&ctx.constant(image))?.detach())
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Config(format!("serializing results: {e}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(json_err)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(json_err)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

// ── Grid cells ───────────────────────────────────────────────────────────

/// One point of the experiment grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub seed: u64,
    pub attribute: AttributeKind,
    pub direction: Direction,
    /// Index into the target ladder, 0-based.
    pub target_index: usize,
    pub identity_arm: bool,
    pub space: LatentSpace,
}

/// Expand a plan into cells in canonical nesting order:
/// seeds → attributes → directions → targets → identity_arms → spaces.
pub fn expand_cells(plan: &ExperimentPlan) -> Vec<Cell> {
    let mut cells = Vec::with_capacity(plan.cell_count());
    for &seed in &plan.seeds {
        for &attribute in &plan.attributes {
            for &direction in &plan.directions {
                for target_index in 0..plan.targets.count {
                    for &identity_arm in &plan.identity_arms {
                        for &space in &plan.spaces {
                            cells.push(Cell {
                                seed,
                                attribute,
                                direction,
                                target_index,
                                identity_arm,
                                space,
                            });
                        }
                    }
                }
            }
        }
    }
    cells
}

/// Result of one cell, in output-table shape.
#[derive(Clone, Debug, Serialize)]
pub struct CellRow {
    pub seed: u64,
    pub attribute: AttributeKind,
    pub direction: Direction,
    /// Absolute attribute target; absent when the start image was already
    /// degenerate and no baseline could be measured.
    pub target: Option<f64>,
    pub identity_arm: bool,
    pub space: LatentSpace,
    /// Attribute value at the best-loss iterate.
    pub final_value: Option<f64>,
    /// Iterations actually evaluated.
    pub iterations: usize,
    pub status: TraversalStatus,
    /// Iris-code Hamming distance between start and final image.
    pub hd: Option<f64>,
    /// Masked band-pass power of the final image (space comparisons).
    pub texture_energy: Option<f64>,
}

/// Run one grid cell. Divergence anywhere inside the cell is recorded in
/// the row; only caller-level bugs (config, shape mismatches) return `Err`.
pub fn run_cell(
    plan: &ExperimentPlan,
    decoder: &dyn Decoder,
    bank: &GaborBank,
    cell: &Cell,
) -> Result<CellRow> {
    let composite = plan.composite.to_config();
    let diverged = |target: Option<f64>| CellRow {
        seed: cell.seed,
        attribute: cell.attribute,
        direction: cell.direction,
        target,
        identity_arm: cell.identity_arm,
        space: cell.space,
        final_value: None,
        iterations: 0,
        status: TraversalStatus::Diverged,
        hd: None,
        texture_energy: None,
    };

    let start = start_latent(decoder, cell.seed, cell.space)?;
    let Some(x0) = if_measurable(render_detached(decoder, &start, cell.space))? else {
        return Ok(diverged(None));
    };
    let Some(baseline) = if_measurable(Baseline::measure(&x0, &composite))? else {
        return Ok(diverged(None));
    };
    let base_value = baseline
        .attrs
        .targeted_value(cell.attribute)
        .ok_or_else(|| Error::Config(format!("'{}' has no measurable value", cell.attribute)))?;
    let target = base_value
        * (1.0 + cell.direction.sign() * plan.targets.spacing * (cell.target_index as f64 + 1.0));

    let mut specs = vec![AttributeSpec::targeted(cell.attribute, target)];
    if cell.identity_arm {
        specs.push(
            AttributeSpec::hold(AttributeKind::IdentityHold).with_weight(plan.identity_weight),
        );
    }
    let cfg = plan.traversal.to_config(cell.space);

    let result = match traversal::traverse(decoder, &start, &specs, &cfg, &composite) {
        Ok(r) => r,
        Err(e) if traversal::is_divergence(&e) => return Ok(diverged(Some(target))),
        Err(e) => return Err(e),
    };

    let final_value = result.trajectory.best_attrs().targeted_value(cell.attribute);
    let (hd, texture_energy) =
        match if_measurable(render_detached(decoder, &result.latent, cell.space))? {
            Some(xf) => {
                let code0 = if_measurable(eval_code(&x0, &composite.polar, bank))?;
                let code_f = if_measurable(eval_code(&xf, &composite.polar, bank))?;
                let hd = match (code0, code_f) {
                    (Some(a), Some(b)) => if_measurable(identity::hamming(&a, &b, plan.max_shift))?,
                    _ => None,
                };
                let texture = match if_measurable(soft_mask_array(&xf))? {
                    Some(mf) => if_measurable(band_power(&xf, &mf))?,
                    None => None,
                };
                (hd, texture)
            }
            None => (None, None),
        };

    Ok(CellRow {
        seed: cell.seed,
        attribute: cell.attribute,
        direction: cell.direction,
        target: Some(target),
        identity_arm: cell.identity_arm,
        space: cell.space,
        final_value,
        iterations: result.trajectory.records.len(),
        status: result.trajectory.status,
        hd,
        texture_energy,
    })
}

/// Run every cell of the plan across `workers` threads. Rows come back in
/// plan order; numbers are independent of the thread count.
pub fn run_cells(plan: &ExperimentPlan, workers: usize) -> Result<Vec<CellRow>> {
    plan.validate()?;
    plan.decoder.build()?; // surface decoder config errors before spawning
    let cells = expand_cells(plan);
    let n = cells.len();
    let workers = workers.clamp(1, n.max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<CellRow>>>> = Mutex::new((0..n).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let decoder = plan.decoder.build().expect("validated above");
                let bank = GaborBank::eval_bank();
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= n {
                        break;
                    }
                    let row = run_cell(plan, decoder.as_ref(), &bank, &cells[i]);
                    slots.lock().expect("no panics while holding the lock")[i] = Some(row);
                }
            });
        }
    });

    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|slot| slot.expect("every cell visited"))
        .collect()
}

// ── Matrix runs ──────────────────────────────────────────────────────────

pub const MATRIX_CSV_HEADER: &str =
    "seed,attribute,direction,target,identity_arm,space,final_value,iterations,status,hd\n";

/// Render rows as the canonical matrix CSV (header + one line per cell).
pub fn matrix_csv(rows: &[CellRow]) -> String {
    let mut out = String::from(MATRIX_CSV_HEADER);
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.seed,
            r.attribute,
            r.direction,
            fmt_opt(r.target),
            r.identity_arm,
            r.space,
            fmt_opt(r.final_value),
            r.iterations,
            r.status,
            fmt_opt(r.hd),
        ));
    }
    out
}

/// Per-arm aggregate over matrix rows.
#[derive(Clone, Debug, Serialize)]
pub struct ArmSummary {
    pub cells: usize,
    pub converged: usize,
    pub convergence_rate: f64,
    pub mean_hd: Option<f64>,
    pub median_hd: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MatrixSummary {
    pub cells: usize,
    pub converged: usize,
    pub diverged: usize,
    pub with_identity: ArmSummary,
    pub without_identity: ArmSummary,
    /// One-sided rank-sum evidence that identity-held cells drift less
    /// (smaller Hamming distance) than unheld ones.
    pub hd_rank_sum: Option<RankSumTest>,
}

pub fn summarize_matrix(rows: &[CellRow]) -> MatrixSummary {
    let arm = |flag: bool| {
        let sel: Vec<&CellRow> = rows.iter().filter(|r| r.identity_arm == flag).collect();
        let hds: Vec<f64> = sel.iter().filter_map(|r| r.hd).collect();
        let converged = sel
            .iter()
            .filter(|r| r.status == TraversalStatus::Converged)
            .count();
        ArmSummary {
            cells: sel.len(),
            converged,
            convergence_rate: if sel.is_empty() {
                0.0
            } else {
                converged as f64 / sel.len() as f64
            },
            mean_hd: mean(&hds),
            median_hd: median(&hds),
        }
    };
    let with_identity = arm(true);
    let without_identity = arm(false);
    let held: Vec<f64> = rows
        .iter()
        .filter(|r| r.identity_arm)
        .filter_map(|r| r.hd)
        .collect();
    let free: Vec<f64> = rows
        .iter()
        .filter(|r| !r.identity_arm)
        .filter_map(|r| r.hd)
        .collect();
    MatrixSummary {
        cells: rows.len(),
        converged: rows
            .iter()
            .filter(|r| r.status == TraversalStatus::Converged)
            .count(),
        diverged: rows
            .iter()
            .filter(|r| r.status == TraversalStatus::Diverged)
            .count(),
        with_identity,
        without_identity,
        hd_rank_sum: if held.is_empty() || free.is_empty() {
            None
        } else {
            Some(rank_sum_less(&held, &free))
        },
    }
}

#[derive(Debug)]
pub struct MatrixOutput {
    pub rows: Vec<CellRow>,
    pub summary: MatrixSummary,
    pub csv: String,
    pub csv_path: Option<PathBuf>,
    pub summary_path: Option<PathBuf>,
}

/// Run the full grid and, when `out_dir` is given, write `matrix.csv` and
/// `summary.json` into it.
pub fn run_matrix(
    plan: &ExperimentPlan,
    workers: usize,
    out_dir: Option<&Path>,
) -> Result<MatrixOutput> {
    let rows = run_cells(plan, workers)?;
    let csv = matrix_csv(&rows);
    let summary = summarize_matrix(&rows);
    let (mut csv_path, mut summary_path) = (None, None);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let cp = dir.join("matrix.csv");
        fs::write(&cp, &csv)?;
        let sp = dir.join("summary.json");
        write_json(&sp, &summary)?;
        csv_path = Some(cp);
        summary_path = Some(sp);
    }
    Ok(MatrixOutput {
        rows,
        summary,
        csv,
        csv_path,
        summary_path,
    })
}

// ── Space comparison ─────────────────────────────────────────────────────

/// One experiment cell run in both latent spaces.
#[derive(Clone, Debug, Serialize)]
pub struct PairRow {
    pub seed: u64,
    pub attribute: AttributeKind,
    pub direction: Direction,
    pub target: Option<f64>,
    pub identity_arm: bool,
    pub z_final_value: Option<f64>,
    pub z_iterations: usize,
    pub z_status: TraversalStatus,
    pub z_hd: Option<f64>,
    pub z_texture_energy: Option<f64>,
    pub w_final_value: Option<f64>,
    pub w_iterations: usize,
    pub w_status: TraversalStatus,
    pub w_hd: Option<f64>,
    pub w_texture_energy: Option<f64>,
}

pub const SPACE_CSV_HEADER: &str = "seed,attribute,direction,target,identity_arm,\
z_final_value,z_iterations,z_status,z_hd,z_texture_energy,\
w_final_value,w_iterations,w_status,w_hd,w_texture_energy\n";

pub fn space_csv(pairs: &[PairRow]) -> String {
    let mut out = String::from(SPACE_CSV_HEADER);
    for p in pairs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            p.seed,
            p.attribute,
            p.direction,
            fmt_opt(p.target),
            p.identity_arm,
            fmt_opt(p.z_final_value),
            p.z_iterations,
            p.z_status,
            fmt_opt(p.z_hd),
            fmt_opt(p.z_texture_energy),
            fmt_opt(p.w_final_value),
            p.w_iterations,
            p.w_status,
            fmt_opt(p.w_hd),
            fmt_opt(p.w_texture_energy),
        ));
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct SpaceArmSummary {
    pub cells: usize,
    pub converged: usize,
    pub convergence_rate: f64,
    pub mean_hd: Option<f64>,
    pub mean_texture_energy: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpaceSummary {
    pub pairs: usize,
    pub z: SpaceArmSummary,
    pub w: SpaceArmSummary,
}

#[derive(Debug)]
pub struct SpaceOutput {
    pub pairs: Vec<PairRow>,
    pub summary: SpaceSummary,
    pub csv: String,
    pub csv_path: Option<PathBuf>,
    pub summary_path: Option<PathBuf>,
}

/// Run the plan's grid in both spaces and pair the results per cell.
/// The plan must list exactly `spaces = ["z", "w"]` (either order).
pub fn run_space_compare(
    plan: &ExperimentPlan,
    workers: usize,
    out_dir: Option<&Path>,
) -> Result<SpaceOutput> {
    if plan.spaces.len() != 2
        || !plan.spaces.contains(&LatentSpace::Z)
        || !plan.spaces.contains(&LatentSpace::W)
    {
        return Err(Error::Config(
            "space comparison needs spaces = [\"z\", \"w\"]".to_string(),
        ));
    }
    let rows = run_cells(plan, workers)?;
    // Spaces are the innermost grid dimension, so rows pair up adjacently.
    let pairs: Vec<PairRow> = rows
        .chunks(2)
        .map(|pair| {
            let z = pair
                .iter()
                .find(|r| r.space == LatentSpace::Z)
                .expect("plan lists both spaces");
            let w = pair
                .iter()
                .find(|r| r.space == LatentSpace::W)
                .expect("plan lists both spaces");
            PairRow {
                seed: z.seed,
                attribute: z.attribute,
                direction: z.direction,
                target: z.target,
                identity_arm: z.identity_arm,
                z_final_value: z.final_value,
                z_iterations: z.iterations,
                z_status: z.status,
                z_hd: z.hd,
                z_texture_energy: z.texture_energy,
                w_final_value: w.final_value,
                w_iterations: w.iterations,
                w_status: w.status,
                w_hd: w.hd,
                w_texture_energy: w.texture_energy,
            }
        })
        .collect();

    let arm = |status: fn(&PairRow) -> TraversalStatus,
               hd: fn(&PairRow) -> Option<f64>,
               tex: fn(&PairRow) -> Option<f64>| {
        let converged = pairs
            .iter()
            .filter(|p| status(p) == TraversalStatus::Converged)
            .count();
        let hds: Vec<f64> = pairs.iter().filter_map(hd).collect();
        let texes: Vec<f64> = pairs.iter().filter_map(tex).collect();
        SpaceArmSummary {
            cells: pairs.len(),
            converged,
            convergence_rate: if pairs.is_empty() {
                0.0
            } else {
                converged as f64 / pairs.len() as f64
            },
            mean_hd: mean(&hds),
            mean_texture_energy: mean(&texes),
        }
    };
    let summary = SpaceSummary {
        pairs: pairs.len(),
        z: arm(|p| p.z_status, |p| p.z_hd, |p| p.z_texture_energy),
        w: arm(|p| p.w_status, |p| p.w_hd, |p| p.w_texture_energy),
    };

    let csv = space_csv(&pairs);
    let (mut csv_path, mut summary_path) = (None, None);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let cp = dir.join("space_compare.csv");
        fs::write(&cp, &csv)?;
        let sp = dir.join("summary.json");
        write_json(&sp, &summary)?;
        csv_path = Some(cp);
        summary_path = Some(sp);
    }
    Ok(SpaceOutput {
        pairs,
        summary,
        csv,
        csv_path,
        summary_path,
    })
}

// ── Single runs ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct SingleSummary {
    pub status: TraversalStatus,
    pub iterations: usize,
    pub best_iter: usize,
    pub best_loss: f64,
    pub start_attrs: AttributeValues,
    pub final_attrs: AttributeValues,
    /// Iris-code Hamming distance between start and final image.
    pub hamming_distance: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug)]
pub struct SingleOutput {
    pub result: traversal::TraversalResult,
    pub summary: SingleSummary,
    pub out_dir: PathBuf,
}

/// Run one traversal and write its artifacts into `out_dir`:
/// `initial.{pgm,png}`, `final.{pgm,png}`, `trajectory.jsonl`,
/// `snapshots.jsonl` and `summary.json`.
pub fn run_single(run: &SingleRun, out_dir: &Path) -> Result<SingleOutput> {
    run.validate()?;
    let decoder = run.decoder.build()?;
    let composite = run.composite.to_config();
    let cfg = run.traversal.to_config(run.space);

    let start = start_latent(decoder.as_ref(), run.seed, run.space)?;
    let x0 = render_detached(decoder.as_ref(), &start, run.space)?;
    let start_attrs = Baseline::measure(&x0, &composite)?.attrs;

    let result = traversal::traverse(decoder.as_ref(), &start, &run.attributes, &cfg, &composite)?;
    let xf = render_detached(decoder.as_ref(), &result.latent, run.space)?;

    let bank = GaborBank::eval_bank();
    let code0 = if_measurable(eval_code(&x0, &composite.polar, &bank))?;
    let code_f = if_measurable(eval_code(&xf, &composite.polar, &bank))?;
    let hd = match (code0, code_f) {
        (Some(a), Some(b)) => if_measurable(identity::hamming(&a, &b, 16))?,
        _ => None,
    };

    fs::create_dir_all(out_dir)?;
    imageio::write_image(&out_dir.join("initial.pgm"), &x0)?;
    imageio::write_image(&out_dir.join("initial.png"), &x0)?;
    imageio::write_image(&out_dir.join("final.pgm"), &xf)?;
    imageio::write_image(&out_dir.join("final.png"), &xf)?;
    write_jsonl(&out_dir.join("trajectory.jsonl"), &result.trajectory.records)?;
    write_jsonl(&out_dir.join("snapshots.jsonl"), &result.trajectory.snapshots)?;

    let summary = SingleSummary {
        status: result.trajectory.status,
        iterations: result.trajectory.records.len(),
        best_iter: result.trajectory.best_iter,
        best_loss: result.trajectory.best_loss,
        start_attrs,
        final_attrs: *result.trajectory.best_attrs(),
        hamming_distance: hd,
        failure: result.trajectory.failure.clone(),
    };
    write_json(&out_dir.join("summary.json"), &summary)?;

    Ok(SingleOutput {
        result,
        summary,
        out_dir: out_dir.to_path_buf(),
    })
}
