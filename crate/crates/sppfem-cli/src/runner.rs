//! Run orchestration: config file in, CSV artifacts and a script-stable
//! exit code out.
//!
//! Every run emits `diagnostics.csv`, any scheduled `snap_*.csv` curve
//! snapshots, and `manifest.toml` (the fully resolved config plus the
//! stabilizer table actually used, the density's stability margin, and the
//! stop state).  Re-running a manifest reproduces the diagnostics CSV
//! byte-for-byte.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use sppfem::anisotropy::{
    k_min_table, stability_margin, table_nodes, EnergyMatrixParams, Stabilizer, StabilizerTable,
};
use sppfem::curve::PolygonalCurve;
use sppfem::harness::{
    run_convergence, write_audit_csv, write_decay_csv, write_errors_csv, CellAudit,
    ConvergenceStudy, DecayRecord, ErrorRecord, Reference,
};
use sppfem::solver::{
    run_evolution, DiagnosticsRow, EvolutionOptions, EvolutionResult, Snapshot, StopReason,
};

use crate::config::{parse_density, parse_flow, RunConfig, StabilizerMode, StudyConfig};
use crate::generate::generate_initial;

/// Run completed to the requested horizon (or auxiliary command succeeded).
pub const EXIT_OK: i32 = 0;
/// Configuration or I/O failure; nothing ran or the run could not start.
pub const EXIT_CONFIG: i32 = 1;
/// Evolution stopped because the curve pinched off (crossed itself).
pub const EXIT_PINCH_OFF: i32 = 2;
/// Evolution stopped because a Newton solve did not converge.
pub const EXIT_NEWTON: i32 = 3;
/// Evolution stopped because the mesh degenerated (a vanishing edge).
pub const EXIT_DEGENERATE: i32 = 4;

/// Grid resolution for the reported stability margin.
const MARGIN_GRID: usize = 4096;

/// Execute `sppfem run <config>`: returns the process exit code.
pub fn run_command(config_path: &Path, output_override: Option<&Path>) -> Result<i32> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("cannot read config `{}`", config_path.display()))?;
    let mut config = RunConfig::from_toml_str(&text)
        .with_context(|| format!("in config `{}`", config_path.display()))?
        .normalized()?;
    if let Some(dir) = output_override {
        config.output_dir = dir.to_path_buf();
    }
    let resolved = config.resolve()?;

    let stabilizer = match &resolved.stabilizer {
        StabilizerMode::Minimal => Stabilizer::Table(
            k_min_table(&resolved.density, resolved.alpha)
                .map_err(|e| anyhow!("cannot tabulate the minimal stabilizer: {e}"))?,
        ),
        StabilizerMode::Constant(c) => Stabilizer::Constant(*c),
        StabilizerMode::File(path) => {
            let table = StabilizerTable::read_csv(path)
                .map_err(|e| anyhow!("stabilizer file `{}`: {e}", path.display()))?;
            if table.values().iter().any(|v| !v.is_finite()) {
                bail!(
                    "stabilizer file `{}` contains non-finite entries",
                    path.display()
                );
            }
            Stabilizer::Table(table)
        }
    };
    let params = EnergyMatrixParams::new(resolved.alpha, stabilizer);
    let margin = stability_margin(&resolved.density, MARGIN_GRID);
    let initial = generate_initial(&resolved.shape, resolved.n)?;

    let opts = EvolutionOptions {
        solver: resolved.solver,
        snapshots: resolved.snapshots.clone(),
        pinch_off: resolved.pinch_off,
    };
    let out_dir = config.output_dir.clone();
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create output directory `{}`", out_dir.display()))?;

    let result = run_evolution(
        &initial,
        &resolved.flow,
        &resolved.density,
        &params,
        resolved.tau,
        resolved.t_final,
        &opts,
    )
    .map_err(|e| anyhow!("run could not start: {e}"))?;

    if let Some((theta, deficit)) = result.stabilizer_deficit {
        eprintln!(
            "warning: stabilizer is {deficit:.3e} below the minimal value at theta = \
             {theta:.6}; the discrete energy law is no longer guaranteed"
        );
    }

    write_diagnostics(&result.diagnostics, &out_dir.join("diagnostics.csv"))?;
    write_snapshots(&result.snapshots, &out_dir)?;
    write_manifest(&config, &params.stabilizer, margin, &result, &out_dir)?;

    let (stop_label, code) = stop_summary(&result.stop);
    println!(
        "{} steps to t = {}; stop: {stop_label}; wrote {}",
        result.diagnostics.len() - 1,
        result.final_state.t,
        out_dir.display()
    );
    Ok(code)
}

/// Execute `sppfem sweep <study>`: a convergence study fanned out over a
/// bounded worker pool, one independent sub-study per alpha.
pub fn sweep_command(study_path: &Path) -> Result<i32> {
    let text = fs::read_to_string(study_path)
        .with_context(|| format!("cannot read study `{}`", study_path.display()))?;
    let study = StudyConfig::from_toml_str(&text)
        .with_context(|| format!("in study `{}`", study_path.display()))?;

    // Surface spec errors before any thread spawns; the per-thread shape
    // closures may then assume a valid spec.
    let flow = parse_flow(&study.flow)?;
    let density = parse_density(&study.density)?;
    let smallest_n = (1usize << study.base_level).max(3);
    generate_initial(&study.shape, smallest_n)
        .with_context(|| format!("shape `{}` cannot seed level {}", study.shape, study.base_level))?;

    let workers = study
        .workers
        .unwrap_or_else(|| {
            thread::available_parallelism()
                .map(usize::from)
                .unwrap_or(1)
        })
        .clamp(1, study.alphas.len());
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<_, String>>>> =
        study.alphas.iter().map(|_| Mutex::new(None)).collect();

    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= study.alphas.len() {
                    break;
                }
                let shape_spec = study.shape.clone();
                let sub = ConvergenceStudy {
                    shape: Box::new(move |n| {
                        generate_initial(&shape_spec, n).expect("shape spec validated above")
                    }),
                    base_level: study.base_level,
                    num_levels: study.num_levels,
                    eval_times: study.eval_times.clone(),
                    reference: Reference::FineMesh {
                        level: study.reference_level,
                    },
                    flow: flow.clone(),
                    density: density.clone(),
                    alphas: vec![study.alphas[i]],
                };
                let report = run_convergence(&sub).map_err(|e| e.to_string());
                *slots[i].lock().unwrap() = Some(report);
            });
        }
    });

    let mut records: Vec<ErrorRecord> = Vec::new();
    let mut audits: Vec<CellAudit> = Vec::new();
    let mut decays: Vec<DecayRecord> = Vec::new();
    for (slot, &alpha) in slots.into_iter().zip(&study.alphas) {
        let report = slot
            .into_inner()
            .unwrap()
            .expect("worker pool visits every alpha")
            .map_err(|msg| anyhow!("study failed at alpha = {alpha}: {msg}"))?;
        records.extend(report.records);
        audits.extend(report.audits);
        decays.extend(report.decays);
    }

    fs::create_dir_all(&study.output_dir).with_context(|| {
        format!(
            "cannot create output directory `{}`",
            study.output_dir.display()
        )
    })?;
    write_errors_csv(&records, &study.output_dir.join("errors.csv"))?;
    write_audit_csv(&audits, &study.output_dir.join("audit.csv"))?;
    write_decay_csv(&decays, &study.output_dir.join("decay.csv"))?;
    println!(
        "{} error cells, {} audits; wrote {}",
        records.len(),
        audits.len(),
        study.output_dir.display()
    );
    Ok(EXIT_OK)
}

/// Execute `sppfem kmin <density> --alpha <a>`: print the 21-node minimal
/// stabilizer table to stdout in the table CSV format.
pub fn kmin_command(density_spec: &str, alpha: f64) -> Result<i32> {
    let density = parse_density(density_spec)?;
    let table = k_min_table(&density, alpha)
        .map_err(|e| anyhow!("no finite minimal stabilizer: {e}"))?;
    print!("{}", render_table(&table));
    Ok(EXIT_OK)
}

/// Execute `sppfem distance <a.csv> <b.csv>`: print the manifold distance.
pub fn distance_command(path_a: &Path, path_b: &Path) -> Result<i32> {
    let a = PolygonalCurve::read_csv(path_a)
        .map_err(|e| anyhow!("curve `{}`: {e}", path_a.display()))?;
    let b = PolygonalCurve::read_csv(path_b)
        .map_err(|e| anyhow!("curve `{}`: {e}", path_b.display()))?;
    let d = sppfem::curve::manifold_distance(&a, &b)?;
    println!("{d}");
    Ok(EXIT_OK)
}

/// Map a stop reason to its human label and process exit code.
fn stop_summary(stop: &StopReason) -> (&'static str, i32) {
    match stop {
        StopReason::Horizon => ("horizon", EXIT_OK),
        StopReason::PinchOff { .. } => ("pinch_off", EXIT_PINCH_OFF),
        StopReason::NewtonDiverged { .. } => ("newton_diverged", EXIT_NEWTON),
        StopReason::DegenerateCurve { .. } => ("degenerate", EXIT_DEGENERATE),
    }
}

fn write_diagnostics(rows: &[DiagnosticsRow], path: &Path) -> Result<()> {
    let mut out =
        String::from("step,t,area,energy,mesh_ratio,newton_iters,area_residual,energy_delta\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step, r.t, r.area, r.energy, r.mesh_ratio, r.newton_iters, r.area_residual,
            r.energy_delta
        ));
    }
    fs::write(path, out).with_context(|| format!("cannot write `{}`", path.display()))?;
    Ok(())
}

/// Write `snap_<step>.csv` files; a step index reused by several snapshot
/// times gets `_1`, `_2`, ... suffixes in schedule order.
fn write_snapshots(snapshots: &[Snapshot], dir: &Path) -> Result<()> {
    let mut used: HashSet<String> = HashSet::new();
    for snap in snapshots {
        let mut name = format!("snap_{:06}.csv", snap.step);
        let mut k = 1;
        while !used.insert(name.clone()) {
            name = format!("snap_{:06}_{k}.csv", snap.step);
            k += 1;
        }
        let path = dir.join(&name);
        snap.curve
            .write_csv(&path)
            .map_err(|e| anyhow!("cannot write `{}`: {e}", path.display()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a RunConfig,
    meta: ManifestMeta,
    stabilizer_table: TableDump,
}

#[derive(Serialize)]
struct ManifestMeta {
    format_version: u32,
    tool_version: &'static str,
    stability_margin: f64,
    stop: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop_step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    shape_note: Option<&'static str>,
}

/// The stabilizer actually used, sampled at the canonical table nodes.
#[derive(Serialize)]
struct TableDump {
    theta: Vec<f64>,
    value: Vec<f64>,
}

fn write_manifest(
    config: &RunConfig,
    stabilizer: &Stabilizer,
    margin: f64,
    result: &EvolutionResult,
    dir: &Path,
) -> Result<()> {
    let (stop, _) = stop_summary(&result.stop);
    let (stop_step, stop_time) = match result.stop {
        StopReason::Horizon => (None, None),
        StopReason::PinchOff { step, t }
        | StopReason::NewtonDiverged { step, t, .. }
        | StopReason::DegenerateCurve { step, t } => (Some(step), Some(t)),
    };
    let nodes = table_nodes();
    let manifest = Manifest {
        config,
        meta: ManifestMeta {
            format_version: 1,
            tool_version: env!("CARGO_PKG_VERSION"),
            stability_margin: margin,
            stop,
            stop_step,
            stop_time,
            shape_note: shape_note(&config.shape),
        },
        stabilizer_table: TableDump {
            theta: nodes.to_vec(),
            value: nodes.iter().map(|&t| stabilizer.eval(t)).collect(),
        },
    };
    let text = toml::to_string(&manifest).context("cannot serialize manifest")?;
    let path = dir.join("manifest.toml");
    fs::write(&path, text).with_context(|| format!("cannot write `{}`", path.display()))?;
    Ok(())
}

/// Conventions the shape grammar fixes beyond its one-word name, recorded in
/// the manifest so a run documents its own geometry.
fn shape_note(shape: &str) -> Option<&'static str> {
    let head = shape.split(':').next().unwrap_or(shape).trim();
    match head {
        "quadrifolium" => Some(
            "quadrifolium: polar rose r(phi) = cos(2 phi), traced as \
             cos(4 pi rho) (cos(2 pi rho), sin(2 pi rho))",
        ),
        "lemniscate" => Some(
            "lemniscate: (cos phi, sin phi cos phi) / (1 + sin^2 phi), phi = 2 pi rho, \
             unit scale; signed area is identically zero",
        ),
        "slit" => Some(
            "slit: [-1,1]^2 square minus a 0.02 x 1.8 rectangle entering the top edge \
             at x = 0; corners are exact vertices",
        ),
        "thinfilm" => Some("thinfilm: rectangle [-L, L] x [-1/2, 1/2] with exact corner vertices"),
        _ => None,
    }
}

/// Render a stabilizer table in its CSV format (`theta,value` header).
fn render_table(table: &StabilizerTable) -> String {
    let mut out = String::from("theta,value\n");
    for (theta, value) in table_nodes().iter().zip(table.values()) {
        out.push_str(&format!("{theta},{value}\n"));
    }
    out
}
