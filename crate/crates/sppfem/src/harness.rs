//! Convergence studies against fine-mesh or closed-form references,
//! structure-preservation audits of evolution diagnostics, and area
//! decay-rate estimation.
//!
//! A study refines the mesh level by level under the `tau = h^2` coupling
//! (level `l` means `h = 2^-l`, i.e. `N = 2^l` vertices sampled uniformly in
//! the generating parameter) and measures the manifold distance between each
//! tested trajectory and the reference at the requested evaluation times.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::anisotropy::{AnisotropyDensity, EnergyMatrixParams};
use crate::curve::{manifold_distance, CurveError, PolygonalCurve};
use crate::solver::{
    run_evolution, DiagnosticsRow, EvolutionOptions, FlowSpec, PinchOffPolicy, SnapshotSchedule,
    SolverError, SolverOptions, StopReason,
};

/// Produces an initial curve with the requested vertex count.
pub type ShapeFn = Box<dyn Fn(usize) -> PolygonalCurve>;

/// What the per-level trajectories are compared against.
pub enum Reference {
    /// A numerical trajectory on mesh level `level` (`h_e = 2^-level`,
    /// `tau_e = h_e^2`), computed once per alpha and sampled at the
    /// evaluation times by linear interpolation in time.
    FineMesh { level: u32 },
    /// A closed-form solution: maps an evaluation time to the exact curve
    /// (discretised finely enough that its own error is negligible).
    Analytic(Box<dyn Fn(f64) -> PolygonalCurve>),
}

/// A mesh-refinement study for one flow and density across several alphas.
pub struct ConvergenceStudy {
    pub shape: ShapeFn,
    /// Coarsest level: `h0 = 2^-base_level`.
    pub base_level: u32,
    /// Number of tested levels `base_level, base_level+1, ...`.
    pub num_levels: usize,
    /// Times at which errors are measured; duplicates are collapsed.
    pub eval_times: Vec<f64>,
    pub reference: Reference,
    pub flow: FlowSpec,
    pub density: AnisotropyDensity,
    /// Energy-matrix parameters are rebuilt per alpha with the minimal
    /// stabilizer.
    pub alphas: Vec<f64>,
}

impl ConvergenceStudy {
    /// Base mesh size `h0 = 2^-base_level`.
    pub fn h0(&self) -> f64 {
        0.5_f64.powi(self.base_level as i32)
    }

    /// Base time step `tau0 = h0^2`.
    pub fn tau0(&self) -> f64 {
        self.h0() * self.h0()
    }
}

/// One measured cell of the error table.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRecord {
    pub alpha: f64,
    /// Absolute level: `h = 2^-level`.
    pub level: u32,
    pub h: f64,
    pub tau: f64,
    pub t: f64,
    /// Manifold distance to the reference; absent if the cell aborted.
    pub error: Option<f64>,
    /// `log2(e_prev/e_cur) / log2(h_prev/h_cur)` against the previous level
    /// at the same time; present only between adjacent positive errors.
    pub order: Option<f64>,
    /// Abort or annotation reason, when something went wrong.
    pub note: Option<String>,
}

/// Structure audit of one evolution's diagnostics series.
#[derive(Clone, Debug)]
pub struct AreaDecayAudit {
    /// Accepted steps covered (rows minus the initial one).
    pub steps: usize,
    /// Whether the flow's exact identity conserves area.
    pub conserving: bool,
    /// Largest per-step identity residual `|(A_new - A_old)/tau + F(1)|`.
    pub max_identity_residual: f64,
    pub identity_tolerance: f64,
    /// Largest per-step area change (meaningful for conserving flows).
    pub max_area_drift: f64,
    pub area_tolerance: f64,
    /// Largest per-step energy increase (0 when monotone).
    pub max_energy_rise: f64,
    pub energy_tolerance: f64,
    /// Normalized area loss `(A^m - A^0)/A^0` per step time.
    pub normalized_area_loss: Vec<(f64, f64)>,
}

impl AreaDecayAudit {
    pub fn identity_pass(&self) -> bool {
        self.max_identity_residual <= self.identity_tolerance
    }

    pub fn conservation_pass(&self) -> bool {
        !self.conserving || self.max_area_drift <= self.area_tolerance
    }

    pub fn energy_pass(&self) -> bool {
        self.max_energy_rise <= self.energy_tolerance
    }

    pub fn pass(&self) -> bool {
        self.identity_pass() && self.conservation_pass() && self.energy_pass()
    }
}

/// Audit summary for one study cell.
#[derive(Clone, Debug)]
pub struct CellAudit {
    pub alpha: f64,
    pub level: u32,
    pub is_reference: bool,
    pub audit: AreaDecayAudit,
}

/// Trailing-window area decay slope for one study cell.
#[derive(Clone, Debug)]
pub struct DecayRecord {
    pub alpha: f64,
    pub level: u32,
    pub is_reference: bool,
    /// Absent when the series was too short to fit.
    pub slope: Option<f64>,
}

/// Everything a study produces.
pub struct ConvergenceReport {
    pub records: Vec<ErrorRecord>,
    pub audits: Vec<CellAudit>,
    pub decays: Vec<DecayRecord>,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("the study needs at least one refinement level")]
    NoLevels,
    #[error("the study needs at least one evaluation time")]
    NoTimes,
    #[error("evaluation times must be finite and non-negative")]
    BadTimes,
    #[error("the study needs at least one alpha")]
    NoAlphas,
    #[error(
        "reference level {reference} must be strictly finer than the finest tested level {finest}"
    )]
    ReferenceNotFiner { finest: u32, reference: u32 },
    #[error("series of {len} rows is too short for a decay fit (need at least {min})")]
    SeriesTooShort { len: usize, min: usize },
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn sorted_times(eval_times: &[f64]) -> Result<Vec<f64>, HarnessError> {
    if eval_times.is_empty() {
        return Err(HarnessError::NoTimes);
    }
    if eval_times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(HarnessError::BadTimes);
    }
    let mut times = eval_times.to_vec();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();
    Ok(times)
}

/// Trajectory snapshots keyed by evaluation time, or a note saying why some
/// are missing.
struct CellRun {
    curves: Vec<Option<PolygonalCurve>>,
    diagnostics: Vec<DiagnosticsRow>,
    note: Option<String>,
}

fn run_cell(
    study: &ConvergenceStudy,
    params: &EnergyMatrixParams,
    level: u32,
    times: &[f64],
) -> CellRun {
    let n = 1_usize << level;
    let h = 0.5_f64.powi(level as i32);
    let tau = h * h;
    let t_final = times.last().copied().unwrap();
    let initial = (study.shape)(n);
    let opts = EvolutionOptions {
        solver: SolverOptions::default(),
        snapshots: SnapshotSchedule::Times(times.to_vec()),
        pinch_off: PinchOffPolicy::Ignore,
    };
    match run_evolution(
        &initial,
        &study.flow,
        &study.density,
        params,
        tau,
        t_final,
        &opts,
    ) {
        Ok(result) => {
            let curves = times
                .iter()
                .map(|t| {
                    result
                        .snapshots
                        .iter()
                        .find(|s| s.t == *t)
                        .map(|s| s.curve.clone())
                })
                .collect();
            let note = match result.stop {
                StopReason::Horizon => None,
                other => Some(format!("evolution stopped early: {other:?}")),
            };
            CellRun {
                curves,
                diagnostics: result.diagnostics,
                note,
            }
        }
        Err(err) => CellRun {
            curves: vec![None; times.len()],
            diagnostics: Vec::new(),
            note: Some(format!("evolution failed: {err}")),
        },
    }
}

/// Run the full study: one reference per alpha, every level against it at
/// every evaluation time.  Cell failures are recorded as notes on the
/// affected rows; the table always emits.
pub fn run_convergence(study: &ConvergenceStudy) -> Result<ConvergenceReport, HarnessError> {
    if study.num_levels == 0 {
        return Err(HarnessError::NoLevels);
    }
    if study.alphas.is_empty() {
        return Err(HarnessError::NoAlphas);
    }
    let times = sorted_times(&study.eval_times)?;
    let finest = study.base_level + (study.num_levels as u32 - 1);
    if let Reference::FineMesh { level } = study.reference {
        if level <= finest {
            return Err(HarnessError::ReferenceNotFiner {
                finest,
                reference: level,
            });
        }
    }

    let mut records = Vec::new();
    let mut audits = Vec::new();
    let mut decays = Vec::new();

    for &alpha in &study.alphas {
        let params = match EnergyMatrixParams::minimal(&study.density, alpha) {
            Ok(p) => p,
            Err(err) => {
                let note = Some(format!("stabilizer unavailable: {err}"));
                for offset in 0..study.num_levels {
                    let level = study.base_level + offset as u32;
                    let h = 0.5_f64.powi(level as i32);
                    for &t in &times {
                        records.push(ErrorRecord {
                            alpha,
                            level,
                            h,
                            tau: h * h,
                            t,
                            error: None,
                            order: None,
                            note: note.clone(),
                        });
                    }
                }
                continue;
            }
        };

        // Reference trajectory, computed once per alpha.
        let (ref_curves, ref_note): (Vec<Option<PolygonalCurve>>, Option<String>) =
            match &study.reference {
                Reference::FineMesh { level } => {
                    let run = run_cell(study, &params, *level, &times);
                    audits.push(CellAudit {
                        alpha,
                        level: *level,
                        is_reference: true,
                        audit: audit_structure(&run.diagnostics, &study.flow),
                    });
                    decays.push(DecayRecord {
                        alpha,
                        level: *level,
                        is_reference: true,
                        slope: decay_rate_estimate(&run.diagnostics).ok(),
                    });
                    (run.curves, run.note)
                }
                Reference::Analytic(f) => (times.iter().map(|t| Some(f(*t))).collect(), None),
            };

        for offset in 0..study.num_levels {
            let level = study.base_level + offset as u32;
            let h = 0.5_f64.powi(level as i32);
            let run = run_cell(study, &params, level, &times);
            audits.push(CellAudit {
                alpha,
                level,
                is_reference: false,
                audit: audit_structure(&run.diagnostics, &study.flow),
            });
            decays.push(DecayRecord {
                alpha,
                level,
                is_reference: false,
                slope: decay_rate_estimate(&run.diagnostics).ok(),
            });
            for (ti, &t) in times.iter().enumerate() {
                let (error, note) = match (&run.curves[ti], &ref_curves[ti]) {
                    (Some(ours), Some(reference)) => match manifold_distance(ours, reference) {
                        Ok(e) => (Some(e), None),
                        Err(err) => (None, Some(format!("distance failed: {err}"))),
                    },
                    (None, _) => (None, run.note.clone()),
                    (_, None) => (None, ref_note.clone()),
                };
                records.push(ErrorRecord {
                    alpha,
                    level,
                    h,
                    tau: h * h,
                    t,
                    error,
                    order: None,
                    note,
                });
            }
        }
    }

    // Orders between adjacent levels at the same (alpha, t).
    for i in 0..records.len() {
        let cur = records[i].clone();
        if cur.level == study.base_level {
            continue;
        }
        let prev = records.iter().find(|r| {
            r.alpha == cur.alpha && r.t == cur.t && r.level + 1 == cur.level
        });
        if let (Some(prev), Some(e_cur)) = (prev, cur.error) {
            if let Some(e_prev) = prev.error {
                if e_prev > 0.0
                    && e_cur > 0.0
                    && e_prev.is_finite()
                    && e_cur.is_finite()
                {
                    let order = (e_prev / e_cur).log2() / (prev.h / cur.h).log2();
                    records[i].order = Some(order);
                }
            }
        }
    }

    // Deterministic presentation: by alpha (input order), then t, then level.
    let alpha_rank = |a: f64| study.alphas.iter().position(|x| *x == a).unwrap();
    records.sort_by(|a, b| {
        alpha_rank(a.alpha)
            .cmp(&alpha_rank(b.alpha))
            .then(a.t.partial_cmp(&b.t).unwrap())
            .then(a.level.cmp(&b.level))
    });

    Ok(ConvergenceReport {
        records,
        audits,
        decays,
    })
}

/// Check the per-step structure identities of a diagnostics series against
/// the solver tolerances.  Reports, never throws: an empty or single-row
/// series passes vacuously.
pub fn audit_structure(rows: &[DiagnosticsRow], flow: &FlowSpec) -> AreaDecayAudit {
    let conserving = flow.conserves_area();
    if rows.len() < 2 {
        return AreaDecayAudit {
            steps: 0,
            conserving,
            max_identity_residual: 0.0,
            identity_tolerance: 0.0,
            max_area_drift: 0.0,
            area_tolerance: 0.0,
            max_energy_rise: 0.0,
            energy_tolerance: 0.0,
            normalized_area_loss: Vec::new(),
        };
    }
    let tau = rows[1].t - rows[0].t;
    let a0 = rows[0].area;
    let w0 = rows[0].energy;
    let mut max_identity_residual = 0.0_f64;
    let mut max_area_drift = 0.0_f64;
    let mut max_energy_rise = 0.0_f64;
    let mut normalized_area_loss = Vec::with_capacity(rows.len() - 1);
    for pair in rows.windows(2) {
        max_identity_residual = max_identity_residual.max(pair[1].area_residual);
        max_area_drift = max_area_drift.max((pair[1].area - pair[0].area).abs());
        max_energy_rise = max_energy_rise.max(pair[1].energy - pair[0].energy);
        normalized_area_loss.push((pair[1].t, (pair[1].area - a0) / a0));
    }
    AreaDecayAudit {
        steps: rows.len() - 1,
        conserving,
        max_identity_residual,
        identity_tolerance: 1e-11 * 1.0_f64.max(a0.abs() / tau),
        max_area_drift,
        area_tolerance: 1e-12 * a0.abs(),
        max_energy_rise: max_energy_rise.max(0.0),
        energy_tolerance: 1e-12 * w0,
        normalized_area_loss,
    }
}

/// Least-squares slope of enclosed area versus time over the trailing half
/// of the series.
pub fn decay_rate_estimate(rows: &[DiagnosticsRow]) -> Result<f64, HarnessError> {
    const MIN_ROWS: usize = 4;
    if rows.len() < MIN_ROWS {
        return Err(HarnessError::SeriesTooShort {
            len: rows.len(),
            min: MIN_ROWS,
        });
    }
    let window = &rows[rows.len() / 2..];
    let n = window.len() as f64;
    let t_mean = window.iter().map(|r| r.t).sum::<f64>() / n;
    let a_mean = window.iter().map(|r| r.area).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for r in window {
        num += (r.t - t_mean) * (r.area - a_mean);
        den += (r.t - t_mean) * (r.t - t_mean);
    }
    Ok(num / den)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_note(note: &Option<String>) -> String {
    note.as_deref()
        .unwrap_or("")
        .replace([',', '\n'], ";")
}

/// Write the error table as `alpha,level,h,tau,t,error,order,note` rows.
pub fn write_errors_csv(records: &[ErrorRecord], path: &Path) -> Result<(), HarnessError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "alpha,level,h,tau,t,error,order,note")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.alpha,
            r.level,
            r.h,
            r.tau,
            r.t,
            fmt_opt(r.error),
            fmt_opt(r.order),
            fmt_note(&r.note)
        )?;
    }
    Ok(())
}

/// Write per-cell audit summaries.
pub fn write_audit_csv(audits: &[CellAudit], path: &Path) -> Result<(), HarnessError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(
        out,
        "alpha,level,is_reference,steps,max_identity_residual,identity_tolerance,\
         max_area_drift,area_tolerance,max_energy_rise,energy_tolerance,pass"
    )?;
    for c in audits {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            c.alpha,
            c.level,
            c.is_reference,
            c.audit.steps,
            c.audit.max_identity_residual,
            c.audit.identity_tolerance,
            c.audit.max_area_drift,
            c.audit.area_tolerance,
            c.audit.max_energy_rise,
            c.audit.energy_tolerance,
            c.audit.pass()
        )?;
    }
    Ok(())
}

/// Write per-cell decay slopes.
pub fn write_decay_csv(decays: &[DecayRecord], path: &Path) -> Result<(), HarnessError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "alpha,level,is_reference,slope")?;
    for d in decays {
        writeln!(
            out,
            "{},{},{},{}",
            d.alpha,
            d.level,
            d.is_reference,
            fmt_opt(d.slope)
        )?;
    }
    Ok(())
}
