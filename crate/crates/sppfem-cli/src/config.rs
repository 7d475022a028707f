//! Run and study configuration.
//!
//! Configs are plain-text TOML files whose string-valued fields use compact
//! spec grammars (`"mfold:m=3,beta=1/9"`, `"every:10"`, ...), so a whole run
//! is reproducible from one small file.  [`RunConfig::normalized`] fills all
//! defaults; re-emitting a normalized config is byte-stable, which is what
//! makes run manifests round-trip.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sppfem::anisotropy::AnisotropyDensity;
use sppfem::solver::{FlowSpec, PinchOffPolicy, SnapshotSchedule, SolverOptions};

/// Configuration for a single evolution run (`sppfem run`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Flow spec: `curvature`, `area_conserved`, `surface_diffusion`,
    /// or `intermediate:xi=<real>,nu=<real>`.
    pub flow: String,
    /// Density spec: `iso`, `mfold:m=<int>,beta=<real>[,phase=<real>]`,
    /// `case2`, or `l4`.
    pub density: String,
    /// Energy-matrix asymmetry parameter.
    pub alpha: f64,
    /// Stabilizer mode: `minimal`, `constant:<real>`, or `file:<path>`.
    #[serde(default = "default_stabilizer")]
    pub stabilizer: String,
    /// Vertex count of the initial polygon.
    pub n: usize,
    /// Time-step size.
    pub tau: f64,
    /// Final time.
    pub t_final: f64,
    /// Initial-curve spec, e.g. `ellipse:a=4,b=1` or `slit`.
    pub shape: String,
    /// Directory receiving diagnostics, snapshots and the manifest.
    pub output_dir: PathBuf,
    /// Snapshot schedule: `none`, `every_step`, `every:<k>`,
    /// or `times:<t1>,<t2>,...`.
    #[serde(default = "default_snapshots")]
    pub snapshots: String,
    /// Self-intersection handling: `stop`, `ignore`, or `allow`.  Default:
    /// `stop` for surface diffusion (pinch-off is physical there), `ignore`
    /// otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinch_off: Option<String>,
    /// Newton residual tolerance (max norm).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub newton_tol: Option<f64>,
    /// Newton iteration cap per step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_newton_iters: Option<usize>,
    /// Seed for randomized auxiliary tooling; the solver itself is
    /// deterministic and never reads it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_stabilizer() -> String {
    "minimal".to_owned()
}

fn default_snapshots() -> String {
    "none".to_owned()
}

/// Stabilizer mode parsed from its spec string.
#[derive(Clone, Debug, PartialEq)]
pub enum StabilizerMode {
    /// Tabulate the minimal stabilizer for the run's density and alpha.
    Minimal,
    /// A constant function.
    Constant(f64),
    /// Load a previously written stabilizer table.
    File(PathBuf),
}

/// A [`RunConfig`] with every spec string parsed and every default filled.
pub struct ResolvedRun {
    pub flow: FlowSpec,
    pub density: AnisotropyDensity,
    pub alpha: f64,
    pub stabilizer: StabilizerMode,
    pub n: usize,
    pub tau: f64,
    pub t_final: f64,
    pub shape: String,
    pub snapshots: SnapshotSchedule,
    pub pinch_off: PinchOffPolicy,
    pub solver: SolverOptions,
}

impl RunConfig {
    /// Parse a config file.  A file containing a top-level `[config]` table
    /// is a run manifest; its embedded config is extracted, so a manifest can
    /// be re-run directly.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = text.parse().context("config is not valid TOML")?;
        let config_value = match &value {
            toml::Value::Table(table) if table.contains_key("config") => {
                table.get("config").unwrap().clone()
            }
            _ => value,
        };
        let config: RunConfig = config_value
            .try_into()
            .context("config does not match the run schema")?;
        config.validate()?;
        Ok(config)
    }

    /// Structural checks that do not need the spec strings parsed.
    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            bail!("n = {} but a polygon needs at least 3 vertices", self.n);
        }
        if !(self.tau > 0.0) {
            bail!("tau = {} must be positive", self.tau);
        }
        if !(self.t_final > 0.0) {
            bail!("t_final = {} must be positive", self.t_final);
        }
        Ok(())
    }

    /// A copy with every optional field filled with its resolved default,
    /// suitable for embedding in a manifest.  Normalization is idempotent.
    pub fn normalized(&self) -> Result<RunConfig> {
        let flow = parse_flow(&self.flow)?;
        let defaults = SolverOptions::default();
        let mut out = self.clone();
        out.pinch_off = Some(match &self.pinch_off {
            Some(p) => {
                parse_pinch_off(p)?;
                p.clone()
            }
            None => match flow {
                FlowSpec::SurfaceDiffusion => "stop".to_owned(),
                _ => "ignore".to_owned(),
            },
        });
        out.newton_tol = Some(self.newton_tol.unwrap_or(defaults.newton_tol));
        out.max_newton_iters = Some(self.max_newton_iters.unwrap_or(defaults.max_newton_iters));
        Ok(out)
    }

    /// Parse every spec string, filling defaults as in [`Self::normalized`].
    pub fn resolve(&self) -> Result<ResolvedRun> {
        self.validate()?;
        let normalized = self.normalized()?;
        let defaults = SolverOptions::default();
        Ok(ResolvedRun {
            flow: parse_flow(&normalized.flow)?,
            density: parse_density(&normalized.density)?,
            alpha: normalized.alpha,
            stabilizer: parse_stabilizer(&normalized.stabilizer)?,
            n: normalized.n,
            tau: normalized.tau,
            t_final: normalized.t_final,
            shape: normalized.shape.clone(),
            snapshots: parse_snapshots(&normalized.snapshots)?,
            pinch_off: parse_pinch_off(normalized.pinch_off.as_deref().unwrap())?,
            solver: SolverOptions {
                newton_tol: normalized.newton_tol.unwrap_or(defaults.newton_tol),
                max_newton_iters: normalized
                    .max_newton_iters
                    .unwrap_or(defaults.max_newton_iters),
            },
        })
    }
}

/// Configuration for a convergence study (`sppfem sweep`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Flow spec, as in [`RunConfig::flow`].
    pub flow: String,
    /// Density spec, as in [`RunConfig::density`].
    pub density: String,
    /// Alphas to sweep; each gets an independent run over all levels.
    pub alphas: Vec<f64>,
    /// Initial-curve spec, as in [`RunConfig::shape`].
    pub shape: String,
    /// Coarsest level; level L means N = 2^L vertices, h = 2^-L, tau = h^2.
    pub base_level: u32,
    /// Number of refinement levels starting at `base_level`.
    pub num_levels: usize,
    /// Times at which errors against the reference are measured.
    pub eval_times: Vec<f64>,
    /// Level of the fine-mesh reference run.
    pub reference_level: u32,
    /// Directory receiving the error, audit, and decay CSV tables.
    pub output_dir: PathBuf,
    /// Worker-pool width; defaults to one worker per alpha, capped by the
    /// machine's parallelism.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl StudyConfig {
    /// Parse a study file.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: StudyConfig = toml::from_str(text).context("study is not valid TOML")?;
        if config.alphas.is_empty() {
            bail!("alphas must be non-empty");
        }
        Ok(config)
    }
}

/// Split `head:tail` at the first colon; no colon means no tail.
fn spec_head(spec: &str) -> (&str, Option<&str>) {
    match spec.split_once(':') {
        Some((head, tail)) => (head.trim(), Some(tail.trim())),
        None => (spec.trim(), None),
    }
}

/// Parse a `k=v,k=v` parameter tail.
fn parse_kv(tail: &str) -> Result<Vec<(&str, &str)>> {
    tail.split(',')
        .map(|pair| {
            pair.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| anyhow!("expected `key=value`, got `{pair}`"))
        })
        .collect()
}

/// Parse a real number, accepting `p/q` fractions (`beta=1/9`).
pub fn parse_number(text: &str) -> Result<f64> {
    let text = text.trim();
    if let Some((num, den)) = text.split_once('/') {
        let num: f64 = num
            .trim()
            .parse()
            .map_err(|e| anyhow!("bad numerator in `{text}`: {e}"))?;
        let den: f64 = den
            .trim()
            .parse()
            .map_err(|e| anyhow!("bad denominator in `{text}`: {e}"))?;
        if den == 0.0 {
            bail!("zero denominator in `{text}`");
        }
        Ok(num / den)
    } else {
        text.parse()
            .map_err(|e| anyhow!("bad number `{text}`: {e}"))
    }
}

/// Look up a required key in a parsed parameter list.
fn require<'a>(params: &[(&'a str, &'a str)], key: &str, spec: &str) -> Result<&'a str> {
    params
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| anyhow!("`{spec}` is missing `{key}=`"))
}

fn optional<'a>(params: &[(&'a str, &'a str)], key: &str) -> Option<&'a str> {
    params.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}

fn reject_unknown(params: &[(&str, &str)], known: &[&str], spec: &str) -> Result<()> {
    for (k, _) in params {
        if !known.contains(k) {
            bail!("unknown parameter `{k}` in `{spec}`");
        }
    }
    Ok(())
}

/// Parse a flow spec string.
pub fn parse_flow(spec: &str) -> Result<FlowSpec> {
    let (head, tail) = spec_head(spec);
    match head {
        "curvature" | "area_conserved" | "surface_diffusion" => {
            if tail.is_some() {
                bail!("flow `{head}` takes no parameters");
            }
            Ok(match head {
                "curvature" => FlowSpec::Curvature,
                "area_conserved" => FlowSpec::AreaConserved,
                _ => FlowSpec::SurfaceDiffusion,
            })
        }
        "intermediate" => {
            let params = parse_kv(tail.ok_or_else(|| {
                anyhow!("flow `intermediate` needs `xi=` and `nu=` parameters")
            })?)?;
            reject_unknown(&params, &["xi", "nu"], spec)?;
            let xi = parse_number(require(&params, "xi", spec)?)?;
            let nu = parse_number(require(&params, "nu", spec)?)?;
            FlowSpec::intermediate(xi, nu)
                .map_err(|e| anyhow!("invalid intermediate flow `{spec}`: {e}"))
        }
        other => bail!(
            "unknown flow `{other}` (expected curvature, area_conserved, \
             surface_diffusion, or intermediate:xi=..,nu=..)"
        ),
    }
}

/// Parse a density spec string.
pub fn parse_density(spec: &str) -> Result<AnisotropyDensity> {
    let (head, tail) = spec_head(spec);
    match head {
        "iso" | "case2" | "l4" => {
            if tail.is_some() {
                bail!("density `{head}` takes no parameters");
            }
            Ok(match head {
                "iso" => AnisotropyDensity::isotropic(),
                "case2" => AnisotropyDensity::case_two(),
                _ => AnisotropyDensity::l4_norm(),
            })
        }
        "mfold" => {
            let params = parse_kv(
                tail.ok_or_else(|| anyhow!("density `mfold` needs `m=` and `beta=`"))?,
            )?;
            reject_unknown(&params, &["m", "beta", "phase"], spec)?;
            let m: u32 = require(&params, "m", spec)?
                .parse()
                .map_err(|e| anyhow!("bad fold count in `{spec}`: {e}"))?;
            let beta = parse_number(require(&params, "beta", spec)?)?;
            let phase = match optional(&params, "phase") {
                Some(v) => parse_number(v)?,
                None => 0.0,
            };
            AnisotropyDensity::m_fold(m, beta, phase)
                .map_err(|e| anyhow!("invalid density `{spec}`: {e}"))
        }
        other => bail!("unknown density `{other}` (expected iso, mfold:m=..,beta=.., case2, or l4)"),
    }
}

/// Parse a stabilizer mode string.
pub fn parse_stabilizer(spec: &str) -> Result<StabilizerMode> {
    let (head, tail) = spec_head(spec);
    match (head, tail) {
        ("minimal", None) => Ok(StabilizerMode::Minimal),
        ("minimal", Some(_)) => bail!("stabilizer `minimal` takes no parameters"),
        ("constant", Some(v)) => Ok(StabilizerMode::Constant(parse_number(v)?)),
        ("constant", None) => bail!("stabilizer `constant` needs a value: `constant:<real>`"),
        ("file", Some(path)) if !path.is_empty() => Ok(StabilizerMode::File(PathBuf::from(path))),
        ("file", _) => bail!("stabilizer `file` needs a path: `file:<path>`"),
        (other, _) => bail!("unknown stabilizer `{other}` (expected minimal, constant:<real>, or file:<path>)"),
    }
}

/// Parse a snapshot schedule string.
pub fn parse_snapshots(spec: &str) -> Result<SnapshotSchedule> {
    let (head, tail) = spec_head(spec);
    match (head, tail) {
        ("none", None) => Ok(SnapshotSchedule::None),
        ("every_step", None) => Ok(SnapshotSchedule::EveryStep),
        ("every", Some(k)) => {
            let k: usize = k
                .parse()
                .map_err(|e| anyhow!("bad snapshot stride `{spec}`: {e}"))?;
            if k == 0 {
                bail!("snapshot stride must be at least 1");
            }
            Ok(SnapshotSchedule::EveryK(k))
        }
        ("times", Some(list)) => {
            let times = list
                .split(',')
                .map(parse_number)
                .collect::<Result<Vec<f64>>>()?;
            if times.is_empty() {
                bail!("snapshot `times:` needs at least one time");
            }
            Ok(SnapshotSchedule::Times(times))
        }
        _ => bail!(
            "unknown snapshot schedule `{spec}` (expected none, every_step, \
             every:<k>, or times:<t1>,<t2>,...)"
        ),
    }
}

/// Parse a pinch-off policy string.
pub fn parse_pinch_off(spec: &str) -> Result<PinchOffPolicy> {
    match spec.trim() {
        "stop" => Ok(PinchOffPolicy::Stop),
        "ignore" => Ok(PinchOffPolicy::Ignore),
        "allow" => Ok(PinchOffPolicy::Allow),
        other => bail!("unknown pinch_off policy `{other}` (expected stop, ignore, or allow)"),
    }
}
