//! Batch command-line front-end. Every kernel is a subcommand that reads a
//! JSON config, runs once, and writes a JSON or CSV artifact.
//!
//! Contract:
//! - exit 0: success, artifact written atomically (temp file + rename);
//! - exit 2: the config (or the command line) failed validation, a one-line
//!   JSON error goes to stderr, and no output file appears;
//! - exit 3: the computation itself failed (diverged optimizer, distortion
//!   budget blown, stalled solve), same stderr shape;
//! - identical (config, seed) pairs produce byte-identical artifacts, and
//!   every artifact embeds the defaults-expanded config it ran with.
//!
//! The effective seed is, in order of precedence: the `--seed` flag, the
//! `IQCLAB_SEED` environment variable, the config's own `seed` field.

use crate::densities::{
    eval_v, eval_v_eps, eval_w, check_condition_c, DensityError, DensityModel, DeviationRow,
};
use crate::divfree::{
    bogovskii_correct, flow_map, random_solenoidal, AnalyticSolenoidal, DivError, GridField,
    GridInterpolant,
};
use crate::envelopes::{
    nematic_v_iqc_classified, numerical_iqc, numerical_qc, penalized_iqc, CellDensity,
    CellProblem, EnvelopeError, FnDensity, NematicEnvelopeDensity, NematicLimitDensity,
    OptimizerOpts, QuadraticDensity, DEFAULT_B_LADDER,
};
use crate::matcore::{project_dev, Matrix};
use crate::solver::{
    convergence_experiment, minimize_f_eps, minimize_f_rel, ExperimentConfig, SolverError,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::fs;
use std::path::{Path, PathBuf};

/// Environment variable consulted for the seed when `--seed` is absent.
pub const SEED_ENV_VAR: &str = "IQCLAB_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "iqclab",
    version,
    about = "Relaxed densities, envelopes on solenoidal fields, volume-preserving flows, and energy-convergence ladders",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: CommandKind,
}

#[derive(Subcommand, Debug)]
enum CommandKind {
    /// Evaluate a stored-energy density or its small-strain limit at given matrices
    EvalDensity(RunArgs),
    /// Evaluate the closed-form relaxed small-strain density with region labels
    EvalEnvelope(RunArgs),
    /// Measure uniform convergence of the rescaled energies to their limit
    CheckC(RunArgs),
    /// Minimize an averaged density over periodic-cell test fields
    CellProblem(RunArgs),
    /// Run the trace-penalty ladder toward the constrained cell value
    PenalizedLadder(RunArgs),
    /// Integrate a solenoidal velocity and report the volume distortion
    Flow(RunArgs),
    /// Remove the divergence of a grid field without touching wall fluxes
    CorrectDiv(RunArgs),
    /// Minimize one energy functional (relaxed or finite-strain) once
    Minimize(RunArgs),
    /// Run the full energy-gap ladder across loading scales
    Converge(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON config file
    #[arg(long)]
    config: PathBuf,
    /// Artifact path; stdout when absent
    #[arg(long)]
    output: Option<PathBuf>,
    /// Artifact format
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Seed override (beats IQCLAB_SEED and the config's seed field)
    #[arg(long)]
    seed: Option<u64>,
    /// Upper bound on worker threads (the kernels run single-threaded, so
    /// any bound >= 1 is honored)
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Json,
    Csv,
}

/// Failure channel: decides the exit code and the `error` tag on stderr.
enum Failure {
    /// Bad command line, unreadable/invalid config, unwritable artifact.
    Validation(String),
    /// The computation ran and could not deliver.
    Numerical(String),
}

impl Failure {
    fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn stderr_line(&self) -> String {
        let (tag, msg) = match self {
            Failure::Validation(m) => ("validation", m),
            Failure::Numerical(m) => ("numerical", m),
        };
        serde_json::to_string(&json!({ "error": tag, "message": msg })).unwrap()
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

impl From<DensityError> for Failure {
    fn from(e: DensityError) -> Self {
        match e {
            DensityError::NonFiniteSample => Failure::Numerical(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<EnvelopeError> for Failure {
    fn from(e: EnvelopeError) -> Self {
        match e {
            EnvelopeError::InvalidParameter(_) => Failure::Validation(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<DivError> for Failure {
    fn from(e: DivError) -> Self {
        match e {
            DivError::SolverStalled { .. } | DivError::DomainEscape { .. } => {
                Failure::Numerical(e.to_string())
            }
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<SolverError> for Failure {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::InvalidConfig(_) | SolverError::NoClosedFormEnvelope(_) => {
                Failure::Validation(e.to_string())
            }
            SolverError::DetResidualExceeded { .. } => Failure::Numerical(e.to_string()),
            SolverError::Envelope(inner) => inner.into(),
            SolverError::Density(inner) => inner.into(),
        }
    }
}

/// What a handler produced: the resolved config for provenance, the result
/// payload, and a tabular projection of it.
struct Artifact {
    config: Value,
    result: Value,
    csv_header: String,
    csv_rows: Vec<String>,
    /// Extra `# key: value` comment lines for the CSV head (scalar results
    /// that have no place in the table).
    csv_notes: Vec<(String, String)>,
}

/// 17 significant digits, no locale, `inf`/`-inf`/`nan` spelled out.
fn csv_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let mut tmp_name = path
        .file_name()
        .ok_or_else(|| invalid(format!("output path {} has no file name", path.display())))?
        .to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)
        .map_err(|e| invalid(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        invalid(format!("cannot move artifact into {}: {e}", path.display()))
    })
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let f = invalid(e.to_string());
            eprintln!("{}", f.stderr_line());
            return f.exit_code();
        }
    };
    let (name, args) = match &cli.command {
        CommandKind::EvalDensity(a) => ("eval-density", a),
        CommandKind::EvalEnvelope(a) => ("eval-envelope", a),
        CommandKind::CheckC(a) => ("check-c", a),
        CommandKind::CellProblem(a) => ("cell-problem", a),
        CommandKind::PenalizedLadder(a) => ("penalized-ladder", a),
        CommandKind::Flow(a) => ("flow", a),
        CommandKind::CorrectDiv(a) => ("correct-div", a),
        CommandKind::Minimize(a) => ("minimize", a),
        CommandKind::Converge(a) => ("converge", a),
    };
    match execute(name, args, &cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{}", f.stderr_line());
            f.exit_code()
        }
    }
}

fn execute(name: &str, args: &RunArgs, command: &CommandKind) -> Result<(), Failure> {
    if args.jobs == 0 {
        return Err(invalid("--jobs must be at least 1"));
    }
    let raw = fs::read_to_string(&args.config)
        .map_err(|e| invalid(format!("cannot read config {}: {e}", args.config.display())))?;
    let seed = resolve_seed(args)?;
    let artifact = match command {
        CommandKind::EvalDensity(_) => eval_density_cmd(&raw, seed)?,
        CommandKind::EvalEnvelope(_) => eval_envelope_cmd(&raw, seed)?,
        CommandKind::CheckC(_) => check_c_cmd(&raw, seed)?,
        CommandKind::CellProblem(_) => cell_problem_cmd(&raw, seed)?,
        CommandKind::PenalizedLadder(_) => penalized_ladder_cmd(&raw, seed)?,
        CommandKind::Flow(_) => flow_cmd(&raw, seed)?,
        CommandKind::CorrectDiv(_) => correct_div_cmd(&raw, seed)?,
        CommandKind::Minimize(_) => minimize_cmd(&raw, seed)?,
        CommandKind::Converge(_) => converge_cmd(&raw, seed)?,
    };
    let rendered = match args.format {
        Format::Json => render_json(name, seed, &artifact)?,
        Format::Csv => render_csv(name, seed, &artifact),
    };
    match &args.output {
        Some(path) => write_atomic(path, rendered.as_bytes()),
        None => {
            print!("{rendered}");
            Ok(())
        }
    }
}

fn resolve_seed(args: &RunArgs) -> Result<Option<u64>, Failure> {
    if let Some(s) = args.seed {
        return Ok(Some(s));
    }
    match std::env::var(SEED_ENV_VAR) {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| invalid(format!("{SEED_ENV_VAR} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn parse_config<T: for<'de> Deserialize<'de>>(raw: &str) -> Result<T, Failure> {
    serde_json::from_str(raw).map_err(|e| invalid(format!("config does not parse: {e}")))
}

fn to_value<T: Serialize>(v: &T) -> Result<Value, Failure> {
    serde_json::to_value(v).map_err(|e| invalid(format!("cannot serialize: {e}")))
}

fn render_json(name: &str, seed: Option<u64>, a: &Artifact) -> Result<String, Failure> {
    let envelope = json!({
        "command": name,
        "seed": seed_of(&a.config, seed),
        "config": a.config,
        "result": a.result,
    });
    let mut s = serde_json::to_string_pretty(&envelope)
        .map_err(|e| invalid(format!("cannot serialize artifact: {e}")))?;
    s.push('\n');
    Ok(s)
}

fn render_csv(name: &str, seed: Option<u64>, a: &Artifact) -> String {
    let mut out = String::new();
    out.push_str(&format!("# command: {name}\n"));
    out.push_str(&format!("# seed: {}\n", seed_of(&a.config, seed)));
    out.push_str(&format!(
        "# config: {}\n",
        serde_json::to_string(&a.config).unwrap()
    ));
    for (k, v) in &a.csv_notes {
        out.push_str(&format!("# {k}: {v}\n"));
    }
    out.push_str(&a.csv_header);
    out.push('\n');
    for row in &a.csv_rows {
        out.push_str(row);
        out.push('\n');
    }
    out
}

/// The seed echoed in the artifact head: the resolved config's own `seed`
/// field when it has one, else the override, else 0.
fn seed_of(config: &Value, fallback: Option<u64>) -> u64 {
    config
        .get("seed")
        .and_then(Value::as_u64)
        .or(fallback)
        .unwrap_or(0)
}

// ---------------------------------------------------------------------------
// eval-density

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DensityMode {
    /// Small-strain limit at traceless matrices.
    Limit,
    /// Stored energy at deformation gradients; needs `eps`.
    Energy,
    /// Rescaled stored energy of an exponentiated strain; needs `eps`.
    Scaled,
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalDensityConfig {
    model: DensityModel,
    #[serde(default)]
    eps: Option<f64>,
    mode: DensityMode,
    points: Vec<Matrix>,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Serialize)]
struct ValueRow {
    index: usize,
    /// `null` when the energy is infinite (outside the density's domain).
    value: Option<f64>,
    finite: bool,
}

fn eval_density_cmd(raw: &str, seed: Option<u64>) -> Result<Artifact, Failure> {
    let mut cfg: EvalDensityConfig = parse_config(raw)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if cfg.points.is_empty() {
        return Err(invalid("points must be non-empty"));
    }
    let eps = match cfg.mode {
        DensityMode::Limit => None,
        DensityMode::Energy | DensityMode::Scaled => Some(cfg.eps.ok_or_else(|| {
            invalid("modes `energy` and `scaled` need a positive `eps` in the config")
        })?),
    };
    let mut rows = Vec::with_capacity(cfg.points.len());
    for (index, x) in cfg.points.iter().enumerate() {
        let value = match cfg.mode {
            DensityMode::Limit => eval_v(&cfg.model, x)?.finite(),
            DensityMode::Energy => eval_w(&cfg.model, eps.unwrap(), x)?.finite(),
            DensityMode::Scaled => {
                let z = project_dev(x);
                if (x.trace()).abs() > 1e-12 * (1.0 + x.norm()) {
                    return Err(invalid(format!(
                        "scaled mode needs traceless strains, point {index} has trace {:.3e}",
                        x.trace()
                    )));
                }
                Some(eval_v_eps(&cfg.model, eps.unwrap(), &z)?)
            }
        };
        rows.push(ValueRow {
            index,
            value,
            finite: value.is_some(),
        });
    }
    let csv_rows = rows
        .iter()
        .map(|r| {
            format!(
                "{},{}",
                r.index,
                r.value.map(csv_num).unwrap_or_else(|| "inf".into())
            )
        })
        .collect();
    Ok(Artifact {
        config: to_value(&cfg)?,
        result: json!({ "rows": to_value(&rows)? }),
        csv_header: "index,value".into(),
        csv_rows,
        csv_notes: vec![],
    })
}

// ---------------------------------------------------------------------------
// eval-envelope

#[derive(Debug, Serialize, Deserialize)]
struct EvalEnvelopeConfig {
    rho: [f64; 3],
    points: Vec<Matrix>,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Serialize)]
struct EnvelopeRow {
    index: usize,
    value: Option<f64>,
    /// 1 = fully soft, 2 = smallest strain active, 3 = unrelaxed, 4 =
    /// largest strain active; `null` when the value is infinite.
    region: Option<u8>,
}

fn eval_envelope_cmd(raw: &str, seed: Option<u64>) -> Result<Artifact, Failure> {
    let mut cfg: EvalEnvelopeConfig = parse_config(raw)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if cfg.points.is_empty() {
        return Err(invalid("points must be non-empty"));
    }
    let mut rows = Vec::with_capacity(cfg.points.len());
    for (index, z) in cfg.points.iter().enumerate() {
        let (value, region) = nematic_v_iqc_classified(cfg.rho, z)?;
        rows.push(EnvelopeRow {
            index,
            value: value.finite(),
            region: region.map(|r| r.index()),
        });
    }
    let mut result = json!({ "rows": to_value(&rows)? });
    if rows.len() == 1 {
        // Single-point convenience: the value and region at top level.
        result["value"] = to_value(&rows[0].value)?;
        result["region"] = to_value(&rows[0].region)?;
    }
    let csv_rows = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{}",
                r.index,
                r.value.map(csv_num).unwrap_or_else(|| "inf".into()),
                r.region.map(|g| g.to_string()).unwrap_or_default()
            )
        })
        .collect();
    Ok(Artifact {
        config: to_value(&cfg)?,
        result,
        csv_header: "index,value,region".into(),
        csv_rows,
        csv_notes: vec![],
    })
}

// ---------------------------------------------------------------------------
// check-c

fn default_r() -> f64 {
    2.0
}

fn default_eps_ladder() -> Vec<f64> {
    vec![0.1, 0.05, 0.025]
}

fn default_samples() -> usize {
    10_000
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckCConfig {
    model: DensityModel,
    #[serde(default = "default_r")]
    r: f64,
    #[serde(default = "default_eps_ladder")]
    eps_list: Vec<f64>,
    #[serde(default = "default_samples")]
    samples: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Serialize)]
struct DeviationRowOut {
    eps: f64,
    sup_deviation: f64,
    /// Ratio to the previous (coarser) row's deviation; `null` on the first.
    ratio: Option<f64>,
}

fn check_c_cmd(raw: &str, seed: Option<u64>) -> Result<Artifact, Failure> {
    let mut cfg: CheckCConfig = parse_config(raw)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let model = cfg.model.clone();
    let v_ref = move |z: &Matrix| -> f64 {
        eval_v(&model, z)
            .map(|e| e.as_f64())
            .unwrap_or(f64::INFINITY)
    };
    let rows: Vec<DeviationRow> =
        check_condition_c(&cfg.model, &v_ref, cfg.r, &cfg.eps_list, cfg.samples, cfg.seed)?;
    let out: Vec<DeviationRowOut> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| DeviationRowOut {
            eps: r.eps,
            sup_deviation: r.sup_deviation,
            ratio: (i > 0 && r.sup_deviation > 0.0)
                .then(|| rows[i - 1].sup_deviation / r.sup_deviation),
        })
        .collect();
    let csv_rows = out
        .iter()
        .map(|r| {
            format!(
                "{},{},{}",
                csv_num(r.eps),
                csv_num(r.sup_deviation),
                r.ratio.map(csv_num).unwrap_or_default()
            )
        })
        .collect();
    Ok(Artifact {
        config: to_value(&cfg)?,
        result: json!({ "rows": to_value(&out)? }),
        csv_header: "eps,sup_deviation,ratio".into(),
        csv_rows,
        csv_notes: vec![],
    })
}

// ---------------------------------------------------------------------------
// cell-problem / penalized-ladder

/// Serializable choice of averaged density for the cell problems.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DensitySpec {
    /// Small-strain nematic density (unrelaxed).
    NematicLimit { rho: [f64; 3] },
    /// Its closed-form relaxation.
    NematicEnvelope { rho: [f64; 3] },
    /// `coeff * |sym_0 x|^2`.
    Quadratic { dim: usize, coeff: f64 },
    /// Small-strain limit of an arbitrary model.
    Model { model: DensityModel },
}

impl DensitySpec {
    fn build(&self) -> Result<Box<dyn CellDensity>, Failure> {
        match self {
            DensitySpec::NematicLimit { rho } => Ok(Box::new(NematicLimitDensity::new(*rho)?)),
            DensitySpec::NematicEnvelope { rho } => {
                Ok(Box::new(NematicEnvelopeDensity::new(*rho)?))
            }
            DensitySpec::Quadratic { dim, coeff } => {
                if *dim != 2 && *dim != 3 {
                    return Err(invalid("quadratic density dim must be 2 or 3"));
                }
                if !coeff.is_finite() || *coeff < 0.0 {
                    return Err(invalid("quadratic density coeff must be finite and >= 0"));
                }
                Ok(Box::new(QuadraticDensity::new(*dim, *coeff)))
            }
            DensitySpec::Model { model } => {
                let n = model.dim();
                let model = model.clone();
                Ok(Box::new(FnDensity::new(n, move |x: &Matrix| {
                    let z = project_dev(x).into_matrix();
                    eval_v(&model, &z)
                        .map(|e| e.as_f64())
                        .unwrap_or(f64::INFINITY)
                })))
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CellProblemConfig {
    density: DensitySpec,
    base: Matrix,
    m: usize,
    #[serde(default)]
    opts: OptimizerOpts,
    #[serde(default)]
    seed: u64,
    /// When false, drop the solenoidality constraint on the test fields.
    #[serde(default = "default_true")]
    divfree: bool,
}

fn default_true() -> bool {
    true
}

fn cell_problem_cmd(raw: &str, seed: Option<u64>) -> Result<Artifact, Failure> {
    let mut cfg: CellProblemConfig = parse_config(raw)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.opts.seed = cfg.seed;
    let density = cfg.density.build()?;
    let problem = CellProblem {
        density: density.as_ref(),
        base: cfg.base,
        m: cfg.m,
        opts: cfg.opts.clone(),
    };
    let res = if cfg.divfree {
        numerical_iqc(&problem)?
    } else {
        numerical_qc(&problem)?
    };
    let csv_row = format!(
        "{},{},{},{},{}",
        csv_num(res.value),
        csv_num(res.base_value),
        res.iterations,
        res.converged,
        res.starts
    );
    Ok(Artifact {
        config: to_value(&cfg)?,
        result: to_value(&res)?,
        csv_header: "value,base_value,iterations,converged,starts".into(),
        csv_rows: vec![csv_row],
        csv_notes: vec![],
    })
}

fn default_pexp() -> f64 {
    2.0
}

fn default_ladder() -> Vec<f64> {
    DEFAULT_B_LADDER.to_vec()
}

#[derive(Debug, Serialize, Deserialize)]
struct PenalizedLadderConfig {
    density: DensitySpec,
    base: Matrix,
    m: usize,
    #[serde(default = "default_ladder")]
    b_ladder: Vec<f64>,
    #[serde(default = "default_pexp")]
    p: f64,
    #[serde(default)]
    opts: OptimizerOpts,
    #[serde(default)]
    seed: u64,
}

fn penalized_ladder_cmd(raw: &str, seed: Option<u64>) -> Result<Artifact, Failure> {
    let mut cfg: PenalizedLadderConfig = parse_config(raw)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.opts.seed = cfg.seed;
    let density = cfg.density.build()?;
    let problem = CellProblem {
        density: density.as_ref(),
        base: cfg.base,
        m: cfg.m,
        opts: cfg.opts.clone(),
    };
    let rows = penalized_iqc(&problem, &cfg.b_ladder, cfg.p)?;
    let csv_rows = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{}",
                csv_num(r.b),
                csv_num(r.value),
                r.iterations,
                r.converged
            )
        })
        .collect();
    Ok(Artifact {
        config: to_value(&cfg)?,
        result: json!({ "rows": to_value(&rows)? }),
        csv_header: "b,value,iterations,converged".into(),
        csv_rows,
        csv_notes: vec![],
    })
}

// ---------------------------------------------------------------------------
// flow

/// Where the velocity field comes from.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
enum FieldSpec {
    /// Band-limited curl field defined on all of space (seeded).
    Analytic {
        n: usize,
        #[serde(default = "default_modes_flow")]
        modes: usize,
        #[serde(default = "default_smoothness")]
        smoothness: f64,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
    /// Seeded random solenoidal grid field, interpolated multilinearly.
    Sampled {
        n: usize,
        m: usize,
        #[serde(default = "default_smoothness")]
        smoothness: f64,
    },
    /// Explicit grid data, interpolated multilinearly.
    Grid { field: GridField },
}

fn default_modes_flow() -> usize {
    2
}

fn default_smoothness() -> f64 {
    2.0
}

fn default_amplitude() -> f64 {
    1.0
}

fn default_flow_eps() -> f64 {
    0.1
}

fn default_steps_list() -> Vec<usize> {
    vec![8, 16, 32]
}

fn default_flow_m() -> usize {
    16
}

#[derive(Debug, Serialize, Deserialize)]
struct FlowConfig {
    field: FieldSpec,
    #[serde(default = "default_flow_eps")]
    eps: f64,
    #[serde(default = "default_steps_list")]
    steps_list: Vec<usize>,
    /// Output grid resolution for the displacement snapshot.
    #[serde(default = "default_flow_m")]
    m: usize,
    #[serde(default)]
    seed: u64,
}

fn flow_cmd(raw: &str, seed: Option<u64>) -> Result<Artifact, Failure> {
    let mut cfg: FlowConfig = parse_config(raw)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if cfg.steps_list.is_empty() {
        return Err(invalid("steps_list must be non-empty"));
    }
    if let FieldSpec::Analytic { n, .. } | FieldSpec::Sampled { n, .. } = &cfg.field {
        if *n != 2 && *n != 3 {
            return Err(invalid("field dimension must be 2 or 3"));
        }
    }
    if let FieldSpec::Sampled { m, .. } = &cfg.field {
        if *m < 3 {
            return Err(invalid("sampled fields need at least 3 cells"));
        }
    }
    let sampled;
    let analytic;
    let interp;
    let velocity: &dyn crate::divfree::VelocityField = match &cfg.field {
        FieldSpec::Analytic {
            n,
            modes,
            smoothness,
            amplitude,
        } => {
            analytic = AnalyticSolenoidal::new(*n, *modes, *smoothness, *amplitude, cfg.seed);
            &analytic
        }
        FieldSpec::Sampled { n, m, smoothness } => {
            sampled = random_solenoidal(*n, *m, *smoothness, cfg.seed);
            interp = GridInterpolant::new(&sampled);
            &interp
        }
        FieldSpec::Grid { field } => {
            interp = GridInterpolant::new(field);
            &interp
        }
    };
    let mut reports = Vec::with_capacity(cfg.steps_list.len());
    for &steps in &cfg.steps_list {
        reports.push(flow_map(velocity, cfg.eps, steps, cfg.m)?);
    }
    let csv_rows = reports
        .iter()
        .map(|r| {
            format!(
                "{},{},{}",
                csv_num(r.eps),
                r.steps,
                csv_num(r.det_residual)
            )
        })
        .collect();
    Ok(Artifact {
        config: to_value(&cfg)?,
        result: json!({ "reports": to_value(&reports)? }),
        csv_header: "eps,steps,det_residual".into(),
        csv_rows,
        csv_notes: vec![],
    })
}

// ---------------------------------------------------------------------------
// correct-div

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
enum CorrectFieldSpec {
    /// Seeded white noise on the interior faces, walls sealed; its total
    /// divergence is automatically flux-free.
    Random {
        n: usize,
        m: usize,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
    /// Explicit grid data.
    Grid { field: GridField },
}

#[derive(Debug, Serialize, Deserialize)]
struct CorrectDivConfig {
    field: CorrectFieldSpec,
    #[serde(default)]
    seed: u64,
    /// When true the corrected field itself is embedded in the artifact.
    #[serde(default = "default_true")]
    emit_field: bool,
}

fn random_masked_field(n: usize, m: usize, amplitude: f64, seed: u64) -> GridField {
    let mut field = GridField::zeros(n, m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in 0..n {
        let ext = field.extents(c);
        let mut faces = Vec::new();
        crate::divfree::grid::for_each_index(ext, |idx| faces.push(idx));
        for idx in faces {
            // Walls stay sealed: own-axis boundary faces keep exact zeros.
            let v = if idx[c] == 0 || idx[c] == m {
                0.0
            } else {
                rng.gen_range(-amplitude..amplitude)
            };
            field.set_face(c, idx, v);
        }
    }
    field.refresh_mask();
    field
}

fn correct_div_cmd(raw: &str, seed: Option<u64>) -> Result<Artifact, Failure> {
    let mut cfg: CorrectDivConfig = parse_config(raw)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let input = match &cfg.field {
        CorrectFieldSpec::Random { n, m, amplitude } => {
            if *n != 2 && *n != 3 {
                return Err(invalid("field dimension must be 2 or 3"));
            }
            if *m < 2 {
                return Err(invalid("need at least 2 cells"));
            }
            if !amplitude.is_finite() || *amplitude <= 0.0 {
                return Err(invalid("amplitude must be positive and finite"));
            }
            random_masked_field(*n, *m, *amplitude, cfg.seed)
        }
        CorrectFieldSpec::Grid { field } => field.clone(),
    };
    let report = bogovskii_correct(&input)?;
    let mut result = json!({
        "input_div": report.input_div,
        "residual_div": report.residual_div,
        "correction_norm": report.correction_norm,
        "stability_ratio": report.stability_ratio,
        "cg_iterations": report.cg_iterations,
    });
    if cfg.emit_field {
        result["field"] = to_value(&report.field)?;
    }
    let csv_row = format!(
        "{},{},{},{},{}",
        csv_num(report.input_div),
        csv_num(report.residual_div),
        csv_num(report.correction_norm),
        csv_num(report.stability_ratio),
        report.cg_iterations
    );
    Ok(Artifact {
        config: to_value(&cfg)?,
        result,
        csv_header: "input_div,residual_div,correction_norm,stability_ratio,cg_iterations".into(),
        csv_rows: vec![csv_row],
        csv_notes: vec![],
    })
}

// ---------------------------------------------------------------------------
// minimize / converge

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum MinimizeTarget {
    /// Small-strain relaxed functional over solenoidal displacements.
    Relaxed,
    /// Finite-strain rescaled functional at one loading scale.
    Scaled,
}

#[derive(Debug, Serialize, Deserialize)]
struct MinimizeConfig {
    target: MinimizeTarget,
    /// Loading scale; required for `scaled`, ignored for `relaxed`.
    #[serde(default)]
    eps: Option<f64>,
    experiment: ExperimentConfig,
}

fn minimize_cmd(raw: &str, seed: Option<u64>) -> Result<Artifact, Failure> {
    let mut cfg: MinimizeConfig = parse_config(raw)?;
    if let Some(s) = seed {
        cfg.experiment.seed = s;
    }
    let resolved = cfg.experiment.clone().resolved().map_err(Failure::from)?;
    cfg.experiment = resolved;
    match cfg.target {
        MinimizeTarget::Relaxed => {
            let sol = minimize_f_rel(&cfg.experiment)?;
            let csv_row = format!(
                "{},{},{},{},{}",
                csv_num(sol.energy),
                csv_num(sol.affine_energy),
                sol.iterations,
                sol.converged,
                sol.starts
            );
            Ok(Artifact {
                config: config_with_seed(&cfg, cfg.experiment.seed)?,
                result: json!({ "relaxed": to_value(&sol)? }),
                csv_header: "energy,affine_energy,iterations,converged,starts".into(),
                csv_rows: vec![csv_row],
                csv_notes: vec![],
            })
        }
        MinimizeTarget::Scaled => {
            let eps = cfg
                .eps
                .ok_or_else(|| invalid("target `scaled` needs `eps` in the config"))?;
            let sol = minimize_f_eps(&cfg.experiment, eps)?;
            let csv_row = format!(
                "{},{},{},{},{},{}",
                csv_num(sol.eps),
                csv_num(sol.energy),
                csv_num(sol.det_residual),
                sol.iterations,
                sol.converged,
                sol.starts
            );
            Ok(Artifact {
                config: config_with_seed(&cfg, cfg.experiment.seed)?,
                result: json!({ "scaled": to_value(&sol)? }),
                csv_header: "eps,energy,det_residual,iterations,converged,starts".into(),
                csv_rows: vec![csv_row],
                csv_notes: vec![],
            })
        }
    }
}

/// Mirrors the experiment's seed at the config's top level so the artifact
/// head can echo it uniformly.
fn config_with_seed<T: Serialize>(cfg: &T, seed: u64) -> Result<Value, Failure> {
    let mut v = to_value(cfg)?;
    if v.get("seed").is_none() {
        v["seed"] = json!(seed);
    }
    Ok(v)
}

fn converge_cmd(raw: &str, seed: Option<u64>) -> Result<Artifact, Failure> {
    let mut cfg: ExperimentConfig = parse_config(raw)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let cfg = cfg.resolved().map_err(Failure::from)?;
    let report = convergence_experiment(&cfg)?;
    let csv_rows = report
        .rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{}",
                csv_num(r.eps),
                csv_num(r.e_eps),
                csv_num(r.e_rel),
                csv_num(r.gap)
            )
        })
        .collect();
    let csv_notes = vec![(
        "fitted_order".to_string(),
        report
            .fitted_order
            .map(csv_num)
            .unwrap_or_else(|| "".into()),
    )];
    Ok(Artifact {
        config: to_value(&cfg)?,
        result: to_value(&report)?,
        csv_header: "eps,e_eps,e_rel,gap".into(),
        csv_rows,
        csv_notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(dir: &std::path::Path, name: &str, contents: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("iqclab-cli-{tag}-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn envelope_command_reports_value_and_region() {
        let dir = tmpdir("env");
        let cfg = write_tmp(
            &dir,
            "env.json",
            r#"{"rho": [-1.0, 0.0, 1.0], "points": [[-2.0, 0, 0, 0, 0, 0, 0, 0, 2.0]]}"#,
        );
        let out = dir.join("env-out.json");
        let code = run([
            "iqclab",
            "eval-envelope",
            "--config",
            cfg.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(v["result"]["value"], json!(4.0));
        assert_eq!(v["result"]["region"], json!(3));
        assert_eq!(v["command"], json!("eval-envelope"));
        assert!(v["config"]["rho"].is_array(), "config must be embedded");
    }

    #[test]
    fn malformed_config_exits_2_and_writes_nothing() {
        let dir = tmpdir("bad");
        let cfg = write_tmp(&dir, "bad.json", r#"{"rho": [-1.0, 0.0"#);
        let out = dir.join("bad-out.json");
        let code = run([
            "iqclab",
            "eval-envelope",
            "--config",
            cfg.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
        assert!(!out.exists(), "validation failures must not leave artifacts");
    }

    #[test]
    fn unknown_subcommand_is_rejected() {
        assert_eq!(run(["iqclab", "frobnicate"]), 2);
        assert_eq!(run(["iqclab", "eval-envelope", "--bogus-flag", "1"]), 2);
    }

    #[test]
    fn seeded_reruns_are_byte_identical() {
        let dir = tmpdir("det");
        let cfg = write_tmp(
            &dir,
            "cc.json",
            r#"{"model": {"model": "nematic", "rho": [-1.0, 0.0, 1.0]},
                "eps_list": [0.1, 0.05], "samples": 1000}"#,
        );
        let out1 = dir.join("cc1.csv");
        let out2 = dir.join("cc2.csv");
        for out in [&out1, &out2] {
            let code = run([
                "iqclab",
                "check-c",
                "--config",
                cfg.to_str().unwrap(),
                "--output",
                out.to_str().unwrap(),
                "--format",
                "csv",
                "--seed",
                "7",
            ]);
            assert_eq!(code, 0);
        }
        let a = fs::read(&out1).unwrap();
        let b = fs::read(&out2).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("# command: check-c\n# seed: 7\n"));
        assert!(text.contains("eps,sup_deviation,ratio"));
    }

    #[test]
    fn env_var_seeds_when_flag_is_absent() {
        // Process-global env var: this test is the only one touching it.
        let dir = tmpdir("envseed");
        let cfg = write_tmp(
            &dir,
            "cd.json",
            r#"{"field": {"source": "random", "n": 2, "m": 6}, "emit_field": false}"#,
        );
        let out_env = dir.join("cd-env.json");
        let out_flag = dir.join("cd-flag.json");
        std::env::set_var(SEED_ENV_VAR, "11");
        let code = run([
            "iqclab",
            "correct-div",
            "--config",
            cfg.to_str().unwrap(),
            "--output",
            out_env.to_str().unwrap(),
        ]);
        std::env::remove_var(SEED_ENV_VAR);
        assert_eq!(code, 0);
        let code = run([
            "iqclab",
            "correct-div",
            "--config",
            cfg.to_str().unwrap(),
            "--output",
            out_flag.to_str().unwrap(),
            "--seed",
            "11",
        ]);
        assert_eq!(code, 0);
        assert_eq!(fs::read(&out_env).unwrap(), fs::read(&out_flag).unwrap());
        let v: Value = serde_json::from_str(&fs::read_to_string(&out_env).unwrap()).unwrap();
        assert_eq!(v["seed"], json!(11));
        assert!(v["result"]["residual_div"].as_f64().unwrap() < 1e-8);
    }

    #[test]
    fn flow_command_emits_a_step_ladder() {
        let dir = tmpdir("flow");
        let cfg = write_tmp(
            &dir,
            "flow.json",
            r#"{"field": {"source": "analytic", "n": 3, "modes": 1, "amplitude": 2.0},
                "eps": 0.5, "steps_list": [2, 8], "m": 4}"#,
        );
        let out = dir.join("flow.csv");
        let code = run([
            "iqclab",
            "flow",
            "--config",
            cfg.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
            "--format",
            "csv",
            "--seed",
            "3",
        ]);
        assert_eq!(code, 0);
        let text = fs::read_to_string(&out).unwrap();
        let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data[0], "eps,steps,det_residual");
        assert_eq!(data.len(), 3, "header plus one row per step count");
        let res: Vec<f64> = data[1..]
            .iter()
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        assert!(
            res[0] > 1e-9,
            "the coarse run must sit above the probe floor: {res:?}"
        );
        assert!(
            res[1] < res[0] / 10.0,
            "quartering the step size must slash the residual: {res:?}"
        );
    }

    #[test]
    fn minimize_scaled_requires_eps() {
        let dir = tmpdir("min");
        let cfg = write_tmp(
            &dir,
            "min.json",
            r#"{"target": "scaled",
                "experiment": {"model": {"model": "singlewell", "builtin": "dist2-sl"},
                               "m": 3, "flow_steps": 8, "modes": 1}}"#,
        );
        let code = run(["iqclab", "minimize", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code, 2);
    }

    #[test]
    fn converge_csv_has_gap_column_and_resolved_config() {
        let dir = tmpdir("conv");
        let cfg = write_tmp(
            &dir,
            "conv.json",
            r#"{"model": {"model": "singlewell", "builtin": "dist2-sl"},
                "m": 2,
                "z_bc": [0.2, 0.0, 0.0, 0.0, -0.2, 0.0, 0.0, 0.0, 0.0],
                "eps_list": [0.2, 0.1],
                "opts": {"max_iters": 40, "gradient_tol": 1e-6, "restarts": 0,
                         "seed": 0, "amplitude": 0.1},
                "flow_steps": 8, "modes": 1}"#,
        );
        let out = dir.join("conv.csv");
        let code = run([
            "iqclab",
            "converge",
            "--config",
            cfg.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
            "--format",
            "csv",
        ]);
        assert_eq!(code, 0);
        let text = fs::read_to_string(&out).unwrap();
        assert!(text.contains("eps,e_eps,e_rel,gap"));
        // Defaults must be expanded in the embedded config.
        let cfg_line = text
            .lines()
            .find(|l| l.starts_with("# config: "))
            .expect("config comment line");
        let v: Value = serde_json::from_str(cfg_line.trim_start_matches("# config: ")).unwrap();
        assert_eq!(v["dirichlet"], json!("all"));
        assert_eq!(v["flow_steps"], json!(8));
        let rows: Vec<&str> = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("eps,"))
            .collect();
        assert_eq!(rows.len(), 2);
    }

    #[test]
    fn numerical_failures_exit_3() {
        // A grid velocity this violent throws trajectories out of the unit
        // box within one step: the flow must refuse, not clamp.
        let dir = tmpdir("num");
        let mut field = GridField::zeros(2, 4);
        for c in 0..2 {
            let ext = field.extents(c);
            let mut faces = Vec::new();
            crate::divfree::grid::for_each_index(ext, |idx| faces.push(idx));
            for idx in faces {
                if idx[c] > 0 && idx[c] < 4 {
                    field.set_face(c, idx, 1.0e4);
                }
            }
        }
        field.refresh_mask();
        let cfg_value = json!({
            "field": {"source": "grid", "field": field},
            "eps": 1.0,
            "steps_list": [4],
            "m": 4
        });
        let cfg = write_tmp(&dir, "num.json", &cfg_value.to_string());
        let out = dir.join("num.out.json");
        let code = run([
            "iqclab",
            "flow",
            "--config",
            cfg.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 3);
        assert!(!out.exists(), "failed runs must not leave artifacts");
    }
}
