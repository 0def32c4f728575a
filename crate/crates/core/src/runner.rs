//! Experiment configs, dispatch and artifact persistence for the `vlab` CLI.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::convolution::{
    closed_operator_exchange_check, ito_isometry_check, probe_nodes, refinement_study, square_integrability_stats,
    stochastic_convolution, yosida_convolution_experiment, RefinementStudy, StudyKind,
};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kernel::Kernel;
use crate::noise::{sample_increments, NoiseSpec, PsiProcess};
use crate::operator::{matrix_norm2, OperatorModel, OperatorSpec, Vector};
use crate::resolvent::{
    build_resolvent, commutation_defect, estimate_type, invert_laplace_oracle, make_yosida,
    resolvent_equation_residual, semigroup_bound_check, trotter_kato_table, yosida_limit_defect, Samples,
};
use crate::volterra::{check_complete_positivity, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Cpcheck,
    Resolvent,
    Yosida,
    Simulate,
    VerifyStrong,
    VerifyWeak,
    MildVsWeak,
    Eq27,
    Isometry,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::Cpcheck,
        Command::Resolvent,
        Command::Yosida,
        Command::Simulate,
        Command::VerifyStrong,
        Command::VerifyWeak,
        Command::MildVsWeak,
        Command::Eq27,
        Command::Isometry,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Cpcheck => "cpcheck",
            Command::Resolvent => "resolvent",
            Command::Yosida => "yosida",
            Command::Simulate => "simulate",
            Command::VerifyStrong => "verify-strong",
            Command::VerifyWeak => "verify-weak",
            Command::MildVsWeak => "mild-vs-weak",
            Command::Eq27 => "eq27",
            Command::Isometry => "isometry",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config { path: "command".into(), message: format!("unknown command {s:?}") })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(rename = "T")]
    pub t_end: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovarianceConfig {
    /// `"cylindrical"`
    Named(String),
    Diagonal(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(rename = "J", default)]
    pub modes: Option<usize>,
    pub q: CovarianceConfig,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub paths: Option<usize>,
}

impl NoiseConfig {
    pub fn build(&self) -> Result<NoiseSpec> {
        let err = |m: String| Error::Config { path: "noise.q".into(), message: m };
        let spec = match &self.q {
            CovarianceConfig::Named(name) if name == "cylindrical" => {
                let j = self.modes.ok_or_else(|| err("cylindrical noise needs J".into()))?;
                NoiseSpec::cylindrical(j)?
            }
            CovarianceConfig::Named(name) => return Err(err(format!("unknown covariance {name:?}"))),
            CovarianceConfig::Diagonal(q) => NoiseSpec::new(q.clone())?,
        };
        if let Some(j) = self.modes {
            if j != spec.modes() {
                return Err(Error::Config {
                    path: "noise.J".into(),
                    message: format!("J = {j} but q has {} entries", spec.modes()),
                });
            }
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PsiConfig {
    Constant { matrix: Vec<Vec<f64>> },
    DiagDecay { alpha: f64 },
}

impl PsiConfig {
    pub fn build(&self) -> Result<PsiProcess> {
        match self {
            PsiConfig::Constant { matrix } => {
                let rows = matrix.len();
                let cols = matrix.first().map_or(0, |r| r.len());
                if rows == 0 || matrix.iter().any(|r| r.len() != cols) {
                    return Err(Error::Config { path: "psi.matrix".into(), message: "ragged or empty matrix".into() });
                }
                PsiProcess::constant(DMatrix::from_fn(rows, cols, |r, c| matrix[r][c]))
            }
            PsiConfig::DiagDecay { alpha } => PsiProcess::diag_decay(*alpha),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    #[serde(rename = "M")]
    pub m: f64,
    pub w: f64,
}

/// One experiment. Sections not used by the command are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub command: Option<Command>,
    #[serde(default)]
    pub kernel: Option<Kernel>,
    #[serde(default)]
    pub operator: Option<OperatorSpec>,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    #[serde(default)]
    pub psi: Option<PsiConfig>,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub n_list: Option<Vec<f64>>,
    #[serde(default)]
    pub probes: Option<Vec<Vec<f64>>>,
    /// `mu` values for `cpcheck`.
    #[serde(default)]
    pub mu: Option<Vec<f64>>,
    #[serde(default)]
    pub tol: Option<f64>,
    /// Test functional for `verify-weak`.
    #[serde(default)]
    pub xi: Option<Vec<f64>>,
    /// Initial value for `mild-vs-weak`.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub paths: Option<usize>,
    /// Expected `cpcheck` verdict (default pass).
    #[serde(default)]
    pub expect: Option<Verdict>,
    /// Number of paths written by `simulate` (default 10).
    #[serde(default)]
    pub export_paths: Option<usize>,
    #[serde(default)]
    pub semigroup_bound: Option<BoundConfig>,
    #[serde(default)]
    pub output: Option<String>,
}

/// A config problem, keyed by the field path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn violation(path: &str, message: impl Into<String>) -> Violation {
    Violation { path: path.into(), message: message.into() }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config { path: "config".into(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_json(&text)
    }

    pub fn seed(&self) -> u64 {
        self.seed.or_else(|| self.noise.as_ref().and_then(|n| n.seed)).unwrap_or(0)
    }

    pub fn paths(&self) -> Option<usize> {
        self.paths.or_else(|| self.noise.as_ref().and_then(|n| n.paths))
    }

    /// sha256 of the canonical (sorted-key, compact) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical_json(&value).as_bytes()))
    }
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .iter()
                .map(|k| format!("{}:{}", Value::String((*k).clone()), canonical_json(&map[*k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// Everything wrong with the config for its command; empty iff runnable.
pub fn validate(config: &ExperimentConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let Some(cmd) = config.command else {
        out.push(violation("command", "missing command"));
        return out;
    };
    match &config.grid {
        None => out.push(violation("grid", "grid section required")),
        Some(g) => {
            if !(g.t_end > 0.0) {
                out.push(violation("grid.T", format!("T must be > 0, got {}", g.t_end)));
            }
            if !(g.dt > 0.0) {
                out.push(violation("grid.dt", format!("dt must be > 0, got {}", g.dt)));
            } else if g.t_end > 0.0 && g.dt > g.t_end / 10.0 {
                out.push(violation("grid.dt", format!("dt = {} exceeds T/10 = {}", g.dt, g.t_end / 10.0)));
            } else if g.t_end > 0.0 && Grid::with_horizon(g.t_end, g.dt).is_err() {
                out.push(violation("grid.dt", "T must be an integer multiple of dt"));
            }
        }
    }
    let needs_operator = !matches!(cmd, Command::Cpcheck);
    let needs_noise = matches!(
        cmd,
        Command::Simulate
            | Command::VerifyStrong
            | Command::VerifyWeak
            | Command::MildVsWeak
            | Command::Eq27
            | Command::Isometry
    );
    match &config.kernel {
        None => out.push(violation("kernel", "kernel section required")),
        Some(k) => {
            if let Err(e) = k.validate() {
                out.push(violation("kernel", e.to_string()));
            }
        }
    }
    let op = match &config.operator {
        None if needs_operator => {
            out.push(violation("operator", "operator section required"));
            None
        }
        None => None,
        Some(spec) => match spec.build() {
            Ok(op) => Some(op),
            Err(e) => {
                out.push(violation("operator", e.to_string()));
                None
            }
        },
    };
    let noise = if needs_noise {
        match &config.noise {
            None => {
                out.push(violation("noise", "noise required"));
                None
            }
            Some(n) => match n.build() {
                Ok(s) => Some(s),
                Err(e) => {
                    out.push(violation("noise", e.to_string()));
                    None
                }
            },
        }
    } else {
        None
    };
    if needs_noise {
        match &config.psi {
            None => out.push(violation("psi", "psi required")),
            Some(p) => match p.build() {
                Err(e) => out.push(violation("psi", e.to_string())),
                Ok(psi) => {
                    if let (Some(op), Some(noise)) = (&op, &noise) {
                        if let Err(e) = psi.matrix(0.0, op.dim(), noise.modes()) {
                            out.push(violation("psi", format!("psi does not map R^J into R^dim: {e}")));
                        }
                    }
                }
            },
        }
        match config.paths() {
            None => out.push(violation("noise.paths", "number of paths required")),
            Some(0) => out.push(violation("noise.paths", "need at least one path")),
            Some(p) if cmd == Command::Isometry && p < 100 => {
                out.push(violation("noise.paths", "isometry needs at least 100 paths"))
            }
            _ => {}
        }
    }
    let dim = op.as_ref().map(|o| o.dim());
    let check_vec = |out: &mut Vec<Violation>, path: &str, v: &Option<Vec<f64>>| {
        if let (Some(v), Some(d)) = (v, dim) {
            if v.len() != d {
                out.push(violation(path, format!("expected {d} entries, got {}", v.len())));
            }
        }
    };
    match cmd {
        Command::Cpcheck => match &config.mu {
            None => out.push(violation("mu", "mu list required")),
            Some(m) if m.is_empty() => out.push(violation("mu", "mu list is empty")),
            Some(m) if m.iter().any(|v| !(*v >= 0.0)) => out.push(violation("mu", "mu values must be >= 0")),
            _ => {}
        },
        Command::Yosida | Command::Eq27 => match &config.n_list {
            None => out.push(violation("n_list", "n_list required")),
            Some(l) if l.is_empty() => out.push(violation("n_list", "n_list is empty")),
            Some(l) if l.windows(2).any(|w| w[1] <= w[0]) => {
                out.push(violation("n_list", "n_list must be strictly increasing"))
            }
            Some(l) => {
                if let Some(op) = &op {
                    let w = op.growth_bound();
                    if l.iter().any(|n| !(*n > 2.0 * w)) {
                        out.push(violation("n_list", format!("every n must exceed 2w = {}", 2.0 * w)));
                    }
                }
            }
        },
        Command::VerifyWeak => check_vec(&mut out, "xi", &config.xi),
        Command::MildVsWeak => check_vec(&mut out, "x0", &config.x0),
        _ => {}
    }
    if let (Some(probes), Some(d)) = (&config.probes, dim) {
        for (i, p) in probes.iter().enumerate() {
            if p.len() != d {
                out.push(violation(&format!("probes[{i}]"), format!("expected {d} entries, got {}", p.len())));
            }
        }
    }
    out
}

/// One checked property of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invariant {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn invariant(name: &str, pass: bool, detail: impl Into<String>) -> Invariant {
    Invariant { name: name.into(), pass, detail: detail.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Command,
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub versions: std::collections::BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub invariants: Vec<Invariant>,
    pub pass: bool,
}

/// Output of a command before it is written to disk.
pub struct RunOutput {
    pub report: Value,
    pub csv: Vec<(String, String)>,
    pub invariants: Vec<Invariant>,
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn csv_string(header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

struct Parts {
    grid: Grid,
    kernel: Kernel,
    op: Option<OperatorModel>,
}

fn config_err(path: &str, message: &str) -> Error {
    Error::Config { path: path.into(), message: message.into() }
}

fn parts(config: &ExperimentConfig) -> Result<Parts> {
    let g = config.grid.as_ref().ok_or_else(|| config_err("grid", "missing"))?;
    Ok(Parts {
        grid: Grid::with_horizon(g.t_end, g.dt)?,
        kernel: config.kernel.clone().ok_or_else(|| config_err("kernel", "missing"))?,
        op: config.operator.as_ref().map(|o| o.build()).transpose()?,
    })
}

fn vector(v: &[f64]) -> Vector {
    DVector::from_column_slice(v)
}

fn probes(config: &ExperimentConfig, dim: usize) -> Vec<Vector> {
    match &config.probes {
        Some(p) if !p.is_empty() => p.iter().map(|v| vector(v)).collect(),
        _ => vec![DVector::from_element(dim, 1.0)],
    }
}

/// Executes the experiment and returns the report, CSV artifacts and checked
/// invariants without touching the file system.
pub fn execute(config: &ExperimentConfig) -> Result<RunOutput> {
    let problems = validate(config);
    if let Some(v) = problems.first() {
        return Err(Error::Config { path: v.path.clone(), message: v.message.clone() });
    }
    let cmd = config.command.expect("validated");
    let p = parts(config)?;
    match cmd {
        Command::Cpcheck => run_cpcheck(config, &p),
        Command::Resolvent => run_resolvent(config, &p),
        Command::Yosida => run_yosida(config, &p),
        Command::Simulate => run_simulate(config, &p),
        Command::VerifyStrong | Command::VerifyWeak | Command::MildVsWeak => run_refinement(config, &p, cmd),
        Command::Eq27 => run_eq27(config, &p),
        Command::Isometry => run_isometry(config, &p),
    }
}

fn run_cpcheck(config: &ExperimentConfig, p: &Parts) -> Result<RunOutput> {
    let mu = config.mu.clone().unwrap_or_default();
    let rep = check_complete_positivity(&p.kernel, &mu, p.grid, config.tol)?;
    let w = p.kernel.moment_weights(p.grid.dt, p.grid.n)?;
    let mut rows = Vec::new();
    for &m in &mu {
        let s = crate::volterra::step_s(&w, m)?;
        let r = crate::volterra::step_r(&p.kernel, &w, m)?;
        for i in 0..=p.grid.n {
            rows.push(vec![fmt_f(m), fmt_f(p.grid.t(i)), fmt_f(s[i]), fmt_f(r[i])]);
        }
    }
    let header: Vec<String> = ["mu", "t", "s", "r"].iter().map(|s| s.to_string()).collect();
    let expect = config.expect.unwrap_or(Verdict::Pass);
    Ok(RunOutput {
        report: to_value(&rep),
        csv: vec![("s_r.csv".into(), csv_string(&header, &rows)?)],
        invariants: vec![invariant(
            "complete positivity verdict",
            rep.verdict == expect,
            format!("verdict {:?}, expected {:?}", rep.verdict, expect),
        )],
    })
}

fn family_csv(s: &crate::resolvent::ResolventFamily) -> Result<String> {
    let d = s.dim();
    let mut header = vec!["t".to_string()];
    match &s.samples {
        Samples::Modes(_) => header.extend((1..=d).map(|k| format!("mode_{k}"))),
        Samples::Dense(_) => {
            for r in 1..=d {
                for c in 1..=d {
                    header.push(format!("s_{r}_{c}"));
                }
            }
        }
    }
    let rows: Vec<Vec<String>> = (0..=s.grid.n)
        .map(|i| {
            let mut row = vec![fmt_f(s.grid.t(i))];
            match &s.samples {
                Samples::Modes(m) => row.extend(m.iter().map(|v| fmt_f(v[i]))),
                Samples::Dense(ms) => {
                    for r in 0..d {
                        for c in 0..d {
                            row.push(fmt_f(ms[i][(r, c)]));
                        }
                    }
                }
            }
            row
        })
        .collect();
    csv_string(&header, &rows)
}

fn run_resolvent(config: &ExperimentConfig, p: &Parts) -> Result<RunOutput> {
    let op = p.op.as_ref().expect("validated");
    let mut s = build_resolvent(op, &p.kernel, p.grid)?;
    let type_estimate = estimate_type(&mut s)?;
    let xs = probes(config, op.dim());
    let mut residual_max: f64 = 0.0;
    let mut defect: f64 = 0.0;
    for x in &xs {
        residual_max = residual_max.max(resolvent_equation_residual(&s, x)?.max());
        defect = defect.max(commutation_defect(&s, x)?);
    }
    let nodes = probe_nodes(p.grid);
    let times: Vec<f64> = nodes.iter().map(|&i| p.grid.t(i)).collect();
    let oracle = invert_laplace_oracle(op, &p.kernel, &times)?;
    let oracle_gap = nodes
        .iter()
        .zip(&oracle)
        .map(|(&i, m)| (s.matrix(i) - m).amax())
        .fold(0.0, f64::max);
    let identity_at_zero = s.matrix(0) == DMatrix::identity(op.dim(), op.dim());
    let defect_limit = if op.is_spectral() { 0.0 } else { 1e-8 };
    let report = json!({
        "scheme": s.scheme,
        "substeps": s.substeps,
        "type_estimate": type_estimate,
        "residual_max": residual_max,
        "oracle_gap": oracle_gap,
        "oracle_times": times,
        "commutation_defect": defect,
        "dt": p.grid.dt,
        "T": p.grid.t_end(),
    });
    Ok(RunOutput {
        report,
        csv: vec![("resolvent.csv".into(), family_csv(&s)?)],
        invariants: vec![
            invariant("S(0) = I", identity_at_zero, ""),
            invariant("Laplace oracle agreement", oracle_gap <= 1e-4, format!("max gap {oracle_gap:e} (limit 1e-4)")),
            invariant(
                "commutation with A",
                defect <= defect_limit,
                format!("defect {defect:e} (limit {defect_limit:e})"),
            ),
        ],
    })
}

/// `(M, w)` for the semigroup `e^{tA}`: `w` is the growth bound and `M` the
/// largest `|e^{tA}| e^{-wt}` on the grid.
fn semigroup_constants(op: &OperatorModel, grid: Grid) -> (f64, f64) {
    let w = op.growth_bound();
    let m = match op {
        OperatorModel::Spectral(_) => 1.0,
        OperatorModel::Dense(a) => (0..=grid.n)
            .map(|i| {
                let t = grid.t(i);
                matrix_norm2(&(a * t).exp()) * (-w * t).exp()
            })
            .fold(1.0, f64::max),
    };
    (m, w)
}

fn run_yosida(config: &ExperimentConfig, p: &Parts) -> Result<RunOutput> {
    let op = p.op.as_ref().expect("validated");
    let n_list = config.n_list.clone().unwrap_or_default();
    let xs = probes(config, op.dim());
    let table = trotter_kato_table(op, &p.kernel, &xs, &n_list, p.grid)?;
    let (m, w) = match &config.semigroup_bound {
        Some(b) => (b.m, b.w),
        None => semigroup_constants(op, p.grid),
    };
    let mut bounds = Vec::new();
    let mut defects = Vec::new();
    for &n in &n_list {
        let y = make_yosida(op, n)?;
        bounds.push(semigroup_bound_check(&y, m, w, p.grid)?);
    }
    for (k, x) in xs.iter().enumerate() {
        for d in yosida_limit_defect(op, &n_list, x)? {
            defects.push((k, d));
        }
    }
    let mut invariants = vec![invariant(
        "semigroup bound |e^(t A_n)| <= M e^(2wt)",
        bounds.iter().all(|b| b.holds),
        format!("M = {m}, w = {w}"),
    )];
    for k in 0..xs.len() {
        let col = table.column(k);
        let ok = n_list.windows(2).zip(col.windows(2)).all(|(n, e)| n[0] < 16.0 || e[1] <= e[0]);
        invariants.push(invariant(
            &format!("convergence table non-increasing for n >= 16 (probe {k})"),
            ok,
            format!("{col:?}"),
        ));
    }
    let mut rows = Vec::new();
    for r in &table.rows {
        rows.push(vec![fmt_f(r.n), r.probe.to_string(), fmt_f(r.sup_error)]);
    }
    let header: Vec<String> = ["n", "probe", "sup_error"].iter().map(|s| s.to_string()).collect();
    let drows: Vec<Vec<String>> = defects
        .iter()
        .map(|(k, d)| vec![fmt_f(d.n), k.to_string(), fmt_f(d.generator), fmt_f(d.smoothing)])
        .collect();
    let dheader: Vec<String> = ["n", "probe", "generator_defect", "smoothing_defect"].iter().map(|s| s.to_string()).collect();
    let report = json!({
        "convergence": table,
        "semigroup_bound": bounds,
        "yosida_defects": defects.iter().map(|(k, d)| json!({"probe": k, "n": d.n, "generator": d.generator, "smoothing": d.smoothing})).collect::<Vec<_>>(),
    });
    Ok(RunOutput {
        report,
        csv: vec![
            ("convergence.csv".into(), csv_string(&header, &rows)?),
            ("yosida_defect.csv".into(), csv_string(&dheader, &drows)?),
        ],
        invariants,
    })
}

struct StochParts {
    op: OperatorModel,
    noise: NoiseSpec,
    psi: PsiProcess,
    paths: usize,
    seed: u64,
}

fn stoch_parts(config: &ExperimentConfig, p: &Parts) -> Result<StochParts> {
    Ok(StochParts {
        op: p.op.clone().expect("validated"),
        noise: config.noise.as_ref().expect("validated").build()?,
        psi: config.psi.as_ref().expect("validated").build()?,
        paths: config.paths().expect("validated"),
        seed: config.seed(),
    })
}

fn run_simulate(config: &ExperimentConfig, p: &Parts) -> Result<RunOutput> {
    let sp = stoch_parts(config, p)?;
    let s = build_resolvent(&sp.op, &p.kernel, p.grid)?;
    let batch = sample_increments(&sp.noise, p.grid, sp.paths, sp.seed)?;
    let ens = stochastic_convolution(&s, &sp.psi, &batch)?;
    let stats = square_integrability_stats(&ens);
    let d = sp.op.dim();
    let export = config.export_paths.unwrap_or(10).min(sp.paths);
    let mut header = vec!["path".to_string(), "t".to_string()];
    header.extend((1..=d).map(|k| format!("x_{k}")));
    let mut rows = Vec::new();
    for q in 0..export {
        for i in 0..=p.grid.n {
            let mut row = vec![q.to_string(), fmt_f(p.grid.t(i))];
            row.extend(ens.value(q, i).iter().map(|v| fmt_f(*v)));
            rows.push(row);
        }
    }
    let starts_at_zero = (0..sp.paths).all(|q| ens.value(q, 0).iter().all(|v| *v == 0.0));
    let mut invariants = vec![invariant("X(0) = 0 on every path", starts_at_zero, "")];
    let exchange = match sp.psi.check_domain_valued(&sp.op) {
        Ok(()) => {
            let rep = closed_operator_exchange_check(&sp.op, &s, &sp.psi, &batch)?;
            let limit = if sp.op.is_spectral() { 1e-12 } else { 1e-8 } * rep.scale.max(1.0);
            invariants.push(invariant(
                "A commutes with the stochastic integral",
                rep.max <= limit,
                format!("max {:e} (limit {limit:e})", rep.max),
            ));
            Some(rep.max)
        }
        Err(e) => {
            invariants.push(invariant("A commutes with the stochastic integral", true, format!("skipped: {e}")));
            None
        }
    };
    let report = json!({
        "scheme": s.scheme,
        "paths": sp.paths,
        "seed": sp.seed,
        "dt": p.grid.dt,
        "T": p.grid.t_end(),
        "square_integrability": {"mean": stats.mean, "se": stats.se, "max": stats.max},
        "exchange_max": exchange,
        "exported_paths": export,
    });
    Ok(RunOutput { report, csv: vec![("paths.csv".into(), csv_string(&header, &rows)?)], invariants })
}

fn study_csv(study: &RefinementStudy) -> Result<String> {
    let header: Vec<String> = ["grid", "t", "mean_residual"].iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for (name, rep) in [("coarse", &study.coarse), ("fine", &study.fine)] {
        for (i, v) in rep.mean_curve.iter().enumerate() {
            rows.push(vec![name.to_string(), fmt_f(i as f64 * rep.dt), fmt_f(*v)]);
        }
    }
    csv_string(&header, &rows)
}

fn run_refinement(config: &ExperimentConfig, p: &Parts, cmd: Command) -> Result<RunOutput> {
    let sp = stoch_parts(config, p)?;
    let d = sp.op.dim();
    let kind = match cmd {
        Command::VerifyStrong => StudyKind::Strong,
        Command::VerifyWeak => StudyKind::Weak(
            config.xi.as_ref().map(|v| vector(v)).unwrap_or_else(|| DVector::from_fn(d, |k, _| f64::from(k == 0))),
        ),
        _ => StudyKind::MildVsWeak(config.x0.as_ref().map(|v| vector(v)).unwrap_or_else(|| DVector::zeros(d))),
    };
    let study = refinement_study(&kind, &sp.op, &p.kernel, &sp.psi, &sp.noise, p.grid, sp.paths, sp.seed)?;
    let pass = study.ratio < 0.8 || (study.coarse.mean == 0.0 && study.fine.mean == 0.0);
    let report = json!({
        "study": study,
        "seed": sp.seed,
        "relative_fine": study.fine.relative(),
    });
    Ok(RunOutput {
        report,
        csv: vec![("residual.csv".into(), study_csv(&study)?)],
        invariants: vec![invariant(
            "refinement ratio < 0.8",
            pass,
            format!("ratio {} (coarse {:e}, fine {:e})", study.ratio, study.coarse.mean, study.fine.mean),
        )],
    })
}

fn run_eq27(config: &ExperimentConfig, p: &Parts) -> Result<RunOutput> {
    let sp = stoch_parts(config, p)?;
    let n_list = config.n_list.clone().unwrap_or_default();
    let rep = yosida_convolution_experiment(&sp.op, &p.kernel, &sp.psi, &sp.noise, &n_list, sp.paths, p.grid, sp.seed)?;
    let eps = rep.eps();
    let header: Vec<String> = ["n", "eps", "eps_se", "eps_t", "eps_expected", "n1", "n1_se", "n2", "n2_se"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = rep
        .rows
        .iter()
        .map(|r| {
            [r.n, r.eps, r.eps_se, r.eps_t, r.eps_expected, r.n1, r.n1_se, r.n2, r.n2_se].iter().map(|v| fmt_f(*v)).collect()
        })
        .collect();
    Ok(RunOutput {
        report: to_value(&rep),
        csv: vec![("eq27.csv".into(), csv_string(&header, &rows)?)],
        invariants: vec![invariant(
            "eps(n) strictly decreasing",
            eps.windows(2).all(|w| w[1] < w[0]),
            format!("{eps:?}"),
        )],
    })
}

fn run_isometry(config: &ExperimentConfig, p: &Parts) -> Result<RunOutput> {
    let sp = stoch_parts(config, p)?;
    let s = build_resolvent(&sp.op, &p.kernel, p.grid)?;
    let rep = ito_isometry_check(&s, &sp.psi, &sp.noise, sp.paths, sp.seed)?;
    let batch = sample_increments(&sp.noise, p.grid, sp.paths, sp.seed)?;
    let stats = square_integrability_stats(&stochastic_convolution(&s, &sp.psi, &batch)?);
    let header: Vec<String> = ["t", "mc_mean", "se", "deterministic", "quadrature", "z"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = rep
        .probes
        .iter()
        .map(|q| [q.t, q.mc_mean, q.se, q.deterministic, q.quadrature, q.z].iter().map(|v| fmt_f(*v)).collect())
        .collect();
    let max_z = rep.extra.get("max_abs_z").copied().unwrap_or(0.0);
    let report = json!({
        "probes": rep.probes,
        "max_abs_z": max_z,
        "square_integrability": {"mean": stats.mean, "se": stats.se, "max": stats.max},
        "paths": sp.paths,
        "seed": sp.seed,
        "dt": p.grid.dt,
        "T": p.grid.t_end(),
    });
    Ok(RunOutput {
        report,
        csv: vec![("isometry.csv".into(), csv_string(&header, &rows)?)],
        invariants: vec![invariant("isometry |z| <= 3 at every probe", max_z <= 3.0, format!("max |z| = {max_z}"))],
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs the experiment, writes `report.json`, the CSV artifacts and finally
/// `manifest.json` into `out_dir`.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    let output = execute(config)?;
    std::fs::create_dir_all(out_dir)?;
    let mut artifacts = Vec::new();
    let report = serde_json::to_string_pretty(&output.report)?;
    write_atomic(&out_dir.join("report.json"), report.as_bytes())?;
    artifacts.push("report.json".to_string());
    for (name, body) in &output.csv {
        write_atomic(&out_dir.join(name), body.as_bytes())?;
        artifacts.push(name.clone());
    }
    let mut versions = std::collections::BTreeMap::new();
    versions.insert("vlab-core".into(), env!("CARGO_PKG_VERSION").into());
    let manifest = RunManifest {
        command: config.command.expect("validated"),
        config_hash: config.hash(),
        seed: config.seed(),
        artifacts,
        versions,
        wall_time_s: start.elapsed().as_secs_f64(),
        pass: output.invariants.iter().all(|i| i.pass),
        invariants: output.invariants,
    };
    write_atomic(&out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// Default output directory for a config: its `output` field or `out/<command>`.
pub fn default_out_dir(config: &ExperimentConfig) -> PathBuf {
    match &config.output {
        Some(o) => PathBuf::from(o),
        None => PathBuf::from("out").join(config.command.map_or("run", |c| c.name())),
    }
}

/// Process exit code for a finished run or an error.
pub fn exit_code(result: &Result<RunManifest>) -> i32 {
    match result {
        Ok(m) if m.pass => 0,
        Ok(_) => 2,
        Err(e) if e.is_numerical() => 4,
        Err(Error::Io(_)) => 1,
        Err(_) => 3,
    }
}
