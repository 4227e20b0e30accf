//! Config-driven experiment runner.
//!
//! A config file is line oriented: `[section]` headers, `key = value`
//! pairs and `#` comments. Vectors are comma separated, matrix rows are
//! separated by `;`, scalars accept `pi` factors (`pi/2`, `2*pi/3`). A
//! `seed = <u64>` line may precede the first section.
//!
//! ```text
//! seed = 7
//!
//! [problem]
//! name = rotation
//! theta = pi/2
//!
//! [schedule]
//! kind = constant
//! value = 0.5
//!
//! [x0]
//! values = 1, 0
//!
//! [flow]
//! t_end = 50
//! samples = 501
//!
//! [analyses]
//! run = lyapunov, rate_bound, little_o
//!
//! [output]
//! dir = out/rotation
//! ```

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::analysis;
use crate::discrete::{self, IterateLog};
use crate::error::Error;
use crate::flow::{self, FlowConfig, Method, Trajectory};
use crate::operators::{certify_fb_inequality, certify_nonexpansive, MonotoneSpec};
use crate::problems::{self, ProblemSpec};
use crate::rescale;
use crate::schedules::{Schedule, ScheduleKind};
use crate::space::Vector;

const SECTIONS: [&str; 7] = ["problem", "schedule", "x0", "flow", "discrete", "analyses", "output"];

/// Exit status for a successful run with all analyses passing.
pub const EXIT_OK: i32 = 0;
/// Exit status for config and runtime errors.
pub const EXIT_ERROR: i32 = 1;
/// Exit status when an analysis fails.
pub const EXIT_ANALYSIS_FAILED: i32 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    /// `section.key`, or the section name.
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

#[derive(Debug)]
struct Entry {
    value: String,
    line: usize,
    used: Cell<bool>,
}

#[derive(Debug, Default)]
struct Section {
    line: Option<usize>,
    entries: BTreeMap<String, Entry>,
}

#[derive(Debug, Default)]
struct RawConfig {
    top: Section,
    sections: BTreeMap<String, Section>,
}

fn parse_raw(text: &str, errors: &mut Vec<ConfigError>) -> RawConfig {
    let mut raw = RawConfig::default();
    // `None` = top level, `Some(None)` = inside an unknown section.
    let mut current: Option<Option<String>> = None;
    for (i, full) in text.lines().enumerate() {
        let line = i + 1;
        let body = full.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(rest) = body.strip_prefix('[') {
            let Some(name) = rest.strip_suffix(']').map(str::trim) else {
                errors.push(ConfigError { line: Some(line), field: "config".into(), message: format!("malformed section header '{body}'") });
                current = Some(None);
                continue;
            };
            if !SECTIONS.contains(&name) {
                errors.push(ConfigError {
                    line: Some(line),
                    field: "config".into(),
                    message: format!("unknown section [{name}], expected one of {}", SECTIONS.join(", ")),
                });
                current = Some(None);
                continue;
            }
            if raw.sections.contains_key(name) {
                errors.push(ConfigError { line: Some(line), field: name.into(), message: "duplicate section".into() });
            }
            raw.sections.insert(name.into(), Section { line: Some(line), entries: BTreeMap::new() });
            current = Some(Some(name.into()));
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            errors.push(ConfigError { line: Some(line), field: "config".into(), message: format!("expected 'key = value', got '{body}'") });
            continue;
        };
        let key = key.trim();
        let section = match &current {
            None => &mut raw.top,
            Some(None) => continue,
            Some(Some(name)) => raw.sections.get_mut(name).expect("section registered"),
        };
        let field = match &current {
            Some(Some(name)) => format!("{name}.{key}"),
            _ => key.to_string(),
        };
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_') {
            errors.push(ConfigError { line: Some(line), field, message: "keys must be lowercase snake case".into() });
            continue;
        }
        if section.entries.contains_key(key) {
            errors.push(ConfigError { line: Some(line), field, message: "duplicate key".into() });
            continue;
        }
        section.entries.insert(key.into(), Entry { value: value.trim().into(), line, used: Cell::new(false) });
    }
    raw
}

/// Parses a real number, allowing products and one quotient with `pi`.
fn parse_real(s: &str) -> Option<f64> {
    let s = s.trim();
    let x = match s.parse::<f64>() {
        Ok(x) => x,
        Err(_) => {
            let (num, den) = match s.split_once('/') {
                Some((n, d)) => (n, Some(d)),
                None => (s, None),
            };
            let mut x = 1.0;
            for factor in num.split('*') {
                let f = factor.trim();
                let (neg, f) = match f.strip_prefix('-') {
                    Some(rest) => (true, rest.trim()),
                    None => (false, f),
                };
                let v = if f == "pi" {
                    std::f64::consts::PI
                } else if let Some(c) = f.strip_suffix("pi") {
                    c.trim().parse::<f64>().ok()? * std::f64::consts::PI
                } else {
                    f.parse::<f64>().ok()?
                };
                x *= if neg { -v } else { v };
            }
            if let Some(d) = den {
                x /= d.trim().parse::<f64>().ok()?;
            }
            x
        }
    };
    x.is_finite().then_some(x)
}

struct Reader<'a> {
    errors: Vec<ConfigError>,
    raw: &'a RawConfig,
    empty: Section,
}

impl<'a> Reader<'a> {
    fn section(&self, name: &str) -> &Section {
        if name.is_empty() {
            &self.raw.top
        } else {
            self.raw.sections.get(name).unwrap_or(&self.empty)
        }
    }

    fn has_section(&self, name: &str) -> bool {
        self.raw.sections.contains_key(name)
    }

    fn field(sec: &str, key: &str) -> String {
        if sec.is_empty() {
            key.into()
        } else {
            format!("{sec}.{key}")
        }
    }

    fn push(&mut self, line: Option<usize>, field: String, message: impl Into<String>) {
        self.errors.push(ConfigError { line, field, message: message.into() });
    }

    fn entry(&mut self, sec: &str, key: &str, required: bool) -> Option<(String, usize)> {
        let s = self.section(sec);
        match s.entries.get(key) {
            Some(e) => {
                e.used.set(true);
                Some((e.value.clone(), e.line))
            }
            None => {
                if required {
                    let line = s.line;
                    self.push(line, Self::field(sec, key), "missing required key");
                }
                None
            }
        }
    }

    fn word(&mut self, sec: &str, key: &str, required: bool) -> Option<(String, usize)> {
        self.entry(sec, key, required)
    }

    fn real(&mut self, sec: &str, key: &str, required: bool) -> Option<f64> {
        let (v, line) = self.entry(sec, key, required)?;
        let x = parse_real(&v);
        if x.is_none() {
            self.push(Some(line), Self::field(sec, key), format!("expected a finite real number, got '{v}'"));
        }
        x
    }

    fn count(&mut self, sec: &str, key: &str, required: bool) -> Option<usize> {
        let (v, line) = self.entry(sec, key, required)?;
        let n = v.parse::<usize>().ok();
        if n.is_none() {
            self.push(Some(line), Self::field(sec, key), format!("expected a non-negative integer, got '{v}'"));
        }
        n
    }

    fn boolean(&mut self, sec: &str, key: &str) -> Option<bool> {
        let (v, line) = self.entry(sec, key, false)?;
        match v.as_str() {
            "true" => Some(true),
            "false" => Some(false),
            _ => {
                self.push(Some(line), Self::field(sec, key), format!("expected true or false, got '{v}'"));
                None
            }
        }
    }

    fn vector(&mut self, sec: &str, key: &str, required: bool) -> Option<Vec<f64>> {
        let (v, line) = self.entry(sec, key, required)?;
        let parsed: Option<Vec<f64>> = v.split(',').map(parse_real).collect();
        match parsed {
            Some(xs) if !v.trim().is_empty() => Some(xs),
            _ => {
                self.push(Some(line), Self::field(sec, key), format!("expected comma-separated reals, got '{v}'"));
                None
            }
        }
    }

    fn matrix(&mut self, sec: &str, key: &str) -> Option<DMatrix<f64>> {
        let (v, line) = self.entry(sec, key, true)?;
        let rows: Option<Vec<Vec<f64>>> = v.split(';').map(|r| r.split(',').map(parse_real).collect()).collect();
        let bad = |me: &mut Self, msg: &str| {
            me.push(Some(line), Self::field(sec, key), msg.to_string());
            None
        };
        let Some(rows) = rows else {
            return bad(self, "expected matrix rows of comma-separated reals separated by ';'");
        };
        let ncols = rows[0].len();
        if rows.iter().any(|r| r.len() != ncols) {
            return bad(self, "matrix rows must have equal length");
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Some(DMatrix::from_row_slice(rows.len(), ncols, &flat))
    }

    /// Marks every key of `sec` as read, to avoid cascading diagnostics
    /// once the section's kind is unknown.
    fn consume_all(&self, sec: &str) {
        for e in self.section(sec).entries.values() {
            e.used.set(true);
        }
    }

    fn unused(&mut self) {
        let mut found = Vec::new();
        let tops = std::iter::once(("", &self.raw.top));
        for (name, sec) in tops.chain(self.raw.sections.iter().map(|(n, s)| (n.as_str(), s))) {
            for (key, e) in &sec.entries {
                if !e.used.get() {
                    found.push((e.line, Self::field(name, key)));
                }
            }
        }
        for (line, field) in found {
            self.push(Some(line), field, "unknown key");
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SetConfig {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemConfig {
    Rotation { theta: f64 },
    Bolte { set: SetConfig, q: DMatrix<f64>, b: Vec<f64>, mu: f64 },
    Lasso { a: DMatrix<f64>, b: Vec<f64>, reg: f64, gamma: f64 },
    Quadratic { q: DMatrix<f64>, gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Spacing {
    Linear,
    Log { t_first: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSection {
    pub t_end: f64,
    pub samples: usize,
    pub spacing: Spacing,
    pub method: Method,
    pub record_derivative: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscreteMode {
    Km,
    Fb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscreteConfig {
    pub mode: DiscreteMode,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Analysis {
    Lyapunov,
    RateBound,
    LittleO,
    FbDiag,
    Slope,
    RescaleCheck,
    Certify,
    Energy,
}

impl Analysis {
    const ALL: [Analysis; 8] = [
        Analysis::Lyapunov,
        Analysis::RateBound,
        Analysis::LittleO,
        Analysis::FbDiag,
        Analysis::Slope,
        Analysis::RescaleCheck,
        Analysis::Certify,
        Analysis::Energy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Analysis::Lyapunov => "lyapunov",
            Analysis::RateBound => "rate_bound",
            Analysis::LittleO => "little_o",
            Analysis::FbDiag => "fb_diag",
            Analysis::Slope => "slope",
            Analysis::RescaleCheck => "rescale_check",
            Analysis::Certify => "certify",
            Analysis::Energy => "energy",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysesConfig {
    pub run: Vec<Analysis>,
    /// Defaults to `[min(1, t_end), t_end]`.
    pub slope_window: Option<(f64, f64)>,
    /// The slope analysis passes iff the fitted slope is below this value.
    pub slope_threshold: Option<f64>,
    pub certify_trials: usize,
    pub certify_radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub problem: ProblemConfig,
    pub schedule: ScheduleKind,
    pub lambda_max: Option<f64>,
    pub x0: Vec<f64>,
    pub flow: FlowSection,
    pub discrete: Option<DiscreteConfig>,
    pub analyses: AnalysesConfig,
    pub output: PathBuf,
    /// Header line per section, for anchoring build errors.
    section_lines: BTreeMap<String, usize>,
}

fn parse_problem(r: &mut Reader) -> Option<ProblemConfig> {
    let (name, line) = r.word("problem", "name", true)?;
    match name.as_str() {
        "rotation" => Some(ProblemConfig::Rotation { theta: r.real("problem", "theta", true)? }),
        "bolte" => {
            let set = match r.word("problem", "set", true) {
                Some((s, _)) if s == "box" => {
                    let lo = r.vector("problem", "lo", true);
                    let hi = r.vector("problem", "hi", true);
                    Some(SetConfig::Box { lo: lo?, hi: hi? })
                }
                Some((s, _)) if s == "ball" => {
                    let center = r.vector("problem", "center", true);
                    let radius = r.real("problem", "radius", true);
                    Some(SetConfig::Ball { center: center?, radius: radius? })
                }
                Some((s, l)) => {
                    r.push(Some(l), "problem.set".into(), format!("unknown constraint set '{s}', expected box or ball"));
                    None
                }
                None => None,
            };
            let q = r.matrix("problem", "q");
            let b = r.vector("problem", "b", true);
            let mu = r.real("problem", "mu", true);
            Some(ProblemConfig::Bolte { set: set?, q: q?, b: b?, mu: mu? })
        }
        "lasso" => {
            let a = r.matrix("problem", "a");
            let b = r.vector("problem", "b", true);
            let reg = r.real("problem", "reg", true);
            let gamma = r.real("problem", "gamma", true);
            Some(ProblemConfig::Lasso { a: a?, b: b?, reg: reg?, gamma: gamma? })
        }
        "quadratic" => {
            let q = r.matrix("problem", "q");
            let gamma = r.real("problem", "gamma", true);
            Some(ProblemConfig::Quadratic { q: q?, gamma: gamma? })
        }
        other => {
            r.consume_all("problem");
            r.push(
                Some(line),
                "problem.name".into(),
                format!("unknown problem '{other}', expected rotation, bolte, lasso or quadratic"),
            );
            None
        }
    }
}

fn parse_schedule(r: &mut Reader) -> (Option<ScheduleKind>, Option<f64>) {
    let lambda_max = match r.entry("schedule", "lambda_max", false) {
        Some((v, line)) => match parse_real(&v) {
            Some(x) if x > 0.0 => Some(x),
            Some(x) => {
                r.push(Some(line), "schedule.lambda_max".into(), format!("schedule upper bound must be positive, got {x}"));
                None
            }
            None => {
                r.push(Some(line), "schedule.lambda_max".into(), format!("expected a finite real number, got '{v}'"));
                None
            }
        },
        None => None,
    };
    let Some((kind, line)) = r.word("schedule", "kind", true) else {
        return (None, lambda_max);
    };
    let kind = match kind.as_str() {
        "constant" => r.real("schedule", "value", true).map(|value| ScheduleKind::Constant { value }),
        "hyperbolic" => r.real("schedule", "a", true).map(|a| ScheduleKind::Hyperbolic { a }),
        "piecewise" => {
            let breakpoints = r.vector("schedule", "breakpoints", true);
            let values = r.vector("schedule", "values", true);
            breakpoints.zip(values).map(|(breakpoints, values)| ScheduleKind::PiecewiseConstant { breakpoints, values })
        }
        "table" => {
            let times = r.vector("schedule", "times", true);
            let values = r.vector("schedule", "values", true);
            times.zip(values).map(|(times, values)| ScheduleKind::Table { times, values })
        }
        other => {
            r.consume_all("schedule");
            r.push(
                Some(line),
                "schedule.kind".into(),
                format!("unknown schedule kind '{other}', expected constant, hyperbolic, piecewise or table"),
            );
            None
        }
    };
    (kind, lambda_max)
}

fn parse_flow(r: &mut Reader) -> Option<FlowSection> {
    let t_end = r.real("flow", "t_end", true);
    let samples = r.count("flow", "samples", false).unwrap_or(101);
    let spacing = match r.word("flow", "spacing", false) {
        None => Some(Spacing::Linear),
        Some((s, _)) if s == "linear" => Some(Spacing::Linear),
        Some((s, _)) if s == "log" => r.real("flow", "t_first", true).map(|t_first| Spacing::Log { t_first }),
        Some((s, l)) => {
            r.push(Some(l), "flow.spacing".into(), format!("unknown spacing '{s}', expected linear or log"));
            None
        }
    };
    let method = match r.word("flow", "method", false) {
        None => {
            let abs_tol = r.real("flow", "abs_tol", false).unwrap_or(1e-9);
            let rel_tol = r.real("flow", "rel_tol", false).unwrap_or(1e-9);
            Some(Method::Rk45 { abs_tol, rel_tol })
        }
        Some((m, l)) => match m.as_str() {
            "rk45" => {
                let abs_tol = r.real("flow", "abs_tol", false).unwrap_or(1e-9);
                let rel_tol = r.real("flow", "rel_tol", false).unwrap_or(1e-9);
                Some(Method::Rk45 { abs_tol, rel_tol })
            }
            "rk4" => r.real("flow", "h", true).map(|h| Method::Rk4 { h }),
            "euler" => r.real("flow", "h", true).map(|h| Method::Euler { h }),
            other => {
                r.push(Some(l), "flow.method".into(), format!("unknown method '{other}', expected rk45, rk4 or euler"));
                None
            }
        },
    };
    let record_derivative = r.boolean("flow", "record_derivative").unwrap_or(false);
    if samples < 2 {
        let line = r.section("flow").entries.get("samples").map(|e| e.line);
        r.push(line, "flow.samples".into(), "at least 2 samples are required");
    }
    Some(FlowSection { t_end: t_end?, samples, spacing: spacing?, method: method?, record_derivative })
}

fn parse_discrete(r: &mut Reader) -> Option<DiscreteConfig> {
    let mode = match r.word("discrete", "mode", true) {
        Some((m, _)) if m == "km" => Some(DiscreteMode::Km),
        Some((m, _)) if m == "fb" => Some(DiscreteMode::Fb),
        Some((m, l)) => {
            r.push(Some(l), "discrete.mode".into(), format!("unknown mode '{m}', expected km or fb"));
            None
        }
        None => None,
    };
    let n_steps = r.count("discrete", "n_steps", true);
    Some(DiscreteConfig { mode: mode?, n_steps: n_steps? })
}

fn parse_analyses(r: &mut Reader) -> AnalysesConfig {
    let mut run = Vec::new();
    if let Some((list, line)) = r.entry("analyses", "run", false) {
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match Analysis::from_name(name) {
                Some(a) if !run.contains(&a) => run.push(a),
                Some(_) => {}
                None => {
                    let known: Vec<&str> = Analysis::ALL.iter().map(|a| a.name()).collect();
                    r.push(Some(line), "analyses.run".into(), format!("unknown analysis '{name}', expected one of {}", known.join(", ")));
                }
            }
        }
    }
    let slope_window = match r.vector("analyses", "slope_window", false) {
        Some(w) if w.len() == 2 && 0.0 < w[0] && w[0] < w[1] => Some((w[0], w[1])),
        Some(_) => {
            let line = r.section("analyses").entries.get("slope_window").map(|e| e.line);
            r.push(line, "analyses.slope_window".into(), "expected two increasing positive times");
            None
        }
        None => None,
    };
    AnalysesConfig {
        run,
        slope_window,
        slope_threshold: r.real("analyses", "slope_threshold", false),
        certify_trials: r.count("analyses", "certify_trials", false).unwrap_or(1000),
        certify_radius: r.real("analyses", "certify_radius", false).unwrap_or(10.0),
    }
}

/// Parses config text; all syntax and field errors are collected.
pub fn parse_config(text: &str) -> Result<RunConfig, Vec<ConfigError>> {
    let mut errors = Vec::new();
    let raw = parse_raw(text, &mut errors);
    let mut r = Reader { errors, raw: &raw, empty: Section::default() };

    let seed = match r.entry("", "seed", false) {
        Some((v, line)) => v.parse::<u64>().map_err(|_| {
            r.push(Some(line), "seed".into(), format!("expected a non-negative integer, got '{v}'"));
        }).ok(),
        None => Some(0),
    };
    for sec in ["problem", "schedule", "x0", "flow"] {
        if !r.has_section(sec) {
            r.push(None, sec.into(), format!("missing required section [{sec}]"));
        }
    }
    let problem = if r.has_section("problem") { parse_problem(&mut r) } else { None };
    let (schedule, lambda_max) = if r.has_section("schedule") { parse_schedule(&mut r) } else { (None, None) };
    let x0 = if r.has_section("x0") { r.vector("x0", "values", true) } else { None };
    let flow = if r.has_section("flow") { parse_flow(&mut r) } else { None };
    let discrete = if r.has_section("discrete") { parse_discrete(&mut r) } else { None };
    let analyses = parse_analyses(&mut r);
    let output = r.word("output", "dir", false).map(|(d, _)| PathBuf::from(d)).unwrap_or_else(|| PathBuf::from("out"));
    r.unused();

    let section_lines = raw.sections.iter().filter_map(|(n, s)| s.line.map(|l| (n.clone(), l))).collect();
    let mut errors = r.errors;
    if !errors.is_empty() {
        errors.sort_by_key(|e| e.line.unwrap_or(0));
        return Err(errors);
    }
    match (seed, problem, schedule, x0, flow) {
        (Some(seed), Some(problem), Some(schedule), Some(x0), Some(flow)) => Ok(RunConfig {
            seed,
            problem,
            schedule,
            lambda_max,
            x0,
            flow,
            discrete: if raw.sections.contains_key("discrete") { discrete } else { None },
            analyses,
            output,
            section_lines,
        }),
        _ => Err(vec![ConfigError { line: None, field: "config".into(), message: "incomplete configuration".into() }]),
    }
}

/// A config resolved into library objects.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub problem: ProblemSpec,
    pub schedule: Schedule,
    pub x0: Vector,
    pub flow: FlowConfig,
}

fn build_problem(p: &ProblemConfig) -> crate::Result<ProblemSpec> {
    match p {
        ProblemConfig::Rotation { theta } => problems::make_rotation(*theta),
        ProblemConfig::Bolte { set, q, b, mu } => {
            let c = match set {
                SetConfig::Box { lo, hi } => MonotoneSpec::normal_cone_box(Vector::from_slice(lo)?, Vector::from_slice(hi)?)?,
                SetConfig::Ball { center, radius } => MonotoneSpec::normal_cone_ball(Vector::from_slice(center)?, *radius)?,
            };
            problems::make_bolte(&c, q.clone(), Vector::from_slice(b)?, *mu)
        }
        ProblemConfig::Lasso { a, b, reg, gamma } => problems::make_lasso(a.clone(), Vector::from_slice(b)?, *reg, *gamma),
        ProblemConfig::Quadratic { q, gamma } => problems::make_quadratic(q.clone(), *gamma),
    }
}

fn build_schedule(kind: &ScheduleKind, lambda_max: Option<f64>) -> crate::Result<Schedule> {
    let s = match kind.clone() {
        ScheduleKind::Constant { value } => Schedule::constant(value),
        ScheduleKind::Hyperbolic { a } => Schedule::hyperbolic(a),
        ScheduleKind::PiecewiseConstant { breakpoints, values } => Schedule::piecewise(breakpoints, values),
        ScheduleKind::Table { times, values } => Schedule::table(times, values),
    }?;
    match lambda_max {
        Some(m) => s.with_lambda_max(m),
        None => Ok(s),
    }
}

fn sample_grid(f: &FlowSection) -> crate::Result<Vec<f64>> {
    match f.spacing {
        Spacing::Linear => Ok(flow::linspace(f.t_end, f.samples)),
        Spacing::Log { t_first } => {
            if !(t_first > 0.0 && t_first < f.t_end) {
                return Err(Error::Spec(format!("t_first must lie in (0, t_end), got {t_first}")));
            }
            Ok(flow::logspace_with_origin(t_first, f.t_end, f.samples))
        }
    }
}

/// Resolves a parsed config and checks cross-field consistency.
pub fn build(cfg: &RunConfig) -> Result<Experiment, Vec<ConfigError>> {
    let mut errors = Vec::new();
    let line = |s: &str| cfg.section_lines.get(s).copied();
    let mut fail = |sec: &str, e: String| errors.push(ConfigError { line: line(sec), field: sec.into(), message: e });

    let problem = build_problem(&cfg.problem).map_err(|e| fail("problem", e.to_string())).ok();
    let schedule = build_schedule(&cfg.schedule, cfg.lambda_max).map_err(|e| fail("schedule", e.to_string())).ok();
    let x0 = Vector::new(cfg.x0.clone()).map_err(|e| fail("x0", e.to_string())).ok();
    let flow_cfg = sample_grid(&cfg.flow)
        .and_then(|grid| FlowConfig::new(cfg.flow.t_end, grid, cfg.flow.method))
        .map(|c| c.with_derivative(cfg.flow.record_derivative))
        .map_err(|e| fail("flow", e.to_string()))
        .ok();

    if let (Some(p), Some(x)) = (&problem, &x0) {
        if p.dim() != x.dim() {
            fail("x0", format!("initial point has dimension {}, problem '{}' has dimension {}", x.dim(), p.name, p.dim()));
        }
    }
    if let (Some(p), Some(s)) = (&problem, &schedule) {
        if s.lambda_max() > p.lambda_max + 1e-12 {
            fail(
                "schedule",
                format!("schedule upper bound {} exceeds the admissible relaxation {} of problem '{}'", s.lambda_max(), p.lambda_max, p.name),
            );
        }
    }
    if let (Some(d), Some(p), Some(s)) = (&cfg.discrete, &problem, &schedule) {
        let (_, sup) = s.range_on(0.0, d.n_steps as f64);
        match d.mode {
            DiscreteMode::Km if sup > 1.0 => fail("discrete", format!("km mode needs relaxations in [0, 1], schedule reaches {sup}")),
            DiscreteMode::Fb if p.smooth.is_none() => fail("discrete", format!("fb mode needs a forward-backward problem, '{}' is not", p.name)),
            _ => {}
        }
    }
    if let (Some(p), Some(s), Some(f)) = (&problem, &schedule, &flow_cfg) {
        for a in &cfg.analyses.run {
            match a {
                Analysis::RateBound | Analysis::LittleO => {
                    let (inf, sup) = s.range_on(0.0, f.t_end);
                    if !(inf > 0.0 && sup < 1.0) {
                        fail("analyses", format!("{} needs 0 < inf lambda <= sup lambda < 1, schedule range is [{inf}, {sup}]", a.name()));
                    }
                    if *a == Analysis::RateBound && !p.fixed_point_unique {
                        fail("analyses", format!("rate_bound needs a known distance to Fix T, unavailable for '{}'", p.name));
                    }
                }
                Analysis::FbDiag if p.smooth.is_none() => {
                    fail("analyses", format!("fb_diag needs a forward-backward problem, '{}' is not", p.name));
                }
                _ => {}
            }
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    match (problem, schedule, x0, flow_cfg) {
        (Some(problem), Some(schedule), Some(x0), Some(flow)) => Ok(Experiment { problem, schedule, x0, flow }),
        _ => unreachable!("every missing piece recorded an error"),
    }
}

/// Parses and builds without running; returns every diagnostic found.
pub fn validate(text: &str) -> Vec<ConfigError> {
    match parse_config(text) {
        Err(errors) => errors,
        Ok(cfg) => build(&cfg).err().unwrap_or_default(),
    }
}

#[derive(Debug)]
pub enum RunError {
    Config(Vec<ConfigError>),
    Runtime(Error),
    Io(String),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(errors) => {
                for (i, e) in errors.iter().enumerate() {
                    if i > 0 {
                        writeln!(f)?;
                    }
                    write!(f, "{e}")?;
                }
                Ok(())
            }
            RunError::Runtime(e) => write!(f, "{e}"),
            RunError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        RunError::Runtime(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOutcome {
    pub name: &'static str,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub outcomes: Vec<AnalysisOutcome>,
    pub summary: String,
    pub trajectory: Trajectory,
    pub iterates: Option<IterateLog>,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        if self.outcomes.iter().all(|o| o.pass) {
            EXIT_OK
        } else {
            EXIT_ANALYSIS_FAILED
        }
    }
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn trajectory_csv(traj: &Trajectory, problem: &ProblemSpec) -> String {
    let dim = traj.states[0].dim();
    let mut out = String::from("t");
    for i in 0..dim {
        out.push_str(&format!(",x_{i}"));
    }
    out.push_str(",residual,speed,dist_to_fix\n");
    for (k, x) in traj.states.iter().enumerate() {
        out.push_str(&num(traj.times[k]));
        for xi in x.as_slice() {
            out.push(',');
            out.push_str(&num(*xi));
        }
        out.push_str(&format!(",{},{},", num(traj.residuals[k]), num(traj.speeds[k])));
        if let Some(d) = problem.dist0_of(x) {
            out.push_str(&num(d));
        }
        out.push('\n');
    }
    out
}

fn iterates_csv(log: &IterateLog) -> String {
    let dim = log.iterates[0].dim();
    let mut out = String::from("n");
    for i in 0..dim {
        out.push_str(&format!(",x_{i}"));
    }
    out.push_str(",residual,lambda_n\n");
    for (n, x) in log.iterates.iter().enumerate() {
        out.push_str(&n.to_string());
        for xi in x.as_slice() {
            out.push(',');
            out.push_str(&num(*xi));
        }
        out.push_str(&format!(",{},{}\n", num(log.residuals[n]), num(log.relaxations[n])));
    }
    out
}

fn rate_csv(traj: &Trajectory, report: &analysis::RateReport) -> String {
    let mut out = String::from("t,residual,bound,margin\n");
    for (k, m) in report.margins.iter().enumerate() {
        let t = traj.times[k];
        match m {
            Some(m) => {
                let bound = report.dist0 / (report.tau_lower * t).sqrt();
                out.push_str(&format!("{},{},{},{}\n", num(t), num(traj.residuals[k]), num(bound), num(*m)));
            }
            None => out.push_str(&format!("{},{},,\n", num(t), num(traj.residuals[k]))),
        }
    }
    out
}

fn with_name(name: &str, pass: bool, value: Value) -> Value {
    let mut obj = match value {
        Value::Object(m) => m,
        other => {
            let mut m = serde_json::Map::new();
            m.insert("report".into(), other);
            m
        }
    };
    obj.insert("analysis".into(), Value::from(name));
    obj.insert("pass".into(), Value::from(pass));
    Value::Object(obj)
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("reports serialize")
}

struct Context<'a> {
    cfg: &'a RunConfig,
    exp: &'a Experiment,
    traj: &'a Trajectory,
    extra_files: Vec<(String, String)>,
}

fn run_analysis(a: Analysis, ctx: &mut Context) -> crate::Result<(bool, Value)> {
    let Context { cfg, exp, traj, .. } = *ctx;
    let p = &exp.problem;
    match a {
        Analysis::Lyapunov => {
            let mut refs = Vec::new();
            let mut pass = true;
            let mut residual_pass = true;
            let mut residual_max_increase = f64::NEG_INFINITY;
            for y in &p.known_fixed_points {
                let rep = analysis::lyapunov_report(traj, y)?;
                pass &= rep.pass && rep.fejer_pass;
                residual_pass = rep.residual_pass;
                residual_max_increase = rep.residual_max_increase;
                refs.push(json!({
                    "reference": rep.reference,
                    "pass": rep.pass,
                    "fejer_pass": rep.fejer_pass,
                    "first_violation": rep.first_violation,
                    "max_difference": rep.differences.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    "slack": rep.slack,
                }));
            }
            let pass = pass && residual_pass;
            Ok((pass, json!({
                "references": refs,
                "residual_pass": residual_pass,
                "residual_max_increase": residual_max_increase,
            })))
        }
        Analysis::RateBound => {
            let dist0 = p.dist0_of(&exp.x0).expect("checked by build");
            let rep = analysis::rate_bound_check(traj, &exp.schedule, dist0)?;
            ctx.extra_files.push(("rate_bound.csv".into(), rate_csv(traj, &rep)));
            Ok((rep.pass, to_json(&rep)))
        }
        Analysis::LittleO => {
            let rep = analysis::little_o_check(traj, &exp.schedule)?;
            Ok((rep.pass, to_json(&rep)))
        }
        Analysis::FbDiag => {
            let b = p.smooth.as_ref().expect("checked by build");
            let rep = analysis::fb_diagnostics(traj, b, &p.known_fixed_points)?;
            Ok((rep.pass, to_json(&rep)))
        }
        Analysis::Slope => {
            let t_end = traj.final_time();
            let window = cfg.analyses.slope_window.unwrap_or((t_end.min(1.0), t_end));
            let slope = analysis::slope_fit(traj, window)?;
            let pass = cfg.analyses.slope_threshold.is_none_or(|th| slope < th);
            Ok((pass, json!({
                "slope": slope,
                "window": [window.0, window.1],
                "threshold": cfg.analyses.slope_threshold,
            })))
        }
        Analysis::RescaleCheck => {
            let cmp = rescale::rescaled_comparison(&p.operator, &exp.schedule, &exp.x0, &exp.flow)?;
            let tol = rescale::equivalence_tolerance(&exp.flow, &exp.x0);
            let pass = cmp.max_discrepancy <= tol;
            let mut v = to_json(&cmp);
            v["tolerance"] = Value::from(tol);
            Ok((pass, v))
        }
        Analysis::Certify => {
            let a = &cfg.analyses;
            let ne = certify_nonexpansive(&p.operator, a.certify_trials, cfg.seed, a.certify_radius);
            let fb = match (&p.smooth, p.constants.gamma) {
                (Some(b), Some(gamma)) => Some(certify_fb_inequality(&p.operator, b, gamma, a.certify_trials, cfg.seed, a.certify_radius)),
                _ => None,
            };
            let pass = ne.pass && fb.as_ref().is_none_or(|r| r.pass);
            Ok((pass, json!({ "nonexpansive": ne, "fb_inequality": fb })))
        }
        Analysis::Energy => {
            let rep = analysis::energy_report(traj);
            Ok((rep.pass, to_json(&rep)))
        }
    }
}

fn fmt_vec(x: &[f64]) -> String {
    let parts: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
    format!("[{}]", parts.join(", "))
}

fn method_name(m: Method) -> String {
    match m {
        Method::Rk45 { abs_tol, rel_tol } => format!("rk45 (abs_tol {abs_tol:e}, rel_tol {rel_tol:e})"),
        Method::Rk4 { h } => format!("rk4 (h = {h})"),
        Method::Euler { h } => format!("euler (h = {h})"),
    }
}

/// Runs a parsed config and writes all artifacts.
pub fn run(cfg: &RunConfig, output_override: Option<&Path>) -> Result<RunReport, RunError> {
    let exp = build(cfg).map_err(RunError::Config)?;
    let p = &exp.problem;
    let traj = flow::integrate(&p.operator, &exp.schedule, &exp.x0, &exp.flow)?.with_seed(cfg.seed);

    let iterates = match cfg.discrete {
        Some(DiscreteConfig { mode: DiscreteMode::Km, n_steps }) => Some(discrete::km_iterate(&p.operator, &exp.schedule, &exp.x0, n_steps)?),
        Some(DiscreteConfig { mode: DiscreteMode::Fb, n_steps }) => {
            let a = p.monotone.as_ref().expect("checked by build");
            let b = p.smooth.as_ref().expect("checked by build");
            let gamma = p.constants.gamma.expect("forward-backward problems carry gamma");
            Some(discrete::fb_iterate(a, b, gamma, &exp.schedule, &exp.x0, n_steps)?)
        }
        None => None,
    };

    let mut ctx = Context { cfg, exp: &exp, traj: &traj, extra_files: Vec::new() };
    let mut outcomes = Vec::new();
    let mut reports = Vec::new();
    for &a in &cfg.analyses.run {
        let (pass, value) = match run_analysis(a, &mut ctx) {
            Ok(r) => r,
            Err(e) => (false, json!({ "error": e.to_string() })),
        };
        outcomes.push(AnalysisOutcome { name: a.name(), pass });
        reports.push(with_name(a.name(), pass, value));
    }
    let extra_files = ctx.extra_files;

    let mut summary = String::new();
    summary.push_str(&format!("problem: {} ({})\n", p.name, p.operator.label()));
    summary.push_str(&format!("schedule: {} (lambda_max = {})\n", exp.schedule, exp.schedule.lambda_max()));
    summary.push_str(&format!("x0: {}\n", fmt_vec(exp.x0.as_slice())));
    summary.push_str(&format!("seed: {}\n", cfg.seed));
    summary.push_str(&format!(
        "flow: t_end = {}, {} samples, {}, {} accepted / {} rejected steps\n",
        exp.flow.t_end,
        traj.len(),
        method_name(exp.flow.method),
        traj.meta.accepted_steps,
        traj.meta.rejected_steps
    ));
    let cont_first = traj.residuals[0];
    let cont_last = *traj.residuals.last().expect("nonempty");
    summary.push_str(&format!("continuous residual: {:e} -> {:e}\n", cont_first, cont_last));
    if let (Some(log), Some(d)) = (&iterates, cfg.discrete) {
        let mode = if d.mode == DiscreteMode::Km { "km" } else { "fb" };
        let first = log.residuals[0];
        let last = *log.residuals.last().expect("nonempty");
        summary.push_str(&format!("discrete {mode}: {} steps, residual {:e} -> {:e}\n", d.n_steps, first, last));
        let cont_converged = cont_last <= 1e-6 * (1.0 + cont_first);
        let disc_stalled = first > 0.0 && last >= 0.5 * first;
        if cont_converged && disc_stalled {
            summary.push_str("contrast: the continuous flow converges while the discrete iteration does not\n");
        }
    }
    summary.push_str("analyses:\n");
    if outcomes.is_empty() {
        summary.push_str("  (none requested)\n");
    }
    for o in &outcomes {
        summary.push_str(&format!("  {}: {}\n", o.name, if o.pass { "PASS" } else { "FAIL" }));
    }
    let all = outcomes.iter().all(|o| o.pass);
    summary.push_str(if all { "status: ok\n" } else { "status: analysis failure\n" });

    let dir = output_override.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.clone());
    let io = |e: std::io::Error| RunError::Io(format!("cannot write to {}: {e}", dir.display()));
    fs::create_dir_all(&dir).map_err(io)?;
    fs::write(dir.join("trajectory.csv"), trajectory_csv(&traj, p)).map_err(io)?;
    if let Some(log) = &iterates {
        fs::write(dir.join("iterates.csv"), iterates_csv(log)).map_err(io)?;
    }
    for (name, body) in &extra_files {
        fs::write(dir.join(name), body).map_err(io)?;
    }
    let doc = json!({
        "problem": p.name,
        "seed": cfg.seed,
        "schedule": exp.schedule,
        "analyses": reports,
    });
    let mut body = serde_json::to_string_pretty(&doc).expect("json");
    body.push('\n');
    fs::write(dir.join("analysis.json"), body).map_err(io)?;
    fs::write(dir.join("summary.txt"), &summary).map_err(io)?;

    Ok(RunReport { output_dir: dir, outcomes, summary, trajectory: traj, iterates })
}

/// Reads, parses and runs a config file.
pub fn run_file(path: &Path, output_override: Option<&Path>) -> Result<RunReport, RunError> {
    let text = fs::read_to_string(path).map_err(|e| RunError::Io(format!("cannot read {}: {e}", path.display())))?;
    let cfg = parse_config(&text).map_err(RunError::Config)?;
    run(&cfg, output_override)
}
