//! Run configuration: a flat `key = value` text format with one section per
//! concern, validated strictly (unknown sections or keys are errors).
//!
//! ```text
//! # quad smoke run
//! [run]
//! task = quad
//! method = funcid_linear
//! seed = 0
//!
//! [optim]
//! n_outer = 50
//! eta_out = 0.05
//!
//! [task]
//! preset = well_conditioned
//! ```
//!
//! Sections: `[run]` (task, method, seed, out_dir), `[optim]` (any
//! [`OptimConfig`] field by name), `[task]` (task-specific shape
//! parameters), `[method]` (method-specific hyperparameters). Every key is
//! optional; defaults are the struct defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::baselines::{AidConfig, HvpMode, LinearSolver};
use crate::funcid::{AdjointMode, InnerMode, OptimConfig, OptimKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Iv,
    RlToy,
    Quad,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "iv" => Ok(Task::Iv),
            "rl_toy" => Ok(Task::RlToy),
            "quad" => Ok(Task::Quad),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Iv => "iv",
            Task::RlToy => "rl_toy",
            Task::Quad => "quad",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Funcid,
    FuncidLinear,
    Aid,
    ValuePenalty,
    GradientPenalty,
    Mle,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "funcid" => Ok(Method::Funcid),
            "funcid_linear" => Ok(Method::FuncidLinear),
            "aid" => Ok(Method::Aid),
            "value_penalty" => Ok(Method::ValuePenalty),
            "gradient_penalty" => Ok(Method::GradientPenalty),
            "mle" => Ok(Method::Mle),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Funcid => "funcid",
            Method::FuncidLinear => "funcid_linear",
            Method::Aid => "aid",
            Method::ValuePenalty => "value_penalty",
            Method::GradientPenalty => "gradient_penalty",
            Method::Mle => "mle",
        }
    }
}

/// Task-shape parameters; each task reads the subset it understands.
#[derive(Debug, Clone)]
pub struct TaskParams {
    /// Sample count: IV training rows, replay-buffer steps, or quad rows.
    pub n: usize,
    /// IV treatment dimension.
    pub d_t: usize,
    /// Optional pre-generated dataset file (IV only).
    pub data_path: Option<PathBuf>,
    /// Quad preset: well_conditioned | realizable | under_complete.
    pub preset: String,
    pub n_states: usize,
    pub n_actions: usize,
    /// MDP model parameterization: full | low_rank.
    pub model: String,
    /// Rank of the factored transition logits when model = low_rank.
    pub rank: usize,
    /// Hidden width of the nonlinear inner model (method = funcid).
    pub hidden: usize,
}

impl Default for TaskParams {
    fn default() -> TaskParams {
        TaskParams {
            n: 1000,
            d_t: crate::tasks::iv::IV_D_T_DEFAULT,
            data_path: None,
            preset: "well_conditioned".into(),
            n_states: 8,
            n_actions: 2,
            model: "full".into(),
            rank: 2,
            hidden: 32,
        }
    }
}

/// Method hyperparameters beyond [`OptimConfig`].
#[derive(Debug, Clone)]
pub struct MethodParams {
    pub aid: AidConfig,
    /// Penalty weight for value/gradient penalties.
    pub lambda: f64,
    /// Auxiliary-tracker steps per outer step (value penalty).
    pub m_aux: usize,
    /// Model-head learning rate for the MLE baseline.
    pub eta_model: f64,
}

impl Default for MethodParams {
    fn default() -> MethodParams {
        MethodParams {
            aid: AidConfig::default(),
            lambda: 0.1,
            m_aux: 5,
            eta_model: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: Task,
    pub method: Method,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub optim: OptimConfig,
    pub task_params: TaskParams,
    pub method_params: MethodParams,
    /// The parsed `section.key = value` pairs, echoed into the summary.
    pub raw: Vec<(String, String)>,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            task: Task::Quad,
            method: Method::FuncidLinear,
            seed: 0,
            out_dir: None,
            optim: OptimConfig::default(),
            task_params: TaskParams::default(),
            method_params: MethodParams::default(),
            raw: Vec::new(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("invalid bool '{v}' for {key} (use true/false)"))),
    }
}

fn parse_inner_mode(v: &str) -> Result<InnerMode> {
    match v {
        "iterative" => Ok(InnerMode::Iterative),
        "exact" => Ok(InnerMode::Exact),
        other => Err(Error::Config(format!("unknown inner_mode '{other}'"))),
    }
}

fn parse_adjoint_mode(v: &str) -> Result<AdjointMode> {
    match v {
        "iterative" => Ok(AdjointMode::Iterative),
        "exact" => Ok(AdjointMode::Exact),
        "per_sample" => Ok(AdjointMode::PerSample),
        other => Err(Error::Config(format!("unknown adjoint_mode '{other}'"))),
    }
}

/// Split a config file into `(section.key, value)` pairs, rejecting
/// malformed lines, duplicate keys, and unknown sections.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut section: Option<&str> = None;
    let mut out = BTreeMap::new();
    for (lineno, raw_line) in text.lines().enumerate() {
        let line = match raw_line.find('#') {
            Some(p) => &raw_line[..p],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !matches!(name, "run" | "optim" | "task" | "method") {
                return Err(Error::Config(format!(
                    "line {}: unknown section '[{}]'",
                    lineno + 1,
                    name
                )));
            }
            section = Some(match name {
                "run" => "run",
                "optim" => "optim",
                "task" => "task",
                _ => "method",
            });
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(Error::Config(format!(
                "line {}: expected 'key = value', got '{line}'",
                lineno + 1
            )));
        };
        let key = line[..eq].trim();
        let value = line[eq + 1..].trim();
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config(format!(
                "line {}: empty key or value in '{line}'",
                lineno + 1
            )));
        }
        let Some(sec) = section else {
            return Err(Error::Config(format!(
                "line {}: '{key}' appears before any [section]",
                lineno + 1
            )));
        };
        let full = format!("{sec}.{key}");
        if out.insert(full.clone(), value.to_string()).is_some() {
            return Err(Error::Config(format!("duplicate key '{full}'")));
        }
    }
    Ok(out)
}

/// Build a validated [`RunConfig`] from parsed pairs, consuming every key;
/// leftovers are unknown keys and rejected by name.
pub fn build_config(mut pairs: BTreeMap<String, String>) -> Result<RunConfig> {
    let mut cfg = RunConfig {
        raw: pairs.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        ..RunConfig::default()
    };

    let mut take = |k: &str| pairs.remove(k);

    if let Some(v) = take("run.task") {
        cfg.task = Task::parse(&v)?;
    }
    if let Some(v) = take("run.method") {
        cfg.method = Method::parse(&v)?;
    }
    if let Some(v) = take("run.seed") {
        cfg.seed = parse_num("run.seed", &v)?;
    }
    if let Some(v) = take("run.out_dir") {
        cfg.out_dir = Some(PathBuf::from(v));
    }

    let o = &mut cfg.optim;
    if let Some(v) = take("optim.n_outer") {
        o.n_outer = parse_num("optim.n_outer", &v)?;
    }
    if let Some(v) = take("optim.m_inner") {
        o.m_inner = parse_num("optim.m_inner", &v)?;
    }
    if let Some(v) = take("optim.k_adjoint") {
        o.k_adjoint = parse_num("optim.k_adjoint", &v)?;
    }
    if let Some(v) = take("optim.eta_out") {
        o.eta_out = parse_num("optim.eta_out", &v)?;
    }
    if let Some(v) = take("optim.eta_in") {
        o.eta_in = parse_num("optim.eta_in", &v)?;
    }
    if let Some(v) = take("optim.eta_adj") {
        o.eta_adj = parse_num("optim.eta_adj", &v)?;
    }
    if let Some(v) = take("optim.batch_in") {
        o.batch_in = parse_num("optim.batch_in", &v)?;
    }
    if let Some(v) = take("optim.batch_out") {
        o.batch_out = parse_num("optim.batch_out", &v)?;
    }
    if let Some(v) = take("optim.full_batch") {
        o.full_batch = parse_bool("optim.full_batch", &v)?;
    }
    if let Some(v) = take("optim.warm_start") {
        o.warm_start = parse_bool("optim.warm_start", &v)?;
    }
    if let Some(v) = take("optim.outer_optimizer") {
        o.outer_optimizer = OptimKind::parse(&v)?;
    }
    if let Some(v) = take("optim.inner_optimizer") {
        o.inner_optimizer = OptimKind::parse(&v)?;
    }
    if let Some(v) = take("optim.adjoint_optimizer") {
        o.adjoint_optimizer = OptimKind::parse(&v)?;
    }
    if let Some(v) = take("optim.r_in") {
        o.r_in = parse_num("optim.r_in", &v)?;
    }
    if let Some(v) = take("optim.r_adj") {
        o.r_adj = parse_num("optim.r_adj", &v)?;
    }
    if let Some(v) = take("optim.inner_mode") {
        o.inner_mode = parse_inner_mode(&v)?;
    }
    if let Some(v) = take("optim.adjoint_mode") {
        o.adjoint_mode = parse_adjoint_mode(&v)?;
    }
    if let Some(v) = take("optim.target_ema") {
        o.target_ema = parse_num("optim.target_ema", &v)?;
    }
    if let Some(v) = take("optim.record_wall_time") {
        o.record_wall_time = parse_bool("optim.record_wall_time", &v)?;
    }

    let t = &mut cfg.task_params;
    if let Some(v) = take("task.n") {
        t.n = parse_num("task.n", &v)?;
    }
    if let Some(v) = take("task.d_t") {
        t.d_t = parse_num("task.d_t", &v)?;
    }
    if let Some(v) = take("task.data") {
        t.data_path = Some(PathBuf::from(v));
    }
    if let Some(v) = take("task.preset") {
        if !matches!(v.as_str(), "well_conditioned" | "realizable" | "under_complete") {
            return Err(Error::Config(format!("unknown quad preset '{v}'")));
        }
        t.preset = v;
    }
    if let Some(v) = take("task.n_states") {
        t.n_states = parse_num("task.n_states", &v)?;
    }
    if let Some(v) = take("task.n_actions") {
        t.n_actions = parse_num("task.n_actions", &v)?;
    }
    if let Some(v) = take("task.model") {
        if !matches!(v.as_str(), "full" | "low_rank") {
            return Err(Error::Config(format!("unknown MDP model '{v}'")));
        }
        t.model = v;
    }
    if let Some(v) = take("task.rank") {
        t.rank = parse_num("task.rank", &v)?;
    }
    if let Some(v) = take("task.hidden") {
        t.hidden = parse_num("task.hidden", &v)?;
    }

    let m = &mut cfg.method_params;
    if let Some(v) = take("method.linear_solver") {
        m.aid.linear_solver = match v.as_str() {
            "cg" => LinearSolver::Cg,
            "identity_heuristic" => LinearSolver::IdentityHeuristic,
            "gd" => LinearSolver::Gd,
            other => return Err(Error::Config(format!("unknown linear_solver '{other}'"))),
        };
    }
    if let Some(v) = take("method.solver_tol") {
        m.aid.solver_tol = parse_num("method.solver_tol", &v)?;
    }
    if let Some(v) = take("method.solver_maxit") {
        m.aid.solver_maxit = parse_num("method.solver_maxit", &v)?;
    }
    if let Some(v) = take("method.hvp_mode") {
        m.aid.hvp_mode = match v.as_str() {
            "exact_linear" => HvpMode::ExactLinear,
            "finite_difference" => HvpMode::FiniteDifference { eps_scale: 1e-4 },
            other => return Err(Error::Config(format!("unknown hvp_mode '{other}'"))),
        };
    }
    if let Some(v) = take("method.fd_eps") {
        let eps: f64 = parse_num("method.fd_eps", &v)?;
        match m.aid.hvp_mode {
            HvpMode::FiniteDifference { .. } => {
                m.aid.hvp_mode = HvpMode::FiniteDifference { eps_scale: eps };
            }
            HvpMode::ExactLinear => {
                return Err(Error::Config(
                    "method.fd_eps requires hvp_mode = finite_difference".into(),
                ));
            }
        }
    }
    if let Some(v) = take("method.lambda") {
        m.lambda = parse_num("method.lambda", &v)?;
    }
    if let Some(v) = take("method.m_aux") {
        m.m_aux = parse_num("method.m_aux", &v)?;
    }
    if let Some(v) = take("method.eta_model") {
        m.eta_model = parse_num("method.eta_model", &v)?;
    }

    if let Some(unknown) = pairs.keys().next() {
        return Err(Error::Config(format!("unknown key '{unknown}'")));
    }

    cfg.optim.validate().map_err(|e| Error::Config(e.to_string()))?;
    validate_shape(&cfg)?;
    Ok(cfg)
}

fn validate_shape(cfg: &RunConfig) -> Result<()> {
    let t = &cfg.task_params;
    if t.n == 0 {
        return Err(Error::Config("task.n must be positive".into()));
    }
    match cfg.task {
        Task::RlToy => {
            if t.n_states < 2 || t.n_actions < 2 {
                return Err(Error::Config("rl_toy needs n_states >= 2 and n_actions >= 2".into()));
            }
            if t.model == "low_rank" && (t.rank == 0 || t.rank >= t.n_states) {
                return Err(Error::Config(format!(
                    "low_rank rank must be in 1..{}, got {}",
                    t.n_states, t.rank
                )));
            }
        }
        Task::Iv => {
            if t.d_t < crate::tasks::iv::IV_LATENTS {
                return Err(Error::Config(format!(
                    "iv treatment dimension must be >= {}, got {}",
                    crate::tasks::iv::IV_LATENTS,
                    t.d_t
                )));
            }
        }
        Task::Quad => {}
    }
    match (cfg.task, cfg.method) {
        (Task::RlToy, Method::ValuePenalty | Method::GradientPenalty) => Err(Error::Config(
            "penalty baselines are defined for the regression tasks (iv, quad)".into(),
        )),
        (Task::Iv | Task::Quad, Method::Mle) => Err(Error::Config(
            "the mle baseline is defined for rl_toy".into(),
        )),
        _ => Ok(()),
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    build_config(parse_pairs(text)?)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: format!("cannot read config: {e}"),
    })?;
    parse_config(&text)
}
