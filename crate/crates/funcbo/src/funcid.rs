//! The functional implicit-differentiation core.
//!
//! One outer iteration does three things (the inner fit, the adjoint fit,
//! and the total-gradient assembly):
//!
//! 1. `inner_opt`: fit the inner model `h_theta` to the inner loss at the
//!    current `omega` (M gradient steps, or a ridge solve for linear
//!    models);
//! 2. `adjoint_opt` / `linear_adjoint_solve` / `per_sample_adjoint`: fit the
//!    adjoint function `a_xi` minimizing the empirical adjoint objective
//!    `1/2 mean_in[a(x)^T H_i a(x)] + mean_out[a(x)^T d_j] (+ ridge)`,
//!    where `H_i` is the inner-loss Hessian and `d_j` the outer-loss
//!    gradient, both in output space of dimension `d_v` — never in the
//!    inner model's parameter space;
//! 3. `total_grad`: assemble the outer-variable gradient as the explicit
//!    part `mean_out[dl_out/domega]` plus the implicit part
//!    `mean_in[d/domega (a(x) . dl_in/dv)]`.
//!
//! Every Hessian-vector product in this module touches vectors of length
//! `d_v`; the instrumented [`CostMeter`] records that dimension and a flop
//! model of the work so the cost advantage over parametric implicit
//! differentiation is measurable rather than asserted.

use std::sync::Arc;

use crate::losses::{Label, PointwiseLoss, TargetTable};
use crate::models::{LinearModel, Mlp, Model, OuterMap, ParamVector};
use crate::numkit::{dot, norm2, Cholesky, Mat, Rng};
use crate::{Error, Result};

/// A sample set: row `i` of `xs` is the conditioning input `x_i`, and
/// `labels[i]` carries the task-specific `y_i`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub xs: Mat,
    pub labels: Vec<Label>,
}

impl Dataset {
    pub fn new(xs: Mat, labels: Vec<Label>) -> Result<Dataset> {
        if xs.rows() != labels.len() {
            return Err(Error::Dim {
                op: "Dataset::new",
                expected: format!("{} labels", xs.rows()),
                got: format!("{}", labels.len()),
            });
        }
        Ok(Dataset { xs, labels })
    }

    pub fn len(&self) -> usize {
        self.xs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.xs.row(i)
    }

    pub fn label(&self, i: usize) -> &Label {
        &self.labels[i]
    }
}

/// Indices drawn with replacement (the i.i.d.-batch convention).
pub fn sample_indices(rng: &mut Rng, n: usize, size: usize) -> Vec<usize> {
    (0..size).map(|_| rng.choice(n)).collect()
}

/// `0..n` in order — the deterministic full-batch mode.
pub fn full_indices(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn gather_rows(xs: &Mat, idx: &[usize]) -> Mat {
    let mut out = Mat::zeros(idx.len(), xs.cols());
    for (k, &i) in idx.iter().enumerate() {
        out.row_mut(k).copy_from_slice(xs.row(i));
    }
    out
}

/// Inner or adjoint function approximator choice.
#[derive(Debug, Clone)]
pub enum ModelKind {
    Mlp(Mlp),
    Linear(LinearModel),
}

impl ModelKind {
    pub fn as_model(&self) -> &dyn Model {
        match self {
            ModelKind::Mlp(m) => m,
            ModelKind::Linear(m) => m,
        }
    }

    pub fn as_linear(&self) -> Option<&LinearModel> {
        match self {
            ModelKind::Linear(m) => Some(m),
            ModelKind::Mlp(_) => None,
        }
    }
}

/// First-order update rule. Adam uses the standard constants
/// (0.9, 0.999, 1e-8) with bias correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

impl OptimKind {
    pub fn parse(s: &str) -> Result<OptimKind> {
        match s {
            "sgd" => Ok(OptimKind::Sgd),
            "adam" => Ok(OptimKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimKind::Sgd => "sgd",
            OptimKind::Adam => "adam",
        }
    }
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Stateful optimizer for one parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Optimizer {
    pub fn new(kind: OptimKind, dim: usize) -> Optimizer {
        let state_dim = if kind == OptimKind::Adam { dim } else { 0 };
        Optimizer {
            kind,
            m: vec![0.0; state_dim],
            v: vec![0.0; state_dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector, lr: f64) {
        match self.kind {
            OptimKind::Sgd => params.axpy(-lr, grad),
            OptimKind::Adam => {
                self.t += 1;
                let b1t = 1.0 - ADAM_B1.powi(self.t as i32);
                let b2t = 1.0 - ADAM_B2.powi(self.t as i32);
                let p = params.as_mut_slice();
                for (i, g) in grad.as_slice().iter().enumerate() {
                    self.m[i] = ADAM_B1 * self.m[i] + (1.0 - ADAM_B1) * g;
                    self.v[i] = ADAM_B2 * self.v[i] + (1.0 - ADAM_B2) * g * g;
                    let mhat = self.m[i] / b1t;
                    let vhat = self.v[i] / b2t;
                    p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// How the inner problem is solved each outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerMode {
    /// M first-order steps on the empirical inner objective.
    Iterative,
    /// Ridge solve on the batch; requires a linear inner model.
    Exact,
}

/// How the adjoint problem is solved each outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointMode {
    /// K first-order steps on the empirical adjoint objective.
    Iterative,
    /// Normal-equations solve; requires a linear adjoint model.
    Exact,
    /// Unconstrained per-sample minimizer `a_i = -H_i^{-1} d_i`; requires
    /// the inner and outer batches to coincide and no adjoint ridge.
    PerSample,
}

/// Iteration counts, step sizes, batch sizes, and solve modes for one run.
#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub n_outer: usize,
    pub m_inner: usize,
    pub k_adjoint: usize,
    pub eta_out: f64,
    pub eta_in: f64,
    pub eta_adj: f64,
    pub batch_in: usize,
    pub batch_out: usize,
    /// Use the whole dataset, in order, for every batch (deterministic).
    pub full_batch: bool,
    /// Start inner/adjoint parameters from the previous outer iteration.
    pub warm_start: bool,
    pub outer_optimizer: OptimKind,
    pub inner_optimizer: OptimKind,
    pub adjoint_optimizer: OptimKind,
    pub r_in: f64,
    pub r_adj: f64,
    pub inner_mode: InnerMode,
    pub adjoint_mode: AdjointMode,
    /// Exponential-averaging coefficient for the lagged target table
    /// (only read when the problem refreshes one).
    pub target_ema: f64,
    /// Record wall-clock per iteration. Off by default so that output files
    /// are byte-reproducible from (config, seed).
    pub record_wall_time: bool,
}

impl Default for OptimConfig {
    fn default() -> OptimConfig {
        OptimConfig {
            n_outer: 100,
            m_inner: 20,
            k_adjoint: 20,
            eta_out: 1e-2,
            eta_in: 1e-2,
            eta_adj: 1e-2,
            batch_in: 128,
            batch_out: 128,
            full_batch: false,
            warm_start: true,
            outer_optimizer: OptimKind::Sgd,
            inner_optimizer: OptimKind::Sgd,
            adjoint_optimizer: OptimKind::Sgd,
            r_in: 0.0,
            r_adj: 1e-6,
            inner_mode: InnerMode::Iterative,
            adjoint_mode: AdjointMode::Iterative,
            target_ema: 5e-3,
            record_wall_time: false,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidArg {
            op: "OptimConfig::validate",
            reason,
        };
        if self.n_outer == 0 {
            return Err(bad("n_outer must be >= 1".into()));
        }
        if self.inner_mode == InnerMode::Iterative && self.m_inner == 0 {
            return Err(bad("m_inner must be >= 1 for iterative inner solves".into()));
        }
        if self.adjoint_mode == AdjointMode::Iterative && self.k_adjoint == 0 {
            return Err(bad(
                "k_adjoint must be >= 1 unless a closed-form adjoint path is selected".into(),
            ));
        }
        if !self.full_batch && (self.batch_in == 0 || self.batch_out == 0) {
            return Err(bad("batch sizes must be >= 1 (or set full_batch)".into()));
        }
        for (name, eta) in [
            ("eta_out", self.eta_out),
            ("eta_in", self.eta_in),
            ("eta_adj", self.eta_adj),
        ] {
            if !eta.is_finite() || eta <= 0.0 {
                return Err(bad(format!("{name} must be positive, got {eta}")));
            }
        }
        if self.r_in < 0.0 || self.r_adj < 0.0 {
            return Err(bad("ridge weights must be >= 0".into()));
        }
        if self.adjoint_mode == AdjointMode::PerSample && self.r_adj != 0.0 {
            return Err(bad(
                "the per-sample adjoint is the unregularized minimizer; set r_adj = 0".into(),
            ));
        }
        if self.target_ema < 0.0 || self.target_ema > 1.0 {
            return Err(bad(format!(
                "target_ema must be in [0, 1], got {}",
                self.target_ema
            )));
        }
        Ok(())
    }
}

/// Counters for the cost model: every Hessian-vector product records the
/// dimension it ran in and a flop estimate (dense-matrix work model,
/// `2 * dim^2` per apply; finite-difference HVPs count their two gradient
/// evaluations).
#[derive(Debug, Clone, Default)]
pub struct CostMeter {
    pub hvp_count: u64,
    pub hvp_flops: u64,
    /// Dimension of the most recent HVP (constant within a method).
    pub hvp_dim: usize,
}

impl CostMeter {
    pub fn record_hvp(&mut self, dim: usize, flops: u64) {
        self.hvp_count += 1;
        self.hvp_flops += flops;
        self.hvp_dim = dim;
    }
}

/// The bilevel problem: datasets, loss pair, inner/adjoint model choices,
/// and the outer model whose parameters are being optimized.
#[derive(Clone)]
pub struct BilevelProblem {
    pub outer_map: Arc<dyn OuterMap>,
    pub inner_loss: PointwiseLoss,
    pub outer_loss: PointwiseLoss,
    pub d_in: Arc<Dataset>,
    pub d_out: Arc<Dataset>,
    pub inner_model: ModelKind,
    pub adjoint_model: ModelKind,
    /// For MDP-style problems: how to rebuild the lagged target table from
    /// the inner model each outer iteration. `None` for regression tasks.
    pub target_refresh: Option<TargetRefresh>,
}

/// Everything needed to refresh a lagged Q-table: the canonical encoded
/// inputs for all (state, action) pairs (row `s * n_actions + a`), the
/// table's shape, and its initial value.
#[derive(Debug, Clone)]
pub struct TargetRefresh {
    pub all_inputs: Mat,
    pub n_states: usize,
    pub n_actions: usize,
    pub init: Mat,
}

impl TargetRefresh {
    /// Evaluates the inner model on the canonical inputs to produce the
    /// current Q-table.
    pub fn table_of(&self, model: &dyn Model, theta: &ParamVector) -> Result<Mat> {
        let vals = model.forward(theta, &self.all_inputs)?;
        if vals.cols() != 1 {
            return Err(Error::Dim {
                op: "TargetRefresh::table_of",
                expected: "scalar model output".into(),
                got: format!("{} columns", vals.cols()),
            });
        }
        let mut q = Mat::zeros(self.n_states, self.n_actions);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                q.set(s, a, vals.get(s * self.n_actions + a, 0));
            }
        }
        Ok(q)
    }
}

/// Mean inner loss over the batch plus `r_in/2 |theta|^2`, with its
/// gradient in `theta`.
pub fn empirical_inner_loss(
    loss: &PointwiseLoss,
    omega: &ParamVector,
    model: &dyn Model,
    theta: &ParamVector,
    data: &Dataset,
    idx: &[usize],
    r_in: f64,
) -> Result<(f64, ParamVector)> {
    if idx.is_empty() {
        return Err(Error::InvalidArg {
            op: "empirical_inner_loss",
            reason: "empty batch".into(),
        });
    }
    let xs = gather_rows(&data.xs, idx);
    let vs = model.forward(theta, &xs)?;
    let n = idx.len() as f64;
    let mut value = 0.0;
    let mut cotangents = Mat::zeros(idx.len(), model.out_dim());
    for (k, &i) in idx.iter().enumerate() {
        let bundle = loss.eval_bundle(omega, vs.row(k), data.x(i), data.label(i))?;
        value += bundle.value / n;
        let crow = cotangents.row_mut(k);
        for (c, g) in crow.iter_mut().zip(&bundle.grad_v) {
            *c = g / n;
        }
    }
    let mut grad = model.vjp_params(theta, &xs, &cotangents)?;
    if r_in > 0.0 {
        value += 0.5 * r_in * theta.dot(theta);
        grad.axpy(r_in, theta);
    }
    if !value.is_finite() {
        return Err(Error::NonFinite {
            op: "empirical_inner_loss",
        });
    }
    Ok((value, grad))
}

/// Mean outer loss over the batch at the inner model's outputs.
pub fn empirical_outer_loss(
    loss: &PointwiseLoss,
    omega: &ParamVector,
    model: &dyn Model,
    theta: &ParamVector,
    data: &Dataset,
    idx: &[usize],
) -> Result<f64> {
    let xs = gather_rows(&data.xs, idx);
    let vs = model.forward(theta, &xs)?;
    let n = idx.len() as f64;
    let mut value = 0.0;
    for (k, &i) in idx.iter().enumerate() {
        value += loss.eval_bundle(omega, vs.row(k), data.x(i), data.label(i))?.value / n;
    }
    Ok(value)
}

/// The empirical adjoint objective at adjoint parameters `xi`:
/// `1/2 mean_in[a^T H a] + mean_out[a^T d] + r_adj/2 |xi|^2`,
/// with its gradient in `xi`. The two means are normalized independently.
#[allow(clippy::too_many_arguments)]
pub fn empirical_adjoint_loss(
    inner_loss: &PointwiseLoss,
    outer_loss: &PointwiseLoss,
    omega: &ParamVector,
    inner_model: &dyn Model,
    theta: &ParamVector,
    adj_model: &dyn Model,
    xi: &ParamVector,
    d_in: &Dataset,
    idx_in: &[usize],
    d_out: &Dataset,
    idx_out: &[usize],
    r_adj: f64,
    meter: &mut CostMeter,
) -> Result<(f64, ParamVector)> {
    if idx_in.is_empty() || idx_out.is_empty() {
        return Err(Error::InvalidArg {
            op: "empirical_adjoint_loss",
            reason: "empty batch".into(),
        });
    }
    let d_v = inner_loss.d_v();
    let mut value = 0.0;
    let mut grad = ParamVector::zeros(xi.len());

    // curvature term over the inner batch
    let xs_in = gather_rows(&d_in.xs, idx_in);
    let h_in = inner_model.forward(theta, &xs_in)?;
    let a_in = adj_model.forward(xi, &xs_in)?;
    let n = idx_in.len() as f64;
    let mut cot_in = Mat::zeros(idx_in.len(), d_v);
    for (k, &i) in idx_in.iter().enumerate() {
        let bundle = inner_loss.eval_bundle(omega, h_in.row(k), d_in.x(i), d_in.label(i))?;
        let a = a_in.row(k);
        // H_i a — the output-space Hessian-vector product
        let ha: Vec<f64> = a.iter().map(|ai| bundle.hess_scale * ai).collect();
        meter.record_hvp(d_v, 2 * (d_v * d_v) as u64);
        value += 0.5 * dot(a, &ha) / n;
        let crow = cot_in.row_mut(k);
        for (c, h) in crow.iter_mut().zip(&ha) {
            *c = h / n;
        }
    }
    grad.axpy(1.0, &adj_model.vjp_params(xi, &xs_in, &cot_in)?);

    // linear term over the outer batch
    let xs_out = gather_rows(&d_out.xs, idx_out);
    let h_out = inner_model.forward(theta, &xs_out)?;
    let a_out = adj_model.forward(xi, &xs_out)?;
    let m = idx_out.len() as f64;
    let mut cot_out = Mat::zeros(idx_out.len(), d_v);
    for (k, &j) in idx_out.iter().enumerate() {
        let bundle = outer_loss.eval_bundle(omega, h_out.row(k), d_out.x(j), d_out.label(j))?;
        value += dot(a_out.row(k), &bundle.grad_v) / m;
        let crow = cot_out.row_mut(k);
        for (c, d) in crow.iter_mut().zip(&bundle.grad_v) {
            *c = d / m;
        }
    }
    grad.axpy(1.0, &adj_model.vjp_params(xi, &xs_out, &cot_out)?);

    if r_adj > 0.0 {
        value += 0.5 * r_adj * xi.dot(xi);
        grad.axpy(r_adj, xi);
    }
    if !value.is_finite() {
        return Err(Error::NonFinite {
            op: "empirical_adjoint_loss",
        });
    }
    Ok((value, grad))
}

/// Outcome of an iterative or exact sub-problem solve.
#[derive(Debug, Clone)]
pub struct LoopOutcome {
    pub params: ParamVector,
    pub steps: usize,
    pub final_loss: f64,
}

/// Fits the inner model at the current `omega`: either `m_inner` first-order
/// steps (fresh batch per step), or — for linear models in exact mode — a
/// ridge solve on one batch.
pub fn inner_opt(
    loss: &PointwiseLoss,
    omega: &ParamVector,
    model: &ModelKind,
    theta0: ParamVector,
    data: &Dataset,
    cfg: &OptimConfig,
    rng: &mut Rng,
) -> Result<LoopOutcome> {
    match cfg.inner_mode {
        InnerMode::Iterative => {
            let m = model.as_model();
            let mut theta = theta0;
            let mut opt = Optimizer::new(cfg.inner_optimizer, theta.len());
            let mut last = f64::NAN;
            for _ in 0..cfg.m_inner {
                let idx = if cfg.full_batch {
                    full_indices(data.len())
                } else {
                    sample_indices(rng, data.len(), cfg.batch_in)
                };
                let (value, grad) =
                    empirical_inner_loss(loss, omega, m, &theta, data, &idx, cfg.r_in)?;
                opt.step(&mut theta, &grad, cfg.eta_in);
                last = value;
            }
            Ok(LoopOutcome {
                params: theta,
                steps: cfg.m_inner,
                final_loss: last,
            })
        }
        InnerMode::Exact => {
            let lm = model.as_linear().ok_or(Error::InvalidArg {
                op: "inner_opt",
                reason: "exact inner solves require a linear inner model".into(),
            })?;
            let idx = if cfg.full_batch {
                full_indices(data.len())
            } else {
                sample_indices(rng, data.len(), cfg.batch_in)
            };
            let theta = exact_linear_fit(loss, omega, lm, data, &idx, cfg.r_in)?;
            let (value, _) =
                empirical_inner_loss(loss, omega, lm, &theta, data, &idx, cfg.r_in)?;
            Ok(LoopOutcome {
                params: theta,
                steps: 0,
                final_loss: value,
            })
        }
    }
}

/// Ridge solution of the empirical inner problem for a linear model.
///
/// Every implemented inner loss is, in `v`, the isotropic quadratic
/// `h_i/2 |v - u_i|^2 + const`, so the batch objective in the weights `W`
/// (`v_i = W phi_i`) has the per-output-coordinate normal equations
/// `(1/n sum_i h_i phi_i phi_i^T + r_in I) w_k = 1/n sum_i h_i u_ik phi_i`,
/// with the point-wise target recovered as `u_i = -grad_v l(0) / h_i`.
pub fn exact_linear_fit(
    loss: &PointwiseLoss,
    omega: &ParamVector,
    lm: &LinearModel,
    data: &Dataset,
    idx: &[usize],
    r_in: f64,
) -> Result<ParamVector> {
    let d1 = lm.feature_dim();
    let d_v = lm.out_dim();
    if loss.d_v() != d_v {
        return Err(Error::Dim {
            op: "exact_linear_fit",
            expected: format!("model output {}", loss.d_v()),
            got: format!("{d_v}"),
        });
    }
    let n = idx.len() as f64;
    let zero_v = vec![0.0; d_v];
    let mut gram = Mat::zeros(d1, d1);
    let mut rhs = Mat::zeros(d_v, d1);
    for &i in idx {
        let bundle = loss.eval_bundle(omega, &zero_v, data.x(i), data.label(i))?;
        let h = bundle.hess_scale;
        let u: Vec<f64> = bundle.grad_v.iter().map(|g| -g / h).collect();
        let phi = lm.features.apply(data.x(i));
        for (r, phir) in phi.iter().enumerate() {
            let w = h * phir / n;
            if w != 0.0 {
                crate::numkit::axpy(gram.row_mut(r), w, &phi);
            }
        }
        for (k, &uk) in u.iter().enumerate() {
            let w = h * uk / n;
            if w != 0.0 {
                crate::numkit::axpy(rhs.row_mut(k), w, &phi);
            }
        }
    }
    gram.add_scaled_identity(r_in);
    let chol = Cholesky::new(&gram)?;
    let mut theta = ParamVector::zeros(d_v * d1);
    for k in 0..d_v {
        let wk = chol.solve(rhs.row(k))?;
        theta.as_mut_slice()[k * d1..(k + 1) * d1].copy_from_slice(&wk);
    }
    Ok(theta)
}

/// Fits the adjoint model by `k_adjoint` first-order steps on the empirical
/// adjoint objective (fresh batch pair per step).
#[allow(clippy::too_many_arguments)]
pub fn adjoint_opt(
    inner_loss: &PointwiseLoss,
    outer_loss: &PointwiseLoss,
    omega: &ParamVector,
    inner_model: &dyn Model,
    theta: &ParamVector,
    adj_model: &ModelKind,
    xi0: ParamVector,
    d_in: &Dataset,
    d_out: &Dataset,
    cfg: &OptimConfig,
    rng: &mut Rng,
    meter: &mut CostMeter,
) -> Result<LoopOutcome> {
    let am = adj_model.as_model();
    let mut xi = xi0;
    let mut opt = Optimizer::new(cfg.adjoint_optimizer, xi.len());
    let mut last = f64::NAN;
    for _ in 0..cfg.k_adjoint {
        let (idx_in, idx_out) = if cfg.full_batch {
            (full_indices(d_in.len()), full_indices(d_out.len()))
        } else {
            (
                sample_indices(rng, d_in.len(), cfg.batch_in),
                sample_indices(rng, d_out.len(), cfg.batch_out),
            )
        };
        let (value, grad) = empirical_adjoint_loss(
            inner_loss, outer_loss, omega, inner_model, theta, am, &xi, d_in, &idx_in, d_out,
            &idx_out, cfg.r_adj, meter,
        )?;
        opt.step(&mut xi, &grad, cfg.eta_adj);
        last = value;
    }
    Ok(LoopOutcome {
        params: xi,
        steps: cfg.k_adjoint,
        final_loss: last,
    })
}

/// Closed-form adjoint for a linear adjoint model: per output coordinate,
/// `(1/n sum_in h_i phi_i phi_i^T + r_adj I) w_k = -1/m sum_out d_jk psi_j`.
///
/// This is the normal-equations solve of the same objective `adjoint_opt`
/// descends; with a squared inner loss the curvature weights are `h_i = 2`.
#[allow(clippy::too_many_arguments)]
pub fn linear_adjoint_solve(
    inner_loss: &PointwiseLoss,
    outer_loss: &PointwiseLoss,
    omega: &ParamVector,
    inner_model: &dyn Model,
    theta: &ParamVector,
    adj_lm: &LinearModel,
    d_in: &Dataset,
    idx_in: &[usize],
    d_out: &Dataset,
    idx_out: &[usize],
    r_adj: f64,
    meter: &mut CostMeter,
) -> Result<ParamVector> {
    let d1 = adj_lm.feature_dim();
    let d_v = inner_loss.d_v();
    if adj_lm.out_dim() != d_v {
        return Err(Error::Dim {
            op: "linear_adjoint_solve",
            expected: format!("adjoint output {d_v}"),
            got: format!("{}", adj_lm.out_dim()),
        });
    }
    let n = idx_in.len() as f64;
    let m = idx_out.len() as f64;

    let xs_in = gather_rows(&d_in.xs, idx_in);
    let h_in = inner_model.forward(theta, &xs_in)?;
    let mut gram = Mat::zeros(d1, d1);
    for (k, &i) in idx_in.iter().enumerate() {
        let bundle = inner_loss.eval_bundle(omega, h_in.row(k), d_in.x(i), d_in.label(i))?;
        meter.record_hvp(d_v, 2 * (d_v * d_v) as u64);
        let phi = adj_lm.features.apply(d_in.x(i));
        for (r, phir) in phi.iter().enumerate() {
            let w = bundle.hess_scale * phir / n;
            if w != 0.0 {
                crate::numkit::axpy(gram.row_mut(r), w, &phi);
            }
        }
    }
    gram.add_scaled_identity(r_adj);

    let xs_out = gather_rows(&d_out.xs, idx_out);
    let h_out = inner_model.forward(theta, &xs_out)?;
    let mut rhs = Mat::zeros(d_v, d1);
    for (k, &j) in idx_out.iter().enumerate() {
        let bundle = outer_loss.eval_bundle(omega, h_out.row(k), d_out.x(j), d_out.label(j))?;
        let psi = adj_lm.features.apply(d_out.x(j));
        for (c, dk) in bundle.grad_v.iter().enumerate() {
            let w = -dk / m;
            if w != 0.0 {
                crate::numkit::axpy(rhs.row_mut(c), w, &psi);
            }
        }
    }

    let chol = Cholesky::new(&gram)?;
    let mut xi = ParamVector::zeros(d_v * d1);
    for k in 0..d_v {
        let wk = chol.solve(rhs.row(k))?;
        xi.as_mut_slice()[k * d1..(k + 1) * d1].copy_from_slice(&wk);
    }
    Ok(xi)
}

/// Unconstrained per-sample adjoint minimizer on a shared batch:
/// `a_i = -H_i^{-1} d_i`. Valid when the inner and outer batches coincide
/// (the regularizer-free functional optimum decouples per sample).
#[allow(clippy::too_many_arguments)]
pub fn per_sample_adjoint(
    inner_loss: &PointwiseLoss,
    outer_loss: &PointwiseLoss,
    omega: &ParamVector,
    inner_model: &dyn Model,
    theta: &ParamVector,
    data: &Dataset,
    idx: &[usize],
    meter: &mut CostMeter,
) -> Result<Mat> {
    let d_v = inner_loss.d_v();
    let xs = gather_rows(&data.xs, idx);
    let hvals = inner_model.forward(theta, &xs)?;
    let mut a = Mat::zeros(idx.len(), d_v);
    for (k, &i) in idx.iter().enumerate() {
        let hv = hvals.row(k);
        let inner = inner_loss.eval_bundle(omega, hv, data.x(i), data.label(i))?;
        let outer = outer_loss.eval_bundle(omega, hv, data.x(i), data.label(i))?;
        meter.record_hvp(d_v, 2 * (d_v * d_v) as u64);
        let arow = a.row_mut(k);
        for (av, dv) in arow.iter_mut().zip(&outer.grad_v) {
            *av = -dv / inner.hess_scale;
        }
    }
    Ok(a)
}

/// Per-sample adjoint specialized to the Bellman pair: with the outer target
/// `T_j = r' + gamma lse(qbar[s', .])`, the minimizer is
/// `a(x_i) = -(h(x_i) - T_i)`. Preconditions: Bellman inner/outer losses,
/// shared batch, no adjoint ridge.
#[allow(clippy::too_many_arguments)]
pub fn closed_form_adjoint_rl(
    inner_loss: &PointwiseLoss,
    outer_loss: &PointwiseLoss,
    omega: &ParamVector,
    inner_model: &dyn Model,
    theta: &ParamVector,
    data: &Dataset,
    idx: &[usize],
    meter: &mut CostMeter,
) -> Result<Mat> {
    if !matches!(inner_loss, PointwiseLoss::BellmanInner { .. })
        || !matches!(outer_loss, PointwiseLoss::BellmanOuter { .. })
    {
        return Err(Error::InvalidArg {
            op: "closed_form_adjoint_rl",
            reason: "requires the Bellman inner/outer loss pair".into(),
        });
    }
    per_sample_adjoint(
        inner_loss,
        outer_loss,
        omega,
        inner_model,
        theta,
        data,
        idx,
        meter,
    )
}

/// Where the adjoint values used by [`total_grad`] come from.
pub enum AdjointPath<'a> {
    /// Evaluate a fitted adjoint model.
    Model {
        model: &'a dyn Model,
        xi: &'a ParamVector,
    },
    /// Use precomputed per-sample values; row `k` pairs with `idx_in[k]`.
    PerSample { values: &'a Mat },
}

/// The assembled total gradient and its two parts.
#[derive(Debug, Clone)]
pub struct TotalGrad {
    pub grad: ParamVector,
    pub g_explicit: ParamVector,
    pub g_implicit: ParamVector,
}

/// Assembles the outer-variable gradient estimate:
/// explicit part `mean_out[dl_out/domega]` at the inner model's outputs,
/// plus implicit part `mean_in[d/domega (a(x) . dl_in/dv)]`.
#[allow(clippy::too_many_arguments)]
pub fn total_grad(
    inner_loss: &PointwiseLoss,
    outer_loss: &PointwiseLoss,
    omega: &ParamVector,
    inner_model: &dyn Model,
    theta: &ParamVector,
    adjoint: &AdjointPath,
    d_in: &Dataset,
    idx_in: &[usize],
    d_out: &Dataset,
    idx_out: &[usize],
) -> Result<TotalGrad> {
    // explicit part
    let mut g_explicit = ParamVector::zeros(omega.len());
    if outer_loss.depends_on_omega() {
        let xs_out = gather_rows(&d_out.xs, idx_out);
        let h_out = inner_model.forward(theta, &xs_out)?;
        let m = idx_out.len() as f64;
        for (k, &j) in idx_out.iter().enumerate() {
            let g = outer_loss.grad_omega(omega, h_out.row(k), d_out.x(j), d_out.label(j))?;
            g_explicit.axpy(1.0 / m, &g);
        }
    }

    // implicit part
    let xs_in = gather_rows(&d_in.xs, idx_in);
    let h_in = inner_model.forward(theta, &xs_in)?;
    let a_in: Mat = match adjoint {
        AdjointPath::Model { model, xi } => model.forward(xi, &xs_in)?,
        AdjointPath::PerSample { values } => {
            if values.rows() != idx_in.len() {
                return Err(Error::Dim {
                    op: "total_grad",
                    expected: format!("{} per-sample adjoint rows", idx_in.len()),
                    got: format!("{}", values.rows()),
                });
            }
            (*values).clone()
        }
    };
    let mut g_implicit = ParamVector::zeros(omega.len());
    let n = idx_in.len() as f64;
    for (k, &i) in idx_in.iter().enumerate() {
        let c = inner_loss.cross_apply(omega, h_in.row(k), d_in.x(i), d_in.label(i), a_in.row(k))?;
        g_implicit.axpy(1.0 / n, &c);
    }

    let mut grad = g_explicit.clone();
    grad.axpy(1.0, &g_implicit);
    if !grad.as_slice().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "total_grad" });
    }
    Ok(TotalGrad {
        grad,
        g_explicit,
        g_implicit,
    })
}

/// Per-iteration metrics captured by [`funcid_run`].
#[derive(Debug, Clone)]
pub struct IterRecord {
    pub iter: usize,
    pub outer_loss: f64,
    pub inner_loss: f64,
    /// `None` for methods without an adjoint stage.
    pub adjoint_loss: Option<f64>,
    pub grad_norm: f64,
    /// `|g_hat - grad F_oracle|` when an oracle gradient hook is attached.
    pub grad_bias: Option<f64>,
    pub hvp_dim: usize,
    pub inner_steps: usize,
    pub adjoint_steps: usize,
    pub wall_ms: Option<f64>,
    pub eval_metric: Option<f64>,
}

/// Snapshot handed to metric/diagnostic hooks each iteration.
pub struct IterState<'a> {
    pub iter: usize,
    pub omega: &'a ParamVector,
    pub theta: &'a ParamVector,
    pub qbar: Option<&'a Mat>,
}

/// Optional diagnostics for a run: an oracle total gradient (for the bias
/// column) and a task evaluation metric.
#[derive(Default)]
pub struct RunHooks<'a> {
    #[allow(clippy::type_complexity)]
    pub oracle_grad: Option<&'a dyn Fn(&ParamVector) -> Result<Vec<f64>>>,
    pub eval_metric: Option<&'a dyn Fn(&IterState) -> f64>,
}

/// Final state and per-iteration records of an outer loop.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub omega: ParamVector,
    pub theta: ParamVector,
    pub xi: Option<ParamVector>,
    pub qbar: Option<Mat>,
    pub records: Vec<IterRecord>,
    pub meter: CostMeter,
}

/// The outer loop: for each of `n_outer` iterations, (re)fit the inner
/// model, fit or solve the adjoint, assemble the total gradient, and step
/// `omega`. Warm starts carry `(theta, xi)` across iterations; with a
/// target refresh attached, the lagged table moves by `target_ema` toward
/// the current inner model after every iteration.
pub fn funcid_run(
    problem: &BilevelProblem,
    omega0: ParamVector,
    cfg: &OptimConfig,
    seed: u64,
    hooks: &RunHooks,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if cfg.adjoint_mode == AdjointMode::Exact && problem.adjoint_model.as_linear().is_none() {
        return Err(Error::InvalidArg {
            op: "funcid_run",
            reason: "exact adjoint mode requires a linear adjoint model".into(),
        });
    }

    let mut rng = Rng::with_stream(seed, 0x46554e43); // stream tag: run loop
    let mut omega = omega0;
    let inner = problem.inner_model.as_model();
    let mut theta = inner.init_params(&mut rng);
    let mut xi = problem.adjoint_model.as_model().init_params(&mut rng);
    let theta_init = theta.clone();
    let xi_init = xi.clone();

    let mut qbar = problem.target_refresh.as_ref().map(|t| t.init.clone());
    let mut inner_loss = problem.inner_loss.clone();
    let mut outer_loss = problem.outer_loss.clone();
    if let Some(q) = &qbar {
        let table = Arc::new(TargetTable::new(q.clone()));
        inner_loss = with_target(&inner_loss, table.clone());
        outer_loss = with_target(&outer_loss, table);
    }

    let mut outer_opt = Optimizer::new(cfg.outer_optimizer, omega.len());
    let mut meter = CostMeter::default();
    let mut records = Vec::with_capacity(cfg.n_outer);

    for it in 0..cfg.n_outer {
        let t0 = std::time::Instant::now();

        // batches for the gradient estimate (the sub-loops sample their own)
        let (idx_in, idx_out) = if cfg.full_batch {
            (
                full_indices(problem.d_in.len()),
                full_indices(problem.d_out.len()),
            )
        } else if cfg.adjoint_mode == AdjointMode::PerSample {
            // the per-sample adjoint needs one shared batch
            let shared = sample_indices(&mut rng, problem.d_in.len(), cfg.batch_in);
            (shared.clone(), shared)
        } else {
            (
                sample_indices(&mut rng, problem.d_in.len(), cfg.batch_in),
                sample_indices(&mut rng, problem.d_out.len(), cfg.batch_out),
            )
        };
        if cfg.adjoint_mode == AdjointMode::PerSample
            && !Arc::ptr_eq(&problem.d_in, &problem.d_out)
        {
            return Err(Error::InvalidArg {
                op: "funcid_run",
                reason: "per-sample adjoint requires d_in and d_out to be the same dataset".into(),
            });
        }

        // inner fit
        let theta_start = if cfg.warm_start {
            theta.clone()
        } else {
            theta_init.clone()
        };
        let inner_out = inner_opt(
            &inner_loss,
            &omega,
            &problem.inner_model,
            theta_start,
            &problem.d_in,
            cfg,
            &mut rng,
        )?;
        theta = inner_out.params;

        // adjoint fit / solve
        let mut per_sample_values: Option<Mat> = None;
        let adjoint_steps = match cfg.adjoint_mode {
            AdjointMode::Iterative => {
                let xi_start = if cfg.warm_start {
                    xi.clone()
                } else {
                    xi_init.clone()
                };
                let adj_out = adjoint_opt(
                    &inner_loss,
                    &outer_loss,
                    &omega,
                    inner,
                    &theta,
                    &problem.adjoint_model,
                    xi_start,
                    &problem.d_in,
                    &problem.d_out,
                    cfg,
                    &mut rng,
                    &mut meter,
                )?;
                xi = adj_out.params;
                adj_out.steps
            }
            AdjointMode::Exact => {
                let adj_lm = problem.adjoint_model.as_linear().unwrap();
                xi = linear_adjoint_solve(
                    &inner_loss,
                    &outer_loss,
                    &omega,
                    inner,
                    &theta,
                    adj_lm,
                    &problem.d_in,
                    &idx_in,
                    &problem.d_out,
                    &idx_out,
                    cfg.r_adj,
                    &mut meter,
                )?;
                0
            }
            AdjointMode::PerSample => {
                per_sample_values = Some(per_sample_adjoint(
                    &inner_loss,
                    &outer_loss,
                    &omega,
                    inner,
                    &theta,
                    &problem.d_in,
                    &idx_in,
                    &mut meter,
                )?);
                0
            }
        };

        // adjoint objective value at the values actually used
        let adjoint_loss = Some(match &per_sample_values {
            Some(values) => adjoint_loss_at_values(
                &inner_loss,
                &outer_loss,
                &omega,
                inner,
                &theta,
                &problem.d_in,
                &idx_in,
                values,
            )?,
            None => {
                empirical_adjoint_loss(
                    &inner_loss,
                    &outer_loss,
                    &omega,
                    inner,
                    &theta,
                    problem.adjoint_model.as_model(),
                    &xi,
                    &problem.d_in,
                    &idx_in,
                    &problem.d_out,
                    &idx_out,
                    cfg.r_adj,
                    &mut meter,
                )?
                .0
            }
        });

        // total gradient
        let adjoint_path = match &per_sample_values {
            Some(values) => AdjointPath::PerSample { values },
            None => AdjointPath::Model {
                model: problem.adjoint_model.as_model(),
                xi: &xi,
            },
        };
        let tg = total_grad(
            &inner_loss,
            &outer_loss,
            &omega,
            inner,
            &theta,
            &adjoint_path,
            &problem.d_in,
            &idx_in,
            &problem.d_out,
            &idx_out,
        )?;

        let outer_loss_val = empirical_outer_loss(
            &outer_loss,
            &omega,
            inner,
            &theta,
            &problem.d_out,
            &idx_out,
        )?;
        let grad_bias = match hooks.oracle_grad {
            Some(f) => {
                let oracle = f(&omega)?;
                Some(norm2(&crate::numkit::sub(tg.grad.as_slice(), &oracle)))
            }
            None => None,
        };

        // outer step
        outer_opt.step(&mut omega, &tg.grad, cfg.eta_out);

        // lagged-table refresh
        if let (Some(refresh), Some(q)) = (&problem.target_refresh, &mut qbar) {
            let current = refresh.table_of(inner, &theta)?;
            let c = cfg.target_ema;
            for (qv, cv) in q.data_mut().iter_mut().zip(current.data()) {
                *qv = (1.0 - c) * *qv + c * cv;
            }
            let table = Arc::new(TargetTable::new(q.clone()));
            inner_loss = with_target(&inner_loss, table.clone());
            outer_loss = with_target(&outer_loss, table);
        }

        let eval_metric = hooks.eval_metric.map(|f| {
            f(&IterState {
                iter: it,
                omega: &omega,
                theta: &theta,
                qbar: qbar.as_ref(),
            })
        });

        records.push(IterRecord {
            iter: it,
            outer_loss: outer_loss_val,
            inner_loss: inner_out.final_loss,
            adjoint_loss,
            grad_norm: tg.grad.norm2(),
            grad_bias,
            hvp_dim: meter.hvp_dim,
            inner_steps: inner_out.steps,
            adjoint_steps,
            wall_ms: cfg
                .record_wall_time
                .then(|| t0.elapsed().as_secs_f64() * 1e3),
            eval_metric,
        });
    }

    Ok(RunOutcome {
        omega,
        theta,
        xi: Some(xi),
        qbar,
        records,
        meter,
    })
}

/// Rebuilds a loss with a new lagged target table (no-op for losses without
/// one).
pub fn with_target(loss: &PointwiseLoss, table: Arc<TargetTable>) -> PointwiseLoss {
    match loss {
        PointwiseLoss::BellmanInner { model, gamma, .. } => PointwiseLoss::BellmanInner {
            model: model.clone(),
            target: table,
            gamma: *gamma,
        },
        PointwiseLoss::BellmanOuter { gamma, .. } => PointwiseLoss::BellmanOuter {
            target: table,
            gamma: *gamma,
        },
        other => other.clone(),
    }
}

/// Empirical adjoint objective evaluated at explicit per-sample values on a
/// shared batch (no ridge term — the per-sample path is unregularized).
#[allow(clippy::too_many_arguments)]
fn adjoint_loss_at_values(
    inner_loss: &PointwiseLoss,
    outer_loss: &PointwiseLoss,
    omega: &ParamVector,
    inner_model: &dyn Model,
    theta: &ParamVector,
    data: &Dataset,
    idx: &[usize],
    values: &Mat,
) -> Result<f64> {
    let xs = gather_rows(&data.xs, idx);
    let hvals = inner_model.forward(theta, &xs)?;
    let n = idx.len() as f64;
    let mut value = 0.0;
    for (k, &i) in idx.iter().enumerate() {
        let a = values.row(k);
        let ib = inner_loss.eval_bundle(omega, hvals.row(k), data.x(i), data.label(i))?;
        let ob = outer_loss.eval_bundle(omega, hvals.row(k), data.x(i), data.label(i))?;
        value += (0.5 * ib.hess_scale * dot(a, a) + dot(a, &ob.grad_v)) / n;
    }
    Ok(value)
}
