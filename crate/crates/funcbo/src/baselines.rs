//! Comparison methods: parametric implicit differentiation (AID), penalty
//! reformulations, and maximum-likelihood model learning.
//!
//! AID differentiates through the inner *parameters*: it solves
//! `(d2 G_in / dtheta2) u = -(d G_out / dtheta)` in the inner model's
//! parameter space (dimension `p_in`) and assembles
//! `grad = dG_out/domega + (d2 G_in / domega dtheta) u`. Every
//! Hessian-vector product here is `p_in`-dimensional — the structural cost
//! contrast with the output-space products of [`crate::funcid`] — and the
//! cross term is formed by differencing `dG_in/domega` along `u`, so this
//! module never touches the functional cross-derivative code it is compared
//! against.

use crate::funcid::{empirical_inner_loss, CostMeter, Dataset, OptimConfig};
use crate::losses::PointwiseLoss;
use crate::models::{param_jacobian, Model, ParamVector};
use crate::numkit::{cg_default_maxit, conjugate_gradient, norm2, Mat, Rng};
use crate::oracle::lambda_max;
use crate::{Error, Result};

/// Linear-system solver for the parametric adjoint equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearSolver {
    /// Conjugate gradients on Hessian-vector products.
    Cg,
    /// `u = -b`: pretend the Hessian is the identity. Cheap and biased; the
    /// residual flag reports how wrong it is.
    IdentityHeuristic,
    /// Gradient descent on the quadratic with a power-iteration step size.
    Gd,
}

/// How parameter-space Hessian-vector products are computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HvpMode {
    /// Closed form for linear inner models (constant Hessian).
    ExactLinear,
    /// Central differences of the exact inner gradient along the vector,
    /// with step `eps_scale * (1 + |theta|_inf)` on a normalized direction.
    FiniteDifference { eps_scale: f64 },
}

#[derive(Debug, Clone)]
pub struct AidConfig {
    pub linear_solver: LinearSolver,
    pub solver_tol: f64,
    /// 0 means the conjugate-gradient default (10x dimension).
    pub solver_maxit: usize,
    pub hvp_mode: HvpMode,
}

impl Default for AidConfig {
    fn default() -> AidConfig {
        AidConfig {
            linear_solver: LinearSolver::Cg,
            solver_tol: 1e-10,
            solver_maxit: 0,
            hvp_mode: HvpMode::FiniteDifference { eps_scale: 1e-4 },
        }
    }
}

impl AidConfig {
    pub fn validate(&self) -> Result<()> {
        if let HvpMode::FiniteDifference { eps_scale } = self.hvp_mode {
            if eps_scale.is_nan() || eps_scale <= 0.0 {
                return Err(Error::InvalidArg {
                    op: "AidConfig::validate",
                    reason: format!("finite-difference eps must be positive, got {eps_scale}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AidOutcome {
    pub grad: ParamVector,
    /// Set when the linear solve did not reach its tolerance (expected
    /// failure mode on ill-conditioned systems).
    pub residual_flag: bool,
    pub residual_norm: f64,
    pub meter: CostMeter,
}

/// `dG_out/dtheta`: inner-model gradient of the mean outer loss.
fn theta_grad_outer(
    outer_loss: &PointwiseLoss,
    omega: &ParamVector,
    model: &dyn Model,
    theta: &ParamVector,
    data: &Dataset,
    idx: &[usize],
) -> Result<ParamVector> {
    let mut xs = Mat::zeros(idx.len(), data.xs.cols());
    for (k, &i) in idx.iter().enumerate() {
        xs.row_mut(k).copy_from_slice(data.x(i));
    }
    let vs = model.forward(theta, &xs)?;
    let m = idx.len() as f64;
    let mut cot = Mat::zeros(idx.len(), model.out_dim());
    for (k, &j) in idx.iter().enumerate() {
        let bundle = outer_loss.eval_bundle(omega, vs.row(k), data.x(j), data.label(j))?;
        for (c, g) in cot.row_mut(k).iter_mut().zip(&bundle.grad_v) {
            *c = g / m;
        }
    }
    model.vjp_params(theta, &xs, &cot)
}

/// `dG_out/domega` plus, for inner losses, `dG_in/domega`: mean explicit
/// omega-gradient of a loss at the inner model's outputs.
fn omega_grad(
    loss: &PointwiseLoss,
    omega: &ParamVector,
    model: &dyn Model,
    theta: &ParamVector,
    data: &Dataset,
    idx: &[usize],
) -> Result<ParamVector> {
    let mut xs = Mat::zeros(idx.len(), data.xs.cols());
    for (k, &i) in idx.iter().enumerate() {
        xs.row_mut(k).copy_from_slice(data.x(i));
    }
    let vs = model.forward(theta, &xs)?;
    let n = idx.len() as f64;
    let mut grad = ParamVector::zeros(omega.len());
    for (k, &i) in idx.iter().enumerate() {
        let g = loss.grad_omega(omega, vs.row(k), data.x(i), data.label(i))?;
        grad.axpy(1.0 / n, &g);
    }
    Ok(grad)
}

/// Parameter-space Hessian-vector product of the empirical inner objective.
#[allow(clippy::too_many_arguments)]
fn parametric_hvp(
    inner_loss: &PointwiseLoss,
    omega: &ParamVector,
    model: &dyn Model,
    theta: &ParamVector,
    data: &Dataset,
    idx: &[usize],
    r_in: f64,
    cfg: &AidConfig,
    gram: Option<&Mat>,
    u: &[f64],
    meter: &mut CostMeter,
) -> Result<Vec<f64>> {
    let p_in = theta.len();
    match (cfg.hvp_mode, gram) {
        (HvpMode::ExactLinear, Some(gram)) => {
            // block-diagonal Hessian: the same feature Gram for every output
            // coordinate, plus the ridge
            let d1 = gram.rows();
            let d_v = p_in / d1;
            let mut out = vec![0.0; p_in];
            for k in 0..d_v {
                let u_k = &u[k * d1..(k + 1) * d1];
                let gu = gram.matvec(u_k)?;
                out[k * d1..(k + 1) * d1].copy_from_slice(&gu);
            }
            crate::numkit::axpy(&mut out, r_in, u);
            meter.record_hvp(p_in, 2 * (p_in * p_in) as u64);
            Ok(out)
        }
        (HvpMode::FiniteDifference { eps_scale }, _) => {
            let nu = norm2(u);
            if nu == 0.0 {
                meter.record_hvp(p_in, 2 * model.vjp_flops(idx.len()));
                return Ok(vec![0.0; p_in]);
            }
            let eps = eps_scale * (1.0 + theta.max_abs());
            let mut tp = theta.clone();
            let scale = eps / nu;
            crate::numkit::axpy(tp.as_mut_slice(), scale, u);
            let (_, gp) = empirical_inner_loss(inner_loss, omega, model, &tp, data, idx, r_in)?;
            let mut tm = theta.clone();
            crate::numkit::axpy(tm.as_mut_slice(), -scale, u);
            let (_, gm) = empirical_inner_loss(inner_loss, omega, model, &tm, data, idx, r_in)?;
            meter.record_hvp(p_in, 2 * model.vjp_flops(idx.len()));
            Ok(gp
                .as_slice()
                .iter()
                .zip(gm.as_slice())
                .map(|(p, m)| nu * (p - m) / (2.0 * eps))
                .collect())
        }
        (HvpMode::ExactLinear, None) => Err(Error::InvalidArg {
            op: "parametric_hvp",
            reason: "exact HVPs require a linear inner model".into(),
        }),
    }
}

/// Feature Gram of the linear inner Hessian:
/// `(1/n) sum_i h_i phi_i phi_i^T` (ridge added by the HVP).
fn linear_hessian_gram(
    inner_loss: &PointwiseLoss,
    omega: &ParamVector,
    lm: &crate::models::LinearModel,
    data: &Dataset,
    idx: &[usize],
) -> Result<Mat> {
    let d1 = lm.feature_dim();
    let n = idx.len() as f64;
    let zero_v = vec![0.0; lm.out_dim()];
    let mut gram = Mat::zeros(d1, d1);
    for &i in idx {
        let bundle = inner_loss.eval_bundle(omega, &zero_v, data.x(i), data.label(i))?;
        let phi = lm.features.apply(data.x(i));
        for (r, phir) in phi.iter().enumerate() {
            let w = bundle.hess_scale * phir / n;
            if w != 0.0 {
                crate::numkit::axpy(gram.row_mut(r), w, &phi);
            }
        }
    }
    Ok(gram)
}

/// Parametric implicit-differentiation total gradient.
///
/// Solves `H u = -dG_out/dtheta` with the configured solver, then returns
/// `dG_out/domega + (cross) u`, where the cross term differences
/// `dG_in/domega` along `u`. Solver trouble is reported via
/// `residual_flag`, not an error.
#[allow(clippy::too_many_arguments)]
pub fn aid_total_grad(
    inner_loss: &PointwiseLoss,
    outer_loss: &PointwiseLoss,
    omega: &ParamVector,
    model: &crate::funcid::ModelKind,
    theta: &ParamVector,
    d_in: &Dataset,
    idx_in: &[usize],
    d_out: &Dataset,
    idx_out: &[usize],
    r_in: f64,
    cfg: &AidConfig,
) -> Result<AidOutcome> {
    cfg.validate()?;
    let m = model.as_model();
    let p_in = theta.len();
    let mut meter = CostMeter {
        hvp_dim: p_in,
        ..CostMeter::default()
    };

    let gram = match cfg.hvp_mode {
        HvpMode::ExactLinear => {
            let lm = model.as_linear().ok_or(Error::InvalidArg {
                op: "aid_total_grad",
                reason: "exact HVPs require a linear inner model".into(),
            })?;
            Some(linear_hessian_gram(inner_loss, omega, lm, d_in, idx_in)?)
        }
        HvpMode::FiniteDifference { .. } => None,
    };

    let b = theta_grad_outer(outer_loss, omega, m, theta, d_out, idx_out)?;
    let rhs: Vec<f64> = b.as_slice().iter().map(|v| -v).collect();
    let maxit = if cfg.solver_maxit == 0 {
        cg_default_maxit(p_in)
    } else {
        cfg.solver_maxit
    };

    let hvp = |u: &[f64], meter: &mut CostMeter| {
        parametric_hvp(
            inner_loss, omega, m, theta, d_in, idx_in, r_in, cfg, gram.as_ref(), u, meter,
        )
    };

    let (u, residual_norm, converged) = match cfg.linear_solver {
        LinearSolver::Cg => {
            let out = conjugate_gradient(
                |v| hvp(v, &mut meter).expect("hvp failed during cg"),
                &rhs,
                cfg.solver_tol,
                maxit,
            );
            (out.x, out.residual_norm, out.converged)
        }
        LinearSolver::IdentityHeuristic => {
            let u = rhs.clone();
            let hu = hvp(&u, &mut meter)?;
            let resid = crate::numkit::sub(&hu, &rhs);
            let rn = norm2(&resid);
            (u, rn, rn <= cfg.solver_tol * norm2(&rhs).max(1e-300))
        }
        LinearSolver::Gd => {
            let lam = lambda_max(|v| hvp(v, &mut meter).expect("hvp failed"), p_in, 30, 0x414944);
            let eta = if lam > 0.0 { 1.0 / lam } else { 1.0 };
            let mut u = vec![0.0; p_in];
            let mut rn = norm2(&rhs);
            for _ in 0..maxit {
                let hu = hvp(&u, &mut meter)?;
                let resid = crate::numkit::sub(&hu, &rhs);
                rn = norm2(&resid);
                if rn <= cfg.solver_tol * norm2(&rhs).max(1e-300) {
                    break;
                }
                crate::numkit::axpy(&mut u, -eta, &resid);
            }
            let ok = rn <= cfg.solver_tol * norm2(&rhs).max(1e-300);
            (u, rn, ok)
        }
    };

    // explicit part
    let mut grad = omega_grad(outer_loss, omega, m, theta, d_out, idx_out)?;

    // cross term: central difference of dG_in/domega along u
    let nu = norm2(&u);
    if nu > 0.0 {
        let eps = 1e-4 * (1.0 + theta.max_abs());
        let scale = eps / nu;
        let mut tp = theta.clone();
        crate::numkit::axpy(tp.as_mut_slice(), scale, &u);
        let gp = omega_grad(inner_loss, omega, m, &tp, d_in, idx_in)?;
        let mut tm = theta.clone();
        crate::numkit::axpy(tm.as_mut_slice(), -scale, &u);
        let gm = omega_grad(inner_loss, omega, m, &tm, d_in, idx_in)?;
        for ((g, p), q) in grad
            .as_mut_slice()
            .iter_mut()
            .zip(gp.as_slice())
            .zip(gm.as_slice())
        {
            *g += nu * (p - q) / (2.0 * eps);
        }
    }

    if !grad.as_slice().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            op: "aid_total_grad",
        });
    }
    Ok(AidOutcome {
        grad,
        residual_flag: !converged,
        residual_norm,
        meter,
    })
}

/// Compares the finite-difference Hessian of the empirical inner objective
/// with its Gauss–Newton-style structural part
/// `(1/n) sum_i J_i^T (d2l/dv2) J_i + r_in I`. The Frobenius norm of the
/// difference is the curvature the parameterization itself contributes; it
/// vanishes at an inner optimum and for linear models.
pub fn parametric_hessian_check(
    inner_loss: &PointwiseLoss,
    omega: &ParamVector,
    model: &dyn Model,
    theta: &ParamVector,
    data: &Dataset,
    idx: &[usize],
    r_in: f64,
) -> Result<(Mat, Mat, f64)> {
    let p = theta.len();
    if p > 30 {
        return Err(Error::InvalidArg {
            op: "parametric_hessian_check",
            reason: format!("full finite-difference Hessian needs p <= 30, got {p}"),
        });
    }

    let mut h_fd = Mat::zeros(p, p);
    for j in 0..p {
        let eps = 1e-4 * (1.0 + theta.as_slice()[j].abs());
        let mut tp = theta.clone();
        tp.as_mut_slice()[j] += eps;
        let (_, gp) = empirical_inner_loss(inner_loss, omega, model, &tp, data, idx, r_in)?;
        let mut tm = theta.clone();
        tm.as_mut_slice()[j] -= eps;
        let (_, gm) = empirical_inner_loss(inner_loss, omega, model, &tm, data, idx, r_in)?;
        for i in 0..p {
            h_fd.set(i, j, (gp.as_slice()[i] - gm.as_slice()[i]) / (2.0 * eps));
        }
    }
    // symmetrize away finite-difference asymmetry
    for i in 0..p {
        for j in i + 1..p {
            let s = 0.5 * (h_fd.get(i, j) + h_fd.get(j, i));
            h_fd.set(i, j, s);
            h_fd.set(j, i, s);
        }
    }

    let n = idx.len() as f64;
    let mut h_struct = Mat::zeros(p, p);
    for &i in idx {
        let x = Mat::from_vec(1, data.xs.cols(), data.x(i).to_vec())?;
        let v = model.forward(theta, &x)?;
        let bundle = inner_loss.eval_bundle(omega, v.row(0), data.x(i), data.label(i))?;
        let jac = param_jacobian(model, theta, data.x(i))?;
        // h_i J^T J / n
        for r in 0..jac.rows() {
            let jr = jac.row(r);
            for a in 0..p {
                if jr[a] == 0.0 {
                    continue;
                }
                let w = bundle.hess_scale * jr[a] / n;
                crate::numkit::axpy(h_struct.row_mut(a), w, jr);
            }
        }
    }
    h_struct.add_scaled_identity(r_in);

    let mut diff = 0.0;
    for (a, b) in h_fd.data().iter().zip(h_struct.data()) {
        diff += (a - b) * (a - b);
    }
    Ok((h_fd, h_struct, diff.sqrt()))
}

/// Hyperparameters shared by the penalty baselines.
#[derive(Debug, Clone)]
pub struct PenaltyConfig {
    pub lambda: f64,
    pub eta_omega: f64,
    pub eta_theta: f64,
    /// Steps for the auxiliary inner tracker per outer step (value penalty).
    pub m_aux: usize,
    pub r_in: f64,
}

impl Default for PenaltyConfig {
    fn default() -> PenaltyConfig {
        PenaltyConfig {
            lambda: 0.1,
            eta_omega: 1e-2,
            eta_theta: 1e-2,
            m_aux: 5,
            r_in: 0.0,
        }
    }
}

/// Joint state advanced by the penalty steps.
#[derive(Debug, Clone)]
pub struct PenaltyState {
    pub omega: ParamVector,
    pub theta: ParamVector,
    /// Tracker of the inner optimum used by the value penalty.
    pub aux_theta: ParamVector,
}

/// What one penalty step saw before updating the state.
#[derive(Debug, Clone, Copy)]
pub struct PenaltyStepInfo {
    /// The penalty term's value (not including the outer loss).
    pub penalty_value: f64,
    /// Norm of the joint (theta, omega) gradient that was stepped along.
    pub grad_norm: f64,
}

/// One value-penalty step on
/// `G_out(tau(theta)) + lambda (G_in(omega, theta) - G_in(omega, aux))`:
/// the auxiliary tracker descends `G_in(omega, .)` for `m_aux` steps, then
/// omega and theta take one joint gradient step.
#[allow(clippy::too_many_arguments)]
pub fn value_penalty_step(
    inner_loss: &PointwiseLoss,
    outer_loss: &PointwiseLoss,
    state: &mut PenaltyState,
    model: &dyn Model,
    d_in: &Dataset,
    idx_in: &[usize],
    d_out: &Dataset,
    idx_out: &[usize],
    cfg: &PenaltyConfig,
) -> Result<PenaltyStepInfo> {
    if cfg.lambda < 0.0 {
        return Err(Error::InvalidArg {
            op: "value_penalty_step",
            reason: "lambda must be >= 0".into(),
        });
    }
    for _ in 0..cfg.m_aux {
        let (_, g_aux) = empirical_inner_loss(
            inner_loss,
            &state.omega,
            model,
            &state.aux_theta,
            d_in,
            idx_in,
            cfg.r_in,
        )?;
        state.aux_theta.axpy(-cfg.eta_theta, &g_aux);
    }

    let (in_value, g_in_theta) = empirical_inner_loss(
        inner_loss,
        &state.omega,
        model,
        &state.theta,
        d_in,
        idx_in,
        cfg.r_in,
    )?;
    let (aux_value, _) = empirical_inner_loss(
        inner_loss,
        &state.omega,
        model,
        &state.aux_theta,
        d_in,
        idx_in,
        cfg.r_in,
    )?;
    let g_out_theta = theta_grad_outer(outer_loss, &state.omega, model, &state.theta, d_out, idx_out)?;

    // omega gradient: explicit outer part + lambda (dG_in(theta) - dG_in(aux))
    let mut g_omega = omega_grad(outer_loss, &state.omega, model, &state.theta, d_out, idx_out)?;
    let gi = omega_grad(inner_loss, &state.omega, model, &state.theta, d_in, idx_in)?;
    let ga = omega_grad(inner_loss, &state.omega, model, &state.aux_theta, d_in, idx_in)?;
    g_omega.axpy(cfg.lambda, &gi);
    g_omega.axpy(-cfg.lambda, &ga);

    let mut g_theta = g_out_theta;
    g_theta.axpy(cfg.lambda, &g_in_theta);

    let grad_norm = (g_theta.dot(&g_theta) + g_omega.dot(&g_omega)).sqrt();
    state.theta.axpy(-cfg.eta_theta, &g_theta);
    state.omega.axpy(-cfg.eta_omega, &g_omega);

    let penalty_value = cfg.lambda * (in_value - aux_value);
    if !penalty_value.is_finite() {
        return Err(Error::NonFinite {
            op: "value_penalty_step",
        });
    }
    Ok(PenaltyStepInfo {
        penalty_value,
        grad_norm,
    })
}

/// One gradient-penalty step on
/// `G_out(tau(theta)) + lambda |dG_in/dtheta|^2`. The penalty's theta
/// gradient `2 lambda H g` and omega gradient `2 lambda (cross) g` both use
/// central differences along the inner gradient.
#[allow(clippy::too_many_arguments)]
pub fn gradient_penalty_step(
    inner_loss: &PointwiseLoss,
    outer_loss: &PointwiseLoss,
    state: &mut PenaltyState,
    model: &dyn Model,
    d_in: &Dataset,
    idx_in: &[usize],
    d_out: &Dataset,
    idx_out: &[usize],
    cfg: &PenaltyConfig,
) -> Result<PenaltyStepInfo> {
    let (_, g_in) = empirical_inner_loss(
        inner_loss,
        &state.omega,
        model,
        &state.theta,
        d_in,
        idx_in,
        cfg.r_in,
    )?;
    let penalty_value = cfg.lambda * g_in.dot(&g_in);

    let mut g_theta = theta_grad_outer(outer_loss, &state.omega, model, &state.theta, d_out, idx_out)?;
    let mut g_omega = omega_grad(outer_loss, &state.omega, model, &state.theta, d_out, idx_out)?;

    let nu = g_in.norm2();
    if cfg.lambda > 0.0 && nu > 0.0 {
        let eps = 1e-4 * (1.0 + state.theta.max_abs());
        let scale = eps / nu;
        let mut tp = state.theta.clone();
        tp.axpy(scale, &g_in);
        let mut tm = state.theta.clone();
        tm.axpy(-scale, &g_in);

        // theta part: 2 lambda H g via differenced inner gradients
        let (_, gp) = empirical_inner_loss(inner_loss, &state.omega, model, &tp, d_in, idx_in, cfg.r_in)?;
        let (_, gm) = empirical_inner_loss(inner_loss, &state.omega, model, &tm, d_in, idx_in, cfg.r_in)?;
        for ((g, p), q) in g_theta
            .as_mut_slice()
            .iter_mut()
            .zip(gp.as_slice())
            .zip(gm.as_slice())
        {
            *g += 2.0 * cfg.lambda * nu * (p - q) / (2.0 * eps);
        }

        // omega part: 2 lambda (d2 G_in / domega dtheta) g
        let op = omega_grad(inner_loss, &state.omega, model, &tp, d_in, idx_in)?;
        let om = omega_grad(inner_loss, &state.omega, model, &tm, d_in, idx_in)?;
        for ((g, p), q) in g_omega
            .as_mut_slice()
            .iter_mut()
            .zip(op.as_slice())
            .zip(om.as_slice())
        {
            *g += 2.0 * cfg.lambda * nu * (p - q) / (2.0 * eps);
        }
    }

    let grad_norm = (g_theta.dot(&g_theta) + g_omega.dot(&g_omega)).sqrt();
    state.theta.axpy(-cfg.eta_theta, &g_theta);
    state.omega.axpy(-cfg.eta_omega, &g_omega);
    if !penalty_value.is_finite() {
        return Err(Error::NonFinite {
            op: "gradient_penalty_step",
        });
    }
    Ok(PenaltyStepInfo {
        penalty_value,
        grad_norm,
    })
}

/// One maximum-likelihood model step: gradient descent on the mean squared
/// prediction error of `(r_omega(x), s_omega(x))` against the observed
/// `(r', one-hot(s'))`. Returns the loss before the step.
pub fn mle_model_step(
    omega: &mut ParamVector,
    model: &dyn crate::models::OuterMap,
    data: &Dataset,
    idx: &[usize],
    eta: f64,
) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::InvalidArg {
            op: "mle_model_step",
            reason: "empty batch".into(),
        });
    }
    let n_out = model.out_dim();
    let n = idx.len() as f64;
    let mut value = 0.0;
    let mut grad = ParamVector::zeros(omega.len());
    for &i in idx {
        let (reward, next_state) = data.label(i).transition("mle_model_step")?;
        let pred = model.forward(omega, data.x(i))?;
        let mut target = vec![0.0; n_out];
        target[0] = reward;
        if 1 + next_state >= n_out {
            return Err(Error::Dim {
                op: "mle_model_step",
                expected: format!("next state < {}", n_out - 1),
                got: format!("{next_state}"),
            });
        }
        target[1 + next_state] = 1.0;
        let diff: Vec<f64> = pred.iter().zip(&target).map(|(p, t)| p - t).collect();
        value += crate::numkit::dot(&diff, &diff) / n;
        let cot: Vec<f64> = diff.iter().map(|d| 2.0 * d / n).collect();
        grad.axpy(1.0, &model.vjp_params(omega, data.x(i), &cot)?);
    }
    omega.axpy(-eta, &grad);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            op: "mle_model_step",
        });
    }
    Ok(value)
}

/// MLE baseline loop for the MDP task: alternate one model step with one
/// Q-function Bellman step against the learned model (lagged table
/// refreshed like the main loop). Returns the final model parameters and
/// the Q-table.
pub fn mle_run(
    problem: &crate::funcid::BilevelProblem,
    omega0: ParamVector,
    cfg: &OptimConfig,
    eta_model: f64,
    seed: u64,
) -> Result<(ParamVector, ParamVector, Vec<crate::funcid::IterRecord>)> {
    use crate::funcid::{full_indices, sample_indices, with_target};
    use crate::losses::TargetTable;
    use std::sync::Arc;

    let refresh = problem.target_refresh.as_ref().ok_or(Error::InvalidArg {
        op: "mle_run",
        reason: "the MLE baseline is defined for the MDP problem".into(),
    })?;
    let mut rng = Rng::with_stream(seed, 0x4d4c4552); // stream tag: mle run
    let inner = problem.inner_model.as_model();
    let mut omega = omega0;
    let mut theta = inner.init_params(&mut rng);
    let mut qbar = refresh.init.clone();
    let mut inner_loss = with_target(&problem.inner_loss, Arc::new(TargetTable::new(qbar.clone())));
    let mut records = Vec::with_capacity(cfg.n_outer);

    for it in 0..cfg.n_outer {
        let idx = if cfg.full_batch {
            full_indices(problem.d_in.len())
        } else {
            sample_indices(&mut rng, problem.d_in.len(), cfg.batch_in)
        };
        let model_loss = mle_model_step(&mut omega, problem.outer_map.as_ref(), &problem.d_in, &idx, eta_model)?;
        let (q_loss, g_theta) =
            empirical_inner_loss(&inner_loss, &omega, inner, &theta, &problem.d_in, &idx, cfg.r_in)?;
        theta.axpy(-cfg.eta_in, &g_theta);

        let current = refresh.table_of(inner, &theta)?;
        for (qv, cv) in qbar.data_mut().iter_mut().zip(current.data()) {
            *qv = (1.0 - cfg.target_ema) * *qv + cfg.target_ema * cv;
        }
        inner_loss = with_target(&inner_loss, Arc::new(TargetTable::new(qbar.clone())));

        records.push(crate::funcid::IterRecord {
            iter: it,
            outer_loss: model_loss,
            inner_loss: q_loss,
            adjoint_loss: None,
            grad_norm: g_theta.norm2(),
            grad_bias: None,
            hvp_dim: 0,
            inner_steps: 1,
            adjoint_steps: 0,
            wall_ms: None,
            eval_metric: None,
        });
    }
    Ok((omega, theta, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcid::{full_indices, ModelKind};
    use crate::models::{Activation, FeatureMap, LinearModel, Mlp, MlpSpec};
    use crate::numkit::rel_err;
    use crate::tasks::quad::{QuadConfig, QuadInstance};

    #[test]
    fn aid_with_zero_outer_theta_grad_is_explicit_only() {
        // outer loss independent of the inner model output is impossible in
        // this toolkit, so build the degenerate case directly: theta at the
        // unregularized optimum of a realizable instance makes dG_out/dtheta
        // the only driver; instead check u* = 0 when the outer batch is
        // fit perfectly (zero residuals => zero outer theta-gradient).
        let inst = QuadInstance::generate(
            QuadConfig {
                sigma_o: 0.0,
                ..QuadConfig::realizable()
            },
            41,
        )
        .unwrap();
        let problem = inst.problem();
        // omega = true W: the inner fit reproduces o exactly
        let omega = ParamVector::from_vec(inst.w_true.data().to_vec());
        let idx = full_indices(inst.data.len());
        let lm = problem.inner_model.as_linear().unwrap();
        let theta = crate::oracle::exact_inner_solve(&problem.inner_loss, &omega, lm, &inst.data, 0.0)
            .unwrap();
        let out = aid_total_grad(
            &problem.inner_loss,
            &problem.outer_loss,
            &omega,
            &problem.inner_model,
            &theta,
            &inst.data,
            &idx,
            &inst.data,
            &idx,
            0.0,
            &AidConfig {
                hvp_mode: HvpMode::ExactLinear,
                ..AidConfig::default()
            },
        )
        .unwrap();
        assert!(!out.residual_flag);
        assert!(out.grad.norm2() < 1e-8, "gradient {}", out.grad.norm2());
        assert_eq!(out.meter.hvp_dim, theta.len());
    }

    #[test]
    fn aid_matches_the_oracle_gradient_on_the_quad_instance() {
        let inst = QuadInstance::generate(QuadConfig::well_conditioned(), 43).unwrap();
        let problem = inst.problem();
        let mut rng = Rng::new(44);
        let omega = inst.random_omega(&mut rng);
        let lm = problem.inner_model.as_linear().unwrap();
        let theta = crate::oracle::exact_inner_solve(
            &problem.inner_loss,
            &omega,
            lm,
            &inst.data,
            inst.cfg.r_in,
        )
        .unwrap();
        let idx = full_indices(inst.data.len());
        for hvp_mode in [HvpMode::ExactLinear, HvpMode::FiniteDifference { eps_scale: 1e-4 }] {
            let out = aid_total_grad(
                &problem.inner_loss,
                &problem.outer_loss,
                &omega,
                &problem.inner_model,
                &theta,
                &inst.data,
                &idx,
                &inst.data,
                &idx,
                inst.cfg.r_in,
                &AidConfig {
                    hvp_mode,
                    ..AidConfig::default()
                },
            )
            .unwrap();
            assert!(!out.residual_flag);
            let oracle = inst.oracle_grad(&omega, 1e-5).unwrap();
            let err = rel_err(out.grad.as_slice(), &oracle);
            assert!(err < 1e-5, "{hvp_mode:?} rel err {err}");
        }
    }

    #[test]
    fn aid_solver_variants_agree_on_well_conditioned_systems() {
        let inst = QuadInstance::generate(QuadConfig::well_conditioned(), 45).unwrap();
        let problem = inst.problem();
        let mut rng = Rng::new(46);
        let omega = inst.random_omega(&mut rng);
        let lm = problem.inner_model.as_linear().unwrap();
        let theta = crate::oracle::exact_inner_solve(
            &problem.inner_loss,
            &omega,
            lm,
            &inst.data,
            inst.cfg.r_in,
        )
        .unwrap();
        let idx = full_indices(inst.data.len());
        let run = |solver: LinearSolver, maxit: usize| {
            aid_total_grad(
                &problem.inner_loss,
                &problem.outer_loss,
                &omega,
                &problem.inner_model,
                &theta,
                &inst.data,
                &idx,
                &inst.data,
                &idx,
                inst.cfg.r_in,
                &AidConfig {
                    linear_solver: solver,
                    solver_maxit: maxit,
                    hvp_mode: HvpMode::ExactLinear,
                    ..AidConfig::default()
                },
            )
            .unwrap()
        };
        let cg = run(LinearSolver::Cg, 0);
        let gd = run(LinearSolver::Gd, 20_000);
        assert!(!cg.residual_flag && !gd.residual_flag);
        assert!(rel_err(cg.grad.as_slice(), gd.grad.as_slice()) < 1e-6);
        // the identity heuristic is biased: flag set, answer finite
        let id = run(LinearSolver::IdentityHeuristic, 0);
        assert!(id.residual_flag);
        assert!(id.grad.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn hessian_distortion_vanishes_for_linear_models() {
        let inst = QuadInstance::generate(QuadConfig::well_conditioned(), 47).unwrap();
        let problem = inst.problem();
        let mut rng = Rng::new(48);
        let omega = inst.random_omega(&mut rng);
        let lm = LinearModel::new(FeatureMap::Raw, 3, 2);
        let theta = ParamVector::from_vec(rng.normal_vec(6));
        let idx: Vec<usize> = (0..40).collect();
        let (_, _, distortion) = parametric_hessian_check(
            &problem.inner_loss,
            &omega,
            &lm,
            &theta,
            &inst.data,
            &idx,
            1e-4,
        )
        .unwrap();
        assert!(distortion < 1e-6, "linear distortion {distortion}");
    }

    #[test]
    fn hessian_distortion_is_nonzero_for_a_suboptimal_mlp() {
        let inst = QuadInstance::generate(QuadConfig::well_conditioned(), 49).unwrap();
        let problem = inst.problem();
        let mut rng = Rng::new(50);
        let omega = inst.random_omega(&mut rng);
        // tiny tanh net, p = 4*3+4 + 2*4+2 = 26 <= 30
        let mlp = Mlp::new(MlpSpec::new(vec![3, 4, 2], Activation::Tanh).unwrap());
        let theta = Model::init_params(&mlp, &mut rng);
        let idx: Vec<usize> = (0..40).collect();
        let (_, _, distortion) = parametric_hessian_check(
            &problem.inner_loss,
            &omega,
            &mlp,
            &theta,
            &inst.data,
            &idx,
            0.0,
        )
        .unwrap();
        assert!(distortion > 1e-3, "mlp distortion {distortion}");
    }

    #[test]
    fn value_penalty_with_zero_lambda_is_pure_outer_descent() {
        let inst = QuadInstance::generate(QuadConfig::well_conditioned(), 51).unwrap();
        let problem = inst.problem();
        let mut rng = Rng::new(52);
        let omega = inst.random_omega(&mut rng);
        let lm = problem.inner_model.as_linear().unwrap();
        let theta = ParamVector::from_vec(rng.normal_vec(lm.param_dim()));
        let idx = full_indices(inst.data.len());
        let cfg = PenaltyConfig {
            lambda: 0.0,
            m_aux: 0,
            ..PenaltyConfig::default()
        };
        let mut state = PenaltyState {
            omega: omega.clone(),
            theta: theta.clone(),
            aux_theta: theta.clone(),
        };
        value_penalty_step(
            &problem.inner_loss,
            &problem.outer_loss,
            &mut state,
            lm,
            &inst.data,
            &idx,
            &inst.data,
            &idx,
            &cfg,
        )
        .unwrap();
        // omega untouched (outer loss has no explicit omega term)
        assert_eq!(state.omega.as_slice(), omega.as_slice());
        // theta moved along the outer gradient only
        let g_out = theta_grad_outer(&problem.outer_loss, &omega, lm, &theta, &inst.data, &idx)
            .unwrap();
        let mut expect = theta.clone();
        expect.axpy(-cfg.eta_theta, &g_out);
        assert!(rel_err(state.theta.as_slice(), expect.as_slice()) < 1e-12);
    }

    #[test]
    fn gradient_penalty_matches_independent_norm_computation() {
        let inst = QuadInstance::generate(QuadConfig::well_conditioned(), 53).unwrap();
        let problem = inst.problem();
        let mut rng = Rng::new(54);
        let omega = inst.random_omega(&mut rng);
        let lm = problem.inner_model.as_linear().unwrap();
        let theta = ParamVector::from_vec(rng.normal_vec(lm.param_dim()));
        let idx = full_indices(inst.data.len());
        let cfg = PenaltyConfig {
            lambda: 0.3,
            ..PenaltyConfig::default()
        };
        let mut state = PenaltyState {
            omega: omega.clone(),
            theta: theta.clone(),
            aux_theta: theta.clone(),
        };
        let penalty = gradient_penalty_step(
            &problem.inner_loss,
            &problem.outer_loss,
            &mut state,
            lm,
            &inst.data,
            &idx,
            &inst.data,
            &idx,
            &cfg,
        )
        .unwrap();
        // recompute |grad|^2 by assembling the normal-equations residual
        let (_, g) = empirical_inner_loss(&problem.inner_loss, &omega, lm, &theta, &inst.data, &idx, 0.0)
            .unwrap();
        let expect = cfg.lambda * crate::numkit::dot(g.as_slice(), g.as_slice());
        assert!((penalty.penalty_value - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        // at a stationary inner point the penalty contributes nothing
        let theta_star = crate::oracle::exact_inner_solve(&problem.inner_loss, &omega, lm, &inst.data, 0.0)
            .unwrap();
        let mut st2 = PenaltyState {
            omega: omega.clone(),
            theta: theta_star.clone(),
            aux_theta: theta_star.clone(),
        };
        let mut st3 = st2.clone();
        let cfg0 = PenaltyConfig {
            lambda: 0.0,
            ..cfg.clone()
        };
        gradient_penalty_step(
            &problem.inner_loss,
            &problem.outer_loss,
            &mut st2,
            lm,
            &inst.data,
            &idx,
            &inst.data,
            &idx,
            &cfg,
        )
        .unwrap();
        gradient_penalty_step(
            &problem.inner_loss,
            &problem.outer_loss,
            &mut st3,
            lm,
            &inst.data,
            &idx,
            &inst.data,
            &idx,
            &cfg0,
        )
        .unwrap();
        assert!(rel_err(st2.theta.as_slice(), st3.theta.as_slice()) < 1e-6);
    }

    #[test]
    fn mle_step_is_zero_at_a_perfect_model() {
        use crate::models::OuterMap;
        use crate::tasks::mdp::{gen_mdp, MdpModelFull};
        let mut rng = Rng::new(55);
        let mdp = gen_mdp(&mut rng, 4, 2).unwrap();
        let buffer = mdp.replay_collect(500, &mut rng).unwrap();
        let model = MdpModelFull {
            n_states: 4,
            n_actions: 2,
        };
        let mut omega = model.params_from(&mdp);
        let before = omega.clone();
        let idx = full_indices(buffer.len());
        // rewards are deterministic and the transition head predicts P, so
        // the only residual is the one-hot sampling noise; the gradient
        // direction must still be finite and the loss positive
        let loss = mle_model_step(&mut omega, &model, &buffer, &idx, 0.0).unwrap();
        assert!(loss > 0.0 && loss.is_finite());
        assert_eq!(omega.as_slice(), before.as_slice());

        // single transition, reward head: gradient is exactly 2(r_pred - r')
        let single = mdp.replay_collect(1, &mut rng).unwrap();
        let mut w = ParamVector::zeros(model.param_dim());
        let (r_obs, _) = single.label(0).transition("test").unwrap();
        let eta = 0.5;
        mle_model_step(&mut w, &model, &single, &full_indices(1), eta).unwrap();
        let (s, a) = {
            // recover the visited pair from the one-hot input
            let x = single.x(0);
            let s = (0..4).find(|&i| x[i] == 1.0).unwrap();
            let a = (0..2).find(|&j| x[4 + j] == 1.0).unwrap();
            (s, a)
        };
        let got = w.as_slice()[s * 2 + a];
        let expect = -eta * 2.0 * (0.0 - r_obs);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn aid_reports_nonconvergence_without_erroring() {
        // a one-iteration budget with an unreachable tolerance: the solve
        // must come back flagged but finite, never as an error
        let inst = QuadInstance::generate(QuadConfig::well_conditioned(), 56).unwrap();
        let problem = inst.problem();
        let mut rng = Rng::new(57);
        let omega = inst.random_omega(&mut rng);
        let mlp = Mlp::new(MlpSpec::new(vec![3, 4, 2], Activation::Tanh).unwrap());
        let theta = Model::init_params(&mlp, &mut rng);
        let model = ModelKind::Mlp(mlp);
        let idx = full_indices(inst.data.len());
        let out = aid_total_grad(
            &problem.inner_loss,
            &problem.outer_loss,
            &omega,
            &model,
            &theta,
            &inst.data,
            &idx,
            &inst.data,
            &idx,
            0.0,
            &AidConfig {
                solver_tol: 1e-16,
                solver_maxit: 1,
                hvp_mode: HvpMode::FiniteDifference { eps_scale: 1e-4 },
                ..AidConfig::default()
            },
        )
        .unwrap();
        assert!(out.residual_flag, "expected a residual flag at maxit 1");
        assert!(out.residual_norm > 0.0);
        assert!(out.grad.as_slice().iter().all(|v| v.is_finite()));
        assert!(out.meter.hvp_count >= 1);
        assert_eq!(out.meter.hvp_dim, theta.len());
    }
}
