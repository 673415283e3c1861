//! The acceptance suite: each criterion exercises one contract of the
//! toolkit end to end and reports a structured pass/fail. Tolerances and
//! pilot-frozen constants live at the top of this file; the quick suite is
//! the subset cheap enough for a pre-merge gate.

use std::sync::Arc;

use crate::baselines::{aid_total_grad, parametric_hessian_check, AidConfig, HvpMode};
use crate::funcid::{
    adjoint_opt, closed_form_adjoint_rl, empirical_adjoint_loss, exact_linear_fit, full_indices,
    funcid_run, inner_opt, linear_adjoint_solve, sample_indices, total_grad, with_target,
    AdjointMode, AdjointPath, BilevelProblem, CostMeter, Dataset, InnerMode, ModelKind,
    OptimConfig, OptimKind, RunHooks,
};
use crate::losses::{lse, Label, PointwiseLoss, TargetTable};
use crate::models::{
    Activation, FeatureMap, LinearModel, LinearOuter, Mlp, MlpSpec, Model, OuterMap, ParamVector,
};
use crate::numkit::{norm2, rel_err, sub, Mat, Rng};
use crate::oracle::{bias_probe, exact_adjoint_solve, lambda_max, OracleReport};
use crate::tasks::iv::{self, IvInstance};
use crate::tasks::mdp::{all_pair_inputs, gen_mdp, greedy_policy, make_rl_problem, q_table_of, MdpModelFull};
use crate::tasks::quad::{QuadConfig, QuadInstance};
use crate::{Error, Result};

// ---- frozen thresholds -------------------------------------------------
// Values below marked "pilot" were measured once on the seeds written next
// to them and then frozen; the asserts guard against regressions, they are
// never re-derived at run time.

/// Criterion 1: max relative error of the assembled total gradient against
/// the differenced reduced objective (50 random outer points).
const GRAD_IDENTITY_TOL: f64 = 1e-5;
/// Criterion 2: adjoint iterate accuracy after 2000 full-batch steps.
const ADJOINT_CONV_TOL: f64 = 1e-4;
/// Criterion 3: parametric-vs-functional agreement when realizable, and
/// the minimum gap the under-complete features must open.
const PROJ_IDENTITY_TOL: f64 = 1e-6;
const PROJ_GAP_MIN: f64 = 1e-3;
/// Criterion 4: curvature distortion at an inner optimum / for linear
/// models, and the factor a suboptimal point must exceed tolerance by.
const DISTORTION_TOL_STAR: f64 = 1e-4;
const DISTORTION_TOL_LINEAR: f64 = 1e-6;
const DISTORTION_SUBOPT_FACTOR: f64 = 10.0;
/// Criterion 5/6 final-accuracy targets.
const BIAS_FINAL_TOL: f64 = 1e-5;
const STATIONARITY_TOL: f64 = 1e-6;
/// Criterion 7 (IV, n = 5000, seeds 700..710): the method must halve the
/// confounded regression's structural MSE on at least 9 of 10 seeds.
const IV_SEEDS: u64 = 10;
const IV_WINS_REQUIRED: usize = 9;
const IV_RATIO: f64 = 0.5;
/// Criterion 8: closed-form vs independently minimized per-sample adjoint.
const RL_ADJOINT_TOL: f64 = 1e-10;
/// Criterion 9: fixed-point sup-norm tolerance and required policy matches.
const RL_FIXED_POINT_TOL: f64 = 1e-3;
const RL_POLICY_SEEDS: u64 = 10;
const RL_POLICY_MATCHES_REQUIRED: usize = 8;
/// Criterion 10: minimum FuncID-vs-AID per-step HVP flop advantage.
const COST_RATIO_MIN: f64 = 10.0;
/// Criterion 11: relative tolerance of the derivative micro-checks.
const MICRO_TOL: f64 = 1e-5;

/// One acceptance criterion's outcome.
#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: usize,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl CriterionResult {
    fn new(id: usize, name: &'static str, pass: bool, detail: String) -> CriterionResult {
        CriterionResult {
            id,
            name,
            pass,
            detail,
        }
    }
}

/// Spectral norm of the quadratic inner (or adjoint) objective in its
/// parameters, via gradient differencing — both objectives are quadratic in
/// their own variable, so the difference map is the exact Hessian action.
fn quadratic_lambda_max(mut grad: impl FnMut(&[f64]) -> Vec<f64>, dim: usize, tag: u64) -> f64 {
    let g0 = grad(&vec![0.0; dim]);
    lambda_max(
        |v| {
            let gv = grad(v);
            sub(&gv, &g0)
        },
        dim,
        40,
        tag,
    )
}

fn inner_grad_fn<'a>(
    loss: &'a PointwiseLoss,
    omega: &'a ParamVector,
    model: &'a dyn Model,
    data: &'a Dataset,
    idx: &'a [usize],
    r_in: f64,
) -> impl FnMut(&[f64]) -> Vec<f64> + 'a {
    move |theta: &[f64]| {
        let tv = ParamVector::from_vec(theta.to_vec());
        let (_, g) = crate::funcid::empirical_inner_loss(loss, omega, model, &tv, data, idx, r_in)
            .expect("inner gradient failed");
        g.into_vec()
    }
}

/// The exactly-solved total gradient on a quad instance (shared by
/// criterion 1 and the run-summary diagnostics).
pub fn quad_exact_total_grad(inst: &QuadInstance, omega: &ParamVector) -> Result<Vec<f64>> {
    let problem = inst.problem();
    let lm = problem.inner_model.as_linear().expect("quad inner is linear");
    let idx = full_indices(inst.data.len());
    let theta = exact_linear_fit(&problem.inner_loss, omega, lm, &inst.data, &idx, inst.cfg.r_in)?;
    let mut meter = CostMeter::default();
    let xi = linear_adjoint_solve(
        &problem.inner_loss,
        &problem.outer_loss,
        omega,
        lm,
        &theta,
        lm,
        &inst.data,
        &idx,
        &inst.data,
        &idx,
        inst.cfg.r_adj,
        &mut meter,
    )?;
    let tg = total_grad(
        &problem.inner_loss,
        &problem.outer_loss,
        omega,
        lm,
        &theta,
        &AdjointPath::Model { model: lm, xi: &xi },
        &inst.data,
        &idx,
        &inst.data,
        &idx,
    )?;
    Ok(tg.grad.into_vec())
}

/// Gradient-identity report at one outer point (also attached to quad run
/// summaries).
pub fn quad_identity_report(
    inst: &QuadInstance,
    omega: &ParamVector,
    tol: f64,
) -> Result<OracleReport> {
    let algo = quad_exact_total_grad(inst, omega)?;
    let oracle = inst.oracle_grad(omega, crate::oracle::FD_EPS_DEFAULT)?;
    Ok(OracleReport::vectors("total_gradient", &algo, &oracle, tol))
}

/// Criterion 1: with exact inner and adjoint solves and matched ridges, the
/// assembled total gradient matches brute-force differencing of the reduced
/// objective at every probed outer point.
pub fn criterion_1() -> Result<CriterionResult> {
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let inst = QuadInstance::generate(QuadConfig::well_conditioned(), 100 + seed)?;
        let mut rng = Rng::with_stream(seed, 0x43484b31); // "CHK1"
        for _ in 0..10 {
            let omega = inst.random_omega(&mut rng);
            let report = quad_identity_report(&inst, &omega, GRAD_IDENTITY_TOL)?;
            worst = worst.max(report.rel_error);
        }
    }
    Ok(CriterionResult::new(
        1,
        "gradient identity (exact solves vs differenced objective)",
        worst <= GRAD_IDENTITY_TOL,
        format!("max rel err {worst:.2e} over 50 outer points (tol {GRAD_IDENTITY_TOL:.0e})"),
    ))
}

/// Criterion 2: full-batch gradient descent on the adjoint quadratic
/// reaches the closed-form adjoint.
pub fn criterion_2() -> Result<CriterionResult> {
    let inst = QuadInstance::generate(QuadConfig::well_conditioned(), 120)?;
    let problem = inst.problem();
    let lm = problem.inner_model.as_linear().expect("linear");
    let mut rng = Rng::with_stream(2, 0x43484b32); // "CHK2"
    let omega = inst.random_omega(&mut rng);
    let idx = full_indices(inst.data.len());
    let theta = exact_linear_fit(&problem.inner_loss, &omega, lm, &inst.data, &idx, inst.cfg.r_in)?;
    let xi_star = exact_adjoint_solve(
        &problem.inner_loss,
        &problem.outer_loss,
        &omega,
        lm,
        &theta,
        lm,
        &inst.data,
        &inst.data,
        inst.cfg.r_adj,
    )?;

    // spectral bound of the adjoint quadratic, then a plain-GD run under it
    let mut meter = CostMeter::default();
    let dim = lm.param_dim();
    let lam = {
        let mut grad = |xi: &[f64]| {
            let xv = ParamVector::from_vec(xi.to_vec());
            let (_, g) = empirical_adjoint_loss(
                &problem.inner_loss,
                &problem.outer_loss,
                &omega,
                lm,
                &theta,
                lm,
                &xv,
                &inst.data,
                &idx,
                &inst.data,
                &idx,
                inst.cfg.r_adj,
                &mut meter,
            )
            .expect("adjoint gradient failed");
            g.into_vec()
        };
        quadratic_lambda_max(&mut grad, dim, 0x43484b32)
    };
    let cfg = OptimConfig {
        k_adjoint: 2000,
        eta_adj: 1.0 / lam,
        full_batch: true,
        adjoint_optimizer: OptimKind::Sgd,
        r_adj: inst.cfg.r_adj,
        ..OptimConfig::default()
    };
    let out = adjoint_opt(
        &problem.inner_loss,
        &problem.outer_loss,
        &omega,
        lm,
        &theta,
        &problem.adjoint_model,
        ParamVector::zeros(dim),
        &inst.data,
        &inst.data,
        &cfg,
        &mut rng,
        &mut meter,
    )?;
    let err = rel_err(out.params.as_slice(), xi_star.as_slice());
    Ok(CriterionResult::new(
        2,
        "adjoint convergence (iterative vs closed form)",
        err <= ADJOINT_CONV_TOL,
        format!(
            "rel err {err:.2e} after {} steps at eta 1/{lam:.3} (tol {ADJOINT_CONV_TOL:.0e})",
            cfg.k_adjoint
        ),
    ))
}

/// The parametric (AID) and functional (per-sample adjoint) gradients on a
/// quad preset, both at the exactly solved inner point.
fn parametric_vs_functional(preset: QuadConfig, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let inst = QuadInstance::generate(preset, seed)?;
    let problem = inst.problem();
    let lm = problem.inner_model.as_linear().expect("linear");
    let mut rng = Rng::with_stream(seed, 0x43484b33); // "CHK3"
    let omega = inst.random_omega(&mut rng);
    let idx = full_indices(inst.data.len());
    let theta = exact_linear_fit(&problem.inner_loss, &omega, lm, &inst.data, &idx, inst.cfg.r_in)?;

    let mut meter = CostMeter::default();
    let values = crate::funcid::per_sample_adjoint(
        &problem.inner_loss,
        &problem.outer_loss,
        &omega,
        lm,
        &theta,
        &inst.data,
        &idx,
        &mut meter,
    )?;
    let functional = total_grad(
        &problem.inner_loss,
        &problem.outer_loss,
        &omega,
        lm,
        &theta,
        &AdjointPath::PerSample { values: &values },
        &inst.data,
        &idx,
        &inst.data,
        &idx,
    )?;

    let aid = aid_total_grad(
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
            hvp_mode: HvpMode::ExactLinear,
            ..AidConfig::default()
        },
    )?;
    Ok((aid.grad.into_vec(), functional.grad.into_vec()))
}

/// Criterion 3: in the realizable linear instance the parametric gradient
/// equals the unrestricted functional one; under-complete features open a
/// measurable gap.
pub fn criterion_3() -> Result<CriterionResult> {
    let (aid, functional) = parametric_vs_functional(QuadConfig::realizable(), 130)?;
    let realizable_err = rel_err(&aid, &functional);
    let (aid_u, functional_u) = parametric_vs_functional(QuadConfig::under_complete(), 131)?;
    let gap = rel_err(&aid_u, &functional_u);
    let pass = realizable_err <= PROJ_IDENTITY_TOL && gap > PROJ_GAP_MIN;
    Ok(CriterionResult::new(
        3,
        "projection identity (parametric vs functional gradient)",
        pass,
        format!(
            "realizable rel err {realizable_err:.2e} (tol {PROJ_IDENTITY_TOL:.0e}); \
             under-complete gap {gap:.2e} (must exceed {PROJ_GAP_MIN:.0e})"
        ),
    ))
}

/// Fixture for criterion 4: a tanh network fitting targets generated by its
/// own pinned parameters, so those parameters are an exact inner optimum
/// with zero residuals.
fn distortion_fixture() -> Result<(PointwiseLoss, ParamVector, Mlp, ParamVector, Dataset)> {
    let mut rng = Rng::with_stream(4, 0x43484b34); // "CHK4"
    let n = 60;
    let mut xs = Mat::zeros(n, 2);
    for i in 0..n {
        let row = xs.row_mut(i);
        row[0] = rng.uniform_in(-1.0, 1.0);
        row[1] = rng.uniform_in(-1.0, 1.0);
    }
    let mlp = Mlp::new(MlpSpec::new(vec![2, 4, 1], Activation::Tanh)?);
    let theta_star = Model::init_params(&mlp, &mut rng);
    let targets = mlp.forward(&theta_star, &xs)?;
    let labels: Vec<Label> = (0..n)
        .map(|i| Label::Iv {
            treatment: vec![targets.get(i, 0)],
            outcome: vec![0.0],
        })
        .collect();
    let data = Dataset::new(xs, labels)?;
    let outer: Arc<dyn OuterMap> = Arc::new(LinearOuter {
        in_dim: 1,
        out_dim: 1,
    });
    let loss = PointwiseLoss::SquaredInnerToModel { model: outer };
    let omega = ParamVector::from_vec(vec![1.0]);
    Ok((loss, omega, mlp, theta_star, data))
}

/// Criterion 4: the gap between the finite-difference Hessian and its
/// structural (Gauss–Newton) part vanishes at an inner optimum and for
/// linear models, and is an order of magnitude above tolerance at a
/// suboptimal nonlinear point.
pub fn criterion_4() -> Result<CriterionResult> {
    let (loss, omega, mlp, theta_star, data) = distortion_fixture()?;
    let idx = full_indices(data.len());
    let (_, _, d_star) =
        parametric_hessian_check(&loss, &omega, &mlp, &theta_star, &data, &idx, 0.0)?;

    let mut rng = Rng::with_stream(40, 0x43484b34);
    let lin = LinearModel::new(FeatureMap::Raw, 2, 1);
    let theta_lin = Model::init_params(&lin, &mut rng);
    let (_, _, d_lin) = parametric_hessian_check(&loss, &omega, &lin, &theta_lin, &data, &idx, 0.0)?;

    let mut theta_off = theta_star.clone();
    let bump = ParamVector::from_vec(rng.normal_vec(theta_off.len()));
    theta_off.axpy(0.5, &bump);
    let (_, _, d_off) = parametric_hessian_check(&loss, &omega, &mlp, &theta_off, &data, &idx, 0.0)?;

    let pass = d_star <= DISTORTION_TOL_STAR
        && d_lin <= DISTORTION_TOL_LINEAR
        && d_off > DISTORTION_SUBOPT_FACTOR * DISTORTION_TOL_STAR;
    Ok(CriterionResult::new(
        4,
        "curvature distortion (zero at optimum/linear, large off-optimum)",
        pass,
        format!(
            "at optimum {d_star:.2e} (tol {DISTORTION_TOL_STAR:.0e}); linear {d_lin:.2e} \
             (tol {DISTORTION_TOL_LINEAR:.0e}); suboptimal {d_off:.2e} \
             (required > {:.0e})",
            DISTORTION_SUBOPT_FACTOR * DISTORTION_TOL_STAR
        ),
    ))
}

/// Criterion 5: the total-gradient bias decreases with the inner/adjoint
/// step budget and collapses at exact solves. Budgets use the same
/// fixed outer point; seeds vary the inner/adjoint initializations.
pub fn criterion_5() -> Result<CriterionResult> {
    let inst = QuadInstance::generate(QuadConfig::well_conditioned(), 150)?;
    let problem = inst.problem();
    let lm = problem.inner_model.as_linear().expect("linear");
    let dim = lm.param_dim();
    let mut rng = Rng::with_stream(5, 0x43484b35); // "CHK5"
    let omega = inst.random_omega(&mut rng);
    let idx = full_indices(inst.data.len());
    let oracle = inst.oracle_grad(&omega, crate::oracle::FD_EPS_DEFAULT)?;

    // spectral step sizes for both quadratics
    let eta_in = {
        let mut grad = inner_grad_fn(&problem.inner_loss, &omega, lm, &inst.data, &idx, inst.cfg.r_in);
        1.0 / quadratic_lambda_max(&mut grad, dim, 0x43484b35)
    };
    let theta_star = exact_linear_fit(&problem.inner_loss, &omega, lm, &inst.data, &idx, inst.cfg.r_in)?;
    let eta_adj = {
        let mut meter = CostMeter::default();
        let mut grad = |xi: &[f64]| {
            let xv = ParamVector::from_vec(xi.to_vec());
            let (_, g) = empirical_adjoint_loss(
                &problem.inner_loss,
                &problem.outer_loss,
                &omega,
                lm,
                &theta_star,
                lm,
                &xv,
                &inst.data,
                &idx,
                &inst.data,
                &idx,
                inst.cfg.r_adj,
                &mut meter,
            )
            .expect("adjoint gradient failed");
            g.into_vec()
        };
        1.0 / quadratic_lambda_max(&mut grad, dim, 0x43484b36)
    };

    let budgets = [1usize, 5, 20, usize::MAX];
    let seeds: Vec<u64> = (0..10).collect();
    let estimate = |budget: usize, seed: u64| -> Result<Vec<f64>> {
        let (theta, xi) = if budget == usize::MAX {
            let theta = exact_linear_fit(&problem.inner_loss, &omega, lm, &inst.data, &idx, inst.cfg.r_in)?;
            let mut meter = CostMeter::default();
            let xi = linear_adjoint_solve(
                &problem.inner_loss,
                &problem.outer_loss,
                &omega,
                lm,
                &theta,
                lm,
                &inst.data,
                &idx,
                &inst.data,
                &idx,
                inst.cfg.r_adj,
                &mut meter,
            )?;
            (theta, xi)
        } else {
            let mut srng = Rng::with_stream(seed, 0x43484b37);
            let cfg = OptimConfig {
                m_inner: budget,
                k_adjoint: budget,
                eta_in,
                eta_adj,
                full_batch: true,
                inner_optimizer: OptimKind::Sgd,
                adjoint_optimizer: OptimKind::Sgd,
                r_in: inst.cfg.r_in,
                r_adj: inst.cfg.r_adj,
                inner_mode: InnerMode::Iterative,
                ..OptimConfig::default()
            };
            let theta0 = Model::init_params(lm, &mut srng);
            let inner = inner_opt(
                &problem.inner_loss,
                &omega,
                &problem.inner_model,
                theta0,
                &inst.data,
                &cfg,
                &mut srng,
            )?;
            let xi0 = Model::init_params(lm, &mut srng);
            let mut meter = CostMeter::default();
            let adj = adjoint_opt(
                &problem.inner_loss,
                &problem.outer_loss,
                &omega,
                lm,
                &inner.params,
                &problem.adjoint_model,
                xi0,
                &inst.data,
                &inst.data,
                &cfg,
                &mut srng,
                &mut meter,
            )?;
            (inner.params, adj.params)
        };
        let tg = total_grad(
            &problem.inner_loss,
            &problem.outer_loss,
            &omega,
            lm,
            &theta,
            &AdjointPath::Model { model: lm, xi: &xi },
            &inst.data,
            &idx,
            &inst.data,
            &idx,
        )?;
        Ok(tg.grad.into_vec())
    };
    let medians = bias_probe(&budgets, &seeds, estimate, &oracle)?;
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    let final_ok = *medians.last().expect("non-empty") <= BIAS_FINAL_TOL;
    Ok(CriterionResult::new(
        5,
        "bias decreases with inner/adjoint budget",
        monotone && final_ok,
        format!(
            "median bias by budget (1,5,20,exact): [{}]; final tol {BIAS_FINAL_TOL:.0e}",
            medians
                .iter()
                .map(|m| format!("{m:.3e}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    ))
}

/// Criterion 6: the outer loop with exact solves and a constant spectral
/// step drives the oracle gradient below tolerance within 500 iterations.
pub fn criterion_6() -> Result<CriterionResult> {
    let inst = QuadInstance::generate(QuadConfig::well_conditioned(), 160)?;
    let mut rng = Rng::with_stream(6, 0x43484b36);
    let omega0 = inst.random_omega(&mut rng);
    let d = omega0.len();

    // the reduced objective is quadratic in omega, so differencing its
    // oracle gradient gives the exact outer Hessian action
    let oracle_at = |w: &[f64]| -> Vec<f64> {
        inst.oracle_grad(&ParamVector::from_vec(w.to_vec()), crate::oracle::FD_EPS_DEFAULT)
            .expect("oracle gradient failed")
    };
    let g0 = oracle_at(omega0.as_slice());
    let eps = 1e-2;
    let lam = lambda_max(
        |v| {
            let mut wp = omega0.as_slice().to_vec();
            crate::numkit::axpy(&mut wp, eps, v);
            let mut wm = omega0.as_slice().to_vec();
            crate::numkit::axpy(&mut wm, -eps, v);
            let gp = oracle_at(&wp);
            let gm = oracle_at(&wm);
            gp.iter().zip(&gm).map(|(p, m)| (p - m) / (2.0 * eps)).collect()
        },
        d,
        40,
        0x43484b36,
    );
    let _ = g0;

    let problem = inst.problem();
    let cfg = OptimConfig {
        n_outer: 500,
        eta_out: 0.9 / lam,
        full_batch: true,
        inner_mode: InnerMode::Exact,
        adjoint_mode: AdjointMode::Exact,
        r_in: inst.cfg.r_in,
        r_adj: inst.cfg.r_adj,
        outer_optimizer: OptimKind::Sgd,
        ..OptimConfig::default()
    };
    let eval = |st: &crate::funcid::IterState| -> f64 {
        match inst.oracle_grad(st.omega, crate::oracle::FD_EPS_DEFAULT) {
            Ok(g) => norm2(&g),
            Err(_) => f64::NAN,
        }
    };
    let hooks = RunHooks {
        oracle_grad: None,
        eval_metric: Some(&eval),
    };
    let out = funcid_run(&problem, omega0, &cfg, 6, &hooks)?;
    let best = out
        .records
        .iter()
        .filter_map(|r| r.eval_metric)
        .fold(f64::INFINITY, f64::min);
    Ok(CriterionResult::new(
        6,
        "outer convergence to stationarity at constant step",
        best <= STATIONARITY_TOL,
        format!(
            "min oracle grad norm {best:.2e} within {} iterations at eta {:.3e} (tol {STATIONARITY_TOL:.0e})",
            cfg.n_outer, cfg.eta_out
        ),
    ))
}

/// One IV seed: train the linear-inner method, then score its structural
/// MSE against the confounded direct regression on the same data.
fn iv_seed_mse(seed: u64) -> Result<(f64, f64)> {
    let inst = IvInstance::generate(iv::IV_D_T_DEFAULT, seed)?;
    let mut rng = Rng::with_stream(seed, 0x43484b37); // "CHK7"
    let data = iv::shared(inst.gen_data(5000, &mut rng)?);
    let outer_map: Arc<dyn OuterMap> = Arc::new(crate::models::FeatureLinearOuter {
        features: iv::outer_features(),
        in_dim: inst.d_t,
        out_dim: 1,
    });
    let inner_lm = LinearModel::new(FeatureMap::Poly2, iv::IV_INSTRUMENTS, 1);
    let problem = BilevelProblem {
        outer_map: outer_map.clone(),
        inner_loss: PointwiseLoss::SquaredInnerToModel {
            model: outer_map.clone(),
        },
        outer_loss: PointwiseLoss::SquaredOuter { d_v: 1 },
        d_in: data.clone(),
        d_out: data.clone(),
        inner_model: ModelKind::Linear(inner_lm.clone()),
        adjoint_model: ModelKind::Linear(inner_lm),
        target_refresh: None,
    };
    let cfg = OptimConfig {
        n_outer: 200,
        eta_out: 0.05,
        full_batch: true,
        inner_mode: InnerMode::Exact,
        adjoint_mode: AdjointMode::Exact,
        r_in: 1e-4,
        r_adj: 1e-4,
        outer_optimizer: OptimKind::Adam,
        ..OptimConfig::default()
    };
    let omega0 = ParamVector::zeros(outer_map.param_dim());
    let out = funcid_run(&problem, omega0, &cfg, seed, &RunHooks::default())?;

    let mse_of = |w: &ParamVector| -> Result<f64> {
        let f = |t: &[f64]| outer_map.forward(w, t).map(|v| v[0]).unwrap_or(f64::NAN);
        let mut eval_rng = Rng::with_stream(0, 0x43484b38);
        inst.structural_mse(&f, 2000, &mut eval_rng)
    };
    let funcid_mse = mse_of(&out.omega)?;
    let direct = iv::direct_regression(&data, &iv::outer_features(), 1e-3)?;
    let direct_mse = mse_of(&direct)?;
    Ok((funcid_mse, direct_mse))
}

/// Criterion 7: on the synthetic confounded-treatment task the bilevel
/// method at least halves the direct regression's structural MSE on 9 of
/// 10 seeds.
pub fn criterion_7() -> Result<CriterionResult> {
    let mut wins = 0usize;
    let mut rows = Vec::new();
    for s in 0..IV_SEEDS {
        let (funcid_mse, direct_mse) = iv_seed_mse(700 + s)?;
        if funcid_mse <= IV_RATIO * direct_mse {
            wins += 1;
        }
        rows.push(format!("{funcid_mse:.3} vs {direct_mse:.3}"));
    }
    Ok(CriterionResult::new(
        7,
        "instrumented regression beats direct regression",
        wins >= IV_WINS_REQUIRED,
        format!(
            "{wins}/{IV_SEEDS} seeds at ratio {IV_RATIO} (need {IV_WINS_REQUIRED}); \
             per-seed structural MSE [{}]",
            rows.join(", ")
        ),
    ))
}

/// Independent route for the per-sample adjoint: gradient descent on the
/// separable quadratic from a zero start (used by criterion 8 and the RL
/// run-summary diagnostic).
fn per_sample_adjoint_by_gd(
    inner_loss: &PointwiseLoss,
    outer_loss: &PointwiseLoss,
    omega: &ParamVector,
    inner_model: &dyn Model,
    theta: &ParamVector,
    data: &Dataset,
    idx: &[usize],
) -> Result<Mat> {
    let d_v = inner_loss.d_v();
    let n = idx.len();
    let mut h = vec![0.0; n];
    let mut dmat = Mat::zeros(n, d_v);
    for (k, &i) in idx.iter().enumerate() {
        let x = Mat::from_vec(1, data.xs.cols(), data.x(i).to_vec())?;
        let v = inner_model.forward(theta, &x)?;
        let ib = inner_loss.eval_bundle(omega, v.row(0), data.x(i), data.label(i))?;
        let ob = outer_loss.eval_bundle(omega, v.row(0), data.x(i), data.label(i))?;
        h[k] = ib.hess_scale;
        dmat.row_mut(k).copy_from_slice(&ob.grad_v);
    }
    let h_max = h.iter().fold(0.0f64, |m, &v| m.max(v));
    if h_max <= 0.0 {
        return Err(Error::InvalidArg {
            op: "per_sample_adjoint_by_gd",
            reason: "inner loss has no curvature".into(),
        });
    }
    // objective (1/2n) sum h_k a_k^2 + (1/n) sum <d_k, a_k>; per-sample
    // gradient (h_k a_k + d_k)/n, so step n * 0.9/h_max contracts every mode
    let eta = 0.9 / h_max;
    let mut a = Mat::zeros(n, d_v);
    for _ in 0..600 {
        for (k, &hk) in h.iter().enumerate() {
            let row = a.row_mut(k);
            for (av, dv) in row.iter_mut().zip(dmat.row(k)) {
                *av -= eta * (hk * *av + dv);
            }
        }
    }
    Ok(a)
}

/// RL adjoint agreement report (criterion 8 core; also attached to rl_toy
/// run summaries at the final iterate).
pub fn rl_adjoint_report(
    inner_loss: &PointwiseLoss,
    outer_loss: &PointwiseLoss,
    qbar: &Mat,
    omega: &ParamVector,
    theta: &ParamVector,
    data: &Dataset,
) -> Result<OracleReport> {
    let table = Arc::new(TargetTable::new(qbar.clone()));
    let inner_loss = with_target(inner_loss, table.clone());
    let outer_loss = with_target(outer_loss, table);
    let q_model = LinearModel::new(
        FeatureMap::PairOneHot {
            left: qbar.rows(),
            right: qbar.cols(),
        },
        qbar.rows() + qbar.cols(),
        1,
    );
    let mut rng = Rng::with_stream(8, 0x43484b38); // "CHK8"
    let idx = sample_indices(&mut rng, data.len(), 256.min(data.len()));
    let mut meter = CostMeter::default();
    let closed = closed_form_adjoint_rl(
        &inner_loss,
        &outer_loss,
        omega,
        &q_model,
        theta,
        data,
        &idx,
        &mut meter,
    )?;
    let minimized =
        per_sample_adjoint_by_gd(&inner_loss, &outer_loss, omega, &q_model, theta, data, &idx)?;
    let g_closed = total_grad(
        &inner_loss,
        &outer_loss,
        omega,
        &q_model,
        theta,
        &AdjointPath::PerSample { values: &closed },
        data,
        &idx,
        data,
        &idx,
    )?;
    let g_min = total_grad(
        &inner_loss,
        &outer_loss,
        omega,
        &q_model,
        theta,
        &AdjointPath::PerSample { values: &minimized },
        data,
        &idx,
        data,
        &idx,
    )?;
    Ok(OracleReport::vectors(
        "rl_total_gradient",
        g_closed.grad.as_slice(),
        g_min.grad.as_slice(),
        RL_ADJOINT_TOL,
    ))
}

/// Criterion 8: the Bellman closed-form adjoint and an independent
/// minimization of the per-sample adjoint objective give the same total
/// gradient.
pub fn criterion_8() -> Result<CriterionResult> {
    let mut rng = Rng::with_stream(8, 0x43484b39);
    let mdp = gen_mdp(&mut rng, 6, 3)?;
    let buffer = Arc::new(mdp.replay_collect(2000, &mut rng)?);
    let model: Arc<dyn OuterMap> = Arc::new(MdpModelFull {
        n_states: 6,
        n_actions: 3,
    });
    let omega = {
        let full = MdpModelFull {
            n_states: 6,
            n_actions: 3,
        };
        let mut p = full.params_from(&mdp);
        // perturb so the outer gradient is non-trivial
        let bump = ParamVector::from_vec(rng.normal_vec(p.len()));
        p.axpy(0.05, &bump);
        p
    };
    let problem = make_rl_problem(&mdp, buffer.clone(), model);
    let theta = Model::init_params(problem.inner_model.as_model(), &mut rng);
    let mut qbar = Mat::zeros(6, 3);
    for v in qbar.data_mut() {
        *v = rng.uniform_in(0.0, 2.0);
    }
    let report = rl_adjoint_report(
        &problem.inner_loss,
        &problem.outer_loss,
        &qbar,
        &omega,
        &theta,
        &buffer,
    )?;
    Ok(CriterionResult::new(
        8,
        "closed-form Bellman adjoint equals independent minimization",
        report.pass,
        format!("rel err {:.2e} (tol {RL_ADJOINT_TOL:.0e})", report.rel_error),
    ))
}

/// Solve the Bellman inner problem against a fixed model by repeated exact
/// fits with full target replacement — this is value iteration written
/// through the toolkit's own machinery.
fn inner_fixed_point(
    problem: &BilevelProblem,
    omega: &ParamVector,
    n_states: usize,
    n_actions: usize,
    max_iters: usize,
) -> Result<Mat> {
    let lm = problem.inner_model.as_linear().expect("tabular inner model");
    let all_pairs = Dataset::new(
        all_pair_inputs(n_states, n_actions),
        vec![
            Label::Transition {
                reward: 0.0,
                next_state: 0
            };
            n_states * n_actions
        ],
    )?;
    let idx = full_indices(all_pairs.len());
    let mut q = Mat::zeros(n_states, n_actions);
    let mut loss = with_target(&problem.inner_loss, Arc::new(TargetTable::new(q.clone())));
    for _ in 0..max_iters {
        let theta = exact_linear_fit(&loss, omega, lm, &all_pairs, &idx, 0.0)?;
        let next = q_table_of(lm, &theta, n_states, n_actions)?;
        let change = next
            .data()
            .iter()
            .zip(q.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        q = next;
        loss = with_target(&loss, Arc::new(TargetTable::new(q.clone())));
        if change <= 1e-10 {
            break;
        }
    }
    Ok(q)
}

/// Criterion 9: (a) the inner fixed point under the true model reproduces
/// soft value iteration; (b) the full pipeline recovers the oracle greedy
/// policy on most seeds.
pub fn criterion_9() -> Result<CriterionResult> {
    // (a) fixed point against the true model
    let mut rng = Rng::with_stream(9, 0x43484b39);
    let mdp = gen_mdp(&mut rng, 8, 2)?;
    let model = MdpModelFull {
        n_states: 8,
        n_actions: 2,
    };
    let omega_true = model.params_from(&mdp);
    let buffer = Arc::new(mdp.replay_collect(64, &mut rng)?); // placeholder buffer; unused by (a)
    let problem = make_rl_problem(&mdp, buffer, Arc::new(model));
    let q_fixed = inner_fixed_point(&problem, &omega_true, 8, 2, 3000)?;
    let q_star = mdp.soft_value_iteration(1.0, 1e-12);
    let sup = q_fixed
        .data()
        .iter()
        .zip(q_star.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));

    // (b) policy recovery over seeds
    let mut matches = 0usize;
    let mut details = Vec::new();
    for s in 0..RL_POLICY_SEEDS {
        let mut rng = Rng::with_stream(900 + s, 0x43484b39);
        let mdp = gen_mdp(&mut rng, 8, 2)?;
        let buffer = Arc::new(mdp.replay_collect(30_000, &mut rng)?);
        let model: Arc<dyn OuterMap> = Arc::new(MdpModelFull {
            n_states: 8,
            n_actions: 2,
        });
        let problem = make_rl_problem(&mdp, buffer, model.clone());
        let cfg = OptimConfig {
            n_outer: 300,
            eta_out: 0.05,
            batch_in: 512,
            batch_out: 512,
            inner_mode: InnerMode::Exact,
            adjoint_mode: AdjointMode::PerSample,
            r_in: 1e-8,
            r_adj: 0.0,
            outer_optimizer: OptimKind::Adam,
            target_ema: 0.02,
            ..OptimConfig::default()
        };
        let mut omega_rng = Rng::with_stream(900 + s, 0x4f4d4547);
        let omega0 = model.init_params(&mut omega_rng);
        let out = funcid_run(&problem, omega0, &cfg, 900 + s, &RunHooks::default())?;
        let q_learned = out.qbar.expect("rl run refreshes a target table");
        let oracle_policy = greedy_policy(&mdp.soft_value_iteration(1.0, 1e-12));
        let learned_policy = greedy_policy(&q_learned);
        let matched = oracle_policy == learned_policy;
        if matched {
            matches += 1;
        } else {
            let diff = oracle_policy
                .iter()
                .zip(&learned_policy)
                .filter(|(a, b)| a != b)
                .count();
            details.push(format!("seed {s}: {diff} states differ"));
        }
    }

    let pass = sup <= RL_FIXED_POINT_TOL && matches >= RL_POLICY_MATCHES_REQUIRED;
    Ok(CriterionResult::new(
        9,
        "Bellman fixed point and policy recovery",
        pass,
        format!(
            "fixed-point sup err {sup:.2e} (tol {RL_FIXED_POINT_TOL:.0e}); \
             policy matches {matches}/{RL_POLICY_SEEDS} (need {RL_POLICY_MATCHES_REQUIRED}){}{}",
            if details.is_empty() { "" } else { "; " },
            details.join(", ")
        ),
    ))
}

/// Criterion 10: output-space adjoint products are recorded at dimension
/// `d_v` and cost an order of magnitude fewer flops per outer step than
/// AID's parameter-space products on a wide network.
pub fn criterion_10() -> Result<CriterionResult> {
    let qcfg = QuadConfig {
        d_x: 3,
        d_t: 3,
        d_v: 1,
        n: 128,
        sigma_t: 0.05,
        sigma_o: 0.1,
        features: FeatureMap::Affine,
        r_in: 1e-4,
        r_adj: 1e-4,
        orthonormal_g: true,
    };
    let inst = QuadInstance::generate(qcfg, 170)?;
    let mut problem = inst.problem();
    let spec = MlpSpec::new(vec![3, 32, 1], Activation::Tanh)?;
    problem.inner_model = ModelKind::Mlp(Mlp::new(spec.clone()));
    problem.adjoint_model = ModelKind::Mlp(Mlp::new(spec));
    let p_in = problem.inner_model.as_model().param_dim();
    let d_v = 1usize;
    if p_in < 100 * d_v {
        return Err(Error::InvalidArg {
            op: "criterion_10",
            reason: format!("network too small: p_in {p_in} < 100 d_v"),
        });
    }

    let n_steps = 5usize;
    let cfg = OptimConfig {
        n_outer: n_steps,
        m_inner: 10,
        k_adjoint: 10,
        batch_in: 64,
        batch_out: 64,
        eta_out: 1e-3,
        eta_in: 1e-2,
        eta_adj: 1e-2,
        r_adj: 1e-6,
        ..OptimConfig::default()
    };
    let mut omega_rng = Rng::with_stream(170, 0x4f4d4547);
    let omega0 = inst.random_omega(&mut omega_rng);
    let f_out = funcid_run(&problem, omega0.clone(), &cfg, 170, &RunHooks::default())?;
    let funcid_dims_ok = f_out.records.iter().all(|r| r.hvp_dim == d_v);
    let funcid_per_step = f_out.meter.hvp_flops as f64 / n_steps as f64;

    let aid_out = super::aid_run(
        &problem,
        omega0,
        &cfg,
        &AidConfig::default(),
        170,
        &RunHooks::default(),
    )?;
    let aid_dims_ok = aid_out.records.iter().all(|r| r.hvp_dim == p_in);
    let aid_per_step = aid_out.meter.hvp_flops as f64 / n_steps as f64;

    let ratio = aid_per_step / funcid_per_step;
    let pass = funcid_dims_ok && aid_dims_ok && ratio >= COST_RATIO_MIN;
    Ok(CriterionResult::new(
        10,
        "output-space products beat parameter-space products in cost",
        pass,
        format!(
            "hvp dims d_v={d_v} vs p_in={p_in} on every iteration \
             ({funcid_dims_ok}/{aid_dims_ok}); per-step flops {funcid_per_step:.1} vs \
             {aid_per_step:.1}, ratio {ratio:.0}x (need {COST_RATIO_MIN}x)"
        ),
    ))
}

fn fd_value_grad(
    mut value: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    for j in 0..x.len() {
        let h = eps * (1.0 + x[j].abs());
        let mut xp = x.to_vec();
        xp[j] += h;
        let mut xm = x.to_vec();
        xm[j] -= h;
        g[j] = (value(xp.as_slice()) - value(xm.as_slice())) / (2.0 * h);
    }
    g
}

fn micro_check(
    failures: &mut Vec<String>,
    name: &str,
    got: &[f64],
    want: &[f64],
) {
    let denom = norm2(want).max(1e-8);
    let err = norm2(&sub(got, want)) / denom;
    if err.is_nan() || err > MICRO_TOL {
        failures.push(format!("{name}: rel err {err:.2e}"));
    }
}

/// Finite-difference checks of one loss at one sample point.
fn check_loss_derivatives(
    failures: &mut Vec<String>,
    name: &str,
    loss: &PointwiseLoss,
    omega: &ParamVector,
    v: &[f64],
    x: &[f64],
    y: &Label,
) -> Result<()> {
    let eps = 1e-6;
    let bundle = loss.eval_bundle(omega, v, x, y)?;

    // grad_v vs differenced value
    let fd_v = fd_value_grad(
        |vv| loss.eval_bundle(omega, vv, x, y).expect("loss eval").value,
        v,
        eps,
    );
    micro_check(failures, &format!("{name}.grad_v"), &bundle.grad_v, &fd_v);

    // hess_scale: the Hessian in v is hess_scale * I; difference grad_v
    // along a random direction
    let mut rng = Rng::with_stream(11, 0x43484b41);
    let dir = rng.normal_vec(v.len());
    let nd = norm2(&dir);
    let h = eps;
    let mut vp = v.to_vec();
    crate::numkit::axpy(&mut vp, h / nd, &dir);
    let mut vm = v.to_vec();
    crate::numkit::axpy(&mut vm, -h / nd, &dir);
    let gp = loss.eval_bundle(omega, &vp, x, y)?.grad_v;
    let gm = loss.eval_bundle(omega, &vm, x, y)?.grad_v;
    let hv: Vec<f64> = gp
        .iter()
        .zip(&gm)
        .map(|(p, m)| nd * (p - m) / (2.0 * h))
        .collect();
    let want: Vec<f64> = dir.iter().map(|d| bundle.hess_scale * d).collect();
    micro_check(failures, &format!("{name}.hess_scale"), &hv, &want);

    // grad_omega vs differenced value in omega
    let g_omega = loss.grad_omega(omega, v, x, y)?;
    let fd_omega = fd_value_grad(
        |w| {
            let wv = ParamVector::from_vec(w.to_vec());
            loss.eval_bundle(&wv, v, x, y).expect("loss eval").value
        },
        omega.as_slice(),
        eps,
    );
    // zero-vs-zero comparisons (omega-independent losses) use the absolute
    // norm floor inside micro_check
    micro_check(failures, &format!("{name}.grad_omega"), g_omega.as_slice(), &fd_omega);

    // cross_apply(a) vs differenced <grad_v, a> in omega
    let a = rng.normal_vec(v.len());
    let cross = loss.cross_apply(omega, v, x, y, &a)?;
    let fd_cross = fd_value_grad(
        |w| {
            let wv = ParamVector::from_vec(w.to_vec());
            let g = loss.eval_bundle(&wv, v, x, y).expect("loss eval").grad_v;
            crate::numkit::dot(&g, &a)
        },
        omega.as_slice(),
        eps,
    );
    micro_check(failures, &format!("{name}.cross_apply"), cross.as_slice(), &fd_cross);
    Ok(())
}

/// Criterion 11: every loss derivative, model vjp, and the logsumexp all
/// agree with finite differences / algebraic identities.
pub fn criterion_11() -> Result<CriterionResult> {
    let mut failures = Vec::new();
    let mut rng = Rng::with_stream(11, 0x43484b42);

    // losses over both regression and Bellman fixtures
    let iv_label = Label::Iv {
        treatment: vec![0.3, -0.7, 0.2],
        outcome: vec![0.9, -0.4],
    };
    let x = [0.5, -0.2, 0.8];
    let v = [0.4, -0.1];
    check_loss_derivatives(
        &mut failures,
        "squared_outer",
        &PointwiseLoss::SquaredOuter { d_v: 2 },
        &ParamVector::zeros(0),
        &v,
        &x,
        &iv_label,
    )?;
    let lin_outer: Arc<dyn OuterMap> = Arc::new(LinearOuter {
        in_dim: 3,
        out_dim: 2,
    });
    check_loss_derivatives(
        &mut failures,
        "squared_inner_linear_map",
        &PointwiseLoss::SquaredInnerToModel { model: lin_outer },
        &ParamVector::from_vec(rng.normal_vec(6)),
        &v,
        &x,
        &iv_label,
    )?;
    let mlp_outer: Arc<dyn OuterMap> = Arc::new(crate::models::MlpOuter {
        mlp: Mlp::new(MlpSpec::new(vec![3, 3, 2], Activation::Tanh)?),
    });
    let mlp_omega = {
        let m = Mlp::new(MlpSpec::new(vec![3, 3, 2], Activation::Tanh)?);
        Model::init_params(&m, &mut rng)
    };
    check_loss_derivatives(
        &mut failures,
        "squared_inner_mlp_map",
        &PointwiseLoss::SquaredInnerToModel { model: mlp_outer },
        &mlp_omega,
        &v,
        &x,
        &iv_label,
    )?;

    let (n_states, n_actions) = (3usize, 2usize);
    let mdp_model: Arc<dyn OuterMap> = Arc::new(MdpModelFull {
        n_states,
        n_actions,
    });
    let mut q = Mat::zeros(n_states, n_actions);
    for qv in q.data_mut() {
        *qv = rng.uniform_in(-1.0, 1.0);
    }
    let table = Arc::new(TargetTable::new(q));
    let mdp_omega = ParamVector::from_vec(rng.normal_vec(mdp_model.param_dim()));
    let pair_x = crate::tasks::mdp::encode_sa(1, 0, n_states, n_actions);
    let tr_label = Label::Transition {
        reward: 0.7,
        next_state: 2,
    };
    let qv = [0.6];
    check_loss_derivatives(
        &mut failures,
        "bellman_inner",
        &PointwiseLoss::BellmanInner {
            model: mdp_model,
            target: table.clone(),
            gamma: 0.9,
        },
        &mdp_omega,
        &qv,
        &pair_x,
        &tr_label,
    )?;
    check_loss_derivatives(
        &mut failures,
        "bellman_outer",
        &PointwiseLoss::BellmanOuter {
            target: table,
            gamma: 0.9,
        },
        &ParamVector::zeros(0),
        &qv,
        &pair_x,
        &tr_label,
    )?;

    // model vjps: <f(params), cot> differenced in params
    let check_vjp = |failures: &mut Vec<String>, name: &str, model: &dyn Model, rng: &mut Rng| {
        let params = model.init_params(rng);
        let xs = Mat::from_rows(&[rng.normal_vec(model.in_dim()), rng.normal_vec(model.in_dim())])
            .expect("fixture");
        let cot_rows: Vec<Vec<f64>> = (0..2).map(|_| rng.normal_vec(model.out_dim())).collect();
        let cot = Mat::from_rows(&cot_rows).expect("fixture");
        let got = model.vjp_params(&params, &xs, &cot).expect("vjp");
        let fd = fd_value_grad(
            |p| {
                let pv = ParamVector::from_vec(p.to_vec());
                let out = model.forward(&pv, &xs).expect("forward");
                out.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum()
            },
            params.as_slice(),
            1e-6,
        );
        micro_check(failures, name, got.as_slice(), &fd);
    };
    check_vjp(
        &mut failures,
        "mlp_vjp",
        &Mlp::new(MlpSpec::new(vec![3, 4, 2], Activation::Tanh)?),
        &mut rng,
    );
    check_vjp(
        &mut failures,
        "linear_poly2_vjp",
        &LinearModel::new(FeatureMap::Poly2, 3, 2),
        &mut rng,
    );

    // logsumexp shift invariance
    let z = rng.normal_vec(5);
    let c = 3.7;
    let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
    let drift = (lse(&shifted) - lse(&z) - c).abs();
    if drift > 1e-12 {
        failures.push(format!("lse shift invariance: drift {drift:.2e}"));
    }

    let pass = failures.is_empty();
    Ok(CriterionResult::new(
        11,
        "derivative micro-suite (losses, vjps, logsumexp)",
        pass,
        if pass {
            format!("all checks within rel tol {MICRO_TOL:.0e}")
        } else {
            failures.join("; ")
        },
    ))
}

/// Run a suite. `quick` runs the cheap subset (micro-suite plus the three
/// identity checks); the full suite runs all eleven in order.
pub fn run_suite(quick: bool) -> Vec<CriterionResult> {
    let ids: &[usize] = if quick { &[11, 1, 2, 3] } else { &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11] };
    ids.iter()
        .map(|&id| {
            let run = || -> Result<CriterionResult> {
                match id {
                    1 => criterion_1(),
                    2 => criterion_2(),
                    3 => criterion_3(),
                    4 => criterion_4(),
                    5 => criterion_5(),
                    6 => criterion_6(),
                    7 => criterion_7(),
                    8 => criterion_8(),
                    9 => criterion_9(),
                    10 => criterion_10(),
                    _ => criterion_11(),
                }
            };
            run().unwrap_or_else(|e| {
                CriterionResult::new(id, "criterion errored", false, format!("error: {e}"))
            })
        })
        .collect()
}

/// Render the suite as the CLI's pass/fail table.
pub fn format_results(results: &[CriterionResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "[{}] criterion {:>2}: {} — {}\n",
            if r.pass { "PASS" } else { "FAIL" },
            r.id,
            r.name,
            r.detail
        ));
    }
    let passed = results.iter().filter(|r| r.pass).count();
    out.push_str(&format!("{passed}/{} criteria passed\n", results.len()));
    out
}
