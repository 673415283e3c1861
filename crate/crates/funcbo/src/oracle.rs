//! Reference answers computed by routes independent of the optimizer code.
//!
//! The estimators in [`crate::funcid`] accumulate per-sample contributions
//! and cache factorizations; everything here instead assembles whole
//! matrices with dense [`Mat`] operations and, for total gradients, avoids
//! adjoints entirely by differencing the reduced objective
//! `F(omega) = outer loss at the exactly re-solved inner model`. Agreement
//! between the two routes is what the gradient-identity and bias checks
//! certify; neither route is allowed to call into the other.

use crate::funcid::Dataset;
use crate::losses::PointwiseLoss;
use crate::models::{LinearModel, Model, ParamVector};
use crate::numkit::{norm2, spd_solve, Mat, Rng};
use crate::{Error, Result};

/// Default step for the finite-difference gradients below.
pub const FD_EPS_DEFAULT: f64 = 1e-5;

/// One algorithm-vs-oracle comparison, as stored in run summaries.
#[derive(Debug, Clone, serde::Serialize)]
pub struct OracleReport {
    pub quantity: String,
    pub algorithm: f64,
    pub oracle: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Scalar comparison; `rel_error = |a - o| / max(1e-12, |o|)`.
    pub fn scalar(quantity: impl Into<String>, algorithm: f64, oracle: f64, tolerance: f64) -> OracleReport {
        let abs_error = (algorithm - oracle).abs();
        let rel_error = abs_error / oracle.abs().max(1e-12);
        OracleReport {
            quantity: quantity.into(),
            algorithm,
            oracle,
            abs_error,
            rel_error,
            tolerance,
            pass: rel_error <= tolerance,
        }
    }

    /// Comparison of two vectors by norms: `algorithm`/`oracle` report the
    /// vector norms, the errors the norm of the difference.
    pub fn vectors(quantity: impl Into<String>, algorithm: &[f64], oracle: &[f64], tolerance: f64) -> OracleReport {
        let abs_error = norm2(&crate::numkit::sub(algorithm, oracle));
        let on = norm2(oracle);
        let rel_error = abs_error / on.max(1e-12);
        OracleReport {
            quantity: quantity.into(),
            algorithm: norm2(algorithm),
            oracle: on,
            abs_error,
            rel_error,
            tolerance,
            pass: rel_error <= tolerance,
        }
    }
}

/// Ridge solution of the full-data inner problem for a linear model,
/// assembled densely: `(Phi^T diag(h/n) Phi + r_in I) w_k = Phi^T (h/n . u_k)`
/// with the per-sample quadratic target `u_i = -grad_v l(0) / h_i`.
pub fn exact_inner_solve(
    inner_loss: &PointwiseLoss,
    omega: &ParamVector,
    lm: &LinearModel,
    data: &Dataset,
    r_in: f64,
) -> Result<ParamVector> {
    let n = data.len();
    if n == 0 {
        return Err(Error::InvalidArg {
            op: "exact_inner_solve",
            reason: "empty dataset".into(),
        });
    }
    let d1 = lm.feature_dim();
    let d_v = lm.out_dim();
    let phi = lm.features_mat(&data.xs);
    let zero_v = vec![0.0; d_v];
    let mut scaled = phi.clone(); // row i becomes (h_i / n) phi_i
    let mut targets = Mat::zeros(n, d_v);
    for i in 0..n {
        let bundle = inner_loss.eval_bundle(omega, &zero_v, data.x(i), data.label(i))?;
        let h = bundle.hess_scale;
        for v in scaled.row_mut(i) {
            *v *= h / n as f64;
        }
        for (t, g) in targets.row_mut(i).iter_mut().zip(&bundle.grad_v) {
            *t = -g / h;
        }
    }
    let mut gram = phi.transpose().matmul(&scaled)?;
    gram.add_scaled_identity(r_in);
    let mut theta = ParamVector::zeros(d_v * d1);
    for k in 0..d_v {
        let u_k: Vec<f64> = (0..n).map(|i| targets.get(i, k)).collect();
        let rhs = scaled.tr_matvec(&u_k)?;
        let wk = spd_solve(&gram, &rhs)?;
        theta.as_mut_slice()[k * d1..(k + 1) * d1].copy_from_slice(&wk);
    }
    Ok(theta)
}

/// Normal-equations solution of the full-data adjoint problem for a linear
/// adjoint model, assembled densely:
/// `(Psi_in^T diag(h/n) Psi_in + r_adj I) w_k = -(1/m) Psi_out^T d_k`.
#[allow(clippy::too_many_arguments)]
pub fn exact_adjoint_solve(
    inner_loss: &PointwiseLoss,
    outer_loss: &PointwiseLoss,
    omega: &ParamVector,
    inner_model: &dyn Model,
    theta: &ParamVector,
    adj_lm: &LinearModel,
    d_in: &Dataset,
    d_out: &Dataset,
    r_adj: f64,
) -> Result<ParamVector> {
    let n = d_in.len();
    let m = d_out.len();
    let d1 = adj_lm.feature_dim();
    let d_v = inner_loss.d_v();

    let psi_in = adj_lm.features_mat(&d_in.xs);
    let h_in = inner_model.forward(theta, &d_in.xs)?;
    let mut scaled = psi_in.clone();
    for i in 0..n {
        let bundle = inner_loss.eval_bundle(omega, h_in.row(i), d_in.x(i), d_in.label(i))?;
        for v in scaled.row_mut(i) {
            *v *= bundle.hess_scale / n as f64;
        }
    }
    let mut gram = psi_in.transpose().matmul(&scaled)?;
    gram.add_scaled_identity(r_adj);

    let psi_out = adj_lm.features_mat(&d_out.xs);
    let h_out = inner_model.forward(theta, &d_out.xs)?;
    let mut d = Mat::zeros(m, d_v);
    for j in 0..m {
        let bundle = outer_loss.eval_bundle(omega, h_out.row(j), d_out.x(j), d_out.label(j))?;
        d.row_mut(j).copy_from_slice(&bundle.grad_v);
    }

    let mut xi = ParamVector::zeros(d_v * d1);
    for k in 0..d_v {
        let d_k: Vec<f64> = (0..m).map(|j| -d.get(j, k) / m as f64).collect();
        let rhs = psi_out.tr_matvec(&d_k)?;
        let wk = spd_solve(&gram, &rhs)?;
        xi.as_mut_slice()[k * d1..(k + 1) * d1].copy_from_slice(&wk);
    }
    Ok(xi)
}

/// Full-data mean of the outer loss at the inner model's outputs (local
/// re-implementation so the oracle route shares no estimator code).
pub fn mean_outer_loss(
    outer_loss: &PointwiseLoss,
    omega: &ParamVector,
    inner_model: &dyn Model,
    theta: &ParamVector,
    d_out: &Dataset,
) -> Result<f64> {
    let vs = inner_model.forward(theta, &d_out.xs)?;
    let mut total = 0.0;
    for j in 0..d_out.len() {
        total += outer_loss
            .eval_bundle(omega, vs.row(j), d_out.x(j), d_out.label(j))?
            .value;
    }
    Ok(total / d_out.len() as f64)
}

/// The reduced objective `F(omega)`: outer loss at the exactly re-solved
/// inner model. One call per finite-difference evaluation.
pub fn reduced_objective(
    inner_loss: &PointwiseLoss,
    outer_loss: &PointwiseLoss,
    omega: &ParamVector,
    lm: &LinearModel,
    d_in: &Dataset,
    d_out: &Dataset,
    r_in: f64,
) -> Result<f64> {
    let theta = exact_inner_solve(inner_loss, omega, lm, d_in, r_in)?;
    mean_outer_loss(outer_loss, omega, lm, &theta, d_out)
}

/// Central-difference gradient with the relative step
/// `eps_i = eps * (1 + |x_i|)` per coordinate.
pub fn fd_grad(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let step = eps * (1.0 + x[i].abs());
        xp[i] = x[i] + step;
        let fp = f(&xp)?;
        xp[i] = x[i] - step;
        let fm = f(&xp)?;
        xp[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Ok(grad)
}

/// Oracle total gradient: central differences of [`reduced_objective`],
/// re-solving the inner problem exactly at every perturbed `omega`.
#[allow(clippy::too_many_arguments)]
pub fn fd_total_grad(
    inner_loss: &PointwiseLoss,
    outer_loss: &PointwiseLoss,
    omega: &ParamVector,
    lm: &LinearModel,
    d_in: &Dataset,
    d_out: &Dataset,
    r_in: f64,
    eps: f64,
) -> Result<Vec<f64>> {
    fd_grad(
        |w| {
            let wv = ParamVector::from_vec(w.to_vec());
            reduced_objective(inner_loss, outer_loss, &wv, lm, d_in, d_out, r_in)
        },
        omega.as_slice(),
        eps,
    )
}

/// Linear-interpolation median (the same quantile convention as the
/// comparison reports).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in median"));
    let pos = 0.5 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// For each budget, the median over seeds of `|estimate(budget, seed) -
/// oracle|`. Used to verify that estimator bias shrinks as inner/adjoint
/// budgets grow.
pub fn bias_probe(
    budgets: &[usize],
    seeds: &[u64],
    mut estimate: impl FnMut(usize, u64) -> Result<Vec<f64>>,
    oracle: &[f64],
) -> Result<Vec<f64>> {
    let mut medians = Vec::with_capacity(budgets.len());
    for &budget in budgets {
        let mut errs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let est = estimate(budget, seed)?;
            if est.len() != oracle.len() {
                return Err(Error::Dim {
                    op: "bias_probe",
                    expected: format!("{}", oracle.len()),
                    got: format!("{}", est.len()),
                });
            }
            errs.push(norm2(&crate::numkit::sub(&est, oracle)));
        }
        medians.push(median(&errs));
    }
    Ok(medians)
}

/// Largest eigenvalue of a symmetric positive semi-definite operator by
/// power iteration from a random unit start.
pub fn lambda_max(
    mut op: impl FnMut(&[f64]) -> Vec<f64>,
    dim: usize,
    iters: usize,
    seed: u64,
) -> f64 {
    let mut rng = Rng::with_stream(seed, 0x504f5745); // stream tag: power iteration
    let mut v = rng.normal_vec(dim);
    let nv = norm2(&v);
    for x in v.iter_mut() {
        *x /= nv;
    }
    let mut lam = 0.0;
    for _ in 0..iters {
        let w = op(&v);
        lam = crate::numkit::dot(&v, &w);
        let nw = norm2(&w);
        if nw == 0.0 {
            return 0.0;
        }
        v = w.into_iter().map(|x| x / nw).collect();
    }
    lam
}

/// Richardson-extrapolated central difference along `v`:
/// `(4 D_{eps/2} - D_eps) / 3`, fourth-order accurate. Used as a
/// sanity refinement when plain central differences are near the noise
/// floor.
pub fn fd_directional_refined(
    mut f: impl FnMut(&[f64]) -> Vec<f64>,
    x: &[f64],
    v: &[f64],
    eps: f64,
) -> Vec<f64> {
    let coarse = crate::numkit::fd_directional(&mut f, x, v, eps);
    let fine = crate::numkit::fd_directional(&mut f, x, v, 0.5 * eps);
    fine.iter()
        .zip(&coarse)
        .map(|(f2, f1)| (4.0 * f2 - f1) / 3.0)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcid::{
        exact_linear_fit, full_indices, linear_adjoint_solve, total_grad, AdjointPath, CostMeter,
    };
    use crate::losses::Label;
    use crate::models::{FeatureMap, LinearOuter, OuterMap};
    use crate::numkit::rel_err;
    use std::sync::Arc;

    fn toy(seed: u64, n: usize) -> (Dataset, Arc<LinearOuter>, ParamVector) {
        let mut rng = Rng::new(seed);
        let d_x = 3;
        let d_t = 2;
        let g = Mat::from_vec(d_t, d_x, rng.normal_vec(d_t * d_x)).unwrap();
        let mut xs = Mat::zeros(n, d_x);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let x: Vec<f64> = (0..d_x).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            xs.row_mut(i).copy_from_slice(&x);
            let mut t = g.matvec(&x).unwrap();
            for tv in t.iter_mut() {
                *tv += 0.05 * rng.normal();
            }
            let o = vec![t[0] - 0.5 * t[1] + 0.05 * rng.normal()];
            labels.push(Label::Iv {
                treatment: t,
                outcome: o,
            });
        }
        let outer = Arc::new(LinearOuter {
            in_dim: d_t,
            out_dim: 1,
        });
        let omega = ParamVector::from_vec(rng.normal_vec(d_t));
        (Dataset::new(xs, labels).unwrap(), outer, omega)
    }

    #[test]
    fn dense_and_incremental_inner_solves_agree() {
        let (data, outer, omega) = toy(21, 60);
        let inner_loss = PointwiseLoss::SquaredInnerToModel {
            model: outer as Arc<dyn OuterMap>,
        };
        let lm = LinearModel::new(FeatureMap::Affine, 3, 1);
        let r_in = 1e-4;
        let a = exact_inner_solve(&inner_loss, &omega, &lm, &data, r_in).unwrap();
        let b = exact_linear_fit(
            &inner_loss,
            &omega,
            &lm,
            &data,
            &full_indices(data.len()),
            r_in,
        )
        .unwrap();
        assert!(rel_err(a.as_slice(), b.as_slice()) < 1e-12);
    }

    #[test]
    fn dense_and_incremental_adjoint_solves_agree() {
        let (data, outer, omega) = toy(22, 50);
        let inner_loss = PointwiseLoss::SquaredInnerToModel {
            model: outer as Arc<dyn OuterMap>,
        };
        let outer_loss = PointwiseLoss::SquaredOuter { d_v: 1 };
        let lm = LinearModel::new(FeatureMap::Affine, 3, 1);
        let theta = exact_inner_solve(&inner_loss, &omega, &lm, &data, 1e-4).unwrap();
        let r_adj = 1e-4;
        let a = exact_adjoint_solve(
            &inner_loss,
            &outer_loss,
            &omega,
            &lm,
            &theta,
            &lm,
            &data,
            &data,
            r_adj,
        )
        .unwrap();
        let idx = full_indices(data.len());
        let mut meter = CostMeter::default();
        let b = linear_adjoint_solve(
            &inner_loss,
            &outer_loss,
            &omega,
            &lm,
            &theta,
            &lm,
            &data,
            &idx,
            &data,
            &idx,
            r_adj,
            &mut meter,
        )
        .unwrap();
        assert!(rel_err(a.as_slice(), b.as_slice()) < 1e-12);
    }

    #[test]
    fn assembled_total_gradient_matches_differenced_objective() {
        // Linear inner model, adjoint in the same feature class, matching
        // ridges: the assembled gradient equals the derivative of the
        // reduced objective up to finite-difference error.
        let (data, outer, omega) = toy(23, 80);
        let inner_loss = PointwiseLoss::SquaredInnerToModel {
            model: outer as Arc<dyn OuterMap>,
        };
        let outer_loss = PointwiseLoss::SquaredOuter { d_v: 1 };
        let lm = LinearModel::new(FeatureMap::Affine, 3, 1);
        let r = 1e-4;
        let theta = exact_inner_solve(&inner_loss, &omega, &lm, &data, r).unwrap();
        let idx = full_indices(data.len());
        let mut meter = CostMeter::default();
        let xi = linear_adjoint_solve(
            &inner_loss,
            &outer_loss,
            &omega,
            &lm,
            &theta,
            &lm,
            &data,
            &idx,
            &data,
            &idx,
            r,
            &mut meter,
        )
        .unwrap();
        let tg = total_grad(
            &inner_loss,
            &outer_loss,
            &omega,
            &lm,
            &theta,
            &AdjointPath::Model {
                model: &lm,
                xi: &xi,
            },
            &data,
            &idx,
            &data,
            &idx,
        )
        .unwrap();
        let fd = fd_total_grad(
            &inner_loss,
            &outer_loss,
            &omega,
            &lm,
            &data,
            &data,
            r,
            FD_EPS_DEFAULT,
        )
        .unwrap();
        let err = rel_err(tg.grad.as_slice(), &fd);
        assert!(err < 1e-7, "gradient identity rel err {err}");
    }

    #[test]
    fn median_interpolates() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn bias_probe_orders_budgets() {
        // Synthetic estimator with error ~ 1/budget: medians must shrink.
        let oracle = vec![1.0, -2.0, 0.5];
        let medians = bias_probe(
            &[1, 4, 16],
            &[1, 2, 3, 4, 5],
            |budget, seed| {
                let mut rng = Rng::new(seed);
                Ok(oracle
                    .iter()
                    .map(|o| o + rng.normal() / budget as f64)
                    .collect())
            },
            &oracle,
        )
        .unwrap();
        assert!(medians[0] > medians[1] && medians[1] > medians[2]);
    }

    #[test]
    fn power_iteration_finds_top_eigenvalue() {
        let a = Mat::from_vec(3, 3, vec![5.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let lam = lambda_max(|v| a.matvec(v).unwrap(), 3, 200, 7);
        // exact top eigenvalue of [[5,1],[1,2]] block: (7 + sqrt(13))/2
        let expected = (7.0 + 13f64.sqrt()) / 2.0;
        assert!((lam - expected).abs() < 1e-10, "{lam} vs {expected}");
    }

    #[test]
    fn richardson_refines_central_differences() {
        // f(x) = sin(x): refined estimate has much smaller error at coarse eps.
        let f = |x: &[f64]| vec![x[0].sin()];
        let x = [0.7];
        let v = [1.0];
        let eps = 1e-2;
        let coarse = crate::numkit::fd_directional(f, &x, &v, eps)[0];
        let refined = fd_directional_refined(f, &x, &v, eps)[0];
        let truth = 0.7f64.cos();
        assert!((refined - truth).abs() < (coarse - truth).abs() / 100.0);
    }
}
