//! Point-wise inner and outer losses.
//!
//! Each loss `l(omega, v, x, y)` is differentiated three ways:
//! - in the *output* variable `v` (value/gradient/Hessian via
//!   [`PointwiseLoss::eval_bundle`]) — this is the space where the adjoint
//!   method does its Hessian-vector products, of dimension `d_v`;
//! - in the outer variable `omega` ([`PointwiseLoss::grad_omega`]);
//! - the mixed derivative applied to an adjoint value
//!   ([`PointwiseLoss::cross_apply`]), i.e. `d/d omega (a . dl/dv)` at
//!   fixed `v`, which is the per-sample contribution to the implicit part
//!   of the total gradient.
//!
//! Losses close over the models they need: the regression inner loss holds
//! the structural model `f_omega`, the Bellman losses hold a lagged
//! Q-table. The Bellman inner loss scores the model-predicted backup
//! `T(omega, x) = r_omega(x) + gamma * <s_omega(x), vbar>` against `v`,
//! where `vbar[s'] = lse(qbar[s', .])` are the lagged per-state soft values
//! and `s_omega(x)` is the model's expected next-state distribution — so
//! with the true model, the inner fixed point is exactly the soft
//! value-iteration fixed point.

use std::sync::Arc;

use crate::models::{OuterMap, ParamVector};
use crate::numkit::{dot, Mat};
use crate::{Error, Result};

/// Task label attached to a sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    /// Regression tasks: observed treatment and outcome.
    Iv {
        treatment: Vec<f64>,
        outcome: Vec<f64>,
    },
    /// MDP tasks: observed reward and next state.
    Transition { reward: f64, next_state: usize },
}

impl Label {
    pub fn iv(&self, op: &'static str) -> Result<(&[f64], &[f64])> {
        match self {
            Label::Iv { treatment, outcome } => Ok((treatment, outcome)),
            _ => Err(Error::InvalidArg {
                op,
                reason: "expected a regression label (treatment, outcome)".into(),
            }),
        }
    }

    pub fn transition(&self, op: &'static str) -> Result<(f64, usize)> {
        match self {
            Label::Transition { reward, next_state } => Ok((*reward, *next_state)),
            _ => Err(Error::InvalidArg {
                op,
                reason: "expected a transition label (reward, next_state)".into(),
            }),
        }
    }
}

/// `log(sum_i exp(z_i))`, computed shift-invariantly.
pub fn lse(z: &[f64]) -> f64 {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Lagged Q-values on a finite state-action space, with per-state soft
/// values `vbar[s] = lse(q[s, .])` cached. This is the frozen `hbar` the
/// Bellman losses read; the outer loop refreshes it by exponential
/// averaging.
#[derive(Debug, Clone)]
pub struct TargetTable {
    q: Mat,
    state_values: Vec<f64>,
}

impl TargetTable {
    pub fn new(q: Mat) -> TargetTable {
        let state_values = (0..q.rows()).map(|s| lse(q.row(s))).collect();
        TargetTable { q, state_values }
    }

    pub fn q(&self) -> &Mat {
        &self.q
    }

    pub fn n_states(&self) -> usize {
        self.q.rows()
    }

    /// `vbar[s] = lse(q[s, .])`.
    pub fn state_values(&self) -> &[f64] {
        &self.state_values
    }
}

/// Loss value and derivatives in the output variable. The Hessian of every
/// implemented loss in `v` is isotropic, `hess_scale * I_{d_v}`; a dense
/// variant would slot in here if a non-isotropic loss were ever added.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub value: f64,
    pub grad_v: Vec<f64>,
    pub hess_scale: f64,
}

/// A point-wise loss kind with whatever models it closes over.
#[derive(Clone)]
pub enum PointwiseLoss {
    /// `|o - v|^2` — outer regression loss; no `omega` dependence.
    SquaredOuter { d_v: usize },
    /// `|f_omega(t) - v|^2` — inner regression loss against the structural
    /// model.
    SquaredInnerToModel { model: Arc<dyn OuterMap> },
    /// `1/2 (v - T(omega, x))^2` with the model-predicted backup
    /// `T(omega, x) = r_omega(x) + gamma * <s_omega(x), vbar>`. The model
    /// maps `x` to `[r, p_1..p_S]` with `p` already normalized.
    BellmanInner {
        model: Arc<dyn OuterMap>,
        target: Arc<TargetTable>,
        gamma: f64,
    },
    /// `1/2 (v - r' - gamma * lse(qbar[s', .]))^2` on observed transitions;
    /// no `omega` dependence.
    BellmanOuter {
        target: Arc<TargetTable>,
        gamma: f64,
    },
}

impl std::fmt::Debug for PointwiseLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PointwiseLoss::SquaredOuter { .. } => "SquaredOuter",
            PointwiseLoss::SquaredInnerToModel { .. } => "SquaredInnerToModel",
            PointwiseLoss::BellmanInner { .. } => "BellmanInner",
            PointwiseLoss::BellmanOuter { .. } => "BellmanOuter",
        })
    }
}

impl PointwiseLoss {
    /// Output dimension the loss expects of `v`.
    pub fn d_v(&self) -> usize {
        match self {
            PointwiseLoss::SquaredOuter { d_v } => *d_v,
            PointwiseLoss::SquaredInnerToModel { model } => model.out_dim(),
            PointwiseLoss::BellmanInner { .. } | PointwiseLoss::BellmanOuter { .. } => 1,
        }
    }

    /// Strong-convexity modulus in `v` (the `mu` entering bias bounds):
    /// 2 for the squared losses under the `|.|^2` convention, 1 for the
    /// Bellman losses under the `1/2 (.)^2` convention.
    pub fn strong_convexity(&self) -> f64 {
        match self {
            PointwiseLoss::SquaredOuter { .. } | PointwiseLoss::SquaredInnerToModel { .. } => 2.0,
            PointwiseLoss::BellmanInner { .. } | PointwiseLoss::BellmanOuter { .. } => 1.0,
        }
    }

    /// True if the loss reads `omega` (inner losses do, outer losses don't).
    pub fn depends_on_omega(&self) -> bool {
        matches!(
            self,
            PointwiseLoss::SquaredInnerToModel { .. } | PointwiseLoss::BellmanInner { .. }
        )
    }

    /// Model-predicted Bellman backup `T(omega, x)` and the model output it
    /// came from (used by both the bundle and the omega-derivatives).
    fn bellman_inner_target(
        model: &dyn OuterMap,
        target: &TargetTable,
        gamma: f64,
        omega: &ParamVector,
        x: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let out = model.forward(omega, x)?;
        if out.len() != 1 + target.n_states() {
            return Err(Error::Dim {
                op: "bellman_inner model output",
                expected: format!("1 + {} entries", target.n_states()),
                got: format!("{}", out.len()),
            });
        }
        let t = out[0] + gamma * dot(&out[1..], target.state_values());
        Ok((t, out))
    }

    /// Value, gradient, and (isotropic) Hessian of the loss in `v`.
    pub fn eval_bundle(
        &self,
        omega: &ParamVector,
        v: &[f64],
        x: &[f64],
        y: &Label,
    ) -> Result<LossBundle> {
        if v.len() != self.d_v() {
            return Err(Error::Dim {
                op: "eval_bundle",
                expected: format!("v of length {}", self.d_v()),
                got: format!("{}", v.len()),
            });
        }
        match self {
            PointwiseLoss::SquaredOuter { .. } => {
                let (_, o) = y.iv("squared_outer")?;
                let diff: Vec<f64> = v.iter().zip(o).map(|(vi, oi)| vi - oi).collect();
                Ok(LossBundle {
                    value: dot(&diff, &diff),
                    grad_v: diff.iter().map(|d| 2.0 * d).collect(),
                    hess_scale: 2.0,
                })
            }
            PointwiseLoss::SquaredInnerToModel { model } => {
                let (t, _) = y.iv("squared_inner_to_model")?;
                let f = model.forward(omega, t)?;
                let diff: Vec<f64> = v.iter().zip(&f).map(|(vi, fi)| vi - fi).collect();
                Ok(LossBundle {
                    value: dot(&diff, &diff),
                    grad_v: diff.iter().map(|d| 2.0 * d).collect(),
                    hess_scale: 2.0,
                })
            }
            PointwiseLoss::BellmanInner {
                model,
                target,
                gamma,
            } => {
                let (t, _) = Self::bellman_inner_target(model.as_ref(), target, *gamma, omega, x)?;
                let r = v[0] - t;
                Ok(LossBundle {
                    value: 0.5 * r * r,
                    grad_v: vec![r],
                    hess_scale: 1.0,
                })
            }
            PointwiseLoss::BellmanOuter { target, gamma } => {
                let (reward, next_state) = y.transition("bellman_outer")?;
                if next_state >= target.n_states() {
                    return Err(Error::InvalidArg {
                        op: "bellman_outer",
                        reason: format!(
                            "next_state {next_state} out of range {}",
                            target.n_states()
                        ),
                    });
                }
                let t = reward + gamma * target.state_values()[next_state];
                let r = v[0] - t;
                Ok(LossBundle {
                    value: 0.5 * r * r,
                    grad_v: vec![r],
                    hess_scale: 1.0,
                })
            }
        }
    }

    /// Partial gradient of the loss in `omega` at fixed `v`.
    pub fn grad_omega(
        &self,
        omega: &ParamVector,
        v: &[f64],
        x: &[f64],
        y: &Label,
    ) -> Result<ParamVector> {
        match self {
            PointwiseLoss::SquaredOuter { .. } | PointwiseLoss::BellmanOuter { .. } => {
                Ok(ParamVector::zeros(omega.len()))
            }
            PointwiseLoss::SquaredInnerToModel { model } => {
                let (t, _) = y.iv("grad_omega")?;
                let f = model.forward(omega, t)?;
                let cot: Vec<f64> = f.iter().zip(v).map(|(fi, vi)| 2.0 * (fi - vi)).collect();
                model.vjp_params(omega, t, &cot)
            }
            PointwiseLoss::BellmanInner {
                model,
                target,
                gamma,
            } => {
                let (t, _) = Self::bellman_inner_target(model.as_ref(), target, *gamma, omega, x)?;
                // l = 1/2 (v - T)^2, so dl/domega = (T - v) dT/domega with
                // dT/domega = vjp against cotangent [1, gamma * vbar].
                let scale = t - v[0];
                let mut cot = Vec::with_capacity(1 + target.n_states());
                cot.push(scale);
                cot.extend(target.state_values().iter().map(|vb| scale * gamma * vb));
                model.vjp_params(omega, x, &cot)
            }
        }
    }

    /// Mixed derivative applied to an adjoint value:
    /// `d/d omega (a . dl/dv)` at fixed `v`.
    pub fn cross_apply(
        &self,
        omega: &ParamVector,
        _v: &[f64],
        x: &[f64],
        y: &Label,
        a: &[f64],
    ) -> Result<ParamVector> {
        if a.len() != self.d_v() {
            return Err(Error::Dim {
                op: "cross_apply",
                expected: format!("adjoint of length {}", self.d_v()),
                got: format!("{}", a.len()),
            });
        }
        match self {
            PointwiseLoss::SquaredOuter { .. } | PointwiseLoss::BellmanOuter { .. } => {
                Ok(ParamVector::zeros(omega.len()))
            }
            PointwiseLoss::SquaredInnerToModel { model } => {
                // a . dl/dv = 2 a.v - 2 a.f_omega(t)  =>  -2 (df/domega)^T a
                let (t, _) = y.iv("cross_apply")?;
                let cot: Vec<f64> = a.iter().map(|ai| -2.0 * ai).collect();
                model.vjp_params(omega, t, &cot)
            }
            PointwiseLoss::BellmanInner {
                model,
                target,
                gamma,
            } => {
                // a . dl/dv = a (v - T(omega, x))  =>  -a dT/domega
                let scale = -a[0];
                let mut cot = Vec::with_capacity(1 + target.n_states());
                cot.push(scale);
                cot.extend(target.state_values().iter().map(|vb| scale * gamma * vb));
                model.vjp_params(omega, x, &cot)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{FeatureLinearOuter, FeatureMap, LinearOuter, OuterMap};
    use crate::numkit::{fd_directional, rel_err, Rng};

    /// Tiny reward/next-state model for tests: omega = [r logits..] with
    /// r = omega[0] and p = softmax(omega[1..=S]) independent of x.
    struct ConstMdpMap {
        n_states: usize,
        in_dim: usize,
    }

    impl OuterMap for ConstMdpMap {
        fn in_dim(&self) -> usize {
            self.in_dim
        }
        fn out_dim(&self) -> usize {
            1 + self.n_states
        }
        fn param_dim(&self) -> usize {
            1 + self.n_states
        }
        fn init_params(&self, rng: &mut Rng) -> ParamVector {
            ParamVector::from_vec(rng.normal_vec(self.param_dim()))
        }
        fn forward(&self, omega: &ParamVector, _input: &[f64]) -> Result<Vec<f64>> {
            let w = omega.as_slice();
            let m = lse(&w[1..]);
            let mut out = vec![w[0]];
            out.extend(w[1..].iter().map(|l| (l - m).exp()));
            Ok(out)
        }
        fn vjp_params(
            &self,
            omega: &ParamVector,
            input: &[f64],
            cotangent: &[f64],
        ) -> Result<ParamVector> {
            let out = self.forward(omega, input)?;
            let p = &out[1..];
            let cp = dot(&cotangent[1..], p);
            let mut g = vec![cotangent[0]];
            g.extend(
                p.iter()
                    .zip(&cotangent[1..])
                    .map(|(pi, ci)| pi * (ci - cp)),
            );
            Ok(ParamVector::from_vec(g))
        }
    }

    fn fd_grad_omega(
        loss: &PointwiseLoss,
        omega: &ParamVector,
        v: &[f64],
        x: &[f64],
        y: &Label,
    ) -> Vec<f64> {
        let f = |w: &[f64]| {
            let pv = ParamVector::from_vec(w.to_vec());
            vec![loss.eval_bundle(&pv, v, x, y).unwrap().value]
        };
        (0..omega.len())
            .map(|j| {
                let mut e = vec![0.0; omega.len()];
                e[j] = 1.0;
                fd_directional(f, omega.as_slice(), &e, 1e-6)[0]
            })
            .collect()
    }

    #[test]
    fn lse_shift_invariant_and_matches_naive() {
        let z = [0.3, -1.2, 2.5, 0.0];
        let naive = z.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        assert!((lse(&z) - naive).abs() < 1e-12);
        let shifted: Vec<f64> = z.iter().map(|v| v + 123.0).collect();
        assert!((lse(&shifted) - (lse(&z) + 123.0)).abs() < 1e-9);
        // no overflow for large inputs
        assert!((lse(&[1000.0, 1000.0]) - (1000.0 + 2.0_f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn squared_losses_bundle_and_derivatives() {
        let mut rng = Rng::new(1);
        let model = Arc::new(LinearOuter { in_dim: 3, out_dim: 2 });
        let omega = model.init_params(&mut rng);
        let t = rng.normal_vec(3);
        let o = rng.normal_vec(2);
        let v = rng.normal_vec(2);
        let x = rng.normal_vec(4);
        let y = Label::Iv {
            treatment: t.clone(),
            outcome: o.clone(),
        };

        let outer = PointwiseLoss::SquaredOuter { d_v: 2 };
        let b = outer.eval_bundle(&omega, &v, &x, &y).unwrap();
        let want: f64 = v.iter().zip(&o).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!((b.value - want).abs() < 1e-12);
        assert_eq!(b.hess_scale, 2.0);
        assert_eq!(outer.strong_convexity(), 2.0);
        // grad_v by fd
        let fv = |vv: &[f64]| vec![outer.eval_bundle(&omega, vv, &x, &y).unwrap().value];
        for j in 0..2 {
            let mut e = vec![0.0; 2];
            e[j] = 1.0;
            let fd = fd_directional(fv, &v, &e, 1e-6)[0];
            assert!((b.grad_v[j] - fd).abs() < 1e-8);
        }
        assert_eq!(
            outer.grad_omega(&omega, &v, &x, &y).unwrap().as_slice(),
            vec![0.0; omega.len()]
        );

        let inner = PointwiseLoss::SquaredInnerToModel { model: model.clone() };
        let gb = inner.grad_omega(&omega, &v, &x, &y).unwrap();
        let fd = fd_grad_omega(&inner, &omega, &v, &x, &y);
        assert!(rel_err(gb.as_slice(), &fd) < 1e-8, "rel {}", rel_err(gb.as_slice(), &fd));
    }

    #[test]
    fn cross_apply_matches_fd_of_adjoint_pairing() {
        // d/domega (a . dl/dv) checked against fd on the inner squared loss
        let mut rng = Rng::new(2);
        let model = Arc::new(FeatureLinearOuter {
            features: FeatureMap::Poly2,
            in_dim: 2,
            out_dim: 1,
        });
        let omega = ParamVector::from_vec(rng.normal_vec(model.param_dim()));
        let t = rng.normal_vec(2);
        let v = rng.normal_vec(1);
        let x = rng.normal_vec(3);
        let a = rng.normal_vec(1);
        let y = Label::Iv {
            treatment: t,
            outcome: vec![0.0],
        };
        let loss = PointwiseLoss::SquaredInnerToModel { model };
        let got = loss.cross_apply(&omega, &v, &x, &y, &a).unwrap();
        let f = |w: &[f64]| {
            let pv = ParamVector::from_vec(w.to_vec());
            let bundle = loss.eval_bundle(&pv, &v, &x, &y).unwrap();
            vec![dot(&a, &bundle.grad_v)]
        };
        let fd: Vec<f64> = (0..omega.len())
            .map(|j| {
                let mut e = vec![0.0; omega.len()];
                e[j] = 1.0;
                fd_directional(f, omega.as_slice(), &e, 1e-6)[0]
            })
            .collect();
        assert!(rel_err(got.as_slice(), &fd) < 1e-7, "rel {}", rel_err(got.as_slice(), &fd));
    }

    #[test]
    fn bellman_losses_match_fd_and_use_soft_state_values() {
        let mut rng = Rng::new(3);
        let n_states = 4;
        let q = Mat::from_vec(4, 2, rng.normal_vec(8)).unwrap();
        let target = Arc::new(TargetTable::new(q.clone()));
        // vbar really is lse per row
        for s in 0..n_states {
            assert!((target.state_values()[s] - lse(q.row(s))).abs() < 1e-12);
        }
        let gamma = 0.99;
        let model = Arc::new(ConstMdpMap { n_states, in_dim: 6 });
        let omega = ParamVector::from_vec(rng.normal_vec(model.param_dim()));
        let x = rng.normal_vec(6);
        let v = vec![rng.normal()];
        let y = Label::Transition {
            reward: 0.7,
            next_state: 2,
        };

        let inner = PointwiseLoss::BellmanInner {
            model: model.clone(),
            target: target.clone(),
            gamma,
        };
        assert_eq!(inner.d_v(), 1);
        assert_eq!(inner.strong_convexity(), 1.0);
        let b = inner.eval_bundle(&omega, &v, &x, &y).unwrap();
        // manual target: r + gamma * <p, vbar>
        let out = model.forward(&omega, &x).unwrap();
        let t_manual = out[0] + gamma * dot(&out[1..], target.state_values());
        assert!((b.value - 0.5 * (v[0] - t_manual).powi(2)).abs() < 1e-12);
        assert!((b.grad_v[0] - (v[0] - t_manual)).abs() < 1e-12);
        assert_eq!(b.hess_scale, 1.0);

        let g = inner.grad_omega(&omega, &v, &x, &y).unwrap();
        let fd = fd_grad_omega(&inner, &omega, &v, &x, &y);
        assert!(rel_err(g.as_slice(), &fd) < 1e-7, "rel {}", rel_err(g.as_slice(), &fd));

        let a = vec![rng.normal()];
        let ca = inner.cross_apply(&omega, &v, &x, &y, &a).unwrap();
        let f = |w: &[f64]| {
            let pv = ParamVector::from_vec(w.to_vec());
            let bundle = inner.eval_bundle(&pv, &v, &x, &y).unwrap();
            vec![a[0] * bundle.grad_v[0]]
        };
        let fd: Vec<f64> = (0..omega.len())
            .map(|j| {
                let mut e = vec![0.0; omega.len()];
                e[j] = 1.0;
                fd_directional(f, omega.as_slice(), &e, 1e-6)[0]
            })
            .collect();
        assert!(rel_err(ca.as_slice(), &fd) < 1e-7);

        let outer = PointwiseLoss::BellmanOuter { target, gamma };
        let b = outer.eval_bundle(&omega, &v, &x, &y).unwrap();
        let t_out = 0.7 + gamma * lse(q.row(2));
        assert!((b.value - 0.5 * (v[0] - t_out).powi(2)).abs() < 1e-12);
        assert_eq!(
            outer.grad_omega(&omega, &v, &x, &y).unwrap().as_slice(),
            vec![0.0; omega.len()]
        );
    }

    #[test]
    fn label_kind_mismatch_is_an_error() {
        let loss = PointwiseLoss::SquaredOuter { d_v: 1 };
        let omega = ParamVector::zeros(1);
        let y = Label::Transition {
            reward: 0.0,
            next_state: 0,
        };
        assert!(loss.eval_bundle(&omega, &[0.0], &[0.0], &y).is_err());
    }
}
