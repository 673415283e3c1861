//! Linear-Gaussian quadratic testbed.
//!
//! Data: `x ~ U(-1,1)^{d_x}`, signal `t = G x` observed with optional
//! Gaussian noise, outcome `o = W_true (G x) + noise`. The outer model is
//! linear (`f_omega(t) = W t`), the inner and adjoint models are linear in
//! fixed features of `x`, and both losses are squared — so the inner
//! solution, the adjoint, and the reduced outer objective are all exactly
//! computable. Every oracle comparison in the test suite runs here.
//!
//! Two presets matter:
//! - [`QuadConfig::well_conditioned`] orthonormalizes the columns of `G`, so
//!   gradient descent converges fast enough for tight stationarity checks;
//! - [`QuadConfig::realizable`] removes the signal noise and uses raw `x`
//!   features with no ridge, the regime where the parametric and functional
//!   gradients provably coincide.

use std::sync::Arc;

use crate::funcid::{BilevelProblem, Dataset, ModelKind};
use crate::losses::{Label, PointwiseLoss};
use crate::models::{FeatureMap, LinearModel, LinearOuter, ParamVector};
use crate::numkit::{Mat, Rng};
use crate::oracle;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct QuadConfig {
    pub d_x: usize,
    pub d_t: usize,
    pub d_v: usize,
    pub n: usize,
    pub sigma_t: f64,
    pub sigma_o: f64,
    /// Feature map for both the inner and the adjoint model.
    pub features: FeatureMap,
    pub r_in: f64,
    pub r_adj: f64,
    /// Orthonormalize the columns of `G` (requires `d_t >= d_x`).
    pub orthonormal_g: bool,
}

impl QuadConfig {
    /// Default oracle-check instance: mild noise, affine features, matched
    /// small ridges on the inner and adjoint problems (the matched ridge is
    /// what makes the finite-sample gradient identity exact).
    pub fn well_conditioned() -> QuadConfig {
        QuadConfig {
            d_x: 3,
            d_t: 3,
            d_v: 2,
            n: 200,
            sigma_t: 0.05,
            sigma_o: 0.1,
            features: FeatureMap::Affine,
            r_in: 1e-4,
            r_adj: 1e-4,
            orthonormal_g: true,
        }
    }

    /// Noise-free signal, raw features, no ridge: the inner model can
    /// represent `h*` exactly and the feature span contains the signal.
    pub fn realizable() -> QuadConfig {
        QuadConfig {
            sigma_t: 0.0,
            features: FeatureMap::Raw,
            r_in: 0.0,
            r_adj: 0.0,
            ..QuadConfig::well_conditioned()
        }
    }

    /// Same generator as [`QuadConfig::realizable`] but the inner/adjoint
    /// models only see the leading `d_x - 1` coordinates of `x`.
    pub fn under_complete() -> QuadConfig {
        let base = QuadConfig::realizable();
        QuadConfig {
            features: FeatureMap::Prefix(base.d_x - 1),
            ..base
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuadInstance {
    pub cfg: QuadConfig,
    pub g: Mat,
    pub w_true: Mat,
    pub data: Arc<Dataset>,
}

/// Gram–Schmidt orthonormalization of the columns (requires rows >= cols and
/// numerically independent columns, which random Gaussian draws provide).
fn orthonormal_columns(rng: &mut Rng, rows: usize, cols: usize) -> Mat {
    assert!(rows >= cols, "cannot orthonormalize {cols} columns in R^{rows}");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v = rng.normal_vec(rows);
        for b in &basis {
            let proj = crate::numkit::dot(&v, b);
            crate::numkit::axpy(&mut v, -proj, b);
        }
        let nv = crate::numkit::norm2(&v);
        if nv > 1e-8 {
            for x in v.iter_mut() {
                *x /= nv;
            }
            basis.push(v);
        }
    }
    let mut g = Mat::zeros(rows, cols);
    for (j, b) in basis.iter().enumerate() {
        for (i, &bi) in b.iter().enumerate() {
            g.set(i, j, bi);
        }
    }
    g
}

impl QuadInstance {
    pub fn generate(cfg: QuadConfig, seed: u64) -> Result<QuadInstance> {
        if cfg.n == 0 || cfg.d_x == 0 || cfg.d_t == 0 || cfg.d_v == 0 {
            return Err(Error::InvalidArg {
                op: "QuadInstance::generate",
                reason: "all dimensions and the sample count must be >= 1".into(),
            });
        }
        let mut rng = Rng::with_stream(seed, 0x51554144); // stream tag: quad generator
        let g = if cfg.orthonormal_g {
            orthonormal_columns(&mut rng, cfg.d_t, cfg.d_x)
        } else {
            Mat::from_vec(cfg.d_t, cfg.d_x, rng.normal_vec(cfg.d_t * cfg.d_x))?
        };
        let w_true = Mat::from_vec(cfg.d_v, cfg.d_t, rng.normal_vec(cfg.d_v * cfg.d_t))?;

        let mut xs = Mat::zeros(cfg.n, cfg.d_x);
        let mut labels = Vec::with_capacity(cfg.n);
        for i in 0..cfg.n {
            let x: Vec<f64> = (0..cfg.d_x).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            xs.row_mut(i).copy_from_slice(&x);
            let signal = g.matvec(&x)?;
            let mut t = signal.clone();
            if cfg.sigma_t > 0.0 {
                for v in t.iter_mut() {
                    *v += cfg.sigma_t * rng.normal();
                }
            }
            // outcome from the clean signal: noise on t plays the
            // instrument-confounding role and never leaks into o
            let mut o = w_true.matvec(&signal)?;
            if cfg.sigma_o > 0.0 {
                for v in o.iter_mut() {
                    *v += cfg.sigma_o * rng.normal();
                }
            }
            labels.push(Label::Iv {
                treatment: t,
                outcome: o,
            });
        }
        let data = Arc::new(Dataset::new(xs, labels)?);
        Ok(QuadInstance {
            cfg,
            g,
            w_true,
            data,
        })
    }

    pub fn outer_map(&self) -> Arc<LinearOuter> {
        Arc::new(LinearOuter {
            in_dim: self.cfg.d_t,
            out_dim: self.cfg.d_v,
        })
    }

    pub fn inner_model(&self) -> LinearModel {
        LinearModel::new(self.cfg.features.clone(), self.cfg.d_x, self.cfg.d_v)
    }

    /// The bilevel problem: both levels share the one dataset, as the
    /// per-sample adjoint path requires.
    pub fn problem(&self) -> BilevelProblem {
        let outer_map = self.outer_map();
        BilevelProblem {
            inner_loss: PointwiseLoss::SquaredInnerToModel {
                model: outer_map.clone(),
            },
            outer_loss: PointwiseLoss::SquaredOuter { d_v: self.cfg.d_v },
            outer_map,
            d_in: self.data.clone(),
            d_out: self.data.clone(),
            inner_model: ModelKind::Linear(self.inner_model()),
            adjoint_model: ModelKind::Linear(self.inner_model()),
            target_refresh: None,
        }
    }

    pub fn random_omega(&self, rng: &mut Rng) -> ParamVector {
        ParamVector::from_vec(rng.normal_vec(self.cfg.d_v * self.cfg.d_t))
    }

    /// Oracle total gradient by differencing the exactly re-solved reduced
    /// objective.
    pub fn oracle_grad(&self, omega: &ParamVector, eps: f64) -> Result<Vec<f64>> {
        let problem = self.problem();
        let inner = self.inner_model();
        oracle::fd_total_grad(
            &problem.inner_loss,
            &problem.outer_loss,
            omega,
            &inner,
            &self.data,
            &self.data,
            self.cfg.r_in,
            eps,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::dot;

    #[test]
    fn generation_is_deterministic_and_shaped() {
        let a = QuadInstance::generate(QuadConfig::well_conditioned(), 42).unwrap();
        let b = QuadInstance::generate(QuadConfig::well_conditioned(), 42).unwrap();
        assert_eq!(a.data.xs.data(), b.data.xs.data());
        assert_eq!(a.g.data(), b.g.data());
        assert_eq!(a.data.len(), 200);
        assert_eq!(a.data.label(0).iv("test").unwrap().0.len(), 3);
    }

    #[test]
    fn orthonormal_g_has_unit_columns() {
        let inst = QuadInstance::generate(QuadConfig::well_conditioned(), 7).unwrap();
        let gt = inst.g.transpose();
        for i in 0..gt.rows() {
            for j in 0..gt.rows() {
                let d = dot(gt.row(i), gt.row(j));
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-12, "G^T G [{i},{j}] = {d}");
            }
        }
    }

    #[test]
    fn realizable_instance_has_exact_signal() {
        let inst = QuadInstance::generate(QuadConfig::realizable(), 3).unwrap();
        for i in 0..inst.data.len() {
            let (t, _) = inst.data.label(i).iv("test").unwrap();
            let gx = inst.g.matvec(inst.data.x(i)).unwrap();
            assert!(crate::numkit::rel_err(t, &gx) < 1e-15);
        }
    }
}
