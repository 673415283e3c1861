//! Toy tabular MDP for the model-learning bilevel problem.
//!
//! The outer variable is an MDP model (reward head plus transition
//! softmax); the inner problem fits a Q-function to the model-predicted
//! soft Bellman backup against a lagged target table; the outer loss is the
//! sampled Bellman error on real transitions. The model here is
//! deterministic in the sense that it predicts the *expected* next-state
//! one-hot (a soft state) rather than sampling one.
//!
//! Inputs are one-hot `(state, action)` concatenations, so a linear model
//! on pair-indicator features is an exact table and the inner problem's
//! fixed point under the true model is soft value iteration's Q*.

use std::sync::Arc;

use crate::funcid::{BilevelProblem, Dataset, ModelKind, TargetRefresh};
use crate::losses::{lse, Label, PointwiseLoss, TargetTable};
use crate::models::{FeatureMap, LinearModel, Model, OuterMap, ParamVector};
use crate::numkit::{solve_linear, Mat, Rng};
use crate::{Error, Result};

pub const MDP_GAMMA: f64 = 0.99;

#[derive(Debug, Clone)]
pub struct ToyMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// Transition probabilities, row `s * n_actions + a` over next states.
    pub p: Mat,
    /// Deterministic rewards per (state, action), in [0, 1].
    pub r: Mat,
    pub gamma: f64,
}

/// Random MDP: transition rows `Dirichlet(1, ..., 1)`, rewards `U(0,1)`.
pub fn gen_mdp(rng: &mut Rng, n_states: usize, n_actions: usize) -> Result<ToyMdp> {
    if n_states < 2 || n_actions < 2 {
        return Err(Error::InvalidArg {
            op: "gen_mdp",
            reason: "need at least 2 states and 2 actions".into(),
        });
    }
    let mut p = Mat::zeros(n_states * n_actions, n_states);
    for row in 0..n_states * n_actions {
        let simplex = rng.dirichlet_uniform(n_states);
        p.row_mut(row).copy_from_slice(&simplex);
    }
    let mut r = Mat::zeros(n_states, n_actions);
    for v in r.data_mut() {
        *v = rng.uniform();
    }
    Ok(ToyMdp {
        n_states,
        n_actions,
        p,
        r,
        gamma: MDP_GAMMA,
    })
}

/// One-hot encoding `[e_s, e_a]`.
pub fn encode_sa(s: usize, a: usize, n_states: usize, n_actions: usize) -> Vec<f64> {
    let mut x = vec![0.0; n_states + n_actions];
    x[s] = 1.0;
    x[n_states + a] = 1.0;
    x
}

/// All (state, action) encodings, row `s * n_actions + a` — the canonical
/// input set for table extraction.
pub fn all_pair_inputs(n_states: usize, n_actions: usize) -> Mat {
    let mut m = Mat::zeros(n_states * n_actions, n_states + n_actions);
    for s in 0..n_states {
        for a in 0..n_actions {
            m.row_mut(s * n_actions + a)
                .copy_from_slice(&encode_sa(s, a, n_states, n_actions));
        }
    }
    m
}

/// Greedy action per state, ties broken toward the lowest index.
pub fn greedy_policy(q: &Mat) -> Vec<usize> {
    (0..q.rows())
        .map(|s| {
            let row = q.row(s);
            let mut best = 0;
            for (a, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = a;
                }
            }
            best
        })
        .collect()
}

impl ToyMdp {
    /// Fixed point of the backup `Q(s,a) <- R(s,a) + gamma sum_s' P(...)
    /// V(s')`, where `V(s') = alpha * lse(Q(s',.) / alpha)` for `alpha > 0`
    /// and the hard maximum for `alpha = 0`. Iterates until the sup-norm
    /// change is at most `tol`.
    pub fn soft_value_iteration(&self, alpha: f64, tol: f64) -> Mat {
        let mut q = Mat::zeros(self.n_states, self.n_actions);
        loop {
            let values: Vec<f64> = (0..self.n_states)
                .map(|s| {
                    let row = q.row(s);
                    if alpha > 0.0 {
                        let scaled: Vec<f64> = row.iter().map(|v| v / alpha).collect();
                        alpha * lse(&scaled)
                    } else {
                        row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    }
                })
                .collect();
            let mut delta = 0.0f64;
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    let expect = crate::numkit::dot(self.p.row(s * self.n_actions + a), &values);
                    let next = self.r.get(s, a) + self.gamma * expect;
                    delta = delta.max((next - q.get(s, a)).abs());
                    q.set(s, a, next);
                }
            }
            if delta <= tol {
                return q;
            }
        }
    }

    /// Exact state values of a deterministic policy:
    /// `(I - gamma P_pi) v = r_pi`.
    pub fn policy_value(&self, policy: &[usize]) -> Result<Vec<f64>> {
        if policy.len() != self.n_states {
            return Err(Error::Dim {
                op: "policy_value",
                expected: format!("{} actions", self.n_states),
                got: format!("{}", policy.len()),
            });
        }
        let mut m = Mat::identity(self.n_states);
        let mut r_pi = vec![0.0; self.n_states];
        for s in 0..self.n_states {
            let a = policy[s];
            let p_row = self.p.row(s * self.n_actions + a);
            for (sp, &p) in p_row.iter().enumerate() {
                let v = m.get(s, sp) - self.gamma * p;
                m.set(s, sp, v);
            }
            r_pi[s] = self.r.get(s, a);
        }
        solve_linear(&m, &r_pi)
    }

    /// Uniform-random behavior rollout: one chained trajectory of
    /// `(s, a, r', s')` transitions, independent of any learned policy.
    pub fn replay_collect(&self, steps: usize, rng: &mut Rng) -> Result<Dataset> {
        if steps == 0 {
            return Err(Error::InvalidArg {
                op: "replay_collect",
                reason: "steps must be >= 1".into(),
            });
        }
        let mut xs = Mat::zeros(steps, self.n_states + self.n_actions);
        let mut labels = Vec::with_capacity(steps);
        let mut s = rng.choice(self.n_states);
        for i in 0..steps {
            let a = rng.choice(self.n_actions);
            let next = rng.choice_weighted(self.p.row(s * self.n_actions + a));
            xs.row_mut(i)
                .copy_from_slice(&encode_sa(s, a, self.n_states, self.n_actions));
            labels.push(Label::Transition {
                reward: self.r.get(s, a),
                next_state: next,
            });
            s = next;
        }
        Dataset::new(xs, labels)
    }
}

fn decode_block(x: &[f64], op: &'static str) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in x.iter().enumerate() {
        if (v - 1.0).abs() < 1e-9 {
            if hot.is_some() {
                return Err(Error::InvalidArg {
                    op,
                    reason: "input block has more than one active entry".into(),
                });
            }
            hot = Some(i);
        } else if v.abs() > 1e-9 {
            return Err(Error::InvalidArg {
                op,
                reason: "input block is not one-hot".into(),
            });
        }
    }
    hot.ok_or(Error::InvalidArg {
        op,
        reason: "input block has no active entry".into(),
    })
}

fn decode_sa(x: &[f64], n_states: usize, n_actions: usize, op: &'static str) -> Result<(usize, usize)> {
    if x.len() != n_states + n_actions {
        return Err(Error::Dim {
            op,
            expected: format!("{} inputs", n_states + n_actions),
            got: format!("{}", x.len()),
        });
    }
    let s = decode_block(&x[..n_states], op)?;
    let a = decode_block(&x[n_states..], op)?;
    Ok((s, a))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let z = lse(logits);
    logits.iter().map(|l| (l - z).exp()).collect()
}

/// `p (c - <c, p>)` — the vector-Jacobian product of a softmax.
fn softmax_vjp(p: &[f64], c: &[f64]) -> Vec<f64> {
    let cp = crate::numkit::dot(c, p);
    p.iter().zip(c).map(|(pi, ci)| pi * (ci - cp)).collect()
}

/// Fully parameterized tabular MDP model: a reward entry and a row of
/// transition logits per (state, action). Output is `[r, p_1 .. p_S]`.
#[derive(Debug, Clone)]
pub struct MdpModelFull {
    pub n_states: usize,
    pub n_actions: usize,
}

impl MdpModelFull {
    fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    /// Parameters reproducing an exact MDP: rewards copied, logits `ln P`.
    pub fn params_from(&self, mdp: &ToyMdp) -> ParamVector {
        let mut theta = vec![0.0; self.n_pairs() * (1 + self.n_states)];
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let pair = s * self.n_actions + a;
                theta[pair] = mdp.r.get(s, a);
                for sp in 0..self.n_states {
                    theta[self.n_pairs() + pair * self.n_states + sp] =
                        mdp.p.get(pair, sp).ln();
                }
            }
        }
        ParamVector::from_vec(theta)
    }
}

impl OuterMap for MdpModelFull {
    fn in_dim(&self) -> usize {
        self.n_states + self.n_actions
    }

    fn out_dim(&self) -> usize {
        1 + self.n_states
    }

    fn param_dim(&self) -> usize {
        self.n_pairs() * (1 + self.n_states)
    }

    fn init_params(&self, _rng: &mut Rng) -> ParamVector {
        // zero rewards, uniform transitions
        ParamVector::zeros(self.param_dim())
    }

    fn forward(&self, omega: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
        let (s, a) = decode_sa(input, self.n_states, self.n_actions, "MdpModelFull::forward")?;
        let pair = s * self.n_actions + a;
        let w = omega.as_slice();
        let logits = &w[self.n_pairs() + pair * self.n_states..][..self.n_states];
        let mut out = Vec::with_capacity(1 + self.n_states);
        out.push(w[pair]);
        out.extend(softmax(logits));
        Ok(out)
    }

    fn vjp_params(
        &self,
        omega: &ParamVector,
        input: &[f64],
        cotangent: &[f64],
    ) -> Result<ParamVector> {
        let (s, a) = decode_sa(input, self.n_states, self.n_actions, "MdpModelFull::vjp")?;
        let pair = s * self.n_actions + a;
        let w = omega.as_slice();
        let logits = &w[self.n_pairs() + pair * self.n_states..][..self.n_states];
        let p = softmax(logits);
        let mut grad = ParamVector::zeros(self.param_dim());
        let g = grad.as_mut_slice();
        g[pair] = cotangent[0];
        let dlogits = softmax_vjp(&p, &cotangent[1..]);
        g[self.n_pairs() + pair * self.n_states..][..self.n_states].copy_from_slice(&dlogits);
        Ok(grad)
    }
}

/// Misspecified model: full reward table, but transition logits constrained
/// to a rank-`rank` factorization `L = U V` (`U`: pairs x rank, `V`:
/// rank x states). The analog of an under-capacity network.
#[derive(Debug, Clone)]
pub struct MdpModelLowRank {
    pub n_states: usize,
    pub n_actions: usize,
    pub rank: usize,
}

impl MdpModelLowRank {
    fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    fn split<'a>(&self, w: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let np = self.n_pairs();
        let u_len = np * self.rank;
        (&w[..np], &w[np..np + u_len], &w[np + u_len..])
    }
}

impl OuterMap for MdpModelLowRank {
    fn in_dim(&self) -> usize {
        self.n_states + self.n_actions
    }

    fn out_dim(&self) -> usize {
        1 + self.n_states
    }

    fn param_dim(&self) -> usize {
        self.n_pairs() * (1 + self.rank) + self.rank * self.n_states
    }

    fn init_params(&self, rng: &mut Rng) -> ParamVector {
        // factor entries need symmetry breaking; rewards start at zero
        let np = self.n_pairs();
        let mut theta = vec![0.0; self.param_dim()];
        for v in theta[np..].iter_mut() {
            *v = 0.1 * rng.normal();
        }
        ParamVector::from_vec(theta)
    }

    fn forward(&self, omega: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
        let (s, a) = decode_sa(input, self.n_states, self.n_actions, "MdpModelLowRank::forward")?;
        let pair = s * self.n_actions + a;
        let (r, u, v) = self.split(omega.as_slice());
        let u_row = &u[pair * self.rank..][..self.rank];
        let logits: Vec<f64> = (0..self.n_states)
            .map(|sp| {
                (0..self.rank)
                    .map(|j| u_row[j] * v[j * self.n_states + sp])
                    .sum()
            })
            .collect();
        let mut out = Vec::with_capacity(1 + self.n_states);
        out.push(r[pair]);
        out.extend(softmax(&logits));
        Ok(out)
    }

    fn vjp_params(
        &self,
        omega: &ParamVector,
        input: &[f64],
        cotangent: &[f64],
    ) -> Result<ParamVector> {
        let (s, a) = decode_sa(input, self.n_states, self.n_actions, "MdpModelLowRank::vjp")?;
        let pair = s * self.n_actions + a;
        let (_, u, v) = self.split(omega.as_slice());
        let u_row = &u[pair * self.rank..][..self.rank];
        let logits: Vec<f64> = (0..self.n_states)
            .map(|sp| {
                (0..self.rank)
                    .map(|j| u_row[j] * v[j * self.n_states + sp])
                    .sum()
            })
            .collect();
        let p = softmax(&logits);
        let dlogits = softmax_vjp(&p, &cotangent[1..]);

        let np = self.n_pairs();
        let mut grad = ParamVector::zeros(self.param_dim());
        let g = grad.as_mut_slice();
        g[pair] = cotangent[0];
        for j in 0..self.rank {
            let mut du = 0.0;
            for sp in 0..self.n_states {
                du += v[j * self.n_states + sp] * dlogits[sp];
                g[np + np * self.rank + j * self.n_states + sp] += u_row[j] * dlogits[sp];
            }
            g[np + pair * self.rank + j] = du;
        }
        Ok(grad)
    }
}

/// Assembles the bilevel problem: tabular linear Q-model, Bellman losses
/// sharing a zero-initialized lagged table, and the replay buffer at both
/// levels (the closed-form adjoint path needs a shared batch).
pub fn make_rl_problem(
    mdp: &ToyMdp,
    buffer: Arc<Dataset>,
    model: Arc<dyn OuterMap>,
) -> BilevelProblem {
    let (s_n, a_n) = (mdp.n_states, mdp.n_actions);
    let table = Arc::new(TargetTable::new(Mat::zeros(s_n, a_n)));
    let q_model = LinearModel::new(
        FeatureMap::PairOneHot {
            left: s_n,
            right: a_n,
        },
        s_n + a_n,
        1,
    );
    BilevelProblem {
        outer_map: model.clone(),
        inner_loss: PointwiseLoss::BellmanInner {
            model,
            target: table.clone(),
            gamma: mdp.gamma,
        },
        outer_loss: PointwiseLoss::BellmanOuter {
            target: table,
            gamma: mdp.gamma,
        },
        d_in: buffer.clone(),
        d_out: buffer,
        inner_model: ModelKind::Linear(q_model.clone()),
        adjoint_model: ModelKind::Linear(q_model),
        target_refresh: Some(TargetRefresh {
            all_inputs: all_pair_inputs(s_n, a_n),
            n_states: s_n,
            n_actions: a_n,
            init: Mat::zeros(s_n, a_n),
        }),
    }
}

/// Q-table of a tabular linear model (pair-indicator features).
pub fn q_table_of(model: &LinearModel, theta: &ParamVector, n_states: usize, n_actions: usize) -> Result<Mat> {
    let vals = model.forward(theta, &all_pair_inputs(n_states, n_actions))?;
    let mut q = Mat::zeros(n_states, n_actions);
    for s in 0..n_states {
        for a in 0..n_actions {
            q.set(s, a, vals.get(s * n_actions + a, 0));
        }
    }
    Ok(q)
}
