//! Desk-scale benchmark problems.
//!
//! - [`quad`]: a linear-Gaussian instrumental-regression testbed where the
//!   inner problem, the adjoint, and the reduced objective all have closed
//!   forms — the ground every gradient-identity and convergence check
//!   stands on;
//! - [`iv`]: a small synthetic instrumental-variable problem with a
//!   quadratic structural function and an additive hidden confounder;
//! - [`mdp`]: a toy tabular MDP for the model-learning bilevel problem,
//!   with soft value iteration as its oracle.

pub mod iv;
pub mod mdp;
pub mod quad;
