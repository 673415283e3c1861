//! Function approximators with hand-written reverse-mode gradients.
//!
//! Two families cover every role in the toolkit:
//! - [`Mlp`]: a fully-connected network used for inner models, adjoint
//!   models, and nonlinear outer models;
//! - [`LinearModel`]: weights on a fixed feature map, the workhorse for
//!   closed-form inner/adjoint solves.
//!
//! Both expose the same [`Model`] interface: batched `forward` and
//! `vjp_params` (the gradient of `sum_i c_i . f(x_i)` with respect to the
//! flat parameter vector). The parameter layout is pinned — per layer,
//! weights (row-major, out x in) then biases — so checkpoints are portable.

use crate::numkit::{axpy, dot, Mat, Rng};
use crate::{Error, Result};

/// Point-wise activation. `relu` uses derivative 0 at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative as a function of the pre-activation.
    #[inline]
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Activation> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Architecture of a fully-connected network: `layer_widths` runs from input
/// to output dimension, `activations` has one entry per linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    /// Hidden layers all use `hidden`; the output layer is linear.
    pub fn new(layer_widths: Vec<usize>, hidden: Activation) -> Result<MlpSpec> {
        if layer_widths.len() < 2 {
            return Err(Error::InvalidArg {
                op: "MlpSpec::new",
                reason: "need at least input and output widths".into(),
            });
        }
        let n_layers = layer_widths.len() - 1;
        let mut activations = vec![hidden; n_layers];
        activations[n_layers - 1] = Activation::Identity;
        MlpSpec::with_activations(layer_widths, activations)
    }

    pub fn with_activations(
        layer_widths: Vec<usize>,
        activations: Vec<Activation>,
    ) -> Result<MlpSpec> {
        if layer_widths.len() < 2 || layer_widths.contains(&0) {
            return Err(Error::InvalidArg {
                op: "MlpSpec::with_activations",
                reason: format!("bad layer widths {layer_widths:?}"),
            });
        }
        if activations.len() != layer_widths.len() - 1 {
            return Err(Error::InvalidArg {
                op: "MlpSpec::with_activations",
                reason: format!(
                    "{} activations for {} layers",
                    activations.len(),
                    layer_widths.len() - 1
                ),
            });
        }
        Ok(MlpSpec {
            layer_widths,
            activations,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn param_dim(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Flat parameter vector. Layout: for each layer in order, the weight matrix
/// (row-major, out x in) followed by the bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(n: usize) -> ParamVector {
        ParamVector { data: vec![0.0; n] }
    }

    pub fn from_vec(data: Vec<f64>) -> ParamVector {
        ParamVector { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        axpy(&mut self.data, alpha, &other.data);
    }

    pub fn scale(&mut self, alpha: f64) {
        crate::numkit::scale(&mut self.data, alpha);
    }

    pub fn norm2(&self) -> f64 {
        crate::numkit::norm2(&self.data)
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn max_abs(&self) -> f64 {
        crate::numkit::max_abs(&self.data)
    }
}

/// Common interface for inner and adjoint function approximators.
pub trait Model {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn param_dim(&self) -> usize;

    /// Glorot-uniform weights, zero biases, deterministic under `rng`.
    fn init_params(&self, rng: &mut Rng) -> ParamVector;

    /// Evaluates the model on every row of `xs`; returns an `n x out_dim`
    /// matrix.
    fn forward(&self, params: &ParamVector, xs: &Mat) -> Result<Mat>;

    /// Gradient of `sum_i cotangents[i] . f(xs[i])` with respect to params.
    fn vjp_params(&self, params: &ParamVector, xs: &Mat, cotangents: &Mat) -> Result<ParamVector>;

    /// Floating-point work model for one batched forward (used by cost
    /// accounting; multiply-adds count as two).
    fn forward_flops(&self, batch: usize) -> u64;

    /// Work model for one batched vjp (forward + backward sweeps).
    fn vjp_flops(&self, batch: usize) -> u64;
}

/// Fully-connected network.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Mlp {
        Mlp { spec }
    }

    fn check_params(&self, params: &ParamVector, op: &'static str) -> Result<()> {
        if params.len() != self.param_dim() {
            return Err(Error::Dim {
                op: "mlp params",
                expected: format!("{} ({op})", self.param_dim()),
                got: format!("{}", params.len()),
            });
        }
        Ok(())
    }

    /// Forward pass keeping pre-activations and activations per layer (the
    /// state the backward sweep needs).
    fn forward_trace(&self, params: &ParamVector, xs: &Mat) -> Result<(Vec<Mat>, Vec<Mat>)> {
        let widths = &self.spec.layer_widths;
        let n = xs.rows();
        let mut acts: Vec<Mat> = vec![xs.clone()];
        let mut pres: Vec<Mat> = Vec::new();
        let mut offset = 0;
        let p = params.as_slice();
        for (l, w) in widths.windows(2).enumerate() {
            let (din, dout) = (w[0], w[1]);
            let wmat = &p[offset..offset + dout * din];
            let bias = &p[offset + dout * din..offset + dout * din + dout];
            offset += dout * din + dout;
            let prev = &acts[l];
            let mut pre = Mat::zeros(n, dout);
            for i in 0..n {
                let row_in = prev.row(i);
                let row_out = pre.row_mut(i);
                for (j, out) in row_out.iter_mut().enumerate() {
                    *out = dot(&wmat[j * din..(j + 1) * din], row_in) + bias[j];
                }
            }
            let act = self.spec.activations[l];
            let mut a = pre.clone();
            for v in a.data_mut() {
                *v = act.apply(*v);
            }
            pres.push(pre);
            acts.push(a);
        }
        Ok((pres, acts))
    }
}

impl Model for Mlp {
    fn in_dim(&self) -> usize {
        self.spec.in_dim()
    }

    fn out_dim(&self) -> usize {
        self.spec.out_dim()
    }

    fn param_dim(&self) -> usize {
        self.spec.param_dim()
    }

    fn init_params(&self, rng: &mut Rng) -> ParamVector {
        let mut data = Vec::with_capacity(self.param_dim());
        for w in self.spec.layer_widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                data.push(rng.uniform_in(-bound, bound));
            }
            data.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVector::from_vec(data)
    }

    fn forward(&self, params: &ParamVector, xs: &Mat) -> Result<Mat> {
        self.check_params(params, "forward")?;
        if xs.cols() != self.in_dim() {
            return Err(Error::Dim {
                op: "mlp forward",
                expected: format!("inputs of width {}", self.in_dim()),
                got: format!("{}", xs.cols()),
            });
        }
        let (_, mut acts) = self.forward_trace(params, xs)?;
        Ok(acts.pop().unwrap())
    }

    fn vjp_params(&self, params: &ParamVector, xs: &Mat, cotangents: &Mat) -> Result<ParamVector> {
        self.check_params(params, "vjp")?;
        if cotangents.rows() != xs.rows() || cotangents.cols() != self.out_dim() {
            return Err(Error::Dim {
                op: "mlp vjp cotangents",
                expected: format!("{}x{}", xs.rows(), self.out_dim()),
                got: format!("{}x{}", cotangents.rows(), cotangents.cols()),
            });
        }
        let (pres, acts) = self.forward_trace(params, xs)?;
        let widths = &self.spec.layer_widths;
        let n_layers = widths.len() - 1;
        let n = xs.rows();
        let mut grad = ParamVector::zeros(self.param_dim());

        // layer parameter offsets
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in widths.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }

        // delta starts as cotangent ⊙ act'(pre) of the last layer
        let mut delta = cotangents.clone();
        for l in (0..n_layers).rev() {
            let (din, dout) = (widths[l], widths[l + 1]);
            let act = self.spec.activations[l];
            let pre = &pres[l];
            for i in 0..n {
                let drow = delta.row_mut(i);
                let prow = pre.row(i);
                for (d, z) in drow.iter_mut().zip(prow) {
                    *d *= act.deriv(*z);
                }
            }
            // accumulate grads: dW_l = sum_i delta_i a_{l-1,i}^T ; db_l = sum_i delta_i
            let base = offsets[l];
            {
                let g = grad.as_mut_slice();
                let prev = &acts[l];
                for i in 0..n {
                    let drow = delta.row(i);
                    let arow = prev.row(i);
                    for (j, dj) in drow.iter().enumerate() {
                        if *dj != 0.0 {
                            axpy(&mut g[base + j * din..base + (j + 1) * din], *dj, arow);
                        }
                    }
                    axpy(&mut g[base + dout * din..base + dout * din + dout], 1.0, drow);
                }
            }
            // propagate to previous layer: delta_prev = delta W_l
            if l > 0 {
                let p = params.as_slice();
                let wmat = &p[base..base + dout * din];
                let mut prev_delta = Mat::zeros(n, din);
                for i in 0..n {
                    let drow = delta.row(i);
                    let out = prev_delta.row_mut(i);
                    for (j, dj) in drow.iter().enumerate() {
                        if *dj != 0.0 {
                            axpy(out, *dj, &wmat[j * din..(j + 1) * din]);
                        }
                    }
                }
                delta = prev_delta;
            }
        }
        Ok(grad)
    }

    fn forward_flops(&self, batch: usize) -> u64 {
        let per_sample: u64 = self
            .spec
            .layer_widths
            .windows(2)
            .map(|w| 2 * (w[0] * w[1]) as u64)
            .sum();
        per_sample * batch as u64
    }

    fn vjp_flops(&self, batch: usize) -> u64 {
        // forward trace + backward matvec + gradient outer products
        3 * self.forward_flops(batch)
    }
}

/// Fixed feature maps for [`LinearModel`] (and feature-linear outer models).
#[derive(Debug, Clone)]
pub enum FeatureMap {
    /// `phi(x) = x`.
    Raw,
    /// `phi(x) = [1, x]`.
    Affine,
    /// `phi(x) = [1, x, x_i x_j for i <= j]` — full degree-2 polynomial.
    Poly2,
    /// `phi(x) = x[..k]` — a deliberately under-complete view of the input.
    Prefix(usize),
    /// Input is a concatenation of two one-hot blocks of widths `left` and
    /// `right`; the features are their outer product flattened row-major
    /// (an indicator per (left, right) pair).
    PairOneHot { left: usize, right: usize },
    /// Last hidden layer of a frozen network, with a constant 1 appended so
    /// the linear head has a bias.
    FrozenMlp { mlp: Mlp, params: ParamVector },
}

impl FeatureMap {
    pub fn dim(&self, in_dim: usize) -> usize {
        match self {
            FeatureMap::Raw => in_dim,
            FeatureMap::Affine => in_dim + 1,
            FeatureMap::Poly2 => 1 + in_dim + in_dim * (in_dim + 1) / 2,
            FeatureMap::Prefix(k) => *k,
            FeatureMap::PairOneHot { left, right } => left * right,
            FeatureMap::FrozenMlp { mlp, .. } => {
                let w = &mlp.spec.layer_widths;
                w[w.len() - 2] + 1
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FeatureMap::Raw => x.to_vec(),
            FeatureMap::Affine => {
                let mut out = Vec::with_capacity(x.len() + 1);
                out.push(1.0);
                out.extend_from_slice(x);
                out
            }
            FeatureMap::Poly2 => {
                let d = x.len();
                let mut out = Vec::with_capacity(1 + d + d * (d + 1) / 2);
                out.push(1.0);
                out.extend_from_slice(x);
                for i in 0..d {
                    for j in i..d {
                        out.push(x[i] * x[j]);
                    }
                }
                out
            }
            FeatureMap::Prefix(k) => x[..*k].to_vec(),
            FeatureMap::PairOneHot { left, right } => {
                debug_assert_eq!(x.len(), left + right);
                let (u, v) = x.split_at(*left);
                let mut out = Vec::with_capacity(left * right);
                for ui in u {
                    for vj in v {
                        out.push(ui * vj);
                    }
                }
                out
            }
            FeatureMap::FrozenMlp { mlp, params } => {
                let xs = Mat::from_vec(1, x.len(), x.to_vec()).expect("row");
                let (_, acts) = mlp
                    .forward_trace(params, &xs)
                    .expect("frozen feature forward");
                // activations of the second-to-last layer
                let hidden = acts[acts.len() - 2].row(0).to_vec();
                let mut out = hidden;
                out.push(1.0);
                out
            }
        }
    }

    /// Feature matrix for a batch: row i is `phi(xs[i])`.
    pub fn apply_batch(&self, xs: &Mat) -> Mat {
        let d1 = self.dim(xs.cols());
        let mut out = Mat::zeros(xs.rows(), d1);
        for i in 0..xs.rows() {
            let phi = self.apply(xs.row(i));
            out.row_mut(i).copy_from_slice(&phi);
        }
        out
    }

    pub fn name(&self) -> String {
        match self {
            FeatureMap::Raw => "raw".into(),
            FeatureMap::Affine => "affine".into(),
            FeatureMap::Poly2 => "poly2".into(),
            FeatureMap::Prefix(k) => format!("prefix:{k}"),
            FeatureMap::PairOneHot { left, right } => format!("pair:{left}x{right}"),
            FeatureMap::FrozenMlp { .. } => "frozen-mlp".into(),
        }
    }

    /// Work model for evaluating one feature vector.
    fn flops(&self, in_dim: usize) -> u64 {
        match self {
            FeatureMap::Poly2 => (in_dim * (in_dim + 1) / 2) as u64,
            FeatureMap::PairOneHot { left, right } => (left * right) as u64,
            FeatureMap::FrozenMlp { mlp, .. } => mlp.forward_flops(1),
            _ => in_dim as u64,
        }
    }
}

/// Linear model `f(x) = W phi(x)` on a fixed feature map. Parameters are
/// `vec(W)` row-major (out x features); there is no separate bias — use an
/// affine feature map instead.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub features: FeatureMap,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearModel {
    pub fn new(features: FeatureMap, in_dim: usize, out_dim: usize) -> LinearModel {
        LinearModel {
            features,
            in_dim,
            out_dim,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim(self.in_dim)
    }

    /// The n x d1 feature matrix used by the closed-form solvers.
    pub fn features_mat(&self, xs: &Mat) -> Mat {
        self.features.apply_batch(xs)
    }

    /// Reads the weight matrix view out of a flat parameter vector.
    pub fn weights<'a>(&self, params: &'a ParamVector) -> &'a [f64] {
        params.as_slice()
    }
}

impl Model for LinearModel {
    fn in_dim(&self) -> usize {
        self.in_dim
    }

    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn param_dim(&self) -> usize {
        self.out_dim * self.feature_dim()
    }

    fn init_params(&self, rng: &mut Rng) -> ParamVector {
        let (fan_in, fan_out) = (self.feature_dim(), self.out_dim);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        ParamVector::from_vec(
            (0..fan_in * fan_out)
                .map(|_| rng.uniform_in(-bound, bound))
                .collect(),
        )
    }

    fn forward(&self, params: &ParamVector, xs: &Mat) -> Result<Mat> {
        if params.len() != self.param_dim() {
            return Err(Error::Dim {
                op: "linear params",
                expected: format!("{}", self.param_dim()),
                got: format!("{}", params.len()),
            });
        }
        let d1 = self.feature_dim();
        let w = params.as_slice();
        let mut out = Mat::zeros(xs.rows(), self.out_dim);
        for i in 0..xs.rows() {
            let phi = self.features.apply(xs.row(i));
            let row = out.row_mut(i);
            for (k, r) in row.iter_mut().enumerate() {
                *r = dot(&w[k * d1..(k + 1) * d1], &phi);
            }
        }
        Ok(out)
    }

    fn vjp_params(&self, params: &ParamVector, xs: &Mat, cotangents: &Mat) -> Result<ParamVector> {
        if params.len() != self.param_dim() {
            return Err(Error::Dim {
                op: "linear vjp params",
                expected: format!("{}", self.param_dim()),
                got: format!("{}", params.len()),
            });
        }
        if cotangents.rows() != xs.rows() || cotangents.cols() != self.out_dim {
            return Err(Error::Dim {
                op: "linear vjp cotangents",
                expected: format!("{}x{}", xs.rows(), self.out_dim),
                got: format!("{}x{}", cotangents.rows(), cotangents.cols()),
            });
        }
        let d1 = self.feature_dim();
        let mut grad = ParamVector::zeros(self.param_dim());
        let g = grad.as_mut_slice();
        for i in 0..xs.rows() {
            let phi = self.features.apply(xs.row(i));
            let c = cotangents.row(i);
            for (k, ck) in c.iter().enumerate() {
                if *ck != 0.0 {
                    axpy(&mut g[k * d1..(k + 1) * d1], *ck, &phi);
                }
            }
        }
        Ok(grad)
    }

    fn forward_flops(&self, batch: usize) -> u64 {
        let d1 = self.feature_dim() as u64;
        batch as u64 * (self.features.flops(self.in_dim) + 2 * d1 * self.out_dim as u64)
    }

    fn vjp_flops(&self, batch: usize) -> u64 {
        2 * self.forward_flops(batch)
    }
}

/// Per-sample Jacobian `d f(x) / d params` as an `out_dim x param_dim`
/// matrix, assembled row by row through `vjp_params` with unit cotangents.
pub fn param_jacobian(model: &dyn Model, params: &ParamVector, x: &[f64]) -> Result<Mat> {
    let xs = Mat::from_vec(1, x.len(), x.to_vec())?;
    let mut jac = Mat::zeros(model.out_dim(), model.param_dim());
    for k in 0..model.out_dim() {
        let mut c = Mat::zeros(1, model.out_dim());
        c.set(0, k, 1.0);
        let row = model.vjp_params(params, &xs, &c)?;
        jac.row_mut(k).copy_from_slice(row.as_slice());
    }
    Ok(jac)
}

/// Models that map the outer variable `omega` and a task input to an output
/// vector: the structural model `f_omega(t)` in the regression tasks, or the
/// reward/next-state model in the MDP task.
pub trait OuterMap: Send + Sync {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn init_params(&self, rng: &mut Rng) -> ParamVector;
    fn forward(&self, omega: &ParamVector, input: &[f64]) -> Result<Vec<f64>>;
    /// Gradient of `cotangent . f_omega(input)` with respect to `omega`.
    fn vjp_params(
        &self,
        omega: &ParamVector,
        input: &[f64],
        cotangent: &[f64],
    ) -> Result<ParamVector>;
}

/// `f_omega(t) = W t` with `omega = vec(W)` row-major.
#[derive(Debug, Clone)]
pub struct LinearOuter {
    pub in_dim: usize,
    pub out_dim: usize,
}

impl OuterMap for LinearOuter {
    fn in_dim(&self) -> usize {
        self.in_dim
    }

    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn param_dim(&self) -> usize {
        self.in_dim * self.out_dim
    }

    fn init_params(&self, rng: &mut Rng) -> ParamVector {
        let bound = (6.0 / (self.in_dim + self.out_dim) as f64).sqrt();
        ParamVector::from_vec(
            (0..self.param_dim())
                .map(|_| rng.uniform_in(-bound, bound))
                .collect(),
        )
    }

    fn forward(&self, omega: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
        let w = omega.as_slice();
        Ok((0..self.out_dim)
            .map(|k| dot(&w[k * self.in_dim..(k + 1) * self.in_dim], input))
            .collect())
    }

    fn vjp_params(
        &self,
        omega: &ParamVector,
        input: &[f64],
        cotangent: &[f64],
    ) -> Result<ParamVector> {
        let mut grad = ParamVector::zeros(omega.len());
        let g = grad.as_mut_slice();
        for (k, ck) in cotangent.iter().enumerate() {
            if *ck != 0.0 {
                axpy(&mut g[k * self.in_dim..(k + 1) * self.in_dim], *ck, input);
            }
        }
        Ok(grad)
    }
}

/// `f_omega(t) = W q(t)` for a fixed feature map `q` — linear in `omega`
/// but as expressive in `t` as the features allow.
#[derive(Debug, Clone)]
pub struct FeatureLinearOuter {
    pub features: FeatureMap,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl FeatureLinearOuter {
    pub fn feature_dim(&self) -> usize {
        self.features.dim(self.in_dim)
    }
}

impl OuterMap for FeatureLinearOuter {
    fn in_dim(&self) -> usize {
        self.in_dim
    }

    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn param_dim(&self) -> usize {
        self.feature_dim() * self.out_dim
    }

    fn init_params(&self, _rng: &mut Rng) -> ParamVector {
        // zero start: the outer loop's first steps stay in a sane range even
        // when individual features are large
        ParamVector::zeros(self.param_dim())
    }

    fn forward(&self, omega: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
        let q = self.features.apply(input);
        let d1 = q.len();
        let w = omega.as_slice();
        Ok((0..self.out_dim)
            .map(|k| dot(&w[k * d1..(k + 1) * d1], &q))
            .collect())
    }

    fn vjp_params(
        &self,
        omega: &ParamVector,
        input: &[f64],
        cotangent: &[f64],
    ) -> Result<ParamVector> {
        let q = self.features.apply(input);
        let d1 = q.len();
        let mut grad = ParamVector::zeros(omega.len());
        let g = grad.as_mut_slice();
        for (k, ck) in cotangent.iter().enumerate() {
            if *ck != 0.0 {
                axpy(&mut g[k * d1..(k + 1) * d1], *ck, &q);
            }
        }
        Ok(grad)
    }
}

/// MLP-backed outer model.
#[derive(Debug, Clone)]
pub struct MlpOuter {
    pub mlp: Mlp,
}

impl OuterMap for MlpOuter {
    fn in_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    fn out_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    fn param_dim(&self) -> usize {
        self.mlp.param_dim()
    }

    fn init_params(&self, rng: &mut Rng) -> ParamVector {
        Model::init_params(&self.mlp, rng)
    }

    fn forward(&self, omega: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
        let xs = Mat::from_vec(1, input.len(), input.to_vec())?;
        let out = self.mlp.forward(omega, &xs)?;
        Ok(out.row(0).to_vec())
    }

    fn vjp_params(
        &self,
        omega: &ParamVector,
        input: &[f64],
        cotangent: &[f64],
    ) -> Result<ParamVector> {
        let xs = Mat::from_vec(1, input.len(), input.to_vec())?;
        let c = Mat::from_vec(1, cotangent.len(), cotangent.to_vec())?;
        self.mlp.vjp_params(omega, &xs, &c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{fd_directional, rel_err};

    fn fd_param_grad(
        model: &dyn Model,
        params: &ParamVector,
        xs: &Mat,
        cotangents: &Mat,
    ) -> Vec<f64> {
        // gradient of g(p) = sum_i c_i . f_p(x_i) by central differences
        let g = |p: &[f64]| {
            let pv = ParamVector::from_vec(p.to_vec());
            let out = model.forward(&pv, xs).unwrap();
            let mut s = 0.0;
            for i in 0..out.rows() {
                s += dot(out.row(i), cotangents.row(i));
            }
            vec![s]
        };
        (0..params.len())
            .map(|j| {
                let mut e = vec![0.0; params.len()];
                e[j] = 1.0;
                fd_directional(g, params.as_slice(), &e, 1e-6)[0]
            })
            .collect()
    }

    #[test]
    fn mlp_forward_matches_manual_single_layer() {
        // widths [2,1], identity: f(x) = w.x + b
        let spec = MlpSpec::new(vec![2, 1], Activation::Identity).unwrap();
        let mlp = Mlp::new(spec);
        let params = ParamVector::from_vec(vec![2.0, -1.0, 0.5]);
        let xs = Mat::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        let out = mlp.forward(&params, &xs).unwrap();
        assert_eq!(out.get(0, 0), 2.0 * 3.0 - 4.0 + 0.5);
    }

    #[test]
    fn mlp_vjp_matches_finite_differences_tanh() {
        let spec = MlpSpec::new(vec![3, 5, 2], Activation::Tanh).unwrap();
        let mlp = Mlp::new(spec);
        let mut rng = Rng::new(10);
        let params = mlp.init_params(&mut rng);
        let xs = Mat::from_vec(4, 3, rng.normal_vec(12)).unwrap();
        let cot = Mat::from_vec(4, 2, rng.normal_vec(8)).unwrap();
        let grad = mlp.vjp_params(&params, &xs, &cot).unwrap();
        let fd = fd_param_grad(&mlp, &params, &xs, &cot);
        assert!(
            rel_err(grad.as_slice(), &fd) < 1e-7,
            "vjp vs fd rel err {}",
            rel_err(grad.as_slice(), &fd)
        );
    }

    #[test]
    fn mlp_vjp_matches_finite_differences_relu() {
        let spec = MlpSpec::new(vec![2, 8, 1], Activation::Relu).unwrap();
        let mlp = Mlp::new(spec);
        let mut rng = Rng::new(11);
        let params = mlp.init_params(&mut rng);
        // keep pre-activations away from the kink so fd is valid
        let xs = Mat::from_vec(3, 2, vec![0.9, 0.7, -0.8, 0.3, 0.5, -0.6]).unwrap();
        let cot = Mat::from_vec(3, 1, vec![1.0, -2.0, 0.5]).unwrap();
        let grad = mlp.vjp_params(&params, &xs, &cot).unwrap();
        let fd = fd_param_grad(&mlp, &params, &xs, &cot);
        assert!(
            rel_err(grad.as_slice(), &fd) < 1e-6,
            "vjp vs fd rel err {}",
            rel_err(grad.as_slice(), &fd)
        );
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        assert_eq!(Activation::Relu.deriv(0.0), 0.0);
        assert_eq!(Activation::Relu.deriv(-1e-12), 0.0);
        assert_eq!(Activation::Relu.deriv(1e-12), 1.0);
    }

    #[test]
    fn glorot_init_within_bounds_and_biases_zero() {
        let spec = MlpSpec::new(vec![4, 6, 2], Activation::Relu).unwrap();
        let mlp = Mlp::new(spec.clone());
        let mut rng = Rng::new(0);
        let p = Model::init_params(&mlp, &mut rng);
        let b1 = (6.0 / 10.0_f64).sqrt();
        let w1 = &p.as_slice()[0..24];
        assert!(w1.iter().all(|v| v.abs() <= b1));
        let bias1 = &p.as_slice()[24..30];
        assert!(bias1.iter().all(|&v| v == 0.0));
        // same seed, same init
        let mut rng2 = Rng::new(0);
        assert_eq!(p, Model::init_params(&Mlp::new(spec), &mut rng2));
    }

    #[test]
    fn linear_model_forward_and_vjp() {
        let lm = LinearModel::new(FeatureMap::Affine, 2, 2);
        assert_eq!(lm.feature_dim(), 3);
        let params = ParamVector::from_vec(vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let xs = Mat::from_vec(1, 2, vec![4.0, 5.0]).unwrap();
        let out = lm.forward(&params, &xs).unwrap();
        // phi = [1,4,5]
        assert_eq!(out.row(0), &[1.0 + 8.0 + 15.0, -1.0 + 5.0]);
        let cot = Mat::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let grad = lm.vjp_params(&params, &xs, &cot).unwrap();
        let fd = fd_param_grad(&lm, &params, &xs, &cot);
        assert!(rel_err(grad.as_slice(), &fd) < 1e-8);
    }

    #[test]
    fn poly2_features_span_quadratics() {
        let f = FeatureMap::Poly2;
        let phi = f.apply(&[2.0, 3.0]);
        assert_eq!(phi, vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
        assert_eq!(f.dim(2), 6);
    }

    #[test]
    fn pair_onehot_indicates_the_pair() {
        let f = FeatureMap::PairOneHot { left: 3, right: 2 };
        let mut x = vec![0.0; 5];
        x[1] = 1.0; // state 1 (first 3 slots)
        x[3] = 1.0; // action 0 (last 2 slots)
        let phi = f.apply(&x);
        assert_eq!(f.dim(5), 6);
        let expect_idx = 2; // state * n_actions + action
        for (i, v) in phi.iter().enumerate() {
            assert_eq!(*v, if i == expect_idx { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn frozen_mlp_features_are_last_hidden_plus_bias() {
        let spec = MlpSpec::new(vec![2, 4, 1], Activation::Tanh).unwrap();
        let mlp = Mlp::new(spec);
        let mut rng = Rng::new(3);
        let params = Model::init_params(&mlp, &mut rng);
        let fm = FeatureMap::FrozenMlp {
            mlp: mlp.clone(),
            params: params.clone(),
        };
        assert_eq!(fm.dim(2), 5);
        let phi = fm.apply(&[0.5, -0.5]);
        assert_eq!(phi.len(), 5);
        assert_eq!(phi[4], 1.0);
        // head weights recovering the full net: f(x) = w_out . hidden + b_out
        let lm = LinearModel::new(fm, 2, 1);
        let p = params.as_slice();
        let head_start = 2 * 4 + 4; // after layer-0 W and b
        let mut head: Vec<f64> = p[head_start..head_start + 4].to_vec();
        head.push(p[head_start + 4]); // output bias multiplies the constant 1
        let xs = Mat::from_vec(1, 2, vec![0.5, -0.5]).unwrap();
        let full = mlp.forward(&params, &xs).unwrap();
        let via_features = lm
            .forward(&ParamVector::from_vec(head), &xs)
            .unwrap();
        assert!((full.get(0, 0) - via_features.get(0, 0)).abs() < 1e-12);
    }

    #[test]
    fn outer_maps_vjp_match_fd() {
        let mut rng = Rng::new(21);
        let maps: Vec<Box<dyn OuterMap>> = vec![
            Box::new(LinearOuter { in_dim: 3, out_dim: 2 }),
            Box::new(FeatureLinearOuter {
                features: FeatureMap::Poly2,
                in_dim: 3,
                out_dim: 1,
            }),
            Box::new(MlpOuter {
                mlp: Mlp::new(MlpSpec::new(vec![3, 4, 2], Activation::Tanh).unwrap()),
            }),
        ];
        for map in maps {
            let mut omega = map.init_params(&mut rng);
            if omega.norm2() == 0.0 {
                omega = ParamVector::from_vec(rng.normal_vec(map.param_dim()));
            }
            let input = rng.normal_vec(map.in_dim());
            let cot = rng.normal_vec(map.out_dim());
            let grad = map.vjp_params(&omega, &input, &cot).unwrap();
            let g = |p: &[f64]| {
                let pv = ParamVector::from_vec(p.to_vec());
                vec![dot(&map.forward(&pv, &input).unwrap(), &cot)]
            };
            let fd: Vec<f64> = (0..omega.len())
                .map(|j| {
                    let mut e = vec![0.0; omega.len()];
                    e[j] = 1.0;
                    fd_directional(g, omega.as_slice(), &e, 1e-6)[0]
                })
                .collect();
            assert!(
                rel_err(grad.as_slice(), &fd) < 1e-7,
                "outer map vjp vs fd rel err {}",
                rel_err(grad.as_slice(), &fd)
            );
        }
    }
}
