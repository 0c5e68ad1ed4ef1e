//! Desk-scale differentiable models.
//!
//! Three architectures are supported, each with a hand-derived backward pass:
//!
//! * least squares, `l(theta, z) = 0.5 * (y - <theta, x>)^2`;
//! * multinomial logistic regression with an L2 term `0.5 * mu * |theta|^2`
//!   added to every per-sample loss;
//! * a fully connected MLP with smooth hidden activations and a softmax
//!   cross-entropy head.
//!
//! Second-order quantities (Hessian-vector products and the mixed
//! `d^2 l / dx dtheta` products) are obtained by pushing a forward-mode
//! tangent through the same backward pass.
//!
//! Parameter layout is layer by layer: the weight matrix in row-major order
//! (`out x in`) followed by the bias vector. Least squares has no bias.

mod dual;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, Task};
use crate::error::{check_len, Error, Result};
use dual::{Dual, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Arch {
    LeastSquares,
    Logistic {
        num_classes: usize,
        l2: f64,
    },
    Mlp {
        hidden: Vec<usize>,
        num_classes: usize,
        activation: Activation,
        l2: f64,
    },
}

/// Default L2 strength for logistic regression.
pub const DEFAULT_LOGISTIC_L2: f64 = 1e-3;

impl Arch {
    pub fn logistic(num_classes: usize) -> Self {
        Arch::Logistic {
            num_classes,
            l2: DEFAULT_LOGISTIC_L2,
        }
    }

    pub fn tanh_mlp(hidden: Vec<usize>, num_classes: usize) -> Self {
        Arch::Mlp {
            hidden,
            num_classes,
            activation: Activation::Tanh,
            l2: 0.0,
        }
    }

    /// Number of parameters for inputs of dimension `dim`.
    pub fn param_count(&self, dim: usize) -> usize {
        match self {
            Arch::LeastSquares => dim,
            Arch::Logistic { num_classes, .. } => num_classes * dim + num_classes,
            Arch::Mlp {
                hidden,
                num_classes,
                ..
            } => layer_shapes(dim, hidden, *num_classes)
                .iter()
                .map(|(o, i)| o * i + o)
                .sum(),
        }
    }

    /// Whether the empirical risk is strongly convex in the parameters.
    pub fn is_strongly_convex(&self) -> bool {
        match self {
            Arch::LeastSquares => true,
            Arch::Logistic { l2, .. } => *l2 > 0.0,
            Arch::Mlp { .. } => false,
        }
    }

    pub fn l2(&self) -> f64 {
        match self {
            Arch::LeastSquares => 0.0,
            Arch::Logistic { l2, .. } | Arch::Mlp { l2, .. } => *l2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Arch::LeastSquares => Ok(()),
            Arch::Logistic { num_classes, l2 } => {
                if *num_classes < 2 {
                    return Err(Error::InvalidConfig("logistic needs >= 2 classes".into()));
                }
                if !(*l2 >= 0.0) {
                    return Err(Error::InvalidConfig("l2 strength must be >= 0".into()));
                }
                Ok(())
            }
            Arch::Mlp {
                hidden,
                num_classes,
                l2,
                ..
            } => {
                if hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::InvalidConfig(
                        "mlp needs at least one non-empty hidden layer".into(),
                    ));
                }
                if *num_classes < 2 {
                    return Err(Error::InvalidConfig("mlp needs >= 2 classes".into()));
                }
                if !(*l2 >= 0.0) {
                    return Err(Error::InvalidConfig("l2 strength must be >= 0".into()));
                }
                Ok(())
            }
        }
    }

    /// Checks that the architecture can be trained on `task`.
    pub fn check_task(&self, task: Task) -> Result<()> {
        match (self, task) {
            (Arch::LeastSquares, Task::Regression) => Ok(()),
            (Arch::Logistic { num_classes, .. }, Task::Classification { num_classes: k })
            | (Arch::Mlp { num_classes, .. }, Task::Classification { num_classes: k })
                if *num_classes == k =>
            {
                Ok(())
            }
            _ => Err(Error::InvalidConfig(format!(
                "architecture {self:?} does not match task {task:?}"
            ))),
        }
    }
}

/// `(out, in)` shape of every dense layer, output head last.
fn layer_shapes(dim: usize, hidden: &[usize], num_classes: usize) -> Vec<(usize, usize)> {
    let mut shapes = Vec::with_capacity(hidden.len() + 1);
    let mut prev = dim;
    for &h in hidden {
        shapes.push((h, prev));
        prev = h;
    }
    shapes.push((num_classes, prev));
    shapes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    InputFeatures,
    LastHiddenActivation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub kind: EmbeddingKind,
    pub dim: usize,
}

/// Parameters plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub arch: Arch,
    pub input_dim: usize,
    pub theta: Vec<f64>,
    pub rng_seed: u64,
}

struct Pass<T> {
    loss: T,
    grad_theta: Vec<T>,
    grad_x: Vec<T>,
}

impl ModelState {
    /// Seeded initialisation: zeros for the linear models, scaled Gaussian
    /// weights (`N(0, 1/fan_in)`) and zero biases for the MLP.
    pub fn init(arch: Arch, input_dim: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        let count = arch.param_count(input_dim);
        let theta = match &arch {
            Arch::LeastSquares | Arch::Logistic { .. } => vec![0.0; count],
            Arch::Mlp {
                hidden,
                num_classes,
                ..
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut theta = Vec::with_capacity(count);
                for (out, inp) in layer_shapes(input_dim, hidden, *num_classes) {
                    let scale = (1.0 / inp as f64).sqrt();
                    for _ in 0..out * inp {
                        theta.push(scale * rng.sample::<f64, _>(StandardNormal));
                    }
                    theta.extend(std::iter::repeat(0.0).take(out));
                }
                theta
            }
        };
        Ok(Self {
            arch,
            input_dim,
            theta,
            rng_seed: seed,
        })
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        check_len("parameter vector", self.theta.len(), theta.len())?;
        Ok(Self {
            arch: self.arch.clone(),
            input_dim: self.input_dim,
            theta,
            rng_seed: self.rng_seed,
        })
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        check_len(
            "parameter vector",
            self.arch.param_count(self.input_dim),
            self.theta.len(),
        )?;
        if self.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(())
    }

    fn check_sample(&self, z: &Sample) -> Result<()> {
        check_len("sample features", self.input_dim, z.x.len())?;
        match &self.arch {
            Arch::LeastSquares => Task::Regression.validate_label(z.y),
            Arch::Logistic { num_classes, .. } | Arch::Mlp { num_classes, .. } => {
                Task::Classification {
                    num_classes: *num_classes,
                }
                .validate_label(z.y)
            }
        }
    }

    fn check_smooth(&self) -> Result<()> {
        if let Arch::Mlp {
            activation: Activation::Relu,
            ..
        } = self.arch
        {
            return Err(Error::Unsupported(
                "derivatives of relu networks are not supported; use tanh".into(),
            ));
        }
        Ok(())
    }

    pub fn loss(&self, z: &Sample) -> Result<f64> {
        self.check_sample(z)?;
        Ok(self.forward_loss(&z.x, z.y))
    }

    pub fn grad_theta(&self, z: &Sample) -> Result<Vec<f64>> {
        self.check_sample(z)?;
        self.check_smooth()?;
        Ok(backprop::<f64>(self, &self.theta, &z.x, z.y).grad_theta)
    }

    pub fn grad_x(&self, z: &Sample) -> Result<Vec<f64>> {
        self.check_sample(z)?;
        self.check_smooth()?;
        Ok(backprop::<f64>(self, &self.theta, &z.x, z.y).grad_x)
    }

    /// Loss together with both gradients from a single backward pass.
    pub fn loss_and_grads(&self, z: &Sample) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        self.check_sample(z)?;
        self.check_smooth()?;
        let p = backprop::<f64>(self, &self.theta, &z.x, z.y);
        Ok((p.loss, p.grad_theta, p.grad_x))
    }

    /// Mean loss over a dataset.
    pub fn mean_loss(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut total = 0.0;
        for z in data.samples() {
            total += self.loss(z)?;
        }
        Ok(total / data.len() as f64)
    }

    /// Gradient of the mean loss over `batch`.
    pub fn mean_grad<'a, I>(&self, batch: I) -> Result<Vec<f64>>
    where
        I: IntoIterator<Item = &'a Sample>,
    {
        let mut acc = vec![0.0; self.theta.len()];
        let mut n = 0usize;
        for z in batch {
            let g = self.grad_theta(z)?;
            for (a, gi) in acc.iter_mut().zip(g) {
                *a += gi;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let inv = 1.0 / n as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        Ok(acc)
    }

    /// Hessian of the mean loss over `batch` applied to `v`.
    pub fn hvp_theta(&self, batch: &Dataset, v: &[f64]) -> Result<Vec<f64>> {
        self.hvp_iter(batch.samples(), v)
    }

    /// As [`ModelState::hvp_theta`] for any sample iterator.
    pub fn hvp_iter<'a, I>(&self, batch: I, v: &[f64]) -> Result<Vec<f64>>
    where
        I: IntoIterator<Item = &'a Sample>,
    {
        check_len("direction vector", self.theta.len(), v.len())?;
        self.check_smooth()?;
        let theta: Vec<Dual> = self
            .theta
            .iter()
            .zip(v)
            .map(|(&t, &d)| Dual::new(t, d))
            .collect();
        let mut acc = vec![0.0; self.theta.len()];
        let mut n = 0usize;
        for z in batch {
            self.check_sample(z)?;
            let x: Vec<Dual> = z.x.iter().map(|&xi| Dual::cst(xi)).collect();
            let g = backprop(self, &theta, &x, z.y).grad_theta;
            for (a, gi) in acc.iter_mut().zip(g) {
                *a += gi.du;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let inv = 1.0 / n as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        Ok(acc)
    }

    /// `d/dx <grad_theta l(theta, z), v>`, i.e. the mixed second derivative
    /// applied to a parameter-space vector.
    pub fn mixed_hvp(&self, z: &Sample, v: &[f64]) -> Result<Vec<f64>> {
        check_len("direction vector", self.theta.len(), v.len())?;
        self.check_sample(z)?;
        self.check_smooth()?;
        let theta: Vec<Dual> = self
            .theta
            .iter()
            .zip(v)
            .map(|(&t, &d)| Dual::new(t, d))
            .collect();
        let x: Vec<Dual> = z.x.iter().map(|&xi| Dual::cst(xi)).collect();
        Ok(backprop(self, &theta, &x, z.y)
            .grad_x
            .into_iter()
            .map(|g| g.du)
            .collect())
    }

    /// Dense Hessian of the mean loss, one HVP per basis vector.
    pub fn dense_hessian(&self, batch: &Dataset) -> Result<Vec<Vec<f64>>> {
        let p = self.theta.len();
        let mut cols = Vec::with_capacity(p);
        let mut e = vec![0.0; p];
        for j in 0..p {
            e[j] = 1.0;
            cols.push(self.hvp_theta(batch, &e)?);
            e[j] = 0.0;
        }
        Ok(cols)
    }

    pub fn embedding_spec(&self) -> EmbeddingSpec {
        match &self.arch {
            Arch::LeastSquares | Arch::Logistic { .. } => EmbeddingSpec {
                kind: EmbeddingKind::InputFeatures,
                dim: self.input_dim,
            },
            Arch::Mlp { hidden, .. } => EmbeddingSpec {
                kind: EmbeddingKind::LastHiddenActivation,
                dim: *hidden.last().expect("validated mlp has hidden layers"),
            },
        }
    }

    fn check_spec(&self, spec: &EmbeddingSpec) -> Result<()> {
        if *spec != self.embedding_spec() {
            return Err(Error::InvalidConfig(format!(
                "embedding spec {spec:?} is inconsistent with {:?}",
                self.arch
            )));
        }
        Ok(())
    }

    /// Representation of `x`: the raw features for linear models, the last
    /// hidden activation for the MLP. Independent of the label.
    pub fn embed(&self, spec: &EmbeddingSpec, x: &[f64]) -> Result<Vec<f64>> {
        self.check_spec(spec)?;
        check_len("sample features", self.input_dim, x.len())?;
        match &self.arch {
            Arch::LeastSquares | Arch::Logistic { .. } => Ok(x.to_vec()),
            Arch::Mlp {
                hidden,
                num_classes,
                activation,
                ..
            } => {
                let shapes = layer_shapes(self.input_dim, hidden, *num_classes);
                let acts = hidden_forward(&self.theta, x, &shapes, *activation);
                Ok(acts.last().cloned().unwrap_or_default())
            }
        }
    }

    /// `J_embed(x)^T w`: pulls an embedding-space vector back to input space.
    pub fn embed_vjp(&self, spec: &EmbeddingSpec, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        self.check_spec(spec)?;
        check_len("sample features", self.input_dim, x.len())?;
        check_len("embedding cotangent", spec.dim, w.len())?;
        match &self.arch {
            Arch::LeastSquares | Arch::Logistic { .. } => Ok(w.to_vec()),
            Arch::Mlp {
                hidden,
                num_classes,
                ..
            } => {
                self.check_smooth()?;
                let shapes = layer_shapes(self.input_dim, hidden, *num_classes);
                let acts = hidden_forward(&self.theta, x, &shapes, Activation::Tanh);
                let mut upstream = w.to_vec();
                let offsets = layer_offsets(&shapes);
                for l in (0..hidden.len()).rev() {
                    let (out, inp) = shapes[l];
                    let a = &acts[l + 1];
                    let delta: Vec<f64> = upstream
                        .iter()
                        .zip(a)
                        .map(|(g, ai)| g * (1.0 - ai * ai))
                        .collect();
                    let w_l = &self.theta[offsets[l]..offsets[l] + out * inp];
                    let mut down = vec![0.0; inp];
                    for o in 0..out {
                        let row = &w_l[o * inp..(o + 1) * inp];
                        for (d, wv) in down.iter_mut().zip(row) {
                            *d += delta[o] * wv;
                        }
                    }
                    upstream = down;
                }
                Ok(upstream)
            }
        }
    }

    fn forward_loss(&self, x: &[f64], y: f64) -> f64 {
        match &self.arch {
            Arch::Mlp {
                activation: Activation::Relu,
                hidden,
                num_classes,
                l2,
            } => {
                let shapes = layer_shapes(self.input_dim, hidden, *num_classes);
                let acts = hidden_forward(&self.theta, x, &shapes, Activation::Relu);
                let offsets = layer_offsets(&shapes);
                let last = shapes.len() - 1;
                let (out, inp) = shapes[last];
                let logits = dense(&self.theta[offsets[last]..], acts.last().unwrap(), out, inp);
                let (lse, _) = log_softmax(&logits);
                lse - logits[y as usize] + 0.5 * l2 * sq_norm(&self.theta)
            }
            _ => backprop::<f64>(self, &self.theta, x, y).loss,
        }
    }
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

fn layer_offsets(shapes: &[(usize, usize)]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for (o, i) in shapes {
        offsets.push(off);
        off += o * i + o;
    }
    offsets
}

/// `W a + b` where `params` starts with the row-major weights of the layer.
fn dense<T: Scalar>(params: &[T], a: &[T], out: usize, inp: usize) -> Vec<T> {
    let (w, rest) = params.split_at(out * inp);
    (0..out)
        .map(|o| {
            let mut acc = rest[o];
            for (wv, av) in w[o * inp..(o + 1) * inp].iter().zip(a) {
                acc += *wv * *av;
            }
            acc
        })
        .collect()
}

/// Activations of the input and every hidden layer (`acts[0] = x`).
fn hidden_forward(
    theta: &[f64],
    x: &[f64],
    shapes: &[(usize, usize)],
    activation: Activation,
) -> Vec<Vec<f64>> {
    let offsets = layer_offsets(shapes);
    let mut acts = vec![x.to_vec()];
    for l in 0..shapes.len() - 1 {
        let (out, inp) = shapes[l];
        let z = dense(&theta[offsets[l]..], acts.last().unwrap(), out, inp);
        let a = z
            .into_iter()
            .map(|v| match activation {
                Activation::Tanh => v.tanh(),
                Activation::Relu => v.max(0.0),
            })
            .collect();
        acts.push(a);
    }
    acts
}

/// Returns `(logsumexp, softmax)`.
fn log_softmax<T: Scalar>(logits: &[T]) -> (T, Vec<T>) {
    let m = logits
        .iter()
        .map(|l| l.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let shift = T::cst(m);
    let mut sum = T::zero();
    let exps: Vec<T> = logits
        .iter()
        .map(|&l| {
            let e = (l - shift).exp();
            sum += e;
            e
        })
        .collect();
    let lse = shift + sum.ln();
    let probs = exps.into_iter().map(|e| e / sum).collect();
    (lse, probs)
}

fn backprop<T: Scalar>(model: &ModelState, theta: &[T], x: &[T], y: f64) -> Pass<T>
where
    T: Scalar,
{
    match &model.arch {
        Arch::LeastSquares => {
            let mut pred = T::zero();
            for (t, xi) in theta.iter().zip(x) {
                pred += *t * *xi;
            }
            let r = pred - T::cst(y);
            Pass {
                loss: (r * r).scale(0.5),
                grad_theta: x.iter().map(|&xi| r * xi).collect(),
                grad_x: theta.iter().map(|&t| r * t).collect(),
            }
        }
        Arch::Logistic { num_classes, l2 } => {
            let k = *num_classes;
            let d = model.input_dim;
            let logits = dense(theta, x, k, d);
            let (lse, probs) = log_softmax(&logits);
            let label = y as usize;
            let delta: Vec<T> = probs
                .iter()
                .enumerate()
                .map(|(c, &p)| if c == label { p - T::cst(1.0) } else { p })
                .collect();
            let mut grad_theta = Vec::with_capacity(theta.len());
            for &dc in &delta {
                for &xj in x {
                    grad_theta.push(dc * xj);
                }
            }
            grad_theta.extend(delta.iter().copied());
            let mut grad_x = vec![T::zero(); d];
            for (c, &dc) in delta.iter().enumerate() {
                for (g, &w) in grad_x.iter_mut().zip(&theta[c * d..(c + 1) * d]) {
                    *g += dc * w;
                }
            }
            let loss = lse - logits[label] + add_l2(theta, &mut grad_theta, *l2);
            Pass {
                loss,
                grad_theta,
                grad_x,
            }
        }
        Arch::Mlp {
            hidden,
            num_classes,
            l2,
            ..
        } => {
            let shapes = layer_shapes(model.input_dim, hidden, *num_classes);
            let offsets = layer_offsets(&shapes);
            let mut acts: Vec<Vec<T>> = vec![x.to_vec()];
            for l in 0..hidden.len() {
                let (out, inp) = shapes[l];
                let z = dense(&theta[offsets[l]..], acts.last().unwrap(), out, inp);
                acts.push(z.into_iter().map(Scalar::tanh).collect());
            }
            let last = shapes.len() - 1;
            let (k, h) = shapes[last];
            let logits = dense(&theta[offsets[last]..], &acts[last], k, h);
            let (lse, probs) = log_softmax(&logits);
            let label = y as usize;

            let mut grad_theta = vec![T::zero(); theta.len()];
            let mut delta: Vec<T> = probs
                .iter()
                .enumerate()
                .map(|(c, &p)| if c == label { p - T::cst(1.0) } else { p })
                .collect();
            for l in (0..shapes.len()).rev() {
                let (out, inp) = shapes[l];
                let off = offsets[l];
                let a_in = &acts[l];
                for o in 0..out {
                    let row = off + o * inp;
                    for i in 0..inp {
                        grad_theta[row + i] = delta[o] * a_in[i];
                    }
                    grad_theta[off + out * inp + o] = delta[o];
                }
                let mut down = vec![T::zero(); inp];
                for o in 0..out {
                    let row = &theta[off + o * inp..off + (o + 1) * inp];
                    for (dn, &w) in down.iter_mut().zip(row) {
                        *dn += delta[o] * w;
                    }
                }
                if l == 0 {
                    delta = down;
                } else {
                    delta = down
                        .into_iter()
                        .zip(&acts[l])
                        .map(|(g, &a)| g * (T::cst(1.0) - a * a))
                        .collect();
                }
            }
            let loss = lse - logits[label] + add_l2(theta, &mut grad_theta, *l2);
            Pass {
                loss,
                grad_theta,
                grad_x: delta,
            }
        }
    }
}

/// Adds the L2 gradient in place and returns the penalty value.
fn add_l2<T: Scalar>(theta: &[T], grad: &mut [T], l2: f64) -> T {
    if l2 == 0.0 {
        return T::zero();
    }
    let mut pen = T::zero();
    for (g, &t) in grad.iter_mut().zip(theta) {
        *g += t.scale(l2);
        pen += t * t;
    }
    pen.scale(0.5 * l2)
}
