//! Toy problems with hand-derived gradient oracles.
//!
//! Three problem families: a positive-definite quadratic, l2-regularized
//! logistic regression on synthetic data, and a tanh MLP trained by squared
//! error against a fixed synthetic teacher. Gradients are derived per
//! problem rather than through an autodiff engine; the finite-difference
//! check guards them.
//!
//! Parameters are held as one flat vector per layer. The quadratic and
//! logistic problems have a single layer; the MLP has one layer per weight
//! matrix (weights row-major, then biases).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::noise::{data_rng, init_rng, standard_normal};
use super::TrainError;
use crate::shaping::{GradientVector, LayerId};

/// Serializable description of a toy problem. `build` materializes the
/// problem, generating any synthetic data deterministically from
/// `data_seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// Loss `0.5 * theta' A theta - b' theta` with symmetric positive
    /// definite `A`. Give either full rows in `a` or a diagonal in `a_diag`.
    Quadratic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        a: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        a_diag: Option<Vec<f64>>,
        b: Vec<f64>,
        theta0: Vec<f64>,
    },
    /// Mean cross-entropy of `sigmoid(X theta)` against 0/1 labels plus an
    /// l2 penalty. Data is synthesized from `data_seed`; the run starts at
    /// `theta = 0`.
    Logistic {
        n_samples: usize,
        dim: usize,
        l2_penalty: f64,
        data_seed: u64,
    },
    /// Tanh MLP regression against a fixed random teacher network.
    /// `init_scales` multiplies the per-layer initialization scale of the
    /// trained network (one factor per weight layer; defaults to ones) and
    /// exists to construct deliberately mismatched layer scales.
    Mlp {
        layer_sizes: Vec<usize>,
        n_samples: usize,
        data_seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        init_scales: Option<Vec<f64>>,
    },
}

impl ProblemSpec {
    pub fn build(&self) -> Result<ToyProblem, TrainError> {
        match self {
            ProblemSpec::Quadratic {
                a,
                a_diag,
                b,
                theta0,
            } => {
                let matrix = match (a, a_diag) {
                    (Some(rows), None) => rows.clone(),
                    (None, Some(diag)) => {
                        let d = diag.len();
                        let mut rows = vec![vec![0.0; d]; d];
                        for (i, &v) in diag.iter().enumerate() {
                            rows[i][i] = v;
                        }
                        rows
                    }
                    (Some(_), Some(_)) => {
                        return Err(TrainError::InvalidConfig(
                            "quadratic problem: give either a or a_diag, not both".into(),
                        ))
                    }
                    (None, None) => {
                        return Err(TrainError::InvalidConfig(
                            "quadratic problem: one of a or a_diag is required".into(),
                        ))
                    }
                };
                Ok(ToyProblem::Quadratic(Quadratic::new(
                    matrix,
                    b.clone(),
                    theta0.clone(),
                )?))
            }
            ProblemSpec::Logistic {
                n_samples,
                dim,
                l2_penalty,
                data_seed,
            } => Ok(ToyProblem::Logistic(Logistic::synthetic(
                *n_samples,
                *dim,
                *l2_penalty,
                *data_seed,
            )?)),
            ProblemSpec::Mlp {
                layer_sizes,
                n_samples,
                data_seed,
                init_scales,
            } => Ok(ToyProblem::Mlp(Mlp::synthetic(
                layer_sizes.clone(),
                *n_samples,
                *data_seed,
                init_scales.clone(),
            )?)),
        }
    }
}

/// A differentiable toy problem with an exact gradient oracle.
#[derive(Clone, Debug)]
pub enum ToyProblem {
    Quadratic(Quadratic),
    Logistic(Logistic),
    Mlp(Mlp),
}

impl ToyProblem {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ToyProblem::Quadratic(_) => "quadratic",
            ToyProblem::Logistic(_) => "logistic",
            ToyProblem::Mlp(_) => "mlp",
        }
    }

    pub fn n_layers(&self) -> usize {
        match self {
            ToyProblem::Quadratic(_) | ToyProblem::Logistic(_) => 1,
            ToyProblem::Mlp(m) => m.layer_sizes.len() - 1,
        }
    }

    /// Per-layer parameter counts.
    pub fn layer_dims(&self) -> Vec<usize> {
        match self {
            ToyProblem::Quadratic(q) => vec![q.b.len()],
            ToyProblem::Logistic(l) => vec![l.dim],
            ToyProblem::Mlp(m) => m
                .layer_sizes
                .windows(2)
                .map(|w| w[1] * w[0] + w[1])
                .collect(),
        }
    }

    /// Starting parameters. Only the MLP draws from `seed`; the quadratic
    /// uses its configured start and the logistic starts at zero.
    pub fn initial_theta(&self, seed: u64) -> Vec<Vec<f64>> {
        match self {
            ToyProblem::Quadratic(q) => vec![q.theta0.clone()],
            ToyProblem::Logistic(l) => vec![vec![0.0; l.dim]],
            ToyProblem::Mlp(m) => m.initial_theta(seed),
        }
    }

    pub fn loss(&self, theta: &[Vec<f64>]) -> f64 {
        match self {
            ToyProblem::Quadratic(q) => q.loss(&theta[0]),
            ToyProblem::Logistic(l) => l.loss(&theta[0]),
            ToyProblem::Mlp(m) => m.loss(theta),
        }
    }

    /// The analytic gradient, split per layer.
    pub fn exact_gradient(&self, theta: &[Vec<f64>]) -> Result<Vec<GradientVector>, TrainError> {
        self.check_dims(theta)?;
        let per_layer = match self {
            ToyProblem::Quadratic(q) => vec![q.gradient(&theta[0])],
            ToyProblem::Logistic(l) => vec![l.gradient(&theta[0])],
            ToyProblem::Mlp(m) => m.gradient(theta),
        };
        per_layer
            .into_iter()
            .enumerate()
            .map(|(l, g)| GradientVector::new(LayerId(l), g).map_err(TrainError::from))
            .collect()
    }

    fn check_dims(&self, theta: &[Vec<f64>]) -> Result<(), TrainError> {
        let dims = self.layer_dims();
        if theta.len() != dims.len() || theta.iter().zip(&dims).any(|(t, &d)| t.len() != d) {
            return Err(TrainError::InvalidConfig(format!(
                "parameter shape {:?} does not match problem layers {:?}",
                theta.iter().map(Vec::len).collect::<Vec<_>>(),
                dims
            )));
        }
        Ok(())
    }

    /// Maximum relative error between central finite differences of the loss
    /// and the exact gradient, over components with `|g_i| > 1e-8`.
    pub fn finite_diff_check(&self, theta: &[Vec<f64>], step_size: f64) -> Result<f64, TrainError> {
        if !(1e-7..=1e-3).contains(&step_size) {
            return Err(TrainError::InvalidConfig(format!(
                "finite-difference step {step_size} outside [1e-7, 1e-3]"
            )));
        }
        let grads = self.exact_gradient(theta)?;
        let mut work = theta.to_vec();
        let mut max_rel: f64 = 0.0;
        for (l, grad) in grads.iter().enumerate() {
            for i in 0..work[l].len() {
                let saved = work[l][i];
                work[l][i] = saved + step_size;
                let plus = self.loss(&work);
                work[l][i] = saved - step_size;
                let minus = self.loss(&work);
                work[l][i] = saved;
                let fd = (plus - minus) / (2.0 * step_size);
                let g = grad.components()[i];
                if g.abs() > 1e-8 {
                    max_rel = max_rel.max((fd - g).abs() / g.abs());
                }
            }
        }
        Ok(max_rel)
    }
}

/// `0.5 * theta' A theta - b' theta` with symmetric positive definite `A`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    theta0: Vec<f64>,
}

impl Quadratic {
    pub fn new(a: Vec<Vec<f64>>, b: Vec<f64>, theta0: Vec<f64>) -> Result<Self, TrainError> {
        let d = a.len();
        if d == 0 || a.iter().any(|row| row.len() != d) {
            return Err(TrainError::InvalidConfig(
                "quadratic matrix must be square".into(),
            ));
        }
        if b.len() != d || theta0.len() != d {
            return Err(TrainError::InvalidConfig(format!(
                "quadratic dimensions disagree: A is {d}x{d}, b has {}, theta0 has {}",
                b.len(),
                theta0.len()
            )));
        }
        #[allow(clippy::needless_range_loop)]
        for i in 0..d {
            for j in 0..i {
                let gap = (a[i][j] - a[j][i]).abs();
                let scale = a[i][j].abs().max(a[j][i].abs()).max(1.0);
                if gap > 1e-12 * scale {
                    return Err(TrainError::InvalidConfig(format!(
                        "quadratic matrix is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        cholesky_check(&a)?;
        Ok(Self { a, b, theta0 })
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        let quad: f64 = self
            .a
            .iter()
            .zip(theta)
            .map(|(row, &t)| t * dot(row, theta))
            .sum();
        let linear = dot(&self.b, theta);
        0.5 * quad - linear
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(row, b)| dot(row, theta) - b)
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fails unless the matrix admits a Cholesky factorization, i.e. is
/// positive definite.
fn cholesky_check(a: &[Vec<f64>]) -> Result<(), TrainError> {
    let d = a.len();
    let mut l = vec![vec![0.0f64; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i][j];
            sum -= dot(&l[i][..j], &l[j][..j]);
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(TrainError::InvalidConfig(format!(
                        "quadratic matrix is not positive definite (pivot {i})"
                    )));
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Ok(())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// l2-penalized logistic regression on synthetic data.
#[derive(Clone, Debug)]
pub struct Logistic {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    l2_penalty: f64,
    dim: usize,
}

impl Logistic {
    /// Features are standard normal; labels come from a random linear
    /// separator with additive noise, so classes overlap and the optimum is
    /// finite even without the penalty.
    pub fn synthetic(
        n_samples: usize,
        dim: usize,
        l2_penalty: f64,
        data_seed: u64,
    ) -> Result<Self, TrainError> {
        if n_samples == 0 || dim == 0 {
            return Err(TrainError::InvalidConfig(
                "logistic problem needs n_samples >= 1 and dim >= 1".into(),
            ));
        }
        if !(l2_penalty.is_finite() && l2_penalty >= 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "invalid l2_penalty {l2_penalty}"
            )));
        }
        let mut feature_rng = data_rng(data_seed, 0);
        let mut separator_rng = data_rng(data_seed, 1);
        let mut label_rng = data_rng(data_seed, 2);

        let separator: Vec<f64> = (0..dim)
            .map(|_| standard_normal(&mut separator_rng))
            .collect();
        let mut x = Vec::with_capacity(n_samples);
        let mut y = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let row: Vec<f64> = (0..dim)
                .map(|_| standard_normal(&mut feature_rng))
                .collect();
            let margin = dot(&row, &separator);
            let label = if margin + standard_normal(&mut label_rng) > 0.0 {
                1.0
            } else {
                0.0
            };
            x.push(row);
            y.push(label);
        }
        Ok(Self {
            x,
            y,
            l2_penalty,
            dim,
        })
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        let n = self.x.len() as f64;
        let mut total = 0.0;
        for (row, &label) in self.x.iter().zip(&self.y) {
            let z = dot(row, theta);
            // Stable form of -y ln s(z) - (1 - y) ln(1 - s(z)).
            total += z.max(0.0) - z * label + (-z.abs()).exp().ln_1p();
        }
        let penalty: f64 = theta.iter().map(|t| t * t).sum();
        total / n + 0.5 * self.l2_penalty * penalty
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.x.len() as f64;
        let mut grad = vec![0.0; self.dim];
        for (row, &label) in self.x.iter().zip(&self.y) {
            let z = dot(row, theta);
            let residual = sigmoid(z) - label;
            for (g, a) in grad.iter_mut().zip(row) {
                *g += residual * a;
            }
        }
        for (g, t) in grad.iter_mut().zip(theta) {
            *g = *g / n + self.l2_penalty * t;
        }
        grad
    }
}

/// Tanh MLP with a linear output layer, trained by mean squared error
/// against targets produced by a fixed random teacher of the same shape.
#[derive(Clone, Debug)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    init_scales: Vec<f64>,
}

impl Mlp {
    pub fn synthetic(
        layer_sizes: Vec<usize>,
        n_samples: usize,
        data_seed: u64,
        init_scales: Option<Vec<f64>>,
    ) -> Result<Self, TrainError> {
        if layer_sizes.len() < 3 {
            return Err(TrainError::InvalidConfig(
                "mlp needs at least two weight layers (layer_sizes of length >= 3)".into(),
            ));
        }
        if layer_sizes.contains(&0) || n_samples == 0 {
            return Err(TrainError::InvalidConfig(
                "mlp layer sizes and n_samples must be positive".into(),
            ));
        }
        let n_weight_layers = layer_sizes.len() - 1;
        let init_scales = init_scales.unwrap_or_else(|| vec![1.0; n_weight_layers]);
        if init_scales.len() != n_weight_layers {
            return Err(TrainError::InvalidConfig(format!(
                "init_scales has {} entries for {} weight layers",
                init_scales.len(),
                n_weight_layers
            )));
        }
        if init_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(TrainError::InvalidConfig(
                "init_scales must be positive".into(),
            ));
        }

        let mut input_rng = data_rng(data_seed, 8);
        let in_dim = layer_sizes[0];
        let inputs: Vec<Vec<f64>> = (0..n_samples)
            .map(|_| {
                (0..in_dim)
                    .map(|_| standard_normal(&mut input_rng))
                    .collect()
            })
            .collect();

        // Teacher weights come from the data seed, unit init scale.
        let teacher = draw_layers(&layer_sizes, &vec![1.0; n_weight_layers], |l| {
            data_rng(data_seed, 16 + l as u64)
        });
        let targets = inputs
            .iter()
            .map(|x| forward(&layer_sizes, &teacher, x).0)
            .collect();

        Ok(Self {
            layer_sizes,
            inputs,
            targets,
            init_scales,
        })
    }

    pub fn initial_theta(&self, seed: u64) -> Vec<Vec<f64>> {
        draw_layers(&self.layer_sizes, &self.init_scales, |l| {
            init_rng(seed, l as u64)
        })
    }

    pub fn loss(&self, theta: &[Vec<f64>]) -> f64 {
        let n = self.inputs.len() as f64;
        let mut total = 0.0;
        for (x, target) in self.inputs.iter().zip(&self.targets) {
            let (out, _) = forward(&self.layer_sizes, theta, x);
            total += out
                .iter()
                .zip(target)
                .map(|(o, t)| (o - t) * (o - t))
                .sum::<f64>();
        }
        total / (2.0 * n)
    }

    /// Backpropagation through the tanh layers. The output layer is linear,
    /// so its delta is just the scaled residual; hidden deltas pick up the
    /// `1 - a^2` tanh derivative.
    pub fn gradient(&self, theta: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let sizes = &self.layer_sizes;
        let n_layers = sizes.len() - 1;
        let n = self.inputs.len() as f64;
        let mut grads: Vec<Vec<f64>> = sizes
            .windows(2)
            .map(|w| vec![0.0; w[1] * w[0] + w[1]])
            .collect();

        for (x, target) in self.inputs.iter().zip(&self.targets) {
            let (out, activations) = forward(sizes, theta, x);
            let mut delta: Vec<f64> = out.iter().zip(target).map(|(o, t)| (o - t) / n).collect();

            for l in (0..n_layers).rev() {
                let (in_dim, out_dim) = (sizes[l], sizes[l + 1]);
                let input = &activations[l];
                let grad = &mut grads[l];
                for i in 0..out_dim {
                    let d = delta[i];
                    let row = &mut grad[i * in_dim..(i + 1) * in_dim];
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                    grad[out_dim * in_dim + i] += d;
                }
                if l > 0 {
                    let weights = &theta[l];
                    let mut prev = vec![0.0; in_dim];
                    for i in 0..out_dim {
                        let d = delta[i];
                        for (j, p) in prev.iter_mut().enumerate() {
                            *p += weights[i * in_dim + j] * d;
                        }
                    }
                    for (p, a) in prev.iter_mut().zip(input) {
                        *p *= 1.0 - a * a;
                    }
                    delta = prev;
                }
            }
        }
        grads
    }
}

/// Draw one flat parameter vector per weight layer: weights are normal with
/// standard deviation `scale / sqrt(fan_in)`, biases start at zero.
fn draw_layers<F>(sizes: &[usize], scales: &[f64], mut rng_for_layer: F) -> Vec<Vec<f64>>
where
    F: FnMut(usize) -> ChaCha8Rng,
{
    sizes
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let (in_dim, out_dim) = (w[0], w[1]);
            let std = scales[l] / (in_dim as f64).sqrt();
            let mut rng = rng_for_layer(l);
            let mut layer = Vec::with_capacity(out_dim * in_dim + out_dim);
            for _ in 0..out_dim * in_dim {
                layer.push(std * standard_normal(&mut rng));
            }
            layer.extend(std::iter::repeat_n(0.0, out_dim));
            layer
        })
        .collect()
}

/// Forward pass. Returns the network output and the activation of every
/// layer input (`activations[l]` feeds weight layer `l`), which is exactly
/// what backprop needs.
fn forward(sizes: &[usize], theta: &[Vec<f64>], x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n_layers = sizes.len() - 1;
    let mut activations = Vec::with_capacity(n_layers);
    let mut current = x.to_vec();
    for l in 0..n_layers {
        let (in_dim, out_dim) = (sizes[l], sizes[l + 1]);
        let layer = &theta[l];
        let mut next = Vec::with_capacity(out_dim);
        for i in 0..out_dim {
            let mut z = layer[out_dim * in_dim + i];
            let row = &layer[i * in_dim..(i + 1) * in_dim];
            for (w, a) in row.iter().zip(&current) {
                z += w * a;
            }
            next.push(if l + 1 < n_layers { z.tanh() } else { z });
        }
        activations.push(current);
        current = next;
    }
    (current, activations)
}
