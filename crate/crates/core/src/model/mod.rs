//! A small fully connected network with per-layer curvature hooks, plus
//! synthetic tasks and datasets to train it on.
//!
//! Every layer stores `W ∈ R^{d_o × (d_i + 1)}`; the last column multiplies
//! a constant-1 input coordinate and acts as the bias.

mod data;
mod quadratic;

pub use data::{accuracy, Dataset, GaussianBlobs};
pub use quadratic::{KroneckerQuadratic, QuadraticEval};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::curvature::LayerBatch;
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_tn, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Self::Relu => z.max(0.0),
            Self::Tanh => z.tanh(),
            Self::Identity => z,
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => 1.0 - z.tanh().powi(2),
            Self::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Relu => "relu",
            Self::Tanh => "tanh",
            Self::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            "identity" | "linear" => Ok(Self::Identity),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// `-log softmax(ŷ)_y` per example.
    SoftmaxCrossEntropy,
    /// `½‖ŷ - y‖²` per example.
    Mse,
}

impl Loss {
    pub fn name(self) -> &'static str {
        match self {
            Self::SoftmaxCrossEntropy => "softmax_cross_entropy",
            Self::Mse => "mse",
        }
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Loss {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "softmax_cross_entropy" | "cross_entropy" | "ce" => Ok(Self::SoftmaxCrossEntropy),
            "mse" => Ok(Self::Mse),
            other => Err(format!("unknown loss `{other}`")),
        }
    }
}

/// Targets matching a [`Loss`]: class indices for cross-entropy, dense
/// rows for MSE.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Labels(&'a [usize]),
    Values(&'a Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Matrix>,
    activations: Vec<Activation>,
}

/// Per-layer output of [`Mlp::forward_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    /// Batch-mean gradient `(1/m) Σ gᵢ uᵢᵀ`.
    pub grad: Matrix,
    /// Bias-augmented inputs `u` and per-example output gradients `g`.
    pub batch: LayerBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBackward {
    /// Mean loss over the batch.
    pub loss: f64,
    pub layers: Vec<LayerGrad>,
    /// Set when any activation, loss or gradient was non-finite.
    pub nonfinite: bool,
}

impl Mlp {
    /// Layers with the given weights (bias column included) and activations.
    pub fn from_layers(layers: Vec<Matrix>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() || layers.len() != activations.len() {
            return Err(Error::shape(
                "Mlp::from_layers",
                format!("{} layers, {} activations", layers.len(), activations.len()),
            ));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].cols() != pair[0].rows() + 1 {
                return Err(Error::shape(
                    "Mlp::from_layers",
                    format!(
                        "layer {} outputs {} but layer {} expects {} (+1 bias)",
                        l,
                        pair[0].rows(),
                        l + 1,
                        pair[1].cols() - 1
                    ),
                ));
            }
        }
        Ok(Self {
            layers,
            activations,
        })
    }

    /// Random network with widths `dims[0] → dims[1] → …`, `N(0, 1/fan_in)`
    /// weights and zero biases. `activations` has one entry per layer.
    pub fn random(dims: &[usize], activations: &[Activation], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::shape(
                "Mlp::random",
                format!("{} widths, {} activations", dims.len(), activations.len()),
            ));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (d_in, d_out) = (w[0], w[1]);
                let std = 1.0 / (d_in as f64).sqrt();
                Matrix::from_fn(d_out, d_in + 1, |_, j| {
                    if j == d_in {
                        0.0
                    } else {
                        let z: f64 = StandardNormal.sample(rng);
                        std * z
                    }
                })
            })
            .collect();
        Self::from_layers(layers, activations.to_vec())
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Matrix] {
        &mut self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols() - 1
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").rows()
    }

    /// `(d_out, d_in + 1)` per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(Matrix::shape).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|w| w.rows() * w.cols()).sum()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "Mlp",
                format!(
                    "input has {} features, model expects {}",
                    x.cols(),
                    self.input_dim()
                ),
            ));
        }
        Ok(())
    }

    /// Network outputs, one row per example.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut a = x.clone();
        for (w, act) in self.layers.iter().zip(&self.activations) {
            let z = matmul(&augment(&a), &w.transpose())?;
            a = z.map(|v| act.apply(v));
        }
        Ok(a)
    }

    /// Mean loss, per-layer gradients and curvature hooks for one batch.
    pub fn forward_backward(
        &self,
        x: &Matrix,
        targets: Targets<'_>,
        loss: Loss,
    ) -> Result<ForwardBackward> {
        self.check_input(x)?;
        let m = x.rows();
        if m == 0 {
            return Err(Error::contract("Mlp::forward_backward", "empty batch"));
        }

        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (w, act) in self.layers.iter().zip(&self.activations) {
            let u = augment(&a);
            let z = matmul(&u, &w.transpose())?;
            a = z.map(|v| act.apply(v));
            inputs.push(u);
            pre.push(z);
        }

        let (total, mut upstream) = loss_and_gradient(&a, targets, loss)?;
        let mut nonfinite = !total.is_finite() || !a.is_finite();

        let mut out = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let act = self.activations[l];
            let g = upstream.zip_with(&pre[l], "backprop", |d, z| d * act.derivative(z))?;
            let grad = matmul_tn(&g, &inputs[l])?.scale(1.0 / m as f64);
            nonfinite |= !g.is_finite() || !grad.is_finite();
            if l > 0 {
                let w = &self.layers[l];
                let d_in = w.cols() - 1;
                let full = matmul(&g, w)?;
                upstream = Matrix::from_fn(m, d_in, |i, j| full[(i, j)]);
            }
            out.push(LayerGrad {
                grad,
                batch: LayerBatch::new(inputs[l].clone(), g)?,
            });
        }
        out.reverse();
        Ok(ForwardBackward {
            loss: total / m as f64,
            layers: out,
            nonfinite,
        })
    }

    /// Mean loss only.
    pub fn loss(&self, x: &Matrix, targets: Targets<'_>, loss: Loss) -> Result<f64> {
        let y = self.predict(x)?;
        Ok(loss_and_gradient(&y, targets, loss)?.0 / x.rows().max(1) as f64)
    }
}

/// `[a, 1]` row-wise.
fn augment(a: &Matrix) -> Matrix {
    let d = a.cols();
    Matrix::from_fn(a.rows(), d + 1, |i, j| if j == d { 1.0 } else { a[(i, j)] })
}

/// Summed loss and per-example `∂cᵢ/∂ŷᵢ`.
fn loss_and_gradient(y: &Matrix, targets: Targets<'_>, loss: Loss) -> Result<(f64, Matrix)> {
    let (m, k) = y.shape();
    match (loss, targets) {
        (Loss::Mse, Targets::Values(t)) => {
            if t.shape() != y.shape() {
                return Err(Error::shape(
                    "mse",
                    format!("outputs {:?} vs targets {:?}", y.shape(), t.shape()),
                ));
            }
            let diff = y.sub(t)?;
            let total = 0.5 * diff.data().iter().map(|d| d * d).sum::<f64>();
            Ok((total, diff))
        }
        (Loss::SoftmaxCrossEntropy, Targets::Labels(labels)) => {
            if labels.len() != m {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("{m} outputs vs {} labels", labels.len()),
                ));
            }
            if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("label {bad} with {k} classes"),
                ));
            }
            let mut grad = Matrix::zeros(m, k);
            let mut total = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                let row = y.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                total += log_z - row[label];
                for (g, v) in grad.row_mut(i).iter_mut().zip(row) {
                    *g = (v - log_z).exp();
                }
                grad.row_mut(i)[label] -= 1.0;
            }
            Ok((total, grad))
        }
        (loss, _) => Err(Error::contract(
            "Mlp::forward_backward",
            format!("targets do not match loss `{loss}`"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_model_zero_targets() {
        let mlp = Mlp::from_layers(vec![Matrix::zeros(2, 4)], vec![Activation::Identity]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]);
        let y = Matrix::zeros(2, 2);
        let fb = mlp
            .forward_backward(&x, Targets::Values(&y), Loss::Mse)
            .unwrap();
        assert_eq!(fb.loss, 0.0);
        assert_eq!(fb.layers[0].grad, Matrix::zeros(2, 4));
        assert_eq!(fb.layers[0].batch.inputs[(0, 3)], 1.0);
    }

    #[test]
    fn grad_is_mean_of_hook_outer_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::random(
            &[3, 5, 4],
            &[Activation::Tanh, Activation::Identity],
            &mut rng,
        )
        .unwrap();
        let x = Matrix::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0));
        let labels = [0, 1, 2, 3, 0, 1];
        let fb = mlp
            .forward_backward(&x, Targets::Labels(&labels), Loss::SoftmaxCrossEntropy)
            .unwrap();
        for lg in &fb.layers {
            let b = &lg.batch;
            let mut sum = Matrix::zeros(lg.grad.rows(), lg.grad.cols());
            for i in 0..b.batch_size() {
                sum = Matrix::from_fn(sum.rows(), sum.cols(), |r, c| {
                    sum[(r, c)] + b.out_grads[(i, r)] * b.inputs[(i, c)]
                });
            }
            let mean = sum.scale(1.0 / b.batch_size() as f64);
            assert!(mean.sub(&lg.grad).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mlp = Mlp::from_layers(vec![Matrix::zeros(3, 2)], vec![Activation::Identity]).unwrap();
        let x = Matrix::from_rows(&[[0.3]]);
        let l = mlp
            .loss(&x, Targets::Labels(&[2]), Loss::SoftmaxCrossEntropy)
            .unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn mismatches_are_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::random(&[2, 3], &[Activation::Identity], &mut rng).unwrap();
        let x = Matrix::zeros(2, 3);
        assert!(matches!(
            mlp.forward_backward(&x, Targets::Labels(&[0, 1]), Loss::SoftmaxCrossEntropy),
            Err(Error::Shape { .. })
        ));
        let x = Matrix::zeros(2, 2);
        assert!(mlp
            .forward_backward(&x, Targets::Labels(&[0, 3]), Loss::SoftmaxCrossEntropy)
            .is_err());
        assert!(mlp
            .forward_backward(&x, Targets::Labels(&[0, 1]), Loss::Mse)
            .is_err());
        assert!(Mlp::from_layers(
            vec![Matrix::zeros(3, 3), Matrix::zeros(2, 3)],
            vec![Activation::Relu; 2]
        )
        .is_err());
    }

    #[test]
    fn nonfinite_is_flagged() {
        let w = Matrix::from_rows(&[[f64::INFINITY, 0.0]]);
        let mlp = Mlp::from_layers(vec![w], vec![Activation::Identity]).unwrap();
        let y = Matrix::zeros(1, 1);
        let fb = mlp
            .forward_backward(&Matrix::from_rows(&[[1.0]]), Targets::Values(&y), Loss::Mse)
            .unwrap();
        assert!(fb.nonfinite);
    }
}
