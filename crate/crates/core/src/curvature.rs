//! Kronecker curvature `U ⊗ G` for linear layers.

use crate::error::{Error, Result};
use crate::linalg::{matmul_tn, Matrix};

/// `U ⊗ G` approximating one layer's curvature block, with `U` over the
/// layer inputs (`d_i × d_i`) and `G` over the output gradients (`d_o × d_o`).
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerCurvature {
    pub u: Matrix,
    pub g: Matrix,
}

impl KroneckerCurvature {
    pub fn new(u: Matrix, g: Matrix) -> Result<Self> {
        if !u.is_square() || !g.is_square() {
            return Err(Error::shape(
                "KroneckerCurvature::new",
                format!("U {:?}, G {:?}", u.shape(), g.shape()),
            ));
        }
        Ok(Self { u, g })
    }

    pub fn input_dim(&self) -> usize {
        self.u.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.g.rows()
    }

    /// `(αU, α⁻¹G)`, which represents the same Kronecker product.
    pub fn rescaled(&self, alpha: f64) -> Self {
        Self {
            u: self.u.scale(alpha),
            g: self.g.scale(1.0 / alpha),
        }
    }
}

/// Per-example layer inputs (rows of `inputs`, `m × d_i`) and gradients of
/// each example's loss with respect to the layer output (rows of
/// `out_grads`, `m × d_o`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBatch {
    pub inputs: Matrix,
    pub out_grads: Matrix,
}

impl LayerBatch {
    pub fn new(inputs: Matrix, out_grads: Matrix) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::contract("LayerBatch::new", "empty batch"));
        }
        if inputs.rows() != out_grads.rows() {
            return Err(Error::shape(
                "LayerBatch::new",
                format!(
                    "{} inputs vs {} output gradients",
                    inputs.rows(),
                    out_grads.rows()
                ),
            ));
        }
        Ok(Self { inputs, out_grads })
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.rows()
    }
}

/// `U = (1/m) Σ uᵢuᵢᵀ`, `G = (1/m) Σ gᵢgᵢᵀ`.
pub fn linear_layer_curvature(inputs: &Matrix, out_grads: &Matrix) -> Result<KroneckerCurvature> {
    let batch = LayerBatch::new(inputs.clone(), out_grads.clone())?;
    Ok(batch_curvature(&batch))
}

pub fn batch_curvature(batch: &LayerBatch) -> KroneckerCurvature {
    let inv_m = 1.0 / batch.batch_size() as f64;
    let gram = |x: &Matrix| {
        matmul_tn(x, x)
            .expect("gram of a single matrix is always conformable")
            .scale(inv_m)
    };
    KroneckerCurvature {
        u: gram(&batch.inputs),
        g: gram(&batch.out_grads),
    }
}

/// `(1 - β₁) prev + β₁ fresh`.
pub fn ema_update(prev: &Matrix, fresh: &Matrix, beta1: f64) -> Result<Matrix> {
    prev.zip_with(fresh, "ema_update", |p, f| (1.0 - beta1) * p + beta1 * f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_example_outer_products() {
        let c = linear_layer_curvature(
            &Matrix::from_rows(&[[1.0, 2.0]]),
            &Matrix::from_rows(&[[3.0]]),
        )
        .unwrap();
        assert_eq!(c.u, Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]));
        assert_eq!(c.g, Matrix::from_rows(&[[9.0]]));
    }

    #[test]
    fn batch_mean() {
        let c = linear_layer_curvature(
            &Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]),
            &Matrix::from_rows(&[[1.0], [1.0]]),
        )
        .unwrap();
        assert_eq!(c.u, Matrix::identity(2).scale(0.5));
        let zero = linear_layer_curvature(&Matrix::zeros(3, 2), &Matrix::zeros(3, 1)).unwrap();
        assert_eq!(zero.u, Matrix::zeros(2, 2));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            linear_layer_curvature(&Matrix::zeros(0, 2), &Matrix::zeros(0, 1)),
            Err(Error::Contract { .. })
        ));
        assert!(matches!(
            linear_layer_curvature(&Matrix::zeros(2, 2), &Matrix::zeros(3, 1)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn ema_examples() {
        let prev = Matrix::identity(2);
        let fresh = Matrix::identity(2).scale(3.0);
        assert_eq!(ema_update(&prev, &fresh, 1.0).unwrap(), fresh);
        assert_eq!(ema_update(&prev, &fresh, 0.0).unwrap(), prev);
        assert_eq!(
            ema_update(&prev, &fresh, 0.5).unwrap(),
            Matrix::identity(2).scale(2.0)
        );
        assert!(ema_update(&prev, &Matrix::identity(3), 0.5).is_err());
    }
}
