use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::curvature::{KroneckerCurvature, LayerBatch};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, dense_inverse, matmul, Matrix};

/// `ℓ(W) = ½ tr(Wᵀ B W A) - tr(bᵀ W)` over `W ∈ R^{d_o × d_i}`.
///
/// Its Hessian is exactly `A ⊗ B`, so the Kronecker curvature is known in
/// closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerQuadratic {
    /// `d_i × d_i`, SPD.
    pub a: Matrix,
    /// `d_o × d_o`, SPD.
    pub b: Matrix,
    /// `d_o × d_i`.
    pub target: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticEval {
    pub loss: f64,
    pub grad: Matrix,
    pub curvature: KroneckerCurvature,
}

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Orthogonal `Q` from modified Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(d: usize, rng: &mut impl Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for q in &cols {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
    }
    Matrix::from_fn(d, d, |i, j| cols[j][i])
}

/// `Q diag(λ) Qᵀ` with eigenvalues spaced geometrically from 1 down to `1/cond`.
fn conditioned_spd(d: usize, cond: f64, rng: &mut impl Rng) -> Matrix {
    let q = random_orthogonal(d, rng);
    let eig: Vec<f64> = (0..d)
        .map(|i| {
            if d == 1 {
                1.0
            } else {
                cond.powf(-(i as f64) / (d - 1) as f64)
            }
        })
        .collect();
    let qd = Matrix::from_fn(d, d, |i, j| q[(i, j)] * eig[j]);
    matmul(&qd, &q.transpose())
        .expect("square")
        .symmetrize()
        .expect("square")
}

impl KroneckerQuadratic {
    pub fn new(a: Matrix, b: Matrix, target: Matrix) -> Result<Self> {
        if !a.is_square() || !b.is_square() || target.shape() != (b.rows(), a.rows()) {
            return Err(Error::shape(
                "KroneckerQuadratic::new",
                format!(
                    "A {:?}, B {:?}, b {:?}",
                    a.shape(),
                    b.shape(),
                    target.shape()
                ),
            ));
        }
        Ok(Self { a, b, target })
    }

    /// `A = MᵀM + εI`, `B = NᵀN + εI` with Gaussian `M`, `N` and target.
    pub fn random(d_in: usize, d_out: usize, eps: f64, rng: &mut impl Rng) -> Self {
        let spd = |d: usize, rng: &mut _| {
            let m = gaussian(d, d, rng).scale(1.0 / (d as f64).sqrt());
            matmul(&m.transpose(), &m)
                .expect("square")
                .add_diag(eps)
                .expect("square")
        };
        let a = spd(d_in, rng);
        let b = spd(d_out, rng);
        let target = gaussian(d_out, d_in, rng);
        Self { a, b, target }
    }

    /// `A`, `B` with largest eigenvalue 1 and `cond(A ⊗ B) = cond`, split
    /// evenly between the two factors.
    pub fn conditioned(d_in: usize, d_out: usize, cond: f64, rng: &mut impl Rng) -> Self {
        let per_factor = cond.sqrt();
        let a = conditioned_spd(d_in, per_factor, rng);
        let b = conditioned_spd(d_out, per_factor, rng);
        let target = gaussian(d_out, d_in, rng);
        Self { a, b, target }
    }

    pub fn input_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn eval(&self, w: &Matrix) -> Result<QuadraticEval> {
        if w.shape() != self.target.shape() {
            return Err(Error::shape(
                "kronecker_quadratic_eval",
                format!("W {:?}, task expects {:?}", w.shape(), self.target.shape()),
            ));
        }
        let bwa = matmul(&matmul(&self.b, w)?, &self.a)?;
        let dot = |x: &Matrix, y: &Matrix| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| p * q)
                .sum::<f64>()
        };
        let loss = 0.5 * dot(w, &bwa) - dot(&self.target, w);
        Ok(QuadraticEval {
            loss,
            grad: bwa.sub(&self.target)?,
            curvature: self.exact_curvature(),
        })
    }

    pub fn exact_curvature(&self) -> KroneckerCurvature {
        KroneckerCurvature {
            u: self.a.clone(),
            g: self.b.clone(),
        }
    }

    /// The minimizer `B⁻¹ b A⁻¹`.
    pub fn solution(&self) -> Result<Matrix> {
        matmul(
            &matmul(&dense_inverse(&self.b)?, &self.target)?,
            &dense_inverse(&self.a)?,
        )
    }

    /// Inputs and output gradients whose batch-mean outer products are
    /// exactly `A` and `B`: the scaled Cholesky rows, zero-padded to a
    /// common batch size.
    pub fn defining_batch(&self) -> Result<LayerBatch> {
        let m = self.input_dim().max(self.output_dim());
        let rows = |x: &Matrix| -> Result<Matrix> {
            let l = cholesky(x)?;
            let s = (m as f64).sqrt();
            Ok(Matrix::from_fn(m, x.rows(), |r, c| {
                if r < x.rows() {
                    s * l[(c, r)]
                } else {
                    0.0
                }
            }))
        };
        LayerBatch::new(rows(&self.a)?, rows(&self.b)?)
    }
}
