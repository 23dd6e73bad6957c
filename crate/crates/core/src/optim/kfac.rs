use crate::curvature::{ema_update, KroneckerCurvature};
use crate::error::Result;
use crate::linalg::{dense_inverse, matmul, Matrix};
use crate::precision::QuantizePoint;

use super::{momentum_update, OptimizerConfig};

/// KFAC reference state: EMA factors and their damped inverses.
#[derive(Debug, Clone, PartialEq)]
pub struct KfacState {
    pub s_k: Matrix,
    pub s_c: Matrix,
    /// Cached `(S_K + λI)⁻¹`.
    pub s_k_inv: Matrix,
    /// Cached `(S_C + λI)⁻¹`.
    pub s_c_inv: Matrix,
    pub momentum: Matrix,
    failed_side: &'static str,
}

impl KfacState {
    /// `S_K = I`, `S_C = I`, caches `(1 + λ)⁻¹ I`.
    pub fn new(d_in: usize, d_out: usize, lambda: f64) -> Self {
        Self::with_factors(Matrix::identity(d_in), Matrix::identity(d_out), lambda)
    }

    /// `S = (1 - λ) I` so that `(S + λI)⁻¹ = I`, matching an inverse-free
    /// optimizer started from `K = C = I`.
    pub fn matched_to_identity(d_in: usize, d_out: usize, lambda: f64) -> Self {
        Self::with_factors(
            Matrix::identity(d_in).scale(1.0 - lambda),
            Matrix::identity(d_out).scale(1.0 - lambda),
            lambda,
        )
    }

    fn with_factors(s_k: Matrix, s_c: Matrix, lambda: f64) -> Self {
        let inv = |s: &Matrix| {
            dense_inverse(&s.add_diag(lambda).expect("square"))
                .unwrap_or_else(|_| Matrix::zeros(s.rows(), s.cols()))
        };
        Self {
            s_k_inv: inv(&s_k),
            s_c_inv: inv(&s_c),
            momentum: Matrix::zeros(s_c.rows(), s_k.rows()),
            s_k,
            s_c,
            failed_side: "",
        }
    }

    pub(crate) fn last_failed_side(&self) -> &'static str {
        self.failed_side
    }

    pub fn is_finite(&self) -> bool {
        self.s_k.is_finite()
            && self.s_c.is_finite()
            && self.s_k_inv.is_finite()
            && self.s_c_inv.is_finite()
            && self.momentum.is_finite()
    }

    /// `‖(S_K + λI) · S_K⁻¹ - I‖_F` with the cached inverse: how far the
    /// stored inverse is from being one.
    pub fn inverse_residual_k(&self, lambda: f64) -> f64 {
        inverse_residual(&self.s_k, &self.s_k_inv, lambda)
    }

    pub fn inverse_residual_c(&self, lambda: f64) -> f64 {
        inverse_residual(&self.s_c, &self.s_c_inv, lambda)
    }

    /// `m_μ ← α₂ m_μ + S_C⁻¹ G S_K⁻¹ + γW`, `W ← W - β₂ m_μ`.
    pub fn apply_direction(
        &mut self,
        grad: &Matrix,
        weights: &mut Matrix,
        cfg: &OptimizerConfig,
    ) -> Result<()> {
        let mut direction = matmul(&matmul(&self.s_c_inv, grad)?, &self.s_k_inv)?;
        cfg.precision.accumulate_matrix(&mut direction);
        momentum_update(&mut self.momentum, &direction, weights, cfg)
    }
}

fn inverse_residual(s: &Matrix, s_inv: &Matrix, lambda: f64) -> f64 {
    let damped = s.add_diag(lambda).expect("square");
    match matmul(&damped, s_inv).and_then(|p| p.sub(&Matrix::identity(s.rows()))) {
        Ok(r) => r.frobenius_norm(),
        Err(_) => f64::INFINITY,
    }
}

/// EMA-update `S_K`, `S_C` with the fresh curvature, then refresh the
/// damped inverses. On a singular damped factor the error is returned and
/// the previous inverse stays cached.
pub fn kfac_precond_update(
    state: &mut KfacState,
    curv: &KroneckerCurvature,
    cfg: &OptimizerConfig,
) -> Result<()> {
    let p = &cfg.precision;
    let mut u = curv.u.clone();
    let mut g = curv.g.clone();
    p.store_matrix(QuantizePoint::Curvature, &mut u);
    p.store_matrix(QuantizePoint::Curvature, &mut g);

    state.s_k = ema_update(&state.s_k, &u, cfg.beta1)?;
    state.s_c = ema_update(&state.s_c, &g, cfg.beta1)?;
    for s in [&mut state.s_k, &mut state.s_c] {
        p.accumulate_matrix(s);
        p.store_matrix(QuantizePoint::FactorState, s);
    }

    let invert = |s: &Matrix| -> Result<Matrix> {
        let mut inv = dense_inverse(&s.add_diag(cfg.lambda)?)?;
        p.accumulate_matrix(&mut inv);
        p.store_matrix(QuantizePoint::FactorState, &mut inv);
        Ok(inv)
    };
    let k_inv = invert(&state.s_k).inspect_err(|_| state.failed_side = "K");
    let c_inv = invert(&state.s_c).inspect_err(|_| state.failed_side = "C");
    let mut first_err = None;
    match k_inv {
        Ok(inv) => state.s_k_inv = inv,
        Err(e) => first_err = Some(e),
    }
    match c_inv {
        Ok(inv) => state.s_c_inv = inv,
        Err(e) => {
            first_err.get_or_insert(e);
        }
    }
    first_err.map_or(Ok(()), Err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::optim::OptimizerKind;

    fn cfg(beta1: f64, lambda: f64) -> OptimizerConfig {
        OptimizerConfig {
            beta1,
            lambda,
            ..OptimizerConfig::new(OptimizerKind::Kfac)
        }
    }

    fn scalar(v: f64) -> Matrix {
        Matrix::from_rows(&[[v]])
    }

    #[test]
    fn identity_is_a_fixed_point() {
        let mut s = KfacState::new(3, 2, 0.0);
        let curv = KroneckerCurvature::new(Matrix::identity(3), Matrix::identity(2)).unwrap();
        kfac_precond_update(&mut s, &curv, &cfg(0.5, 0.0)).unwrap();
        assert_eq!(s.s_k, Matrix::identity(3));
        assert_eq!(s.s_k_inv, Matrix::identity(3));
    }

    #[test]
    fn scalar_ema_and_inverse() {
        let mut s = KfacState::new(1, 1, 0.0);
        let curv = KroneckerCurvature::new(scalar(4.0), scalar(1.0)).unwrap();
        kfac_precond_update(&mut s, &curv, &cfg(0.1, 0.0)).unwrap();
        assert!((s.s_k[(0, 0)] - 1.3).abs() < 1e-15);
        assert!((s.s_k_inv[(0, 0)] - 1.0 / 1.3).abs() < 1e-15);
        assert!((s.s_k_inv[(0, 0)] - 0.76923).abs() < 1e-5);
    }

    #[test]
    fn zero_factor_without_damping_is_singular() {
        let mut s = KfacState::new(2, 1, 0.0);
        let curv = KroneckerCurvature::new(Matrix::zeros(2, 2), scalar(1.0)).unwrap();
        let err = kfac_precond_update(&mut s, &curv, &cfg(1.0, 0.0));
        assert!(matches!(err, Err(Error::Singular { pivot: 0 })));
        assert_eq!(s.last_failed_side(), "K");
        // stale inverse kept
        assert_eq!(s.s_k_inv, Matrix::identity(2));
    }

    #[test]
    fn direction_uses_cached_inverses() {
        let mut s = KfacState::new(2, 1, 0.0);
        s.s_k_inv = Matrix::from_diag(&[2.0, 3.0]);
        s.s_c_inv = scalar(0.5);
        let mut w = Matrix::from_rows(&[[1.0, 1.0]]);
        let c = OptimizerConfig {
            beta2: 1.0,
            ..cfg(0.1, 0.0)
        };
        s.apply_direction(&Matrix::from_rows(&[[1.0, 1.0]]), &mut w, &c)
            .unwrap();
        assert_eq!(w, Matrix::from_rows(&[[0.0, -0.5]]));
    }

    #[test]
    fn matched_start_has_identity_inverse() {
        let s = KfacState::matched_to_identity(3, 2, 0.25);
        assert_eq!(s.s_k_inv, Matrix::identity(3));
        assert!(s.inverse_residual_k(0.25) < 1e-15);
    }
}
