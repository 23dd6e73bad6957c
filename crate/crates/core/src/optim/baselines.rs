use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::precision::QuantizePoint;

use super::{momentum_update, AdamwDecaySign, OptimizerConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub second_moment: Matrix,
    pub momentum: Matrix,
    pub t: u64,
}

impl AdamState {
    pub fn new(d_out: usize, d_in: usize) -> Self {
        Self {
            second_moment: Matrix::zeros(d_out, d_in),
            momentum: Matrix::zeros(d_out, d_in),
            t: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.second_moment.is_finite() && self.momentum.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub momentum: Matrix,
}

impl SgdState {
    pub fn new(d_out: usize, d_in: usize) -> Self {
        Self {
            momentum: Matrix::zeros(d_out, d_in),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.momentum.is_finite()
    }
}

fn check_shapes(op: &'static str, state: &Matrix, grad: &Matrix, weights: &Matrix) -> Result<()> {
    if grad.shape() != state.shape() || weights.shape() != state.shape() {
        return Err(Error::shape(
            op,
            format!(
                "gradient {:?}, weights {:?}, state {:?}",
                grad.shape(),
                weights.shape(),
                state.shape()
            ),
        ));
    }
    Ok(())
}

/// One AdamW step with `β₁` weighting the squared-gradient average, `α₂`
/// the first moment and `λ` added to the bias-corrected root:
///
/// ```text
/// m_s ← (1-β₁) m_s + β₁ g²         s = √(m_s / (1-(1-β₁)ᵗ)) + λ
/// m_μ ← α₂ m_μ + (1-α₂) g          M = m_μ / s / (1-α₂ᵗ)
/// ```
///
/// The weight update is `W ← W - β₂M + γW` or, with
/// [`AdamwDecaySign::Decoupled`], `W ← W - β₂M - β₂γW`.
pub fn adamw_step(
    state: &mut AdamState,
    grad: &Matrix,
    weights: &mut Matrix,
    cfg: &OptimizerConfig,
) -> Result<()> {
    check_shapes("adamw_step", &state.momentum, grad, weights)?;
    let p = &cfg.precision;
    state.t += 1;
    let t = state.t as i32;
    let second_correction = 1.0 - (1.0 - cfg.beta1).powi(t);
    let first_correction = 1.0 - cfg.alpha2.powi(t);
    let first_correction = if first_correction == 0.0 {
        1.0
    } else {
        first_correction
    };

    for (((ms, mu), &g), w) in state
        .second_moment
        .data_mut()
        .iter_mut()
        .zip(state.momentum.data_mut())
        .zip(grad.data())
        .zip(weights.data_mut())
    {
        *ms = p.accumulate_scalar((1.0 - cfg.beta1) * *ms + cfg.beta1 * g * g);
        *mu = p.accumulate_scalar(cfg.alpha2 * *mu + (1.0 - cfg.alpha2) * g);
        let s = (*ms / second_correction).sqrt() + cfg.lambda;
        let step = *mu / s / first_correction;
        let decay = match cfg.adamw_decay_sign {
            AdamwDecaySign::AsPrinted => cfg.gamma * *w,
            AdamwDecaySign::Decoupled => -cfg.beta2 * cfg.gamma * *w,
        };
        *w = p.accumulate_scalar(*w - cfg.beta2 * step + decay);
    }
    p.store_matrix(QuantizePoint::FactorState, &mut state.second_moment);
    p.store_matrix(QuantizePoint::FactorState, &mut state.momentum);
    p.store_matrix(QuantizePoint::Parameters, weights);
    Ok(())
}

/// `m ← α₂ m + g + γW`, `W ← W - β₂ m`.
pub fn sgd_momentum_step(
    state: &mut SgdState,
    grad: &Matrix,
    weights: &mut Matrix,
    cfg: &OptimizerConfig,
) -> Result<()> {
    check_shapes("sgd_momentum_step", &state.momentum, grad, weights)?;
    momentum_update(&mut state.momentum, grad, weights, cfg)
}
