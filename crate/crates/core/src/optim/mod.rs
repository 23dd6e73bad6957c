//! Per-layer optimizer state machines.
//!
//! Each layer owns a [`LayerOptimizer`]. A step refreshes the preconditioner
//! from the step's curvature when `t mod T == 0` and then applies the
//! preconditioned, momentum-filtered direction to the weights.

mod baselines;
mod inverse_free;
mod kfac;

use std::fmt;
use std::str::FromStr;

use crate::curvature::{KroneckerCurvature, LayerBatch};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, TruncationOrder};
use crate::precision::{PrecisionPolicy, QuantizePoint};
use crate::structured::StructureKind;

pub use baselines::{adamw_step, sgd_momentum_step, AdamState, SgdState};
pub use inverse_free::{
    ikfac_precond_update, singd_precond_update, singd_precond_update_with, FactorState, TraceTerms,
};
pub use kfac::{kfac_precond_update, KfacState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Kfac,
    Ikfac,
    Singd,
    AdamW,
    Sgd,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [
        OptimizerKind::Kfac,
        OptimizerKind::Ikfac,
        OptimizerKind::Singd,
        OptimizerKind::AdamW,
        OptimizerKind::Sgd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Kfac => "kfac",
            OptimizerKind::Ikfac => "ikfac",
            OptimizerKind::Singd => "singd",
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Sgd => "sgd",
        }
    }

    /// Whether the optimizer consumes Kronecker curvature.
    pub fn uses_curvature(self) -> bool {
        matches!(
            self,
            OptimizerKind::Kfac | OptimizerKind::Ikfac | OptimizerKind::Singd
        )
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| format!("unknown optimizer `{s}`"))
    }
}

/// Sign convention of AdamW's weight-decay term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdamwDecaySign {
    /// `μ ← μ - β₂M + γμ`.
    #[default]
    AsPrinted,
    /// `μ ← μ - β₂M - β₂γμ`.
    Decoupled,
}

impl FromStr for AdamwDecaySign {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "as_printed" | "plus" => Ok(Self::AsPrinted),
            "decoupled" | "minus" => Ok(Self::Decoupled),
            other => Err(format!("unknown adamw_decay_sign `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Preconditioner learning rate (AdamW: second-moment rate).
    pub beta1: f64,
    /// Parameter learning rate.
    pub beta2: f64,
    /// Riemannian momentum on `m_K`, `m_C`.
    pub alpha1: f64,
    /// Parameter momentum.
    pub alpha2: f64,
    pub lambda: f64,
    /// Weight decay.
    pub gamma: f64,
    /// Preconditioner refresh interval `T` in steps.
    pub update_interval: usize,
    pub structure_k: StructureKind,
    pub structure_c: StructureKind,
    pub truncation: TruncationOrder,
    pub precision: PrecisionPolicy,
    pub adamw_decay_sign: AdamwDecaySign,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Singd,
            beta1: 0.05,
            beta2: 0.05,
            alpha1: 0.0,
            alpha2: 0.0,
            lambda: 1e-3,
            gamma: 0.0,
            update_interval: 1,
            structure_k: StructureKind::Dense,
            structure_c: StructureKind::Dense,
            truncation: TruncationOrder::First,
            precision: PrecisionPolicy::fp64(),
            adamw_decay_sign: AdamwDecaySign::AsPrinted,
        }
    }
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::contract("OptimizerConfig", detail));
        if !(self.beta1 > 0.0) || !(self.beta2 > 0.0) {
            return fail(format!(
                "beta1 and beta2 must be positive (got {}, {})",
                self.beta1, self.beta2
            ));
        }
        if !(0.0..1.0).contains(&self.alpha1) || !(0.0..1.0).contains(&self.alpha2) {
            return fail(format!(
                "alpha1 and alpha2 must lie in [0, 1) (got {}, {})",
                self.alpha1, self.alpha2
            ));
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda must be non-negative (got {})", self.lambda));
        }
        if self.update_interval == 0 {
            return fail("update interval T must be at least 1".into());
        }
        Ok(())
    }
}

/// Curvature handed to a preconditioner refresh.
#[derive(Debug, Clone, Copy)]
pub enum CurvatureInput<'a> {
    /// Dense `U` and `G`.
    Dense(&'a KroneckerCurvature),
    /// Per-example layer inputs and output gradients; `U` and `G` are their
    /// mean outer products and are never formed densely by the
    /// inverse-free optimizers.
    Batch(&'a LayerBatch),
}

impl CurvatureInput<'_> {
    fn dims(&self) -> (usize, usize) {
        match self {
            CurvatureInput::Dense(c) => (c.input_dim(), c.output_dim()),
            CurvatureInput::Batch(b) => (b.inputs.cols(), b.out_grads.cols()),
        }
    }
}

/// Something worth recording that happened during a step.
#[derive(Debug, Clone, PartialEq)]
pub enum StepEvent {
    /// A damped KFAC factor could not be inverted; stale inverses are kept.
    Singular { side: &'static str, pivot: usize },
    /// Optimizer state or weights contain NaN or infinity.
    NonFinite,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub preconditioner_updated: bool,
    pub events: Vec<StepEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerState {
    Kfac(KfacState),
    Ikfac(FactorState),
    Singd(FactorState),
    AdamW(AdamState),
    Sgd(SgdState),
}

/// Optimizer for one `d_o × d_i` weight matrix.
#[derive(Debug, Clone)]
pub struct LayerOptimizer {
    config: OptimizerConfig,
    state: LayerState,
    step: u64,
}

impl LayerOptimizer {
    pub fn new(config: &OptimizerConfig, d_out: usize, d_in: usize) -> Result<Self> {
        config.validate()?;
        let state = match config.kind {
            OptimizerKind::Kfac => LayerState::Kfac(KfacState::new(d_in, d_out, config.lambda)),
            OptimizerKind::Ikfac => LayerState::Ikfac(FactorState::new(config, d_in, d_out)),
            OptimizerKind::Singd => LayerState::Singd(FactorState::new(config, d_in, d_out)),
            OptimizerKind::AdamW => LayerState::AdamW(AdamState::new(d_out, d_in)),
            OptimizerKind::Sgd => LayerState::Sgd(SgdState::new(d_out, d_in)),
        };
        Ok(Self {
            config: config.clone(),
            state,
            step: 0,
        })
    }

    /// Wraps an explicitly constructed state.
    pub fn with_state(config: &OptimizerConfig, state: LayerState) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            state,
            step: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn state(&self) -> &LayerState {
        &self.state
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Whether the next call to [`Self::step`] refreshes the preconditioner.
    pub fn needs_curvature(&self) -> bool {
        self.config.kind.uses_curvature()
            && self.step.is_multiple_of(self.config.update_interval as u64)
    }

    /// One optimizer step. `lr_scale` multiplies `β₂` (learning-rate
    /// schedules). `curvature` is required whenever
    /// [`Self::needs_curvature`] is true.
    pub fn step(
        &mut self,
        curvature: Option<CurvatureInput<'_>>,
        grad: &Matrix,
        weights: &mut Matrix,
        lr_scale: f64,
    ) -> Result<StepReport> {
        if grad.shape() != weights.shape() {
            return Err(Error::shape(
                "LayerOptimizer::step",
                format!("grad {:?} vs weights {:?}", grad.shape(), weights.shape()),
            ));
        }
        let mut cfg = self.config.clone();
        cfg.beta2 *= lr_scale;
        let mut report = StepReport::default();

        if self.needs_curvature() {
            let curvature = curvature.ok_or_else(|| {
                Error::contract(
                    "LayerOptimizer::step",
                    "curvature required on refresh steps",
                )
            })?;
            let (d_in, d_out) = curvature.dims();
            if (d_out, d_in) != weights.shape() {
                return Err(Error::shape(
                    "LayerOptimizer::step",
                    format!(
                        "curvature dims (d_o={d_out}, d_i={d_in}) vs weights {:?}",
                        weights.shape()
                    ),
                ));
            }
            match &mut self.state {
                LayerState::Kfac(s) => {
                    let dense;
                    let curv = match curvature {
                        CurvatureInput::Dense(c) => c,
                        CurvatureInput::Batch(b) => {
                            dense = crate::curvature::batch_curvature(b);
                            &dense
                        }
                    };
                    match kfac_precond_update(s, curv, &cfg) {
                        Ok(()) => {}
                        Err(Error::Singular { pivot }) => report.events.push(StepEvent::Singular {
                            side: s.last_failed_side(),
                            pivot,
                        }),
                        Err(e) => return Err(e),
                    }
                }
                LayerState::Ikfac(s) => ikfac_precond_update(s, curvature, &cfg)?,
                LayerState::Singd(s) => singd_precond_update(s, curvature, &cfg)?,
                LayerState::AdamW(_) | LayerState::Sgd(_) => unreachable!(),
            }
            report.preconditioner_updated = true;
        }

        let mut grad = grad.clone();
        cfg.precision
            .store_matrix(QuantizePoint::Gradients, &mut grad);
        let finite = match &mut self.state {
            LayerState::Kfac(s) => {
                s.apply_direction(&grad, weights, &cfg)?;
                s.is_finite()
            }
            LayerState::Ikfac(s) | LayerState::Singd(s) => {
                s.apply_direction(&grad, weights, &cfg)?;
                s.is_finite()
            }
            LayerState::AdamW(s) => {
                adamw_step(s, &grad, weights, &cfg)?;
                s.is_finite()
            }
            LayerState::Sgd(s) => {
                sgd_momentum_step(s, &grad, weights, &cfg)?;
                s.momentum.is_finite()
            }
        };
        if !finite || !weights.is_finite() {
            report.events.push(StepEvent::NonFinite);
        }
        self.step += 1;
        Ok(report)
    }

    /// Frobenius norms of the two preconditioner factors (`K`, `C` or the
    /// KFAC inverses); zero for the baselines.
    pub fn factor_norms(&self) -> (f64, f64) {
        match &self.state {
            LayerState::Kfac(s) => (s.s_k_inv.frobenius_norm(), s.s_c_inv.frobenius_norm()),
            LayerState::Ikfac(s) | LayerState::Singd(s) => {
                (s.k.frobenius_norm(), s.c.frobenius_norm())
            }
            LayerState::AdamW(_) | LayerState::Sgd(_) => (0.0, 0.0),
        }
    }
}

/// `m_μ ← α₂ m_μ + direction + γ W`, then `W ← W - β₂ m_μ`.
pub(crate) fn momentum_update(
    momentum: &mut Matrix,
    direction: &Matrix,
    weights: &mut Matrix,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if direction.shape() != momentum.shape() || weights.shape() != momentum.shape() {
        return Err(Error::shape(
            "apply_direction",
            format!(
                "direction {:?}, weights {:?}, momentum {:?}",
                direction.shape(),
                weights.shape(),
                momentum.shape()
            ),
        ));
    }
    let p = &cfg.precision;
    for ((m, &dir), &w) in momentum
        .data_mut()
        .iter_mut()
        .zip(direction.data())
        .zip(weights.data())
    {
        *m = p.accumulate_scalar(cfg.alpha2 * *m + dir + cfg.gamma * w);
    }
    p.store_matrix(QuantizePoint::FactorState, momentum);
    for (w, &m) in weights.data_mut().iter_mut().zip(momentum.data()) {
        *w = p.accumulate_scalar(*w - cfg.beta2 * m);
    }
    p.store_matrix(QuantizePoint::Parameters, weights);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let bad = [
            OptimizerConfig {
                beta1: 0.0,
                ..Default::default()
            },
            OptimizerConfig {
                alpha2: 1.0,
                ..Default::default()
            },
            OptimizerConfig {
                lambda: -1.0,
                ..Default::default()
            },
            OptimizerConfig {
                update_interval: 0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn refresh_only_every_t_steps() {
        let cfg = OptimizerConfig {
            update_interval: 3,
            ..OptimizerConfig::new(OptimizerKind::Singd)
        };
        let mut opt = LayerOptimizer::new(&cfg, 2, 3).unwrap();
        let curv = KroneckerCurvature::new(Matrix::identity(3), Matrix::identity(2)).unwrap();
        let grad = Matrix::zeros(2, 3);
        let mut w = Matrix::zeros(2, 3);
        let mut refreshed = Vec::new();
        for _ in 0..7 {
            let r = opt
                .step(Some(CurvatureInput::Dense(&curv)), &grad, &mut w, 1.0)
                .unwrap();
            refreshed.push(r.preconditioner_updated);
        }
        assert_eq!(refreshed, [true, false, false, true, false, false, true]);
        // curvature is only demanded on refresh steps
        let mut opt = LayerOptimizer::new(&cfg, 2, 3).unwrap();
        assert!(opt.step(None, &grad, &mut w, 1.0).is_err());
        opt.step(Some(CurvatureInput::Dense(&curv)), &grad, &mut w, 1.0)
            .unwrap();
        assert!(opt.step(None, &grad, &mut w, 1.0).is_ok());
    }

    #[test]
    fn step_rejects_mismatched_shapes() {
        let cfg = OptimizerConfig::new(OptimizerKind::Sgd);
        let mut opt = LayerOptimizer::new(&cfg, 2, 3).unwrap();
        let mut w = Matrix::zeros(2, 3);
        assert!(opt.step(None, &Matrix::zeros(3, 2), &mut w, 1.0).is_err());

        let cfg = OptimizerConfig::new(OptimizerKind::Ikfac);
        let mut opt = LayerOptimizer::new(&cfg, 2, 3).unwrap();
        let curv = KroneckerCurvature::new(Matrix::identity(2), Matrix::identity(2)).unwrap();
        let r = opt.step(
            Some(CurvatureInput::Dense(&curv)),
            &Matrix::zeros(2, 3),
            &mut w,
            1.0,
        );
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn singular_kfac_is_recorded_not_fatal() {
        let cfg = OptimizerConfig {
            lambda: 0.0,
            beta1: 1.0,
            ..OptimizerConfig::new(OptimizerKind::Kfac)
        };
        let mut opt = LayerOptimizer::new(&cfg, 1, 2).unwrap();
        let curv = KroneckerCurvature::new(Matrix::zeros(2, 2), Matrix::identity(1)).unwrap();
        let mut w = Matrix::from_rows(&[[1.0, 1.0]]);
        let r = opt
            .step(
                Some(CurvatureInput::Dense(&curv)),
                &Matrix::from_rows(&[[0.5, 0.5]]),
                &mut w,
                1.0,
            )
            .unwrap();
        assert!(matches!(
            r.events[0],
            StepEvent::Singular {
                side: "K",
                pivot: 0
            }
        ));
        assert!(w.is_finite());
    }

    #[test]
    fn names_parse() {
        for k in OptimizerKind::ALL {
            assert_eq!(k.name().parse::<OptimizerKind>(), Ok(k));
        }
        assert!("ingd".parse::<OptimizerKind>().is_err());
    }
}
