//! IKFAC and SINGD preconditioner updates.
//!
//! Both keep factors `K` (`d_i × d_i`) and `C` (`d_o × d_o`) with
//! `KKᵀ ⊗ CCᵀ` approximating the damped inverse curvature and update them
//! multiplicatively, `K ← K (I - β₁ m_K)`, from a tangent `m_K` projected
//! onto the factor's structure. INGD is SINGD with dense factors.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::precision::{PrecisionPolicy, QuantizePoint};
use crate::structured::{
    project, project_outer, sandwich_precondition, FactorStructure, StructuredFactor,
};

use super::{momentum_update, CurvatureInput, OptimizerConfig};

/// Factor state shared by IKFAC and SINGD.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorState {
    pub k: StructuredFactor,
    pub c: StructuredFactor,
    pub m_k: StructuredFactor,
    pub m_c: StructuredFactor,
    pub momentum: Matrix,
}

impl FactorState {
    /// `K = I`, `C = I` in the configured structures, zero momenta.
    pub fn new(cfg: &OptimizerConfig, d_in: usize, d_out: usize) -> Self {
        Self::from_structures(cfg.structure_k.fit(d_in), cfg.structure_c.fit(d_out))
    }

    pub fn from_structures(structure_k: FactorStructure, structure_c: FactorStructure) -> Self {
        Self {
            k: StructuredFactor::identity(structure_k),
            c: StructuredFactor::identity(structure_c),
            m_k: StructuredFactor::zeros(structure_k),
            m_c: StructuredFactor::zeros(structure_c),
            momentum: Matrix::zeros(structure_c.dim(), structure_k.dim()),
        }
    }

    pub fn d_in(&self) -> usize {
        self.k.dim()
    }

    pub fn d_out(&self) -> usize {
        self.c.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.k.is_finite()
            && self.c.is_finite()
            && self.m_k.is_finite()
            && self.m_c.is_finite()
            && self.momentum.is_finite()
    }

    /// `C Cᵀ G K Kᵀ`.
    pub fn precondition(&self, grad: &Matrix) -> Result<Matrix> {
        sandwich_precondition(&self.c, grad, &self.k)
    }

    /// `m_μ ← α₂ m_μ + C Cᵀ G K Kᵀ + γW`, `W ← W - β₂ m_μ`.
    pub fn apply_direction(
        &mut self,
        grad: &Matrix,
        weights: &mut Matrix,
        cfg: &OptimizerConfig,
    ) -> Result<()> {
        let mut direction = self.precondition(grad)?;
        cfg.precision.accumulate_matrix(&mut direction);
        momentum_update(&mut self.momentum, &direction, weights, cfg)
    }
}

/// Which scalars multiply `H_K` and `KᵀK` in the SINGD tangent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceTerms {
    /// `Tr(H_C)` and `λ Tr(CᵀC)` (and mirrored for `C`).
    #[default]
    Adaptive,
    /// Both traces replaced by the other side's dimension; with `α₁ = 0`
    /// this is the IKFAC update.
    Identity,
}

/// `Π̂(H)` and `Tr(H)` for `H = FᵀXF` where `X` is one side of the curvature.
struct ProjectedCurvature {
    projected: StructuredFactor,
    trace: f64,
}

fn projected_curvature(
    factor: &StructuredFactor,
    dense: Option<&Matrix>,
    batch: Option<&Matrix>,
    precision: &PrecisionPolicy,
) -> Result<ProjectedCurvature> {
    let structure = factor.structure();
    if let Some(x) = dense {
        let mut x = x.clone();
        precision.store_matrix(QuantizePoint::Curvature, &mut x);
        let mut h = factor.congruence(&x)?;
        precision.accumulate_matrix(&mut h);
        return Ok(ProjectedCurvature {
            trace: h.trace(),
            projected: project(structure, &h)?,
        });
    }
    let rows = batch.expect("one curvature source");
    let m = rows.rows();
    // H = (1/m) Σ (Fᵀx)(Fᵀx)ᵀ, never formed densely.
    let mut mapped = Matrix::zeros(m, structure.dim());
    let mut x = vec![0.0; structure.dim()];
    for r in 0..m {
        x.copy_from_slice(rows.row(r));
        precision.store(QuantizePoint::Curvature, &mut x);
        let mut v = factor.tmul_vec(&x);
        precision.accumulate(&mut v);
        mapped.row_mut(r).copy_from_slice(&v);
    }
    let inv_m = 1.0 / m as f64;
    let trace = mapped.data().iter().map(|v| v * v).sum::<f64>() * inv_m;
    Ok(ProjectedCurvature {
        projected: project_outer(structure, &mapped, inv_m)?,
        trace,
    })
}

fn curvature_sides(
    state: &FactorState,
    curv: CurvatureInput<'_>,
    precision: &PrecisionPolicy,
) -> Result<(ProjectedCurvature, ProjectedCurvature)> {
    let (d_in, d_out) = curv.dims();
    if d_in != state.d_in() || d_out != state.d_out() {
        return Err(Error::shape(
            "preconditioner update",
            format!(
                "curvature (d_i={d_in}, d_o={d_out}) vs factors (d_i={}, d_o={})",
                state.d_in(),
                state.d_out()
            ),
        ));
    }
    match curv {
        CurvatureInput::Dense(c) => Ok((
            projected_curvature(&state.k, Some(&c.u), None, precision)?,
            projected_curvature(&state.c, Some(&c.g), None, precision)?,
        )),
        CurvatureInput::Batch(b) => Ok((
            projected_curvature(&state.k, None, Some(&b.inputs), precision)?,
            projected_curvature(&state.c, None, Some(&b.out_grads), precision)?,
        )),
    }
}

fn store_factor(precision: &PrecisionPolicy, f: &mut StructuredFactor) {
    precision.accumulate(f.coeffs_mut());
    precision.store(QuantizePoint::FactorState, f.coeffs_mut());
}

fn advance_factors(state: &mut FactorState, cfg: &OptimizerConfig) -> Result<()> {
    let p = &cfg.precision;
    store_factor(p, &mut state.m_k);
    store_factor(p, &mut state.m_c);
    state.k = state
        .k
        .right_update(&state.m_k, cfg.beta1, cfg.truncation)?;
    state.c = state
        .c
        .right_update(&state.m_c, cfg.beta1, cfg.truncation)?;
    store_factor(p, &mut state.k);
    store_factor(p, &mut state.c);
    Ok(())
}

/// IKFAC refresh: `m_K = Π̂(½(H_K + λKᵀK - I))`, `K ← K (I - β₁ m_K)`, and
/// likewise for `C`. Riemannian momentum is always zero here.
pub fn ikfac_precond_update(
    state: &mut FactorState,
    curv: CurvatureInput<'_>,
    cfg: &OptimizerConfig,
) -> Result<()> {
    let (hk, hc) = curvature_sides(state, curv, &cfg.precision)?;
    let tangent = |h: StructuredFactor, f: &StructuredFactor| -> Result<StructuredFactor> {
        let id = StructuredFactor::identity(f.structure());
        Ok(h.axpy(cfg.lambda, &f.projected_gram())?
            .axpy(-1.0, &id)?
            .scale(0.5))
    };
    state.m_k = tangent(hk.projected, &state.k)?;
    state.m_c = tangent(hc.projected, &state.c)?;
    advance_factors(state, cfg)
}

/// SINGD refresh with adaptive trace terms.
pub fn singd_precond_update(
    state: &mut FactorState,
    curv: CurvatureInput<'_>,
    cfg: &OptimizerConfig,
) -> Result<()> {
    singd_precond_update_with(state, curv, cfg, TraceTerms::Adaptive)
}

/// SINGD refresh:
///
/// ```text
/// m_K ← α₁ m_K + (1/2d_o) Π̂_K(Tr(H_C) H_K + c² KᵀK - d_o I),  c² = λ Tr(CᵀC)
/// m_C ← α₁ m_C + (1/2d_i) Π̂_C(Tr(H_K) H_C + κ² CᵀC - d_i I),  κ² = λ Tr(KᵀK)
/// K ← K (I - β₁ m_K),  C ← C (I - β₁ m_C)
/// ```
///
/// All traces are taken from the factors before either is updated.
pub fn singd_precond_update_with(
    state: &mut FactorState,
    curv: CurvatureInput<'_>,
    cfg: &OptimizerConfig,
    terms: TraceTerms,
) -> Result<()> {
    let (hk, hc) = curvature_sides(state, curv, &cfg.precision)?;
    let (d_in, d_out) = (state.d_in() as f64, state.d_out() as f64);
    let (trace_hc, trace_ctc, trace_hk, trace_ktk) = match terms {
        TraceTerms::Adaptive => (
            hc.trace,
            state.c.gram_trace(),
            hk.trace,
            state.k.gram_trace(),
        ),
        TraceTerms::Identity => (d_out, d_out, d_in, d_in),
    };
    let c2 = cfg.lambda * trace_ctc;
    let kappa2 = cfg.lambda * trace_ktk;

    let tangent = |h: StructuredFactor,
                   scale: f64,
                   damping: f64,
                   f: &StructuredFactor,
                   other_dim: f64|
     -> Result<StructuredFactor> {
        let id = StructuredFactor::identity(f.structure());
        let bracket = h
            .scale(scale)
            .axpy(damping, &f.projected_gram())?
            .axpy(-other_dim, &id)?;
        Ok(bracket.scale(1.0 / (2.0 * other_dim)))
    };
    let fresh_k = tangent(hk.projected, trace_hc, c2, &state.k, d_out)?;
    let fresh_c = tangent(hc.projected, trace_hk, kappa2, &state.c, d_in)?;
    state.m_k = state.m_k.scale(cfg.alpha1).add(&fresh_k)?;
    state.m_c = state.m_c.scale(cfg.alpha1).add(&fresh_c)?;
    advance_factors(state, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::{KroneckerCurvature, LayerBatch};
    use crate::linalg::{dense_inverse, matmul};
    use crate::optim::OptimizerKind;
    use crate::structured::StructureKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_rows(&[[v]])
    }

    fn cfg(kind: OptimizerKind, beta1: f64, lambda: f64) -> OptimizerConfig {
        OptimizerConfig {
            beta1,
            lambda,
            ..OptimizerConfig::new(kind)
        }
    }

    fn kkt(f: &StructuredFactor) -> Matrix {
        let d = f.to_dense();
        matmul(&d, &d.transpose()).unwrap()
    }

    #[test]
    fn ikfac_is_stationary_at_exact_inverse() {
        let c = cfg(OptimizerKind::Ikfac, 0.1, 0.0);
        let mut s = FactorState::new(&c, 3, 2);
        let curv = KroneckerCurvature::new(Matrix::identity(3), Matrix::identity(2)).unwrap();
        ikfac_precond_update(&mut s, CurvatureInput::Dense(&curv), &c).unwrap();
        assert_eq!(s.m_k.to_dense(), Matrix::zeros(3, 3));
        assert_eq!(s.k.to_dense(), Matrix::identity(3));
    }

    #[test]
    fn ikfac_scalar_tracks_kfac_to_second_order() {
        let curv = KroneckerCurvature::new(scalar(4.0), scalar(1.0)).unwrap();
        let run = |beta1: f64| {
            let c = cfg(OptimizerKind::Ikfac, beta1, 0.0);
            let mut s = FactorState::new(&c, 1, 1);
            ikfac_precond_update(&mut s, CurvatureInput::Dense(&curv), &c).unwrap();
            (s.m_k.coeffs()[0], s.k.coeffs()[0])
        };
        let (m, k) = run(0.1);
        assert!((m - 1.5).abs() < 1e-15);
        assert!((k - 0.85).abs() < 1e-15);
        let gap_1 = (1.0 / 1.3 - k * k).abs();
        assert!((k * k - 0.7225).abs() < 1e-14);
        assert!((gap_1 - 0.0467).abs() < 1e-4);

        let (_, k) = run(0.05);
        assert!((k * k - 0.855625).abs() < 1e-14);
        let gap_2 = (1.0 / 1.15 - k * k).abs();
        assert!((gap_2 - 0.01394).abs() < 1e-5);
        assert!((gap_1 / gap_2 - 3.35).abs() < 0.01);
    }

    #[test]
    fn singd_reduces_to_ikfac_with_scalar_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let u = matmul(&a.transpose(), &a).unwrap();
        let curv = KroneckerCurvature::new(u, scalar(1.0)).unwrap();
        let lambda = 0.01;
        let mut singd = FactorState::new(&cfg(OptimizerKind::Singd, 0.1, lambda), 4, 1);
        let mut ikfac = singd.clone();
        singd_precond_update(
            &mut singd,
            CurvatureInput::Dense(&curv),
            &cfg(OptimizerKind::Singd, 0.1, lambda),
        )
        .unwrap();
        ikfac_precond_update(
            &mut ikfac,
            CurvatureInput::Dense(&curv),
            &cfg(OptimizerKind::Ikfac, 0.1, lambda),
        )
        .unwrap();
        let diff = singd
            .k
            .to_dense()
            .sub(&ikfac.k.to_dense())
            .unwrap()
            .max_abs();
        assert!(diff < 1e-15, "K differs by {diff}");
    }

    #[test]
    fn singd_is_stationary_at_identity_curvature() {
        let c = cfg(OptimizerKind::Singd, 0.3, 0.0);
        let mut s = FactorState::new(&c, 3, 2);
        let curv = KroneckerCurvature::new(Matrix::identity(3), Matrix::identity(2)).unwrap();
        singd_precond_update(&mut s, CurvatureInput::Dense(&curv), &c).unwrap();
        assert_eq!(s.m_k.to_dense(), Matrix::zeros(3, 3));
        assert_eq!(s.m_c.to_dense(), Matrix::zeros(2, 2));
        assert_eq!(s.k.to_dense(), Matrix::identity(3));
    }

    #[test]
    fn batch_and_dense_curvature_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = Matrix::from_fn(6, 5, |_, _| rng.gen_range(-1.0..1.0));
        let out_grads = Matrix::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0));
        let batch = LayerBatch::new(inputs, out_grads).unwrap();
        let dense = crate::curvature::batch_curvature(&batch);
        for kind in [
            StructureKind::Dense,
            StructureKind::Diagonal,
            StructureKind::TriuToeplitz,
            StructureKind::RankKTril { k: 1 },
            StructureKind::Hierarchical { d2: 1, d3: 1 },
        ] {
            let c = OptimizerConfig {
                structure_k: kind,
                structure_c: kind,
                alpha1: 0.5,
                ..cfg(OptimizerKind::Singd, 0.1, 0.01)
            };
            let mut a = FactorState::new(&c, 5, 3);
            let mut b = a.clone();
            for _ in 0..5 {
                singd_precond_update(&mut a, CurvatureInput::Dense(&dense), &c).unwrap();
                singd_precond_update(&mut b, CurvatureInput::Batch(&batch), &c).unwrap();
            }
            let diff = a.k.to_dense().sub(&b.k.to_dense()).unwrap().max_abs();
            assert!(diff < 1e-12, "{kind}: {diff}");
        }
    }

    #[test]
    fn structured_direction_matches_dense_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let structured = FactorState {
            k: StructuredFactor::from_fn(StructureKind::Tril.fit(4), |_, _| {
                rng.gen_range(-1.0..1.0)
            }),
            c: StructuredFactor::from_fn(StructureKind::Diagonal.fit(3), |_, _| {
                rng.gen_range(0.5..1.5)
            }),
            ..FactorState::from_structures(
                StructureKind::Tril.fit(4),
                StructureKind::Diagonal.fit(3),
            )
        };
        let dense = FactorState {
            k: StructuredFactor::from_fn(FactorStructure::dense(4), |i, j| structured.k.get(i, j)),
            c: StructuredFactor::from_fn(FactorStructure::dense(3), |i, j| structured.c.get(i, j)),
            ..FactorState::from_structures(FactorStructure::dense(4), FactorStructure::dense(3))
        };
        let grad = Matrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let c = OptimizerConfig {
            alpha2: 0.5,
            gamma: 0.1,
            ..cfg(OptimizerKind::Singd, 0.1, 0.0)
        };
        let (mut s1, mut s2) = (structured, dense);
        let mut w1 = Matrix::from_fn(3, 4, |i, j| (i + j) as f64);
        let mut w2 = w1.clone();
        for _ in 0..3 {
            s1.apply_direction(&grad, &mut w1, &c).unwrap();
            s2.apply_direction(&grad, &mut w2, &c).unwrap();
        }
        assert!(s1.momentum.sub(&s2.momentum).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn direction_examples() {
        let c = OptimizerConfig {
            beta2: 0.5,
            ..cfg(OptimizerKind::Singd, 0.1, 0.0)
        };
        let mut s = FactorState::new(&c, 2, 2);
        let grad = Matrix::from_rows(&[[1.0, -2.0], [0.5, 4.0]]);
        let mut w = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        s.apply_direction(&grad, &mut w, &c).unwrap();
        assert_eq!(w, Matrix::from_rows(&[[0.5, 2.0], [0.75, -1.0]]));

        let c = OptimizerConfig {
            beta2: 1.0,
            gamma: 0.1,
            ..cfg(OptimizerKind::Singd, 0.1, 0.0)
        };
        let mut s = FactorState::new(&c, 2, 1);
        let mut w = Matrix::from_rows(&[[2.0, -3.0]]);
        s.apply_direction(&Matrix::zeros(1, 2), &mut w, &c).unwrap();
        assert!(w.sub(&Matrix::from_rows(&[[1.8, -2.7]])).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn dense_singd_step_matches_damped_ema_to_second_order() {
        // (KKᵀ)⁻¹ after one INGD step ≈ (1-β₁)(KKᵀ)⁻¹ + β₁ (Tr(H_C)/d_o U + c²/d_o I)
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Matrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let u = matmul(&a.transpose(), &a).unwrap().scale(0.5);
        let b = Matrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let g = matmul(&b.transpose(), &b).unwrap().scale(0.5);
        let curv = KroneckerCurvature::new(u.clone(), g.clone()).unwrap();
        let lambda = 0.05;
        let gap = |beta1: f64| {
            let c = cfg(OptimizerKind::Singd, beta1, lambda);
            let mut s = FactorState::new(&c, 4, 3);
            let base = c.clone();
            // warm start away from identity
            singd_precond_update(
                &mut s,
                CurvatureInput::Dense(&curv),
                &OptimizerConfig { beta1: 0.2, ..base },
            )
            .unwrap();
            let s_prev = dense_inverse(&kkt(&s.k)).unwrap();
            let cd = s.c.to_dense();
            let trace_hc = matmul(&matmul(&cd.transpose(), &g).unwrap(), &cd)
                .unwrap()
                .trace();
            let c2 = lambda * s.c.gram_trace();
            let target = u.scale(trace_hc / 3.0).add_diag(c2 / 3.0).unwrap();
            let expected = s_prev
                .scale(1.0 - beta1)
                .add_scaled(&target, beta1)
                .unwrap();
            singd_precond_update(&mut s, CurvatureInput::Dense(&curv), &c).unwrap();
            let got = dense_inverse(&kkt(&s.k)).unwrap();
            got.sub(&expected).unwrap().frobenius_norm()
        };
        let (e1, e2, e3) = (gap(0.02), gap(0.01), gap(0.005));
        assert!((0.15..0.40).contains(&(e2 / e1)), "{e1} {e2}");
        assert!((0.15..0.40).contains(&(e3 / e2)), "{e2} {e3}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let c = cfg(OptimizerKind::Singd, 0.1, 0.0);
        let mut s = FactorState::new(&c, 3, 2);
        let curv = KroneckerCurvature::new(Matrix::identity(2), Matrix::identity(2)).unwrap();
        assert!(matches!(
            singd_precond_update(&mut s, CurvatureInput::Dense(&curv), &c),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            ikfac_precond_update(&mut s, CurvatureInput::Dense(&curv), &c),
            Err(Error::Shape { .. })
        ));
    }
}
