use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::oracle;
use crate::curvature::KroneckerCurvature;
use crate::error::Result;
use crate::linalg::{matmul, Matrix, TruncationOrder};
use crate::model::KroneckerQuadratic;
use crate::optim::{
    ikfac_precond_update, kfac_precond_update, singd_precond_update_with, CurvatureInput,
    FactorState, KfacState, LayerOptimizer, LayerState, OptimizerConfig, OptimizerKind, StepEvent,
    TraceTerms,
};
use crate::precision::{quantize, Format, PrecisionPolicy};
use crate::structured::{project, FactorStructure, StructureKind, StructuredFactor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Theorem1,
    Invariance,
    Projections,
    Closure,
    Precision,
    Quadratic,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Theorem1,
        Suite::Invariance,
        Suite::Projections,
        Suite::Closure,
        Suite::Precision,
        Suite::Quadratic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Theorem1 => "theorem1",
            Suite::Invariance => "invariance",
            Suite::Projections => "projections",
            Suite::Closure => "closure",
            Suite::Precision => "precision",
            Suite::Quadratic => "quadratic",
        }
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s.trim())
            .ok_or_else(|| {
                let names: Vec<_> = Suite::ALL.iter().map(|x| x.name()).collect();
                format!("unknown suite `{s}` (one of {})", names.join(", "))
            })
    }
}

/// One measured property.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyCheck {
    pub name: String,
    pub measured: f64,
    pub bound: String,
    pub passed: bool,
}

impl PropertyCheck {
    fn at_most(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            bound: format!("<= {bound:e}"),
            passed: measured <= bound,
        }
    }

    fn above(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            bound: format!("> {bound:e}"),
            passed: measured > bound,
        }
    }

    fn within(name: impl Into<String>, measured: f64, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            bound: format!("in [{lo}, {hi}]"),
            passed: (lo..=hi).contains(&measured),
        }
    }

    fn holds(name: impl Into<String>, ok: bool, what: &str) -> Self {
        Self {
            name: name.into(),
            measured: f64::from(u8::from(ok)),
            bound: what.to_string(),
            passed: ok,
        }
    }
}

impl fmt::Display for PropertyCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} measured={:.3e} bound={} {}",
            self.name,
            self.measured,
            self.bound,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub fn verify(suite: Suite) -> Result<Vec<PropertyCheck>> {
    match suite {
        Suite::Theorem1 => theorem1_suite(),
        Suite::Invariance => invariance_suite(),
        Suite::Projections => Ok(projections_suite()),
        Suite::Closure => closure_suite(),
        Suite::Precision => precision_suite(),
        Suite::Quadratic => quadratic_suite(),
    }
}

/// Every structure class, with parameters that make block-diagonal ragged
/// at most of the dimensions used here.
pub fn structure_classes() -> Vec<StructureKind> {
    vec![
        StructureKind::Dense,
        StructureKind::Diagonal,
        StructureKind::BlockDiagonal { block: 3 },
        StructureKind::Tril,
        StructureKind::Triu,
        StructureKind::TrilToeplitz,
        StructureKind::TriuToeplitz,
        StructureKind::Hierarchical { d2: 2, d3: 1 },
        StructureKind::RankKTril { k: 2 },
        StructureKind::RankKTriu { k: 2 },
    ]
}

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `MᵀM / d` for Gaussian `M`: SPD with eigenvalues of order one.
pub fn random_spd(d: usize, rng: &mut impl Rng) -> Matrix {
    let m = gaussian(d, d, rng);
    matmul(&m.transpose(), &m)
        .expect("square")
        .scale(1.0 / d as f64)
        .symmetrize()
        .expect("square")
}

fn random_symmetric(d: usize, rng: &mut impl Rng) -> Matrix {
    let m = Matrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    m.add(&m.transpose()).expect("square").scale(0.5)
}

/// `‖KKᵀ - (S_K + λI)⁻¹‖_F` after `updates` IKFAC and KFAC refreshes on the
/// same seeded SPD stream, both started from the identity preconditioner.
pub fn theorem1_error(beta1: f64, d: usize, updates: usize, lambda: f64, seed: u64) -> Result<f64> {
    let cfg = OptimizerConfig {
        beta1,
        lambda,
        ..OptimizerConfig::new(OptimizerKind::Ikfac)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kfac = KfacState::matched_to_identity(d, d, lambda);
    let mut ikfac = FactorState::new(&cfg, d, d);
    for _ in 0..updates {
        let curv = KroneckerCurvature::new(random_spd(d, &mut rng), random_spd(d, &mut rng))?;
        kfac_precond_update(&mut kfac, &curv, &cfg)?;
        ikfac_precond_update(&mut ikfac, CurvatureInput::Dense(&curv), &cfg)?;
    }
    let k = ikfac.k.to_dense();
    Ok(matmul(&k, &k.transpose())?
        .sub(&kfac.s_k_inv)?
        .frobenius_norm())
}

fn theorem1_suite() -> Result<Vec<PropertyCheck>> {
    let e: Vec<f64> = [0.1, 0.05, 0.025]
        .iter()
        .map(|&b| theorem1_error(b, 8, 20, 1e-3, 2024))
        .collect::<Result<_>>()?;
    Ok(vec![
        PropertyCheck::within("theorem1 e(0.05)/e(0.1)", e[1] / e[0], 0.15, 0.40),
        PropertyCheck::within("theorem1 e(0.025)/e(0.05)", e[2] / e[1], 0.15, 0.40),
    ])
}

/// Weights and factors after every step of a fixed random stream, for
/// comparing trajectories.
pub fn trajectory(
    cfg: &OptimizerConfig,
    d_out: usize,
    d_in: usize,
    steps: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = LayerOptimizer::new(cfg, d_out, d_in)?;
    let mut w = gaussian(d_out, d_in, &mut rng);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let curv =
            KroneckerCurvature::new(random_spd(d_in, &mut rng), random_spd(d_out, &mut rng))?
                .rescaled(alpha);
        let grad = gaussian(d_out, d_in, &mut rng);
        opt.step(Some(CurvatureInput::Dense(&curv)), &grad, &mut w, 1.0)?;
        let mut snapshot = w.data().to_vec();
        if let LayerState::Singd(s) | LayerState::Ikfac(s) = opt.state() {
            snapshot.extend(s.k.to_dense().data());
            snapshot.extend(s.c.to_dense().data());
        }
        out.push(snapshot);
    }
    Ok(out)
}

fn max_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn invariance_suite() -> Result<Vec<PropertyCheck>> {
    let (d_out, d_in, steps) = (5, 7, 50);
    let mut checks = Vec::new();
    for kind in structure_classes() {
        let cfg = OptimizerConfig {
            beta1: 0.05,
            beta2: 0.05,
            alpha1: 0.5,
            alpha2: 0.5,
            lambda: 1e-2,
            structure_k: kind,
            structure_c: kind,
            ..OptimizerConfig::new(OptimizerKind::Singd)
        };
        let base = trajectory(&cfg, d_out, d_in, steps, 1.0, 31)?;
        let gap = [0.1, 10.0]
            .iter()
            .map(|&a| {
                Ok(max_gap(
                    &base,
                    &trajectory(&cfg, d_out, d_in, steps, a, 31)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        checks.push(PropertyCheck::at_most(
            format!("invariance singd {kind}"),
            gap,
            1e-10,
        ));
    }
    let ikfac = OptimizerConfig {
        beta1: 0.05,
        beta2: 0.05,
        lambda: 1e-2,
        ..OptimizerConfig::new(OptimizerKind::Ikfac)
    };
    let base = trajectory(&ikfac, d_out, d_in, steps, 1.0, 31)?;
    for a in [0.1, 10.0] {
        let gap = max_gap(&base, &trajectory(&ikfac, d_out, d_in, steps, a, 31)?);
        checks.push(PropertyCheck::above(
            format!("invariance ikfac alpha={a}"),
            gap,
            1e-3,
        ));
    }
    Ok(checks)
}

fn projections_suite() -> Vec<PropertyCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checks = Vec::new();
    for kind in structure_classes() {
        let mut worst: f64 = 0.0;
        for d in [4, 7] {
            let s = kind.fit(d);
            for _ in 0..100 {
                let m = random_symmetric(d, &mut rng);
                let got = project(s, &m).expect("symmetric").to_dense();
                worst = worst.max(got.sub(&oracle::projection(s, &m)).expect("same").max_abs());
            }
        }
        checks.push(PropertyCheck::at_most(
            format!("projection {kind}"),
            worst,
            1e-14,
        ));
    }
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = random_symmetric(6, &mut rng);
        let p = project(StructureKind::Tril.fit(6), &m)
            .expect("symmetric")
            .to_dense();
        let sum = p.add(&p.transpose()).expect("square");
        worst = worst.max(sum.sub(&m.scale(2.0)).expect("square").max_abs());
    }
    checks.push(PropertyCheck::at_most(
        "projection tril identity",
        worst,
        1e-14,
    ));
    checks
}

fn mass_outside(structure: FactorStructure, m: &Matrix) -> f64 {
    let d = structure.dim();
    let mut worst: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            if !structure.in_support(i, j) {
                worst = worst.max(m[(i, j)].abs());
            }
        }
    }
    worst
}

fn random_factor(s: FactorStructure, rng: &mut impl Rng) -> StructuredFactor {
    let coeffs = (0..s.storage_count())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    StructuredFactor::from_coeffs(s, coeffs).expect("count matches")
}

/// Worst off-support mass and worst deviation from the dense product over
/// `pairs` random factor pairs, for `A·B` and `A(I - βB)`.
pub fn closure_errors(
    kind: StructureKind,
    d: usize,
    pairs: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let s = kind.fit(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut outside, mut mismatch) = (0.0f64, 0.0f64);
    for _ in 0..pairs {
        let a = random_factor(s, &mut rng);
        let b = random_factor(s, &mut rng);
        let dense = matmul(&a.to_dense(), &b.to_dense())?;
        let prod = a.mul(&b)?.to_dense();
        let beta = 0.3;
        for order in [TruncationOrder::First, TruncationOrder::Second] {
            let upd = a.right_update(&b, beta, order)?.to_dense();
            let step = crate::linalg::truncated_expm(&b.to_dense(), -beta, order)?;
            let dense_upd = matmul(&a.to_dense(), &step)?;
            outside = outside
                .max(mass_outside(s, &upd))
                .max(mass_outside(s, &dense_upd));
            mismatch = mismatch.max(upd.sub(&dense_upd)?.max_abs());
        }
        outside = outside
            .max(mass_outside(s, &dense))
            .max(mass_outside(s, &prod));
        mismatch = mismatch.max(prod.sub(&dense)?.max_abs());
    }
    Ok((outside, mismatch))
}

fn closure_suite() -> Result<Vec<PropertyCheck>> {
    let mut checks = Vec::new();
    for kind in structure_classes() {
        let (mut outside, mut mismatch) = (0.0f64, 0.0f64);
        for d in [4, 8, 16] {
            let (o, m) = closure_errors(kind, d, 100, d as u64)?;
            outside = outside.max(o);
            mismatch = mismatch.max(m);
        }
        checks.push(PropertyCheck::at_most(
            format!("closure {kind} off-support"),
            outside,
            1e-14,
        ));
        checks.push(PropertyCheck::at_most(
            format!("closure {kind} vs dense product"),
            mismatch,
            1e-12,
        ));
    }
    Ok(checks)
}

/// Random `f32` inputs: half arbitrary bit patterns, half spread over the
/// exponent range of the target format.
pub fn quantizer_samples(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x = if out.len() % 2 == 0 {
            f32::from_bits(rng.gen())
        } else {
            let e: i32 = rng.gen_range(-30..20);
            let sign = if rng.gen() { -1.0 } else { 1.0 };
            sign * rng.gen_range(1.0f32..2.0) * 2f32.powi(e)
        };
        if !x.is_nan() {
            out.push(x);
        }
    }
    out
}

/// Number of samples where [`quantize`] disagrees with the bit-level oracle.
pub fn quantizer_mismatches(format: Format, samples: &[f32]) -> usize {
    samples
        .iter()
        .filter(|&&x| {
            let want = match format {
                Format::Bf16 => oracle::bf16_to_f64(oracle::bf16_bits(x)),
                Format::Fp16 => oracle::f16_to_f64(oracle::f16_bits(x)),
                Format::Fp32 | Format::Fp64 => f64::from(x),
            };
            let got = quantize(f64::from(x), format);
            got.to_bits() != want.to_bits()
        })
        .count()
}

/// Outcome of a reduced-precision run on a conditioned quadratic.
#[derive(Debug, Clone, PartialEq)]
pub struct LowPrecisionRun {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub nonfinite: bool,
    pub singular_events: usize,
    /// KFAC only: `max(‖(S_K+λI)S_K⁻¹ - I‖_F, ‖(S_C+λI)S_C⁻¹ - I‖_F)` at the end.
    pub inverse_residual: f64,
}

pub fn low_precision_run(
    cfg: &OptimizerConfig,
    d: usize,
    cond: f64,
    steps: usize,
    seed: u64,
) -> Result<LowPrecisionRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = KroneckerQuadratic::conditioned(d, d, cond, &mut rng);
    let mut opt = LayerOptimizer::new(cfg, d, d)?;
    let mut w = Matrix::zeros(d, d);
    let initial_loss = task.eval(&w)?.loss;
    let (mut nonfinite, mut singular_events) = (false, 0);
    for _ in 0..steps {
        let e = task.eval(&w)?;
        nonfinite |= !e.loss.is_finite();
        let report = opt.step(
            Some(CurvatureInput::Dense(&e.curvature)),
            &e.grad,
            &mut w,
            1.0,
        )?;
        for ev in report.events {
            match ev {
                StepEvent::NonFinite => nonfinite = true,
                StepEvent::Singular { .. } => singular_events += 1,
            }
        }
        if nonfinite {
            break;
        }
    }
    let final_loss = task.eval(&w)?.loss;
    let inverse_residual = match opt.state() {
        LayerState::Kfac(s) => s
            .inverse_residual_k(cfg.lambda)
            .max(s.inverse_residual_c(cfg.lambda)),
        _ => 0.0,
    };
    Ok(LowPrecisionRun {
        initial_loss,
        final_loss,
        nonfinite: nonfinite || !final_loss.is_finite(),
        singular_events,
        inverse_residual,
    })
}

/// Shared settings for the BF16 robustness comparison.
pub fn low_precision_config(kind: OptimizerKind, structure: StructureKind) -> OptimizerConfig {
    OptimizerConfig {
        beta1: 0.5,
        beta2: 0.1,
        lambda: 1e-3,
        structure_k: structure,
        structure_c: structure,
        precision: PrecisionPolicy::bf16(),
        ..OptimizerConfig::new(kind)
    }
}

fn precision_suite() -> Result<Vec<PropertyCheck>> {
    let samples = quantizer_samples(100_000, 99);
    let mut checks = vec![
        PropertyCheck::at_most(
            "quantizer bf16 mismatches",
            quantizer_mismatches(Format::Bf16, &samples) as f64,
            0.0,
        ),
        PropertyCheck::at_most(
            "quantizer fp16 mismatches",
            quantizer_mismatches(Format::Fp16, &samples) as f64,
            0.0,
        ),
    ];
    for (kind, structure) in [
        (OptimizerKind::Ikfac, StructureKind::Dense),
        (OptimizerKind::Singd, StructureKind::Dense),
        (OptimizerKind::Singd, StructureKind::Diagonal),
    ] {
        let run = low_precision_run(&low_precision_config(kind, structure), 4, 1e6, 500, 5)?;
        checks.push(PropertyCheck::holds(
            format!("bf16 {kind} {structure} finite and loss decreased"),
            !run.nonfinite && run.final_loss < run.initial_loss,
            "finite, final < initial",
        ));
    }
    let kfac = low_precision_run(
        &low_precision_config(OptimizerKind::Kfac, StructureKind::Dense),
        4,
        1e6,
        500,
        5,
    )?;
    checks.push(PropertyCheck::holds(
        "bf16 kfac instability recorded",
        kfac.nonfinite || kfac.singular_events > 0 || kfac.inverse_residual > 0.1,
        "event or inverse residual > 0.1",
    ));
    let control = low_precision_run(
        &OptimizerConfig {
            precision: PrecisionPolicy::fp64(),
            ..low_precision_config(OptimizerKind::Kfac, StructureKind::Dense)
        },
        4,
        1e6,
        500,
        5,
    )?;
    checks.push(PropertyCheck::at_most(
        "fp64 kfac inverse residual",
        control.inverse_residual,
        1e-10,
    ));
    Ok(checks)
}

/// Gradient norm per step and final weight error of SINGD-Dense on a
/// conditioned 4×4 Kronecker quadratic with exact curvature.
pub fn quadratic_convergence(cond: f64, steps: usize, seed: u64) -> Result<(Vec<f64>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = KroneckerQuadratic::conditioned(4, 4, cond, &mut rng);
    let cfg = OptimizerConfig {
        beta1: 0.5,
        beta2: 0.5,
        lambda: 1e-8,
        ..OptimizerConfig::new(OptimizerKind::Singd)
    };
    let mut opt = LayerOptimizer::new(&cfg, 4, 4)?;
    let mut w = Matrix::zeros(4, 4);
    let mut norms = Vec::with_capacity(steps);
    for _ in 0..steps {
        let e = task.eval(&w)?;
        norms.push(e.grad.frobenius_norm());
        opt.step(
            Some(CurvatureInput::Dense(&e.curvature)),
            &e.grad,
            &mut w,
            1.0,
        )?;
    }
    norms.push(task.eval(&w)?.grad.frobenius_norm());
    let err = w.sub(&task.solution()?)?.max_abs();
    Ok((norms, err))
}

fn quadratic_suite() -> Result<Vec<PropertyCheck>> {
    let (norms, err) = quadratic_convergence(1e3, 200, 17)?;
    let first = norms
        .iter()
        .position(|&g| g < 1e-6)
        .map_or(f64::INFINITY, |p| p as f64);
    Ok(vec![
        PropertyCheck::at_most("quadratic steps to grad < 1e-6", first, 200.0),
        PropertyCheck::at_most("quadratic weights vs oracle", err, 1e-5),
    ])
}

/// SINGD with identity trace terms against IKFAC: worst entry gap of `K`
/// and `C` over `steps` refreshes.
pub fn ikfac_special_case_gap(d_in: usize, d_out: usize, steps: usize, seed: u64) -> Result<f64> {
    let cfg = OptimizerConfig {
        beta1: 0.05,
        lambda: 1e-3,
        ..OptimizerConfig::new(OptimizerKind::Singd)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut singd = FactorState::new(&cfg, d_in, d_out);
    let mut ikfac = singd.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let curv =
            KroneckerCurvature::new(random_spd(d_in, &mut rng), random_spd(d_out, &mut rng))?;
        singd_precond_update_with(
            &mut singd,
            CurvatureInput::Dense(&curv),
            &cfg,
            TraceTerms::Identity,
        )?;
        ikfac_precond_update(&mut ikfac, CurvatureInput::Dense(&curv), &cfg)?;
        worst = worst
            .max(singd.k.to_dense().sub(&ikfac.k.to_dense())?.max_abs())
            .max(singd.c.to_dense().sub(&ikfac.c.to_dense())?.max_abs());
    }
    Ok(worst)
}
