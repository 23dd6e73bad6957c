mod common;

use proptest::prelude::*;
use singd_core::curvature::KroneckerCurvature;
use singd_core::linalg::{matmul, truncated_expm};
use singd_core::optim::{
    ikfac_precond_update, singd_precond_update, CurvatureInput, FactorState, OptimizerConfig,
    OptimizerKind,
};
use singd_core::precision::quantize;
use singd_core::structured::{project, sandwich_precondition};
use singd_core::{Format, Matrix, StructureKind, StructuredFactor, TruncationOrder};

use common::*;

fn kind_strategy() -> impl Strategy<Value = StructureKind> {
    prop_oneof![
        Just(StructureKind::Dense),
        Just(StructureKind::Diagonal),
        (1usize..5).prop_map(|block| StructureKind::BlockDiagonal { block }),
        Just(StructureKind::Tril),
        Just(StructureKind::Triu),
        Just(StructureKind::TrilToeplitz),
        Just(StructureKind::TriuToeplitz),
        (0usize..4, 0usize..4).prop_map(|(d2, d3)| StructureKind::Hierarchical { d2, d3 }),
        (0usize..5).prop_map(|k| StructureKind::RankKTril { k }),
        (0usize..5).prop_map(|k| StructureKind::RankKTriu { k }),
    ]
}

fn symmetric(d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(-1.0f64..1.0, d * d).prop_map(move |v| {
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| if j <= i { v[i * d + j] } else { v[j * d + i] })
                    .collect()
            })
            .collect()
    })
}

fn kind_dim_matrix() -> impl Strategy<Value = (StructureKind, usize, Vec<Vec<f64>>)> {
    (kind_strategy(), 1usize..9).prop_flat_map(|(k, d)| (Just(k), Just(d), symmetric(d)))
}

fn factor(kind: StructureKind, d: usize, coeffs: &[f64]) -> StructuredFactor {
    let s = kind.fit(d);
    StructuredFactor::from_coeffs(s, coeffs[..s.storage_count()].to_vec()).unwrap()
}

fn spd(d: usize, v: &[f64]) -> Matrix {
    let m = Matrix::from_fn(d, d, |i, j| v[i * d + j]);
    matmul(&m.transpose(), &m)
        .unwrap()
        .scale(1.0 / d as f64)
        .add_diag(0.1)
        .unwrap()
        .symmetrize()
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_matches_oracle((kind, d, m) in kind_dim_matrix()) {
        let s = kind.fit(d);
        let got = to_rows(&project(s, &to_matrix(&m)).unwrap().to_dense());
        prop_assert!(max_abs_diff(&got, &dense_projection(s.kind(), d, &m)) <= 1e-14);
    }

    #[test]
    fn projection_is_linear(
        (kind, d, m) in kind_dim_matrix(),
        n in symmetric(8),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let s = kind.fit(d);
        let n: Vec<Vec<f64>> = n[..d].iter().map(|r| r[..d].to_vec()).collect();
        let (m, n) = (to_matrix(&m), to_matrix(&n));
        let lhs = project(s, &m.scale(a).add(&n.scale(b)).unwrap()).unwrap().to_dense();
        let rhs = project(s, &m).unwrap().to_dense().scale(a)
            .add(&project(s, &n).unwrap().to_dense().scale(b)).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn projection_lands_in_support((kind, d, m) in kind_dim_matrix()) {
        let s = kind.fit(d);
        let p = project(s, &to_matrix(&m)).unwrap().to_dense();
        for i in 0..d {
            for j in 0..d {
                if !s.in_support(i, j) {
                    prop_assert_eq!(p[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn storage_matches_closed_form(kind in kind_strategy(), d in 0usize..20) {
        prop_assert_eq!(kind.fit(d).storage_count(), storage_closed_form(kind, d));
    }

    #[test]
    fn products_stay_in_class(
        kind in kind_strategy(),
        d in 1usize..9,
        a in prop::collection::vec(-1.0f64..1.0, 64),
        b in prop::collection::vec(-1.0f64..1.0, 64),
        beta in 0.0f64..0.5,
    ) {
        let (fa, fb) = (factor(kind, d, &a), factor(kind, d, &b));
        let dense = matmul(&fa.to_dense(), &fb.to_dense()).unwrap();
        prop_assert!(fa.mul(&fb).unwrap().to_dense().sub(&dense).unwrap().max_abs() <= 1e-12);
        let upd = fa.right_update(&fb, beta, TruncationOrder::Second).unwrap().to_dense();
        let want = matmul(&fa.to_dense(), &truncated_expm(&fb.to_dense(), -beta, TruncationOrder::Second).unwrap()).unwrap();
        prop_assert!(upd.sub(&want).unwrap().max_abs() <= 1e-12);
        let s = kind.fit(d);
        for i in 0..d {
            for j in 0..d {
                if !s.in_support(i, j) {
                    prop_assert!(dense[(i, j)].abs() <= 1e-14);
                }
            }
        }
    }

    #[test]
    fn sandwich_matches_dense(
        kc in kind_strategy(),
        kk in kind_strategy(),
        c in prop::collection::vec(-1.0f64..1.0, 64),
        k in prop::collection::vec(-1.0f64..1.0, 64),
        g in prop::collection::vec(-1.0f64..1.0, 20),
    ) {
        let (fc, fk) = (factor(kc, 4, &c), factor(kk, 5, &k));
        let g = Matrix::from_vec(4, 5, g).unwrap();
        let (dc, dk) = (fc.to_dense(), fk.to_dense());
        let want = matmul(&matmul(&matmul(&dc, &dc.transpose()).unwrap(), &g).unwrap(),
            &matmul(&dk, &dk.transpose()).unwrap()).unwrap();
        let got = sandwich_precondition(&fc, &g, &fk).unwrap();
        prop_assert!(got.sub(&want).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn singd_is_scale_invariant(
        kind in kind_strategy(),
        u in prop::collection::vec(-1.0f64..1.0, 25),
        g in prop::collection::vec(-1.0f64..1.0, 16),
        alpha in prop_oneof![Just(0.1f64), Just(10.0), 0.2f64..5.0],
    ) {
        let cfg = OptimizerConfig {
            alpha1: 0.3,
            structure_k: kind,
            structure_c: kind,
            ..OptimizerConfig::new(OptimizerKind::Singd)
        };
        let curv = KroneckerCurvature::new(spd(5, &u), spd(4, &g)).unwrap();
        let mut plain = FactorState::new(&cfg, 5, 4);
        let mut scaled = plain.clone();
        for _ in 0..3 {
            singd_precond_update(&mut plain, CurvatureInput::Dense(&curv), &cfg).unwrap();
            singd_precond_update(&mut scaled, CurvatureInput::Dense(&curv.rescaled(alpha)), &cfg).unwrap();
        }
        let gap = plain.k.to_dense().sub(&scaled.k.to_dense()).unwrap().max_abs()
            .max(plain.c.to_dense().sub(&scaled.c.to_dense()).unwrap().max_abs());
        prop_assert!(gap <= 1e-10);
    }

    #[test]
    fn ikfac_fixed_point_is_damped_inverse(
        u in prop::collection::vec(-1.0f64..1.0, 16),
        g in prop::collection::vec(-1.0f64..1.0, 9),
    ) {
        let cfg = OptimizerConfig {
            beta1: 0.3,
            lambda: 0.05,
            ..OptimizerConfig::new(OptimizerKind::Ikfac)
        };
        let curv = KroneckerCurvature::new(spd(4, &u), spd(3, &g)).unwrap();
        let mut state = FactorState::new(&cfg, 4, 3);
        for _ in 0..400 {
            ikfac_precond_update(&mut state, CurvatureInput::Dense(&curv), &cfg).unwrap();
        }
        let k = state.k.to_dense();
        let kkt = matmul(&k, &k.transpose()).unwrap();
        let resid = matmul(&kkt, &curv.u.add_diag(cfg.lambda).unwrap()).unwrap()
            .sub(&Matrix::identity(4)).unwrap().max_abs();
        prop_assert!(resid <= 1e-8, "residual {}", resid);
    }

    #[test]
    fn quantize_is_idempotent_and_monotone(a in -1e5f64..1e5, b in -1e5f64..1e5) {
        for f in [Format::Bf16, Format::Fp16, Format::Fp32] {
            let qa = quantize(a, f);
            prop_assert_eq!(quantize(qa, f).to_bits(), qa.to_bits());
            if a <= b {
                prop_assert!(qa <= quantize(b, f));
            }
        }
    }

    #[test]
    fn quantize_matches_reference(bits in any::<u32>()) {
        let x = f32::from_bits(bits);
        prop_assume!(!x.is_nan());
        prop_assert_eq!(quantize(f64::from(x), Format::Bf16).to_bits(), bf16_reference(x).to_bits());
        prop_assert_eq!(quantize(f64::from(x), Format::Fp16).to_bits(), f16_reference(x).to_bits());
    }
}
