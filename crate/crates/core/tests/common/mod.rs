//! Oracles for the integration tests. Nothing here calls into the library's
//! structured or precision code paths.

#![allow(dead_code)]

use rand::Rng;
use singd_core::model::{Loss, Mlp, Targets};
use singd_core::{Matrix, StructureKind};

/// Region of entry `(i, j)` for a kind at dimension `d`, plus the factor the
/// projection applies there. `None` means the entry is zeroed.
fn projection_rule(kind: StructureKind, d: usize, i: usize, j: usize) -> Option<f64> {
    match kind {
        StructureKind::Dense => Some(1.0),
        StructureKind::Diagonal => (i == j).then_some(1.0),
        StructureKind::BlockDiagonal { block } => (i / block == j / block).then_some(1.0),
        StructureKind::Tril => match i.cmp(&j) {
            std::cmp::Ordering::Equal => Some(1.0),
            std::cmp::Ordering::Greater => Some(2.0),
            std::cmp::Ordering::Less => None,
        },
        StructureKind::Triu => projection_rule(StructureKind::Tril, d, j, i),
        StructureKind::RankKTril { k } => {
            if i < k && j < k {
                Some(1.0)
            } else if i < k {
                Some(2.0)
            } else {
                (i == j).then_some(1.0)
            }
        }
        StructureKind::RankKTriu { k } => projection_rule(StructureKind::RankKTril { k }, d, j, i),
        StructureKind::Hierarchical { d2, d3 } => {
            let top = |x: usize| x < d2;
            let bottom = |x: usize| x >= d - d3;
            let middle = |x: usize| !top(x) && !bottom(x);
            if top(i) && top(j) {
                Some(1.0)
            } else if top(i) {
                Some(2.0)
            } else if middle(i) {
                (i == j).then_some(1.0)
            } else if bottom(j) {
                Some(1.0)
            } else if middle(j) {
                Some(2.0)
            } else {
                None
            }
        }
        StructureKind::TriuToeplitz | StructureKind::TrilToeplitz => unreachable!("band rule"),
    }
}

/// Dense projection of a symmetric matrix, straight from the table of
/// projection maps.
pub fn dense_projection(kind: StructureKind, d: usize, m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; d]; d];
    match kind {
        StructureKind::TriuToeplitz | StructureKind::TrilToeplitz => {
            for band in 0..d {
                let n = d - band;
                let mean: f64 = (0..n).map(|t| m[t][t + band]).sum::<f64>() / n as f64;
                let value = if band == 0 { mean } else { 2.0 * mean };
                for t in 0..n {
                    if kind == StructureKind::TriuToeplitz {
                        out[t][t + band] = value;
                    } else {
                        out[t + band][t] = value;
                    }
                }
            }
        }
        _ => {
            for i in 0..d {
                for j in 0..d {
                    if let Some(w) = projection_rule(kind, d, i, j) {
                        out[i][j] = w * m[i][j];
                    }
                }
            }
        }
    }
    out
}

/// Closed-form stored-scalar count.
pub fn storage_closed_form(kind: StructureKind, d: usize) -> usize {
    match kind {
        StructureKind::Dense => d * d,
        StructureKind::Diagonal => d,
        StructureKind::BlockDiagonal { block } => {
            let k = block.clamp(1, d.max(1));
            let r = d % k;
            (d / k) * k * k + r * r
        }
        StructureKind::Tril | StructureKind::Triu => d * (d + 1) / 2,
        StructureKind::TrilToeplitz | StructureKind::TriuToeplitz => d,
        StructureKind::RankKTril { k } | StructureKind::RankKTriu { k } => {
            let k = k.min(d);
            k * k + k * (d - k) + (d - k)
        }
        StructureKind::Hierarchical { d2, d3 } => {
            let d2 = d2.min(d);
            let d3 = d3.min(d - d2);
            d2 * d2 + d2 * (d - d2) + (d - d2 - d3) + d3 * (d - d2 - d3) + d3 * d3
        }
    }
}

pub fn random_symmetric_rows(d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let lower: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..=i).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    (0..d)
        .map(|i| (0..d).map(|j| lower[i.max(j)][i.min(j)]).collect())
        .collect()
}

pub fn to_matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows)
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Reference rounding through the `half` crate.
pub fn bf16_reference(x: f32) -> f64 {
    f64::from(half::bf16::from_f32(x).to_f32())
}

pub fn f16_reference(x: f32) -> f64 {
    f64::from(half::f16::from_f32(x).to_f32())
}

/// `‖g_fd - g‖ / ‖g‖` over all parameters, with `g_fd` the central
/// differences of the mean loss.
pub fn finite_difference_error(
    model: &Mlp,
    x: &Matrix,
    targets: Targets<'_>,
    loss: Loss,
    h: f64,
) -> f64 {
    let analytic = model.forward_backward(x, targets, loss).unwrap();
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (l, lg) in analytic.layers.iter().enumerate() {
        let n = model.layers()[l].data().len();
        for p in 0..n {
            let mut plus = model.clone();
            plus.layers_mut()[l].data_mut()[p] += h;
            let mut minus = model.clone();
            minus.layers_mut()[l].data_mut()[p] -= h;
            let fd = (plus.loss(x, targets, loss).unwrap() - minus.loss(x, targets, loss).unwrap())
                / (2.0 * h);
            let g = lg.grad.data()[p];
            diff += (fd - g) * (fd - g);
            norm += g * g;
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-300)
}

/// Round-to-nearest-even of a finite `f64` to a binary format with
/// `mantissa_bits` stored fraction bits and exponent range
/// `[min_exp, max_exp]`, by integer shifting of the significand.
pub fn round_f64_bits(x: f64, mantissa_bits: i32, min_exp: i32, max_exp: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { -1.0 } else { 1.0 };
    let biased = ((bits >> 52) & 0x7ff) as i32;
    let (m, e) = if biased == 0 {
        (bits & ((1 << 52) - 1), -1022)
    } else {
        ((bits & ((1 << 52) - 1)) | (1 << 52), biased - 1023)
    };
    let quantum_exp = e.max(min_exp) - mantissa_bits;
    let shift = quantum_exp - (e - 52);
    let q = if shift >= 64 {
        0
    } else {
        let shift = shift as u32;
        let q = m >> shift;
        let rem = m & ((1u64 << shift) - 1);
        let half = 1u64 << (shift - 1);
        if rem > half || (rem == half && q & 1 == 1) {
            q + 1
        } else {
            q
        }
    };
    let value = q as f64 * 2f64.powi(quantum_exp);
    let max_finite = (2.0 - 2f64.powi(-mantissa_bits)) * 2f64.powi(max_exp);
    if value > max_finite {
        sign * f64::INFINITY
    } else {
        sign * value
    }
}

pub fn bf16_reference_f64(x: f64) -> f64 {
    round_f64_bits(x, 7, -126, 127)
}

pub fn f16_reference_f64(x: f64) -> f64 {
    round_f64_bits(x, 10, -14, 15)
}
