//! Reference implementations that share no code with the fast paths they
//! check: dense block-literal projection maps and integer bit-level
//! rounding to BF16 and FP16.

use crate::linalg::Matrix;
use crate::structured::{FactorStructure, StructureKind};

/// Projection of a symmetric `m`, written block by block.
pub fn projection(structure: FactorStructure, m: &Matrix) -> Matrix {
    let d = structure.dim();
    let mut out = Matrix::zeros(d, d);
    let mut put = |i: usize, j: usize, v: f64| out.data_mut()[i * d + j] = v;
    match structure.kind() {
        StructureKind::Dense => return m.clone(),
        StructureKind::Diagonal => (0..d).for_each(|i| put(i, i, m[(i, i)])),
        StructureKind::BlockDiagonal { block } => {
            for start in (0..d).step_by(block) {
                let end = (start + block).min(d);
                for i in start..end {
                    for j in start..end {
                        put(i, j, m[(i, j)]);
                    }
                }
            }
        }
        StructureKind::Tril => {
            for i in 0..d {
                put(i, i, m[(i, i)]);
                for j in 0..i {
                    put(i, j, 2.0 * m[(i, j)]);
                }
            }
        }
        StructureKind::Triu => return projection(StructureKind::Tril.fit(d), m).transpose(),
        StructureKind::TriuToeplitz => {
            for j in 0..d {
                let b = (0..d - j).map(|k| m[(k, k + j)]).sum::<f64>() / (d - j) as f64;
                let v = if j == 0 { b } else { 2.0 * b };
                for k in 0..d - j {
                    put(k, k + j, v);
                }
            }
        }
        StructureKind::TrilToeplitz => {
            return projection(StructureKind::TriuToeplitz.fit(d), m).transpose()
        }
        StructureKind::RankKTril { k } => {
            // [[M11, 2 M12], [0, Diag(M22)]]
            for i in 0..k {
                for j in 0..k {
                    put(i, j, m[(i, j)]);
                }
                for j in k..d {
                    put(i, j, 2.0 * m[(i, j)]);
                }
            }
            for i in k..d {
                put(i, i, m[(i, i)]);
            }
        }
        StructureKind::RankKTriu { k } => {
            return projection(StructureKind::RankKTril { k }.fit(d), m).transpose()
        }
        StructureKind::Hierarchical { d2, d3 } => {
            // [[M11, 2 M12, 2 M13], [0, Diag(M22), 0], [0, 2 M32, M33]]
            let (b1, b2) = (d2, d - d3);
            for i in 0..b1 {
                for j in 0..b1 {
                    put(i, j, m[(i, j)]);
                }
                for j in b1..d {
                    put(i, j, 2.0 * m[(i, j)]);
                }
            }
            for i in b1..b2 {
                put(i, i, m[(i, i)]);
            }
            for i in b2..d {
                for j in b1..b2 {
                    put(i, j, 2.0 * m[(i, j)]);
                }
                for j in b2..d {
                    put(i, j, m[(i, j)]);
                }
            }
        }
    }
    out
}

/// Round-to-nearest-even of an `f32` to BF16 on the raw bits.
pub fn bf16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    if x.is_nan() {
        return ((bits >> 16) | 0x40) as u16;
    }
    let lsb = (bits >> 16) & 1;
    (bits.wrapping_add(0x7fff + lsb) >> 16) as u16
}

pub fn bf16_to_f64(h: u16) -> f64 {
    f64::from(f32::from_bits(u32::from(h) << 16))
}

/// Round-to-nearest-even of an `f32` to IEEE binary16, including
/// subnormals and overflow to infinity.
pub fn f16_bits(x: f32) -> u16 {
    let x = x.to_bits();
    let sign = ((x >> 16) & 0x8000) as u16;
    let exp = ((x >> 23) & 0xff) as i32;
    let man = x & 0x7f_ffff;
    if exp == 0xff {
        return sign | 0x7c00 | if man != 0 { 0x200 } else { 0 };
    }
    let e = exp - 127 + 15;
    if e >= 0x1f {
        return sign | 0x7c00;
    }
    if e <= 0 {
        let shift = (14 - e) as u32;
        if shift > 24 {
            return sign;
        }
        let m = man | 0x80_0000;
        let mut half = (m >> shift) as u16;
        let round = 1u32 << (shift - 1);
        if m & round != 0 && m & (3 * round - 1) != 0 {
            half += 1;
        }
        return sign | half;
    }
    let mut half = sign | ((e as u16) << 10) | (man >> 13) as u16;
    let round = 0x1000;
    if man & round != 0 && man & (3 * round - 1) != 0 {
        half += 1;
    }
    half
}

pub fn f16_to_f64(h: u16) -> f64 {
    let sign = if h & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = i32::from((h >> 10) & 0x1f);
    let man = f64::from(h & 0x3ff);
    match exp {
        0 => sign * man * 2f64.powi(-24),
        0x1f if man == 0.0 => sign * f64::INFINITY,
        0x1f => f64::NAN,
        _ => sign * (1024.0 + man) * 2f64.powi(exp - 25),
    }
}
