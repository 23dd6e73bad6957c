use crate::error::{Error, Result};
use crate::linalg::{Matrix, TruncationOrder};

use super::structure::{FactorStructure, StructureKind};
use super::toeplitz::{convolve, correlate};

/// Symmetry tolerance (relative) accepted by [`project`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

/// A Kronecker factor held in the compact layout of its structure.
///
/// Layouts: dense and block classes store their blocks row-major and
/// concatenated in the order the blocks appear top-to-bottom; triangular
/// classes are packed row-major; Toeplitz classes store one value per band
/// starting with the main diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredFactor {
    structure: FactorStructure,
    coeffs: Vec<f64>,
}

impl StructuredFactor {
    pub fn zeros(structure: FactorStructure) -> Self {
        Self {
            structure,
            coeffs: vec![0.0; structure.storage_count()],
        }
    }

    pub fn identity(structure: FactorStructure) -> Self {
        let mut out = Self::zeros(structure);
        if structure.kind().is_toeplitz() {
            if structure.dim() > 0 {
                out.coeffs[0] = 1.0;
            }
        } else {
            for i in 0..structure.dim() {
                let idx = structure
                    .coeff_index(i, i)
                    .expect("diagonal is always in support");
                out.coeffs[idx] = 1.0;
            }
        }
        out
    }

    pub fn from_coeffs(structure: FactorStructure, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != structure.storage_count() {
            return Err(Error::shape(
                "StructuredFactor::from_coeffs",
                format!(
                    "{} coefficients for {structure}, which stores {}",
                    coeffs.len(),
                    structure.storage_count()
                ),
            ));
        }
        Ok(Self { structure, coeffs })
    }

    /// Builds a member of `structure` from the entries `f(i, j)` on its
    /// support. For Toeplitz classes `f` is evaluated on the first row
    /// (upper) or first column (lower).
    pub fn from_fn(structure: FactorStructure, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(structure);
        match structure.kind() {
            StructureKind::TriuToeplitz => {
                for j in 0..structure.dim() {
                    out.coeffs[j] = f(0, j);
                }
            }
            StructureKind::TrilToeplitz => {
                for i in 0..structure.dim() {
                    out.coeffs[i] = f(i, 0);
                }
            }
            _ => out.for_each_entry_index(|i, j, idx, coeffs| coeffs[idx] = f(i, j)),
        }
        out
    }

    pub fn structure(&self) -> FactorStructure {
        self.structure
    }

    pub fn dim(&self) -> usize {
        self.structure.dim()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    /// Entry `(i, j)` of the dense matrix this factor represents.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self.structure.kind() {
            StructureKind::TriuToeplitz => {
                if j >= i {
                    self.coeffs[j - i]
                } else {
                    0.0
                }
            }
            StructureKind::TrilToeplitz => {
                if i >= j {
                    self.coeffs[i - j]
                } else {
                    0.0
                }
            }
            _ => self
                .structure
                .coeff_index(i, j)
                .map_or(0.0, |idx| self.coeffs[idx]),
        }
    }

    pub fn to_dense(&self) -> Matrix {
        let d = self.dim();
        Matrix::from_fn(d, d, |i, j| self.get(i, j))
    }

    fn for_each_entry_index(&mut self, mut f: impl FnMut(usize, usize, usize, &mut [f64])) {
        let s = self.structure;
        for i in 0..s.dim() {
            for j in s.row_support(i).into_iter().flatten() {
                let idx = s.coeff_index(i, j).expect("row support lies in the layout");
                f(i, j, idx, &mut self.coeffs);
            }
        }
    }

    fn require_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.structure != other.structure {
            return Err(Error::contract(
                op,
                format!("structure {} vs {}", self.structure, other.structure),
            ));
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            structure: self.structure,
            coeffs: self.coeffs.iter().map(|c| s * c).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.axpy(1.0, other)
    }

    /// `self + s·other`.
    pub fn axpy(&self, s: f64, other: &Self) -> Result<Self> {
        self.require_same(other, "StructuredFactor::axpy")?;
        Ok(Self {
            structure: self.structure,
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + s * b)
                .collect(),
        })
    }

    /// Structure-closed product `self · other`.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.require_same(other, "StructuredFactor::mul")?;
        let s = self.structure;
        if s.kind().is_toeplitz() {
            // (AB) bands are the truncated convolution of the band vectors,
            // for both orientations.
            return Ok(Self {
                structure: s,
                coeffs: convolve(&self.coeffs, &other.coeffs),
            });
        }
        let mut out = Self::zeros(s);
        for i in 0..s.dim() {
            for r in s.row_support(i).into_iter().flatten() {
                let a = self.coeffs[s.coeff_index(i, r).expect("support")];
                if a == 0.0 {
                    continue;
                }
                for j in s.row_support(r).into_iter().flatten() {
                    let b = other.coeffs[s.coeff_index(r, j).expect("support")];
                    let idx = s
                        .coeff_index(i, j)
                        .expect("structure is closed under multiplication");
                    out.coeffs[idx] += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `K x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim());
        let s = self.structure;
        match s.kind() {
            StructureKind::TriuToeplitz => correlate(&self.coeffs, x),
            StructureKind::TrilToeplitz => convolve(&self.coeffs, x),
            _ => {
                let mut y = vec![0.0; s.dim()];
                for (i, yi) in y.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for j in s.row_support(i).into_iter().flatten() {
                        acc += self.coeffs[s.coeff_index(i, j).expect("support")] * x[j];
                    }
                    *yi = acc;
                }
                y
            }
        }
    }

    /// `Kᵀ x`.
    pub fn tmul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim());
        let s = self.structure;
        match s.kind() {
            StructureKind::TriuToeplitz => convolve(&self.coeffs, x),
            StructureKind::TrilToeplitz => correlate(&self.coeffs, x),
            _ => {
                let mut y = vec![0.0; s.dim()];
                for (i, &xi) in x.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    for j in s.row_support(i).into_iter().flatten() {
                        y[j] += self.coeffs[s.coeff_index(i, j).expect("support")] * xi;
                    }
                }
                y
            }
        }
    }

    /// `Tr(KᵀK)`, the squared Frobenius norm of the dense form.
    pub fn gram_trace(&self) -> f64 {
        if self.structure.kind().is_toeplitz() {
            let d = self.dim();
            self.coeffs
                .iter()
                .enumerate()
                .map(|(j, a)| (d - j) as f64 * a * a)
                .sum()
        } else {
            self.coeffs.iter().map(|a| a * a).sum()
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.gram_trace().sqrt()
    }

    /// `Π̂(KᵀK)` evaluated from the compact layout.
    pub fn projected_gram(&self) -> Self {
        let s = self.structure;
        let d = s.dim();
        if s.kind().is_toeplitz() {
            // Band sums of KᵀK: Σ_s (d-j-s) a_s a_{s+j}, identical for both
            // orientations.
            let a = &self.coeffs;
            let weighted: Vec<f64> = a.iter().enumerate().map(|(s, v)| s as f64 * v).collect();
            let plain = correlate(a, a);
            let shifted = correlate(&weighted, a);
            let sums: Vec<f64> = (0..d)
                .map(|j| (d - j) as f64 * plain[j] - shifted[j])
                .collect();
            return Self::from_band_sums(s, &sums);
        }
        let mut out = Self::zeros(s);
        for r in 0..d {
            for i in s.row_support(r).into_iter().flatten() {
                let kri = self.coeffs[s.coeff_index(r, i).expect("support")];
                if kri == 0.0 {
                    continue;
                }
                for j in s.row_support(i).into_iter().flatten() {
                    if let Some(rj) = s.coeff_index(r, j) {
                        let idx = s.coeff_index(i, j).expect("support");
                        out.coeffs[idx] += kri * self.coeffs[rj];
                    }
                }
            }
        }
        out.apply_projection_weights();
        out
    }

    fn apply_projection_weights(&mut self) {
        let s = self.structure;
        self.for_each_entry_index(|i, j, idx, coeffs| {
            coeffs[idx] *= s.projection_weight(i, j);
        });
    }

    /// Toeplitz projection from raw band sums `Σ_t M_{t,t+j}`.
    fn from_band_sums(structure: FactorStructure, sums: &[f64]) -> Self {
        let d = structure.dim();
        let coeffs = sums
            .iter()
            .enumerate()
            .map(|(j, &sum)| {
                let avg = sum / (d - j) as f64;
                if j == 0 {
                    avg
                } else {
                    2.0 * avg
                }
            })
            .collect();
        Self { structure, coeffs }
    }

    /// `KᵀUK` for symmetric `U`, returned dense.
    pub fn congruence(&self, u: &Matrix) -> Result<Matrix> {
        let d = self.dim();
        if u.shape() != (d, d) {
            return Err(Error::shape(
                "congruence",
                format!("factor dim {d}, matrix {:?}", u.shape()),
            ));
        }
        if u.asymmetry() > SYMMETRY_TOLERANCE {
            return Err(Error::contract("congruence", "argument is not symmetric"));
        }
        // Rows of U K are Kᵀ applied to rows of U (U symmetric).
        let mut uk = Matrix::zeros(d, d);
        for i in 0..d {
            uk.row_mut(i).copy_from_slice(&self.tmul_vec(u.row(i)));
        }
        // Row j of (KᵀUK)ᵀ is Kᵀ applied to column j of UK.
        let ukt = uk.transpose();
        let mut out = Matrix::zeros(d, d);
        for j in 0..d {
            out.row_mut(j).copy_from_slice(&self.tmul_vec(ukt.row(j)));
        }
        out.symmetrize()
    }

    /// `K · Expm_trunc(-β₁ m)`, i.e. `K (I - β₁ m)` at first order.
    pub fn right_update(&self, m: &Self, beta1: f64, order: TruncationOrder) -> Result<Self> {
        self.require_same(m, "right_update")?;
        let mut step = StructuredFactor::identity(self.structure).axpy(-beta1, m)?;
        if order == TruncationOrder::Second {
            step = step.axpy(0.5 * beta1 * beta1, &m.mul(m)?)?;
        }
        self.mul(&step)
    }
}

/// Projection map `Π̂` of a symmetric matrix onto `structure`.
pub fn project(structure: FactorStructure, m: &Matrix) -> Result<StructuredFactor> {
    let d = structure.dim();
    if m.shape() != (d, d) {
        return Err(Error::shape(
            "project",
            format!("{structure} vs matrix {:?}", m.shape()),
        ));
    }
    if m.asymmetry() > SYMMETRY_TOLERANCE {
        return Err(Error::contract(
            "project",
            format!("argument asymmetry {:e} exceeds tolerance", m.asymmetry()),
        ));
    }
    if structure.kind().is_toeplitz() {
        let sums: Vec<f64> = (0..d)
            .map(|j| (0..d - j).map(|t| m[(t, t + j)]).sum())
            .collect();
        return Ok(StructuredFactor::from_band_sums(structure, &sums));
    }
    let mut out = StructuredFactor::from_fn(structure, |i, j| m[(i, j)]);
    out.apply_projection_weights();
    Ok(out)
}

/// `Π̂(scale · Σ_r v_r v_rᵀ)` where `v_r` are the rows of `vectors`,
/// without forming the dense sum.
pub fn project_outer(
    structure: FactorStructure,
    vectors: &Matrix,
    scale: f64,
) -> Result<StructuredFactor> {
    let d = structure.dim();
    if vectors.cols() != d {
        return Err(Error::shape(
            "project_outer",
            format!("{structure} vs vectors of length {}", vectors.cols()),
        ));
    }
    if structure.kind().is_toeplitz() {
        let mut sums = vec![0.0; d];
        for r in 0..vectors.rows() {
            let v = vectors.row(r);
            for (s, c) in sums.iter_mut().zip(correlate(v, v)) {
                *s += c;
            }
        }
        for s in &mut sums {
            *s *= scale;
        }
        return Ok(StructuredFactor::from_band_sums(structure, &sums));
    }
    let mut out = StructuredFactor::zeros(structure);
    for r in 0..vectors.rows() {
        let v = vectors.row(r);
        out.for_each_entry_index(|i, j, idx, coeffs| coeffs[idx] += v[i] * v[j]);
    }
    out.for_each_entry_index(|i, j, idx, coeffs| {
        coeffs[idx] *= scale * structure.projection_weight(i, j);
    });
    Ok(out)
}

/// `C Cᵀ G K Kᵀ` for a `d_o × d_i` matrix `G`.
pub fn sandwich_precondition(
    c: &StructuredFactor,
    g: &Matrix,
    k: &StructuredFactor,
) -> Result<Matrix> {
    if g.rows() != c.dim() || g.cols() != k.dim() {
        return Err(Error::shape(
            "sandwich_precondition",
            format!(
                "C is {0}x{0}, K is {1}x{1}, G is {2}x{3}",
                c.dim(),
                k.dim(),
                g.rows(),
                g.cols()
            ),
        ));
    }
    // Rows of G K Kᵀ.
    let mut right = Matrix::zeros(g.rows(), g.cols());
    for r in 0..g.rows() {
        let t = k.tmul_vec(g.row(r));
        right.row_mut(r).copy_from_slice(&k.mul_vec(&t));
    }
    // Columns of C Cᵀ (G K Kᵀ).
    let cols = right.transpose();
    let mut out_t = Matrix::zeros(cols.rows(), cols.cols());
    for j in 0..cols.rows() {
        let t = c.tmul_vec(cols.row(j));
        out_t.row_mut(j).copy_from_slice(&c.mul_vec(&t));
    }
    Ok(out_t.transpose())
}
