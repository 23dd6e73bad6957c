use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::linalg::Matrix;
use crate::structured::{project_outer, StructureKind, StructuredFactor};

/// Timing of one projected congruence `Π̂(Kᵀ U K)` at dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub dim: usize,
    /// Best-of-repetitions seconds per call.
    pub seconds: f64,
    /// `seconds / previous row's seconds`.
    pub ratio: Option<f64>,
}

/// Rows of the batch behind `U`; fixed so only `d` varies.
pub const BENCH_BATCH: usize = 8;

/// One call of the factored congruence: map each batch row through `Kᵀ`
/// and project the mean outer product.
fn projected_congruence(k: &StructuredFactor, rows: &Matrix) -> Result<StructuredFactor> {
    let mut mapped = Matrix::zeros(rows.rows(), k.dim());
    for r in 0..rows.rows() {
        mapped.row_mut(r).copy_from_slice(&k.tmul_vec(rows.row(r)));
    }
    project_outer(k.structure(), &mapped, 1.0 / rows.rows() as f64)
}

/// Times the projected congruence for `kind` at each of `dims`.
pub fn bench(kind: StructureKind, dims: &[usize], repetitions: usize) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows: Vec<BenchRow> = Vec::with_capacity(dims.len());
    for &d in dims {
        let s = kind.fit(d);
        let coeffs = (0..s.storage_count())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let k = StructuredFactor::from_coeffs(s, coeffs)?;
        let batch = Matrix::from_fn(BENCH_BATCH, d, |_, _| rng.gen_range(-1.0..1.0));
        // Repeat cheap calls so that each timed sample is well above timer
        // resolution.
        let warm = Instant::now();
        black_box(projected_congruence(&k, &batch)?);
        let once = warm.elapsed().as_secs_f64().max(1e-9);
        let inner = ((2e-3 / once).ceil() as usize).clamp(1, 10_000);
        let mut best = f64::INFINITY;
        for _ in 0..repetitions.max(1) {
            let t = Instant::now();
            for _ in 0..inner {
                black_box(projected_congruence(black_box(&k), black_box(&batch))?);
            }
            best = best.min(t.elapsed().as_secs_f64() / inner as f64);
        }
        let ratio = rows.last().map(|p| best / p.seconds);
        rows.push(BenchRow {
            dim: d,
            seconds: best,
            ratio,
        });
    }
    Ok(rows)
}
