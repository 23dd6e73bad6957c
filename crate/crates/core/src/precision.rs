//! Software emulation of reduced-precision storage.
//!
//! Values stay `f64` in memory but are rounded (round-to-nearest, ties to
//! even) to the significand width and exponent range of the target format at
//! operation boundaries. Accumulation inside a kernel runs in `f64` and the
//! result is rounded to the accumulation format before it is stored.

use std::fmt;
use std::str::FromStr;

use crate::linalg::Matrix;

/// Binary floating-point formats the emulator knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Format {
    Fp64,
    Fp32,
    Bf16,
    Fp16,
}

struct Layout {
    /// Significand width including the implicit bit.
    precision: i32,
    min_exp: i32,
    max_exp: i32,
}

impl Format {
    fn layout(self) -> Option<Layout> {
        match self {
            Format::Fp64 | Format::Fp32 => None,
            Format::Bf16 => Some(Layout {
                precision: 8,
                min_exp: -126,
                max_exp: 127,
            }),
            Format::Fp16 => Some(Layout {
                precision: 11,
                min_exp: -14,
                max_exp: 15,
            }),
        }
    }

    /// Significand bits including the implicit one.
    pub fn significand_bits(self) -> u32 {
        match self {
            Format::Fp64 => 53,
            Format::Fp32 => 24,
            Format::Bf16 => 8,
            Format::Fp16 => 11,
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            Format::Fp64 => 64,
            Format::Fp32 => 32,
            Format::Bf16 | Format::Fp16 => 16,
        }
    }

    /// Whether every value of `other` is exactly representable in `self`.
    pub fn covers(self, other: Format) -> bool {
        match (self, other) {
            (Format::Fp64, _) => true,
            (Format::Fp32, Format::Fp64) => false,
            (Format::Fp32, _) => true,
            (a, b) => a == b,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Format::Fp64 => "fp64",
            Format::Fp32 => "fp32",
            Format::Bf16 => "bf16",
            Format::Fp16 => "fp16",
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp64" | "f64" => Ok(Format::Fp64),
            "fp32" | "f32" => Ok(Format::Fp32),
            "bf16" => Ok(Format::Bf16),
            "fp16" | "f16" => Ok(Format::Fp16),
            other => Err(format!("unknown numeric format `{other}`")),
        }
    }
}

/// Rounds `x` to the nearest value representable in `format`, ties to even.
///
/// Overflow produces a signed infinity and values below the smallest
/// subnormal round to a signed zero.
pub fn quantize(x: f64, format: Format) -> f64 {
    let Some(layout) = format.layout() else {
        return match format {
            Format::Fp32 => x as f32 as f64,
            _ => x,
        };
    };
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    // Exponent of the leading bit; values in the target's subnormal range
    // share the quantum of the smallest normal binade.
    let exp = exponent_of(x).max(layout.min_exp);
    let quantum = pow2(exp - (layout.precision - 1));
    let q = (x / quantum).round_ties_even() * quantum;
    let max_finite = (2.0 - pow2(1 - layout.precision)) * pow2(layout.max_exp);
    if q.abs() > max_finite {
        f64::INFINITY.copysign(x)
    } else {
        q
    }
}

pub fn quantize_matrix(m: &Matrix, format: Format) -> Matrix {
    m.map(|x| quantize(x, format))
}

pub fn quantize_slice(values: &mut [f64], format: Format) {
    if format == Format::Fp64 {
        return;
    }
    for v in values {
        *v = quantize(*v, format);
    }
}

fn exponent_of(x: f64) -> i32 {
    let bits = x.abs().to_bits();
    let biased = (bits >> 52) as i32;
    if biased == 0 {
        // f64 subnormal: far below any emulated format's range
        -1023 - (bits.leading_zeros() as i32 - 12)
    } else {
        biased - 1023
    }
}

fn pow2(e: i32) -> f64 {
    2.0_f64.powi(e)
}

/// Tensor groups that can be held in reduced-precision storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantizePoint {
    FactorState,
    Gradients,
    Curvature,
    Parameters,
}

impl QuantizePoint {
    pub const ALL: [QuantizePoint; 4] = [
        QuantizePoint::FactorState,
        QuantizePoint::Gradients,
        QuantizePoint::Curvature,
        QuantizePoint::Parameters,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuantizePoint::FactorState => "factor_state",
            QuantizePoint::Gradients => "gradients",
            QuantizePoint::Curvature => "curvature",
            QuantizePoint::Parameters => "parameters",
        }
    }
}

impl FromStr for QuantizePoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QuantizePoint::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown quantize point `{s}`"))
    }
}

/// Which tensors live in which format.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionPolicy {
    pub storage: Format,
    pub accumulation: Format,
    pub quantize_points: Vec<QuantizePoint>,
}

impl Default for PrecisionPolicy {
    fn default() -> Self {
        Self::fp64()
    }
}

impl PrecisionPolicy {
    /// Full double precision; every quantization is a no-op.
    pub fn fp64() -> Self {
        Self {
            storage: Format::Fp64,
            accumulation: Format::Fp64,
            quantize_points: Vec::new(),
        }
    }

    pub fn fp32() -> Self {
        Self {
            storage: Format::Fp32,
            accumulation: Format::Fp32,
            quantize_points: QuantizePoint::ALL.to_vec(),
        }
    }

    /// BF16 storage for all tensor groups, FP32 accumulation.
    pub fn bf16() -> Self {
        Self {
            storage: Format::Bf16,
            accumulation: Format::Fp32,
            quantize_points: QuantizePoint::ALL.to_vec(),
        }
    }

    pub fn new(
        storage: Format,
        accumulation: Format,
        quantize_points: Vec<QuantizePoint>,
    ) -> Result<Self, String> {
        if !accumulation.covers(storage) {
            return Err(format!(
                "accumulation format {accumulation} is narrower than storage format {storage}"
            ));
        }
        if !matches!(accumulation, Format::Fp64 | Format::Fp32) {
            return Err(format!(
                "accumulation format must be fp64 or fp32, got {accumulation}"
            ));
        }
        Ok(Self {
            storage,
            accumulation,
            quantize_points,
        })
    }

    pub fn applies_to(&self, point: QuantizePoint) -> bool {
        self.storage != Format::Fp64 && self.quantize_points.contains(&point)
    }

    pub fn is_exact(&self) -> bool {
        self.accumulation == Format::Fp64
            && (self.storage == Format::Fp64 || self.quantize_points.is_empty())
    }

    /// Rounds a stored tensor if `point` is held in reduced precision.
    pub fn store(&self, point: QuantizePoint, values: &mut [f64]) {
        if self.applies_to(point) {
            quantize_slice(values, self.storage);
        }
    }

    pub fn store_matrix(&self, point: QuantizePoint, m: &mut Matrix) {
        self.store(point, m.data_mut());
    }

    /// Rounds a kernel result to the accumulation format.
    pub fn accumulate(&self, values: &mut [f64]) {
        quantize_slice(values, self.accumulation);
    }

    pub fn accumulate_matrix(&self, m: &mut Matrix) {
        self.accumulate(m.data_mut());
    }

    pub fn accumulate_scalar(&self, x: f64) -> f64 {
        quantize(x, self.accumulation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(1.0, Format::Bf16), 1.0);
        assert_eq!(quantize(1.0 + 2f64.powi(-8), Format::Bf16), 1.0);
        assert_eq!(quantize(0.2, Format::Bf16), 0.2001953125);
        // tie above an odd significand rounds up
        assert_eq!(
            quantize(1.0 + 3.0 * 2f64.powi(-8), Format::Bf16),
            1.0 + 2f64.powi(-6)
        );
    }

    #[test]
    fn overflow_and_subnormals() {
        let bf16_max = (2.0 - 2f64.powi(-7)) * 2f64.powi(127);
        assert_eq!(quantize(bf16_max, Format::Bf16), bf16_max);
        assert_eq!(quantize(2f64.powi(128), Format::Bf16), f64::INFINITY);
        assert_eq!(quantize(-1e39, Format::Bf16), f64::NEG_INFINITY);
        assert_eq!(quantize(70000.0, Format::Fp16), f64::INFINITY);
        assert_eq!(quantize(65504.0, Format::Fp16), 65504.0);
        // smallest fp16 subnormal is 2^-24; half of it ties to zero
        assert_eq!(quantize(2f64.powi(-24), Format::Fp16), 2f64.powi(-24));
        assert_eq!(quantize(2f64.powi(-25), Format::Fp16), 0.0);
        assert_eq!(quantize(1.5 * 2f64.powi(-25), Format::Fp16), 2f64.powi(-24));
        assert_eq!(quantize(2f64.powi(-133), Format::Bf16), 2f64.powi(-133));
        assert!(quantize(f64::NAN, Format::Bf16).is_nan());
        assert_eq!(quantize(0.1, Format::Fp32), 0.1_f32 as f64);
        assert_eq!(quantize(0.1, Format::Fp64), 0.1);
    }

    #[test]
    fn agrees_with_hardware_f32_conversion() {
        // f32 -> bf16 RNE on f32 inputs is a one-step rounding, so the
        // classic bias trick is an exact reference there.
        for bits in (0u32..u32::MAX).step_by(99_991) {
            let x = f32::from_bits(bits);
            if !x.is_finite() {
                continue;
            }
            let rounded = bits.wrapping_add(0x7fff + ((bits >> 16) & 1)) & 0xffff_0000;
            let expected = f32::from_bits(rounded) as f64;
            let got = quantize(x as f64, Format::Bf16);
            if expected.is_finite() {
                assert_eq!(got, expected, "x = {x:e}");
            } else {
                assert!(got.is_infinite());
            }
        }
    }

    #[test]
    fn policy_rules() {
        assert!(PrecisionPolicy::new(Format::Bf16, Format::Fp32, vec![]).is_ok());
        assert!(PrecisionPolicy::new(Format::Fp64, Format::Fp32, vec![]).is_err());
        assert!(PrecisionPolicy::new(Format::Bf16, Format::Bf16, vec![]).is_err());
        let p = PrecisionPolicy::bf16();
        let mut v = vec![0.2];
        p.store(QuantizePoint::Curvature, &mut v);
        assert_eq!(v[0], 0.2001953125);
        let mut w = vec![0.2];
        PrecisionPolicy::fp64().store(QuantizePoint::Curvature, &mut w);
        assert_eq!(w[0], 0.2);
        assert!(PrecisionPolicy::fp64().is_exact());
        assert_eq!(
            "factor_state".parse::<QuantizePoint>(),
            Ok(QuantizePoint::FactorState)
        );
        assert_eq!("BF16".parse::<Format>(), Ok(Format::Bf16));
    }
}
