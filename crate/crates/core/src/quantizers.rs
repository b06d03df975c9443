//! Weight quantization (clamp, scale, round) and activation quantization by
//! successive thresholding.
//!
//! Weights use a symmetric per-tensor scale with `2^(k-1) - 1` positive
//! levels, rounding half to even. A `k`-bit activation is a uniform grid of
//! `2^k` levels on `[-1, 1]`; its `2^k - 1` thresholds sit at the midpoints
//! between neighbouring levels and an input selects the level whose index is
//! the number of thresholds it strictly exceeds.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAX_BITS: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantSpec {
    bits: u8,
    signed: bool,
}

impl QuantSpec {
    pub fn new(bits: u8, signed: bool) -> Result<Self> {
        if !(1..=MAX_BITS).contains(&bits) {
            return Err(Error::arg(format!(
                "bit-width must be within 1..={MAX_BITS}, got {bits}"
            )));
        }
        Ok(Self { bits, signed })
    }

    pub fn signed(bits: u8) -> Result<Self> {
        Self::new(bits, true)
    }

    pub fn unsigned(bits: u8) -> Result<Self> {
        Self::new(bits, false)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    /// Largest representable code.
    pub fn max_code(&self) -> i32 {
        if self.signed {
            (1 << (self.bits - 1)) - 1
        } else {
            (1 << self.bits) - 1
        }
    }

    pub fn min_code(&self) -> i32 {
        if self.signed {
            -self.max_code()
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<i32>,
    shape: Vec<usize>,
    scale: f64,
    spec: QuantSpec,
}

impl QuantizedTensor {
    pub fn new(codes: Vec<i32>, shape: Vec<usize>, scale: f64, spec: QuantSpec) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::arg(format!("scale must be positive, got {scale}")));
        }
        if shape.iter().product::<usize>() != codes.len() {
            return Err(Error::shape("codes do not match shape"));
        }
        let (lo, hi) = (spec.min_code(), spec.max_code());
        if let Some(c) = codes.iter().find(|c| !(lo..=hi).contains(*c)) {
            return Err(Error::arg(format!("code {c} outside [{lo}, {hi}]")));
        }
        Ok(Self {
            codes,
            shape,
            scale,
            spec,
        })
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn spec(&self) -> QuantSpec {
        self.spec
    }
}

/// Picks the per-tensor scale for a tensor whose largest magnitude is
/// `max_abs`.
///
/// The raw ratio is nudged to a fixed point of `s -> (s * qmax) / qmax` so
/// that re-quantizing a dequantized tensor recovers the same scale bit for
/// bit.
fn weight_scale(max_abs: f64, qmax: i32) -> f64 {
    if max_abs == 0.0 {
        return 1.0;
    }
    let q = f64::from(qmax);
    let mut s = max_abs / q;
    for _ in 0..16 {
        let next = (s * q) / q;
        if next == s {
            break;
        }
        s = next;
    }
    s
}

/// Signed symmetric `bits`-bit quantization of `w`.
pub fn quantize_weights(w: &Tensor, bits: u8) -> Result<QuantizedTensor> {
    if bits < 2 {
        return Err(Error::arg(format!(
            "signed weights need at least 2 bits, got {bits}"
        )));
    }
    let spec = QuantSpec::signed(bits)?;
    let qmax = spec.max_code();
    let max_abs = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = weight_scale(max_abs, qmax);
    let codes = w
        .data()
        .iter()
        .map(|&v| ((v / scale).round_ties_even() as i32).clamp(-qmax, qmax))
        .collect();
    QuantizedTensor::new(codes, w.shape().to_vec(), scale, spec)
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let data = q.codes.iter().map(|&c| f64::from(c) * q.scale).collect();
    Tensor::new(q.shape.clone(), data).expect("valid quantized tensor dequantizes to a valid tensor")
}

/// Thresholds and output levels of a quantized HardTanh.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSet {
    bits: u8,
    thresholds: Vec<f64>,
    levels: Vec<f64>,
}

impl ThresholdSet {
    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// `2^k - 1`, also the number of thresholds.
    pub fn steps(&self) -> i32 {
        (1 << self.bits) - 1
    }

    /// Number of thresholds strictly below `x`.
    pub fn level_index(&self, x: f64) -> usize {
        self.thresholds.partition_point(|&t| t < x)
    }

    /// Integer code of level `index` on the odd grid `2i - (2^k - 1)`.
    ///
    /// The level value is `code / (2^k - 1)`, so hidden activations feed the
    /// next layer as integers with scale [`ThresholdSet::code_scale`].
    pub fn level_code(&self, index: usize) -> i32 {
        2 * index as i32 - self.steps()
    }

    pub fn code_scale(&self) -> f64 {
        1.0 / f64::from(self.steps())
    }
}

/// Uniform `2^k`-level HardTanh quantizer with midpoint thresholds.
pub fn hardtanh_thresholds(bits: u8) -> Result<ThresholdSet> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(Error::arg(format!(
            "activation bit-width must be within 1..={MAX_BITS}, got {bits}"
        )));
    }
    let n = (1i32 << bits) - 1;
    let nf = f64::from(n);
    let levels = (0..=n).map(|i| f64::from(2 * i - n) / nf).collect();
    let thresholds = (0..n).map(|i| f64::from(2 * i + 1 - n) / nf).collect();
    Ok(ThresholdSet {
        bits,
        thresholds,
        levels,
    })
}

/// Level value and level index selected by `x`.
pub fn apply_thresholds(x: f64, ts: &ThresholdSet) -> (f64, usize) {
    let idx = ts.level_index(x);
    (ts.levels[idx], idx)
}

/// Clipped straight-through gradient of the quantized HardTanh.
pub fn ste_backward(x: f64, upstream_grad: f64) -> f64 {
    if x.abs() <= 1.0 {
        upstream_grad
    } else {
        0.0
    }
}

/// Unsigned 8-bit input code for a pixel intensity in `[0, 1]`.
pub fn quantize_input(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}
