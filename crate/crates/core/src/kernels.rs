//! MatMul-free compute kernels.
//!
//! Ternary accumulation touches weights only through add/negate/skip; the
//! single multiply per output channel applies the matrix scale `c`. RMSNorm
//! runs on 24-bit intermediates with 12 fractional bits.

use thiserror::Error;

use crate::fxp::{self, FxError, FxFormat, InvSqrtLut, Overflow};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("format mismatch: {0} vs {1}")]
    Format(FxFormat, FxFormat),
    #[error("invalid trit code 0b11 at row {row}, col {col}")]
    InvalidTrit { row: usize, col: usize },
    #[error("ternary scale must be positive, got {0}")]
    NonPositiveScale(i32),
    #[error("rmsnorm epsilon must be positive, got {0}")]
    NonPositiveEps(i32),
    #[error("gate value {0} outside [0, 1]")]
    GateRange(i32),
    #[error("double RMSNorm fusion needs a scalar first gain; fall back to two rmsnorm passes")]
    UnsupportedFusion,
    #[error("value {value} out of range for {fmt}")]
    Range { value: i64, fmt: FxFormat },
    #[error(transparent)]
    Fx(#[from] FxError),
}

pub type Result<T> = std::result::Result<T, KernelError>;

/// Integer tensor with one format for every element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FxTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
    fmt: FxFormat,
}

impl FxTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i32>, fmt: FxFormat) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(KernelError::Dimension { expected: n, got: data.len() });
        }
        if let Some(&v) = data.iter().find(|&&v| !fmt.contains(v as i64)) {
            return Err(KernelError::Range { value: v as i64, fmt });
        }
        Ok(FxTensor { shape, data, fmt })
    }

    pub fn vector(data: Vec<i32>, fmt: FxFormat) -> Result<Self> {
        Self::new(vec![data.len()], data, fmt)
    }

    pub fn zeros(len: usize, fmt: FxFormat) -> Self {
        FxTensor { shape: vec![len], data: vec![0; len], fmt }
    }

    // Callers guarantee range; kernels saturate every element they emit.
    pub(crate) fn from_raw(data: Vec<i32>, fmt: FxFormat) -> Self {
        FxTensor { shape: vec![data.len()], data, fmt }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [i32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<i32> {
        self.data
    }

    pub fn fmt(&self) -> FxFormat {
        self.fmt
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| self.fmt.to_f64(v)).collect()
    }
}

/// Instrumentation for one or more kernel calls.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpCounters {
    /// Nonzero-weight add or negate events.
    pub accumulates: u64,
    /// Zero-weight skips.
    pub skips: u64,
    pub saturations: Overflow,
}

impl OpCounters {
    pub fn merge(&mut self, other: &OpCounters) {
        self.accumulates += other.accumulates;
        self.skips += other.skips;
        self.saturations.merge(other.saturations);
    }
}

const CODE_ZERO: u8 = 0b00;
const CODE_POS: u8 = 0b01;
const CODE_NEG: u8 = 0b10;

/// Ternary matrix `W` in `{-c, 0, +c}^(rows x cols)`, packed four trits per
/// byte (LSB first), each row padded to a byte boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TernaryMatrix {
    rows: usize,
    cols: usize,
    packed: Vec<u8>,
    scale: i32,
    scale_fmt: FxFormat,
    nnz: usize,
}

pub fn packed_row_bytes(cols: usize) -> usize {
    cols.div_ceil(4)
}

impl TernaryMatrix {
    pub fn from_trits(rows: usize, cols: usize, trits: &[i8], scale: i32, scale_fmt: FxFormat) -> Result<Self> {
        if trits.len() != rows * cols {
            return Err(KernelError::Dimension { expected: rows * cols, got: trits.len() });
        }
        let row_bytes = packed_row_bytes(cols);
        let mut packed = vec![0u8; rows * row_bytes];
        for r in 0..rows {
            for c in 0..cols {
                let code = match trits[r * cols + c] {
                    0 => CODE_ZERO,
                    1 => CODE_POS,
                    -1 => CODE_NEG,
                    _ => return Err(KernelError::InvalidTrit { row: r, col: c }),
                };
                packed[r * row_bytes + c / 4] |= code << (2 * (c % 4));
            }
        }
        Self::from_packed(rows, cols, packed, scale, scale_fmt)
    }

    /// Validate packed codes; rejects code `0b11` and nonzero padding.
    pub fn from_packed(rows: usize, cols: usize, packed: Vec<u8>, scale: i32, scale_fmt: FxFormat) -> Result<Self> {
        let row_bytes = packed_row_bytes(cols);
        if packed.len() != rows * row_bytes {
            return Err(KernelError::Dimension { expected: rows * row_bytes, got: packed.len() });
        }
        if scale <= 0 {
            return Err(KernelError::NonPositiveScale(scale));
        }
        if !scale_fmt.contains(scale as i64) {
            return Err(KernelError::Range { value: scale as i64, fmt: scale_fmt });
        }
        let mut nnz = 0;
        for r in 0..rows {
            for b in 0..row_bytes {
                let byte = packed[r * row_bytes + b];
                for k in 0..4 {
                    let c = b * 4 + k;
                    let code = (byte >> (2 * k)) & 0b11;
                    if code == 0b11 || (c >= cols && code != CODE_ZERO) {
                        return Err(KernelError::InvalidTrit { row: r, col: c });
                    }
                    if code != CODE_ZERO {
                        nnz += 1;
                    }
                }
            }
        }
        Ok(TernaryMatrix { rows, cols, packed, scale, scale_fmt, nnz })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn scale(&self) -> i32 {
        self.scale
    }

    pub fn scale_fmt(&self) -> FxFormat {
        self.scale_fmt
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    pub fn zero_fraction(&self) -> f64 {
        let n = self.rows * self.cols;
        if n == 0 {
            return 0.0;
        }
        1.0 - self.nnz as f64 / n as f64
    }

    pub fn trit(&self, row: usize, col: usize) -> i8 {
        let byte = self.packed[row * packed_row_bytes(self.cols) + col / 4];
        match (byte >> (2 * (col % 4))) & 0b11 {
            CODE_POS => 1,
            CODE_NEG => -1,
            _ => 0,
        }
    }
}

/// `y = (x' W) * c`, where `x'` is `x` pre-shifted right by `preshift` bits.
///
/// The sum over rows uses only additions and negations in a 32-bit
/// accumulator; `c` is applied once per output channel.
pub fn ternary_accumulate(
    x: &FxTensor,
    w: &TernaryMatrix,
    preshift: u32,
    out: FxFormat,
    counters: &mut OpCounters,
) -> Result<FxTensor> {
    if x.len() != w.rows {
        return Err(KernelError::Dimension { expected: w.rows, got: x.len() });
    }
    let row_bytes = packed_row_bytes(w.cols);
    let mut acc = vec![0i32; w.cols];
    for (r, &xv) in x.data.iter().enumerate() {
        let xi = fxp::shift_round(xv as i64, preshift as i32) as i32;
        let row = &w.packed[r * row_bytes..(r + 1) * row_bytes];
        for (b, &byte) in row.iter().enumerate() {
            if byte == 0 {
                continue;
            }
            let base = b * 4;
            for k in 0..4 {
                match (byte >> (2 * k)) & 0b11 {
                    CODE_POS => acc[base + k] += xi,
                    CODE_NEG => acc[base + k] -= xi,
                    _ => {}
                }
            }
        }
    }
    let total = (w.rows * w.cols) as u64;
    counters.accumulates += w.nnz as u64;
    counters.skips += total - w.nnz as u64;

    let acc_frac = x.fmt.frac() as i32 - preshift as i32 + w.scale_fmt.frac() as i32;
    let data = acc
        .into_iter()
        .map(|a| fxp::requantize(a as i64 * w.scale as i64, acc_frac, out, &mut counters.saturations))
        .collect();
    Ok(FxTensor::from_raw(data, out))
}

/// RMSNorm gain vector and epsilon, both at 12 fractional bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RmsNormParams {
    gain: Vec<i32>,
    eps: i32,
}

impl RmsNormParams {
    pub fn new(gain: Vec<i32>, eps: i32) -> Result<Self> {
        if eps <= 0 {
            return Err(KernelError::NonPositiveEps(eps));
        }
        if let Some(&g) = gain.iter().find(|&&g| !FxFormat::GAIN.contains(g as i64)) {
            return Err(KernelError::Range { value: g as i64, fmt: FxFormat::GAIN });
        }
        Ok(RmsNormParams { gain, eps })
    }

    pub fn unit(d: usize, eps: i32) -> Result<Self> {
        Self::new(vec![FxFormat::GAIN.one(); d], eps)
    }

    pub fn gain(&self) -> &[i32] {
        &self.gain
    }

    pub fn eps(&self) -> i32 {
        self.eps
    }

    pub fn d(&self) -> usize {
        self.gain.len()
    }
}

/// Shared normalization path; `eps` may be zero here (fused norms).
fn normalize(x: &FxTensor, gain: &[i32], eps: i32, out: FxFormat, ov: &mut Overflow) -> Result<FxTensor> {
    let d = gain.len();
    if x.len() != d {
        return Err(KernelError::Dimension { expected: d, got: x.len() });
    }
    let inner = FxFormat::A24;
    let xs: Vec<i32> = x.data.iter().map(|&v| fxp::rescale(v, x.fmt, inner, ov)).collect();
    let sum_sq: i64 = xs.iter().map(|&v| v as i64 * v as i64).sum();
    // mean of squares: frac 24 -> frac 12, divided by d
    let mean = if d.is_power_of_two() {
        fxp::shift_round(sum_sq, inner.frac() as i32 + d.trailing_zeros() as i32)
    } else {
        fxp::div_round(sum_sq, (d as i64) << inner.frac())
    };
    let mean = inner.saturate(mean, ov);
    let radicand = fxp::sat_add(mean, eps, inner, ov);
    if radicand == 0 {
        // only reachable with eps == 0 and x == 0
        return Ok(FxTensor::zeros(d, out));
    }
    let r = fxp::inv_sqrt_fx(radicand, inner.frac(), FxFormat::INV_RMS, &InvSqrtLut::default(), ov)?;
    let r_frac = FxFormat::INV_RMS.frac() as i32;
    let data = xs
        .iter()
        .zip(gain)
        .map(|(&v, &g)| {
            let n = fxp::requantize(v as i64 * r as i64, inner.frac() as i32 + r_frac, inner, ov);
            fxp::requantize(n as i64 * g as i64, (inner.frac() + FxFormat::GAIN.frac()) as i32, out, ov)
        })
        .collect();
    Ok(FxTensor::from_raw(data, out))
}

/// `x / sqrt(mean(x^2) + eps) * g`, emitted in `out`.
pub fn rmsnorm(x: &FxTensor, p: &RmsNormParams, out: FxFormat, counters: &mut OpCounters) -> Result<FxTensor> {
    normalize(x, &p.gain, p.eps, out, &mut counters.saturations)
}

fn shift_round_wide(v: i128, shift: u32) -> i64 {
    debug_assert!(v >= 0 && shift > 0);
    let mut q = v >> shift;
    let rem = v & ((1i128 << shift) - 1);
    let half = 1i128 << (shift - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q += 1;
    }
    i64::try_from(q).unwrap_or(i64::MAX)
}

/// First-stage gain of a double RMSNorm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FirstGain {
    Scalar(i32),
    PerChannel(Vec<i32>),
}

/// Two back-to-back RMSNorms folded into one pass:
/// `g = g1*g2 / sqrt(g1^2 + eps)`, `eps' = eps^2 / (g1^2 + eps)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusedRmsNorm {
    gain: Vec<i32>,
    eps: i32,
}

impl FusedRmsNorm {
    pub fn new(g1: &FirstGain, g2: &[i32], eps: i32) -> Result<Self> {
        let g1 = match g1 {
            FirstGain::Scalar(g) => *g as i64,
            FirstGain::PerChannel(_) => return Err(KernelError::UnsupportedFusion),
        };
        if eps <= 0 {
            return Err(KernelError::NonPositiveEps(eps));
        }
        let mut ov = Overflow::default();
        let q = FxFormat::GAIN.frac() as i32;
        let g1_sq = fxp::requantize(g1 * g1, 2 * q, FxFormat::A24, &mut ov);
        let denom = fxp::sat_add(g1_sq, eps, FxFormat::A24, &mut ov);
        let inv = fxp::inv_sqrt_fx(denom, q as u32, FxFormat::INV_RMS, &InvSqrtLut::default(), &mut ov)? as i64;
        let inv_frac = FxFormat::INV_RMS.frac() as i32;
        let gain = g2
            .iter()
            .map(|&g| fxp::requantize(g1 * g as i64 * inv, 2 * q + inv_frac, FxFormat::GAIN, &mut ov))
            .collect();
        // eps^2 / (g1^2 + eps) = eps^2 * inv^2; needs 128-bit headroom.
        let eps_sq = eps as i128 * eps as i128 * inv as i128 * inv as i128;
        let eps_c = shift_round_wide(eps_sq, (q + 2 * inv_frac) as u32);
        let eps = FxFormat::A24.saturate(eps_c, &mut ov);
        Ok(FusedRmsNorm { gain, eps })
    }

    pub fn gain(&self) -> &[i32] {
        &self.gain
    }

    pub fn eps(&self) -> i32 {
        self.eps
    }

    pub fn apply(&self, x: &FxTensor, out: FxFormat, counters: &mut OpCounters) -> Result<FxTensor> {
        normalize(x, &self.gain, self.eps, out, &mut counters.saturations)
    }
}

/// `rmsnorm(rmsnorm(x; g1); g2)` computed as one normalization pass.
/// Per-channel `g1` is rejected with [`KernelError::UnsupportedFusion`].
pub fn double_rmsnorm(
    x: &FxTensor,
    g1: &FirstGain,
    g2: &[i32],
    eps: i32,
    out: FxFormat,
    counters: &mut OpCounters,
) -> Result<FxTensor> {
    FusedRmsNorm::new(g1, g2, eps)?.apply(x, out, counters)
}

/// `h = f*h_prev + (1 - f)*c` elementwise, `f` at 12 fractional bits.
pub fn gate_mix(f: &FxTensor, h_prev: &FxTensor, c: &FxTensor, counters: &mut OpCounters) -> Result<FxTensor> {
    if f.len() != h_prev.len() || c.len() != h_prev.len() {
        return Err(KernelError::Dimension { expected: h_prev.len(), got: f.len().min(c.len()) });
    }
    if h_prev.fmt != c.fmt {
        return Err(KernelError::Format(h_prev.fmt, c.fmt));
    }
    if f.fmt != FxFormat::GAIN {
        return Err(KernelError::Format(f.fmt, FxFormat::GAIN));
    }
    let one = FxFormat::GAIN.one() as i64;
    let q = FxFormat::GAIN.frac() as i32;
    let out = h_prev.fmt;
    let mut data = Vec::with_capacity(f.len());
    for ((&fv, &h), &cv) in f.data.iter().zip(&h_prev.data).zip(&c.data) {
        if fv < 0 || fv as i64 > one {
            return Err(KernelError::GateRange(fv));
        }
        let fv = fv as i64;
        let mix = fv * h as i64 + (one - fv) * cv as i64;
        data.push(fxp::requantize(mix, q + out.frac() as i32, out, &mut counters.saturations));
    }
    Ok(FxTensor::from_raw(data, out))
}

/// Elementwise product, emitted in `out`.
pub fn hadamard(a: &FxTensor, b: &FxTensor, out: FxFormat, counters: &mut OpCounters) -> Result<FxTensor> {
    if a.len() != b.len() {
        return Err(KernelError::Dimension { expected: a.len(), got: b.len() });
    }
    let frac = (a.fmt.frac() + b.fmt.frac()) as i32;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| fxp::requantize(x as i64 * y as i64, frac, out, &mut counters.saturations))
        .collect();
    Ok(FxTensor::from_raw(data, out))
}

/// Saturating residual addition; both operands share one format.
pub fn residual_add(x: &FxTensor, y: &FxTensor, counters: &mut OpCounters) -> Result<FxTensor> {
    if x.len() != y.len() {
        return Err(KernelError::Dimension { expected: x.len(), got: y.len() });
    }
    if x.fmt != y.fmt {
        return Err(KernelError::Format(x.fmt, y.fmt));
    }
    let data = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(&a, &b)| fxp::sat_add(a, b, x.fmt, &mut counters.saturations))
        .collect();
    Ok(FxTensor::from_raw(data, x.fmt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(frac: u32) -> FxFormat {
        FxFormat::new(16, frac).unwrap()
    }

    fn unit_scale() -> (i32, FxFormat) {
        (1, FxFormat::W8)
    }

    #[test]
    fn identity_accumulate() {
        let (c, cf) = unit_scale();
        let w = TernaryMatrix::from_trits(2, 2, &[1, 0, 0, 1], c, cf).unwrap();
        let x = FxTensor::vector(vec![3, 5], q(0)).unwrap();
        let mut k = OpCounters::default();
        let y = ternary_accumulate(&x, &w, 0, q(0), &mut k).unwrap();
        assert_eq!(y.data(), &[3, 5]);
        assert_eq!((k.accumulates, k.skips), (2, 2));
    }

    #[test]
    fn zero_matrix_skips_everything() {
        let (c, cf) = unit_scale();
        let w = TernaryMatrix::from_trits(3, 5, &[0; 15], c, cf).unwrap();
        let x = FxTensor::vector(vec![7, -9, 100], q(0)).unwrap();
        let mut k = OpCounters::default();
        let y = ternary_accumulate(&x, &w, 0, q(0), &mut k).unwrap();
        assert_eq!(y.data(), &[0; 5]);
        assert_eq!(k.skips, 15);
        assert_eq!(k.accumulates, 0);
    }

    #[test]
    fn mixed_columns_match_dense_product() {
        // columns (+1, -1) and (0, +1); rows are the input index
        let w = TernaryMatrix::from_trits(2, 2, &[1, 0, -1, 1], 1, FxFormat::W8).unwrap();
        let x = FxTensor::vector(vec![3, 5], q(0)).unwrap();
        let y = ternary_accumulate(&x, &w, 0, q(0), &mut OpCounters::default()).unwrap();
        assert_eq!(y.data(), &[-2, 5]);
    }

    #[test]
    fn accumulate_dimension_error() {
        let w = TernaryMatrix::from_trits(2, 2, &[1, 0, -1, 1], 1, FxFormat::W8).unwrap();
        let x = FxTensor::vector(vec![3, 5, 1], q(0)).unwrap();
        assert!(matches!(
            ternary_accumulate(&x, &w, 0, q(0), &mut OpCounters::default()),
            Err(KernelError::Dimension { .. })
        ));
    }

    #[test]
    fn scale_and_preshift() {
        // c = 0.5 at frac 1, x = (16, 8) at frac 4, preshift 2 -> (4, 2) at frac 2
        let w = TernaryMatrix::from_trits(2, 1, &[1, 1], 1, FxFormat::new(8, 1).unwrap()).unwrap();
        let x = FxTensor::vector(vec![16, 8], q(4)).unwrap();
        let y = ternary_accumulate(&x, &w, 2, q(4), &mut OpCounters::default()).unwrap();
        // (1.0 + 0.5) * 0.5 = 0.75 -> 12 at frac 4
        assert_eq!(y.data(), &[12]);
    }

    #[test]
    fn packed_code_validation() {
        assert!(matches!(
            TernaryMatrix::from_packed(1, 4, vec![0b1100_0000], 1, FxFormat::W8),
            Err(KernelError::InvalidTrit { row: 0, col: 3 })
        ));
        // padding trits must be zero
        assert!(TernaryMatrix::from_packed(1, 3, vec![0b0100_0000], 1, FxFormat::W8).is_err());
        assert!(TernaryMatrix::from_packed(1, 3, vec![0b0001_1001], 1, FxFormat::W8).is_ok());
        assert!(matches!(
            TernaryMatrix::from_packed(1, 3, vec![0], 0, FxFormat::W8),
            Err(KernelError::NonPositiveScale(0))
        ));
        assert!(TernaryMatrix::from_trits(1, 1, &[2], 1, FxFormat::W8).is_err());
    }

    #[test]
    fn trit_accessor_roundtrip() {
        let trits: Vec<i8> = vec![1, -1, 0, 0, 1, 1, -1, 0, -1];
        let w = TernaryMatrix::from_trits(3, 3, &trits, 3, FxFormat::W8).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(w.trit(r, c), trits[r * 3 + c]);
            }
        }
        assert_eq!(w.nnz(), 6);
    }

    #[test]
    fn rmsnorm_zero_input() {
        let p = RmsNormParams::unit(8, 4).unwrap();
        let x = FxTensor::zeros(8, q(8));
        let y = rmsnorm(&x, &p, q(12), &mut OpCounters::default()).unwrap();
        assert_eq!(y.data(), &[0; 8]);
    }

    #[test]
    fn rmsnorm_constant_input_is_unit() {
        let p = RmsNormParams::unit(16, 4).unwrap();
        for v in [256, -512, 1000, 3 * 256] {
            let x = FxTensor::vector(vec![v; 16], q(8)).unwrap();
            let y = rmsnorm(&x, &p, q(12), &mut OpCounters::default()).unwrap();
            for &o in y.data() {
                assert!((o.abs() - 4096).abs() <= 2, "v={v} out={o}");
                assert_eq!(o.signum(), v.signum());
            }
        }
    }

    #[test]
    fn rmsnorm_rejects_bad_params() {
        assert!(matches!(RmsNormParams::unit(4, 0), Err(KernelError::NonPositiveEps(0))));
        assert!(RmsNormParams::new(vec![40_000], 4).is_err());
        let p = RmsNormParams::unit(4, 4).unwrap();
        let x = FxTensor::zeros(5, q(8));
        assert!(rmsnorm(&x, &p, q(12), &mut OpCounters::default()).is_err());
    }

    #[test]
    fn rmsnorm_non_power_of_two_width() {
        let p = RmsNormParams::unit(3, 4).unwrap();
        let x = FxTensor::vector(vec![256, 256, 256], q(8)).unwrap();
        let y = rmsnorm(&x, &p, q(12), &mut OpCounters::default()).unwrap();
        assert!(y.data().iter().all(|&v| (v - 4096).abs() <= 2));
    }

    #[test]
    fn fusion_limit_case() {
        // g1 = 1 with the smallest epsilon: fused gain ~ g2, fused eps -> 0
        let g2: Vec<i32> = vec![4096, 2048, 6000, 5000];
        let f = FusedRmsNorm::new(&FirstGain::Scalar(4096), &g2, 1).unwrap();
        assert_eq!(f.eps(), 0);
        for (a, b) in f.gain().iter().zip(&g2) {
            assert!((a - b).abs() <= 1, "{a} vs {b}");
        }
        let x = FxTensor::vector(vec![100, -300, 50, 7], q(8)).unwrap();
        let fused = f.apply(&x, q(12), &mut OpCounters::default()).unwrap();
        // plain path keeps eps = 1 raw, about 3e-4 relative at this input scale
        let plain = rmsnorm(&x, &RmsNormParams::new(g2, 1).unwrap(), q(12), &mut OpCounters::default()).unwrap();
        for (a, b) in fused.data().iter().zip(plain.data()) {
            assert!((a - b).abs() <= 2, "{a} vs {b}");
        }
    }

    #[test]
    fn fusion_zero_input() {
        let x = FxTensor::zeros(4, q(8));
        let y = double_rmsnorm(&x, &FirstGain::Scalar(2048), &[4096; 4], 4, q(12), &mut OpCounters::default()).unwrap();
        assert_eq!(y.data(), &[0; 4]);
    }

    #[test]
    fn fusion_rejects_per_channel_gain() {
        let x = FxTensor::zeros(2, q(8));
        let err = double_rmsnorm(
            &x,
            &FirstGain::PerChannel(vec![4096, 2048]),
            &[4096; 2],
            4,
            q(12),
            &mut OpCounters::default(),
        );
        assert_eq!(err, Err(KernelError::UnsupportedFusion));
    }

    #[test]
    fn gate_mix_examples() {
        let fmt = q(0);
        let h = FxTensor::vector(vec![4, -4], fmt).unwrap();
        let c = FxTensor::vector(vec![0, 8], fmt).unwrap();
        let mut k = OpCounters::default();
        let ones = FxTensor::vector(vec![4096; 2], FxFormat::GAIN).unwrap();
        assert_eq!(gate_mix(&ones, &h, &c, &mut k).unwrap().data(), h.data());
        let zeros = FxTensor::vector(vec![0; 2], FxFormat::GAIN).unwrap();
        assert_eq!(gate_mix(&zeros, &h, &c, &mut k).unwrap().data(), c.data());
        let half = FxTensor::vector(vec![2048; 2], FxFormat::GAIN).unwrap();
        assert_eq!(gate_mix(&half, &h, &c, &mut k).unwrap().data(), &[2, 2]);
    }

    #[test]
    fn gate_mix_errors() {
        let fmt = q(0);
        let h = FxTensor::vector(vec![4, -4], fmt).unwrap();
        let c = FxTensor::vector(vec![0], fmt).unwrap();
        let f = FxTensor::vector(vec![0, 0], FxFormat::GAIN).unwrap();
        assert!(matches!(gate_mix(&f, &h, &c, &mut OpCounters::default()), Err(KernelError::Dimension { .. })));
        let c = FxTensor::vector(vec![0, 0], q(3)).unwrap();
        assert!(matches!(gate_mix(&f, &h, &c, &mut OpCounters::default()), Err(KernelError::Format(..))));
        let c = FxTensor::vector(vec![0, 0], fmt).unwrap();
        let f = FxTensor::vector(vec![5000, 0], FxFormat::GAIN).unwrap();
        assert_eq!(gate_mix(&f, &h, &c, &mut OpCounters::default()), Err(KernelError::GateRange(5000)));
    }

    #[test]
    fn residual_add_saturates() {
        let fmt = q(8);
        let x = FxTensor::vector(vec![32_000, -5], fmt).unwrap();
        let y = FxTensor::vector(vec![1_000, 5], fmt).unwrap();
        let mut k = OpCounters::default();
        let z = residual_add(&x, &y, &mut k).unwrap();
        assert_eq!(z.data(), &[32_767, 0]);
        assert_eq!(k.saturations.events(), 1);
    }

    #[test]
    fn tensor_validation() {
        assert!(FxTensor::new(vec![2, 2], vec![0; 3], q(0)).is_err());
        assert!(FxTensor::vector(vec![40_000], q(0)).is_err());
    }
}
