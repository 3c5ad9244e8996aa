//! W8A16 quantization: symmetric per-tensor scales restricted to powers of
//! two, plus the fake-quantization transform used by the reference path.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::fxp::{FxFormat, Overflow};
use crate::kernels::FxTensor;

pub const WEIGHT_BITS: u32 = 8;
pub const ACT_BITS: u32 = 16;
pub const RMS_INTERNAL_BITS: u32 = 24;
pub const RMS_FRAC_BITS: u32 = 12;
pub const EPS_VALUE: f64 = 1e-3;

/// Quantization settings carried in the container header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantScheme {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub rms_internal_bits: u32,
    pub rms_frac_bits: u32,
    /// RMSNorm epsilon, raw at `rms_frac_bits`.
    pub eps_fx: i32,
    /// Activation site name -> scale exponent `s` (scale is `2^s`).
    pub act_scales: BTreeMap<String, i32>,
}

impl Default for QuantScheme {
    fn default() -> Self {
        QuantScheme {
            weight_bits: WEIGHT_BITS,
            act_bits: ACT_BITS,
            rms_internal_bits: RMS_INTERNAL_BITS,
            rms_frac_bits: RMS_FRAC_BITS,
            eps_fx: eps_to_fx(EPS_VALUE),
            act_scales: BTreeMap::new(),
        }
    }
}

impl QuantScheme {
    /// Activation format for a named site.
    pub fn act_format(&self, site: &str) -> Option<FxFormat> {
        let s = *self.act_scales.get(site)?;
        if s > 0 {
            return None;
        }
        FxFormat::new(self.act_bits, (-s) as u32).ok()
    }

    /// Names in `required` that have no usable scale.
    pub fn missing_sites<'a>(&self, required: &'a [String]) -> Vec<&'a str> {
        required
            .iter()
            .filter(|n| self.act_format(n).is_none())
            .map(String::as_str)
            .collect()
    }
}

/// Raw epsilon at 12 fractional bits; `1e-6` underflows to zero.
pub fn eps_to_fx(eps: f64) -> i32 {
    (eps * (1u64 << RMS_FRAC_BITS) as f64).round_ties_even() as i32
}

/// Activation sites inside one block, in dataflow order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockSite {
    /// Normalized input of the forget-gate projection.
    ForgetNorm,
    /// Normalized input of the candidate projection.
    CandNorm,
    /// Normalized input of the output-gate projection.
    GateNorm,
    /// Normalized input of the output projection.
    OutputNorm,
    /// Candidate `c_t` and hidden state `h_t` (shared format).
    Hidden,
    /// Output-gate projection before its RMSNorm.
    GatePre,
    /// Output gate `g_t` after its RMSNorm.
    Gate,
    /// `g_t * tau(h_t)`.
    Mix,
    GluNorm,
    GluGate,
    GluUp,
    GluProd,
    GluDownNorm,
}

impl BlockSite {
    pub const ALL: [BlockSite; 13] = [
        BlockSite::ForgetNorm,
        BlockSite::CandNorm,
        BlockSite::GateNorm,
        BlockSite::OutputNorm,
        BlockSite::Hidden,
        BlockSite::GatePre,
        BlockSite::Gate,
        BlockSite::Mix,
        BlockSite::GluNorm,
        BlockSite::GluGate,
        BlockSite::GluUp,
        BlockSite::GluProd,
        BlockSite::GluDownNorm,
    ];

    fn suffix(self) -> &'static str {
        match self {
            BlockSite::ForgetNorm => "mlgru.forget.norm",
            BlockSite::CandNorm => "mlgru.cand.norm",
            BlockSite::GateNorm => "mlgru.gate.norm",
            BlockSite::OutputNorm => "mlgru.output.norm",
            BlockSite::Hidden => "mlgru.hidden",
            BlockSite::GatePre => "mlgru.gate.pre",
            BlockSite::Gate => "mlgru.gate.out",
            BlockSite::Mix => "mlgru.mix",
            BlockSite::GluNorm => "glu.norm",
            BlockSite::GluGate => "glu.gate",
            BlockSite::GluUp => "glu.up",
            BlockSite::GluProd => "glu.prod",
            BlockSite::GluDownNorm => "glu.down.norm",
        }
    }

    pub fn name(self, block: usize) -> String {
        format!("blocks.{block}.{}", self.suffix())
    }
}

/// Residual stream (embeddings and every block output).
pub const SITE_RESID: &str = "resid";
/// Output of the final RMSNorm.
pub const SITE_FINAL_NORM: &str = "final_norm";

/// Every activation site a model with `n_blocks` blocks needs a scale for.
pub fn required_sites(n_blocks: usize) -> Vec<String> {
    let mut v = vec![SITE_RESID.to_string(), SITE_FINAL_NORM.to_string()];
    for b in 0..n_blocks {
        v.extend(BlockSite::ALL.iter().map(|s| s.name(b)));
    }
    v
}

/// Smallest `s` with `max_abs / 2^s <= 2^(bits-1) - 1`; zero for an all-zero tensor.
pub fn choose_scale_exp(max_abs: f64, bits: u32) -> i32 {
    if !(max_abs > 0.0) {
        return 0;
    }
    let qmax = ((1u64 << (bits - 1)) - 1) as f64;
    let mut s = (max_abs / qmax).log2().ceil() as i32;
    // log2 can land one off near exact powers of two
    while max_abs / 2f64.powi(s) > qmax {
        s += 1;
    }
    while max_abs / 2f64.powi(s - 1) <= qmax {
        s -= 1;
    }
    s
}

/// `clamp(round_half_even(x / 2^s), -2^(bits-1), 2^(bits-1) - 1) * 2^s`.
pub fn fake_quantize_scalar(x: f64, bits: u32, s: i32) -> f64 {
    let step = 2f64.powi(s);
    let lo = -((1u64 << (bits - 1)) as f64);
    let hi = ((1u64 << (bits - 1)) - 1) as f64;
    (x / step).round_ties_even().clamp(lo, hi) * step
}

pub fn fake_quantize(x: &[f64], bits: u32, s: i32) -> Vec<f64> {
    x.iter().map(|&v| fake_quantize_scalar(v, bits, s)).collect()
}

/// Raw integers in `fmt` whose dequantized values equal
/// `fake_quantize(x, fmt.bits, -fmt.frac)`. Clamped elements are counted.
pub fn quantize_to_fx(x: &[f64], fmt: FxFormat) -> (FxTensor, Overflow) {
    let mut ov = Overflow::default();
    let scale = (1u64 << fmt.frac()) as f64;
    let data = x
        .iter()
        .map(|&v| {
            let r = (v * scale).round_ties_even();
            if r > fmt.max_raw() as f64 {
                ov.raise();
                fmt.max_raw() as i32
            } else if r < fmt.min_raw() as f64 {
                ov.raise();
                fmt.min_raw() as i32
            } else {
                r as i32
            }
        })
        .collect();
    (FxTensor::from_raw(data, fmt), ov)
}

pub fn dequantize(t: &FxTensor) -> Vec<f64> {
    t.to_f64()
}
