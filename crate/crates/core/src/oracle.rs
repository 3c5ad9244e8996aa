//! Floating-point reference model.
//!
//! Scalar f64 code written independently of the integer kernels. In
//! fake-quant mode every intermediate is passed through [`fake_quantize`]
//! with the format the engine uses at that point, so the dequantized engine
//! output and the oracle output must agree exactly. Exact mode evaluates the
//! model equations with the true sigmoid and square root and no rounding.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::fxp::FxFormat;
use crate::layers::Model;
use crate::quantizer::{self, fake_quantize_scalar, BlockSite, QuantScheme};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("fake-quant mode needs a scale for site {0}")]
    MissingScale(String),
}

/// Dense real matrix, row-major `rows x cols`, `y_j = sum_i x_i w_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleLinear {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleBitLinear {
    pub gain: Vec<f64>,
    pub w: OracleLinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleBlock {
    pub forget: OracleBitLinear,
    pub cand: OracleBitLinear,
    pub gate: OracleBitLinear,
    pub output: OracleBitLinear,
    pub out_norm: Vec<f64>,
    pub forget_floor: Option<Vec<f64>>,
    pub glu_norm: Vec<f64>,
    pub glu_gate: OracleLinear,
    pub glu_up: OracleLinear,
    pub glu_down: OracleBitLinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleModel {
    pub d: usize,
    pub vocab: usize,
    /// `vocab x d`, row-major.
    pub embed: Vec<f64>,
    pub blocks: Vec<OracleBlock>,
    pub final_norm: Vec<f64>,
    pub unembed: OracleLinear,
    pub scheme: QuantScheme,
    pub acc_preshift: u32,
}

fn raw_to_real(raw: i32, frac: u32) -> f64 {
    raw as f64 / 2f64.powi(frac as i32)
}

fn linear_from(m: &crate::kernels::TernaryMatrix) -> OracleLinear {
    let c = raw_to_real(m.scale(), m.scale_fmt().frac());
    let mut w = Vec::with_capacity(m.rows() * m.cols());
    for r in 0..m.rows() {
        for col in 0..m.cols() {
            w.push(m.trit(r, col) as f64 * c);
        }
    }
    OracleLinear { rows: m.rows(), cols: m.cols(), w }
}

fn gains(g: &[i32]) -> Vec<f64> {
    g.iter().map(|&v| raw_to_real(v, FxFormat::GAIN.frac())).collect()
}

fn bitlinear_from(l: &crate::layers::BitLinearLayer) -> OracleBitLinear {
    OracleBitLinear { gain: gains(l.norm.gain()), w: linear_from(&l.weight) }
}

impl OracleModel {
    /// Real-valued copy of an engine model: trits times `c`, gains and
    /// embeddings dequantized.
    pub fn from_model(m: &Model) -> Self {
        let emb = m.embed();
        let frac = emb.fmt().frac();
        let blocks = m
            .blocks()
            .iter()
            .map(|b| OracleBlock {
                forget: bitlinear_from(&b.mlgru.forget),
                cand: bitlinear_from(&b.mlgru.cand),
                gate: bitlinear_from(&b.mlgru.gate),
                output: bitlinear_from(&b.mlgru.output),
                out_norm: gains(b.mlgru.out_norm.gain()),
                forget_floor: b.mlgru.forget_floor.as_deref().map(gains),
                glu_norm: gains(b.glu.norm.gain()),
                glu_gate: linear_from(&b.glu.gate),
                glu_up: linear_from(&b.glu.up),
                glu_down: bitlinear_from(&b.glu.down),
            })
            .collect();
        OracleModel {
            d: m.config().d,
            vocab: m.config().vocab_size,
            embed: emb.data().iter().map(|&v| raw_to_real(v, frac)).collect(),
            blocks,
            final_norm: gains(m.final_norm().gain()),
            unembed: linear_from(m.unembed()),
            scheme: m.config().quant.clone(),
            acc_preshift: m.config().acc_preshift,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    Exact,
    FakeQuant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub mode: OracleMode,
    pub eps: f64,
    /// Record the same intermediates the engine session traces.
    pub trace: bool,
}

impl OracleConfig {
    /// Fake-quant mode with the epsilon stored in the scheme.
    pub fn fake_quant(scheme: &QuantScheme) -> Self {
        OracleConfig {
            mode: OracleMode::FakeQuant,
            eps: scheme.eps_fx as f64 / 2f64.powi(scheme.rms_frac_bits as i32),
            trace: false,
        }
    }

    pub fn exact(eps: f64) -> Self {
        OracleConfig { mode: OracleMode::Exact, eps, trace: false }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleTraceEntry {
    pub step: usize,
    pub site: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleOutput {
    /// Real logits for every position.
    pub logits: Vec<Vec<f64>>,
    pub trace: Vec<OracleTraceEntry>,
    /// Largest magnitude seen at each activation site (calibration input).
    pub max_abs: BTreeMap<String, f64>,
}

/// Sigmoid table: `floor(sigma(i) * 4096) / 4096` for `i = 0..=8`, linear
/// interpolation between integer abscissae.
struct SigmoidTable([f64; 9]);

impl SigmoidTable {
    fn new() -> Self {
        let mut t = [0.0; 9];
        for (i, e) in t.iter_mut().enumerate() {
            let s = 1.0 / (1.0 + (-(i as f64)).exp());
            *e = (s * 4096.0).floor();
        }
        SigmoidTable(t)
    }

    fn positive(&self, x: f64) -> f64 {
        if x >= 8.0 {
            return 1.0;
        }
        let i = x.floor();
        let t = x - i;
        let (lo, hi) = (self.0[i as usize], self.0[i as usize + 1]);
        (lo + (hi - lo) * t).round_ties_even() / 4096.0
    }

    /// `x` must lie on the 1/64 grid.
    fn eval(&self, x: f64) -> f64 {
        if x >= 0.0 {
            self.positive(x)
        } else {
            1.0 - self.positive(-x)
        }
    }
}

/// `round(2^24 / sqrt(r))` for a positive integer `r`, exactly rounded.
fn isqrt_q24(r: u64) -> u64 {
    let est = (16_777_216.0 / (r as f64).sqrt()).round() as u64;
    let r = r as u128;
    let target = 1u128 << 50;
    let below = |k: u64| {
        let k = k as u128;
        (2 * k).saturating_sub(1).pow(2) * r <= target
    };
    let above = |k: u64| {
        let k = k as u128;
        (2 * k + 1).pow(2) * r > target
    };
    let mut k = est.max(1);
    while !below(k) {
        k -= 1;
    }
    while !above(k) {
        k += 1;
    }
    k
}

struct Eval<'a> {
    m: &'a OracleModel,
    cfg: &'a OracleConfig,
    fmts: BTreeMap<String, FxFormat>,
    sig: SigmoidTable,
    out: OracleOutput,
    step: usize,
}

impl Eval<'_> {
    fn fake(&self) -> bool {
        self.cfg.mode == OracleMode::FakeQuant
    }

    fn fmt(&self, site: &str) -> FxFormat {
        self.fmts.get(site).copied().unwrap_or(FxFormat::A16)
    }

    fn q(&self, v: f64, fmt: FxFormat) -> f64 {
        if self.fake() {
            fake_quantize_scalar(v, fmt.bits(), -(fmt.frac() as i32))
        } else {
            v
        }
    }

    fn qv(&self, v: Vec<f64>, fmt: FxFormat) -> Vec<f64> {
        v.into_iter().map(|x| self.q(x, fmt)).collect()
    }

    fn observe(&mut self, site: &str, v: &[f64]) {
        let m = v.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        let e = self.out.max_abs.entry(site.to_string()).or_insert(0.0);
        *e = e.max(m);
    }

    fn record(&mut self, site: &str, v: &[f64]) {
        if self.cfg.trace {
            self.out.trace.push(OracleTraceEntry { step: self.step, site: site.to_string(), values: v.to_vec() });
        }
    }

    fn rmsnorm(&self, x: &[f64], g: &[f64], out: FxFormat) -> Vec<f64> {
        let d = x.len() as f64;
        if !self.fake() {
            let ms = x.iter().map(|v| v * v).sum::<f64>() / d;
            let r = 1.0 / (ms + self.cfg.eps).sqrt();
            return x.iter().zip(g).map(|(v, gi)| v * r * gi).collect();
        }
        let a24 = FxFormat::A24;
        let xs: Vec<f64> = x.iter().map(|&v| self.q(v, a24)).collect();
        let ms = self.q(xs.iter().map(|v| v * v).sum::<f64>() / d, a24);
        let rad = self.q(ms + self.cfg.eps, a24);
        if rad == 0.0 {
            return vec![0.0; x.len()];
        }
        let r = isqrt_q24((rad * 4096.0) as u64) as f64 / 262_144.0;
        let r = self.q(r, FxFormat::INV_RMS);
        xs.iter()
            .zip(g)
            .map(|(&v, &gi)| {
                let n = self.q(v * r, a24);
                self.q(n * gi, out)
            })
            .collect()
    }

    fn linear(&self, x: &[f64], in_fmt: FxFormat, w: &OracleLinear, out: FxFormat) -> Vec<f64> {
        let x: Vec<f64> = if self.fake() {
            let s = self.m.acc_preshift as i32 - in_fmt.frac() as i32;
            x.iter().map(|&v| fake_quantize_scalar(v, 32, s)).collect()
        } else {
            x.to_vec()
        };
        let mut acc = vec![0.0; w.cols];
        for (i, xi) in x.iter().enumerate() {
            for (j, a) in acc.iter_mut().enumerate() {
                *a += xi * w.w[i * w.cols + j];
            }
        }
        self.qv(acc, out)
    }

    fn sigmoid(&self, x: f64) -> f64 {
        if self.fake() {
            self.sig.eval(x)
        } else {
            1.0 / (1.0 + (-x).exp())
        }
    }

    fn silu(&self, x: &[f64], fmt: FxFormat) -> Vec<f64> {
        x.iter()
            .map(|&v| {
                if self.fake() {
                    let xs = fake_quantize_scalar(v, 16, -6);
                    self.q(v * self.sig.eval(xs), fmt)
                } else {
                    v / (1.0 + (-v).exp())
                }
            })
            .collect()
    }

    fn block(&mut self, b: usize, x: Vec<f64>, h: &mut Vec<f64>) -> Vec<f64> {
        let blk = &self.m.blocks[b];
        let site = |s: BlockSite| s.name(b);
        let resid = self.fmt(quantizer::SITE_RESID);
        let f_norm = self.fmt(&site(BlockSite::ForgetNorm));
        let c_norm = self.fmt(&site(BlockSite::CandNorm));
        let g_norm = self.fmt(&site(BlockSite::GateNorm));
        let o_norm = self.fmt(&site(BlockSite::OutputNorm));
        let hid = self.fmt(&site(BlockSite::Hidden));
        let g_pre_fmt = self.fmt(&site(BlockSite::GatePre));
        let g_fmt = self.fmt(&site(BlockSite::Gate));
        let mix_fmt = self.fmt(&site(BlockSite::Mix));

        // forget gate
        let fx = self.rmsnorm(&x, &blk.forget.gain, f_norm);
        self.observe(&site(BlockSite::ForgetNorm), &fx);
        let f_pre = self.linear(&fx, f_norm, &blk.forget.w, FxFormat::SIGMOID_IN);
        let mut f: Vec<f64> = f_pre.iter().map(|&v| self.sigmoid(v)).collect();
        if let Some(beta) = &blk.forget_floor {
            for (fv, &bv) in f.iter_mut().zip(beta) {
                let lift = if self.fake() { fake_quantize_scalar((1.0 - bv) * *fv, 32, -12) } else { (1.0 - bv) * *fv };
                *fv = bv + lift;
            }
        }
        self.record(&format!("blocks.{b}.mlgru.forget"), &f);

        // candidate and recurrence
        let cx = self.rmsnorm(&x, &blk.cand.gain, c_norm);
        self.observe(&site(BlockSite::CandNorm), &cx);
        let c_pre = self.linear(&cx, c_norm, &blk.cand.w, hid);
        self.observe(&site(BlockSite::Hidden), &c_pre);
        let c = self.silu(&c_pre, hid);
        let h_new: Vec<f64> = f
            .iter()
            .zip(h.iter())
            .zip(&c)
            .map(|((&fv, &hv), &cv)| self.q(fv * hv + (1.0 - fv) * cv, hid))
            .collect();
        self.observe(&site(BlockSite::Hidden), &h_new);
        self.record(&site(BlockSite::Hidden), &h_new);

        // output gate
        let gx = self.rmsnorm(&x, &blk.gate.gain, g_norm);
        self.observe(&site(BlockSite::GateNorm), &gx);
        let g_pre = self.linear(&gx, g_norm, &blk.gate.w, g_pre_fmt);
        self.observe(&site(BlockSite::GatePre), &g_pre);
        let g = self.rmsnorm(&g_pre, &blk.out_norm, g_fmt);
        self.observe(&site(BlockSite::Gate), &g);
        self.record(&site(BlockSite::Gate), &g);
        let th = self.silu(&h_new, hid);
        let mix: Vec<f64> = g.iter().zip(&th).map(|(&a, &t)| self.q(a * t, mix_fmt)).collect();
        self.observe(&site(BlockSite::Mix), &mix);
        self.record(&site(BlockSite::Mix), &mix);
        let ox = self.rmsnorm(&mix, &blk.output.gain, o_norm);
        self.observe(&site(BlockSite::OutputNorm), &ox);
        let o = self.linear(&ox, o_norm, &blk.output.w, resid);
        self.observe(quantizer::SITE_RESID, &o);
        *h = h_new;

        let y: Vec<f64> = x.iter().zip(&o).map(|(&a, &b)| self.q(a + b, resid)).collect();
        self.observe(quantizer::SITE_RESID, &y);
        self.record(&format!("blocks.{b}.mid"), &y);

        // channel mixer
        let n_fmt = self.fmt(&site(BlockSite::GluNorm));
        let gg_fmt = self.fmt(&site(BlockSite::GluGate));
        let up_fmt = self.fmt(&site(BlockSite::GluUp));
        let p_fmt = self.fmt(&site(BlockSite::GluProd));
        let dn_fmt = self.fmt(&site(BlockSite::GluDownNorm));
        let n = self.rmsnorm(&y, &blk.glu_norm, n_fmt);
        self.observe(&site(BlockSite::GluNorm), &n);
        let gg = self.linear(&n, n_fmt, &blk.glu_gate, gg_fmt);
        self.observe(&site(BlockSite::GluGate), &gg);
        let u = self.linear(&n, n_fmt, &blk.glu_up, up_fmt);
        self.observe(&site(BlockSite::GluUp), &u);
        let sg = self.silu(&gg, gg_fmt);
        let p: Vec<f64> = sg.iter().zip(&u).map(|(&a, &b)| self.q(a * b, p_fmt)).collect();
        self.observe(&site(BlockSite::GluProd), &p);
        self.record(&site(BlockSite::GluProd), &p);
        let pn = self.rmsnorm(&p, &blk.glu_down.gain, dn_fmt);
        self.observe(&site(BlockSite::GluDownNorm), &pn);
        let dd = self.linear(&pn, dn_fmt, &blk.glu_down.w, resid);
        self.observe(quantizer::SITE_RESID, &dd);
        let z: Vec<f64> = y.iter().zip(&dd).map(|(&a, &b)| self.q(a + b, resid)).collect();
        self.observe(quantizer::SITE_RESID, &z);
        self.record(&format!("blocks.{b}.out"), &z);
        z
    }
}

/// Run `tokens` through the reference model from a zero state.
pub fn oracle_forward(tokens: &[u32], m: &OracleModel, cfg: &OracleConfig) -> Result<OracleOutput, OracleError> {
    if let Some(&id) = tokens.iter().find(|&&id| id as usize >= m.vocab) {
        return Err(OracleError::TokenOutOfRange { id, vocab: m.vocab });
    }
    let mut fmts = BTreeMap::new();
    if cfg.mode == OracleMode::FakeQuant {
        for site in quantizer::required_sites(m.blocks.len()) {
            let f = m.scheme.act_format(&site).ok_or_else(|| OracleError::MissingScale(site.clone()))?;
            fmts.insert(site, f);
        }
    }
    let mut ev = Eval { m, cfg, fmts, sig: SigmoidTable::new(), out: OracleOutput::default(), step: 0 };
    let mut hs: Vec<Vec<f64>> = vec![vec![0.0; m.d]; m.blocks.len()];
    let resid = ev.fmt(quantizer::SITE_RESID);
    let fin = ev.fmt(quantizer::SITE_FINAL_NORM);
    for (t, &id) in tokens.iter().enumerate() {
        ev.step = t;
        let row = &m.embed[id as usize * m.d..(id as usize + 1) * m.d];
        let mut x = ev.qv(row.to_vec(), resid);
        ev.observe(quantizer::SITE_RESID, &x);
        ev.record(quantizer::SITE_RESID, &x);
        for (b, h) in hs.iter_mut().enumerate() {
            x = ev.block(b, x, h);
        }
        let n = ev.rmsnorm(&x, &m.final_norm, fin);
        ev.observe(quantizer::SITE_FINAL_NORM, &n);
        ev.record(quantizer::SITE_FINAL_NORM, &n);
        let logits = ev.linear(&n, fin, &m.unembed, FxFormat::LOGITS);
        ev.record("logits", &logits);
        ev.out.logits.push(logits);
    }
    Ok(ev.out)
}

fn rms_real(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    if ms + eps == 0.0 {
        return vec![0.0; x.len()];
    }
    let r = 1.0 / (ms + eps).sqrt();
    x.iter().zip(g).map(|(v, gi)| v * r * gi).collect()
}

/// Max `|fused - sequential|` for two stacked RMSNorms in exact arithmetic.
///
/// `g1` is either one scalar or a per-channel vector. The fused form
/// `x g1 g2 / sqrt(mu (g1^2 + eps) + eps^2)` is applied channel by channel,
/// which only matches the sequential result when `g1` is uniform.
pub fn oracle_double_rmsnorm_check(x: &[f64], g1: &[f64], g2: &[f64], eps: f64) -> f64 {
    let d = x.len();
    let g1v: Vec<f64> = if g1.len() == 1 { vec![g1[0]; d] } else { g1.to_vec() };
    let seq = rms_real(&rms_real(x, &g1v, eps), g2, eps);
    let mu = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
    let fused = (0..d).map(|i| {
        let den = mu * (g1v[i] * g1v[i] + eps) + eps * eps;
        if den == 0.0 {
            0.0
        } else {
            x[i] * g1v[i] * g2[i] / den.sqrt()
        }
    });
    seq.iter().zip(fused).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_table_matches_known_samples() {
        let t = SigmoidTable::new();
        assert_eq!(t.0, [2048.0, 2994.0, 3607.0, 3901.0, 4022.0, 4068.0, 4085.0, 4092.0, 4094.0]);
        assert_eq!(t.eval(0.0), 0.5);
        assert_eq!(t.eval(100.0), 1.0);
        assert_eq!(t.eval(-512.0), 0.0);
    }

    #[test]
    fn isqrt_known_values() {
        assert_eq!(isqrt_q24(4096), 262_144);
        assert_eq!(isqrt_q24(16384), 131_072);
        assert_eq!(isqrt_q24(1), 1 << 24);
        // 2^24 / sqrt(2) = 11863283.2
        assert_eq!(isqrt_q24(2), 11_863_283);
    }

    #[test]
    fn double_rmsnorm_identity() {
        let x = [1.0, -1.0, 1.0, -1.0];
        assert_eq!(oracle_double_rmsnorm_check(&x, &[1.0], &[1.0; 4], 0.0), 0.0);
        let x: Vec<f64> = (0..64).map(|i| ((i * 37 % 23) as f64 - 11.0) / 3.0).collect();
        let g2: Vec<f64> = (0..64).map(|i| 0.5 + (i % 7) as f64 / 7.0).collect();
        assert!(oracle_double_rmsnorm_check(&x, &[0.5], &g2, 1e-3) <= 1e-9);
        let g1: Vec<f64> = (0..64).map(|i| 0.25 + (i % 5) as f64 / 4.0).collect();
        assert!(oracle_double_rmsnorm_check(&x, &g1, &g2, 1e-3) > 1e-3);
        assert_eq!(oracle_double_rmsnorm_check(&[0.0; 4], &[0.5], &[1.0; 4], 0.0), 0.0);
    }
}
