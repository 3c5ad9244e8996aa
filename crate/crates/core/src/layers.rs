//! Model composition: BitLinear, the MLGRU token mixer, the GLU channel
//! mixer, residual blocks, and the autoregressive session.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::container::ModelConfig;
use crate::fxp::{self, FxFormat, SigmoidLut};
use crate::kernels::{self, FxTensor, KernelError, OpCounters, RmsNormParams, TernaryMatrix};
use crate::quantizer::{self, BlockSite};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayerError {
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("no activation scale for site {0}")]
    MissingScale(String),
    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: String, expected: usize, got: usize },
    #[error("forget floor entry {0} outside [0, 1)")]
    ForgetFloor(i32),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("session has no logits yet; prime it with forward_sequence")]
    NotPrimed,
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

pub type Result<T> = std::result::Result<T, LayerError>;

/// `RMSNorm(x; g, eps)` followed by a ternary projection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitLinearLayer {
    pub norm: RmsNormParams,
    pub weight: TernaryMatrix,
}

impl BitLinearLayer {
    pub fn new(norm: RmsNormParams, weight: TernaryMatrix) -> Result<Self> {
        if norm.d() != weight.rows() {
            return Err(shape("bitlinear norm width", weight.rows(), norm.d()));
        }
        Ok(BitLinearLayer { norm, weight })
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlgruLayer {
    pub forget: BitLinearLayer,
    pub cand: BitLinearLayer,
    pub gate: BitLinearLayer,
    pub output: BitLinearLayer,
    /// Normalization applied to the output-gate projection.
    pub out_norm: RmsNormParams,
    /// Per-channel lower bound on the forget gate, raw at 12 fractional bits.
    pub forget_floor: Option<Vec<i32>>,
}

/// Channel mixer. `gate` and `up` share the normalized input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GluLayer {
    pub norm: RmsNormParams,
    pub gate: TernaryMatrix,
    pub up: TernaryMatrix,
    pub down: BitLinearLayer,
}

impl GluLayer {
    pub fn hidden_dim(&self) -> usize {
        self.gate.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub mlgru: MlgruLayer,
    pub glu: GluLayer,
}

impl Block {
    /// The seven ternary matrices, MLGRU first.
    pub fn matrices(&self) -> [&TernaryMatrix; 7] {
        [
            &self.mlgru.forget.weight,
            &self.mlgru.cand.weight,
            &self.mlgru.gate.weight,
            &self.mlgru.output.weight,
            &self.glu.gate,
            &self.glu.up,
            &self.glu.down.weight,
        ]
    }

    pub fn nnz(&self) -> u64 {
        self.matrices().iter().map(|m| m.nnz() as u64).sum()
    }
}

/// Activation formats of one block, resolved from the scale table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockFormats {
    pub forget_norm: FxFormat,
    pub cand_norm: FxFormat,
    pub gate_norm: FxFormat,
    pub output_norm: FxFormat,
    pub hidden: FxFormat,
    pub gate_pre: FxFormat,
    pub gate: FxFormat,
    pub mix: FxFormat,
    pub glu_norm: FxFormat,
    pub glu_gate: FxFormat,
    pub glu_up: FxFormat,
    pub glu_prod: FxFormat,
    pub glu_down_norm: FxFormat,
}

impl BlockFormats {
    pub fn resolve(scheme: &quantizer::QuantScheme, block: usize) -> Result<Self> {
        let f = |s: BlockSite| {
            let name = s.name(block);
            scheme.act_format(&name).ok_or(LayerError::MissingScale(name))
        };
        Ok(BlockFormats {
            forget_norm: f(BlockSite::ForgetNorm)?,
            cand_norm: f(BlockSite::CandNorm)?,
            gate_norm: f(BlockSite::GateNorm)?,
            output_norm: f(BlockSite::OutputNorm)?,
            hidden: f(BlockSite::Hidden)?,
            gate_pre: f(BlockSite::GatePre)?,
            gate: f(BlockSite::Gate)?,
            mix: f(BlockSite::Mix)?,
            glu_norm: f(BlockSite::GluNorm)?,
            glu_gate: f(BlockSite::GluGate)?,
            glu_up: f(BlockSite::GluUp)?,
            glu_prod: f(BlockSite::GluProd)?,
            glu_down_norm: f(BlockSite::GluDownNorm)?,
        })
    }
}

/// Immutable model weights plus resolved formats.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Model {
    config: ModelConfig,
    embed: FxTensor,
    blocks: Vec<Block>,
    final_norm: RmsNormParams,
    unembed: TernaryMatrix,
    resid_fmt: FxFormat,
    final_norm_fmt: FxFormat,
    block_fmts: Vec<BlockFormats>,
    sigmoid: SigmoidLut,
}

fn shape(what: &str, expected: usize, got: usize) -> LayerError {
    LayerError::Shape { what: what.to_string(), expected, got }
}

fn check_norm(what: &str, n: &RmsNormParams, d: usize, eps: i32) -> Result<()> {
    if n.d() != d {
        return Err(shape(what, d, n.d()));
    }
    if n.eps() != eps {
        return Err(LayerError::Config(format!("{what}: eps {} differs from config eps {eps}", n.eps())));
    }
    Ok(())
}

fn check_matrix(what: &str, m: &TernaryMatrix, rows: usize, cols: usize) -> Result<()> {
    if m.rows() != rows {
        return Err(shape(&format!("{what} rows"), rows, m.rows()));
    }
    if m.cols() != cols {
        return Err(shape(&format!("{what} cols"), cols, m.cols()));
    }
    Ok(())
}

impl Model {
    pub fn new(
        config: ModelConfig,
        embed: FxTensor,
        blocks: Vec<Block>,
        final_norm: RmsNormParams,
        unembed: TernaryMatrix,
    ) -> Result<Self> {
        config.validate().map_err(LayerError::Config)?;
        let (d, h, v) = (config.d, config.hidden_dim, config.vocab_size);
        let eps = config.quant.eps_fx;
        let q = &config.quant;
        let resid_fmt = q
            .act_format(quantizer::SITE_RESID)
            .ok_or_else(|| LayerError::MissingScale(quantizer::SITE_RESID.into()))?;
        let final_norm_fmt = q
            .act_format(quantizer::SITE_FINAL_NORM)
            .ok_or_else(|| LayerError::MissingScale(quantizer::SITE_FINAL_NORM.into()))?;
        if embed.shape() != [v, d] {
            return Err(shape("embed elements", v * d, embed.len()));
        }
        if embed.fmt() != resid_fmt {
            return Err(LayerError::Kernel(KernelError::Format(embed.fmt(), resid_fmt)));
        }
        if blocks.len() != config.n_blocks {
            return Err(shape("blocks", config.n_blocks, blocks.len()));
        }
        let mut block_fmts = Vec::with_capacity(blocks.len());
        for (b, blk) in blocks.iter().enumerate() {
            let m = &blk.mlgru;
            for (name, l) in [("forget", &m.forget), ("cand", &m.cand), ("gate", &m.gate), ("output", &m.output)] {
                check_norm(&format!("block {b} {name} norm"), &l.norm, d, eps)?;
                check_matrix(&format!("block {b} {name}"), &l.weight, d, d)?;
            }
            check_norm(&format!("block {b} out_norm"), &m.out_norm, d, eps)?;
            match (&m.forget_floor, config.has_forget_floor) {
                (Some(beta), true) => {
                    if beta.len() != d {
                        return Err(shape(&format!("block {b} forget floor"), d, beta.len()));
                    }
                    if let Some(&bad) = beta.iter().find(|&&x| !(0..FxFormat::GAIN.one()).contains(&x)) {
                        return Err(LayerError::ForgetFloor(bad));
                    }
                }
                (None, false) => {}
                _ => return Err(LayerError::Config(format!("block {b}: forget floor presence differs from config"))),
            }
            let g = &blk.glu;
            check_norm(&format!("block {b} glu norm"), &g.norm, d, eps)?;
            check_matrix(&format!("block {b} glu gate"), &g.gate, d, h)?;
            check_matrix(&format!("block {b} glu up"), &g.up, d, h)?;
            check_norm(&format!("block {b} glu down norm"), &g.down.norm, h, eps)?;
            check_matrix(&format!("block {b} glu down"), &g.down.weight, h, d)?;
            block_fmts.push(BlockFormats::resolve(q, b)?);
        }
        check_norm("final norm", &final_norm, d, eps)?;
        check_matrix("unembed", &unembed, d, v)?;
        Ok(Model {
            config,
            embed,
            blocks,
            final_norm,
            unembed,
            resid_fmt,
            final_norm_fmt,
            block_fmts,
            sigmoid: SigmoidLut::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embed(&self) -> &FxTensor {
        &self.embed
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn final_norm(&self) -> &RmsNormParams {
        &self.final_norm
    }

    pub fn unembed(&self) -> &TernaryMatrix {
        &self.unembed
    }

    pub fn resid_fmt(&self) -> FxFormat {
        self.resid_fmt
    }

    pub fn final_norm_fmt(&self) -> FxFormat {
        self.final_norm_fmt
    }

    pub fn block_formats(&self) -> &[BlockFormats] {
        &self.block_fmts
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// All ternary matrices with their container names.
    pub fn named_matrices(&self) -> Vec<(String, &TernaryMatrix)> {
        let mut v = Vec::new();
        for (b, blk) in self.blocks.iter().enumerate() {
            let names = ["mlgru.forget", "mlgru.cand", "mlgru.gate", "mlgru.output", "glu.gate", "glu.up", "glu.down"];
            for (n, m) in names.iter().zip(blk.matrices()) {
                v.push((format!("blocks.{b}.{n}"), m));
            }
        }
        v.push(("unembed".to_string(), &self.unembed));
        v
    }

    fn embed_row(&self, id: u32) -> Result<FxTensor> {
        let v = self.vocab_size();
        if id as usize >= v {
            return Err(LayerError::TokenOutOfRange { id, vocab: v });
        }
        let d = self.config.d;
        let row = self.embed.data()[id as usize * d..(id as usize + 1) * d].to_vec();
        Ok(FxTensor::vector(row, self.resid_fmt)?)
    }
}

/// Normalize, then accumulate through the ternary matrix.
pub fn bitlinear_forward(
    x: &FxTensor,
    layer: &BitLinearLayer,
    norm_fmt: FxFormat,
    out_fmt: FxFormat,
    preshift: u32,
    counters: &mut OpCounters,
) -> Result<FxTensor> {
    let n = kernels::rmsnorm(x, &layer.norm, norm_fmt, counters)?;
    Ok(kernels::ternary_accumulate(&n, &layer.weight, preshift, out_fmt, counters)?)
}

fn silu(x: &FxTensor, lut: &SigmoidLut, counters: &mut OpCounters) -> FxTensor {
    let fmt = x.fmt();
    let data = x.data().iter().map(|&v| fxp::silu_fx(v, fmt, lut, &mut counters.saturations)).collect();
    FxTensor::vector(data, fmt).expect("same length")
}

/// Recorded intermediate, raw integers in `fmt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub step: usize,
    pub site: String,
    pub fmt: FxFormat,
    pub raw: Vec<i32>,
}

/// Test hook: add one ulp to a hidden-state channel at a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Perturbation {
    pub step: usize,
    pub block: usize,
    pub channel: usize,
}

struct StepCtx<'a> {
    step: usize,
    trace: Option<&'a mut Vec<TraceEntry>>,
    perturb: Option<Perturbation>,
}

impl StepCtx<'_> {
    fn record(&mut self, site: impl Into<String>, t: &FxTensor) {
        if let Some(tr) = self.trace.as_deref_mut() {
            tr.push(TraceEntry { step: self.step, site: site.into(), fmt: t.fmt(), raw: t.data().to_vec() });
        }
    }
}

fn mlgru_step_inner(
    x: &FxTensor,
    layer: &MlgruLayer,
    fm: &BlockFormats,
    model: &Model,
    block: usize,
    h: &mut FxTensor,
    counters: &mut OpCounters,
    ctx: &mut StepCtx<'_>,
) -> Result<FxTensor> {
    let pre = model.config.acc_preshift;
    let lut = &model.sigmoid;

    let f_pre = bitlinear_forward(x, &layer.forget, fm.forget_norm, lut.input_format(), pre, counters)?;
    let mut f: Vec<i32> = f_pre.data().iter().map(|&v| fxp::sigmoid_fx(v, lut)).collect();
    if let Some(beta) = &layer.forget_floor {
        let one = FxFormat::GAIN.one() as i64;
        let q = FxFormat::GAIN.frac() as i32;
        for (fv, &b) in f.iter_mut().zip(beta) {
            *fv = (b as i64 + fxp::shift_round((one - b as i64) * *fv as i64, q)) as i32;
        }
    }
    let f = FxTensor::vector(f, FxFormat::GAIN)?;
    ctx.record(format!("blocks.{block}.mlgru.forget"), &f);

    let c_pre = bitlinear_forward(x, &layer.cand, fm.cand_norm, fm.hidden, pre, counters)?;
    let c = silu(&c_pre, lut, counters);
    let mut h_new = kernels::gate_mix(&f, h, &c, counters)?;
    if let Some(p) = ctx.perturb.filter(|p| p.step == ctx.step && p.block == block) {
        if let Some(v) = h_new.data_mut().get_mut(p.channel) {
            *v = fxp::sat_add(*v, 1, fm.hidden, &mut counters.saturations);
        }
    }
    ctx.record(BlockSite::Hidden.name(block), &h_new);

    let g_pre = bitlinear_forward(x, &layer.gate, fm.gate_norm, fm.gate_pre, pre, counters)?;
    let g = kernels::rmsnorm(&g_pre, &layer.out_norm, fm.gate, counters)?;
    ctx.record(BlockSite::Gate.name(block), &g);
    let mix = kernels::hadamard(&g, &silu(&h_new, lut, counters), fm.mix, counters)?;
    ctx.record(BlockSite::Mix.name(block), &mix);
    let o = bitlinear_forward(&mix, &layer.output, fm.output_norm, model.resid_fmt, pre, counters)?;
    *h = h_new;
    Ok(o)
}

fn glu_inner(
    x: &FxTensor,
    layer: &GluLayer,
    fm: &BlockFormats,
    model: &Model,
    block: usize,
    counters: &mut OpCounters,
    ctx: &mut StepCtx<'_>,
) -> Result<FxTensor> {
    let pre = model.config.acc_preshift;
    let n = kernels::rmsnorm(x, &layer.norm, fm.glu_norm, counters)?;
    let g = kernels::ternary_accumulate(&n, &layer.gate, pre, fm.glu_gate, counters)?;
    let u = kernels::ternary_accumulate(&n, &layer.up, pre, fm.glu_up, counters)?;
    let p = kernels::hadamard(&silu(&g, &model.sigmoid, counters), &u, fm.glu_prod, counters)?;
    ctx.record(BlockSite::GluProd.name(block), &p);
    bitlinear_forward(&p, &layer.down, fm.glu_down_norm, model.resid_fmt, pre, counters)
}

/// One MLGRU step. Updates `h` in place and returns the mixer output in the
/// residual format.
pub fn mlgru_step(
    x: &FxTensor,
    model: &Model,
    block: usize,
    h: &mut FxTensor,
    counters: &mut OpCounters,
) -> Result<FxTensor> {
    let mut ctx = StepCtx { step: 0, trace: None, perturb: None };
    mlgru_step_inner(x, &model.blocks[block].mlgru, &model.block_fmts[block], model, block, h, counters, &mut ctx)
}

/// GLU channel mixer output in the residual format.
pub fn glu_forward(x: &FxTensor, model: &Model, block: usize, counters: &mut OpCounters) -> Result<FxTensor> {
    let mut ctx = StepCtx { step: 0, trace: None, perturb: None };
    glu_inner(x, &model.blocks[block].glu, &model.block_fmts[block], model, block, counters, &mut ctx)
}

/// `y = x + mlgru(x)`, `z = y + glu(y)`, both adds saturating.
pub fn block_forward(
    x: &FxTensor,
    model: &Model,
    block: usize,
    h: &mut FxTensor,
    counters: &mut OpCounters,
) -> Result<FxTensor> {
    let mut ctx = StepCtx { step: 0, trace: None, perturb: None };
    block_inner(x, model, block, h, counters, &mut ctx)
}

fn block_inner(
    x: &FxTensor,
    model: &Model,
    block: usize,
    h: &mut FxTensor,
    counters: &mut OpCounters,
    ctx: &mut StepCtx<'_>,
) -> Result<FxTensor> {
    let blk = &model.blocks[block];
    let fm = &model.block_fmts[block];
    let o = mlgru_step_inner(x, &blk.mlgru, fm, model, block, h, counters, ctx)?;
    let y = kernels::residual_add(x, &o, counters)?;
    ctx.record(format!("blocks.{block}.mid"), &y);
    let d = glu_inner(&y, &blk.glu, fm, model, block, counters, ctx)?;
    let z = kernels::residual_add(&y, &d, counters)?;
    ctx.record(format!("blocks.{block}.out"), &z);
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Logits for every position.
    Prefill,
    /// Logits for the final position only.
    Generate,
}

/// Next-token selection over raw logits.
#[derive(Debug, Clone)]
pub enum Sampler {
    /// Argmax; ties go to the lowest id.
    Greedy,
    /// Draw from `p_i ~ 2^((l_i - l_max) / 2^temperature_shift)`, exponent
    /// truncated to an integer so weights are exact powers of two.
    Categorical { rng: ChaCha8Rng, temperature_shift: i32 },
}

impl Sampler {
    pub fn categorical(seed: u64, temperature_shift: i32) -> Self {
        Sampler::Categorical { rng: ChaCha8Rng::seed_from_u64(seed), temperature_shift }
    }

    pub fn sample(&mut self, logits: &FxTensor) -> u32 {
        match self {
            Sampler::Greedy => argmax(logits.data()),
            Sampler::Categorical { rng, temperature_shift } => {
                let l = logits.data();
                let max = l.iter().copied().max().unwrap_or(0) as i64;
                let shift = (logits.fmt().frac() as i32 + *temperature_shift).max(0);
                let weights: Vec<u128> = l
                    .iter()
                    .map(|&v| {
                        let e = (v as i64 - max) >> shift;
                        if e < -100 {
                            0
                        } else {
                            1u128 << (100 + e)
                        }
                    })
                    .collect();
                let total: u128 = weights.iter().sum();
                let mut u = rng.gen_range(0..total);
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        return i as u32;
                    }
                    u -= w;
                }
                (weights.len() - 1) as u32
            }
        }
    }
}

pub fn argmax(v: &[i32]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Recurrent state and counters for one token stream over a shared model.
#[derive(Debug, Clone)]
pub struct Session<'m> {
    model: &'m Model,
    states: Vec<FxTensor>,
    step_index: usize,
    counters: OpCounters,
    block_counters: Vec<OpCounters>,
    last_logits: Option<FxTensor>,
    trace: Option<Vec<TraceEntry>>,
    perturb: Option<Perturbation>,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model) -> Self {
        let d = model.config.d;
        let hidden = model.block_fmts.iter().map(|f| FxTensor::zeros(d, f.hidden)).collect();
        Session {
            model,
            states: hidden,
            step_index: 0,
            counters: OpCounters::default(),
            block_counters: vec![OpCounters::default(); model.blocks.len()],
            last_logits: None,
            trace: None,
            perturb: None,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn set_perturbation(&mut self, p: Option<Perturbation>) {
        self.perturb = p;
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn states(&self) -> &[FxTensor] {
        &self.states
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    /// Totals over every kernel call, including the unembedding.
    pub fn counters(&self) -> &OpCounters {
        &self.counters
    }

    pub fn block_counters(&self) -> &[OpCounters] {
        &self.block_counters
    }

    pub fn last_logits(&self) -> Option<&FxTensor> {
        self.last_logits.as_ref()
    }

    pub fn trace(&self) -> Option<&[TraceEntry]> {
        self.trace.as_deref()
    }

    pub fn take_trace(&mut self) -> Vec<TraceEntry> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Run one token through every block; returns its logits.
    pub fn step(&mut self, id: u32) -> Result<FxTensor> {
        let model = self.model;
        let mut x = model.embed_row(id)?;
        let mut ctx = StepCtx { step: self.step_index, trace: self.trace.as_mut(), perturb: self.perturb };
        ctx.record(quantizer::SITE_RESID, &x);
        for b in 0..model.blocks.len() {
            let mut c = OpCounters::default();
            x = block_inner(&x, model, b, &mut self.states[b], &mut c, &mut ctx)?;
            self.block_counters[b].merge(&c);
            self.counters.merge(&c);
        }
        let n = kernels::rmsnorm(&x, &model.final_norm, model.final_norm_fmt, &mut self.counters)?;
        ctx.record(quantizer::SITE_FINAL_NORM, &n);
        let logits = kernels::ternary_accumulate(
            &n,
            &model.unembed,
            model.config.acc_preshift,
            FxFormat::LOGITS,
            &mut self.counters,
        )?;
        ctx.record("logits", &logits);
        self.step_index += 1;
        self.last_logits = Some(logits.clone());
        Ok(logits)
    }

    /// Feed `tokens` in order. Ids are checked before any state changes.
    pub fn forward_sequence(&mut self, tokens: &[u32], mode: Mode) -> Result<Vec<FxTensor>> {
        let v = self.model.vocab_size();
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= v) {
            return Err(LayerError::TokenOutOfRange { id, vocab: v });
        }
        let mut out = Vec::new();
        for (i, &id) in tokens.iter().enumerate() {
            let l = self.step(id)?;
            if mode == Mode::Prefill || i + 1 == tokens.len() {
                out.push(l);
            }
        }
        Ok(out)
    }

    /// Sample `max_new` ids, feeding each one back.
    pub fn generate(&mut self, max_new: usize, sampler: &mut Sampler) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(max_new);
        if max_new == 0 {
            return Ok(out);
        }
        let mut logits = self.last_logits.clone().ok_or(LayerError::NotPrimed)?;
        for _ in 0..max_new {
            let id = sampler.sample(&logits);
            out.push(id);
            logits = self.step(id)?;
        }
        Ok(out)
    }
}
