//! MMFL model container.
//!
//! ```text
//! "MMFL" | version u32 LE | header_len u32 LE | header JSON | SHA-256(header JSON) | payload
//! ```
//!
//! The header holds the model config and a tensor directory sorted by name.
//! Offsets are relative to the payload start; tensors are laid out
//! contiguously in directory order with no trailing bytes. `i16` tensors are
//! little-endian; `trit2` tensors are 2-bit packed rows, four trits per byte
//! LSB first, each row padded to a byte boundary.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fxp::FxFormat;
use crate::kernels::{self, FxTensor, KernelError, RmsNormParams, TernaryMatrix};
use crate::layers::{BitLinearLayer, Block, GluLayer, LayerError, MlgruLayer, Model};
use crate::oracle::{oracle_forward, OracleBitLinear, OracleBlock, OracleConfig, OracleLinear, OracleModel};
use crate::quantizer::{self, QuantScheme};

pub const MAGIC: [u8; 4] = *b"MMFL";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 12;
/// Ternary scales are 8-bit magnitudes.
const SCALE_MAX: i32 = 127;
const MAX_SCALE_FRAC: i32 = 15;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n_blocks: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub quant: QuantScheme,
    /// Right shift applied to accumulator inputs.
    pub acc_preshift: u32,
    pub has_forget_floor: bool,
}

/// `ceil(8d/3)` rounded up to a multiple of 64.
pub fn default_hidden_dim(d: usize) -> usize {
    (8 * d).div_ceil(3).div_ceil(64) * 64
}

/// 4 once `d` exceeds 64, else 0.
pub fn default_acc_preshift(d: usize) -> u32 {
    if d > 64 {
        4
    } else {
        0
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d == 0 || !self.d.is_power_of_two() {
            return Err(format!("d = {} is not a power of two", self.d));
        }
        if self.n_blocks == 0 {
            return Err("n_blocks must be at least 1".into());
        }
        if self.vocab_size < 2 {
            return Err(format!("vocab_size = {} (need at least 2)", self.vocab_size));
        }
        if self.hidden_dim == 0 {
            return Err("hidden_dim must be positive".into());
        }
        let q = &self.quant;
        if (q.weight_bits, q.act_bits, q.rms_internal_bits, q.rms_frac_bits)
            != (quantizer::WEIGHT_BITS, quantizer::ACT_BITS, quantizer::RMS_INTERNAL_BITS, quantizer::RMS_FRAC_BITS)
        {
            return Err(format!(
                "unsupported quantization W{}A{} rms {}/{}",
                q.weight_bits, q.act_bits, q.rms_internal_bits, q.rms_frac_bits
            ));
        }
        if q.eps_fx <= 0 || !FxFormat::A24.contains(q.eps_fx as i64) {
            return Err(format!("eps_fx = {} must be a positive 24-bit value", q.eps_fx));
        }
        // worst-case accumulator magnitude: rows * 2^(15 - preshift) < 2^31
        let rows = self.d.max(self.hidden_dim) as u128;
        if self.acc_preshift > 15 || rows << (15 - self.acc_preshift.min(15)) > (i32::MAX as u128) {
            return Err(format!("acc_preshift {} leaves no 32-bit accumulator headroom", self.acc_preshift));
        }
        let required = quantizer::required_sites(self.n_blocks);
        if let Some(s) = q.missing_sites(&required).first() {
            return Err(format!("missing or invalid activation scale for {s}"));
        }
        if let Some(extra) = q.act_scales.keys().find(|k| !required.contains(k)) {
            return Err(format!("unknown activation site {extra}"));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("header digest mismatch")]
    HeaderDigest,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("invalid trit code in {0}")]
    InvalidTrit(String),
    #[error("tensor directory does not match config: {0}")]
    Directory(String),
    #[error("invalid model: {0}")]
    Model(#[from] LayerError),
}

impl ContainerError {
    /// Whether the failure came from the filesystem rather than the bytes.
    pub fn is_io(&self) -> bool {
        matches!(self, ContainerError::Io(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    I16,
    Trit2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub scale_exp: i32,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

enum Blob {
    I16(Vec<i32>),
    Trit(Vec<u8>),
}

struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    scale_exp: i32,
    blob: Blob,
}

fn gain_tensor(g: &[i32]) -> Tensor {
    Tensor { dtype: DType::I16, shape: vec![g.len()], scale_exp: -12, blob: Blob::I16(g.to_vec()) }
}

fn push_matrix(out: &mut BTreeMap<String, Tensor>, prefix: &str, m: &TernaryMatrix) {
    out.insert(
        format!("{prefix}.weight"),
        Tensor { dtype: DType::Trit2, shape: vec![m.rows(), m.cols()], scale_exp: 0, blob: Blob::Trit(m.packed().to_vec()) },
    );
    out.insert(
        format!("{prefix}.scale"),
        Tensor {
            dtype: DType::I16,
            shape: vec![1],
            scale_exp: -(m.scale_fmt().frac() as i32),
            blob: Blob::I16(vec![m.scale()]),
        },
    );
}

fn collect_tensors(m: &Model) -> BTreeMap<String, Tensor> {
    let mut t = BTreeMap::new();
    let e = m.embed();
    t.insert(
        "embed".to_string(),
        Tensor {
            dtype: DType::I16,
            shape: e.shape().to_vec(),
            scale_exp: -(e.fmt().frac() as i32),
            blob: Blob::I16(e.data().to_vec()),
        },
    );
    t.insert("final_norm".to_string(), gain_tensor(m.final_norm().gain()));
    push_matrix(&mut t, "unembed", m.unembed());
    for (b, blk) in m.blocks().iter().enumerate() {
        let p = format!("blocks.{b}");
        let ml = &blk.mlgru;
        for (n, l) in [("forget", &ml.forget), ("cand", &ml.cand), ("gate", &ml.gate), ("output", &ml.output)] {
            t.insert(format!("{p}.mlgru.{n}.norm"), gain_tensor(l.norm.gain()));
            push_matrix(&mut t, &format!("{p}.mlgru.{n}"), &l.weight);
        }
        t.insert(format!("{p}.mlgru.out_norm"), gain_tensor(ml.out_norm.gain()));
        if let Some(beta) = &ml.forget_floor {
            t.insert(format!("{p}.mlgru.forget_floor"), gain_tensor(beta));
        }
        t.insert(format!("{p}.glu.norm"), gain_tensor(blk.glu.norm.gain()));
        push_matrix(&mut t, &format!("{p}.glu.gate"), &blk.glu.gate);
        push_matrix(&mut t, &format!("{p}.glu.up"), &blk.glu.up);
        t.insert(format!("{p}.glu.down.norm"), gain_tensor(blk.glu.down.norm.gain()));
        push_matrix(&mut t, &format!("{p}.glu.down"), &blk.glu.down.weight);
    }
    t
}

/// Expected directory for a config: name -> (dtype, shape).
fn expected_directory(c: &ModelConfig) -> BTreeMap<String, (DType, Vec<usize>)> {
    let (d, h, v) = (c.d, c.hidden_dim, c.vocab_size);
    let mut m = BTreeMap::new();
    let mat = |m: &mut BTreeMap<_, _>, p: String, rows: usize, cols: usize| {
        m.insert(format!("{p}.weight"), (DType::Trit2, vec![rows, cols]));
        m.insert(format!("{p}.scale"), (DType::I16, vec![1]));
    };
    m.insert("embed".to_string(), (DType::I16, vec![v, d]));
    m.insert("final_norm".to_string(), (DType::I16, vec![d]));
    mat(&mut m, "unembed".into(), d, v);
    for b in 0..c.n_blocks {
        let p = format!("blocks.{b}");
        for n in ["forget", "cand", "gate", "output"] {
            m.insert(format!("{p}.mlgru.{n}.norm"), (DType::I16, vec![d]));
            mat(&mut m, format!("{p}.mlgru.{n}"), d, d);
        }
        m.insert(format!("{p}.mlgru.out_norm"), (DType::I16, vec![d]));
        if c.has_forget_floor {
            m.insert(format!("{p}.mlgru.forget_floor"), (DType::I16, vec![d]));
        }
        m.insert(format!("{p}.glu.norm"), (DType::I16, vec![d]));
        mat(&mut m, format!("{p}.glu.gate"), d, h);
        mat(&mut m, format!("{p}.glu.up"), d, h);
        m.insert(format!("{p}.glu.down.norm"), (DType::I16, vec![h]));
        mat(&mut m, format!("{p}.glu.down"), h, d);
    }
    m
}

fn blob_len(dtype: DType, shape: &[usize]) -> u64 {
    match dtype {
        DType::I16 => 2 * shape.iter().product::<usize>() as u64,
        DType::Trit2 => (shape[0] * kernels::packed_row_bytes(shape[1])) as u64,
    }
}

/// Serialize to the MMFL byte stream. Identical models give identical bytes.
pub fn to_bytes(m: &Model) -> Vec<u8> {
    let tensors = collect_tensors(m);
    let mut payload = Vec::new();
    let mut dir = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        let offset = payload.len() as u64;
        match &t.blob {
            Blob::I16(v) => v.iter().for_each(|&x| payload.extend_from_slice(&(x as i16).to_le_bytes())),
            Blob::Trit(b) => payload.extend_from_slice(b),
        }
        dir.push(TensorEntry {
            name: name.clone(),
            dtype: t.dtype,
            shape: t.shape.clone(),
            scale_exp: t.scale_exp,
            offset,
            length: payload.len() as u64 - offset,
        });
    }
    let header = serde_json::to_vec(&Header { config: m.config().clone(), tensors: dir }).expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + DIGEST_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&Sha256::digest(&header));
    out.extend_from_slice(&payload);
    out
}

pub fn save(m: &Model, path: impl AsRef<Path>) -> Result<(), ContainerError> {
    std::fs::write(path, to_bytes(m))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model, ContainerError> {
    from_bytes(&std::fs::read(path)?)
}

/// Parse and validate the prefix, header and digest.
pub fn read_header(bytes: &[u8]) -> Result<(Header, usize), ContainerError> {
    if bytes.len() < PREFIX_LEN {
        return Err(ContainerError::Truncated(format!("{} bytes, prefix needs {PREFIX_LEN}", bytes.len())));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(ContainerError::Version(version));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_start = PREFIX_LEN + hlen + DIGEST_LEN;
    if bytes.len() < payload_start {
        return Err(ContainerError::Truncated(format!("header of {hlen} bytes does not fit")));
    }
    let header = &bytes[PREFIX_LEN..PREFIX_LEN + hlen];
    if Sha256::digest(header).as_slice() != &bytes[PREFIX_LEN + hlen..payload_start] {
        return Err(ContainerError::HeaderDigest);
    }
    let h: Header = serde_json::from_slice(header).map_err(|e| ContainerError::Header(e.to_string()))?;
    Ok((h, payload_start))
}

fn dir_err(s: impl Into<String>) -> ContainerError {
    ContainerError::Directory(s.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model, ContainerError> {
    let (h, start) = read_header(bytes)?;
    let cfg = h.config;
    cfg.validate().map_err(|e| ContainerError::Header(format!("config: {e}")))?;
    let payload = &bytes[start..];

    let expected = expected_directory(&cfg);
    if h.tensors.len() != expected.len() {
        return Err(dir_err(format!("{} tensors, config implies {}", h.tensors.len(), expected.len())));
    }
    let mut next = 0u64;
    let mut blobs: BTreeMap<&str, (&TensorEntry, &[u8])> = BTreeMap::new();
    for (e, (name, (dtype, shape))) in h.tensors.iter().zip(&expected) {
        if &e.name != name {
            return Err(dir_err(format!("expected tensor {name}, found {}", e.name)));
        }
        if e.dtype != *dtype || &e.shape != shape {
            return Err(dir_err(format!("{name}: dtype/shape {:?} {:?}, want {dtype:?} {shape:?}", e.dtype, e.shape)));
        }
        if e.length != blob_len(*dtype, shape) {
            return Err(dir_err(format!("{name}: length {} does not match shape", e.length)));
        }
        if e.offset != next {
            return Err(dir_err(format!("{name}: offset {} leaves a gap or overlap", e.offset)));
        }
        next = e.offset + e.length;
        if next > payload.len() as u64 {
            return Err(ContainerError::Truncated(format!("{name} ends at {next}, payload is {}", payload.len())));
        }
        blobs.insert(name, (e, &payload[e.offset as usize..next as usize]));
    }
    if next != payload.len() as u64 {
        return Err(dir_err(format!("{} trailing payload bytes", payload.len() as u64 - next)));
    }

    let i16s = |name: &str, want_exp: Option<i32>| -> Result<Vec<i32>, ContainerError> {
        let (e, b) = blobs[name];
        if let Some(x) = want_exp {
            if e.scale_exp != x {
                return Err(dir_err(format!("{name}: scale_exp {} (want {x})", e.scale_exp)));
            }
        }
        Ok(b.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as i32).collect())
    };
    let eps = cfg.quant.eps_fx;
    let norm = |name: &str| -> Result<RmsNormParams, ContainerError> {
        let g = i16s(name, Some(-12))?;
        RmsNormParams::new(g, eps).map_err(|e| dir_err(format!("{name}: {e}")))
    };
    let matrix = |prefix: &str| -> Result<TernaryMatrix, ContainerError> {
        let wname = format!("{prefix}.weight");
        let sname = format!("{prefix}.scale");
        let (we, wb) = blobs[wname.as_str()];
        let (se, _) = blobs[sname.as_str()];
        let scale = i16s(&sname, None)?[0];
        if !(-MAX_SCALE_FRAC..=0).contains(&se.scale_exp) || !(1..=SCALE_MAX).contains(&scale) {
            return Err(dir_err(format!("{sname}: scale {scale} with exponent {}", se.scale_exp)));
        }
        let fmt = FxFormat::new(16, (-se.scale_exp) as u32).expect("frac checked");
        TernaryMatrix::from_packed(we.shape[0], we.shape[1], wb.to_vec(), scale, fmt).map_err(|e| match e {
            KernelError::InvalidTrit { .. } => ContainerError::InvalidTrit(format!("{wname}: {e}")),
            other => dir_err(format!("{wname}: {other}")),
        })
    };

    let resid_exp = *cfg.quant.act_scales.get(quantizer::SITE_RESID).expect("validated");
    let embed_raw = i16s("embed", Some(resid_exp))?;
    let resid_fmt = FxFormat::new(16, (-resid_exp) as u32).expect("validated");
    let embed = FxTensor::new(vec![cfg.vocab_size, cfg.d], embed_raw, resid_fmt).map_err(|e| dir_err(e.to_string()))?;

    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        let p = format!("blocks.{b}");
        let bl = |n: &str| -> Result<BitLinearLayer, ContainerError> {
            Ok(BitLinearLayer::new(norm(&format!("{p}.{n}.norm"))?, matrix(&format!("{p}.{n}"))?)?)
        };
        let forget_floor = if cfg.has_forget_floor {
            Some(i16s(&format!("{p}.mlgru.forget_floor"), Some(-12))?)
        } else {
            None
        };
        blocks.push(Block {
            mlgru: MlgruLayer {
                forget: bl("mlgru.forget")?,
                cand: bl("mlgru.cand")?,
                gate: bl("mlgru.gate")?,
                output: bl("mlgru.output")?,
                out_norm: norm(&format!("{p}.mlgru.out_norm"))?,
                forget_floor,
            },
            glu: GluLayer {
                norm: norm(&format!("{p}.glu.norm"))?,
                gate: matrix(&format!("{p}.glu.gate"))?,
                up: matrix(&format!("{p}.glu.up"))?,
                down: bl("glu.down")?,
            },
        });
    }
    let final_norm = norm("final_norm")?;
    let unembed = matrix("unembed")?;
    Ok(Model::new(cfg, embed, blocks, final_norm, unembed)?)
}

/// Power-of-two scale `(raw, frac)` for a real `c > 0`, raw in `1..=127`.
pub fn quantize_scale(c: f64) -> (i32, u32) {
    let s = quantizer::choose_scale_exp(c, quantizer::WEIGHT_BITS).clamp(-MAX_SCALE_FRAC, 0);
    let frac = (-s) as u32;
    let raw = (c * 2f64.powi(frac as i32)).round_ties_even().clamp(1.0, SCALE_MAX as f64) as i32;
    (raw, frac)
}

/// Activation scale exponent for a calibrated max with one ulp of margin,
/// limited to `frac` in `0..=15`.
pub fn act_scale_exp(max_abs: f64) -> i32 {
    let bits = quantizer::ACT_BITS;
    let mut s = quantizer::choose_scale_exp(max_abs, bits);
    let qmax = ((1u64 << (bits - 1)) - 1) as f64;
    if max_abs > 0.0 && max_abs / 2f64.powi(s) > qmax - 1.0 {
        s += 1;
    }
    s.clamp(-15, 0)
}

/// Options for [`make_random_model_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct RandomModelSpec {
    pub d: usize,
    pub n_blocks: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub zero_fraction: f64,
    pub forget_floor: bool,
    /// Calibration sequences and their length.
    pub calib_seqs: usize,
    pub calib_len: usize,
}

impl RandomModelSpec {
    pub fn new(d: usize, n_blocks: usize, hidden_dim: usize, vocab_size: usize, seed: u64, zero_fraction: f64) -> Self {
        RandomModelSpec {
            d,
            n_blocks,
            hidden_dim,
            vocab_size,
            seed,
            zero_fraction,
            forget_floor: true,
            calib_seqs: 4,
            calib_len: 32,
        }
    }
}

/// Seeded random model with forget floors; see [`make_random_model_with`].
pub fn make_random_model(
    d: usize,
    n_blocks: usize,
    hidden_dim: usize,
    vocab_size: usize,
    seed: u64,
    zero_fraction: f64,
) -> Result<Model, LayerError> {
    make_random_model_with(&RandomModelSpec::new(d, n_blocks, hidden_dim, vocab_size, seed, zero_fraction))
}

struct RandMatrix {
    trits: Vec<i8>,
    raw: i32,
    frac: u32,
    rows: usize,
    cols: usize,
}

impl RandMatrix {
    fn new(rng: &mut ChaCha8Rng, rows: usize, cols: usize, zf: f64) -> Self {
        let trits: Vec<i8> = (0..rows * cols)
            .map(|_| {
                if rng.gen_bool(zf.clamp(0.0, 1.0)) {
                    0
                } else if rng.gen_bool(0.5) {
                    1
                } else {
                    -1
                }
            })
            .collect();
        // keep a unit-variance input at roughly unit scale
        let c = 1.0 / (((1.0 - zf).max(1.0 / rows as f64)) * rows as f64).sqrt();
        let (raw, frac) = quantize_scale(c);
        RandMatrix { trits, raw, frac, rows, cols }
    }

    fn oracle(&self) -> OracleLinear {
        let c = self.raw as f64 / 2f64.powi(self.frac as i32);
        OracleLinear { rows: self.rows, cols: self.cols, w: self.trits.iter().map(|&t| t as f64 * c).collect() }
    }

    fn engine(&self) -> TernaryMatrix {
        TernaryMatrix::from_trits(self.rows, self.cols, &self.trits, self.raw, FxFormat::new(16, self.frac).unwrap())
            .expect("valid random matrix")
    }
}

fn rand_gains(rng: &mut ChaCha8Rng, n: usize) -> Vec<i32> {
    (0..n).map(|_| rng.gen_range(3072..=5120)).collect()
}

fn real_gains(g: &[i32]) -> Vec<f64> {
    g.iter().map(|&v| v as f64 / 4096.0).collect()
}

/// Seeded ternary weights at the requested zero fraction, gains near 1,
/// activation scales calibrated on an exact-float pass over random tokens.
pub fn make_random_model_with(spec: &RandomModelSpec) -> Result<Model, LayerError> {
    let RandomModelSpec { d, n_blocks, hidden_dim: h, vocab_size: v, zero_fraction: zf, .. } = *spec;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cfg = ModelConfig {
        d,
        n_blocks,
        hidden_dim: h,
        vocab_size: v,
        quant: QuantScheme::default(),
        acc_preshift: default_acc_preshift(d),
        has_forget_floor: spec.forget_floor,
    };

    let embed: Vec<f64> = (0..v * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    struct RandBlock {
        mats: [RandMatrix; 7],
        norms: [Vec<i32>; 7],
        beta: Option<Vec<i32>>,
    }
    let mut rblocks = Vec::with_capacity(n_blocks);
    for b in 0..n_blocks {
        let mats = [
            RandMatrix::new(&mut rng, d, d, zf),
            RandMatrix::new(&mut rng, d, d, zf),
            RandMatrix::new(&mut rng, d, d, zf),
            RandMatrix::new(&mut rng, d, d, zf),
            RandMatrix::new(&mut rng, d, h, zf),
            RandMatrix::new(&mut rng, d, h, zf),
            RandMatrix::new(&mut rng, h, d, zf),
        ];
        // forget/cand/gate/output norms, out_norm, glu norm, glu down norm
        let norms = [
            rand_gains(&mut rng, d),
            rand_gains(&mut rng, d),
            rand_gains(&mut rng, d),
            rand_gains(&mut rng, d),
            rand_gains(&mut rng, d),
            rand_gains(&mut rng, d),
            rand_gains(&mut rng, h),
        ];
        // floors rise with depth, as in hierarchically gated recurrences
        let beta = spec.forget_floor.then(|| {
            let base = (b * 4096 / (n_blocks + 1)) as i32;
            (0..d).map(|_| (base + rng.gen_range(0..512)).min(4095)).collect()
        });
        rblocks.push(RandBlock { mats, norms, beta });
    }
    let final_norm = rand_gains(&mut rng, d);
    let unembed = RandMatrix::new(&mut rng, d, v, zf);

    let bitl = |g: &[i32], m: &RandMatrix| OracleBitLinear { gain: real_gains(g), w: m.oracle() };
    let mut om = OracleModel {
        d,
        vocab: v,
        embed: embed.clone(),
        blocks: rblocks
            .iter()
            .map(|rb| OracleBlock {
                forget: bitl(&rb.norms[0], &rb.mats[0]),
                cand: bitl(&rb.norms[1], &rb.mats[1]),
                gate: bitl(&rb.norms[2], &rb.mats[2]),
                output: bitl(&rb.norms[3], &rb.mats[3]),
                out_norm: real_gains(&rb.norms[4]),
                forget_floor: rb.beta.as_deref().map(real_gains),
                glu_norm: real_gains(&rb.norms[5]),
                glu_gate: rb.mats[4].oracle(),
                glu_up: rb.mats[5].oracle(),
                glu_down: bitl(&rb.norms[6], &rb.mats[6]),
            })
            .collect(),
        final_norm: real_gains(&final_norm),
        unembed: unembed.oracle(),
        scheme: cfg.quant.clone(),
        acc_preshift: cfg.acc_preshift,
    };

    let eps = cfg.quant.eps_fx as f64 / 4096.0;
    let mut max_abs: BTreeMap<String, f64> = BTreeMap::new();
    for _ in 0..spec.calib_seqs {
        let toks: Vec<u32> = (0..spec.calib_len).map(|_| rng.gen_range(0..v as u32)).collect();
        let out = oracle_forward(&toks, &om, &OracleConfig::exact(eps)).expect("ids in range");
        for (k, m) in out.max_abs {
            let e = max_abs.entry(k).or_insert(0.0);
            *e = e.max(m);
        }
    }
    for site in quantizer::required_sites(n_blocks) {
        let m = max_abs.get(&site).copied().unwrap_or(0.0);
        cfg.quant.act_scales.insert(site, act_scale_exp(m));
    }
    om.scheme = cfg.quant.clone();

    let resid_fmt = cfg.quant.act_format(quantizer::SITE_RESID).expect("calibrated");
    let (emb, _) = quantizer::quantize_to_fx(&embed, resid_fmt);
    let embed = FxTensor::new(vec![v, d], emb.into_data(), resid_fmt)?;
    let eps_fx = cfg.quant.eps_fx;
    let norm = |g: &[i32]| RmsNormParams::new(g.to_vec(), eps_fx);
    let mut blocks = Vec::with_capacity(n_blocks);
    for rb in rblocks {
        let bl = |i: usize| -> Result<BitLinearLayer, LayerError> {
            BitLinearLayer::new(norm(&rb.norms[i])?, rb.mats[i].engine())
        };
        blocks.push(Block {
            mlgru: MlgruLayer {
                forget: bl(0)?,
                cand: bl(1)?,
                gate: bl(2)?,
                output: bl(3)?,
                out_norm: norm(&rb.norms[4])?,
                forget_floor: rb.beta.clone(),
            },
            glu: GluLayer {
                norm: norm(&rb.norms[5])?,
                gate: rb.mats[4].engine(),
                up: rb.mats[5].engine(),
                down: BitLinearLayer::new(norm(&rb.norms[6])?, rb.mats[6].engine())?,
            },
        });
    }
    Model::new(cfg, embed, blocks, norm(&final_norm)?, unembed.engine())
}

/// All-zero ternary weights, unit gains, a fixed nonzero embedding table and
/// every activation site at 8 fractional bits.
pub fn make_zero_model(d: usize, n_blocks: usize, hidden_dim: usize, vocab_size: usize) -> Result<Model, LayerError> {
    let mut quant = QuantScheme::default();
    for s in quantizer::required_sites(n_blocks) {
        quant.act_scales.insert(s, -8);
    }
    let cfg = ModelConfig {
        d,
        n_blocks,
        hidden_dim,
        vocab_size,
        quant,
        acc_preshift: default_acc_preshift(d),
        has_forget_floor: false,
    };
    let eps = cfg.quant.eps_fx;
    let fmt = FxFormat::A16;
    let zero = |r: usize, c: usize| TernaryMatrix::from_trits(r, c, &vec![0; r * c], 1, FxFormat::new(16, 0).unwrap());
    let unit = |n: usize| RmsNormParams::unit(n, eps);
    let embed: Vec<i32> = (0..vocab_size * d).map(|i| ((i * 37) % 512) as i32 - 256).collect();
    let embed = FxTensor::new(vec![vocab_size, d], embed, fmt)?;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let bl = |r: usize, c: usize| -> Result<BitLinearLayer, LayerError> { BitLinearLayer::new(unit(r)?, zero(r, c)?) };
        blocks.push(Block {
            mlgru: MlgruLayer {
                forget: bl(d, d)?,
                cand: bl(d, d)?,
                gate: bl(d, d)?,
                output: bl(d, d)?,
                out_norm: unit(d)?,
                forget_floor: None,
            },
            glu: GluLayer { norm: unit(d)?, gate: zero(d, hidden_dim)?, up: zero(d, hidden_dim)?, down: bl(hidden_dim, d)? },
        });
    }
    Model::new(cfg, embed, blocks, unit(d)?, zero(d, vocab_size)?)
}
