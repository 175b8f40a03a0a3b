//! Encoder-decoder transformer with per-layer hooks for the contextual
//! memory. With memory disabled the model is a plain sentence-level
//! transformer; the memory path adds an Output Attention read between the
//! self-attention sublayer and the rest of each memory-bearing layer.

use std::collections::BTreeSet;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{MemoryBank, MemoryModule, Side, Truncation};
use crate::tensor::{Param, Tape, Tensor, TensorError};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("d_model {d_model} is not divisible by n_heads {n_heads}")]
    HeadsMismatch { d_model: usize, n_heads: usize },
    #[error("d_model must be even for sinusoidal encodings, got {0}")]
    OddDModel(usize),
    #[error("memory layer {layer} out of range for {n_layers} layers")]
    MemLayerOutOfRange { layer: usize, n_layers: usize },
    #[error("memory size must be at least 1")]
    ZeroMemSize,
    #[error("vocab_size {0} must cover the reserved ids (>= 4)")]
    VocabTooSmall(usize),
    #[error("dropout rate {0} must lie in [0, 1)")]
    BadDropout(f32),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown token id {id} for vocabulary of size {vocab}")]
    UnknownToken { id: u32, vocab: usize },
    #[error("sentence of {len} tokens exceeds max_sentence_len {max}")]
    SentenceTooLong { len: usize, max: usize },
    #[error("degenerate input: sentence is fully masked")]
    DegenerateInput,
    #[error("memory step mismatch: state at step {state}, expected {expected}")]
    StepMismatch { state: usize, expected: usize },
}

/// Which sides of the model carry a contextual memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemSide {
    None,
    Source,
    Target,
    Both,
}

impl MemSide {
    pub fn on_encoder(self) -> bool {
        matches!(self, MemSide::Source | MemSide::Both)
    }
    pub fn on_decoder(self) -> bool {
        matches!(self, MemSide::Target | MemSide::Both)
    }
}

impl std::str::FromStr for MemSide {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(MemSide::None),
            "src" | "source" => Ok(MemSide::Source),
            "tgt" | "target" => Ok(MemSide::Target),
            "both" => Ok(MemSide::Both),
            other => Err(format!("unknown memory side '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_sentence_len: usize,
    pub dropout_rate: f32,
    pub mem_size: usize,
    pub mem_side: MemSide,
    pub mem_layers: BTreeSet<usize>,
    pub truncation: Truncation,
    pub strict_output_attention: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale configuration: trains in minutes on one CPU while
    /// exercising every code path.
    pub fn desk_default() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            vocab_size: 64,
            max_sentence_len: 64,
            dropout_rate: 0.1,
            mem_size: 8,
            mem_side: MemSide::Both,
            mem_layers: BTreeSet::from([1]),
            truncation: Truncation::One,
            strict_output_attention: false,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d_model % self.n_heads != 0 {
            return Err(ConfigError::HeadsMismatch {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        if self.d_model % 2 != 0 {
            return Err(ConfigError::OddDModel(self.d_model));
        }
        if self.mem_size == 0 {
            return Err(ConfigError::ZeroMemSize);
        }
        if self.vocab_size < 4 {
            return Err(ConfigError::VocabTooSmall(self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ConfigError::BadDropout(self.dropout_rate));
        }
        for &layer in &self.mem_layers {
            if layer >= self.n_layers {
                return Err(ConfigError::MemLayerOutOfRange {
                    layer,
                    n_layers: self.n_layers,
                });
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Sinusoidal position table as a flat `[length, d_model]` buffer.
pub fn sinusoidal_pe(length: usize, d_model: usize) -> Result<Vec<f32>, ConfigError> {
    if d_model % 2 != 0 {
        return Err(ConfigError::OddDModel(d_model));
    }
    let mut table = vec![0.0f32; length * d_model];
    for p in 0..length {
        for i in 0..d_model / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            let angle = p as f64 * freq;
            table[p * d_model + 2 * i] = angle.sin() as f32;
            table[p * d_model + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Forward context
// ---------------------------------------------------------------------------

/// Per-pass context: tape for gradient recording, dropout state, and an
/// optional sink for memory-attention maps.
pub struct Fwd<'a> {
    pub tape: Option<&'a Tape>,
    pub dropout: f32,
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub trace: Option<&'a mut Vec<crate::memory::AttentionRecord>>,
}

impl Fwd<'static> {
    pub fn eval() -> Self {
        Fwd {
            tape: None,
            dropout: 0.0,
            rng: None,
            trace: None,
        }
    }
}

impl<'a> Fwd<'a> {
    pub fn train(tape: &'a Tape, dropout: f32, rng: &'a mut ChaCha8Rng) -> Self {
        Fwd {
            tape: Some(tape),
            dropout,
            rng: Some(rng),
            trace: None,
        }
    }

    pub fn with_trace(mut self, trace: &'a mut Vec<crate::memory::AttentionRecord>) -> Self {
        self.trace = Some(trace);
        self
    }

    pub(crate) fn dropout(&mut self, t: Tensor) -> Result<Tensor, TensorError> {
        if self.dropout <= 0.0 {
            return Ok(t);
        }
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(t);
        };
        let keep = 1.0 - self.dropout;
        let mask: Vec<f32> = (0..t.numel())
            .map(|_| {
                if rng.gen::<f32>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        t.mul_const(Rc::new(mask))
    }
}

// ---------------------------------------------------------------------------
// Parameter bundles
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct MhaParams {
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub wo: Param,
}

#[derive(Clone)]
pub struct FfnParams {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

#[derive(Clone)]
pub struct LnParams {
    pub gamma: Param,
    pub beta: Param,
}

pub struct EncoderLayerParams {
    pub self_attn: MhaParams,
    pub self_norm: LnParams,
    pub ffn: FfnParams,
    pub ffn_norm: LnParams,
}

pub struct DecoderLayerParams {
    pub self_attn: MhaParams,
    pub self_norm: LnParams,
    pub cross_attn: MhaParams,
    pub cross_norm: LnParams,
    pub ffn: FfnParams,
    pub ffn_norm: LnParams,
}

pub(crate) fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f32> {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect()
}

pub(crate) fn mha_params(
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_model: usize,
    zero_wo: bool,
) -> MhaParams {
    let mk = |rng: &mut ChaCha8Rng, name: String, zero: bool| {
        let data = if zero {
            vec![0.0; d_model * d_model]
        } else {
            xavier(rng, d_model, d_model)
        };
        Param::new(name, vec![d_model, d_model], data)
    };
    MhaParams {
        wq: mk(rng, format!("{prefix}.wq"), false),
        wk: mk(rng, format!("{prefix}.wk"), false),
        wv: mk(rng, format!("{prefix}.wv"), false),
        wo: mk(rng, format!("{prefix}.wo"), zero_wo),
    }
}

pub(crate) fn ffn_params(
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_model: usize,
    d_ffn: usize,
) -> FfnParams {
    FfnParams {
        w1: Param::new(
            format!("{prefix}.w1"),
            vec![d_model, d_ffn],
            xavier(rng, d_model, d_ffn),
        ),
        b1: Param::new(format!("{prefix}.b1"), vec![d_ffn], vec![0.0; d_ffn]),
        w2: Param::new(
            format!("{prefix}.w2"),
            vec![d_ffn, d_model],
            xavier(rng, d_ffn, d_model),
        ),
        b2: Param::new(format!("{prefix}.b2"), vec![d_model], vec![0.0; d_model]),
    }
}

pub(crate) fn ln_params(prefix: &str, d_model: usize) -> LnParams {
    LnParams {
        gamma: Param::new(format!("{prefix}.gamma"), vec![d_model], vec![1.0; d_model]),
        beta: Param::new(format!("{prefix}.beta"), vec![d_model], vec![0.0; d_model]),
    }
}

pub(crate) const LN_EPS: f32 = 1e-5;

// ---------------------------------------------------------------------------
// Attention and sublayers
// ---------------------------------------------------------------------------

/// Multi-head scaled dot-product attention. `mask` is an additive buffer of
/// length `k_len` or `q_len * k_len`; masked positions carry `-inf` and end
/// up with exactly zero weight. Returns the head-stacked probability tensor
/// `[n_heads, q_len, k_len]` when `want_probs` is set.
pub(crate) fn multi_head_attention(
    p: &MhaParams,
    n_heads: usize,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&[f32]>,
    fwd: &mut Fwd,
    want_probs: bool,
) -> Result<(Tensor, Option<Vec<f32>>), ModelError> {
    let d_model = *q.shape().last().unwrap();
    let (q_len, k_len) = (q.shape()[0], k.shape()[0]);
    if let Some(m) = mask {
        if m.len() != k_len && m.len() != q_len * k_len {
            return Err(TensorError::ShapeMismatch {
                op: "attention_mask",
                lhs: vec![q_len, k_len],
                rhs: vec![m.len()],
            }
            .into());
        }
    }
    let dh = d_model / n_heads;
    let split = |x: &Tensor, w: &Param, len: usize| -> Result<Tensor, TensorError> {
        x.matmul(&w.on(fwd.tape))?
            .reshape(vec![len, n_heads, dh])?
            .permute(&[1, 0, 2])
    };
    let qh = split(q, &p.wq, q_len)?;
    let kh = split(k, &p.wk, k_len)?;
    let vh = split(v, &p.wv, k_len)?;

    let mut scores = qh
        .matmul(&kh.transpose()?)?
        .scale(1.0 / (dh as f32).sqrt());
    if let Some(m) = mask {
        scores = scores.add_const(m)?;
    }
    let probs = scores.softmax(2)?;
    let recorded = want_probs.then(|| probs.data().to_vec());
    let probs = fwd.dropout(probs)?;

    let out = probs
        .matmul(&vh)?
        .permute(&[1, 0, 2])?
        .reshape(vec![q_len, d_model])?
        .matmul(&p.wo.on(fwd.tape))?;
    Ok((out, recorded))
}

pub(crate) fn feed_forward(p: &FfnParams, x: &Tensor, fwd: &mut Fwd) -> Result<Tensor, ModelError> {
    Ok(x.matmul(&p.w1.on(fwd.tape))?
        .add_bias(&p.b1.on(fwd.tape))?
        .relu()
        .matmul(&p.w2.on(fwd.tape))?
        .add_bias(&p.b2.on(fwd.tape))?)
}

/// Residual add followed by layer norm.
pub(crate) fn add_norm(
    residual: &Tensor,
    sublayer: Tensor,
    ln: &LnParams,
    fwd: &mut Fwd,
) -> Result<Tensor, ModelError> {
    let dropped = fwd.dropout(sublayer)?;
    Ok(residual
        .add(&dropped)?
        .layer_norm(&ln.gamma.on(fwd.tape), &ln.beta.on(fwd.tape), LN_EPS)?)
}

fn padding_mask_additive(mask: &[bool]) -> Vec<f32> {
    mask.iter()
        .map(|&ok| if ok { 0.0 } else { f32::NEG_INFINITY })
        .collect()
}

fn causal_mask_additive(len: usize) -> Vec<f32> {
    let mut m = vec![0.0f32; len * len];
    for q in 0..len {
        for k in (q + 1)..len {
            m[q * len + k] = f32::NEG_INFINITY;
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Per-sentence states leaving the encoder (or an intermediate layer).
#[derive(Debug, Clone)]
pub struct SentenceStates {
    pub h: Tensor,
    pub mask: Vec<bool>,
}

impl SentenceStates {
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Encoder output together with the self-attention states captured at each
/// memory-bearing layer (the inputs of the next memory update).
#[derive(Debug)]
pub struct EncodeOutput {
    pub states: SentenceStates,
    pub mem_inputs: Vec<(usize, Tensor)>,
    /// Raw embedding-lookup rows `[len, d_model]` (pre position encoding),
    /// kept for per-occurrence gradient attribution.
    pub embedded: Tensor,
}

/// Decoder output: next-token logits plus captured memory-update inputs.
#[derive(Debug)]
pub struct DecodeOutput {
    pub logits: Tensor,
    pub mem_inputs: Vec<(usize, Tensor)>,
    pub embedded: Tensor,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub embedding: Param,
    pub enc_layers: Vec<EncoderLayerParams>,
    pub dec_layers: Vec<DecoderLayerParams>,
    pub memory: MemoryModule,
    pe: Rc<Vec<f32>>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model, ConfigError> {
        use rand::SeedableRng;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        let emb_bound = 1.0 / (cfg.d_model as f32).sqrt();
        let embedding = Param::new(
            "embedding",
            vec![cfg.vocab_size, cfg.d_model],
            (0..cfg.vocab_size * cfg.d_model)
                .map(|_| rng.gen_range(-emb_bound..emb_bound))
                .collect(),
        );
        let enc_layers = (0..cfg.n_layers)
            .map(|l| EncoderLayerParams {
                self_attn: mha_params(&mut rng, &format!("enc.{l}.self_attn"), cfg.d_model, false),
                self_norm: ln_params(&format!("enc.{l}.self_norm"), cfg.d_model),
                ffn: ffn_params(&mut rng, &format!("enc.{l}.ffn"), cfg.d_model, cfg.d_ffn),
                ffn_norm: ln_params(&format!("enc.{l}.ffn_norm"), cfg.d_model),
            })
            .collect();
        let dec_layers = (0..cfg.n_layers)
            .map(|l| DecoderLayerParams {
                self_attn: mha_params(&mut rng, &format!("dec.{l}.self_attn"), cfg.d_model, false),
                self_norm: ln_params(&format!("dec.{l}.self_norm"), cfg.d_model),
                cross_attn: mha_params(&mut rng, &format!("dec.{l}.cross_attn"), cfg.d_model, false),
                cross_norm: ln_params(&format!("dec.{l}.cross_norm"), cfg.d_model),
                ffn: ffn_params(&mut rng, &format!("dec.{l}.ffn"), cfg.d_model, cfg.d_ffn),
                ffn_norm: ln_params(&format!("dec.{l}.ffn_norm"), cfg.d_model),
            })
            .collect();

        // Memory parameters draw from an independent stream so the
        // transformer weights are identical across memory configurations.
        let mut mem_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
        let memory = MemoryModule::new(&cfg, &mut mem_rng)?;

        let pe = Rc::new(sinusoidal_pe(cfg.max_sentence_len + 2, cfg.d_model)?);
        Ok(Model {
            cfg,
            embedding,
            enc_layers,
            dec_layers,
            memory,
            pe,
        })
    }

    /// Every learnable parameter in a stable order.
    pub fn named_params(&self) -> Vec<Param> {
        let mut out = vec![self.embedding.clone()];
        for l in &self.enc_layers {
            for p in [&l.self_attn.wq, &l.self_attn.wk, &l.self_attn.wv, &l.self_attn.wo] {
                out.push(p.clone());
            }
            out.push(l.self_norm.gamma.clone());
            out.push(l.self_norm.beta.clone());
            for p in [&l.ffn.w1, &l.ffn.b1, &l.ffn.w2, &l.ffn.b2] {
                out.push(p.clone());
            }
            out.push(l.ffn_norm.gamma.clone());
            out.push(l.ffn_norm.beta.clone());
        }
        for l in &self.dec_layers {
            for p in [&l.self_attn.wq, &l.self_attn.wk, &l.self_attn.wv, &l.self_attn.wo] {
                out.push(p.clone());
            }
            out.push(l.self_norm.gamma.clone());
            out.push(l.self_norm.beta.clone());
            for p in [&l.cross_attn.wq, &l.cross_attn.wk, &l.cross_attn.wv, &l.cross_attn.wo] {
                out.push(p.clone());
            }
            out.push(l.cross_norm.gamma.clone());
            out.push(l.cross_norm.beta.clone());
            for p in [&l.ffn.w1, &l.ffn.b1, &l.ffn.w2, &l.ffn.b2] {
                out.push(p.clone());
            }
            out.push(l.ffn_norm.gamma.clone());
            out.push(l.ffn_norm.beta.clone());
        }
        out.extend(self.memory.named_params());
        out
    }

    /// True for parameters that belong to the memory mechanism (the "newly
    /// initialized" group during finetuning).
    pub fn is_memory_param(name: &str) -> bool {
        name.starts_with("mem_enc.") || name.starts_with("mem_dec.")
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<Vec<usize>, ModelError> {
        if tokens.len() > self.cfg.max_sentence_len + 2 {
            return Err(ModelError::SentenceTooLong {
                len: tokens.len(),
                max: self.cfg.max_sentence_len + 2,
            });
        }
        tokens
            .iter()
            .map(|&id| {
                if (id as usize) < self.cfg.vocab_size {
                    Ok(id as usize)
                } else {
                    Err(ModelError::UnknownToken {
                        id,
                        vocab: self.cfg.vocab_size,
                    })
                }
            })
            .collect()
    }

    /// Returns the processed input (`emb·√d + PE`, dropout applied) together
    /// with the raw lookup rows.
    pub(crate) fn embed_sequence(
        &self,
        ids: &[usize],
        fwd: &mut Fwd,
    ) -> Result<(Tensor, Tensor), ModelError> {
        let d = self.cfg.d_model;
        let raw = self.embedding.on(fwd.tape).embed(ids)?;
        let e = raw
            .scale((d as f32).sqrt())
            .add_const(&self.pe[..ids.len() * d])?;
        Ok((fwd.dropout(e)?, raw))
    }

    /// Full encoder pass. `mem` supplies the per-layer memory read by Output
    /// Attention on layers in `mem_layers`; `None` reproduces the vanilla
    /// sentence-level encoder bit for bit.
    pub fn encoder_forward(
        &self,
        tokens: &[u32],
        mem: Option<&MemoryBank>,
        fwd: &mut Fwd,
    ) -> Result<EncodeOutput, ModelError> {
        let ids = self.check_tokens(tokens)?;
        let mask: Vec<bool> = tokens.iter().map(|&t| t != PAD_ID).collect();
        if mask.iter().all(|&m| !m) {
            return Err(ModelError::DegenerateInput);
        }
        let pad_mask = padding_mask_additive(&mask);
        let (mut x, embedded) = self.embed_sequence(&ids, fwd)?;
        let mut mem_inputs = Vec::new();
        for (l, layer) in self.enc_layers.iter().enumerate() {
            let (sa, _) = multi_head_attention(
                &layer.self_attn,
                self.cfg.n_heads,
                &x,
                &x,
                &x,
                Some(&pad_mask),
                fwd,
                false,
            )?;
            x = add_norm(&x, sa, &layer.self_norm, fwd)?;
            if self.cfg.mem_layers.contains(&l) {
                if let Some(bank) = mem {
                    mem_inputs.push((l, x.clone()));
                    x = self.memory.output_attention(Side::Encoder, l, &x, bank, fwd)?;
                }
            }
            let ff = feed_forward(&layer.ffn, &x, fwd)?;
            x = add_norm(&x, ff, &layer.ffn_norm, fwd)?;
        }
        Ok(EncodeOutput {
            states: SentenceStates { h: x, mask },
            mem_inputs,
            embedded,
        })
    }

    /// Teacher-forced decoder pass over a full target prefix; causal
    /// self-attention, optional Output Attention, cross-attention to the
    /// encoder states, feed-forward, then logits via the tied embedding.
    pub fn decoder_forward(
        &self,
        tokens: &[u32],
        enc: &SentenceStates,
        mem: Option<&MemoryBank>,
        fwd: &mut Fwd,
    ) -> Result<DecodeOutput, ModelError> {
        let ids = self.check_tokens(tokens)?;
        let len = ids.len();
        let causal = causal_mask_additive(len);
        let enc_mask = padding_mask_additive(&enc.mask);
        let (mut x, embedded) = self.embed_sequence(&ids, fwd)?;
        let mut mem_inputs = Vec::new();
        for (l, layer) in self.dec_layers.iter().enumerate() {
            let (sa, _) = multi_head_attention(
                &layer.self_attn,
                self.cfg.n_heads,
                &x,
                &x,
                &x,
                Some(&causal),
                fwd,
                false,
            )?;
            x = add_norm(&x, sa, &layer.self_norm, fwd)?;
            if self.cfg.mem_layers.contains(&l) {
                if let Some(bank) = mem {
                    mem_inputs.push((l, x.clone()));
                    x = self.memory.output_attention(Side::Decoder, l, &x, bank, fwd)?;
                }
            }
            let (ca, _) = multi_head_attention(
                &layer.cross_attn,
                self.cfg.n_heads,
                &x,
                &enc.h,
                &enc.h,
                Some(&enc_mask),
                fwd,
                false,
            )?;
            x = add_norm(&x, ca, &layer.cross_norm, fwd)?;
            let ff = feed_forward(&layer.ffn, &x, fwd)?;
            x = add_norm(&x, ff, &layer.ffn_norm, fwd)?;
        }
        let logits = x.matmul(&self.embedding.on(fwd.tape).permute(&[1, 0])?)?;
        Ok(DecodeOutput {
            logits,
            mem_inputs,
            embedded,
        })
    }
}

// ---------------------------------------------------------------------------
// Incremental decoding (inference only)
// ---------------------------------------------------------------------------

pub(crate) fn vec_mat(x: &[f32], w: &[f32], d_in: usize, d_out: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; d_out];
    for (p, &xv) in x.iter().enumerate().take(d_in) {
        if xv == 0.0 {
            continue;
        }
        let row = &w[p * d_out..(p + 1) * d_out];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xv * wv;
        }
    }
    out
}

pub(crate) fn ln_vec(x: &[f32], gamma: &[f32], beta: &[f32]) -> Vec<f32> {
    let d = x.len() as f32;
    let mean = x.iter().sum::<f32>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mean) * rstd * g + b)
        .collect()
}

pub(crate) fn softmax_vec(scores: &mut [f32]) {
    let max = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut denom = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        denom += *s;
    }
    for s in scores.iter_mut() {
        *s /= denom;
    }
}

pub(crate) struct AttnMemo {
    /// Projected keys and values laid out `[len, d_model]`, head-major use.
    pub(crate) k: Vec<f32>,
    pub(crate) v: Vec<f32>,
    pub(crate) len: usize,
    pub(crate) mask: Vec<bool>,
}

impl AttnMemo {
    pub(crate) fn attend(&self, p: &MhaParams, x: &[f32], n_heads: usize, d_model: usize) -> Vec<f32> {
        let dh = d_model / n_heads;
        let wq = p.wq.snapshot();
        let q = vec_mat(x, wq.as_ref(), d_model, d_model);
        let mut ctx = vec![0.0f32; d_model];
        let scale = 1.0 / (dh as f32).sqrt();
        let mut scores = vec![0.0f32; self.len];
        for h in 0..n_heads {
            let qh = &q[h * dh..(h + 1) * dh];
            for (pos, s) in scores.iter_mut().enumerate() {
                if !self.mask[pos] {
                    *s = f32::NEG_INFINITY;
                    continue;
                }
                let kh = &self.k[pos * d_model + h * dh..pos * d_model + (h + 1) * dh];
                *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f32>() * scale;
            }
            softmax_vec(&mut scores);
            let ch = &mut ctx[h * dh..(h + 1) * dh];
            for (pos, &w) in scores.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let vh = &self.v[pos * d_model + h * dh..pos * d_model + (h + 1) * dh];
                for (c, &vv) in ch.iter_mut().zip(vh) {
                    *c += w * vv;
                }
            }
        }
        let wo = p.wo.snapshot();
        vec_mat(&ctx, wo.as_ref(), d_model, d_model)
    }
}

struct DecLayerState {
    /// Growing self-attention key/value cache, `[pos, d_model]` each.
    self_k: Vec<f32>,
    self_v: Vec<f32>,
    cross: AttnMemo,
    mem: Option<AttnMemo>,
}

impl Clone for DecLayerState {
    fn clone(&self) -> Self {
        DecLayerState {
            self_k: self.self_k.clone(),
            self_v: self.self_v.clone(),
            cross: AttnMemo {
                k: self.cross.k.clone(),
                v: self.cross.v.clone(),
                len: self.cross.len,
                mask: self.cross.mask.clone(),
            },
            mem: self.mem.as_ref().map(|m| AttnMemo {
                k: m.k.clone(),
                v: m.v.clone(),
                len: m.len,
                mask: m.mask.clone(),
            }),
        }
    }
}

/// Token-at-a-time decoder with per-sentence key/value caches. Memories stay
/// frozen for the whole sentence; nothing is carried across sentences except
/// through [`MemoryBank`].
pub struct IncrementalDecoder<'m> {
    model: &'m Model,
    layers: Vec<DecLayerState>,
    pos: usize,
}

impl Clone for IncrementalDecoder<'_> {
    fn clone(&self) -> Self {
        IncrementalDecoder {
            model: self.model,
            layers: self.layers.clone(),
            pos: self.pos,
        }
    }
}

impl<'m> IncrementalDecoder<'m> {
    pub fn new(
        model: &'m Model,
        enc: &SentenceStates,
        mem: Option<&MemoryBank>,
    ) -> Result<Self, ModelError> {
        let cfg = &model.cfg;
        let d = cfg.d_model;
        let enc_h = enc.h.data();
        let enc_len = enc.mask.len();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (l, layer) in model.dec_layers.iter().enumerate() {
            let ck = layer.cross_attn.wk.snapshot();
            let cv = layer.cross_attn.wv.snapshot();
            let mut k = vec![0.0f32; enc_len * d];
            let mut v = vec![0.0f32; enc_len * d];
            for pos in 0..enc_len {
                let row = &enc_h[pos * d..(pos + 1) * d];
                k[pos * d..(pos + 1) * d].copy_from_slice(&vec_mat(row, ck.as_ref(), d, d));
                v[pos * d..(pos + 1) * d].copy_from_slice(&vec_mat(row, cv.as_ref(), d, d));
            }
            let mem_memo = match mem {
                Some(bank) if cfg.mem_layers.contains(&l) => {
                    model.memory.decode_memo(Side::Decoder, l, bank, d)
                }
                _ => None,
            };
            layers.push(DecLayerState {
                self_k: Vec::new(),
                self_v: Vec::new(),
                cross: AttnMemo {
                    k,
                    v,
                    len: enc_len,
                    mask: enc.mask.clone(),
                },
                mem: mem_memo,
            });
        }
        Ok(IncrementalDecoder {
            model,
            layers,
            pos: 0,
        })
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    /// Feeds one token and returns the logits for the next position.
    pub fn step(&mut self, token: u32) -> Result<Vec<f32>, ModelError> {
        let cfg = &self.model.cfg;
        let d = cfg.d_model;
        let n_heads = cfg.n_heads;
        let dh = cfg.head_dim();
        if self.pos >= cfg.max_sentence_len + 2 {
            return Err(ModelError::SentenceTooLong {
                len: self.pos + 1,
                max: cfg.max_sentence_len + 2,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::UnknownToken {
                id: token,
                vocab: cfg.vocab_size,
            });
        }
        let emb = self.model.embedding.snapshot();
        let scale = (d as f32).sqrt();
        let mut x: Vec<f32> = emb.as_ref()[token as usize * d..(token as usize + 1) * d]
            .iter()
            .zip(&self.model.pe[self.pos * d..(self.pos + 1) * d])
            .map(|(e, pe)| e * scale + pe)
            .collect();

        for (l, layer) in self.model.dec_layers.iter().enumerate() {
            let state = &mut self.layers[l];
            let p = &layer.self_attn;
            let wk = p.wk.snapshot();
            let wv = p.wv.snapshot();
            state.self_k.extend(vec_mat(&x, wk.as_ref(), d, d));
            state.self_v.extend(vec_mat(&x, wv.as_ref(), d, d));
            let cached = self.pos + 1;
            let wq = p.wq.snapshot();
            let q = vec_mat(&x, wq.as_ref(), d, d);
            let mut ctx = vec![0.0f32; d];
            let sscale = 1.0 / (dh as f32).sqrt();
            let mut scores = vec![0.0f32; cached];
            for h in 0..n_heads {
                let qh = &q[h * dh..(h + 1) * dh];
                for (pos, s) in scores.iter_mut().enumerate() {
                    let kh = &state.self_k[pos * d + h * dh..pos * d + (h + 1) * dh];
                    *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f32>() * sscale;
                }
                softmax_vec(&mut scores);
                let ch = &mut ctx[h * dh..(h + 1) * dh];
                for (pos, &w) in scores.iter().enumerate() {
                    let vh = &state.self_v[pos * d + h * dh..pos * d + (h + 1) * dh];
                    for (c, &vv) in ch.iter_mut().zip(vh) {
                        *c += w * vv;
                    }
                }
            }
            let wo = p.wo.snapshot();
            let sa = vec_mat(&ctx, wo.as_ref(), d, d);
            let res: Vec<f32> = x.iter().zip(&sa).map(|(a, b)| a + b).collect();
            let (g, b) = (layer.self_norm.gamma.snapshot(), layer.self_norm.beta.snapshot());
            x = ln_vec(&res, g.as_ref(), b.as_ref());

            if let Some(memo) = &state.mem {
                x = self
                    .model
                    .memory
                    .output_attention_step(Side::Decoder, l, &x, memo, n_heads, d);
            }

            let ca = state.cross.attend(&layer.cross_attn, &x, n_heads, d);
            let res: Vec<f32> = x.iter().zip(&ca).map(|(a, b)| a + b).collect();
            let (g, b) = (layer.cross_norm.gamma.snapshot(), layer.cross_norm.beta.snapshot());
            x = ln_vec(&res, g.as_ref(), b.as_ref());

            let w1 = layer.ffn.w1.snapshot();
            let b1 = layer.ffn.b1.snapshot();
            let w2 = layer.ffn.w2.snapshot();
            let b2 = layer.ffn.b2.snapshot();
            let mut hidden = vec_mat(&x, w1.as_ref(), d, cfg.d_ffn);
            for (h, bias) in hidden.iter_mut().zip(b1.as_ref()) {
                *h = (*h + bias).max(0.0);
            }
            let mut ff = vec_mat(&hidden, w2.as_ref(), cfg.d_ffn, d);
            for (f, bias) in ff.iter_mut().zip(b2.as_ref()) {
                *f += bias;
            }
            let res: Vec<f32> = x.iter().zip(&ff).map(|(a, b)| a + b).collect();
            let (g, b) = (layer.ffn_norm.gamma.snapshot(), layer.ffn_norm.beta.snapshot());
            x = ln_vec(&res, g.as_ref(), b.as_ref());
        }
        self.pos += 1;

        // logits via the tied embedding
        let vocab = cfg.vocab_size;
        let mut logits = vec![0.0f32; vocab];
        let table = emb.as_ref();
        for (tok, logit) in logits.iter_mut().enumerate() {
            let row = &table[tok * d..(tok + 1) * d];
            *logit = row.iter().zip(&x).map(|(a, b)| a * b).sum();
        }
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::Truncation;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            vocab_size: 24,
            max_sentence_len: 16,
            dropout_rate: 0.0,
            mem_size: 4,
            mem_side: MemSide::Both,
            mem_layers: BTreeSet::from([1]),
            truncation: Truncation::One,
            strict_output_attention: false,
            seed: 9,
        }
    }

    #[test]
    fn pe_row_zero_alternates_zero_one() {
        let pe = sinusoidal_pe(4, 8).unwrap();
        for i in 0..4 {
            assert_eq!(pe[2 * i], 0.0);
            assert_eq!(pe[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn pe_matches_direct_formula() {
        let pe = sinusoidal_pe(10, 8).unwrap();
        assert!((pe[8] - 0.841471f32).abs() < 1e-6, "sin(1) at [1,0]");
        for p in 0..10usize {
            for i in 0..4usize {
                let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / 8.0);
                let want_sin = ((p as f64) * freq).sin() as f32;
                let want_cos = ((p as f64) * freq).cos() as f32;
                assert!((pe[p * 8 + 2 * i] - want_sin).abs() < 1e-6);
                assert!((pe[p * 8 + 2 * i + 1] - want_cos).abs() < 1e-6);
                assert!(pe[p * 8 + 2 * i].abs() <= 1.0);
            }
        }
    }

    #[test]
    fn pe_rejects_odd_d_model() {
        assert!(sinusoidal_pe(4, 7).is_err());
    }

    #[test]
    fn attention_single_key_passes_value_through() {
        let d = 8;
        let eye: Vec<f32> = (0..d * d)
            .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
            .collect();
        let p = MhaParams {
            wq: Param::new("wq", vec![d, d], eye.clone()),
            wk: Param::new("wk", vec![d, d], eye.clone()),
            wv: Param::new("wv", vec![d, d], eye.clone()),
            wo: Param::new("wo", vec![d, d], eye.clone()),
        };
        let q = Tensor::from_vec(vec![1, d], vec![0.25; d]).unwrap();
        let kv = Tensor::from_vec(vec![1, d], (0..d).map(|v| v as f32).collect()).unwrap();
        let mut fwd = Fwd::eval();
        let (out, probs) =
            multi_head_attention(&p, 2, &q, &kv, &kv, None, &mut fwd, true).unwrap();
        for (o, want) in out.data().iter().zip(kv.data()) {
            assert!((o - want).abs() < 1e-6);
        }
        assert!(probs.unwrap().iter().all(|&w| (w - 1.0).abs() < 1e-6));
    }

    #[test]
    fn attention_two_identical_keys_average_values() {
        let d = 4;
        let eye: Vec<f32> = (0..d * d)
            .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
            .collect();
        let p = MhaParams {
            wq: Param::new("wq", vec![d, d], eye.clone()),
            wk: Param::new("wk", vec![d, d], eye.clone()),
            wv: Param::new("wv", vec![d, d], eye.clone()),
            wo: Param::new("wo", vec![d, d], eye.clone()),
        };
        let q = Tensor::from_vec(vec![1, d], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let k = Tensor::from_vec(vec![2, d], vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let v = Tensor::from_vec(vec![2, d], vec![1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut fwd = Fwd::eval();
        let (out, _) = multi_head_attention(&p, 1, &q, &k, &v, None, &mut fwd, false).unwrap();
        let want = [2.0, 3.0, 4.0, 5.0];
        for (o, w) in out.data().iter().zip(&want) {
            assert!((o - w).abs() < 1e-5);
        }
    }

    /// Unbatched single-head oracle computed with explicit loops.
    #[test]
    fn attention_matches_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let d = 6;
        let (q_len, k_len) = (3, 5);
        let rnd = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f32> {
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let p = MhaParams {
            wq: Param::new("wq", vec![d, d], rnd(&mut rng, d * d)),
            wk: Param::new("wk", vec![d, d], rnd(&mut rng, d * d)),
            wv: Param::new("wv", vec![d, d], rnd(&mut rng, d * d)),
            wo: Param::new("wo", vec![d, d], rnd(&mut rng, d * d)),
        };
        let q = Tensor::from_vec(vec![q_len, d], rnd(&mut rng, q_len * d)).unwrap();
        let kv = Tensor::from_vec(vec![k_len, d], rnd(&mut rng, k_len * d)).unwrap();
        let mut fwd = Fwd::eval();
        let (out, _) = multi_head_attention(&p, 1, &q, &kv, &kv, None, &mut fwd, false).unwrap();

        // oracle
        let mat = |x: &[f32], w: &[f32], rows: usize| -> Vec<f32> {
            let mut out = vec![0.0; rows * d];
            for r in 0..rows {
                for c in 0..d {
                    for i in 0..d {
                        out[r * d + c] += x[r * d + i] * w[i * d + c];
                    }
                }
            }
            out
        };
        let qp = mat(q.data(), &p.wq.value(), q_len);
        let kp = mat(kv.data(), &p.wk.value(), k_len);
        let vp = mat(kv.data(), &p.wv.value(), k_len);
        let mut expect = vec![0.0f32; q_len * d];
        for r in 0..q_len {
            let mut scores = vec![0.0f32; k_len];
            for (c, s) in scores.iter_mut().enumerate() {
                for i in 0..d {
                    *s += qp[r * d + i] * kp[c * d + i];
                }
                *s /= (d as f32).sqrt();
            }
            softmax_vec(&mut scores);
            let mut ctx = vec![0.0f32; d];
            for (c, &w) in scores.iter().enumerate() {
                for i in 0..d {
                    ctx[i] += w * vp[c * d + i];
                }
            }
            for cdx in 0..d {
                for i in 0..d {
                    expect[r * d + cdx] += ctx[i] * p.wo.value()[i * d + cdx];
                }
            }
        }
        for (got, want) in out.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let d = 4;
        let p = mha_params(
            &mut rand::SeedableRng::seed_from_u64(3),
            "m",
            d,
            false,
        );
        let q = Tensor::from_vec(vec![2, d], vec![0.3; 2 * d]).unwrap();
        let kv = Tensor::from_vec(vec![3, d], vec![0.7; 3 * d]).unwrap();
        let mask = vec![0.0, f32::NEG_INFINITY, 0.0];
        let mut fwd = Fwd::eval();
        let (_, probs) =
            multi_head_attention(&p, 2, &q, &kv, &kv, Some(&mask), &mut fwd, true).unwrap();
        let probs = probs.unwrap();
        // [h, q, k] with k extent 3: middle key always exactly zero
        for chunk in probs.chunks(3) {
            assert_eq!(chunk[1], 0.0);
            assert!((chunk[0] + chunk[2] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_mask_length_checked() {
        let d = 4;
        let p = mha_params(&mut rand::SeedableRng::seed_from_u64(3), "m", d, false);
        let q = Tensor::from_vec(vec![2, d], vec![0.3; 2 * d]).unwrap();
        let kv = Tensor::from_vec(vec![3, d], vec![0.7; 3 * d]).unwrap();
        let mask = vec![0.0, 0.0];
        let mut fwd = Fwd::eval();
        assert!(multi_head_attention(&p, 2, &q, &kv, &kv, Some(&mask), &mut fwd, false).is_err());
    }

    #[test]
    fn encoder_output_shape_and_unknown_token() {
        let model = Model::new(tiny_cfg()).unwrap();
        let mut fwd = Fwd::eval();
        let out = model
            .encoder_forward(&[4, 5, 6, EOS_ID], None, &mut fwd)
            .unwrap();
        assert_eq!(out.states.h.shape(), &[4, 16]);
        assert!(out.mem_inputs.is_empty());

        let err = model.encoder_forward(&[99], None, &mut fwd).unwrap_err();
        assert!(matches!(err, ModelError::UnknownToken { id: 99, .. }));
    }

    #[test]
    fn pad_positions_do_not_leak_into_valid_outputs() {
        let model = Model::new(tiny_cfg()).unwrap();
        let mut fwd = Fwd::eval();
        let a = model
            .encoder_forward(&[4, 5, 6, EOS_ID, PAD_ID, PAD_ID], None, &mut fwd)
            .unwrap();
        // changing the embedding that a pad position looks up must not move
        // any non-pad output; swap pad slots for a different (content) id is
        // not allowed, so instead compare against a shorter unpadded pass
        let b = model
            .encoder_forward(&[4, 5, 6, EOS_ID], None, &mut fwd)
            .unwrap();
        let d = 16;
        for pos in 0..4 {
            for c in 0..d {
                let x = a.states.h.data()[pos * d + c];
                let y = b.states.h.data()[pos * d + c];
                assert!((x - y).abs() < 1e-5, "pos {pos} col {c}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn decoder_causality_holds() {
        let model = Model::new(tiny_cfg()).unwrap();
        let mut fwd = Fwd::eval();
        let enc = model
            .encoder_forward(&[4, 5, EOS_ID], None, &mut fwd)
            .unwrap();
        let full = model
            .decoder_forward(&[BOS_ID, 7, 8, 9], &enc.states, None, &mut fwd)
            .unwrap();
        let changed = model
            .decoder_forward(&[BOS_ID, 7, 10, 11], &enc.states, None, &mut fwd)
            .unwrap();
        let vocab = model.cfg.vocab_size;
        for pos in 0..2 {
            for t in 0..vocab {
                assert_eq!(
                    full.logits.data()[pos * vocab + t],
                    changed.logits.data()[pos * vocab + t],
                    "position {pos} must not see future tokens"
                );
            }
        }
    }

    /// Greedy decode via the incremental path must match argmax over the
    /// full-recompute decoder exactly.
    #[test]
    fn incremental_matches_full_recompute() {
        let mut cfg = tiny_cfg();
        cfg.n_layers = 1;
        cfg.mem_layers = BTreeSet::from([0]);
        cfg.mem_side = MemSide::None;
        let model = Model::new(cfg).unwrap();
        let mut fwd = Fwd::eval();
        let enc = model
            .encoder_forward(&[4, 9, 11, EOS_ID], None, &mut fwd)
            .unwrap();

        let mut inc = IncrementalDecoder::new(&model, &enc.states, None).unwrap();
        let mut inc_tokens = vec![BOS_ID];
        for _ in 0..6 {
            let logits = inc.step(*inc_tokens.last().unwrap()).unwrap();
            let next = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0 as u32;
            inc_tokens.push(next);
        }

        let mut full_tokens = vec![BOS_ID];
        for _ in 0..6 {
            let out = model
                .decoder_forward(&full_tokens, &enc.states, None, &mut fwd)
                .unwrap();
            let vocab = model.cfg.vocab_size;
            let last = full_tokens.len() - 1;
            let row = &out.logits.data()[last * vocab..(last + 1) * vocab];
            let next = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0 as u32;
            full_tokens.push(next);
        }
        assert_eq!(inc_tokens, full_tokens);
    }
}
