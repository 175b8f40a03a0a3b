//! The contextual memory: a fixed `[d_M, d_model]` matrix per side and
//! memory-bearing layer, carried across the sentences of a document.
//!
//! Per sentence step the memory is refreshed by Update Attention (memory rows
//! query the sentence states, then a feed-forward block, both with AddNorm)
//! and read by Output Attention (sentence positions query the memory rows).
//! A positional bias over the memory rows is added once per update. Gradient
//! history across steps is bounded by [`Truncation`]: the incoming memory is
//! detached at each update, and with `Zero` the outgoing memory is detached
//! too, so no sentence ever sees gradients from more than one step back.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Param, Tape, Tensor};
use crate::transformer::{
    add_norm, feed_forward, ffn_params, ln_params, ln_vec, mha_params, multi_head_attention,
    sinusoidal_pe, vec_mat, AttnMemo, ConfigError, FfnParams, Fwd, LnParams, MhaParams, Model,
    ModelConfig, ModelError, SentenceStates,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Encoder,
    Decoder,
}

impl Side {
    pub fn tag(self) -> &'static str {
        match self {
            Side::Encoder => "encoder",
            Side::Decoder => "decoder",
        }
    }
}

/// How much gradient history the memory recurrence keeps.
///
/// * `Zero`: the memory handed to the next sentence is already detached.
/// * `One`: each update detaches its incoming memory, so a loss reaches the
///   previous sentence but nothing older.
/// * `Full`: no detaching at all (analysis mode; unbounded tape).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truncation {
    Zero,
    One,
    Full,
}

impl std::str::FromStr for Truncation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "0" => Ok(Truncation::Zero),
            "1" => Ok(Truncation::One),
            "full" => Ok(Truncation::Full),
            other => Err(format!("truncation window must be 0, 1 or full, got '{other}'")),
        }
    }
}

/// Attention map captured from one Update or Output Attention call.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionRecord {
    pub side: Side,
    pub layer: usize,
    pub kind: AttnKind,
    pub step: usize,
    pub n_heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// Row-major `[n_heads, q_len, k_len]`, pre-dropout probabilities.
    pub weights: Vec<f32>,
    pub q_labels: Vec<String>,
    pub k_labels: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnKind {
    Update,
    Output,
}

impl AttentionRecord {
    /// Head-averaged `[q_len, k_len]` map.
    pub fn mean_weights(&self) -> Vec<f32> {
        let qk = self.q_len * self.k_len;
        let mut out = vec![0.0f32; qk];
        for h in 0..self.n_heads {
            for (o, w) in out.iter_mut().zip(&self.weights[h * qk..(h + 1) * qk]) {
                *o += w / self.n_heads as f32;
            }
        }
        out
    }
}

/// Memory matrix for one side and layer at sentence step `t`.
#[derive(Clone)]
pub struct MemoryState {
    pub m: Tensor,
    pub step: usize,
    pub side: Side,
}

impl MemoryState {
    pub fn detached(&self) -> bool {
        !self.m.is_tracked()
    }
}

/// Learnable pieces of the memory mechanism for one (side, layer) slot.
pub struct MemoryParams {
    pub initial_m: Param,
    pub update_attn: MhaParams,
    pub update_norm1: LnParams,
    pub update_ffn: FfnParams,
    pub update_norm2: LnParams,
    pub output_attn: MhaParams,
    pub output_norm: LnParams,
}

impl MemoryParams {
    fn new(rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig) -> Self {
        use rand::Rng;
        let bound = 1.0 / (cfg.d_model as f32).sqrt();
        let initial_m = Param::new(
            format!("{prefix}.initial_m"),
            vec![cfg.mem_size, cfg.d_model],
            (0..cfg.mem_size * cfg.d_model)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
        );
        MemoryParams {
            initial_m,
            update_attn: mha_params(rng, &format!("{prefix}.update_attn"), cfg.d_model, false),
            update_norm1: ln_params(&format!("{prefix}.update_norm1"), cfg.d_model),
            update_ffn: ffn_params(rng, &format!("{prefix}.update_ffn"), cfg.d_model, cfg.d_ffn),
            update_norm2: ln_params(&format!("{prefix}.update_norm2"), cfg.d_model),
            // Zero output projection: the memory read starts inert and the
            // finetuned model begins at the sentence-level baseline.
            output_attn: mha_params(rng, &format!("{prefix}.output_attn"), cfg.d_model, true),
            output_norm: ln_params(&format!("{prefix}.output_norm"), cfg.d_model),
        }
    }

    fn named_params(&self) -> Vec<Param> {
        let mut out = vec![self.initial_m.clone()];
        for p in [
            &self.update_attn.wq,
            &self.update_attn.wk,
            &self.update_attn.wv,
            &self.update_attn.wo,
        ] {
            out.push(p.clone());
        }
        out.push(self.update_norm1.gamma.clone());
        out.push(self.update_norm1.beta.clone());
        for p in [
            &self.update_ffn.w1,
            &self.update_ffn.b1,
            &self.update_ffn.w2,
            &self.update_ffn.b2,
        ] {
            out.push(p.clone());
        }
        out.push(self.update_norm2.gamma.clone());
        out.push(self.update_norm2.beta.clone());
        for p in [
            &self.output_attn.wq,
            &self.output_attn.wk,
            &self.output_attn.wv,
            &self.output_attn.wo,
        ] {
            out.push(p.clone());
        }
        out.push(self.output_norm.gamma.clone());
        out.push(self.output_norm.beta.clone());
        out
    }
}

/// All memory parameters of a model: independent per side and per layer.
pub struct MemoryModule {
    enc: BTreeMap<usize, MemoryParams>,
    dec: BTreeMap<usize, MemoryParams>,
    mem_pe: Vec<f32>,
    n_heads: usize,
    mem_size: usize,
    strict_output: bool,
}

impl MemoryModule {
    pub(crate) fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, ConfigError> {
        let mut enc = BTreeMap::new();
        let mut dec = BTreeMap::new();
        if cfg.mem_side.on_encoder() {
            for &layer in &cfg.mem_layers {
                enc.insert(layer, MemoryParams::new(rng, &format!("mem_enc.{layer}"), cfg));
            }
        }
        if cfg.mem_side.on_decoder() {
            for &layer in &cfg.mem_layers {
                dec.insert(layer, MemoryParams::new(rng, &format!("mem_dec.{layer}"), cfg));
            }
        }
        Ok(MemoryModule {
            enc,
            dec,
            mem_pe: sinusoidal_pe(cfg.mem_size, cfg.d_model)?,
            n_heads: cfg.n_heads,
            mem_size: cfg.mem_size,
            strict_output: cfg.strict_output_attention,
        })
    }

    pub fn side_layers(&self, side: Side) -> impl Iterator<Item = usize> + '_ {
        match side {
            Side::Encoder => self.enc.keys().copied(),
            Side::Decoder => self.dec.keys().copied(),
        }
    }

    pub fn has_side(&self, side: Side) -> bool {
        match side {
            Side::Encoder => !self.enc.is_empty(),
            Side::Decoder => !self.dec.is_empty(),
        }
    }

    pub fn params(&self, side: Side, layer: usize) -> &MemoryParams {
        let map = match side {
            Side::Encoder => &self.enc,
            Side::Decoder => &self.dec,
        };
        map.get(&layer)
            .unwrap_or_else(|| panic!("no memory params for {:?} layer {layer}", side))
    }

    pub fn named_params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        for p in self.enc.values() {
            out.extend(p.named_params());
        }
        for p in self.dec.values() {
            out.extend(p.named_params());
        }
        out
    }

    /// Adds the sinusoidal row bias to the memory. Applied exactly once per
    /// update phase, immediately before Update Attention.
    pub fn add_memory_pe(&self, m: &Tensor) -> Result<Tensor, ModelError> {
        Ok(m.add_const(&self.mem_pe)?)
    }

    /// One memory refresh: AddNorm(FFN(AddNorm(MHA(M, h, h)))) with the
    /// sentence padding mask on the keys. Shape `[d_M, d_model]` regardless
    /// of sentence length.
    pub fn update_attention(
        &self,
        side: Side,
        layer: usize,
        m: &Tensor,
        h: &SentenceStates,
        step: usize,
        fwd: &mut Fwd,
    ) -> Result<Tensor, ModelError> {
        if h.valid_len() == 0 {
            return Err(ModelError::DegenerateInput);
        }
        let p = self.params(side, layer);
        let mask: Vec<f32> = h
            .mask
            .iter()
            .map(|&ok| if ok { 0.0 } else { f32::NEG_INFINITY })
            .collect();
        let want_probs = fwd.trace.is_some();
        let (attn, probs) = multi_head_attention(
            &p.update_attn,
            self.n_heads,
            m,
            &h.h,
            &h.h,
            Some(&mask),
            fwd,
            want_probs,
        )?;
        if let (Some(trace), Some(weights)) = (fwd.trace.as_deref_mut(), probs) {
            trace.push(AttentionRecord {
                side,
                layer,
                kind: AttnKind::Update,
                step,
                n_heads: self.n_heads,
                q_len: self.mem_size,
                k_len: h.mask.len(),
                weights,
                q_labels: Vec::new(),
                k_labels: Vec::new(),
            });
        }
        let m1 = add_norm(m, attn, &p.update_norm1, fwd)?;
        let ff = feed_forward(&p.update_ffn, &m1, fwd)?;
        add_norm(&m1, ff, &p.update_norm2, fwd)
    }

    /// Reads the memory into the sentence state: MHA(h, M, M) wrapped in a
    /// residual AddNorm, or the bare attention output in strict mode.
    pub fn output_attention(
        &self,
        side: Side,
        layer: usize,
        h: &Tensor,
        bank: &MemoryBank,
        fwd: &mut Fwd,
    ) -> Result<Tensor, ModelError> {
        let state = bank
            .state(layer)
            .unwrap_or_else(|| panic!("memory bank missing layer {layer}"));
        let p = self.params(side, layer);
        let want_probs = fwd.trace.is_some();
        let (attn, probs) = multi_head_attention(
            &p.output_attn,
            self.n_heads,
            h,
            &state.m,
            &state.m,
            None,
            fwd,
            want_probs,
        )?;
        if let (Some(trace), Some(weights)) = (fwd.trace.as_deref_mut(), probs) {
            trace.push(AttentionRecord {
                side,
                layer,
                kind: AttnKind::Output,
                step: state.step,
                n_heads: self.n_heads,
                q_len: h.shape()[0],
                k_len: self.mem_size,
                weights,
                q_labels: Vec::new(),
                k_labels: Vec::new(),
            });
        }
        if self.strict_output {
            Ok(attn)
        } else {
            add_norm(h, attn, &p.output_norm, fwd)
        }
    }

    /// Advances one memory slot by one sentence. An empty (fully masked)
    /// sentence skips the refresh and only advances the step counter.
    pub fn step_memory(
        &self,
        side: Side,
        layer: usize,
        mem: &MemoryState,
        h: &SentenceStates,
        trunc: Truncation,
        fwd: &mut Fwd,
    ) -> Result<MemoryState, ModelError> {
        if h.valid_len() == 0 {
            return Ok(MemoryState {
                m: mem.m.clone(),
                step: mem.step + 1,
                side,
            });
        }
        let m_in = match trunc {
            Truncation::Full => mem.m.clone(),
            Truncation::Zero | Truncation::One => mem.m.detach(),
        };
        let m_pe = self.add_memory_pe(&m_in)?;
        let m_next = self.update_attention(side, layer, &m_pe, h, mem.step, fwd)?;
        let m_out = match trunc {
            Truncation::Zero => m_next.detach(),
            Truncation::One | Truncation::Full => m_next,
        };
        Ok(MemoryState {
            m: m_out,
            step: mem.step + 1,
            side,
        })
    }

    /// Projected memory keys/values for the raw incremental-decode path.
    pub(crate) fn decode_memo(
        &self,
        side: Side,
        layer: usize,
        bank: &MemoryBank,
        d: usize,
    ) -> Option<AttnMemo> {
        let state = bank.state(layer)?;
        let p = self.params(side, layer);
        let m = state.m.data();
        let wk = p.output_attn.wk.snapshot();
        let wv = p.output_attn.wv.snapshot();
        let rows = self.mem_size;
        let mut k = vec![0.0f32; rows * d];
        let mut v = vec![0.0f32; rows * d];
        for r in 0..rows {
            let row = &m[r * d..(r + 1) * d];
            k[r * d..(r + 1) * d].copy_from_slice(&vec_mat(row, wk.as_ref(), d, d));
            v[r * d..(r + 1) * d].copy_from_slice(&vec_mat(row, wv.as_ref(), d, d));
        }
        Some(AttnMemo {
            k,
            v,
            len: rows,
            mask: vec![true; rows],
        })
    }

    /// Raw-path Output Attention for a single position.
    pub(crate) fn output_attention_step(
        &self,
        side: Side,
        layer: usize,
        x: &[f32],
        memo: &AttnMemo,
        n_heads: usize,
        d: usize,
    ) -> Vec<f32> {
        let p = self.params(side, layer);
        let attn = memo.attend(&p.output_attn, x, n_heads, d);
        if self.strict_output {
            attn
        } else {
            let res: Vec<f32> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
            let g = p.output_norm.gamma.snapshot();
            let b = p.output_norm.beta.snapshot();
            ln_vec(&res, g.as_ref(), b.as_ref())
        }
    }
}

/// The memory states of one side for all memory-bearing layers, owned by one
/// document's translation stream.
pub struct MemoryBank {
    pub side: Side,
    states: BTreeMap<usize, MemoryState>,
    step: usize,
}

impl MemoryBank {
    /// Fresh per-document memory: every slot starts from its learned
    /// `initial_m`, tape-connected when a tape is given so the initial
    /// memory itself trains.
    pub fn reset(model: &Model, side: Side, tape: Option<&Tape>) -> MemoryBank {
        let mut states = BTreeMap::new();
        for layer in model.memory.side_layers(side) {
            let p = model.memory.params(side, layer);
            states.insert(
                layer,
                MemoryState {
                    m: p.initial_m.on(tape),
                    step: 0,
                    side,
                },
            );
        }
        MemoryBank {
            side,
            states,
            step: 0,
        }
    }

    pub fn state(&self, layer: usize) -> Option<&MemoryState> {
        self.states.get(&layer)
    }

    pub fn states(&self) -> impl Iterator<Item = (&usize, &MemoryState)> {
        self.states.iter()
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Steps every slot with its captured sentence states using the model's
    /// configured truncation.
    pub fn step(
        &mut self,
        model: &Model,
        mem_inputs: &[(usize, Tensor)],
        mask: &[bool],
        fwd: &mut Fwd,
    ) -> Result<(), ModelError> {
        self.step_with_truncation(model, mem_inputs, mask, model.cfg.truncation, fwd)
    }

    /// Steps every slot with its captured sentence states. `mem_inputs` is
    /// the `(layer, h)` list the forward pass captured; `mask` the sentence
    /// padding mask.
    pub fn step_with_truncation(
        &mut self,
        model: &Model,
        mem_inputs: &[(usize, Tensor)],
        mask: &[bool],
        trunc: Truncation,
        fwd: &mut Fwd,
    ) -> Result<(), ModelError> {
        for (layer, h) in mem_inputs {
            let state = self
                .states
                .get(layer)
                .unwrap_or_else(|| panic!("memory bank missing layer {layer}"));
            if state.step != self.step {
                return Err(ModelError::StepMismatch {
                    state: state.step,
                    expected: self.step,
                });
            }
            let states = SentenceStates {
                h: h.clone(),
                mask: mask.to_vec(),
            };
            let next = model
                .memory
                .step_memory(self.side, *layer, state, &states, trunc, fwd)?;
            self.states.insert(*layer, next);
        }
        self.step += 1;
        Ok(())
    }
}
