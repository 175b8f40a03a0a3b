//! Diagnostics: attention-entropy information gain, gradient attribution
//! over sentence distance, attention-map export, entity dependency tracing,
//! and the decoding complexity benchmark.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{iterate_document, Document, EntityLayout};
use crate::memory::{AttentionRecord, AttnKind, MemoryBank, Side, Truncation};
use crate::tensor::{backward, peak_values, reset_peak_values, Tape};
use crate::training::{cross_entropy_smoothed, DocSession};
use crate::transformer::{
    Fwd, IncrementalDecoder, MemSide, Model, ModelConfig, ModelError, BOS_ID, EOS_ID,
};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("model configurations differ: {0}")]
    ConfigMismatch(String),
    #[error("analysis needs at least one document")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Runs one document teacher-forced and returns every Update/Output
/// Attention map in encounter order.
pub fn collect_attention_maps(
    model: &Model,
    doc: &Document,
) -> Result<Vec<AttentionRecord>, AnalysisError> {
    let mut records = Vec::new();
    let mut session = DocSession::new(model, None);
    for (x, y) in iterate_document(doc) {
        let mut fwd = Fwd {
            tape: None,
            dropout: 0.0,
            rng: None,
            trace: Some(&mut records),
        };
        session.sentence(&x, &y, &mut fwd)?;
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Information gain
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct InformationGain {
    /// Mean entropy reduction of Update Attention rows, in nats.
    pub update_nats: f64,
    /// Mean entropy reduction of Output Attention rows, in nats.
    pub output_nats: f64,
    pub update_rows: usize,
    pub output_rows: usize,
}

fn entropy_nats(row: &[f32]) -> f64 {
    row.iter()
        .map(|&p| {
            let p = p as f64;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// Mean per-row entropy reduction from `init` maps to `trained` maps,
/// separated by attention kind. Records must pair up one to one.
pub fn ig_from_records(
    trained: &[AttentionRecord],
    init: &[AttentionRecord],
) -> Result<InformationGain, AnalysisError> {
    if trained.len() != init.len() {
        return Err(AnalysisError::ConfigMismatch(format!(
            "attention record counts differ: {} vs {}",
            trained.len(),
            init.len()
        )));
    }
    let mut sums: BTreeMap<AttnKind, (f64, usize)> = BTreeMap::new();
    for (t, i) in trained.iter().zip(init) {
        if t.kind != i.kind || t.q_len != i.q_len || t.k_len != i.k_len || t.n_heads != i.n_heads {
            return Err(AnalysisError::ConfigMismatch(
                "attention record structure differs between models".into(),
            ));
        }
        let rows = t.n_heads * t.q_len;
        for r in 0..rows {
            let a = &t.weights[r * t.k_len..(r + 1) * t.k_len];
            let b = &i.weights[r * t.k_len..(r + 1) * t.k_len];
            let gain = entropy_nats(b) - entropy_nats(a);
            let entry = sums.entry(t.kind).or_insert((0.0, 0));
            entry.0 += gain;
            entry.1 += 1;
        }
    }
    let get = |kind: AttnKind| {
        sums.get(&kind)
            .map(|&(s, n)| (s / n.max(1) as f64, n))
            .unwrap_or((0.0, 0))
    };
    let (update_nats, update_rows) = get(AttnKind::Update);
    let (output_nats, output_rows) = get(AttnKind::Output);
    Ok(InformationGain {
        update_nats,
        output_nats,
        update_rows,
        output_rows,
    })
}

fn check_same_architecture(a: &ModelConfig, b: &ModelConfig) -> Result<(), AnalysisError> {
    let sig = |c: &ModelConfig| {
        (
            c.n_layers,
            c.d_model,
            c.n_heads,
            c.vocab_size,
            c.mem_size,
            c.mem_side,
            c.mem_layers.clone(),
        )
    };
    if sig(a) != sig(b) {
        return Err(AnalysisError::ConfigMismatch(
            "models must share layer, head, vocabulary and memory geometry".into(),
        ));
    }
    Ok(())
}

/// Information gain between a trained model and a freshly initialized model
/// of the same architecture, measured over the given documents.
pub fn information_gain(
    trained: &Model,
    init: &Model,
    docs: &[Document],
) -> Result<InformationGain, AnalysisError> {
    check_same_architecture(&trained.cfg, &init.cfg)?;
    if docs.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut all_trained = Vec::new();
    let mut all_init = Vec::new();
    for doc in docs {
        all_trained.extend(collect_attention_maps(trained, doc)?);
        all_init.extend(collect_attention_maps(init, doc)?);
    }
    ig_from_records(&all_trained, &all_init)
}

// ---------------------------------------------------------------------------
// Gradient attribution over sentence distance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ScoreRow {
    /// Distance bucket start: covers distances `[k, k + bucket)`.
    pub k: usize,
    pub score: f64,
    /// (document, anchor) pairs that contributed a nonempty token set.
    pub samples: usize,
}

/// One content-token occurrence: which embedded tensor row it owns.
struct Occurrence {
    tok: u32,
    from_source: bool,
    row: usize,
}

fn occurrences(doc: &Document, t: usize) -> Vec<Occurrence> {
    let mut out = Vec::new();
    for (i, &tok) in doc.src[t].iter().enumerate() {
        if tok >= 4 {
            out.push(Occurrence {
                tok,
                from_source: true,
                row: i, // x = src ++ <eos>
            });
        }
    }
    for (i, &tok) in doc.tgt[t].iter().enumerate() {
        if tok >= 4 {
            out.push(Occurrence {
                tok,
                from_source: false,
                row: i + 1, // decoder input = <bos> ++ tgt
            });
        }
    }
    out
}

/// Gradient attribution Score(k): for every anchor sentence, backward from
/// its loss on a full-document tape, then sum L1 norms of the embedding
/// gradient for token occurrences in sentences at distance `[k, k+bucket)`,
/// counting only tokens unique within that range. The gradient is taken at
/// the embedding-lookup rows, so only actual cross-sentence flow registers
/// (the tied output projection touches every vocabulary row and would
/// otherwise drown the signal). Averaged over anchors and documents; empty
/// buckets are omitted.
pub fn gradient_attribution(
    model: &Model,
    docs: &[Document],
    bucket: usize,
) -> Result<Vec<ScoreRow>, AnalysisError> {
    assert!(bucket >= 1);
    if docs.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let d_model = model.cfg.d_model;
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for doc in docs {
        let tape = Tape::new();
        let mut session = DocSession::with_truncation(model, Some(&tape), Truncation::Full);
        let mut losses = Vec::with_capacity(doc.len());
        let mut embeds: Vec<(crate::tensor::Tensor, crate::tensor::Tensor)> =
            Vec::with_capacity(doc.len());
        for (x, y) in iterate_document(doc) {
            let mut fwd = Fwd {
                tape: Some(&tape),
                dropout: 0.0,
                rng: None,
                trace: None,
            };
            let out = session.sentence(&x, &y, &mut fwd)?;
            losses.push(cross_entropy_smoothed(&out.logits, &out.targets, 0.0)?);
            embeds.push((out.src_embedded, out.tgt_embedded));
        }
        let occs: Vec<Vec<Occurrence>> = (0..doc.len()).map(|t| occurrences(doc, t)).collect();

        for (anchor, loss) in losses.iter().enumerate() {
            let grads = backward(loss).map_err(ModelError::from)?;
            let mut k = 0usize;
            while k <= anchor {
                let lo = anchor.saturating_sub(k + bucket - 1);
                let hi = anchor - k;
                let mut counts: HashMap<u32, usize> = HashMap::new();
                for s in lo..=hi {
                    for occ in &occs[s] {
                        *counts.entry(occ.tok).or_insert(0) += 1;
                    }
                }
                let mut any = false;
                let mut l1 = 0.0f64;
                for s in lo..=hi {
                    for occ in &occs[s] {
                        if counts[&occ.tok] != 1 {
                            continue;
                        }
                        any = true;
                        let emb = if occ.from_source {
                            &embeds[s].0
                        } else {
                            &embeds[s].1
                        };
                        if let Some(g) = grads.wrt(emb) {
                            let row = &g[occ.row * d_model..(occ.row + 1) * d_model];
                            l1 += row.iter().map(|v| v.abs() as f64).sum::<f64>();
                        }
                    }
                }
                if any {
                    let entry = acc.entry(k).or_insert((0.0, 0));
                    entry.0 += l1;
                    entry.1 += 1;
                }
                k += bucket;
            }
        }
        // the loop accumulates into parameter gradients too; drop them
        for p in model.named_params() {
            p.zero_grad();
        }
    }
    Ok(acc
        .into_iter()
        .map(|(k, (sum, n))| ScoreRow {
            k,
            score: sum / n as f64,
            samples: n,
        })
        .collect())
}

pub fn score_rows_csv(rows: &[ScoreRow]) -> String {
    let mut out = String::from("k,score,samples\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.k, r.score, r.samples));
    }
    out
}

// ---------------------------------------------------------------------------
// Attention-map export
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct AttentionMapJson<'a> {
    side: &'a str,
    layer: usize,
    kind: &'a str,
    step: usize,
    n_heads: usize,
    q_labels: &'a [String],
    k_labels: &'a [String],
    /// Head-averaged `[q_len, k_len]` weights, row-major.
    weights: Vec<f32>,
}

fn token_labels(model: &Model, vocab: &crate::corpus::Vocab, ids: &[u32]) -> Vec<String> {
    let _ = model;
    ids.iter().map(|&id| vocab.token(id).to_string()).collect()
}

/// One JSON file per (side, layer, kind, step) record, named accordingly.
pub fn export_attention_maps(
    model: &Model,
    doc: &Document,
    vocab: &crate::corpus::Vocab,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, AnalysisError> {
    std::fs::create_dir_all(out_dir)?;
    let records = collect_attention_maps(model, doc)?;
    let mem_labels: Vec<String> = (0..model.cfg.mem_size).map(|r| format!("mem{r}")).collect();
    let mut paths = Vec::with_capacity(records.len());
    for rec in &records {
        let t = rec.step;
        let (src_wrapped, tgt_wrapped) = {
            let mut x = doc.src[t].clone();
            x.push(EOS_ID);
            let mut y = vec![BOS_ID];
            y.extend_from_slice(&doc.tgt[t]);
            (x, y)
        };
        let sent_ids = match rec.side {
            Side::Encoder => &src_wrapped,
            Side::Decoder => &tgt_wrapped,
        };
        let sent_labels = token_labels(model, vocab, sent_ids);
        let (q_labels, k_labels) = match rec.kind {
            AttnKind::Update => (mem_labels.clone(), sent_labels),
            AttnKind::Output => (sent_labels, mem_labels.clone()),
        };
        let json = AttentionMapJson {
            side: rec.side.tag(),
            layer: rec.layer,
            kind: match rec.kind {
                AttnKind::Update => "update",
                AttnKind::Output => "output",
            },
            step: rec.step,
            n_heads: rec.n_heads,
            q_labels: &q_labels,
            k_labels: &k_labels,
            weights: rec.mean_weights(),
        };
        let name = format!(
            "{}_l{}_{}_t{:03}.json",
            rec.side.tag(),
            rec.layer,
            json.kind,
            rec.step
        );
        let path = out_dir.join(name);
        std::fs::write(&path, serde_json::to_string_pretty(&json).expect("serializes"))?;
        paths.push(path);
    }
    Ok(paths)
}

// ---------------------------------------------------------------------------
// Entity dependency tracing (update row -> output row correspondence)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct DependencyTrace {
    pub hits: usize,
    pub total: usize,
}

impl DependencyTrace {
    pub fn fraction(&self) -> f64 {
        self.hits as f64 / self.total.max(1) as f64
    }
}

/// For each pronoun: the memory row it attends most in encoder Output
/// Attention must be among the `top` rows that most attended the marker
/// token in Update Attention at the marker's step.
pub fn trace_entity_dependency(
    model: &Model,
    docs: &[Document],
    layout: &EntityLayout,
    top: usize,
) -> Result<DependencyTrace, AnalysisError> {
    let layer = *model
        .cfg
        .mem_layers
        .iter()
        .next_back()
        .ok_or_else(|| AnalysisError::ConfigMismatch("model has no memory layers".into()))?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for doc in docs {
        let records = collect_attention_maps(model, doc)?;
        let mut update_at: HashMap<usize, &AttentionRecord> = HashMap::new();
        let mut output_at: HashMap<usize, &AttentionRecord> = HashMap::new();
        for rec in &records {
            if rec.side != Side::Encoder || rec.layer != layer {
                continue;
            }
            match rec.kind {
                AttnKind::Update => {
                    update_at.insert(rec.step, rec);
                }
                AttnKind::Output => {
                    output_at.insert(rec.step, rec);
                }
            }
        }
        for ann in &doc.annotations {
            if ann.distance == 0 {
                continue; // no cross-sentence hop to trace
            }
            let marker_sent = ann.sent - ann.distance;
            let Some(marker_pos) = doc.src[marker_sent]
                .iter()
                .position(|&t| t == layout.marker(true) || t == layout.marker(false))
            else {
                continue;
            };
            let (Some(update), Some(output)) =
                (update_at.get(&marker_sent), output_at.get(&ann.sent))
            else {
                continue;
            };
            // update: rows = memory, cols = tokens; rank rows by marker column
            let um = update.mean_weights();
            let d_m = update.q_len;
            let mut rows: Vec<(usize, f32)> = (0..d_m)
                .map(|r| (r, um[r * update.k_len + marker_pos]))
                .collect();
            rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let top_rows: HashSet<usize> = rows.iter().take(top).map(|&(r, _)| r).collect();
            // output: rows = tokens, cols = memory; argmax column at the pron
            let om = output.mean_weights();
            let row = &om[ann.tok * output.k_len..(ann.tok + 1) * output.k_len];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            total += 1;
            if top_rows.contains(&best) {
                hits += 1;
            }
        }
    }
    Ok(DependencyTrace { hits, total })
}

// ---------------------------------------------------------------------------
// Complexity benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Sentence,
    Concat,
    Memory,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::Sentence => "sentence",
            Variant::Concat => "concat",
            Variant::Memory => "memory",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ComplexityRow {
    pub n_tokens: usize,
    pub variant: Variant,
    /// High-water mark of live tensor values during the run.
    pub peak_values: usize,
    pub wall_seconds: f64,
}

pub fn complexity_csv(rows: &[ComplexityRow]) -> String {
    let mut out = String::from("n_tokens,variant,peak_values,wall_seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.n_tokens,
            r.variant.tag(),
            r.peak_values,
            r.wall_seconds
        ));
    }
    out
}

fn bench_config(max_len: usize, mem_side: MemSide, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        max_sentence_len: max_len,
        dropout_rate: 0.0,
        mem_side,
        seed,
        ..ModelConfig::desk_default()
    }
}

fn dummy_tokens(n: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(4..vocab as u32)).collect()
}

/// Greedy decode of exactly `len` tokens; the stop token is ignored so every
/// variant emits the same number of target tokens.
fn forced_greedy(
    model: &Model,
    enc: &crate::transformer::SentenceStates,
    dec_mem: Option<&MemoryBank>,
    len: usize,
) -> Result<Vec<u32>, ModelError> {
    let mut dec = IncrementalDecoder::new(model, enc, dec_mem)?;
    let mut tokens = Vec::with_capacity(len);
    for _ in 0..len {
        let prev = tokens.last().copied().unwrap_or(BOS_ID);
        let logits = dec.step(prev)?;
        let next = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0 as u32;
        tokens.push(next);
    }
    Ok(tokens)
}

fn run_chunked(
    model: &Model,
    n: usize,
    chunk: usize,
    with_memory: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(), ModelError> {
    let mut enc_bank = (with_memory && model.memory.has_side(Side::Encoder))
        .then(|| MemoryBank::reset(model, Side::Encoder, None));
    let mut dec_bank = (with_memory && model.memory.has_side(Side::Decoder))
        .then(|| MemoryBank::reset(model, Side::Decoder, None));
    let chunks = n / chunk;
    for _ in 0..chunks {
        let mut src = dummy_tokens(chunk, model.cfg.vocab_size, rng);
        src.push(EOS_ID);
        let mut fwd = Fwd::eval();
        let enc = model.encoder_forward(&src, enc_bank.as_ref(), &mut fwd)?;
        let hyp = forced_greedy(model, &enc.states, dec_bank.as_ref(), chunk)?;
        if let Some(bank) = &mut enc_bank {
            bank.step(model, &enc.mem_inputs, &enc.states.mask, &mut fwd)?;
        }
        if let Some(bank) = &mut dec_bank {
            let mut y_in = vec![BOS_ID];
            y_in.extend_from_slice(&hyp);
            let dec = model.decoder_forward(&y_in, &enc.states, Some(bank), &mut fwd)?;
            bank.step(model, &dec.mem_inputs, &vec![true; y_in.len()], &mut fwd)?;
        }
    }
    Ok(())
}

fn run_concat(model: &Model, n: usize, rng: &mut ChaCha8Rng) -> Result<(), ModelError> {
    let mut src = dummy_tokens(n, model.cfg.vocab_size, rng);
    src.push(EOS_ID);
    let mut fwd = Fwd::eval();
    let enc = model.encoder_forward(&src, None, &mut fwd)?;
    forced_greedy(model, &enc.states, None, n)?;
    Ok(())
}

/// Decoding complexity over dummy tokens: the sentence-level model decodes
/// independent chunks, the concat model takes the whole sequence at once,
/// and the memory model decodes chunk by chunk while updating its memory.
/// Peak live tensor values and wall time per (variant, N).
pub fn complexity_benchmark(
    token_counts: &[usize],
    chunk: usize,
    seed: u64,
) -> Result<Vec<ComplexityRow>, AnalysisError> {
    if token_counts.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let max_n = *token_counts.iter().max().unwrap();
    let mut rows = Vec::new();

    let sentence_model = Model::new(bench_config(chunk, MemSide::None, seed)).map_err(ModelError::from)?;
    let memory_model = Model::new(bench_config(chunk, MemSide::Both, seed)).map_err(ModelError::from)?;
    let concat_model = Model::new(bench_config(max_n, MemSide::None, seed)).map_err(ModelError::from)?;

    for &n in token_counts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
        reset_peak_values();
        let t0 = Instant::now();
        run_chunked(&sentence_model, n, chunk, false, &mut rng)?;
        rows.push(ComplexityRow {
            n_tokens: n,
            variant: Variant::Sentence,
            peak_values: peak_values(),
            wall_seconds: t0.elapsed().as_secs_f64(),
        });

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
        reset_peak_values();
        let t0 = Instant::now();
        run_concat(&concat_model, n, &mut rng)?;
        rows.push(ComplexityRow {
            n_tokens: n,
            variant: Variant::Concat,
            peak_values: peak_values(),
            wall_seconds: t0.elapsed().as_secs_f64(),
        });

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
        reset_peak_values();
        let t0 = Instant::now();
        run_chunked(&memory_model, n, chunk, true, &mut rng)?;
        rows.push(ComplexityRow {
            n_tokens: n,
            variant: Variant::Memory,
            peak_values: peak_values(),
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}
