//! Synthetic document-translation corpora with controllable cross-sentence
//! dependencies, plus vocabulary handling, JSONL persistence and in-order
//! sentence iteration.
//!
//! The entity-carry task: most tokens translate by a fixed word-to-word map
//! (learnable per sentence). Each document also contains marker/pronoun
//! chains: a marker sentence introduces entity A or B, and a later sentence
//! holds a `pron` token whose correct translation (`pron_a` vs `pron_b`) is
//! determined solely by the most recent marker, at a controlled sentence
//! distance. A sentence-level model can only guess those.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transformer::{BOS_ID, EOS_ID, UNK_ID};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("generation error: {0}")]
    Generation(String),
    #[error("vocabulary error: {0}")]
    Vocab(String),
}

pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token <-> id bijection with the four reserved ids fixed up front.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from content tokens, prepending the reserved ids.
    pub fn new(content: impl IntoIterator<Item = String>) -> Result<Self, CorpusError> {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(content);
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.len() < 4 || tokens[..4] != RESERVED_TOKENS.map(String::from) {
            return Err(CorpusError::Vocab(
                "first four tokens must be <pad>, <bos>, <eos>, <unk>".into(),
            ));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(CorpusError::Vocab(format!("duplicate token '{t}'")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .unwrap_or("<unk>")
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(String::from).collect())
    }

    /// Ids for a whitespace-tokenized sentence.
    pub fn encode(&self, sentence: &str) -> Vec<u32> {
        sentence.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Position of one context-dependent pronoun token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PronAnnotation {
    pub sent: usize,
    pub tok: usize,
    pub distance: usize,
}

/// One document: aligned source/target sentences as token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub src: Vec<Vec<u32>>,
    pub tgt: Vec<Vec<u32>>,
    pub annotations: Vec<PronAnnotation>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Yields `(x_t, y_t)` strictly in document order; sources gain a trailing
/// `<eos>`, targets are wrapped `<bos> .. <eos>`.
pub fn iterate_document(doc: &Document) -> impl Iterator<Item = (Vec<u32>, Vec<u32>)> + '_ {
    doc.src.iter().zip(&doc.tgt).map(|(s, t)| {
        let mut x = s.clone();
        x.push(EOS_ID);
        let mut y = Vec::with_capacity(t.len() + 2);
        y.push(BOS_ID);
        y.extend_from_slice(t);
        y.push(EOS_ID);
        (x, y)
    })
}

// ---------------------------------------------------------------------------
// Entity-carry generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_docs: usize,
    pub sents_min: usize,
    pub sents_max: usize,
    pub dist_min: usize,
    pub dist_max: usize,
    pub sent_len_min: usize,
    pub sent_len_max: usize,
    pub content_vocab: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_docs: 500,
            sents_min: 12,
            sents_max: 20,
            dist_min: 1,
            dist_max: 10,
            sent_len_min: 5,
            sent_len_max: 12,
            content_vocab: 64,
            seed: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.sents_min == 0 || self.sents_max < self.sents_min {
            return Err(CorpusError::Generation(
                "sentence-count range is empty".into(),
            ));
        }
        if self.dist_max < self.dist_min {
            return Err(CorpusError::Generation("distance range is empty".into()));
        }
        if self.dist_max + 1 > self.sents_min {
            return Err(CorpusError::Generation(format!(
                "antecedent distance up to {} cannot fit into documents of {} sentences",
                self.dist_max, self.sents_min
            )));
        }
        if self.sent_len_min < 2 || self.sent_len_max < self.sent_len_min {
            return Err(CorpusError::Generation(
                "sentence-length range must allow at least two tokens".into(),
            ));
        }
        if self.content_vocab < 2 {
            return Err(CorpusError::Generation(
                "content vocabulary must have at least two words".into(),
            ));
        }
        Ok(())
    }
}

/// Id layout of the entity-carry vocabulary for a given content size.
#[derive(Debug, Clone, Copy)]
pub struct EntityLayout {
    pub content_vocab: usize,
}

impl EntityLayout {
    pub fn src_word(&self, i: usize) -> u32 {
        (4 + i) as u32
    }
    pub fn tgt_word(&self, i: usize) -> u32 {
        (4 + self.content_vocab + i) as u32
    }
    pub fn marker(&self, a: bool) -> u32 {
        (4 + 2 * self.content_vocab + usize::from(!a)) as u32
    }
    pub fn marker_tgt(&self, a: bool) -> u32 {
        (4 + 2 * self.content_vocab + 2 + usize::from(!a)) as u32
    }
    pub fn pron(&self) -> u32 {
        (4 + 2 * self.content_vocab + 4) as u32
    }
    pub fn pron_tgt(&self, a: bool) -> u32 {
        (4 + 2 * self.content_vocab + 5 + usize::from(!a)) as u32
    }
    pub fn vocab_size(&self) -> usize {
        4 + 2 * self.content_vocab + 7
    }

    /// Word-to-word translation of one source token.
    pub fn dictionary(&self, src_id: u32) -> Option<u32> {
        let i = src_id as usize;
        if i >= 4 && i < 4 + self.content_vocab {
            Some(self.tgt_word(i - 4))
        } else if src_id == self.marker(true) {
            Some(self.marker_tgt(true))
        } else if src_id == self.marker(false) {
            Some(self.marker_tgt(false))
        } else {
            None // pron: depends on context
        }
    }

    pub fn vocab(&self) -> Vocab {
        let mut content = Vec::with_capacity(2 * self.content_vocab + 7);
        for i in 0..self.content_vocab {
            content.push(format!("s{i:03}"));
        }
        for i in 0..self.content_vocab {
            content.push(format!("t{i:03}"));
        }
        for t in [
            "marker_a", "marker_b", "tmarker_a", "tmarker_b", "pron", "pron_a", "pron_b",
        ] {
            content.push(t.to_string());
        }
        Vocab::new(content).expect("entity vocab is well-formed")
    }
}

/// Generates the entity-carry corpus. Deterministic for a fixed config.
pub fn generate_entity_carry_corpus(
    cfg: &GenConfig,
) -> Result<(Vec<Document>, Vocab), CorpusError> {
    cfg.validate()?;
    let layout = EntityLayout {
        content_vocab: cfg.content_vocab,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut docs = Vec::with_capacity(cfg.n_docs);
    // Corpus-level marker balance: odd chain counts alternate the surplus.
    let (mut total_a, mut total_b) = (0usize, 0usize);

    for d in 0..cfg.n_docs {
        let n = rng.gen_range(cfg.sents_min..=cfg.sents_max);
        let mut src = Vec::with_capacity(n);
        let mut tgt = Vec::with_capacity(n);
        for _ in 0..n {
            let len = rng.gen_range(cfg.sent_len_min..=cfg.sent_len_max);
            let s: Vec<u32> = (0..len)
                .map(|_| layout.src_word(rng.gen_range(0..cfg.content_vocab)))
                .collect();
            let t: Vec<u32> = s
                .iter()
                .map(|&w| layout.dictionary(w).expect("content word"))
                .collect();
            src.push(s);
            tgt.push(t);
        }

        // Chain placement: each chain owns [marker_sent, pron_sent] so the
        // chain's marker is always the most recent one before its pronoun.
        let mut chains = Vec::new();
        let mut t = 0usize;
        loop {
            let delta = rng.gen_range(cfg.dist_min..=cfg.dist_max);
            if t + delta >= n {
                break;
            }
            chains.push((t, t + delta, delta));
            t += delta + 1;
        }

        let k = chains.len();
        let mut n_a = k / 2;
        if k % 2 == 1 {
            if total_a <= total_b {
                n_a += 1;
            }
        }
        let mut letters = vec![true; n_a];
        letters.extend(vec![false; k - n_a]);
        letters.shuffle(&mut rng);
        total_a += n_a;
        total_b += k - n_a;

        let mut annotations = Vec::with_capacity(k);
        for (&(ms, ps, delta), &is_a) in chains.iter().zip(&letters) {
            let (marker_pos, pron_pos) = if delta == 0 {
                let len = src[ms].len();
                let marker_pos = rng.gen_range(0..len - 1);
                let pron_pos = rng.gen_range(marker_pos + 1..len);
                (marker_pos, pron_pos)
            } else {
                (
                    rng.gen_range(0..src[ms].len()),
                    rng.gen_range(0..src[ps].len()),
                )
            };
            src[ms][marker_pos] = layout.marker(is_a);
            tgt[ms][marker_pos] = layout.marker_tgt(is_a);
            src[ps][pron_pos] = layout.pron();
            tgt[ps][pron_pos] = layout.pron_tgt(is_a);
            annotations.push(PronAnnotation {
                sent: ps,
                tok: pron_pos,
                distance: delta,
            });
        }

        docs.push(Document {
            id: format!("doc{d:05}"),
            src,
            tgt,
            annotations,
        });
    }
    Ok((docs, layout.vocab()))
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DocumentJson {
    id: String,
    src: Vec<String>,
    tgt: Vec<String>,
    #[serde(default)]
    ann: Vec<(usize, usize, usize)>,
}

pub fn save_corpus(docs: &[Document], vocab: &Vocab, path: &Path) -> Result<(), CorpusError> {
    let mut file = fs::File::create(path)?;
    for doc in docs {
        let json = DocumentJson {
            id: doc.id.clone(),
            src: doc.src.iter().map(|s| vocab.decode(s)).collect(),
            tgt: doc.tgt.iter().map(|s| vocab.decode(s)).collect(),
            ann: doc
                .annotations
                .iter()
                .map(|a| (a.sent, a.tok, a.distance))
                .collect(),
        };
        let line = serde_json::to_string(&json).expect("document serializes");
        writeln!(file, "{line}")?;
    }
    Ok(())
}

pub fn load_corpus(path: &Path, vocab: &Vocab) -> Result<Vec<Document>, CorpusError> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let json: DocumentJson =
            serde_json::from_str(&line).map_err(|source| CorpusError::Parse {
                line: lineno,
                source,
            })?;
        if json.src.len() != json.tgt.len() || json.src.is_empty() {
            return Err(CorpusError::Malformed {
                line: lineno,
                reason: format!(
                    "document needs equal, nonzero sentence counts (src {}, tgt {})",
                    json.src.len(),
                    json.tgt.len()
                ),
            });
        }
        let doc = Document {
            id: json.id,
            src: json.src.iter().map(|s| vocab.encode(s)).collect(),
            tgt: json.tgt.iter().map(|s| vocab.encode(s)).collect(),
            annotations: json
                .ann
                .iter()
                .map(|&(sent, tok, distance)| PronAnnotation {
                    sent,
                    tok,
                    distance,
                })
                .collect(),
        };
        for a in &doc.annotations {
            if a.sent >= doc.src.len() || a.tok >= doc.tgt[a.sent].len() {
                return Err(CorpusError::Malformed {
                    line: lineno,
                    reason: format!("annotation ({}, {}) out of range", a.sent, a.tok),
                });
            }
        }
        docs.push(doc);
    }
    Ok(docs)
}
