//! CTC decoding: best-path (greedy) and prefix beam search with optional
//! n-gram shallow fusion.
//!
//! The beam keeps, per prefix, both the summed probability over alignments
//! ending in blank / non-blank and the best single alignment in each state.
//! Pruning ranks prefixes by their best alignment; the hypotheses returned
//! are ranked by the summed probability. With beam width 1 this reduces
//! exactly to best-path decoding, and with an unbounded beam the scores are
//! the exact prefix marginals.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::lm::NGramModel;
use crate::nnet::log_softmax_rows;
use crate::textdist::{TokenSeq, BLANK};

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("beam width must be >= 1")]
    ZeroBeam,
    #[error("logits contain non-finite values")]
    NonFinite,
    #[error("language model covers {lm} labels, acoustic model emits {acoustic}")]
    VocabMismatch { lm: usize, acoustic: usize },
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub lm: Arc<NGramModel>,
    pub weight: f64,
    /// Added once per emitted label.
    pub length_bonus: f64,
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub beam: usize,
    pub fusion: Option<Fusion>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam: 8, fusion: None }
    }
}

impl DecodeConfig {
    pub fn greedy_equivalent() -> Self {
        Self { beam: 1, fusion: None }
    }

    pub fn with_lm(lm: Arc<NGramModel>, weight: f64) -> Self {
        Self { beam: 8, fusion: Some(Fusion { lm, weight, length_bonus: 0.0 }) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: TokenSeq,
    /// `log_prob + weight * lm_log_prob + length_bonus * len`.
    pub score: f64,
    /// Log of the summed probability of all alignments collapsing to `tokens`.
    pub log_prob: f64,
    /// Language-model log-probability of the emitted labels (0 without fusion).
    pub lm_log_prob: f64,
}

/// Per-frame argmax, repeats merged and blanks removed. Ties go to the
/// lowest index.
pub fn greedy_ctc(logits: ArrayView2<f32>) -> TokenSeq {
    let mut out = Vec::new();
    let mut prev = BLANK;
    for row in logits.rows() {
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        let k = best as u32;
        if k != BLANK && k != prev {
            out.push(k);
        }
        prev = k;
    }
    TokenSeq::new(out).expect("argmax ids are non-blank")
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[derive(Debug, Clone, Copy)]
struct State {
    sum_blank: f64,
    sum_label: f64,
    best_blank: f64,
    best_label: f64,
    lm: f64,
}

impl State {
    fn empty(lm: f64) -> Self {
        let ninf = f64::NEG_INFINITY;
        Self { sum_blank: ninf, sum_label: ninf, best_blank: ninf, best_label: ninf, lm }
    }

    fn sum(&self) -> f64 {
        log_add(self.sum_blank, self.sum_label)
    }

    fn best(&self) -> f64 {
        self.best_blank.max(self.best_label)
    }
}

struct Candidates {
    index: HashMap<Vec<u32>, usize>,
    entries: Vec<(Vec<u32>, State)>,
}

impl Candidates {
    fn new() -> Self {
        Self { index: HashMap::new(), entries: Vec::new() }
    }

    fn slot(&mut self, prefix: &[u32], lm: impl FnOnce() -> f64) -> &mut State {
        let i = match self.index.get(prefix) {
            Some(&i) => i,
            None => {
                self.entries.push((prefix.to_vec(), State::empty(lm())));
                self.index.insert(prefix.to_vec(), self.entries.len() - 1);
                self.entries.len() - 1
            }
        };
        &mut self.entries[i].1
    }
}

fn fused(base: f64, state: &State, len: usize, fusion: Option<&Fusion>) -> f64 {
    match fusion {
        Some(f) => base + f.weight * state.lm + f.length_bonus * len as f64,
        None => base,
    }
}

fn by_key_then_prefix(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Prefix beam search over `logits` (frames x vocab, blank at column 0).
/// Returns at most `config.beam` hypotheses, best first; ties are broken by
/// lexicographic order of the label sequence.
pub fn beam_search(logits: ArrayView2<f32>, config: &DecodeConfig) -> Result<Vec<Hypothesis>, DecodeError> {
    if config.beam == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(DecodeError::NonFinite);
    }
    let vocab = logits.ncols();
    let fusion = config.fusion.as_ref();
    if let Some(f) = fusion {
        if f.lm.alphabet().len() + 1 != vocab {
            return Err(DecodeError::VocabMismatch { lm: f.lm.alphabet().len(), acoustic: vocab.saturating_sub(1) });
        }
    }
    let lp: Array2<f64> = log_softmax_rows(logits.mapv(f64::from).view());

    let mut start = State::empty(0.0);
    start.sum_blank = 0.0;
    start.best_blank = 0.0;
    let mut beams: Vec<(Vec<u32>, State)> = vec![(Vec::new(), start)];

    for row in lp.rows() {
        let mut next = Candidates::new();
        for (prefix, st) in &beams {
            let total = st.sum();
            let best = st.best();
            let blank = row[BLANK as usize];
            let s = next.slot(prefix, || st.lm);
            s.sum_blank = log_add(s.sum_blank, total + blank);
            s.best_blank = s.best_blank.max(best + blank);

            let last = prefix.last().copied();
            let mut extended = prefix.clone();
            extended.push(BLANK);
            for c in 1..vocab as u32 {
                let e = row[c as usize];
                *extended.last_mut().expect("pushed") = c;
                let lm_step = || match fusion {
                    Some(f) => st.lm + f.lm.log_prob_next(prefix, c),
                    None => 0.0,
                };
                if last == Some(c) {
                    let same = next.slot(prefix, || st.lm);
                    same.sum_label = log_add(same.sum_label, st.sum_label + e);
                    same.best_label = same.best_label.max(st.best_label + e);
                    let grown = next.slot(&extended, lm_step);
                    grown.sum_label = log_add(grown.sum_label, st.sum_blank + e);
                    grown.best_label = grown.best_label.max(st.best_blank + e);
                } else {
                    let grown = next.slot(&extended, lm_step);
                    grown.sum_label = log_add(grown.sum_label, total + e);
                    grown.best_label = grown.best_label.max(best + e);
                }
            }
        }
        let mut entries = next.entries;
        entries.retain(|(_, s)| s.best() > f64::NEG_INFINITY);
        entries.sort_by(|(pa, sa), (pb, sb)| {
            by_key_then_prefix((fused(sa.best(), sa, pa.len(), fusion), pa), (fused(sb.best(), sb, pb.len(), fusion), pb))
        });
        entries.truncate(config.beam);
        beams = entries;
    }

    let mut out: Vec<Hypothesis> = beams
        .into_iter()
        .map(|(prefix, st)| {
            let log_prob = st.sum();
            Hypothesis {
                score: fused(log_prob, &st, prefix.len(), fusion),
                lm_log_prob: st.lm,
                log_prob,
                tokens: TokenSeq::new(prefix).expect("labels are non-blank"),
            }
        })
        .collect();
    out.sort_by(|a, b| by_key_then_prefix((a.score, a.tokens.as_slice()), (b.score, b.tokens.as_slice())));
    Ok(out)
}

/// Best hypothesis under `config`; an empty sequence for zero frames.
pub fn decode_best(logits: ArrayView2<f32>, config: &DecodeConfig) -> Result<TokenSeq, DecodeError> {
    Ok(beam_search(logits, config)?.into_iter().next().map(|h| h.tokens).unwrap_or_else(TokenSeq::empty))
}
