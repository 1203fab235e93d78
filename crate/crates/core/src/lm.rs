//! Character n-gram language model with interpolated absolute discounting,
//! stored in backoff form for shallow fusion.
//!
//! For a context `h` with total count `C(h)` and `N(h)` distinct
//! continuations,
//!
//! ```text
//! p(v | h) = max(c(h v) - D, 0) / C(h) + (D N(h) / C(h)) p(v | h')
//! ```
//!
//! where `h'` drops the oldest token and the recursion ends at the uniform
//! distribution over the prediction vocabulary. Contexts never seen in
//! training fall through to `h'` unchanged.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Alphabet;
use crate::textdist::TokenSeq;

pub const LM_FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "dust-ngram";

/// Floor applied to log-probabilities of zero-probability events (only
/// reachable with discount 0).
pub const MIN_LOG_PROB: f64 = -99.0;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("cannot fit a language model on an empty corpus")]
    EmptyCorpus,
    #[error("invalid language model setting: {0}")]
    Config(String),
    #[error("malformed language model file: {0}")]
    Malformed(String),
    #[error("language model version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw n-gram counts: context (oldest token first) -> next token -> count.
#[derive(Debug, Clone, Default)]
pub struct NGramCounts {
    order: usize,
    n_labels: u32,
    counts: HashMap<Vec<u32>, BTreeMap<u32, u64>>,
}

impl NGramCounts {
    pub fn new(n_labels: usize, order: usize) -> Result<Self, LmError> {
        if order == 0 {
            return Err(LmError::Config("order must be >= 1".into()));
        }
        Ok(Self { order, n_labels: n_labels as u32, counts: HashMap::new() })
    }

    fn eos(&self) -> u32 {
        self.n_labels + 1
    }

    fn unk(&self) -> u32 {
        self.n_labels + 2
    }

    fn bos(&self) -> u32 {
        self.n_labels + 3
    }

    /// Count one occurrence of `token` after `context`, together with every
    /// shorter suffix of `context` (truncated to `order - 1` tokens).
    pub fn add(&mut self, context: &[u32], token: u32) {
        let keep = context.len().min(self.order - 1);
        let context = &context[context.len() - keep..];
        for start in 0..=keep {
            *self.counts.entry(context[start..].to_vec()).or_default().entry(token).or_insert(0) += 1;
        }
    }

    /// Count every position of a transcript, framed by sentence markers.
    pub fn add_text(&mut self, text: &[u32]) {
        let mut history = vec![self.bos()];
        let unk = self.unk();
        let n = self.n_labels;
        for &t in text {
            let t = if (1..=n).contains(&t) { t } else { unk };
            self.add(&history, t);
            history.push(t);
        }
        let eos = self.eos();
        self.add(&history, eos);
    }

    pub fn count(&self, context: &[u32], token: u32) -> u64 {
        self.counts.get(context).and_then(|m| m.get(&token)).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn estimate(&self, alphabet: &Alphabet, discount: f64) -> Result<NGramModel, LmError> {
        if self.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        if !(0.0..=1.0).contains(&discount) {
            return Err(LmError::Config(format!("discount {discount} outside [0, 1]")));
        }
        if alphabet.len() as u32 != self.n_labels {
            return Err(LmError::Config("alphabet size differs from counted labels".into()));
        }
        let vocab = f64::from(self.n_labels + 2);
        let mut contexts: Vec<&Vec<u32>> = self.counts.keys().collect();
        contexts.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));

        let mut tables: HashMap<Vec<u32>, ContextTable> = HashMap::new();
        for ctx in contexts {
            let next = &self.counts[ctx];
            let total: u64 = next.values().sum();
            let total = total as f64;
            let gamma = discount * next.len() as f64 / total;
            let lower = |v: u32| -> f64 {
                if ctx.is_empty() {
                    1.0 / vocab
                } else {
                    prob_from_tables(&tables, &ctx[1..], v)
                }
            };
            let log_probs = next
                .iter()
                .map(|(&v, &c)| {
                    let p = (c as f64 - discount).max(0.0) / total + gamma * lower(v);
                    (v, floor_ln(p))
                })
                .collect();
            tables.insert(ctx.clone(), ContextTable { log_probs, log_backoff: floor_ln(gamma) });
        }
        Ok(NGramModel {
            order: self.order,
            discount,
            alphabet: alphabet.clone(),
            tables,
        })
    }
}

fn floor_ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln().max(MIN_LOG_PROB)
    } else {
        MIN_LOG_PROB
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ContextTable {
    log_probs: BTreeMap<u32, f64>,
    log_backoff: f64,
}

/// Probability of `v` after the longest stored suffix of `ctx`, walking the
/// backoff chain. Only used while tables are being built (lower orders are
/// complete by then).
fn prob_from_tables(tables: &HashMap<Vec<u32>, ContextTable>, ctx: &[u32], v: u32) -> f64 {
    let mut log_weight = 0.0;
    for start in 0..=ctx.len() {
        if let Some(t) = tables.get(&ctx[start..]) {
            if let Some(lp) = t.log_probs.get(&v) {
                return (log_weight + lp).exp();
            }
            log_weight += t.log_backoff;
        }
    }
    // reachable only for the empty context; callers handle that case
    0.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    discount: f64,
    alphabet: Alphabet,
    tables: HashMap<Vec<u32>, ContextTable>,
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    fn n_labels(&self) -> u32 {
        self.alphabet.len() as u32
    }

    pub fn eos(&self) -> u32 {
        self.n_labels() + 1
    }

    pub fn unk(&self) -> u32 {
        self.n_labels() + 2
    }

    fn bos(&self) -> u32 {
        self.n_labels() + 3
    }

    /// Ids the model predicts over: labels, end-of-sentence, unknown.
    pub fn prediction_vocab(&self) -> impl Iterator<Item = u32> {
        1..=self.unk()
    }

    fn map_token(&self, t: u32) -> u32 {
        if (1..=self.eos()).contains(&t) {
            t
        } else {
            self.unk()
        }
    }

    /// Sentence-start marker plus the last `order - 1` tokens of `prefix`.
    fn history(&self, prefix: &[u32]) -> Vec<u32> {
        let keep = self.order - 1;
        let mut h: Vec<u32> = Vec::with_capacity(keep + 1);
        if prefix.len() < keep {
            h.push(self.bos());
        }
        let start = prefix.len().saturating_sub(keep);
        h.extend(prefix[start..].iter().map(|&t| self.map_token(t)));
        let excess = h.len().saturating_sub(keep);
        h.drain(..excess);
        h
    }

    /// Natural-log probability of `next` following `prefix`. Tokens outside
    /// the alphabet score as the unknown token; the value is always finite.
    pub fn log_prob_next(&self, prefix: &[u32], next: u32) -> f64 {
        self.log_prob_after(&self.history(prefix), next)
    }

    /// Log-probability of `next` in exactly the context returned by
    /// [`NGramModel::trained_contexts`], including lower-order contexts that
    /// `log_prob_next` only reaches through backoff.
    pub fn log_prob_in_context(&self, sentence_start: bool, context: &[u32], next: u32) -> f64 {
        let mut history = Vec::with_capacity(context.len() + 1);
        if sentence_start {
            history.push(self.bos());
        }
        history.extend(context.iter().map(|&t| self.map_token(t)));
        self.log_prob_after(&history, next)
    }

    fn log_prob_after(&self, history: &[u32], next: u32) -> f64 {
        let next = self.map_token(next);
        let mut log_weight = 0.0;
        for start in 0..=history.len() {
            if let Some(t) = self.tables.get(&history[start..]) {
                if let Some(lp) = t.log_probs.get(&next) {
                    return (log_weight + lp).max(MIN_LOG_PROB);
                }
                log_weight += t.log_backoff;
            }
        }
        let uniform = -f64::from(self.unk()).ln();
        (log_weight + uniform).max(MIN_LOG_PROB)
    }

    pub fn log_prob_end(&self, prefix: &[u32]) -> f64 {
        self.log_prob_next(prefix, self.eos())
    }

    /// Chain-rule log-probability of a whole transcript including the
    /// end-of-sentence event.
    pub fn score_sequence(&self, tokens: &[u32]) -> f64 {
        (0..tokens.len()).map(|i| self.log_prob_next(&tokens[..i], tokens[i])).sum::<f64>()
            + self.log_prob_end(tokens)
    }

    /// Contexts present in the model, as prefixes usable with
    /// [`NGramModel::log_prob_next`] (sentence-start contexts are returned
    /// with the marker stripped and a flag set).
    pub fn trained_contexts(&self) -> Vec<(bool, Vec<u32>)> {
        let bos = self.bos();
        let mut out: Vec<(bool, Vec<u32>)> = self
            .tables
            .keys()
            .map(|k| match k.first() {
                Some(&first) if first == bos => (true, k[1..].to_vec()),
                _ => (false, k.clone()),
            })
            .collect();
        out.sort();
        out
    }

    fn symbol(&self, id: u32) -> String {
        if id == self.eos() {
            "</s>".into()
        } else if id == self.unk() {
            "<unk>".into()
        } else if id == self.bos() {
            "<s>".into()
        } else {
            self.alphabet.decode(&TokenSeq::new(vec![id]).expect("label id")).to_string()
        }
    }

    fn parse_symbol(&self, s: &str) -> Result<u32, LmError> {
        match s {
            "</s>" => Ok(self.eos()),
            "<unk>" => Ok(self.unk()),
            "<s>" => Ok(self.bos()),
            _ => self
                .alphabet
                .encode(s)
                .ok()
                .filter(|t| t.len() == 1)
                .map(|t| t.as_slice()[0])
                .ok_or_else(|| LmError::Malformed(format!("unknown symbol {s:?}"))),
        }
    }

    pub fn to_json(&self) -> String {
        let contexts: BTreeMap<String, ContextJson> = self
            .tables
            .iter()
            .map(|(ctx, t)| {
                let key = ctx.iter().map(|&id| self.symbol(id)).collect::<Vec<_>>().join(" ");
                let log_probs = t.log_probs.iter().map(|(&v, &lp)| (self.symbol(v), lp)).collect();
                (key, ContextJson { log_backoff: t.log_backoff, log_probs })
            })
            .collect();
        let file = LmFile {
            format: FORMAT_TAG.into(),
            version: LM_FORMAT_VERSION,
            order: self.order,
            discount: self.discount,
            symbols: self.alphabet.clone(),
            contexts,
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LmError> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| LmError::Malformed(e.to_string()))?;
        if raw.get("format").and_then(|v| v.as_str()) != Some(FORMAT_TAG) {
            return Err(LmError::Malformed("missing format tag".into()));
        }
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != LM_FORMAT_VERSION {
            return Err(LmError::Version { found: version, expected: LM_FORMAT_VERSION });
        }
        let file: LmFile = serde_json::from_value(raw).map_err(|e| LmError::Malformed(e.to_string()))?;
        if file.order == 0 {
            return Err(LmError::Malformed("order 0".into()));
        }
        let mut model = NGramModel {
            order: file.order,
            discount: file.discount,
            alphabet: file.symbols,
            tables: HashMap::new(),
        };
        for (key, table) in file.contexts {
            let ctx = key
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|s| model.parse_symbol(s))
                .collect::<Result<Vec<_>, _>>()?;
            let log_probs = table
                .log_probs
                .iter()
                .map(|(s, &lp)| model.parse_symbol(s).map(|id| (id, lp)))
                .collect::<Result<_, _>>()?;
            model.tables.insert(ctx, ContextTable { log_probs, log_backoff: table.log_backoff });
        }
        if !model.tables.contains_key(&Vec::new()) {
            return Err(LmError::Malformed("missing empty context".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ContextJson {
    log_backoff: f64,
    log_probs: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct LmFile {
    format: String,
    version: u32,
    order: usize,
    discount: f64,
    symbols: Alphabet,
    contexts: BTreeMap<String, ContextJson>,
}

/// Fit an n-gram model on label sequences.
pub fn fit_ngram(texts: &[TokenSeq], alphabet: &Alphabet, order: usize, discount: f64) -> Result<NGramModel, LmError> {
    if texts.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    let mut counts = NGramCounts::new(alphabet.len(), order)?;
    for t in texts {
        counts.add_text(t.as_slice());
    }
    counts.estimate(alphabet, discount)
}

/// Fit on UTF-8 text, one transcript per line. Characters outside the
/// alphabet count as the unknown token; blank lines are skipped.
pub fn fit_ngram_lines<'a>(
    lines: impl IntoIterator<Item = &'a str>,
    alphabet: &Alphabet,
    order: usize,
    discount: f64,
) -> Result<NGramModel, LmError> {
    let unk = alphabet.len() as u32 + 2;
    let texts: Vec<Vec<u32>> = lines
        .into_iter()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .map(|line| {
            line.chars()
                .map(|c| alphabet.encode(&c.to_string()).map(|t| t.as_slice()[0]).unwrap_or(unk))
                .collect()
        })
        .collect();
    if texts.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    let mut counts = NGramCounts::new(alphabet.len(), order)?;
    for t in &texts {
        counts.add_text(t);
    }
    counts.estimate(alphabet, discount)
}
