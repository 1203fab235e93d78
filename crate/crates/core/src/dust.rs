//! Dropout-agreement filtering of pseudo-labels.
//!
//! Each unlabeled utterance is decoded once with dropout off (the reference)
//! and once per seed with seeded dropout. The pseudo-label is kept when every
//! sampled hypothesis is within `tau * |reference|` edits of the reference.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Alphabet, Corpus, Utterance};
use crate::decode::{decode_best, DecodeConfig, DecodeError};
use crate::nnet::{forward, DropoutMode, NnetError, Params};
use crate::stats::{population_variance, quartiles, Quartiles};
use crate::textdist::{corpus_error_rate, edit_distance, MetricError, TokenSeq};

#[derive(Debug, Error)]
pub enum DustError {
    #[error("invalid filter setting: {0}")]
    Config(String),
    #[error("nothing to filter: unlabeled corpus is empty")]
    EmptyInput,
    #[error("no ground truth for utterance {0}")]
    MissingTruth(String),
    #[error("malformed decision log line {line}: {reason}")]
    MalformedLog { line: usize, reason: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TranscribeError {
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Features plus dropout setting to a single best transcript. Must be a pure
/// function of its inputs.
pub trait Transcriber: Sync {
    fn transcribe(&self, features: ArrayView2<f32>, mode: DropoutMode) -> Result<TokenSeq, TranscribeError>;
}

/// Acoustic model followed by beam search.
pub struct NetTranscriber<'a> {
    pub params: &'a Params,
    pub decode: DecodeConfig,
}

impl Transcriber for NetTranscriber<'_> {
    fn transcribe(&self, features: ArrayView2<f32>, mode: DropoutMode) -> Result<TokenSeq, TranscribeError> {
        let logits = forward(self.params, features, mode)?;
        Ok(decode_best(logits.view(), &self.decode)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmptyRefPolicy {
    /// An empty reference is never accepted.
    #[default]
    Reject,
    /// Accept an empty reference when every sample is empty too.
    AcceptIfAllEmpty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DustConfig {
    pub tau: f64,
    pub seeds: Vec<u64>,
    pub dropout_p: f32,
    pub empty_ref_policy: EmptyRefPolicy,
}

impl Default for DustConfig {
    fn default() -> Self {
        Self { tau: 0.3, seeds: vec![1, 2, 3], dropout_p: 0.1, empty_ref_policy: EmptyRefPolicy::Reject }
    }
}

impl DustConfig {
    pub fn validate(&self) -> Result<(), DustError> {
        if self.seeds.is_empty() {
            return Err(DustError::Config("at least one dropout seed is required".into()));
        }
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(DustError::Config(format!("tau must be a finite value >= 0, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(DustError::Config(format!("dropout_p must be in [0, 1), got {}", self.dropout_p)));
        }
        Ok(())
    }
}

/// The acceptance test. The ratio form `d / |ref| < tau` is used so that a
/// distance exactly at the threshold is rejected despite rounding in
/// `tau * |ref|`.
pub fn accepts(distances: &[usize], ref_len: usize, tau: f64, policy: EmptyRefPolicy) -> bool {
    if distances.is_empty() {
        return false;
    }
    let worst = *distances.iter().max().expect("nonempty");
    if ref_len == 0 {
        return policy == EmptyRefPolicy::AcceptIfAllEmpty && worst == 0;
    }
    (worst as f64) / (ref_len as f64) < tau
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterDecision {
    pub id: String,
    pub reference: TokenSeq,
    pub distances: Vec<usize>,
    pub tau: f64,
    pub accepted: bool,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PseudoLabelPool {
    /// Accepted utterances carrying their pseudo-label as transcript, in id
    /// order.
    pub corpus: Corpus,
    pub n_candidates: usize,
}

impl PseudoLabelPool {
    pub fn len(&self) -> usize {
        self.corpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.n_candidates == 0 {
            0.0
        } else {
            self.len() as f64 / self.n_candidates as f64
        }
    }

    pub fn ler(&self, truth: &HashMap<String, TokenSeq>) -> Result<f64, DustError> {
        pool_ler(
            self.corpus
                .utterances
                .iter()
                .map(|u| (u.id.as_str(), u.transcript.as_ref().expect("pool members carry pseudo-labels"))),
            truth,
        )
    }
}

/// Label error rate (percent) of pseudo-labels against ground truth.
pub fn pool_ler<'a>(
    pool: impl IntoIterator<Item = (&'a str, &'a TokenSeq)>,
    truth: &HashMap<String, TokenSeq>,
) -> Result<f64, DustError> {
    let pairs = pool
        .into_iter()
        .map(|(id, hyp)| truth.get(id).map(|t| (hyp, t)).ok_or_else(|| DustError::MissingTruth(id.to_owned())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(corpus_error_rate(pairs)?)
}

fn decide(t: &dyn Transcriber, utt: &Utterance, cfg: &DustConfig) -> FilterDecision {
    let reject = |diagnostic: String| FilterDecision {
        id: utt.id.clone(),
        reference: TokenSeq::empty(),
        distances: Vec::new(),
        tau: cfg.tau,
        accepted: false,
        diagnostic: Some(diagnostic),
    };
    let reference = match t.transcribe(utt.features.view(), DropoutMode::Off) {
        Ok(r) => r,
        Err(e) => return reject(format!("reference decode failed: {e}")),
    };
    let mut distances = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        match t.transcribe(utt.features.view(), DropoutMode::Seeded { seed, p: cfg.dropout_p }) {
            Ok(h) => distances.push(edit_distance(h.as_slice(), reference.as_slice())),
            Err(e) => return reject(format!("sampled decode with seed {seed} failed: {e}")),
        }
    }
    let accepted = accepts(&distances, reference.len(), cfg.tau, cfg.empty_ref_policy);
    FilterDecision { id: utt.id.clone(), reference, distances, tau: cfg.tau, accepted, diagnostic: None }
}

fn pool_from(unlabeled: &Corpus, decisions: &[FilterDecision]) -> PseudoLabelPool {
    let by_id: HashMap<&str, &Utterance> = unlabeled.utterances.iter().map(|u| (u.id.as_str(), u)).collect();
    let utterances = decisions
        .iter()
        .filter(|d| d.accepted)
        .map(|d| {
            let u = by_id[d.id.as_str()];
            Utterance {
                id: u.id.clone(),
                features: u.features.clone(),
                transcript: Some(d.reference.clone()),
                domain: u.domain.clone(),
            }
        })
        .collect();
    PseudoLabelPool {
        corpus: Corpus::new(unlabeled.alphabet.clone(), utterances),
        n_candidates: unlabeled.len(),
    }
}

fn check_input(unlabeled: &Corpus) -> Result<(), DustError> {
    if unlabeled.is_empty() {
        return Err(DustError::EmptyInput);
    }
    unlabeled.check_unique_ids().map_err(|e| DustError::Config(e.to_string()))
}

/// Filter `unlabeled` by dropout agreement. Decisions and pool are in
/// utterance-id order whatever the processing order.
pub fn dust_filter(
    t: &dyn Transcriber,
    unlabeled: &Corpus,
    cfg: &DustConfig,
) -> Result<(PseudoLabelPool, Vec<FilterDecision>), DustError> {
    cfg.validate()?;
    check_input(unlabeled)?;
    let mut decisions: Vec<FilterDecision> = unlabeled.utterances.par_iter().map(|u| decide(t, u, cfg)).collect();
    decisions.sort_by(|a, b| a.id.cmp(&b.id));
    let pool = pool_from(unlabeled, &decisions);
    Ok((pool, decisions))
}

/// Unfiltered pseudo-labelling: every utterance gets its reference decode.
/// Utterances whose decode fails are left out.
pub fn pseudo_label_all(t: &dyn Transcriber, unlabeled: &Corpus) -> Result<PseudoLabelPool, DustError> {
    check_input(unlabeled)?;
    let mut decisions: Vec<FilterDecision> = unlabeled
        .utterances
        .par_iter()
        .map(|u| match t.transcribe(u.features.view(), DropoutMode::Off) {
            Ok(reference) => FilterDecision {
                id: u.id.clone(),
                reference,
                distances: Vec::new(),
                tau: f64::INFINITY,
                accepted: true,
                diagnostic: None,
            },
            Err(e) => {
                log::warn!("{}: decode failed: {e}", u.id);
                FilterDecision {
                    id: u.id.clone(),
                    reference: TokenSeq::empty(),
                    distances: Vec::new(),
                    tau: f64::INFINITY,
                    accepted: false,
                    diagnostic: Some(e.to_string()),
                }
            }
        })
        .collect();
    decisions.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(pool_from(unlabeled, &decisions))
}

/// Re-apply the acceptance test at another threshold without re-decoding.
/// Failed decodes stay rejected.
pub fn replay(decisions: &[FilterDecision], tau: f64, policy: EmptyRefPolicy) -> Vec<FilterDecision> {
    decisions
        .iter()
        .map(|d| FilterDecision {
            tau,
            accepted: d.diagnostic.is_none() && accepts(&d.distances, d.reference.len(), tau, policy),
            ..d.clone()
        })
        .collect()
}

/// Rebuild the pool implied by (possibly replayed) decisions.
pub fn pool_from_decisions(unlabeled: &Corpus, decisions: &[FilterDecision]) -> Result<PseudoLabelPool, DustError> {
    let known: HashMap<&str, ()> = unlabeled.utterances.iter().map(|u| (u.id.as_str(), ())).collect();
    if let Some(d) = decisions.iter().find(|d| !known.contains_key(d.id.as_str())) {
        return Err(DustError::Config(format!("decision for unknown utterance {}", d.id)));
    }
    Ok(pool_from(unlabeled, decisions))
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    id: String,
    #[serde(rename = "ref")]
    reference: String,
    ref_len: usize,
    distances: Vec<usize>,
    tau: f64,
    accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    diagnostic: Option<String>,
}

pub fn write_decision_log(path: &Path, decisions: &[FilterDecision], alphabet: &Alphabet) -> Result<(), DustError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for d in decisions {
        let line = LogLine {
            id: d.id.clone(),
            reference: alphabet.decode(&d.reference),
            ref_len: d.reference.len(),
            distances: d.distances.clone(),
            tau: d.tau,
            accepted: d.accepted,
            diagnostic: d.diagnostic.clone(),
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_decision_log(path: &Path, alphabet: &Alphabet) -> Result<Vec<FilterDecision>, DustError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| DustError::MalformedLog { line: i + 1, reason };
        let rec: LogLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let reference = alphabet.encode(&rec.reference).map_err(|e| bad(e.to_string()))?;
        if reference.len() != rec.ref_len {
            return Err(bad(format!("ref_len {} but reference has {} tokens", rec.ref_len, reference.len())));
        }
        out.push(FilterDecision {
            id: rec.id,
            reference,
            distances: rec.distances,
            tau: rec.tau,
            accepted: rec.accepted,
            diagnostic: rec.diagnostic,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceUncertainty {
    pub id: String,
    pub domain: String,
    pub ref_len: usize,
    /// Edit distance of each sample to the reference over `ref_len`.
    pub normalized: Vec<f64>,
    /// Population variance of `normalized`; `None` for an empty reference.
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyProfile {
    pub utterances: Vec<UtteranceUncertainty>,
    /// Variance quartiles per domain tag, empty references excluded.
    pub per_domain: BTreeMap<String, Quartiles>,
    pub n_samples: usize,
}

impl UncertaintyProfile {
    pub fn variances(&self, domain: &str) -> Vec<f64> {
        self.utterances.iter().filter(|u| u.domain == domain).filter_map(|u| u.variance).collect()
    }
}

/// Per-utterance spread of dropout samples around the reference decode,
/// using dropout seeds `1..=n_samples` at `cfg.dropout_p`.
pub fn uncertainty_profile(
    t: &dyn Transcriber,
    utterances: &Corpus,
    n_samples: usize,
    cfg: &DustConfig,
) -> Result<UncertaintyProfile, DustError> {
    if n_samples < 2 {
        return Err(DustError::Config("uncertainty profile needs at least 2 samples".into()));
    }
    cfg.validate()?;
    check_input(utterances)?;
    let profile_cfg = DustConfig { seeds: (1..=n_samples as u64).collect(), ..cfg.clone() };
    let mut rows: Vec<UtteranceUncertainty> = utterances
        .utterances
        .par_iter()
        .map(|u| {
            let d = decide(t, u, &profile_cfg);
            if let Some(diag) = &d.diagnostic {
                log::warn!("{}: {diag}", u.id);
            }
            let ref_len = d.reference.len();
            let normalized: Vec<f64> = if ref_len == 0 || d.diagnostic.is_some() {
                Vec::new()
            } else {
                d.distances.iter().map(|&x| x as f64 / ref_len as f64).collect()
            };
            UtteranceUncertainty {
                id: u.id.clone(),
                domain: u.domain.clone(),
                ref_len,
                variance: population_variance(&normalized),
                normalized,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    let mut by_domain: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        if let Some(v) = r.variance {
            by_domain.entry(r.domain.clone()).or_default().push(v);
        }
    }
    let per_domain = by_domain.into_iter().filter_map(|(k, v)| quartiles(&v).map(|q| (k, q))).collect();
    Ok(UncertaintyProfile { utterances: rows, per_domain, n_samples })
}
