//! Synthetic source/target corpora, feature masking, and manifest I/O.
//!
//! A domain is a set of per-symbol feature templates seen through a linear
//! channel with additive Gaussian noise, plus a bigram text source. The
//! presets share templates and differ in channel, noise, speaking rate, and
//! text statistics.

mod augment;
mod domain;
mod manifest;

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{spec_augment, MaskConfig};
pub use domain::{rotation_mix, Alphabet, DomainSpec, Preset, TextSource, DEFAULT_DIM};
pub use manifest::{load_manifest, save_manifest, MANIFEST_VERSION};

use crate::seeding::{derive_seed, hash_str, rng_for};
use crate::textdist::TokenSeq;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("alphabet is empty")]
    EmptyAlphabet,
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
    #[error("symbol {0:?} is not in the alphabet")]
    UnknownSymbol(char),
    #[error("mask width {width} exceeds {axis} dimension {dim}")]
    MaskTooWide { axis: &'static str, width: usize, dim: usize },
    #[error("malformed manifest {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("manifest {path} has version {found}, expected {expected}")]
    Version { path: String, found: u32, expected: u32 },
    #[error("duplicate utterance id {0}")]
    DuplicateId(String),
    #[error("utterance {0} has no transcript")]
    MissingTranscript(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Frame-major `frames x dim`.
    pub features: Array2<f32>,
    pub transcript: Option<TokenSeq>,
    pub domain: String,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Generator inputs that reproduce a corpus bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub len_range: (usize, usize),
    pub spec: DomainSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub alphabet: Alphabet,
    pub utterances: Vec<Utterance>,
    pub provenance: Option<Provenance>,
}

impl Corpus {
    pub fn new(alphabet: Alphabet, utterances: Vec<Utterance>) -> Self {
        Self { alphabet, utterances, provenance: None }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.utterances.first().map(Utterance::dim)
    }

    /// Same utterances with every transcript removed.
    pub fn unlabeled(&self) -> Corpus {
        Corpus {
            alphabet: self.alphabet.clone(),
            utterances: self
                .utterances
                .iter()
                .map(|u| Utterance { transcript: None, ..u.clone() })
                .collect(),
            provenance: None,
        }
    }

    /// Ground-truth transcripts keyed by id, for evaluation-only paths.
    pub fn truth(&self) -> Result<HashMap<String, TokenSeq>, CorpusError> {
        self.utterances
            .iter()
            .map(|u| {
                u.transcript
                    .clone()
                    .map(|t| (u.id.clone(), t))
                    .ok_or_else(|| CorpusError::MissingTranscript(u.id.clone()))
            })
            .collect()
    }

    /// Concatenation; ids must stay unique.
    pub fn concat(&self, other: &Corpus) -> Result<Corpus, CorpusError> {
        let mut utterances = self.utterances.clone();
        utterances.extend(other.utterances.iter().cloned());
        let out = Corpus::new(self.alphabet.clone(), utterances);
        out.check_unique_ids()?;
        Ok(out)
    }

    pub fn check_unique_ids(&self) -> Result<(), CorpusError> {
        let mut seen = std::collections::HashSet::new();
        for u in &self.utterances {
            if !seen.insert(u.id.as_str()) {
                return Err(CorpusError::DuplicateId(u.id.clone()));
            }
        }
        Ok(())
    }
}

/// Draw `n_utts` labeled utterances from `spec`.
///
/// Utterance `i` uses its own random stream keyed by `(seed, domain, i)`, so
/// the result does not depend on generation order.
pub fn synth_corpus(
    spec: &DomainSpec,
    n_utts: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    if n_utts == 0 {
        return Err(CorpusError::InvalidSpec("n_utts must be >= 1".into()));
    }
    if len_range.0 < 1 || len_range.1 < len_range.0 {
        return Err(CorpusError::InvalidSpec(format!(
            "token length range {}..={} must satisfy 1 <= min <= max",
            len_range.0, len_range.1
        )));
    }
    let mixed: Vec<Vec<f32>> =
        (1..=spec.alphabet.len() as u32).map(|id| spec.mixed_template(id)).collect();
    let noise = Normal::new(0.0f32, spec.noise_sigma).expect("validated sigma");
    let stream_base = derive_seed(seed, hash_str(&spec.name));

    let utterances = (0..n_utts)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(stream_base, i as u64);
            let len = rng.gen_range(len_range.0..=len_range.1);
            let transcript = spec.text_source.sample(len, &mut rng);
            let mut rows: Vec<f32> = Vec::new();
            let mut frames = 0;
            for &id in transcript.as_slice() {
                let dur = rng.gen_range(spec.duration_range.0..=spec.duration_range.1);
                for _ in 0..dur {
                    rows.extend(mixed[id as usize - 1].iter().map(|&m| {
                        if spec.noise_sigma > 0.0 {
                            m + noise.sample(&mut rng)
                        } else {
                            m
                        }
                    }));
                    frames += 1;
                }
            }
            Utterance {
                id: format!("{}-s{}-{:05}", spec.name, seed, i),
                features: Array2::from_shape_vec((frames, spec.dim()), rows)
                    .expect("row-major frame buffer"),
                transcript: Some(transcript),
                domain: spec.name.clone(),
            }
        })
        .collect();

    Ok(Corpus {
        alphabet: spec.alphabet.clone(),
        utterances,
        provenance: Some(Provenance { seed, len_range, spec: spec.clone() }),
    })
}

/// Mean over frames of the distance to the nearest clean source template.
pub fn mean_template_distance(utt: &Utterance, templates: &[Vec<f32>]) -> f64 {
    let total: f64 = utt
        .features
        .rows()
        .into_iter()
        .map(|frame| {
            templates
                .iter()
                .map(|t| {
                    frame
                        .iter()
                        .zip(t)
                        .map(|(a, b)| f64::from(a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / utt.n_frames() as f64
}
