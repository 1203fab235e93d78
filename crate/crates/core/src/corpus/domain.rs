//! Domain descriptions for the synthetic corpus and the shipped presets.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::CorpusError;
use crate::seeding::rng_for;
use crate::textdist::TokenSeq;

/// Maps label ids `1..=len` to symbols. Id 0 is the CTC blank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Alphabet(String);

impl Alphabet {
    pub fn new(symbols: &str) -> Result<Self, CorpusError> {
        if symbols.is_empty() {
            return Err(CorpusError::EmptyAlphabet);
        }
        let mut seen: Vec<char> = symbols.chars().collect();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != symbols.chars().count() {
            return Err(CorpusError::InvalidSpec(format!(
                "alphabet {symbols:?} repeats a symbol"
            )));
        }
        Ok(Self(symbols.to_owned()))
    }

    /// Ten letters plus `_` as the word separator.
    pub fn default_symbols() -> Self {
        Self("abcdefghij_".to_owned())
    }

    pub fn len(&self) -> usize {
        self.0.chars().count()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of network output classes: labels plus blank.
    pub fn vocab_size(&self) -> usize {
        self.len() + 1
    }

    pub fn symbols(&self) -> &str {
        &self.0
    }

    pub fn encode(&self, text: &str) -> Result<TokenSeq, CorpusError> {
        let ids = text
            .chars()
            .map(|c| {
                self.0
                    .chars()
                    .position(|s| s == c)
                    .map(|i| i as u32 + 1)
                    .ok_or(CorpusError::UnknownSymbol(c))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TokenSeq::new(ids).expect("alphabet ids start at 1"))
    }

    pub fn decode(&self, seq: &TokenSeq) -> String {
        let symbols: Vec<char> = self.0.chars().collect();
        seq.as_slice()
            .iter()
            .map(|&id| symbols.get(id as usize - 1).copied().unwrap_or('?'))
            .collect()
    }
}

/// First-order Markov source over label ids, used to sample transcripts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextSource {
    /// Distribution of the first token, indexed by `id - 1`.
    pub initial: Vec<f64>,
    /// `transitions[i][j]` = p(next = j+1 | prev = i+1).
    pub transitions: Vec<Vec<f64>>,
}

impl TextSource {
    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> TokenSeq {
        let mut out = Vec::with_capacity(len);
        let mut dist = &self.initial;
        for _ in 0..len {
            let next = sample_categorical(dist, rng);
            out.push(next as u32 + 1);
            dist = &self.transitions[next];
        }
        TokenSeq::new(out).expect("sampled ids start at 1")
    }

    /// Convex combination `(1 - w) * self + w * other`, row by row.
    pub fn blend(&self, other: &TextSource, w: f64) -> TextSource {
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect()
        };
        TextSource {
            initial: mix(&self.initial, &other.initial),
            transitions: self
                .transitions
                .iter()
                .zip(&other.transitions)
                .map(|(a, b)| mix(a, b))
                .collect(),
        }
    }

    /// Peaked random bigram source without immediate repeats (a repeated
    /// token is acoustically a longer single token). The last symbol is the
    /// word separator and never starts a transcript.
    pub fn random(n_symbols: usize, concentration: f64, seed: u64) -> TextSource {
        let mut rng = rng_for(seed, 0);
        let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
        let sep = n_symbols - 1;
        let mut row = |forbid: Option<usize>| -> Vec<f64> {
            let mut w: Vec<f64> = (0..n_symbols)
                .map(|i| if Some(i) == forbid { 0.0 } else { gamma.sample(&mut rng) + 1e-3 })
                .collect();
            let z: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= z);
            w
        };
        let initial = row(Some(sep));
        let transitions = (0..n_symbols)
            .map(|i| row(Some(i)))
            .collect();
        TextSource { initial, transitions }
    }

    fn validate(&self, n_symbols: usize) -> Result<(), CorpusError> {
        let ok_row = |r: &[f64]| {
            r.len() == n_symbols
                && r.iter().all(|p| p.is_finite() && *p >= 0.0)
                && (r.iter().sum::<f64>() - 1.0).abs() < 1e-6
        };
        if !ok_row(&self.initial)
            || self.transitions.len() != n_symbols
            || !self.transitions.iter().all(|r| ok_row(r))
        {
            return Err(CorpusError::InvalidSpec(
                "text source rows must be distributions over the alphabet".into(),
            ));
        }
        Ok(())
    }
}

fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0)
}

/// Everything needed to synthesize utterances of one acoustic/text domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub alphabet: Alphabet,
    /// One mean feature vector per symbol, each of length `dim`.
    pub char_templates: Vec<Vec<f32>>,
    /// Inclusive frame-count range per emitted token.
    pub duration_range: (usize, usize),
    /// Row-major `dim x dim` matrix applied to every template.
    pub channel_mix: Vec<Vec<f32>>,
    pub noise_sigma: f32,
    pub text_source: TextSource,
}

/// Seeds shared by every preset so that all domains speak the same
/// "language" (same templates) and differ only in the stated factors.
const TEMPLATE_SEED: u64 = 0x5eed_0001;
const TEXT_SEED: u64 = 0x5eed_0002;
const SHIFTED_TEXT_SEED: u64 = 0x5eed_0003;
const CHANNEL_SEED: u64 = 0x5eed_0004;
pub const DEFAULT_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Source,
    TargetMild,
    TargetSevere,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Source, Preset::TargetMild, Preset::TargetSevere];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Source => "source",
            Preset::TargetMild => "target-mild",
            Preset::TargetSevere => "target-severe",
        }
    }

    pub fn parse(name: &str) -> Option<Preset> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn spec(self) -> DomainSpec {
        let alphabet = Alphabet::default_symbols();
        let n = alphabet.len();
        let templates = random_templates(n, DEFAULT_DIM, TEMPLATE_SEED);
        let source_text = TextSource::random(n, 0.3, TEXT_SEED);
        let (strength, sigma, durations, text_shift) = match self {
            Preset::Source => (0.0, 0.15, (2, 4), 0.0),
            Preset::TargetMild => (1.0, 0.3, (2, 6), 0.5),
            Preset::TargetSevere => (1.5, 0.4, (2, 7), 0.85),
        };
        let text_source = if text_shift > 0.0 {
            source_text.blend(&TextSource::random(n, 0.3, SHIFTED_TEXT_SEED), text_shift)
        } else {
            source_text
        };
        DomainSpec {
            name: self.name().to_owned(),
            alphabet,
            char_templates: templates,
            duration_range: durations,
            channel_mix: rotation_mix(DEFAULT_DIM, strength, CHANNEL_SEED),
            noise_sigma: sigma,
            text_source,
        }
    }
}

fn random_templates(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = rng_for(seed, 0);
    (0..n)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

/// Rotation angle, in radians, of the fastest-turning plane at strength 1.
pub const MAX_ROTATION: f64 = 1.0;

/// Seeded random rotation `exp(strength * MAX_ROTATION * K)`, with `K` a
/// random skew-symmetric generator scaled to spectral radius 1. Strength 0
/// is the identity; larger strengths turn every plane further.
pub fn rotation_mix(dim: usize, strength: f32, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = rng_for(seed, 0);
    let gauss = DMatrix::<f64>::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
    let skew = (&gauss - gauss.transpose()) * 0.5;
    let radius = (skew.transpose() * &skew).symmetric_eigenvalues().max().max(0.0).sqrt();
    let scale = if radius > 0.0 { f64::from(strength) * MAX_ROTATION / radius } else { 0.0 };
    let rot = (skew * scale).exp();
    (0..dim).map(|i| (0..dim).map(|j| rot[(i, j)] as f32).collect()).collect()
}

impl DomainSpec {
    pub fn dim(&self) -> usize {
        self.char_templates.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.alphabet.is_empty() {
            return Err(CorpusError::EmptyAlphabet);
        }
        let n = self.alphabet.len();
        let dim = self.dim();
        if dim == 0 || self.char_templates.len() != n {
            return Err(CorpusError::InvalidSpec(format!(
                "need {n} templates of equal nonzero dimension"
            )));
        }
        if self.char_templates.iter().any(|t| t.len() != dim) {
            return Err(CorpusError::InvalidSpec("ragged templates".into()));
        }
        let (lo, hi) = self.duration_range;
        if lo < 1 || hi < lo {
            return Err(CorpusError::InvalidSpec(format!(
                "duration range {lo}..={hi} must satisfy 1 <= min <= max"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(CorpusError::InvalidSpec("noise_sigma must be >= 0".into()));
        }
        if self.channel_mix.len() != dim || self.channel_mix.iter().any(|r| r.len() != dim) {
            return Err(CorpusError::InvalidSpec(format!("channel_mix must be {dim}x{dim}")));
        }
        let cond = self.channel_condition_number();
        if !cond.is_finite() || cond > 1e8 {
            return Err(CorpusError::InvalidSpec(format!(
                "channel_mix is singular (condition number {cond:e})"
            )));
        }
        self.text_source.validate(n)
    }

    /// 2-norm condition number of the channel mixing matrix.
    pub fn channel_condition_number(&self) -> f64 {
        let dim = self.channel_mix.len();
        if dim == 0 {
            return f64::INFINITY;
        }
        let m = DMatrix::<f64>::from_fn(dim, dim, |i, j| f64::from(self.channel_mix[i][j]));
        let sv = m.singular_values();
        let max = sv.max();
        let min = sv.min();
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// Template of `id` after the channel: `channel_mix · template`.
    pub fn mixed_template(&self, id: u32) -> Vec<f32> {
        let t = &self.char_templates[id as usize - 1];
        self.channel_mix
            .iter()
            .map(|row| row.iter().zip(t).map(|(a, b)| a * b).sum())
            .collect()
    }
}
