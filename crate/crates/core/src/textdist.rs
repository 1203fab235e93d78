//! Token-sequence edit distance and the error/recovery metrics built on it.
//!
//! All distances are over label tokens (characters of the synthetic
//! alphabet), so the "word" error rates reported elsewhere are token error
//! rates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved CTC blank label. Never appears inside a [`TokenSeq`].
pub const BLANK: u32 = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("reference sequence is empty")]
    EmptyReference,
    #[error("every reference in the corpus is empty")]
    AllReferencesEmpty,
    #[error("baseline error rate {baseline} must exceed topline {topline}")]
    DegenerateRecoveryRange { baseline: f64, topline: f64 },
    #[error("token sequence contains the blank label at position {0}")]
    BlankInSequence(usize),
}

/// Ordered list of label ids, excluding the blank.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Result<Self, MetricError> {
        match tokens.iter().position(|&t| t == BLANK) {
            Some(pos) => Err(MetricError::BlankInSequence(pos)),
            None => Ok(Self(tokens)),
        }
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }
}

impl TryFrom<Vec<u32>> for TokenSeq {
    type Error = MetricError;

    fn try_from(tokens: Vec<u32>) -> Result<Self, Self::Error> {
        Self::new(tokens)
    }
}

impl AsRef<[u32]> for TokenSeq {
    fn as_ref(&self) -> &[u32] {
        &self.0
    }
}

/// Counts of one minimal-cost alignment of a hypothesis against a reference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl EditStats {
    pub fn distance(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`.
///
/// Insertions are hypothesis tokens with no reference counterpart, deletions
/// are reference tokens missing from the hypothesis. When several alignments
/// share the minimal cost, the backtrace prefers substitutions/matches, then
/// deletions, then insertions.
pub fn levenshtein<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditStats {
    let n = hyp.len();
    let m = reference.len();
    let width = m + 1;
    let mut table = vec![0usize; (n + 1) * width];
    for j in 0..=m {
        table[j] = j;
    }
    for i in 1..=n {
        table[i * width] = i;
        for j in 1..=m {
            let sub = table[(i - 1) * width + j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            let ins = table[(i - 1) * width + j] + 1;
            let del = table[i * width + j - 1] + 1;
            table[i * width + j] = sub.min(ins).min(del);
        }
    }

    let mut stats = EditStats {
        ref_len: m,
        ..EditStats::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = table[i * width + j];
        if i > 0 && j > 0 {
            let mismatch = usize::from(hyp[i - 1] != reference[j - 1]);
            if table[(i - 1) * width + j - 1] + mismatch == here {
                stats.substitutions += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && table[i * width + j - 1] + 1 == here {
            stats.deletions += 1;
            j -= 1;
        } else {
            stats.insertions += 1;
            i -= 1;
        }
    }
    stats
}

/// Edit distance only; same value as `levenshtein(a, b).distance()` using
/// two rolling rows.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y))
                .min(prev[j + 1] + 1)
                .min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `distance(hyp, reference) / |reference|`. May exceed 1.
pub fn error_rate<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Corpus-level error rate in percent: total edits over total reference
/// length. Empty references contribute their hypothesis length as
/// insertions and nothing to the denominator.
pub fn corpus_error_rate<T, I, S>(pairs: I) -> Result<f64, MetricError>
where
    T: PartialEq,
    S: AsRef<[T]>,
    I: IntoIterator<Item = (S, S)>,
{
    let mut edits = 0usize;
    let mut ref_total = 0usize;
    for (hyp, reference) in pairs {
        let (hyp, reference) = (hyp.as_ref(), reference.as_ref());
        edits += edit_distance(hyp, reference);
        ref_total += reference.len();
    }
    if ref_total == 0 {
        return Err(MetricError::AllReferencesEmpty);
    }
    Ok(100.0 * edits as f64 / ref_total as f64)
}

/// Error-rate recovery in percent: the share of the baseline-to-topline gap
/// closed by `model`. Negative when the model is worse than the baseline.
pub fn werr(baseline: f64, topline: f64, model: f64) -> Result<f64, MetricError> {
    if !(baseline > topline) {
        return Err(MetricError::DegenerateRecoveryRange { baseline, topline });
    }
    Ok(100.0 * ((baseline - model) / (baseline - topline)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    /// Exhaustive search over edit scripts with iterative deepening on the
    /// edit budget. No DP table.
    fn brute_force_distance(a: &[char], b: &[char]) -> usize {
        fn go(a: &[char], b: &[char], budget: usize) -> bool {
            if a.is_empty() || b.is_empty() {
                return a.len().max(b.len()) <= budget;
            }
            if a[0] == b[0] && go(&a[1..], &b[1..], budget) {
                return true;
            }
            budget > 0
                && (go(&a[1..], &b[1..], budget - 1)
                    || go(&a[1..], b, budget - 1)
                    || go(a, &b[1..], budget - 1))
        }
        (0..=a.len().max(b.len())).find(|&k| go(a, b, k)).unwrap()
    }

    #[test]
    fn identity_has_zero_distance() {
        assert_eq!(levenshtein(&chars("abc"), &chars("abc")).distance(), 0);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let stats = levenshtein(&[], &chars("abc"));
        assert_eq!(stats.distance(), 3);
        assert_eq!(stats.deletions, 3);
        assert_eq!(stats.ref_len, 3);
        let stats = levenshtein(&chars("abc"), &[]);
        assert_eq!(stats.insertions, 3);
        assert_eq!(stats.ref_len, 0);
    }

    #[test]
    fn kitten_sitting() {
        let (a, b) = (chars("kitten"), chars("sitting"));
        assert_eq!(brute_force_distance(&a, &b), 3);
        let stats = levenshtein(&a, &b);
        assert_eq!(stats.distance(), 3);
        assert_eq!(stats.substitutions, 2);
        assert_eq!(stats.deletions, 1);
        assert_eq!(edit_distance(&b, &a), 3);
    }

    #[test]
    fn error_rate_examples() {
        assert_eq!(error_rate(&chars("abc"), &chars("abc")).unwrap(), 0.0);
        assert_eq!(error_rate(&[], &chars("ab")).unwrap(), 1.0);
        assert_eq!(brute_force_distance(&chars("axc"), &chars("abc")), 1);
        assert!((error_rate(&chars("axc"), &chars("abc")).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(error_rate(&chars("abc"), &[]), Err(MetricError::EmptyReference));
        assert_eq!(error_rate(&chars("abcd"), &chars("a")).unwrap(), 3.0);
    }

    #[test]
    fn corpus_error_rate_examples() {
        let p = |h: &str, r: &str| (chars(h), chars(r));
        let pairs = [p("abc", "abc"), p("ab", "ab")];
        assert_eq!(corpus_error_rate(pairs.iter().map(|(h, r)| (h, r))).unwrap(), 0.0);
        let pairs = [p("axc", "abc")];
        let cer = corpus_error_rate(pairs.iter().map(|(h, r)| (h, r))).unwrap();
        assert!((cer - 100.0 / 3.0).abs() < 1e-9);
        let pairs = [p("", "ab"), p("ab", "ab")];
        assert_eq!(corpus_error_rate(pairs.iter().map(|(h, r)| (h, r))).unwrap(), 50.0);
        let pairs = [p("xy", ""), p("ab", "ab")];
        assert_eq!(corpus_error_rate(pairs.iter().map(|(h, r)| (h, r))).unwrap(), 100.0);
        let pairs = [p("xy", "")];
        assert_eq!(
            corpus_error_rate(pairs.iter().map(|(h, r)| (h, r))),
            Err(MetricError::AllReferencesEmpty)
        );
    }

    #[test]
    fn werr_table_values() {
        let round1 = |x: f64| (x * 10.0).round() / 10.0;
        assert_eq!(round1(werr(6.8, 4.6, 6.1).unwrap()), 31.8);
        assert_eq!(round1(werr(35.0, 14.8, 26.8).unwrap()), 40.6);
        assert_eq!(werr(35.0, 14.8, 35.0).unwrap(), 0.0);
        assert_eq!(werr(35.0, 14.8, 14.8).unwrap(), 100.0);
        assert!(werr(6.8, 4.6, 7.4).unwrap() < 0.0);
        assert!(werr(4.6, 4.6, 4.0).is_err());
        assert!(werr(4.0, 4.6, 4.0).is_err());
    }

    #[test]
    fn token_seq_rejects_blank() {
        assert_eq!(TokenSeq::new(vec![1, 0, 2]), Err(MetricError::BlankInSequence(1)));
        assert_eq!(TokenSeq::new(vec![1, 2]).unwrap().len(), 2);
    }

    #[test]
    fn exhaustive_oracle_small_alphabet() {
        let alphabet = ['a', 'b'];
        let mut seqs = vec![Vec::new()];
        for len in 1..=4 {
            let mut level = vec![Vec::new()];
            for _ in 0..len {
                level = level
                    .into_iter()
                    .flat_map(|s: Vec<char>| {
                        alphabet.iter().map(move |&c| {
                            let mut s = s.clone();
                            s.push(c);
                            s
                        })
                    })
                    .collect();
            }
            seqs.extend(level);
        }
        for a in &seqs {
            for b in &seqs {
                let stats = levenshtein(a, b);
                assert_eq!(stats.distance(), brute_force_distance(a, b));
                assert_eq!(stats.distance(), edit_distance(a, b));
            }
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn seq() -> impl Strategy<Value = Vec<u8>> {
            proptest::collection::vec(0u8..4, 0..9)
        }

        proptest! {
            #[test]
            fn triangle_inequality(a in seq(), b in seq(), c in seq()) {
                prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            }

            #[test]
            fn symmetric_and_identity(a in seq(), b in seq()) {
                let d = edit_distance(&a, &b);
                prop_assert_eq!(d, edit_distance(&b, &a));
                prop_assert_eq!(d == 0, a == b);
                prop_assert_eq!(edit_distance(&a, &[]), a.len());
                prop_assert_eq!(levenshtein(&a, &b).distance(), d);
            }

            #[test]
            fn werr_is_affine(b in 10.0f64..90.0, gap in 1.0f64..9.0, m1 in 0.0f64..100.0, m2 in 0.0f64..100.0) {
                let t = b - gap;
                let mid = werr(b, t, 0.5 * (m1 + m2)).unwrap();
                let avg = 0.5 * (werr(b, t, m1).unwrap() + werr(b, t, m2).unwrap());
                prop_assert!((mid - avg).abs() < 1e-9);
                prop_assert_eq!(werr(b, t, b).unwrap(), 0.0);
                prop_assert_eq!(werr(b, t, t).unwrap(), 100.0);
            }
        }
    }
}
