//! Small statistics helpers for comparing uncertainty distributions.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::statistics::{Data, Max, Min, OrderStatistics};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample (pairs where x > y, ties counted 1/2).
    pub u: f64,
    pub z: f64,
    /// One-sided p-value for "x tends to be larger than y".
    pub p_value: f64,
}

/// One-sided Mann-Whitney U test using the normal approximation with tie
/// and continuity corrections. `None` when either sample is empty or every
/// value is tied.
pub fn mann_whitney_greater(x: &[f64], y: &[f64]) -> Option<MannWhitney> {
    let (n1, n2) = (x.len(), y.len());
    if n1 == 0 || n2 == 0 {
        return None;
    }
    let mut pooled: Vec<(f64, bool)> = x.iter().map(|&v| (v, true)).chain(y.iter().map(|&v| (v, false))).collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    let n = (n1 + n2) as f64;
    let mut rank_sum_x = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        rank_sum_x += avg_rank * pooled[i..=j].iter().filter(|p| p.1).count() as f64;
        i = j + 1;
    }
    let (n1, n2) = (n1 as f64, n2 as f64);
    let u = rank_sum_x - n1 * (n1 + 1.0) / 2.0;
    let mean = n1 * n2 / 2.0;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return None;
    }
    let z = (u - mean - 0.5) / var.sqrt();
    let p_value = Normal::new(0.0, 1.0).expect("standard normal").sf(z);
    Some(MannWhitney { u, z, p_value })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let mut data = Data::new(values.to_vec());
    Some(Quartiles {
        n: values.len(),
        min: data.min(),
        q1: data.lower_quartile(),
        median: data.median(),
        q3: data.upper_quartile(),
        max: data.max(),
    })
}

/// Population variance (divides by n).
pub fn population_variance(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some(values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_u(x: &[f64], y: &[f64]) -> f64 {
        x.iter()
            .flat_map(|a| y.iter().map(move |b| if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 }))
            .sum()
    }

    #[test]
    fn matches_reference_values() {
        // reference values from an independent implementation
        let x = [0.4, 0.2, 0.9, 0.9, 0.5, 0.3, 0.7, 0.0];
        let y = [0.1, 0.0, 0.2, 0.3, 0.0, 0.5, 0.05];
        let r = mann_whitney_greater(&x, &y).unwrap();
        assert_eq!(r.u, 44.5);
        assert!((r.p_value - 0.031090028142407782).abs() < 1e-9);
        let r = mann_whitney_greater(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0, 7.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!((r.p_value - 0.9892218666199918).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(mann_whitney_greater(&[], &[1.0]).is_none());
        assert!(mann_whitney_greater(&[2.0, 2.0], &[2.0]).is_none());
        assert!(quartiles(&[]).is_none());
        assert!(population_variance(&[]).is_none());
    }

    #[test]
    fn variance_and_quartiles() {
        assert_eq!(population_variance(&[0.0, 0.5]), Some(0.0625));
        let q = quartiles(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((q.min, q.median, q.max), (1.0, 2.0, 3.0));
    }

    proptest! {
        #[test]
        fn u_equals_pair_count(
            x in proptest::collection::vec(0u8..6, 1..12),
            y in proptest::collection::vec(0u8..6, 1..12),
        ) {
            let x: Vec<f64> = x.into_iter().map(f64::from).collect();
            let y: Vec<f64> = y.into_iter().map(f64::from).collect();
            if let Some(r) = mann_whitney_greater(&x, &y) {
                prop_assert_eq!(r.u, brute_u(&x, &y));
                prop_assert!((0.0..=1.0).contains(&r.p_value));
            }
        }
    }
}
