use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::CorpusError;
use crate::seeding::rng_for;

/// Fixed-width frequency and time masks. Widths are exact, start positions
/// are uniform over the valid range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub n_freq_masks: usize,
    pub freq_width: usize,
    pub n_time_masks: usize,
    pub time_width: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { n_freq_masks: 2, freq_width: 2, n_time_masks: 2, time_width: 4 }
    }
}

impl MaskConfig {
    pub fn none() -> Self {
        Self { n_freq_masks: 0, freq_width: 0, n_time_masks: 0, time_width: 0 }
    }
}

/// Zero out masked bands of a copy of `features` (frames x dim).
pub fn spec_augment(
    features: &Array2<f32>,
    cfg: &MaskConfig,
    seed: u64,
) -> Result<Array2<f32>, CorpusError> {
    let (frames, dim) = features.dim();
    if cfg.n_freq_masks > 0 && cfg.freq_width > dim {
        return Err(CorpusError::MaskTooWide { axis: "frequency", width: cfg.freq_width, dim });
    }
    if cfg.n_time_masks > 0 && cfg.time_width > frames {
        return Err(CorpusError::MaskTooWide { axis: "time", width: cfg.time_width, dim: frames });
    }
    let mut out = features.clone();
    let mut rng = rng_for(seed, 0);
    for _ in 0..cfg.n_freq_masks {
        let start = rng.gen_range(0..=dim - cfg.freq_width);
        out.slice_mut(s![.., start..start + cfg.freq_width]).fill(0.0);
    }
    for _ in 0..cfg.n_time_masks {
        let start = rng.gen_range(0..=frames - cfg.time_width);
        out.slice_mut(s![start..start + cfg.time_width, ..]).fill(0.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(frames: usize, dim: usize) -> Array2<f32> {
        Array2::from_shape_fn((frames, dim), |(t, d)| 1.0 + t as f32 * 0.5 - d as f32)
    }

    #[test]
    fn zero_masks_is_identity() {
        let x = ramp(10, 8);
        assert_eq!(spec_augment(&x, &MaskConfig::none(), 3).unwrap(), x);
    }

    #[test]
    fn full_width_frequency_mask_zeroes_everything() {
        let x = ramp(10, 8);
        let cfg = MaskConfig { n_freq_masks: 1, freq_width: 8, n_time_masks: 0, time_width: 0 };
        assert!(spec_augment(&x, &cfg, 3).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fixed_seed_gives_fixed_masks() {
        let x = ramp(20, 8);
        let cfg = MaskConfig::default();
        assert_eq!(spec_augment(&x, &cfg, 9).unwrap(), spec_augment(&x, &cfg, 9).unwrap());
        assert_ne!(spec_augment(&x, &cfg, 9).unwrap(), spec_augment(&x, &cfg, 10).unwrap());
    }

    #[test]
    fn oversized_masks_error() {
        let x = ramp(3, 8);
        let cfg = MaskConfig { n_freq_masks: 1, freq_width: 9, n_time_masks: 0, time_width: 0 };
        assert!(matches!(spec_augment(&x, &cfg, 0), Err(CorpusError::MaskTooWide { .. })));
        let cfg = MaskConfig { n_freq_masks: 0, freq_width: 0, n_time_masks: 1, time_width: 4 };
        assert!(matches!(spec_augment(&x, &cfg, 0), Err(CorpusError::MaskTooWide { .. })));
    }

    #[test]
    fn single_time_mask_covers_exactly_width_frames() {
        let x = ramp(12, 4);
        let cfg = MaskConfig { n_freq_masks: 0, freq_width: 0, n_time_masks: 1, time_width: 5 };
        let y = spec_augment(&x, &cfg, 1).unwrap();
        let zero_rows = y.rows().into_iter().filter(|r| r.iter().all(|&v| v == 0.0)).count();
        assert_eq!(zero_rows, 5);
    }

    proptest! {
        #[test]
        fn preserves_shape_and_never_grows(frames in 4usize..30, seed in any::<u64>()) {
            let x = ramp(frames, 8);
            let y = spec_augment(&x, &MaskConfig::default(), seed).unwrap();
            prop_assert_eq!(y.dim(), x.dim());
            prop_assert!(y.iter().zip(x.iter()).all(|(a, b)| a.abs() <= b.abs()));
        }
    }
}
