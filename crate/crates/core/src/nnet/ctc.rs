use ndarray::{Array2, ArrayView2};

use super::NnetError;
use crate::textdist::BLANK;

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

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Minimum frame count able to emit `label` under CTC: one frame per token
/// plus one separating blank per adjacent repeat.
pub fn ctc_required_frames(label: &[u32]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `label` given per-frame logits (frames x
/// vocab, blank at column 0), and its exact gradient with respect to the
/// logits.
pub fn ctc_loss_grad(logits: ArrayView2<f64>, label: &[u32]) -> Result<(f64, Array2<f64>), NnetError> {
    let (frames, vocab) = logits.dim();
    if let Some(&bad) = label.iter().find(|&&t| t == BLANK || t as usize >= vocab) {
        return Err(NnetError::LabelOutOfRange(bad));
    }
    let required = ctc_required_frames(label);
    if frames < required || frames == 0 {
        return Err(NnetError::Infeasible { frames, required, label_len: label.len() });
    }

    let lp = log_softmax_rows(logits);
    let mut ext = Vec::with_capacity(2 * label.len() + 1);
    ext.push(BLANK);
    for &t in label {
        ext.push(t);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    // transition s-2 -> s allowed when s is a label differing from s-2
    let skip: Vec<bool> = (0..s_len).map(|s| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]).collect();
    let emit = |t: usize, s: usize| lp[[t, ext[s] as usize]];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = Array2::from_elem((frames, s_len), ninf);
    alpha[[0, 0]] = emit(0, 0);
    if s_len > 1 {
        alpha[[0, 1]] = emit(0, 1);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = log_add(acc, alpha[[t - 1, s - 1]]);
            }
            if skip[s] {
                acc = log_add(acc, alpha[[t - 1, s - 2]]);
            }
            if acc > ninf {
                alpha[[t, s]] = acc + emit(t, s);
            }
        }
    }

    let mut beta = Array2::from_elem((frames, s_len), ninf);
    beta[[frames - 1, s_len - 1]] = emit(frames - 1, s_len - 1);
    if s_len > 1 {
        beta[[frames - 1, s_len - 2]] = emit(frames - 1, s_len - 2);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[[t + 1, s]];
            if s + 1 < s_len {
                acc = log_add(acc, beta[[t + 1, s + 1]]);
            }
            if s + 2 < s_len && skip[s + 2] {
                acc = log_add(acc, beta[[t + 1, s + 2]]);
            }
            if acc > ninf {
                beta[[t, s]] = acc + emit(t, s);
            }
        }
    }

    let mut log_p = alpha[[frames - 1, s_len - 1]];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[[frames - 1, s_len - 2]]);
    }

    // d(-log p)/d logit[t,k] = softmax[t,k] - occupancy of class k at t
    let mut grad = lp.mapv(f64::exp);
    for t in 0..frames {
        for s in 0..s_len {
            let joint = alpha[[t, s]] + beta[[t, s]];
            if joint > ninf {
                grad[[t, ext[s] as usize]] -= (joint - emit(t, s) - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}
