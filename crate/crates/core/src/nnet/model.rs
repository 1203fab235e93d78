use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ctc::ctc_loss_grad;
use super::params::{LayerNorm, Linear, FRONT_KERNEL};
use super::{DropoutMode, NnetError, Params};

const LN_EPS: f32 = 1e-5;

/// Per-pass dropout mask source. Masks are drawn in a fixed order (front-end
/// output, then per block: attention output, first FF layer, second FF
/// layer), so the seed alone determines the realization.
struct MaskStream {
    rng: Option<ChaCha8Rng>,
    p: f32,
}

impl MaskStream {
    fn new(mode: DropoutMode) -> Self {
        match mode {
            DropoutMode::Seeded { seed, p } if p > 0.0 => {
                Self { rng: Some(ChaCha8Rng::seed_from_u64(seed)), p }
            }
            _ => Self { rng: None, p: 0.0 },
        }
    }

    fn draw(&mut self, shape: (usize, usize)) -> Option<Array2<f32>> {
        let p = self.p;
        let keep = 1.0 / (1.0 - p);
        self.rng.as_mut().map(|rng| {
            Array2::from_shape_simple_fn(shape, || if rng.gen::<f32>() < p { 0.0 } else { keep })
        })
    }
}

struct NormCache {
    xhat: Array2<f32>,
    inv_std: Array1<f32>,
}

struct BlockCache {
    input: Array2<f32>,
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    probs: Vec<Array2<f32>>,
    context: Array2<f32>,
    mask_attn: Option<Array2<f32>>,
    norm1: NormCache,
    h1: Array2<f32>,
    ff1_pre: Array2<f32>,
    ff1_out: Array2<f32>,
    mask_ff1: Option<Array2<f32>>,
    mask_ff2: Option<Array2<f32>>,
    norm2: NormCache,
}

pub(crate) struct Cache {
    unrolled: Array2<f32>,
    front_pre: Array2<f32>,
    mask_embed: Option<Array2<f32>>,
    blocks: Vec<BlockCache>,
    hidden: Array2<f32>,
}

fn sinusoid_positions(frames: usize, dim: usize) -> Array2<f32> {
    Array2::from_shape_fn((frames, dim), |(t, i)| {
        let rate = 10000f32.powf((i - i % 2) as f32 / dim as f32);
        let angle = t as f32 / rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Kernel-3 strided window over frames, zero-padded by one frame on each
/// side: output row `j` holds input frames `j*stride - 1 ..= j*stride + 1`.
fn unroll_frames(x: ArrayView2<f32>, stride: usize, out_frames: usize) -> Array2<f32> {
    let (frames, dim) = x.dim();
    let mut out = Array2::zeros((out_frames, FRONT_KERNEL * dim));
    for j in 0..out_frames {
        for k in 0..FRONT_KERNEL {
            let src = (j * stride + k) as isize - 1;
            if src >= 0 && (src as usize) < frames {
                out.slice_mut(s![j, k * dim..(k + 1) * dim]).assign(&x.row(src as usize));
            }
        }
    }
    out
}

fn layer_norm(x: &Array2<f32>, ln: &LayerNorm) -> (Array2<f32>, NormCache) {
    let n = x.ncols() as f32;
    let mean = x.mean_axis(Axis(1)).expect("nonempty rows");
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / n;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * &inv_std.view().insert_axis(Axis(1));
    let y = &xhat * &ln.gamma + &ln.beta;
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &Array2<f32>, cache: &NormCache, ln: &LayerNorm, grad: &mut LayerNorm) -> Array2<f32> {
    grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.beta += &dy.sum_axis(Axis(0));
    let n = dy.ncols() as f32;
    let dxhat = dy * &ln.gamma;
    let sum_d = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
    let sum_dx = (&dxhat * &cache.xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
    let inner = dxhat * n - &sum_d - &cache.xhat * &sum_dx;
    inner * &(cache.inv_std.mapv(|s| s / n)).insert_axis(Axis(1))
}

fn softmax_rows_inplace(x: &mut Array2<f32>) {
    for mut row in x.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

/// Accumulate `x^T dy` into the weight gradient and column sums of `dy`
/// into the bias gradient; return `dy W^T`.
fn linear_backward(x: &Array2<f32>, dy: &Array2<f32>, lin: &Linear, grad: &mut Linear) -> Array2<f32> {
    general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.weight);
    grad.bias += &dy.sum_axis(Axis(0));
    dy.dot(&lin.weight.t())
}

fn mask_apply(x: Array2<f32>, mask: &Option<Array2<f32>>) -> Array2<f32> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

fn forward_cached(params: &Params, features: ArrayView2<f32>, mode: DropoutMode) -> Result<(Array2<f32>, Cache), NnetError> {
    let cfg = &params.config;
    if features.ncols() != cfg.input_dim {
        return Err(NnetError::DimensionMismatch { expected: cfg.input_dim, found: features.ncols() });
    }
    if features.nrows() == 0 {
        return Err(NnetError::Config("input has no frames".into()));
    }
    let out_frames = cfg.output_frames(features.nrows());
    let mut masks = MaskStream::new(mode);

    let unrolled = unroll_frames(features, cfg.subsample_stride, out_frames);
    let front_pre = params.front.apply(&unrolled);
    let mask_embed = masks.draw((out_frames, cfg.d_model));
    let mut h = mask_apply(front_pre.mapv(|v| v.max(0.0)) + &sinusoid_positions(out_frames, cfg.d_model), &mask_embed);

    let dk = cfg.d_model / cfg.n_heads;
    let scale = 1.0 / (dk as f32).sqrt();
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let q = block.query.apply(&h);
        let k = block.key.apply(&h);
        let v = block.value.apply(&h);
        let mut context = Array2::zeros((out_frames, cfg.d_model));
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let cols = s![.., head * dk..(head + 1) * dk];
            let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows_inplace(&mut p);
            context.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let mask_attn = masks.draw((out_frames, cfg.d_model));
        let attn = mask_apply(block.attn_out.apply(&context), &mask_attn);
        let (h1, norm1) = layer_norm(&(&h + &attn), &block.norm1);

        let ff1_pre = block.ff1.apply(&h1);
        let mask_ff1 = masks.draw((out_frames, cfg.ff_dim));
        let ff1_out = mask_apply(ff1_pre.mapv(|x| x.max(0.0)), &mask_ff1);
        let mask_ff2 = masks.draw((out_frames, cfg.d_model));
        let ff2 = mask_apply(block.ff2.apply(&ff1_out), &mask_ff2);
        let (h2, norm2) = layer_norm(&(&h1 + &ff2), &block.norm2);

        blocks.push(BlockCache {
            input: std::mem::replace(&mut h, h2),
            q,
            k,
            v,
            probs,
            context,
            mask_attn,
            norm1,
            h1,
            ff1_pre,
            ff1_out,
            mask_ff1,
            mask_ff2,
            norm2,
        });
    }
    let logits = params.output.apply(&h);
    Ok((logits, Cache { unrolled, front_pre, mask_embed, blocks, hidden: h }))
}

/// Per-frame output logits (`ceil(frames / stride) x vocab_size`).
pub fn forward(params: &Params, features: ArrayView2<f32>, mode: DropoutMode) -> Result<Array2<f32>, NnetError> {
    forward_cached(params, features, mode).map(|(logits, _)| logits)
}

fn backward(params: &Params, cache: &Cache, dlogits: &Array2<f32>, grads: &mut Params) {
    let cfg = &params.config;
    let dk = cfg.d_model / cfg.n_heads;
    let scale = 1.0 / (dk as f32).sqrt();

    let mut dh = linear_backward(&cache.hidden, dlogits, &params.output, &mut grads.output);
    for ((block, bc), gb) in params.blocks.iter().zip(&cache.blocks).zip(grads.blocks.iter_mut()).rev() {
        // feed-forward sublayer
        let g = layer_norm_backward(&dh, &bc.norm2, &block.norm2, &mut gb.norm2);
        let dff2 = mask_apply(g.clone(), &bc.mask_ff2);
        let dff1_out = linear_backward(&bc.ff1_out, &dff2, &block.ff2, &mut gb.ff2);
        let mut dff1_pre = mask_apply(dff1_out, &bc.mask_ff1);
        dff1_pre.zip_mut_with(&bc.ff1_pre, |d, &x| {
            if x <= 0.0 {
                *d = 0.0
            }
        });
        let dh1 = g + &linear_backward(&bc.h1, &dff1_pre, &block.ff1, &mut gb.ff1);

        // attention sublayer
        let g = layer_norm_backward(&dh1, &bc.norm1, &block.norm1, &mut gb.norm1);
        let dattn = mask_apply(g.clone(), &bc.mask_attn);
        let dcontext = linear_backward(&bc.context, &dattn, &block.attn_out, &mut gb.attn_out);
        let frames = dcontext.nrows();
        let mut dq = Array2::zeros((frames, cfg.d_model));
        let mut dk_mat = Array2::zeros((frames, cfg.d_model));
        let mut dv = Array2::zeros((frames, cfg.d_model));
        for (head, p) in bc.probs.iter().enumerate() {
            let cols = s![.., head * dk..(head + 1) * dk];
            let dctx = dcontext.slice(cols);
            let dp = dctx.dot(&bc.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx));
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (dp - &row_dot) * p * scale;
            dq.slice_mut(cols).assign(&ds.dot(&bc.k.slice(cols)));
            dk_mat.slice_mut(cols).assign(&ds.t().dot(&bc.q.slice(cols)));
        }
        let mut dinput = g;
        dinput += &linear_backward(&bc.input, &dq, &block.query, &mut gb.query);
        dinput += &linear_backward(&bc.input, &dk_mat, &block.key, &mut gb.key);
        dinput += &linear_backward(&bc.input, &dv, &block.value, &mut gb.value);
        dh = dinput;
    }

    let mut dpre = mask_apply(dh, &cache.mask_embed);
    dpre.zip_mut_with(&cache.front_pre, |d, &x| {
        if x <= 0.0 {
            *d = 0.0
        }
    });
    general_mat_mul(1.0, &cache.unrolled.t(), &dpre, 1.0, &mut grads.front.weight);
    grads.front.bias += &dpre.sum_axis(Axis(0));
}

/// CTC loss of `label` for one utterance, with the gradient added into
/// `grads`.
pub(crate) fn accumulate_loss_grad(
    params: &Params,
    features: ArrayView2<f32>,
    label: &[u32],
    mode: DropoutMode,
    grads: &mut Params,
) -> Result<f64, NnetError> {
    let (logits, cache) = forward_cached(params, features, mode)?;
    let (loss, dlogits) = ctc_loss_grad(logits.mapv(f64::from).view(), label)?;
    backward(params, &cache, &dlogits.mapv(|v| v as f32), grads);
    Ok(loss)
}

/// CTC loss of `label` and its gradient with respect to every parameter.
pub fn loss_and_grad(
    params: &Params,
    features: ArrayView2<f32>,
    label: &[u32],
    mode: DropoutMode,
) -> Result<(f64, Params), NnetError> {
    let mut grads = params.zeros_like();
    let loss = accumulate_loss_grad(params, features, label, mode, &mut grads)?;
    Ok((loss, grads))
}

/// CTC loss without gradient.
pub(crate) fn loss_only(params: &Params, features: ArrayView2<f32>, label: &[u32]) -> Result<f64, NnetError> {
    let logits = forward(params, features, DropoutMode::Off)?;
    Ok(ctc_loss_grad(logits.mapv(f64::from).view(), label)?.0)
}
