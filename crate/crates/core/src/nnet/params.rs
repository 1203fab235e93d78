use ndarray::{Array1, Array2};
use rand::Rng;

use super::{ModelConfig, NnetError};
use crate::seeding::rng_for;

/// Affine map `x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Array2::zeros((fan_in, fan_out)), bias: Array1::zeros(fan_out) }
    }

    fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-a..a)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn apply(&self, x: &Array2<f32>) -> Array2<f32> {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
}

impl LayerNorm {
    fn identity(dim: usize) -> Self {
        Self { gamma: Array1::ones(dim), beta: Array1::zeros(dim) }
    }

    fn zeros(dim: usize) -> Self {
        Self { gamma: Array1::zeros(dim), beta: Array1::zeros(dim) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

/// All trainable tensors. The same struct holds gradients and optimizer
/// moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    /// Kernel-3 convolution over frames, unrolled to `3 * input_dim x d_model`.
    pub front: Linear,
    pub blocks: Vec<Block>,
    pub output: Linear,
}

pub(crate) const FRONT_KERNEL: usize = 3;

impl Params {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, NnetError> {
        config.validate()?;
        let mut rng = rng_for(seed, 0);
        let d = config.d_model;
        let mut lin = |i, o| Linear::xavier(i, o, &mut rng);
        let front = lin(FRONT_KERNEL * config.input_dim, d);
        let blocks = (0..config.n_blocks)
            .map(|_| Block {
                query: lin(d, d),
                key: lin(d, d),
                value: lin(d, d),
                attn_out: lin(d, d),
                norm1: LayerNorm::identity(d),
                ff1: lin(d, config.ff_dim),
                ff2: lin(config.ff_dim, d),
                norm2: LayerNorm::identity(d),
            })
            .collect();
        let output = lin(d, config.vocab_size);
        Ok(Self { config: *config, front, blocks, output })
    }

    /// Same shapes, every value zero.
    pub fn zeros_like(&self) -> Self {
        let c = &self.config;
        let d = c.d_model;
        Self {
            config: *c,
            front: Linear::zeros(FRONT_KERNEL * c.input_dim, d),
            blocks: (0..c.n_blocks)
                .map(|_| Block {
                    query: Linear::zeros(d, d),
                    key: Linear::zeros(d, d),
                    value: Linear::zeros(d, d),
                    attn_out: Linear::zeros(d, d),
                    norm1: LayerNorm::zeros(d),
                    ff1: Linear::zeros(d, c.ff_dim),
                    ff2: Linear::zeros(c.ff_dim, d),
                    norm2: LayerNorm::zeros(d),
                })
                .collect(),
            output: Linear::zeros(d, c.vocab_size),
        }
    }

    /// `(name, shape, values)` for every tensor, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        type Named<'a> = Vec<(String, Vec<usize>, &'a [f32])>;
        fn lin<'a>(prefix: String, l: &'a Linear, out: &mut Named<'a>) {
            out.push((format!("{prefix}.weight"), l.weight.shape().to_vec(), slice(&l.weight)));
            out.push((format!("{prefix}.bias"), l.bias.shape().to_vec(), slice1(&l.bias)));
        }
        let mut out = Vec::new();
        lin("front".into(), &self.front, &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            lin(format!("blocks.{i}.query"), &b.query, &mut out);
            lin(format!("blocks.{i}.key"), &b.key, &mut out);
            lin(format!("blocks.{i}.value"), &b.value, &mut out);
            lin(format!("blocks.{i}.attn_out"), &b.attn_out, &mut out);
            out.push((format!("blocks.{i}.norm1.gamma"), vec![b.norm1.gamma.len()], slice1(&b.norm1.gamma)));
            out.push((format!("blocks.{i}.norm1.beta"), vec![b.norm1.beta.len()], slice1(&b.norm1.beta)));
            lin(format!("blocks.{i}.ff1"), &b.ff1, &mut out);
            lin(format!("blocks.{i}.ff2"), &b.ff2, &mut out);
            out.push((format!("blocks.{i}.norm2.gamma"), vec![b.norm2.gamma.len()], slice1(&b.norm2.gamma)));
            out.push((format!("blocks.{i}.norm2.beta"), vec![b.norm2.beta.len()], slice1(&b.norm2.beta)));
        }
        lin("output".into(), &self.output, &mut out);
        out
    }

    /// Mutable views in the same order as [`Params::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        fn lin<'a>(l: &'a mut Linear, out: &mut Vec<&'a mut [f32]>) {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        lin(&mut self.front, &mut out);
        for b in &mut self.blocks {
            lin(&mut b.query, &mut out);
            lin(&mut b.key, &mut out);
            lin(&mut b.value, &mut out);
            lin(&mut b.attn_out, &mut out);
            out.push(b.norm1.gamma.as_slice_mut().expect("standard layout"));
            out.push(b.norm1.beta.as_slice_mut().expect("standard layout"));
            lin(&mut b.ff1, &mut out);
            lin(&mut b.ff2, &mut out);
            out.push(b.norm2.gamma.as_slice_mut().expect("standard layout"));
            out.push(b.norm2.beta.as_slice_mut().expect("standard layout"));
        }
        lin(&mut self.output, &mut out);
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    /// Flattened copy of every value.
    pub fn flat(&self) -> Vec<f32> {
        self.named_tensors().into_iter().flat_map(|(_, _, v)| v.iter().copied()).collect()
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Params, scale: f32) {
        let src = other.flat();
        let mut offset = 0;
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v += scale * src[offset];
                offset += 1;
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.named_tensors()
            .iter()
            .flat_map(|(_, _, v)| v.iter())
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    pub(crate) fn same_shapes(&self, other: &Params) -> bool {
        let a = self.named_tensors();
        let b = other.named_tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1 == y.1)
    }
}

fn slice(a: &Array2<f32>) -> &[f32] {
    a.as_slice().expect("standard layout")
}

fn slice1(a: &Array1<f32>) -> &[f32] {
    a.as_slice().expect("standard layout")
}

/// Elementwise arithmetic mean of same-shaped checkpoints (accumulated in
/// f64, rounded once).
pub fn average_checkpoints(checkpoints: &[Params]) -> Result<Params, NnetError> {
    let first = checkpoints
        .first()
        .ok_or_else(|| NnetError::ShapeMismatch("no checkpoints to average".into()))?;
    for (i, p) in checkpoints.iter().enumerate().skip(1) {
        if !first.same_shapes(p) {
            return Err(NnetError::ShapeMismatch(format!("checkpoint {i} differs from checkpoint 0")));
        }
    }
    let mut acc = vec![0.0f64; first.n_params()];
    for p in checkpoints {
        for (a, v) in acc.iter_mut().zip(p.flat()) {
            *a += f64::from(v);
        }
    }
    let k = checkpoints.len() as f64;
    let mut out = first.clone();
    let mut offset = 0;
    for t in out.tensors_mut() {
        for v in t.iter_mut() {
            *v = (acc[offset] / k) as f32;
            offset += 1;
        }
    }
    Ok(out)
}
