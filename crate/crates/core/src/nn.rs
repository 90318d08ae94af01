//! Transformer building blocks shared by the text and image encoders.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn normal_tensor<T: Real>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::c(dist.sample(rng))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn uniform_tensor<T: Real>(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::c(rng.gen_range(-bound..bound))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_tensor(&[fan_in, fan_out], bound, rng), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), true);
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], T::one()), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), true);
        Self { gain, bias }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain)?;
        let b = tape.param(store, self.bias)?;
        let n = tape.layer_norm(x, LN_EPS)?;
        let s = tape.mul_row(n, g)?;
        tape.add_row(s, b)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    width: usize,
    heads: usize,
}

impl Block {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "width must split evenly across heads");
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, rng),
            proj: Linear::new(store, &format!("{name}.proj"), width, width, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            fc1: Linear::new(store, &format!("{name}.fc1"), width, mlp_ratio * width, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), mlp_ratio * width, width, rng),
            width,
            heads,
        }
    }

    /// `x` holds `seqs` sequences of `len` tokens as a `[seqs * len, width]` matrix.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        seqs: usize,
        len: usize,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let qkv = self.qkv.forward(tape, store, h)?;
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = tape.slice_cols(qkv, head * dh, dh)?;
            let k = tape.slice_cols(qkv, self.width + head * dh, dh)?;
            let v = tape.slice_cols(qkv, 2 * self.width + head * dh, dh)?;
            let q = tape.reshape(q, &[seqs, len, dh])?;
            let k = tape.reshape(k, &[seqs, len, dh])?;
            let v = tape.reshape(v, &[seqs, len, dh])?;
            let kt = tape.transpose(k)?;
            let scores = tape.bmm(q, kt)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores)?;
            let o = tape.bmm(attn, v)?;
            outs.push(tape.reshape(o, &[seqs * len, dh])?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let a = self.proj.forward(tape, store, merged)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, store, h)?;
        tape.add(x, h)
    }
}
