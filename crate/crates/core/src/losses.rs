//! Training objectives.
//!
//! The tape-level functions (`t2i`, `i2t`, `i2tce`, `ntxent`, `triplet`,
//! `smoothed_ce`) build differentiable graphs and are what the training loops
//! call. The `loss_*` functions wrap them for plain value evaluation on
//! [`LabeledBatch`] / [`PairBatch`] inputs.
//!
//! Text-image similarities are raw dot products of unit embeddings. Every
//! per-anchor loss is averaged over the anchors of the batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_SMOOTHING: f64 = 0.1;
pub const DEFAULT_SSL_WEIGHT: f64 = 0.8;

const NORM_TOL: f64 = 1e-6;

/// Unit-norm embeddings with one identity label per row.
#[derive(Clone, Debug)]
pub struct LabeledBatch<T> {
    pub embeddings: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> LabeledBatch<T> {
    pub fn new(embeddings: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for embeddings of shape {:?}",
                labels.len(),
                embeddings.shape()
            )));
        }
        check_unit_rows(&embeddings)?;
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `2V` unit embeddings ordered as positive pairs `(2k, 2k+1)`.
#[derive(Clone, Debug)]
pub struct PairBatch<T> {
    pub embeddings: Tensor<T>,
    pub tau: f64,
}

impl<T: Real> PairBatch<T> {
    pub fn new(embeddings: Tensor<T>, tau: f64) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.rows() % 2 != 0 {
            return Err(Error::Shape(format!("pair batch needs an even row count, got {:?}", embeddings.shape())));
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
        check_unit_rows(&embeddings)?;
        Ok(Self { embeddings, tau })
    }
}

fn check_unit_rows<T: Real>(t: &Tensor<T>) -> Result<()> {
    for r in 0..t.rows() {
        let n = t.row(r).iter().map(|&x| x * x).sum::<T>().sqrt().as_f64();
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidArgument(format!("row {r} has norm {n}, expected unit")));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_lss: f64,
    pub lambda_vss: f64,
    pub smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_lss: DEFAULT_SSL_WEIGHT, lambda_vss: DEFAULT_SSL_WEIGHT, smoothing: DEFAULT_SMOOTHING }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lss >= 0.0 && self.lambda_vss >= 0.0) {
            return Err(Error::InvalidArgument("loss weights must be nonnegative".into()));
        }
        check_smoothing(self.smoothing)
    }
}

fn check_smoothing(eps: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!("label smoothing {eps} outside [0, 1)")));
    }
    Ok(())
}

/// Positive sets: `members[i]` lists every row sharing row `i`'s label.
fn positive_sets(labels: &[usize]) -> Vec<Vec<usize>> {
    labels
        .iter()
        .map(|&y| labels.iter().enumerate().filter(|(_, &l)| l == y).map(|(p, _)| p).collect())
        .collect()
}

fn sim_matrix<T: Real>(tape: &mut Tape<T>, image: Var, text: Var, labels: &[usize]) -> Result<Var> {
    let (si, st) = (tape.shape(image).to_vec(), tape.shape(text).to_vec());
    if si != st || si.len() != 2 {
        return Err(Error::Shape(format!("image {si:?} and text {st:?} batches must align")));
    }
    if si[0] != labels.len() {
        return Err(Error::InvalidArgument(format!("{} labels for {} rows", labels.len(), si[0])));
    }
    let tt = tape.transpose(text)?;
    tape.matmul(image, tt)
}

/// Text-to-image contrastive loss. With `S = I T^T`, each anchor `i` scores
/// `logsumexp_k S[i,k] - mean_{p in P(i)} S[p,i]`.
pub fn t2i<T: Real>(tape: &mut Tape<T>, image: Var, text: Var, labels: &[usize]) -> Result<Var> {
    let s = sim_matrix(tape, image, text, labels)?;
    let b = labels.len();
    let lse = tape.logsumexp(s)?;
    let mut w = vec![T::zero(); b * b];
    for (i, pos) in positive_sets(labels).iter().enumerate() {
        let share = T::c(1.0 / pos.len() as f64);
        for &p in pos {
            w[p * b + i] += share;
        }
    }
    contrastive_tail(tape, s, lse, w, b)
}

/// Image-to-text contrastive loss. With `S = I T^T`, each anchor `i` scores
/// `logsumexp_k S[k,i] - mean_{p in P(i)} S[i,p]`.
pub fn i2t<T: Real>(tape: &mut Tape<T>, image: Var, text: Var, labels: &[usize]) -> Result<Var> {
    let s = sim_matrix(tape, image, text, labels)?;
    let b = labels.len();
    let st = tape.transpose(s)?;
    let lse = tape.logsumexp(st)?;
    let mut w = vec![T::zero(); b * b];
    for (i, pos) in positive_sets(labels).iter().enumerate() {
        let share = T::c(1.0 / pos.len() as f64);
        for &p in pos {
            w[i * b + p] += share;
        }
    }
    contrastive_tail(tape, s, lse, w, b)
}

fn contrastive_tail<T: Real>(tape: &mut Tape<T>, s: Var, lse: Var, w: Vec<T>, b: usize) -> Result<Var> {
    let w = tape.constant(Tensor::from_parts(vec![b, b], w))?;
    let pos = tape.mul(s, w)?;
    let pos = tape.sum(pos)?;
    let den = tape.sum(lse)?;
    let diff = tape.sub(den, pos)?;
    tape.scale(diff, 1.0 / b as f64)
}

/// Label-smoothed cross-entropy of `logits` (`[B, N]`) against
/// `q_a = (1 - eps) [a = y] + eps / N`, averaged over rows.
pub fn smoothed_ce<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    check_smoothing(eps)?;
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape(format!("logits {shape:?} for {} labels", labels.len())));
    }
    let (b, n) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::LabelOutOfRange { label: bad, classes: n });
    }
    let mut q = vec![T::zero(); b * n];
    for (i, &y) in labels.iter().enumerate() {
        let row = smoothed_target(y, n, eps);
        for (a, v) in row.into_iter().enumerate() {
            q[i * n + a] = T::c(v);
        }
    }
    let ls = tape.log_softmax(logits, None)?;
    let q = tape.constant(Tensor::from_parts(vec![b, n], q))?;
    let prod = tape.mul(ls, q)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / b as f64)
}

/// Smoothed target distribution for true class `y` among `n`.
pub fn smoothed_target(y: usize, n: usize, eps: f64) -> Vec<f64> {
    (0..n).map(|a| if a == y { 1.0 - eps } else { 0.0 } + eps / n as f64).collect()
}

/// Image-to-text cross-entropy against fixed per-identity text features
/// (`[N, d]`), logits are `I T^T`.
pub fn i2tce<T: Real>(tape: &mut Tape<T>, image: Var, id_text: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let tt = tape.transpose(id_text)?;
    let logits = tape.matmul(image, tt)?;
    smoothed_ce(tape, logits, labels, eps)
}

/// NT-Xent over rows paired as `(2k, 2k+1)`: each anchor's positive against
/// every other row, cosine similarity over `tau`.
pub fn ntxent<T: Real>(tape: &mut Tape<T>, z: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || shape[0] % 2 != 0 || shape[0] == 0 {
        return Err(Error::Shape(format!("ntxent needs an even row count, got {shape:?}")));
    }
    let n = shape[0];
    let sim = tape.cosine_similarity(z, z)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let exclude: Vec<bool> = (0..n * n).map(|k| k / n == k % n).collect();
    let ls = tape.log_softmax(logits, Some(exclude))?;
    let picks: Vec<usize> = (0..n).map(|i| i * n + (i ^ 1)).collect();
    let pos = tape.pick(ls, &picks)?;
    let s = tape.sum(pos)?;
    tape.scale(s, -1.0 / n as f64)
}

/// Hinge term of one triplet.
pub fn triplet_hinge(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (d_pos - d_neg + margin).max(0.0)
}

/// Batch-hard triplet loss with Euclidean distances: for each anchor the
/// farthest other positive and the nearest negative.
pub fn triplet<T: Real>(tape: &mut Tape<T>, x: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let n = labels.len();
    if tape.shape(x).first() != Some(&n) {
        return Err(Error::InvalidArgument(format!("{} labels for {:?}", n, tape.shape(x))));
    }
    check_triplet_batch(labels)?;
    let d2 = tape.pairwise_sq_dist(x)?;
    let dv = tape.value(d2).data().to_vec();
    let mut hard_pos = Vec::with_capacity(n);
    let mut hard_neg = Vec::with_capacity(n);
    for i in 0..n {
        let mut best_p: Option<usize> = None;
        let mut best_n: Option<usize> = None;
        for j in 0..n {
            let v = dv[i * n + j];
            if labels[j] == labels[i] {
                if j != i && best_p.map_or(true, |b| v > dv[i * n + b]) {
                    best_p = Some(j);
                }
            } else if best_n.map_or(true, |b| v < dv[i * n + b]) {
                best_n = Some(j);
            }
        }
        hard_pos.push(i * n + best_p.expect("checked: every identity has two rows"));
        hard_neg.push(i * n + best_n.expect("checked: at least two identities"));
    }
    let dp = tape.pick(d2, &hard_pos)?;
    let dn = tape.pick(d2, &hard_neg)?;
    let dp = tape.sqrt(dp)?;
    let dn = tape.sqrt(dn)?;
    let gap = tape.sub(dp, dn)?;
    let gap = tape.add_scalar(gap, margin)?;
    let h = tape.relu(gap)?;
    tape.mean(h)
}

fn check_triplet_batch(labels: &[usize]) -> Result<()> {
    let mut counts = std::collections::BTreeMap::new();
    for &y in labels {
        *counts.entry(y).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::InvalidArgument("triplet loss needs at least two identities".into()));
    }
    if let Some((y, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::InvalidArgument(format!("identity {y} has fewer than two rows")));
    }
    Ok(())
}

/// Stage-1 objective: `t2i + i2t + lambda_lss * lss`.
pub fn stage1_total(t2i: f64, i2t: f64, lss: f64, lambda_lss: f64) -> f64 {
    t2i + i2t + lambda_lss * lss
}

/// Stage-2 objective: `i2tce + id + tri + lambda_vss * vss`.
pub fn stage2_total(i2tce: f64, id: f64, tri: f64, vss: f64, lambda_vss: f64) -> f64 {
    i2tce + id + tri + lambda_vss * vss
}

fn eval_scalar<T: Real>(build: impl FnOnce(&mut Tape<T>) -> Result<Var>) -> Result<T> {
    let mut tape = Tape::new();
    let v = build(&mut tape)?;
    Ok(tape.value(v).item())
}

fn check_aligned<T: Real>(a: &LabeledBatch<T>, b: &LabeledBatch<T>) -> Result<()> {
    if a.labels != b.labels {
        return Err(Error::InvalidArgument("text and image labels are misaligned".into()));
    }
    Ok(())
}

pub fn loss_t2i<T: Real>(text: &LabeledBatch<T>, image: &LabeledBatch<T>) -> Result<T> {
    check_aligned(text, image)?;
    eval_scalar(|tape| {
        let i = tape.constant(image.embeddings.clone())?;
        let t = tape.constant(text.embeddings.clone())?;
        t2i(tape, i, t, &image.labels)
    })
}

pub fn loss_i2t<T: Real>(image: &LabeledBatch<T>, text: &LabeledBatch<T>) -> Result<T> {
    check_aligned(text, image)?;
    eval_scalar(|tape| {
        let i = tape.constant(image.embeddings.clone())?;
        let t = tape.constant(text.embeddings.clone())?;
        i2t(tape, i, t, &image.labels)
    })
}

pub fn loss_i2tce<T: Real>(image: &Tensor<T>, id_text: &Tensor<T>, labels: &[usize], eps: f64) -> Result<T> {
    eval_scalar(|tape| {
        let i = tape.constant(image.clone())?;
        let t = tape.constant(id_text.clone())?;
        i2tce(tape, i, t, labels, eps)
    })
}

pub fn loss_ntxent<T: Real>(pairs: &PairBatch<T>) -> Result<T> {
    eval_scalar(|tape| {
        let z = tape.constant(pairs.embeddings.clone())?;
        ntxent(tape, z, pairs.tau)
    })
}

pub fn loss_triplet<T: Real>(batch: &LabeledBatch<T>, margin: f64) -> Result<T> {
    eval_scalar(|tape| {
        let x = tape.constant(batch.embeddings.clone())?;
        triplet(tape, x, &batch.labels, margin)
    })
}

pub fn loss_id<T: Real>(logits: &Tensor<T>, labels: &[usize], eps: f64) -> Result<T> {
    eval_scalar(|tape| {
        let z = tape.constant(logits.clone())?;
        smoothed_ce(tape, z, labels, eps)
    })
}
