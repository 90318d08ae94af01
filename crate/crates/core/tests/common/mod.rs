//! Independent reference implementations and helpers shared by the
//! integration tests. Everything here is written with plain loops over
//! `f64` slices and does not go through the tape.

#![allow(dead_code)]

use rand::Rng as _;
use rand_distr::StandardNormal;

use svll_reid::autodiff::{Tape, Var};
use svll_reid::error::Result;
use svll_reid::param::ParamStore;
use svll_reid::rng::{substream, Rng};
use svll_reid::tensor::Tensor;

pub fn rng(label: &str, i: u64) -> Rng {
    substream(0x5eed, label, &[i])
}

pub fn normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn unit_rows(rng: &mut Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut v = normal(rng, rows * cols);
    for r in v.chunks_mut(cols) {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn tensor(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Labels in `0..classes`, each class used at least twice.
pub fn paired_labels(rng: &mut Rng, b: usize, classes: usize) -> Vec<usize> {
    assert!(b >= 2 * classes);
    let mut labels: Vec<usize> = (0..classes).flat_map(|c| [c, c]).collect();
    while labels.len() < b {
        labels.push(rng.gen_range(0..classes));
    }
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), rng);
    labels
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn row(x: &[f64], d: usize, i: usize) -> &[f64] {
    &x[i * d..(i + 1) * d]
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Text-to-image loss by the defining double sum.
pub fn naive_t2i(image: &[f64], text: &[f64], labels: &[usize], d: usize) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    for i in 0..b {
        let den: f64 = (0..b).map(|k| dot(row(image, d, i), row(text, d, k)).exp()).sum();
        let pos: Vec<usize> = (0..b).filter(|&p| labels[p] == labels[i]).collect();
        let mut s = 0.0;
        for &p in &pos {
            s += (dot(row(image, d, p), row(text, d, i)).exp() / den).ln();
        }
        total += -s / pos.len() as f64;
    }
    total / b as f64
}

/// Image-to-text loss by the defining double sum.
pub fn naive_i2t(image: &[f64], text: &[f64], labels: &[usize], d: usize) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    for i in 0..b {
        let den: f64 = (0..b).map(|k| dot(row(image, d, k), row(text, d, i)).exp()).sum();
        let pos: Vec<usize> = (0..b).filter(|&p| labels[p] == labels[i]).collect();
        let mut s = 0.0;
        for &p in &pos {
            s += (dot(row(image, d, i), row(text, d, p)).exp() / den).ln();
        }
        total += -s / pos.len() as f64;
    }
    total / b as f64
}

/// Label-smoothed cross-entropy over `[b, n]` logits.
pub fn naive_smoothed_ce(logits: &[f64], labels: &[usize], n: usize, eps: f64) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    for i in 0..b {
        let z = row(logits, n, i);
        let den: f64 = z.iter().map(|v| v.exp()).sum();
        for (a, &za) in z.iter().enumerate() {
            let q = if a == labels[i] { 1.0 - eps } else { 0.0 } + eps / n as f64;
            total -= q * (za.exp() / den).ln();
        }
    }
    total / b as f64
}

pub fn naive_i2tce(image: &[f64], id_text: &[f64], labels: &[usize], d: usize, eps: f64) -> f64 {
    let n = id_text.len() / d;
    let b = labels.len();
    let mut logits = Vec::with_capacity(b * n);
    for i in 0..b {
        for a in 0..n {
            logits.push(dot(row(image, d, i), row(id_text, d, a)));
        }
    }
    naive_smoothed_ce(&logits, labels, n, eps)
}

/// NT-Xent with partners `(2k, 2k+1)` and cosine similarity.
pub fn naive_ntxent(z: &[f64], d: usize, tau: f64) -> f64 {
    let n = z.len() / d;
    let cos = |i: usize, j: usize| {
        let (a, b) = (row(z, d, i), row(z, d, j));
        dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
    };
    let mut total = 0.0;
    for i in 0..n {
        let partner = if i % 2 == 0 { i + 1 } else { i - 1 };
        let den: f64 = (0..n).filter(|&k| k != i).map(|k| (cos(i, k) / tau).exp()).sum();
        total -= ((cos(i, partner) / tau).exp() / den).ln();
    }
    total / n as f64
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Batch-hard triplet: hardest other positive, nearest negative.
pub fn naive_triplet(x: &[f64], labels: &[usize], d: usize, margin: f64) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut dp = f64::NEG_INFINITY;
        let mut dn = f64::INFINITY;
        for j in 0..b {
            let dist = euclid(row(x, d, i), row(x, d, j));
            if j != i && labels[j] == labels[i] {
                dp = dp.max(dist);
            } else if labels[j] != labels[i] {
                dn = dn.min(dist);
            }
        }
        total += (dp - dn + margin).max(0.0);
    }
    total / b as f64
}

/// Smallest gap between the hardest positive/negative and the runner-up, and
/// the smallest hinge magnitude; small values mean the loss is near a kink.
pub fn triplet_kink_distance(x: &[f64], labels: &[usize], d: usize, margin: f64) -> f64 {
    let b = labels.len();
    let mut worst = f64::INFINITY;
    for i in 0..b {
        let mut pos: Vec<f64> = Vec::new();
        let mut neg: Vec<f64> = Vec::new();
        for j in 0..b {
            let dist = euclid(row(x, d, i), row(x, d, j));
            if j != i && labels[j] == labels[i] {
                pos.push(dist);
            } else if labels[j] != labels[i] {
                neg.push(dist);
            }
        }
        pos.sort_by(|a, b| b.total_cmp(a));
        neg.sort_by(f64::total_cmp);
        if pos.len() > 1 {
            worst = worst.min(pos[0] - pos[1]);
        }
        if neg.len() > 1 {
            worst = worst.min(neg[1] - neg[0]);
        }
        worst = worst.min((pos[0] - neg[0] + margin).abs());
    }
    worst
}

/// Brute-force retrieval scoring: every gallery entry's rank is counted
/// directly from the distances instead of sorting.
pub struct BruteReport {
    pub map: f64,
    pub cmc: [f64; 3],
    pub valid: usize,
}

pub fn brute_eval(dist: &[f64], q_ids: &[i64], q_cams: &[u32], g_ids: &[i64], g_cams: &[u32]) -> Option<BruteReport> {
    let g = g_ids.len();
    let mut ap_sum = 0.0;
    let mut cmc = [0usize; 3];
    let mut valid = 0;
    for q in 0..q_ids.len() {
        let d = &dist[q * g..(q + 1) * g];
        let keep = |j: usize| g_ids[j] >= 0 && !(g_ids[j] == q_ids[q] && g_cams[j] == q_cams[q]);
        let rank_of = |j: usize| (0..g).filter(|&k| keep(k) && (d[k] < d[j] || (d[k] == d[j] && k < j))).count();
        let mut ranks: Vec<usize> = (0..g).filter(|&j| keep(j) && g_ids[j] == q_ids[q]).map(rank_of).collect();
        if ranks.is_empty() {
            continue;
        }
        ranks.sort_unstable();
        valid += 1;
        let ap: f64 = ranks.iter().enumerate().map(|(h, &r)| (h + 1) as f64 / (r + 1) as f64).sum::<f64>() / ranks.len() as f64;
        ap_sum += ap;
        for (c, k) in cmc.iter_mut().zip([1, 5, 10]) {
            if ranks[0] < k {
                *c += 1;
            }
        }
    }
    (valid > 0).then(|| BruteReport {
        map: ap_sum / valid as f64,
        cmc: cmc.map(|c| c as f64 / valid as f64),
        valid,
    })
}

/// Analytic gradient of `build` with respect to every input against central
/// differences with step `h`; returns the worst norm-wise relative error.
pub fn grad_check(inputs: &[Tensor<f64>], h: f64, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let mut store = ParamStore::new(900);
    let ids: Vec<_> = inputs.iter().enumerate().map(|(k, t)| store.add(format!("in{k}"), t.clone(), true)).collect();
    let eval = |store: &ParamStore<f64>| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id).unwrap()).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        let analytic: Vec<f64> = grads.wrt(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for e in 0..inputs[k].len() {
            let mut s = store.clone();
            let base = s.get(id).value.data()[e];
            s.get_mut(id).value.data_mut()[e] = base + h;
            let up = eval(&s);
            s.get_mut(id).value.data_mut()[e] = base - h;
            let down = eval(&s);
            numeric.push((up - down) / (2.0 * h));
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale = dot(&analytic, &analytic).sqrt().max(dot(&numeric, &numeric).sqrt());
        if scale > 1e-12 {
            worst = worst.max(diff / scale);
        } else {
            worst = worst.max(diff);
        }
    }
    worst
}
