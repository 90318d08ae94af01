//! Release acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line straight to stderr (visible without `--nocapture`) and then asserts.
//!
//! Criteria 4, 7, 8 and 9 share one set of full training runs.

mod common;

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng as _;

use common::*;
use svll_reid::config::RunConfig;
use svll_reid::data::{generate_synthetic, Dataset, Split};
use svll_reid::eval::{average_precision, evaluate_distances, pairwise_distances, pca_project_2d, separation_ratio, SideLabels};
use svll_reid::image::{erase, erase_rect, Image};
use svll_reid::losses::{self, LabeledBatch, PairBatch};
use svll_reid::rng::substream;
use svll_reid::schedule::{cosine_lr, warmup_step_lr, PROMPT_BASE_LR};
use svll_reid::tensor::Tensor;
use svll_reid::text::{assemble_prompt, mask_prompt, PromptBank, PromptToken, Template, Vocabulary};
use svll_reid::train::{embed_split, evaluate_model, run_both_stages, Model, RunOutcome};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn report(n: usize, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2}: {verdict}  {detail}");
    assert!(ok, "criterion {n} failed: {detail}");
}

struct Arm {
    seed: u64,
    map: f64,
    rank1: f64,
    outcome: RunOutcome,
}

struct AbRuns {
    svll: Vec<Arm>,
    baseline: Vec<Arm>,
    elapsed: Duration,
}

fn baseline_config(seed: u64) -> RunConfig {
    RunConfig { seed, ..RunConfig::default() }
        .with_overrides(&["stage1.lambda_lss=0", "stage2.lambda_vss=0"])
        .unwrap()
}

fn svll_config(seed: u64) -> RunConfig {
    RunConfig { seed, ..RunConfig::default() }
}

fn train_and_score(cfg: &RunConfig, data: &Dataset) -> Arm {
    let outcome = run_both_stages(cfg, data).unwrap();
    let eval = evaluate_model(&outcome.checkpoint.model, data, cfg.eval.chunk).unwrap();
    Arm { seed: cfg.seed, map: eval.map, rank1: eval.rank1, outcome }
}

fn ab_runs() -> &'static AbRuns {
    static RUNS: OnceLock<AbRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let (mut svll, mut baseline) = (Vec::new(), Vec::new());
        for seed in SEEDS {
            let cfg = svll_config(seed);
            let data = generate_synthetic(&cfg.synthetic_spec().unwrap()).unwrap();
            svll.push(train_and_score(&cfg, &data));
            baseline.push(train_and_score(&baseline_config(seed), &data));
        }
        AbRuns { svll, baseline, elapsed: start.elapsed() }
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_01_gradients() {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(err),
        None => worst.push((name, err)),
    };
    for i in 0..20u64 {
        let mut r = rng("grad", i);
        let b = r.gen_range(2..=8usize);
        let d = r.gen_range(2..=16usize);
        let classes = r.gen_range(1..=b.min(4));
        let labels: Vec<usize> = (0..b).map(|k| if k < classes { k } else { r.gen_range(0..classes) }).collect();
        let image = tensor(b, d, unit_rows(&mut r, b, d));
        let text = tensor(b, d, unit_rows(&mut r, b, d));
        record("t2i", grad_check(&[image.clone(), text.clone()], h, |t, v| losses::t2i(t, v[0], v[1], &labels)));
        record("i2t", grad_check(&[image.clone(), text.clone()], h, |t, v| losses::i2t(t, v[0], v[1], &labels)));

        let n = r.gen_range(classes.max(2)..=8usize);
        let id_text = tensor(n, d, unit_rows(&mut r, n, d));
        record("i2tce", grad_check(&[image.clone(), id_text], h, |t, v| losses::i2tce(t, v[0], v[1], &labels, 0.1)));

        let logits = tensor(b, n, normal(&mut r, b * n));
        record("id", grad_check(&[logits], h, |t, v| losses::smoothed_ce(t, v[0], &labels, 0.1)));

        let pairs = 2 * r.gen_range(1..=4usize);
        let z = tensor(pairs, d, normal(&mut r, pairs * d));
        record("ntxent", grad_check(&[z], h, |t, v| losses::ntxent(t, v[0], 0.07)));

        // Batch-hard mining is piecewise smooth; draw until no selection or
        // hinge sits within 1e-3 of a switch.
        let tb = 2 * r.gen_range(2..=4usize);
        let (x, tl) = loop {
            let tl = paired_labels(&mut r, tb, (tb / 2).min(3));
            let x = normal(&mut r, tb * d);
            if triplet_kink_distance(&x, &tl, d, 0.3) > 1e-3 {
                break (x, tl);
            }
        };
        record("triplet", grad_check(&[tensor(tb, d, x)], h, |t, v| losses::triplet(t, v[0], &tl, 0.3)));
    }
    let elapsed = start.elapsed();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    report(
        1,
        max <= 1e-4 && elapsed < Duration::from_secs(120),
        &format!("20 batches per loss, worst relative error {max:.2e} ({detail}) in {:.1}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_02_loss_oracles() {
    let tol = 1e-10;
    let mut worst: f64 = 0.0;
    let mut check = |a: f64, b: f64| {
        worst = worst.max((a - b).abs() / b.abs().max(1.0));
    };
    for i in 0..100u64 {
        let mut r = rng("oracle", i);
        let b = r.gen_range(2..=16usize);
        let d = r.gen_range(2..=32usize);
        let classes = r.gen_range(1..=b);
        let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..classes)).collect();
        let img = unit_rows(&mut r, b, d);
        let txt = unit_rows(&mut r, b, d);
        let ib = LabeledBatch::new(tensor(b, d, img.clone()), labels.clone()).unwrap();
        let tb = LabeledBatch::new(tensor(b, d, txt.clone()), labels.clone()).unwrap();
        check(losses::loss_t2i(&tb, &ib).unwrap(), naive_t2i(&img, &txt, &labels, d));
        check(losses::loss_i2t(&ib, &tb).unwrap(), naive_i2t(&img, &txt, &labels, d));

        let n = classes.max(2);
        let eps = r.gen_range(0.0..0.5);
        let id_text = unit_rows(&mut r, n, d);
        check(
            losses::loss_i2tce(&tensor(b, d, img.clone()), &tensor(n, d, id_text.clone()), &labels, eps).unwrap(),
            naive_i2tce(&img, &id_text, &labels, d, eps),
        );
        let logits = normal(&mut r, b * n);
        check(losses::loss_id(&tensor(b, n, logits.clone()), &labels, eps).unwrap(), naive_smoothed_ce(&logits, &labels, n, eps));

        let rows = 2 * r.gen_range(1..=8usize);
        let tau = r.gen_range(0.05..1.0);
        let z = unit_rows(&mut r, rows, d);
        check(losses::loss_ntxent(&PairBatch::new(tensor(rows, d, z.clone()), tau).unwrap()).unwrap(), naive_ntxent(&z, d, tau));

        let tb_rows = 2 * r.gen_range(2..=8usize);
        let tc = r.gen_range(2..=tb_rows / 2);
        let tl = paired_labels(&mut r, tb_rows, tc);
        let x = unit_rows(&mut r, tb_rows, d);
        let margin = r.gen_range(0.0..1.0);
        let batch = LabeledBatch::new(tensor(tb_rows, d, x.clone()), tl.clone()).unwrap();
        check(losses::loss_triplet(&batch, margin).unwrap(), naive_triplet(&x, &tl, d, margin));
    }
    report(2, worst <= tol, &format!("6 losses x 100 instances, worst deviation {worst:.2e} (tolerance {tol:.0e})"));
}

#[test]
fn criterion_03_schedule_goldens() {
    let got = [
        cosine_lr(0, 60, PROMPT_BASE_LR).unwrap(),
        warmup_step_lr(0),
        warmup_step_lr(10),
        warmup_step_lr(30),
        warmup_step_lr(50),
    ];
    let want: [f64; 5] = [3.5e-4, 5e-7, 5e-6, 5e-7, 5e-8];
    let ok = got.iter().zip(&want).all(|(g, w)| g.to_bits() == w.to_bits());
    report(3, ok, &format!("cosine(0) and warmup(0/10/30/50) = {got:?}"));
}

#[test]
fn criterion_04_freezing() {
    let runs = ab_runs();
    let mut checked = 0;
    let mut ok = true;
    for arm in runs.svll.iter().chain(&runs.baseline) {
        let (s1, s2) = (&arm.outcome.stage1, &arm.outcome.stage2);
        ok &= s1.entry.image == s1.exit.image && s1.entry.text == s1.exit.text && s1.entry.bank != s1.exit.bank;
        ok &= s2.entry.bank == s2.exit.bank && s2.entry.text == s2.exit.text && s2.entry.image != s2.exit.image;
        checked += 1;
    }
    report(4, ok, &format!("{checked} two-stage runs: frozen digests unchanged, trained digests moved"));
}

#[test]
fn criterion_05_augmentation() {
    let mut ok = true;
    let mut draws = 0;
    for slots in 1..=16usize {
        let bank = PromptBank::<f32>::new(2, slots, 4, &mut substream(1, "bank", &[slots as u64])).unwrap();
        let vocab = Vocabulary::new(slots);
        let prompt = assemble_prompt(1, &bank, &vocab, Template::Person).unwrap();
        for step in 0..=20 {
            let alpha = step as f64 / 20.0;
            let want = (alpha * slots as f64).floor() as usize;
            for k in 0..10u64 {
                let mut r = substream(2, "mask", &[slots as u64, step, k]);
                let view = mask_prompt(&prompt, alpha, &mut r).unwrap();
                let masks = view.tokens.iter().filter(|t| **t == PromptToken::Mask).count();
                ok &= view.masked.len() == want && masks == want;
                ok &= view.tokens.len() == prompt.tokens.len();
                if alpha == 0.0 {
                    ok &= view == prompt;
                }
                draws += 1;
            }
        }
    }
    let mask_ok = ok;

    let mut worst_excess: i64 = i64::MIN;
    for (h, w) in [(64usize, 32usize), (16, 8), (33, 17), (8, 4), (128, 64)] {
        let mut r = substream(3, "erase.img", &[h as u64, w as u64]);
        let data: Vec<f32> = (0..h * w * 3).map(|_| r.gen()).collect();
        let img = Image::new(h, w, data).unwrap();
        let fill = [0.25, 0.5, 0.75];
        let untouched = erase(&img, 0.0, fill, &mut r).unwrap();
        ok &= untouched.image.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        for k in 0..200u64 {
            let beta = r.gen_range(0.0..0.9);
            let mut rr = substream(4, "erase", &[h as u64, w as u64, k]);
            let view = erase(&img, beta, fill, &mut rr).unwrap();
            let rect = view.rect;
            let target = (beta * (h * w) as f64).round() as i64;
            let excess = (rect.area() as i64 - target).abs() - h.max(w) as i64;
            worst_excess = worst_excess.max(excess);
            ok &= excess <= 0;
            for y in 0..h {
                for x in 0..w {
                    let p = view.image.pixel(y, x);
                    ok &= if rect.contains(y, x) { p == fill } else { p == img.pixel(y, x) };
                }
            }
            let again = erase_rect(h, w, beta, &mut substream(4, "erase", &[h as u64, w as u64, k])).unwrap();
            ok &= again == rect;
        }
    }
    report(
        5,
        ok,
        &format!(
            "{draws} maskings (mask ok: {mask_ok}), 1000 erasures, worst area excess over one row/column {worst_excess}"
        ),
    );
}

fn random_problem(i: u64) -> (Tensor<f64>, SideLabels, SideLabels) {
    let mut r = rng("eval", i);
    let (nq, ng, d) = (50, 200, 8);
    let ids = 12;
    let q = tensor(nq, d, normal(&mut r, nq * d));
    let g = tensor(ng, d, normal(&mut r, ng * d));
    let dist = pairwise_distances(&q, &g).unwrap();
    // Quantize some distances so that ties occur.
    let dist = if i % 2 == 0 { dist.map(|x| (x * 4.0).round() / 4.0) } else { dist };
    let ql = SideLabels::new((0..nq).map(|_| r.gen_range(0..ids)).collect(), (0..nq).map(|_| r.gen_range(1..=4)).collect()).unwrap();
    let gl = SideLabels::new(
        (0..ng).map(|_| if r.gen_bool(0.05) { -1 } else { r.gen_range(0..ids + 2) }).collect(),
        (0..ng).map(|_| r.gen_range(1..=4)).collect(),
    )
    .unwrap();
    (dist, ql, gl)
}

#[test]
fn criterion_06_evaluation_oracle() {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for i in 0..50 {
        let (dist, ql, gl) = random_problem(i);
        let fast = evaluate_distances(&dist, &ql, &gl).unwrap();
        let brute = brute_eval(dist.data(), &ql.ids, &ql.cams, &gl.ids, &gl.cams).unwrap();
        ok &= fast.valid_queries == brute.valid;
        for (a, b) in [fast.map, fast.rank1, fast.rank5, fast.rank10].iter().zip([brute.map, brute.cmc[0], brute.cmc[1], brute.cmc[2]]) {
            worst = worst.max((a - b).abs());
        }
    }
    let hand = average_precision(&[true, false, true]);
    ok &= worst <= 1e-10 && hand == Some(5.0 / 6.0);
    report(6, ok, &format!("50 problems of 50x200, worst deviation {worst:.2e}; AP([1,0,1]) = {hand:?}"));
}

#[test]
fn criterion_07_determinism() {
    let runs = ab_runs();
    let first = &runs.svll[0].outcome;
    let cfg = svll_config(SEEDS[0]);
    let data = generate_synthetic(&cfg.synthetic_spec().unwrap()).unwrap();
    let second = run_both_stages(&cfg, &data).unwrap();
    let a = first.checkpoint.to_bytes().unwrap();
    let b = second.checkpoint.to_bytes().unwrap();
    let ok = a == b && first.stage1_log == second.stage1_log && first.stage2_log == second.stage2_log;
    report(
        7,
        ok,
        &format!(
            "two runs of seed {}: checkpoints {} bytes identical={}, logs identical={}",
            cfg.seed,
            a.len(),
            a == b,
            first.stage1_log == second.stage1_log && first.stage2_log == second.stage2_log
        ),
    );
}

#[test]
fn criterion_08_self_supervision_ab() {
    let runs = ab_runs();
    let mut lines = vec!["seed\tsvll_map\tbase_map\tdiff\tsvll_rank1\tbase_rank1".to_string()];
    let mut json = Vec::new();
    for (s, b) in runs.svll.iter().zip(&runs.baseline) {
        lines.push(format!("{}\t{:.4}\t{:.4}\t{:+.4}\t{:.4}\t{:.4}", s.seed, s.map, b.map, s.map - b.map, s.rank1, b.rank1));
        json.push(serde_json::json!({
            "seed": s.seed, "svll_map": s.map, "baseline_map": b.map,
            "svll_rank1": s.rank1, "baseline_rank1": b.rank1,
        }));
    }
    let ms = mean(runs.svll.iter().map(|a| a.map));
    let mb = mean(runs.baseline.iter().map(|a| a.map));
    let wins = runs.svll.iter().zip(&runs.baseline).filter(|(s, b)| s.map > b.map).count();
    lines.push(format!("mean\t{ms:.4}\t{mb:.4}\t{:+.4}", ms - mb));
    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("ab_report.json");
    let doc = serde_json::json!({
        "runs": json, "mean_svll_map": ms, "mean_baseline_map": mb,
        "seeds_won": wins, "seconds": runs.elapsed.as_secs_f64(),
    });
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    let _ = writeln!(std::io::stderr(), "{}", lines.join("\n"));
    let ok = ms >= mb && ms >= 0.5 && mb >= 0.5 && runs.elapsed < Duration::from_secs(15 * 60);
    report(
        8,
        ok,
        &format!(
            "mean mAP {ms:.4} with self-supervision vs {mb:.4} without over {} seeds ({wins} won), {:.0}s, report {}",
            SEEDS.len(),
            runs.elapsed.as_secs_f64(),
            path.display()
        ),
    );
}

fn image_ratio(model: &Model, data: &Dataset, chunk: usize) -> f64 {
    let (q, ql) = embed_split(model, data, Split::Query, chunk).unwrap();
    let (g, gl) = embed_split(model, data, Split::Gallery, chunk).unwrap();
    let mut rows = q.into_data();
    rows.extend(g.into_data());
    let n = ql.len() + gl.len();
    let all = Tensor::new(vec![n, rows.len() / n], rows).unwrap();
    let ids: Vec<i64> = ql.ids.iter().chain(&gl.ids).copied().collect();
    separation_ratio(&pca_project_2d(&all).unwrap().points, &ids).unwrap()
}

#[test]
fn criterion_09_scatter_separation() {
    let runs = ab_runs();
    let arm = &runs.svll[0];
    let cfg = &arm.outcome.checkpoint.config;
    let data = generate_synthetic(&cfg.synthetic_spec().unwrap()).unwrap();
    let untrained = Model::new(cfg, data.manifest.identities).unwrap();
    let before = image_ratio(&untrained, &data, cfg.eval.chunk);
    let after = image_ratio(&arm.outcome.checkpoint.model, &data, cfg.eval.chunk);
    report(9, after < 1.0 && after < before, &format!("intra/inter ratio {before:.4} untrained -> {after:.4} after stage 2"));
}

#[test]
fn criterion_10_noiseless_rank1() {
    let mut cfg = RunConfig::default();
    cfg.dataset.synthetic = cfg.dataset.synthetic.map(|s| s.noiseless());
    let data = generate_synthetic(&cfg.synthetic_spec().unwrap()).unwrap();
    let arm = train_and_score(&cfg, &data);
    report(10, arm.rank1 == 1.0, &format!("noiseless synthetic: rank-1 {:.4}, mAP {:.4}", arm.rank1, arm.map));
}
