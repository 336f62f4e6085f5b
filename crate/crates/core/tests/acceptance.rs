//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. The desk-scale training criterion trains
//! twelve models and takes several minutes in the test profile.

use std::time::Instant;

use pma_core::coarse::{select, AttentionMode, DEFAULT_TAU};
use pma_core::corpus::{Corpus, CorpusConfig, Split};
use pma_core::fine::{fa_forward, FaMode, FaParams};
use pma_core::harness::gradcheck::{run_all, GradcheckOptions};
use pma_core::harness::{evaluate, train, Ablation, EvalOptions, Model, TrainConfig, TrainOptions};
use pma_core::objectives::{part_loss, part_predictions, ranking_loss};
use pma_core::params::{Ctx, ParamStore};
use pma_core::visual::{pose_cnn, ImageBatch, VisualConfig, VisualParams, PARTS, REGIONS};
use pma_core::{Rng, Tape, Tensor};

const SEEDS: [u64; 3] = [0, 1, 2];
const CHANCE: f64 = 0.02;

struct Verdict {
    failed: Vec<String>,
}

impl Verdict {
    fn report(&mut self, id: &str, pass: bool, detail: String) {
        println!("{} criterion {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id.to_string());
        }
    }
}

fn gradient_correctness(v: &mut Verdict) {
    let start = Instant::now();
    let reports = run_all(&GradcheckOptions::default()).expect("gradient checks run");
    let secs = start.elapsed().as_secs_f64();
    let bad: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    let worst = reports.iter().map(|r| r.worst()).fold(0.0, f64::max);
    let pass = bad.is_empty() && reports.iter().all(|r| r.tolerance == 1e-4) && secs < 120.0;
    v.report(
        "1 gradient correctness",
        pass,
        format!("{} checks, worst rel err {worst:.2e}, failing {bad:?}, {secs:.1}s (limit 120s)", reports.len()),
    );
}

/// Literal Eqs. for the selection: q = exp(s) / Σ exp(s), keep q ≥ τ, sum kept s.
fn brute_force_select(s: &[f64], tau: f64) -> (Vec<bool>, f64) {
    let mut z = 0.0;
    for &v in s {
        z += v.exp();
    }
    let mut mask = vec![false; s.len()];
    let mut score = 0.0;
    for i in 0..s.len() {
        if s[i].exp() / z >= tau {
            mask[i] = true;
            score += s[i];
        }
    }
    (mask, score)
}

fn ca_oracle(v: &mut Verdict) {
    let start = Instant::now();
    let mut rng = Rng::new(2024);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let s = rng.uniform_vec(REGIONS, -1.0, 1.0);
        let sel = select(&s, DEFAULT_TAU, AttentionMode::Hard);
        let (mask, score) = brute_force_select(&s, DEFAULT_TAU);
        if sel.mask != mask || sel.score != score {
            mismatches += 1;
        }
    }
    let uniform = select(&[0.37; REGIONS], DEFAULT_TAU, AttentionMode::Hard);
    let tie_ok = uniform.count() == REGIONS && uniform.score == 24.0 * 0.37;
    let secs = start.elapsed().as_secs_f64();
    v.report(
        "2 CA oracle equivalence",
        mismatches == 0 && tie_ok && secs < 10.0,
        format!("{mismatches}/1000 grids differ, uniform tie selects {} with S={}, {secs:.2}s", uniform.count(), uniform.score),
    );
}

struct FaFixture {
    store: ParamStore,
    visual: VisualParams,
    fa: FaParams,
    text_dim: usize,
    b: usize,
}

fn fa_fixture() -> FaFixture {
    let b = 8;
    let text_dim = 10;
    let config = VisualConfig {
        backbone_channels: vec![4, 4, 4, 6],
        pose_channels: vec![3, 3, 4, 4],
        feature_dim: b,
        ..VisualConfig::default()
    };
    let mut rng = Rng::new(77);
    let mut store = ParamStore::new();
    let visual = VisualParams::init(&mut store, &mut rng, &config).expect("visual params");
    let fa = FaParams::init(&mut store, &mut rng, config.region_channels(), text_dim, b);
    FaFixture { store, visual, fa, text_dim, b }
}

struct FaSample {
    alpha_text: Vec<f64>,
    alpha_vis: Vec<f64>,
    score: f64,
}

fn fa_sample(f: &FaFixture, maps: &Tensor, phrases: &Tensor, mask: &[bool], regions: &Tensor) -> FaSample {
    let tape = Tape::new();
    let bound = f.store.bind(&tape, &[]);
    let ctx = Ctx::new(&tape, &bound);
    let parts = pose_cnn(&ctx, &f.visual, tape.constant(maps.clone())).expect("pose cnn");
    let out = fa_forward(&ctx, &f.fa, FaMode::Full, Some(parts), tape.constant(phrases.clone()), mask, tape.constant(regions.clone()))
        .expect("fa forward");
    let pose = out.pose.expect("pose attention");
    let sample = FaSample {
        alpha_text: tape.value(pose.alpha_text).data().to_vec(),
        alpha_vis: tape.value(pose.alpha_vis).data().to_vec(),
        score: tape.value(out.scores).data()[0],
    };
    sample
}

fn rows_other_than(a: &[f64], b: &[f64], width: usize, k: usize) -> (bool, bool) {
    let mut others_same = true;
    let mut row_k_changed = false;
    for (r, (x, y)) in a.chunks(width).zip(b.chunks(width)).enumerate() {
        let same = x.iter().zip(y).all(|(p, q)| (p - q).abs() <= 1e-12);
        if r == k {
            row_k_changed = !same;
        } else {
            others_same &= same;
        }
    }
    (others_same, row_k_changed)
}

fn fa_invariants(v: &mut Verdict) {
    let f = fa_fixture();
    let (h, w) = (f.visual.config.height, f.visual.config.width);
    let mut rng = Rng::new(99);
    let (mut sum_bad, mut range_bad, mut locality_bad) = (0, 0, 0);
    let mut worst_row = 0.0f64;
    for trial in 0..1000 {
        let m = 1 + rng.below(6);
        let mut mask: Vec<bool> = (0..m).map(|_| rng.bernoulli(0.8)).collect();
        mask[rng.below(m)] = true;
        let phrases = Tensor::new(vec![1, m, f.text_dim], rng.uniform_vec(m * f.text_dim, -1.0, 1.0)).unwrap();
        let regions = Tensor::new(vec![1, REGIONS, f.b], rng.uniform_vec(REGIONS * f.b, -1.0, 1.0)).unwrap();
        let maps = Tensor::new(vec![1, PARTS, h, w], rng.uniform_vec(PARTS * h * w, 0.0, 1.0)).unwrap();
        let base = fa_sample(&f, &maps, &phrases, &mask, &regions);

        for (alpha, width) in [(&base.alpha_text, m), (&base.alpha_vis, REGIONS)] {
            for row in alpha.chunks(width) {
                let dev = (row.iter().sum::<f64>() - 1.0).abs();
                worst_row = worst_row.max(dev);
                sum_bad += usize::from(dev > 1e-9);
            }
        }
        range_bad += usize::from(!(-6.0..=6.0).contains(&base.score));

        let k = trial % PARTS;
        let mut zeroed = maps.data().to_vec();
        zeroed[k * h * w..(k + 1) * h * w].fill(0.0);
        let zeroed = Tensor::new(vec![1, PARTS, h, w], zeroed).unwrap();
        let after = fa_sample(&f, &zeroed, &phrases, &mask, &regions);
        let (text_same, text_changed) = rows_other_than(&base.alpha_text, &after.alpha_text, m, k);
        let (vis_same, vis_changed) = rows_other_than(&base.alpha_vis, &after.alpha_vis, REGIONS, k);
        // A single unmasked phrase pins its row at 1.0, so row k cannot move.
        let single = mask.iter().filter(|&&x| x).count() == 1;
        let ok = text_same && vis_same && vis_changed && (text_changed || single);
        locality_bad += usize::from(!ok);
    }
    v.report(
        "3 FA invariants",
        sum_bad == 0 && range_bad == 0 && locality_bad == 0,
        format!(
            "1000 inputs: {sum_bad} rows off by > 1e-9 (worst {worst_row:.1e}), {range_bad} scores outside [-6, 6], {locality_bad} locality violations"
        ),
    );
}

fn loss_unit_values(v: &mut Verdict) {
    let tape = Tape::new();
    let store = ParamStore::new();
    let bound = store.bind(&tape, &[]);
    let ctx = Ctx::new(&tape, &bound);
    let scores = tape.constant(Tensor::full(&[4, 4], 0.3));
    let rank = tape.value(ranking_loss(&ctx, scores, 0.2, None).unwrap()).data()[0];
    let parts = tape.constant(Tensor::full(&[3, PARTS, 5], 0.25));
    let weights = tape.constant(Tensor::zeros(&[5, PARTS]));
    let part = tape.value(part_loss(&ctx, parts, weights).unwrap()).data()[0];
    let ln6 = 6f64.ln();
    v.report(
        "4 loss unit values",
        rank == 0.4 && (part - ln6).abs() <= 1e-12,
        format!("ranking loss {rank} (want 0.4 exactly), part loss {part} (want ln 6 = {ln6} ± 1e-12)"),
    );
}

struct Run {
    ablation: Ablation,
    seed: u64,
    model: Model,
    ratio: f64,
    top1: f64,
    secs: f64,
}

fn desk_runs(corpus: &Corpus) -> Vec<Run> {
    let mut runs = Vec::new();
    for &seed in &SEEDS {
        for ablation in Ablation::ALL {
            let cfg = ablation.apply(&TrainConfig { seed, ..TrainConfig::default() });
            let start = Instant::now();
            let (model, rep) = train(cfg, corpus, TrainOptions::default()).expect("desk training");
            let ratio = rep.final_epoch_mean().unwrap() / rep.first_epoch_mean().unwrap();
            let r = evaluate(&model, corpus, Split::Test, EvalOptions::for_model(&model)).expect("evaluation");
            let secs = start.elapsed().as_secs_f64();
            println!(
                "  seed {seed} {:<10} epochs {:>2} loss ratio {ratio:.3} top-1 {:.3} top-5 {:.3} top-10 {:.3} ({secs:.0}s)",
                ablation.label(),
                rep.epochs.len(),
                r.top1,
                r.top5,
                r.top10
            );
            runs.push(Run { ablation, seed, model, ratio, top1: r.top1, secs });
        }
    }
    runs
}

fn desk_training(v: &mut Verdict, corpus: &Corpus, runs: &[Run]) {
    assert_eq!(corpus.split_identities(Split::Train).len(), 200);
    let worst_ratio = runs.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let worst_top1 = runs.iter().map(|r| r.top1).fold(1.0, f64::min);
    let slowest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    v.report(
        "5a desk loss decrease",
        worst_ratio < 0.5 && slowest < 1800.0,
        format!("worst final/first epoch loss ratio {worst_ratio:.3} (< 0.5), slowest run {slowest:.0}s (< 1800s)"),
    );
    v.report(
        "5b desk accuracy above chance",
        worst_top1 > 10.0 * CHANCE,
        format!("worst test top-1 {worst_top1:.3} (> {:.2})", 10.0 * CHANCE),
    );
    let means: Vec<f64> = Ablation::ALL
        .iter()
        .map(|&a| {
            let xs: Vec<f64> = runs.iter().filter(|r| r.ablation == a).map(|r| r.top1).collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        })
        .collect();
    let ordered = means.windows(2).all(|w| w[0] <= w[1]);
    let gain = means[3] - means[0];
    let labels: Vec<String> = Ablation::ALL.iter().zip(&means).map(|(a, m)| format!("{} {m:.3}", a.label())).collect();
    v.report(
        "5c ablation ordering",
        ordered && gain >= 0.05,
        format!("mean top-1 {} ; ordered {ordered}, full - baseline {gain:+.3} (>= 0.05)", labels.join(", ")),
    );
}

fn selection_trend(v: &mut Verdict, corpus: &Corpus, full: &Model) {
    let r = evaluate(full, corpus, Split::Test, EvalOptions::for_model(full)).unwrap();
    let s = r.selection.expect("hard attention reports selections");
    v.report(
        "6 selection-count trend",
        s.positive_mean < s.negative_mean,
        format!("mean selected regions positive {:.3} < negative {:.3}", s.positive_mean, s.negative_mean),
    );
}

fn determinism(v: &mut Verdict, corpus: &Corpus) {
    let run = || {
        let cfg = TrainConfig { seed: 42, ..TrainConfig::default() };
        let (model, rep) = train(cfg, corpus, TrainOptions { max_steps: Some(10), ..Default::default() }).unwrap();
        let log = serde_json::to_string(&rep.steps).unwrap();
        let result = evaluate(&model, corpus, Split::Test, EvalOptions::for_model(&model)).unwrap();
        (rep.steps.len(), log, result)
    };
    let (n1, log1, res1) = run();
    let (n2, log2, res2) = run();
    v.report(
        "7 determinism",
        n1 == 10 && n2 == 10 && log1 == log2 && res1 == res2,
        format!("{n1}/{n2} logged steps, logs identical {}, retrieval results identical {}", log1 == log2, res1 == res2),
    );
}

fn part_classifier(v: &mut Verdict, corpus: &Corpus, full: &Model) {
    let test = corpus.split_images(Split::Test);
    let mut perfect = 0;
    for chunk in test.chunks(32) {
        let images: Vec<_> = chunk.iter().map(|&i| &corpus.images[i].image).collect();
        let batch = ImageBatch::new(&images, full.config.con_pose, &full.grouping).unwrap();
        let tape = Tape::new();
        let bound = full.store.bind(&tape, &[]);
        let ctx = Ctx::new(&tape, &bound);
        let parts = full.image_side(&ctx, &batch).unwrap().parts.expect("full model has part vectors");
        let pred = part_predictions(&ctx, parts, ctx.p(full.head.part)).unwrap();
        perfect += pred.chunks(PARTS).filter(|row| row.iter().enumerate().all(|(k, &p)| p == k)).count();
    }
    let frac = perfect as f64 / test.len() as f64;
    v.report(
        "8 part classifier",
        frac >= 0.95,
        format!("{perfect}/{} test images with 6/6 parts correct ({frac:.3} >= 0.95)", test.len()),
    );
}

#[test]
fn acceptance() {
    let mut v = Verdict { failed: Vec::new() };
    gradient_correctness(&mut v);
    ca_oracle(&mut v);
    fa_invariants(&mut v);
    loss_unit_values(&mut v);

    let corpus = Corpus::generate(&CorpusConfig::default()).expect("desk corpus");
    let runs = desk_runs(&corpus);
    desk_training(&mut v, &corpus, &runs);
    let full = &runs.iter().find(|r| r.ablation == Ablation::Full && r.seed == SEEDS[0]).unwrap().model;
    selection_trend(&mut v, &corpus, full);
    determinism(&mut v, &corpus);
    part_classifier(&mut v, &corpus, full);

    assert!(v.failed.is_empty(), "failed criteria: {:?}", v.failed);
}
