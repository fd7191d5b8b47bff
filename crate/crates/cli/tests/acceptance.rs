//! Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

use std::collections::BTreeSet;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use roleret::check::model_gradcheck;
use roleret::config::RunConfig;
use roleret::data::{synth_corpus, Corpus, SynthConfig};
use roleret::eval::{encode_corpus, evaluate, median_rank, oracle_metrics, ranks_from_scores, recall_at_k, score_matrix, Direction, RetrievalReport, DEFAULT_KS};
use roleret::matching::{contrastive_loss_value, expert_weights, level_cosine, WeightingMode};
use roleret::model::Model;
use roleret::tensor::{Precision, Tensor};
use roleret::text::{EmbeddingTable, Vocabulary};
use roleret::train::Trainer;
use roleret::video::{AttentionDesign, ExpertFeatures};

/// Prints the verdict line, then fails the test when `ok` is false.
fn verdict(id: u32, name: &str, ok: bool, detail: String) {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {id}: {name}: {detail}");
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

#[test]
fn criterion_1_gradient_oracle() {
    let start = Instant::now();
    let cfg = RunConfig::gradcheck_defaults();
    assert_eq!(
        (cfg.model.model_dim, cfg.model.heads, cfg.gradcheck.vocab, cfg.gradcheck.batch),
        (8, 2, 20, 3)
    );
    assert_eq!(cfg.train.margin, 0.2);
    assert_eq!(cfg.model.precision, Precision::F64);
    assert_eq!(cfg.gradcheck.h, 1e-5);
    let report = model_gradcheck(&cfg, None).unwrap();
    let checked: BTreeSet<&str> = report.params.iter().map(|p| p.name.as_str()).collect();
    let expected = cfg.model.param_specs(cfg.gradcheck.vocab + 1);
    let all_covered = expected.iter().all(|s| checked.contains(s.name.as_str()));
    let elapsed = start.elapsed();
    let ok = report.passed() && report.max_rel_error() <= 1e-4 && all_covered && within(elapsed, 60);
    verdict(
        1,
        "gradient oracle",
        ok,
        format!(
            "{} tensors / {} entries, max rel error {:.3e}, all parameters covered: {all_covered}, {:.1}s",
            report.params.len(),
            report.entries_checked(),
            report.max_rel_error(),
            elapsed.as_secs_f64()
        ),
    );
}

fn small_model_config(run: &mut RunConfig) {
    for (k, v) in [
        ("model_dim", "64"),
        ("heads", "4"),
        ("ff_dim", "128"),
        ("word_dim", "64"),
        ("dim_2d", "64"),
        ("dim_3d", "64"),
        ("dim_roi", "64"),
    ] {
        run.set(k, v).unwrap();
    }
}

#[test]
fn criterion_2_random_baseline() {
    let start = Instant::now();
    let mut run = RunConfig::default();
    small_model_config(&mut run);
    for (k, v) in [("clips", "1000"), ("classes", "1000"), ("captions_per_clip", "2"), ("seed", "1")] {
        run.set(k, v).unwrap();
    }
    let corpus = synth_corpus(&run.synth).unwrap().corpus;
    let trainer = Trainer::from_config(&run, &corpus).unwrap();
    let r = evaluate(&trainer.model, &corpus, Direction::TextToVideo).unwrap();
    let elapsed = start.elapsed();
    let ok = r.gallery_size == 1000
        && r.queries >= 2000
        && (r.recall(1) - 0.1).abs() <= 0.5
        && (r.recall(5) - 0.5).abs() <= 0.5
        && (r.recall(10) - 1.0).abs() <= 0.5
        && (450..=550).contains(&r.median_rank)
        && within(elapsed, 300);
    verdict(2, "random baseline", ok, format!("{r}, {:.1}s", elapsed.as_secs_f64()));
}

fn overfit_run() -> (RunConfig, Corpus) {
    let mut run = RunConfig::default();
    small_model_config(&mut run);
    for (k, v) in [("clips", "64"), ("classes", "8"), ("batch_size", "16"), ("lr", "1e-4"), ("eval_every", "5")] {
        run.set(k, v).unwrap();
    }
    let corpus = synth_corpus(&run.synth).unwrap().corpus;
    (run, corpus)
}

/// Trains until text→video R@1 = 100% and MedR = 1, or `max_epochs`.
fn train_until_solved(run: &RunConfig, corpus: &Corpus, max_epochs: usize) -> (Option<usize>, Vec<String>) {
    let mut trainer = Trainer::from_config(run, corpus).unwrap();
    let mut lines = Vec::new();
    while trainer.epoch < max_epochs {
        let logs = trainer.train(corpus, run.train.eval_every, None, |_| {}).unwrap();
        lines.extend(logs.iter().map(|l| l.to_string()));
        let m = logs.last().unwrap().metrics.unwrap();
        if m.r1 == 100.0 && m.medr == 1 {
            return (Some(trainer.epoch), lines);
        }
    }
    (None, lines)
}

#[test]
fn criterion_3_overfit_convergence() {
    let start = Instant::now();
    let (run, corpus) = overfit_run();
    assert_eq!((corpus.clips.len(), corpus.captions.len()), (64, 64));
    let (solved, lines) = train_until_solved(&run, &corpus, 300);
    let (again, lines_again) = train_until_solved(&run, &corpus, solved.unwrap_or(300));
    let deterministic = solved == again && lines == lines_again;
    let elapsed = start.elapsed();
    let ok = solved.is_some() && deterministic && within(elapsed, 600);
    verdict(
        3,
        "overfit convergence",
        ok,
        format!(
            "R@1 = 100% and MedR = 1 at epoch {solved:?}, last log `{}`, rerun identical: {deterministic}, {:.1}s",
            lines.last().map(String::as_str).unwrap_or(""),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_4_metric_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut tied = 0;
    for trial in 0..200 {
        let levels = if trial % 2 == 0 { 0 } else { 1 + trial % 7 };
        let data: Vec<f64> = (0..2500)
            .map(|_| {
                let x: f64 = rng.gen_range(-1.0..1.0);
                if levels == 0 {
                    x
                } else {
                    (x * levels as f64).round() / levels as f64
                }
            })
            .collect();
        let scores = Tensor::new(vec![50, 50], data).unwrap();
        let truth: Vec<usize> = (0..50).map(|_| rng.gen_range(0..50)).collect();
        let ranks = ranks_from_scores(&scores, &truth).unwrap();
        let counted = RetrievalReport::from_ranks(Direction::TextToVideo, 50, ranks.clone(), &DEFAULT_KS).unwrap();
        let oracle = oracle_metrics(&scores, &truth, &DEFAULT_KS).unwrap();
        let direct_ok = DEFAULT_KS.iter().all(|&k| recall_at_k(&ranks, k) == oracle.recall(k))
            && median_rank(&ranks) == oracle.median_rank;
        if counted != oracle || !direct_ok {
            mismatches += 1;
        }
        if levels > 0 {
            tied += 1;
        }
    }
    verdict(
        4,
        "metric oracle equivalence",
        mismatches == 0,
        format!("200 matrices ({tied} with ties), {mismatches} mismatches"),
    );
}

fn random_model(seed: u64) -> Model {
    let mut run = RunConfig::default();
    for (k, v) in [("model_dim", "8"), ("heads", "2"), ("ff_dim", "16"), ("word_dim", "4")] {
        run.set(k, v).unwrap();
    }
    run.model.design = AttentionDesign::Mixed;
    run.model.dim_2d = 6;
    run.model.dim_3d = 5;
    run.model.dim_roi = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = EmbeddingTable::random(Vocabulary::from_tokens(["x"]), 4, &mut rng);
    let mut model = Model::init(run.model, table, &mut rng).unwrap();
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    model.round_params();
    model
}

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn perturb(rng: &mut ChaCha8Rng, t: &Tensor) -> Tensor {
    let mut t = t.clone();
    for v in t.data_mut() {
        *v += rng.gen_range(0.05..0.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    }
    t
}

#[test]
fn criterion_5_asymmetry_invariant() {
    let mut violations = Vec::new();
    for trial in 0..50u64 {
        let model = random_model(100 + trial);
        let mut rng = ChaCha8Rng::seed_from_u64(500 + trial);
        let steps = 1 + (trial as usize % 4);
        let base = ExpertFeatures {
            clip_id: "v".into(),
            appearance: random_rows(&mut rng, steps, 6),
            action: random_rows(&mut rng, steps, 5),
            object: random_rows(&mut rng, steps, 4),
        };
        let e0 = model.video_encodings(&base).unwrap();
        for expert in ["appearance", "action", "object"] {
            let mut f = base.clone();
            match expert {
                "appearance" => f.appearance = perturb(&mut rng, &f.appearance),
                "action" => f.action = perturb(&mut rng, &f.action),
                _ => f.object = perturb(&mut rng, &f.object),
            }
            let e = model.video_encodings(&f).unwrap();
            if expert != "appearance" && e.global != e0.global {
                violations.push(format!("trial {trial}: E_S moved under {expert}"));
            }
            if e.action == e0.action || e.object == e0.object {
                violations.push(format!("trial {trial}: local level unchanged under {expert}"));
            }
        }
    }
    verdict(
        5,
        "asymmetry invariant",
        violations.is_empty(),
        format!("50 trials, {} violations {:?}", violations.len(), violations.iter().take(3).collect::<Vec<_>>()),
    );
}

fn ablate(axes: &str) -> String {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ablate.cfg");
    std::fs::write(
        &cfg,
        "model_dim = 16\nheads = 2\nword_dim = 8\nff_dim = 32\ndim_2d = 12\ndim_3d = 10\ndim_roi = 8\nclips = 24\nclasses = 4\nseed = 5\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_roleret"))
        .args(["ablate", "--config", cfg.to_str().unwrap(), "--axes", axes])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn row_field<'a>(text: &'a str, key: &str) -> Vec<&'a str> {
    text.lines()
        .filter(|l| l.starts_with("mode="))
        .map(|l| l.split_whitespace().find_map(|f| f.strip_prefix(key)).unwrap())
        .collect()
}

#[test]
fn criterion_6_ablation_harness() {
    let weighting = ablate("weighting");
    let design = ablate("design");
    let features = ablate("features");
    let modes_ok = row_field(&weighting, "mode=") == ["average", "text", "video", "both"];
    let designs_ok = row_field(&design, "design=") == ["mixed", "self_all"];
    let features_ok = row_field(&features, "features=") == ["2d_only", "split", "concat"];
    let reproducible = ablate("weighting") == weighting && ablate("features") == features;

    let mut run = RunConfig::default();
    for (k, v) in [("model_dim", "16"), ("heads", "2"), ("word_dim", "8"), ("ff_dim", "32"), ("clips", "12"), ("classes", "3")] {
        run.set(k, v).unwrap();
    }
    for k in ["dim_2d", "dim_3d", "dim_roi"] {
        run.set(k, "10").unwrap();
    }
    run.model.weighting = WeightingMode::Average;
    let corpus = synth_corpus(&run.synth).unwrap().corpus;
    let trainer = Trainer::from_config(&run, &corpus).unwrap();
    let (videos, captions) = encode_corpus(&trainer.model, &corpus).unwrap();
    let scores = score_matrix(&trainer.model, &videos, &captions, Direction::TextToVideo).unwrap();
    let mut worst = 0.0f64;
    for (q, c) in captions.iter().enumerate() {
        for (n, v) in videos.iter().enumerate() {
            let mean = v
                .levels()
                .iter()
                .zip(c.levels())
                .map(|(a, b)| level_cosine(a, b).unwrap())
                .sum::<f64>()
                / 3.0;
            worst = worst.max((scores.get2(q, n) - mean).abs());
        }
    }
    let ok = modes_ok && designs_ok && features_ok && reproducible && worst <= 1e-6;
    verdict(
        6,
        "ablation harness",
        ok,
        format!(
            "weighting rows {modes_ok}, design rows {designs_ok}, feature rows {features_ok}, bitwise rerun {reproducible}, average-mode max deviation {worst:.2e}"
        ),
    );
}

#[test]
fn criterion_7_invariant_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures: Vec<String> = Vec::new();

    for _ in 0..200 {
        let rows = rng.gen_range(1..6);
        let cols = rng.gen_range(1..9);
        let x = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-50.0..50.0)).collect()).unwrap();
        let s = x.softmax(1).unwrap();
        for i in 0..rows {
            let sum: f64 = s.row_slice(i).iter().sum();
            if (sum - 1.0).abs() > 1e-6 || s.row_slice(i).iter().any(|&p| p < 0.0) {
                failures.push(format!("softmax row sums to {sum}"));
            }
        }
    }

    for _ in 0..200 {
        let cols = rng.gen_range(2..9);
        let x = Tensor::new(vec![1, cols], (0..cols).map(|_| rng.gen_range(-10.0..10.0)).collect()).unwrap();
        let mean_in = x.data().iter().sum::<f64>() / cols as f64;
        let var_in = x.data().iter().map(|v| (v - mean_in).powi(2)).sum::<f64>() / cols as f64;
        let y = x.layer_norm(&Tensor::ones(&[1, cols]), &Tensor::zeros(&[1, cols]), 1e-5).unwrap();
        let mean = y.data().iter().sum::<f64>() / cols as f64;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        // output variance is var/(var+eps): within 1e-4 of 1 once var ≥ 1e4·eps
        if mean.abs() > 1e-6 || (var_in >= 0.1 && (var - 1.0).abs() > 1e-4) {
            failures.push(format!("layer norm moments {mean} {var}"));
        }
    }

    let model = random_model(3);
    for _ in 0..50 {
        let mut enc = || roleret::LevelEncodings {
            global: random_rows(&mut rng, 1, 8),
            action: random_rows(&mut rng, 1, 8),
            object: random_rows(&mut rng, 1, 8),
        };
        let (v, c) = (enc(), enc());
        let a = random_rows(&mut rng, 3, 8);
        let w = expert_weights(&v, &a).unwrap();
        if (w.iter().sum::<f64>() - 1.0).abs() > 1e-6 || w.iter().any(|&x| x <= 0.0) {
            failures.push(format!("expert weights {w:?}"));
        }
        for mode in WeightingMode::ALL {
            let s = roleret::matching::match_score(&v, &c, mode, &model.params).unwrap();
            if !(-1.0..=1.0).contains(&s) {
                failures.push(format!("score {s} outside [-1, 1]"));
            }
        }
        for (x, y) in v.levels().iter().zip(c.levels()) {
            let cos = level_cosine(x, y).unwrap();
            if !(-1.0..=1.0).contains(&cos) {
                failures.push(format!("cosine {cos}"));
            }
        }
    }

    for trial in 0..100 {
        let b = rng.gen_range(2..7);
        let mut data: Vec<f64> = (0..b * b).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let satisfied = trial % 2 == 0;
        for i in 0..b {
            let off_max = (0..b)
                .filter(|&j| j != i)
                .flat_map(|j| [data[i * b + j], data[j * b + i]])
                .fold(f64::MIN, f64::max);
            if satisfied {
                data[i * b + i] = off_max + 0.2 + rng.gen_range(0.01..0.5);
            }
        }
        let scores = Tensor::new(vec![b, b], data.clone()).unwrap();
        let loss = contrastive_loss_value(&scores, 0.2).unwrap();
        let all_hold = (0..b).all(|i| {
            (0..b)
                .filter(|&j| j != i)
                .all(|j| data[i * b + i] - data[i * b + j] >= 0.2 && data[i * b + i] - data[j * b + i] >= 0.2)
        });
        if loss < 0.0 || (loss == 0.0) != all_hold {
            failures.push(format!("hinge loss {loss} with margins satisfied = {all_hold}"));
        }
    }

    let corpus = synth_corpus(&SynthConfig {
        clips: 16,
        classes: 4,
        dim_2d: 6,
        dim_3d: 5,
        dim_roi: 4,
        ..SynthConfig::default()
    })
    .unwrap()
    .corpus;
    let mut run = RunConfig::default();
    for (k, v) in [("model_dim", "8"), ("heads", "2"), ("ff_dim", "16"), ("word_dim", "4"), ("batch_size", "4"), ("lr", "1e-3"), ("eval_every", "1")] {
        run.set(k, v).unwrap();
    }
    let logs = || {
        let mut t = Trainer::from_config(&run, &corpus).unwrap();
        t.train(&corpus, 3, None, |_| {})
            .unwrap()
            .iter()
            .map(|l| (l.epoch, l.loss.to_bits(), l.to_string()))
            .collect::<Vec<_>>()
    };
    if logs() != logs() {
        failures.push("training logs differ between identical runs".into());
    }

    verdict(
        7,
        "invariant suite",
        failures.is_empty(),
        format!(
            "softmax, layer norm, expert weights, cosine range, hinge loss, determinism: {} failures {:?}",
            failures.len(),
            failures.iter().take(3).collect::<Vec<_>>()
        ),
    );
}
