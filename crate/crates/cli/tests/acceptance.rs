//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per criterion
//! and exits nonzero if any fails.
//!
//! Tolerances are fixed here and are not tuned per run:
//! gradient check 1e-5 relative; shard equivalence 1e-12·(1+|loss|);
//! attention invariants 1e-12; tail gain ≥ 2.0 points with head loss ≤ 1.0;
//! bilinear ≥ mean pooling − 0.2 points.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sicot_cli::commands::{cmd_synth, cmd_train, evaluate_model, train_model};
use sicot_cli::RunConfig;
use sicot_core::attention::{attend_words, PoolingMode};
use sicot_core::eval::{evaluate_rankings, head_tail_split, ClassTally};
use sicot_core::gradcheck::{standard_suite, GradCheckOptions};
use sicot_core::shard::equivalence_check;
use sicot_core::synth::read_manifest;
use sicot_core::Tensor;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn in_dir(cfg: &mut RunConfig, dir: &Path, tag: &str) {
    cfg.manifest = dir.join(format!("{tag}.manifest.tsv"));
    cfg.embeddings = dir.join(format!("{tag}.vectors.txt"));
    cfg.checkpoint = dir.join(format!("{tag}.ckpt"));
    cfg.vocab = dir.join(format!("{tag}.vocab.tsv"));
    cfg.report = dir.join(format!("{tag}.report.txt"));
    cfg.log = dir.join(format!("{tag}.log"));
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let checks = standard_suite(0, GradCheckOptions::with_tolerance(1e-5)).expect("suite builds");
    let elapsed = start.elapsed();
    let worst = checks
        .iter()
        .filter_map(|c| c.report.worst.map(|w| w.rel_error))
        .fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.report.passed()).map(|c| c.name).collect();
    let has_objective = checks.iter().any(|c| c.name == "cotrain_objective");
    outcome(
        failed.is_empty() && has_objective && elapsed < Duration::from_secs(60),
        format!(
            "{} checks, worst relative error {worst:.2e}, failed {:?}, {:.2}s",
            checks.len(),
            failed,
            elapsed.as_secs_f64()
        ),
    )
}

fn shard_invariance() -> Outcome {
    let (c, d) = (1000, 32);
    let counts = [1, 3, 7, 1000];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_loss_ratio: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    let mut failures = 0;
    let mut check = |w: &Tensor, b: &[f64], x: &[f64], label: usize| {
        let rep = equivalence_check(w, b, x, label, &counts, 3).expect("check runs");
        for row in &rep.rows {
            worst_loss_ratio = worst_loss_ratio.max(row.loss_delta / row.loss_bound);
            worst_grad = worst_grad.max(row.max_grad_delta);
            // gradients are held to the same loss-scaled bound
            if !(row.passed && row.max_grad_delta <= row.loss_bound) {
                failures += 1;
            }
        }
    };
    for _ in 0..100 {
        let w = Tensor::new(vec![c, d], (0..c * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        check(&w, &b, &x, rng.random_range(0..c));
    }
    // extreme logits in [-700, 700]
    let w = Tensor::zeros(vec![c, d]);
    let b: Vec<f64> = (0..c).map(|i| -700.0 + 1400.0 * i as f64 / (c - 1) as f64).collect();
    let x = vec![0.5; d];
    for label in [0, c / 2, c - 1] {
        check(&w, &b, &x, label);
    }
    outcome(
        failures == 0,
        format!(
            "103 instances x M={counts:?}: worst loss delta/bound {worst_loss_ratio:.3}, worst grad delta {worst_grad:.2e}, failures {failures}"
        ),
    )
}

fn lambda_zero_reduction(dir: &Path) -> Outcome {
    let mut details = Vec::new();
    let mut all = true;
    for workers in [1, 4] {
        let mut base = RunConfig {
            epochs: 4,
            workers,
            ..RunConfig::default()
        };
        in_dir(&mut base, dir, &format!("c3-w{workers}"));
        cmd_synth(&base).expect("synth");
        let mut cotrain = base.clone();
        cotrain.lambda = 0.0;
        cotrain.checkpoint = dir.join(format!("c3-w{workers}-lambda0.ckpt"));
        let mut visual = base.clone();
        visual.visual_only = true;
        visual.checkpoint = dir.join(format!("c3-w{workers}-visual.ckpt"));
        cmd_train(&cotrain).expect("train lambda=0");
        cmd_train(&visual).expect("train visual only");
        let a = fs::read(&cotrain.checkpoint).unwrap();
        let b = fs::read(&visual.checkpoint).unwrap();
        all &= a == b;
        details.push(format!("workers={workers}: {} bytes, identical={}", a.len(), a == b));
    }
    outcome(all, details.join("; "))
}

fn attention_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    let mut negative = false;
    for _ in 0..1000 {
        let t = rng.random_range(1..=12);
        let d = rng.random_range(1..=32);
        let rows: Vec<Vec<f64>> = (0..t).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let base = attend_words(&Tensor::matrix(&rows).unwrap(), PoolingMode::BilinearAttention).unwrap();
        negative |= base.alpha.iter().any(|&a| a < 0.0);
        worst = worst.max((base.alpha.iter().sum::<f64>() - 1.0).abs());

        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let p = attend_words(&Tensor::matrix(&shuffled).unwrap(), PoolingMode::BilinearAttention).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            worst = worst.max((p.alpha[j] - base.alpha[i]).abs());
        }
        for (a, b) in p.embedding.iter().zip(&base.embedding) {
            worst = worst.max((a - b).abs());
        }

        let doubled: Vec<Vec<f64>> = rows.iter().chain(rows.iter()).cloned().collect();
        let dup = attend_words(&Tensor::matrix(&doubled).unwrap(), PoolingMode::BilinearAttention).unwrap();
        for (a, b) in dup.embedding.iter().zip(&base.embedding) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        !negative && worst <= 1e-12,
        format!("1000 titles, worst deviation {worst:.2e}, negative weight seen: {negative}"),
    )
}

#[derive(Default)]
struct ArmTotals {
    micro: f64,
    head: f64,
    tail: f64,
}

struct LongTailRuns {
    seeds: usize,
    baseline: ArmTotals,
    bilinear: ArmTotals,
    mean_pooling: ArmTotals,
    gain_elapsed: Duration,
}

/// Five seeds of the default recipe, three arms each: the λ=0 baseline,
/// co-training with bilinear attention, and co-training with mean pooling.
fn long_tail_runs(dir: &Path) -> LongTailRuns {
    let seeds = 5;
    let mut runs = LongTailRuns {
        seeds,
        baseline: ArmTotals::default(),
        bilinear: ArmTotals::default(),
        mean_pooling: ArmTotals::default(),
        gain_elapsed: Duration::ZERO,
    };
    for seed in 0..seeds as u64 {
        let mut cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        in_dir(&mut cfg, dir, &format!("c5-s{seed}"));
        let start = Instant::now();
        cmd_synth(&cfg).expect("synth");
        let manifest = read_manifest(&cfg.manifest).expect("manifest");
        runs.gain_elapsed += start.elapsed();
        let arms: [(f64, PoolingMode, &mut ArmTotals, bool); 3] = [
            (0.0, PoolingMode::BilinearAttention, &mut runs.baseline, true),
            (1.0, PoolingMode::BilinearAttention, &mut runs.bilinear, true),
            (1.0, PoolingMode::MeanPooling, &mut runs.mean_pooling, false),
        ];
        for (lambda, mode, totals, timed) in arms {
            let arm = RunConfig {
                lambda,
                mode,
                ..cfg.clone()
            };
            let start = Instant::now();
            let trained = train_model(&arm, &manifest).expect("train");
            let report = evaluate_model(&arm, &trained.model, &manifest).expect("eval");
            if timed {
                runs.gain_elapsed += start.elapsed();
            }
            totals.micro += report.micro_top1;
            totals.head += report.head_macro_top1.expect("head classes present");
            totals.tail += report.tail_macro_top1.expect("tail classes present");
        }
    }
    runs
}

fn directional_gain(runs: &LongTailRuns) -> Outcome {
    let n = runs.seeds as f64;
    let tail_gain = (runs.bilinear.tail - runs.baseline.tail) / n;
    let head_change = (runs.bilinear.head - runs.baseline.head) / n;
    let minutes = runs.gain_elapsed.as_secs_f64() / 60.0;
    outcome(
        tail_gain >= 2.0 && head_change >= -1.0 && minutes < 10.0,
        format!(
            "{} seeds: tail {:.2} -> {:.2} ({tail_gain:+.2}), head {:.2} -> {:.2} ({head_change:+.2}), {minutes:.1} min",
            runs.seeds,
            runs.baseline.tail / n,
            runs.bilinear.tail / n,
            runs.baseline.head / n,
            runs.bilinear.head / n
        ),
    )
}

fn ablation_direction(runs: &LongTailRuns) -> Outcome {
    let n = runs.seeds as f64;
    let bilinear = runs.bilinear.micro / n;
    let mean = runs.mean_pooling.micro / n;
    outcome(
        bilinear >= mean - 0.2,
        format!("overall top-1: bilinear {bilinear:.2}, mean pooling {mean:.2}, difference {:+.2}", bilinear - mean),
    )
}

fn evaluation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let classes = 40;
    let counts: Vec<usize> = (0..classes).map(|_| rng.random_range(1..400)).collect();
    let split = head_tail_split(&counts, 100);
    let mut rows = Vec::with_capacity(10_000);
    for _ in 0..10_000 {
        let mut ranked: Vec<usize> = (0..classes).collect();
        ranked.shuffle(&mut rng);
        let label = if rng.random_bool(0.5) { ranked[rng.random_range(0..4)] } else { rng.random_range(0..classes) };
        rows.push((ranked, label));
    }
    let rep = evaluate_rankings(rows.iter().map(|(r, l)| (r.as_slice(), *l)), &split).unwrap();

    let mut tally = vec![ClassTally::default(); classes];
    for (ranked, label) in &rows {
        let t = &mut tally[*label];
        t.count += 1;
        if ranked[0] == *label {
            t.top1 += 1;
        }
        if ranked[..3].contains(label) {
            t.top3 += 1;
        }
    }
    let hits1: usize = tally.iter().map(|t| t.top1).sum();
    let hits3: usize = tally.iter().map(|t| t.top3).sum();
    let micro_ok = rep.micro_top1 == 100.0 * hits1 as f64 / rows.len() as f64
        && rep.micro_top3 == 100.0 * hits3 as f64 / rows.len() as f64;

    let mut partition_ok = true;
    for _ in 0..200 {
        let n = rng.random_range(1..60);
        let counts: Vec<usize> = (0..n).map(|_| rng.random_range(0..500)).collect();
        let s = head_tail_split(&counts, rng.random_range(0..500));
        let mut all: Vec<usize> = s.head_classes.iter().chain(&s.tail_classes).copied().collect();
        all.sort_unstable();
        partition_ok &= all == (0..n).collect::<Vec<_>>();
    }
    let tally_ok = rep.per_class == tally;
    outcome(
        tally_ok && micro_ok && partition_ok,
        format!("10000 predictions: per-class tallies equal {tally_ok}, micro equal {micro_ok}; splits partition {partition_ok}"),
    )
}

const DETERMINISM_CFG: &str = "epochs=3\n";

fn pipeline_outputs(dir: &Path, workers: usize) -> Vec<(String, Vec<u8>)> {
    fs::write(dir.join("run.cfg"), DETERMINISM_CFG).unwrap();
    let mut outputs = Vec::new();
    for cmd in ["synth", "train", "eval"] {
        let out = Command::new(env!("CARGO_BIN_EXE_sicot"))
            .current_dir(dir)
            .args([cmd, "--config", "run.cfg", "--set", &format!("workers={workers}")])
            .output()
            .expect("binary runs");
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        outputs.push((format!("stdout of {cmd}"), out.stdout));
    }
    let mut files: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    for f in files {
        outputs.push((f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&f).unwrap()));
    }
    outputs
}

fn determinism(dir: &Path) -> Outcome {
    let mut details = Vec::new();
    let mut all = true;
    for workers in [1, 4] {
        let a = dir.join(format!("c8-w{workers}-a"));
        let b = dir.join(format!("c8-w{workers}-b"));
        fs::create_dir_all(&a).unwrap();
        fs::create_dir_all(&b).unwrap();
        let first = pipeline_outputs(&a, workers);
        let second = pipeline_outputs(&b, workers);
        let differing: Vec<&str> = first
            .iter()
            .zip(&second)
            .filter(|(x, y)| x != y)
            .map(|(x, _)| x.0.as_str())
            .collect();
        let same = first.len() == second.len() && differing.is_empty();
        all &= same;
        details.push(format!("workers={workers}: {} outputs, differing {differing:?}", first.len()));
    }
    outcome(all, details.join("; "))
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut failed = 0;
    let mut report = |id: u32, name: &str, o: Outcome| {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("{tag} criterion {id} ({name}): {}", o.detail);
        if !o.passed {
            failed += 1;
        }
    };
    report(1, "gradient oracle", gradient_oracle());
    report(2, "shard invariance", shard_invariance());
    report(3, "lambda=0 reduction", lambda_zero_reduction(dir.path()));
    report(4, "attention invariants", attention_invariants());
    let runs = long_tail_runs(dir.path());
    report(5, "directional long-tail gain", directional_gain(&runs));
    report(6, "ablation direction", ablation_direction(&runs));
    report(7, "evaluation oracle", evaluation_oracle());
    report(8, "determinism", determinism(dir.path()));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
