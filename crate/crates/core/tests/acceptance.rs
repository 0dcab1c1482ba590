//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Artifacts are kept under `$CARGO_TARGET_TMPDIR/acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gaussprompt::checkpoint::Checkpoint;
use gaussprompt::cli;
use gaussprompt::config::RunConfig;
use gaussprompt::data::read_corpus;
use gaussprompt::eval::{evaluate, evaluate_prepared, prepare_all, EvalOptions};
use gaussprompt::gaussian::{GaussianEmbedding, VARIANCE_FLOOR};
use gaussprompt::gradcheck::{gradient_check, tiny_fixture, CheckSettings};
use gaussprompt::model::{ablation_variants, AblationFlags, Model, ModelConfig};
use gaussprompt::noise::NoiseSource;
use gaussprompt::scoring::{score_candidates, CandidateDistribution, SignConvention};
use gaussprompt::tensor::ParamStore;
use gaussprompt::train::TrainConfig;
use gaussprompt::verbalizer::{aggregate, Aggregation, SigmaReading};
use gaussprompt::vocab::Vocabulary;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cli_ok(args: &[&str]) -> std::result::Result<(), String> {
    let argv: Vec<String> = std::iter::once("gaussprompt").chain(args.iter().copied()).map(String::from).collect();
    match cli::run(argv) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", args.join(" "))),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Outputs of the default-configuration pipeline shared by several criteria.
struct Pipeline {
    root: PathBuf,
    train_time: Duration,
}

impl Pipeline {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn pretrain(&self) -> PathBuf {
        self.root.join("pretrain")
    }
    fn train(&self) -> PathBuf {
        self.root.join("train")
    }

    fn run(root: PathBuf) -> std::result::Result<Self, String> {
        let _ = std::fs::remove_dir_all(&root);
        let data = root.join("data");
        cli_ok(&["generate", "--out", p(&data)])?;
        cli_ok(&["pretrain", "--data", p(&data), "--out", p(&root.join("pretrain"))])?;
        let start = Instant::now();
        cli_ok(&[
            "train",
            "--data",
            p(&data),
            "--backbone",
            p(&root.join("pretrain/backbone.json")),
            "--out",
            p(&root.join("train")),
        ])?;
        Ok(Self { root, train_time: start.elapsed() })
    }
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).expect("readable file")).expect("valid json")
}

fn load_trained(pipe: &Pipeline) -> (Model, ParamStore<f64>, Vocabulary) {
    let vocab = Vocabulary::load(&pipe.data().join("vocab.json")).expect("vocabulary");
    let ck = Checkpoint::load(&pipe.train().join("model.json")).expect("checkpoint");
    ck.ensure_vocabulary(&vocab).expect("matching vocabulary");
    (ck.model().expect("model"), ck.store.clone(), vocab)
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let report = gradient_check(3, &CheckSettings::default(), None).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let fams = report.families.len();
    ensure(
        report.passed() && report.max_relative_error() < 1e-3 && secs < 60.0,
        format!("max relative error {:.2e} over {fams} families in {secs:.1}s", report.max_relative_error()),
    )
}

fn criterion_2() -> Check {
    let mut variants = ablation_variants();
    variants.push(AblationFlags { manual_pvp: true, ..Default::default() });
    variants.push(AblationFlags { learnable_prompt_lr: true, ..Default::default() });
    let mut passes = 0;
    let mut worst: f64 = 0.0;
    let noise = NoiseSource::new(2024);
    for (vi, flags) in variants.iter().enumerate() {
        let f = tiny_fixture(vi as u64 + 1, flags.clone()).map_err(|e| e.to_string())?;
        let prepared = prepare_all(&f.model, &f.vocab, &f.instances).map_err(|e| e.to_string())?;
        let refs: Vec<_> = prepared.iter().collect();
        let per_variant = 1000usize.div_ceil(variants.len());
        for k in 0..per_variant {
            let draw = |i: usize, _s: usize| {
                f.model.draw(&noise, &[vi as u64, k as u64, i as u64], prepared[i].candidate_count())
            };
            for out in f.model.pooled_scores(&f.store, &refs, draw, 1, false) {
                for d in &out.distributions {
                    if d.probabilities.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                        return Err(format!("component outside [0,1] for {}", flags.label()));
                    }
                    worst = worst.max((d.probabilities.iter().sum::<f64>() - 1.0).abs());
                }
                worst = worst.max((out.label.iter().sum::<f64>() - 1.0).abs());
                worst = worst.max((out.scores.scores.iter().sum::<f64>() - 1.0).abs());
                if out.scores.scores.iter().any(|&s| !(s > 0.0 && s < 1.0)) {
                    return Err(format!("score outside (0,1) for {}", flags.label()));
                }
            }
            passes += 1;
        }
    }
    ensure(
        passes >= 1000 && worst < 1e-6,
        format!("{passes} forward passes over {} variants, max |sum - 1| = {worst:.2e}", variants.len()),
    )
}

fn criterion_3(pipe: &Pipeline) -> Check {
    let (model, store, vocab) = load_trained(pipe);
    let dev = read_corpus(&pipe.data().join("dev.jsonl")).map_err(|e| e.to_string())?;
    let prepared = prepare_all(&model, &vocab, &dev[..200]).map_err(|e| e.to_string())?;
    let n0 = evaluate_prepared(&model, &store, &prepared, &EvalOptions { samples: 0, ..Default::default() });
    let n1 = evaluate_prepared(
        &model,
        &store,
        &prepared,
        &EvalOptions { samples: 1, zero_noise: true, ..Default::default() },
    );
    if n0 != n1 {
        return Err("n = 0 and zero-noise n = 1 records differ".into());
    }
    let acc: Vec<f64> = [1, 4, 8]
        .iter()
        .map(|&n| {
            evaluate_prepared(&model, &store, &prepared, &EvalOptions { samples: n, zero_variance: true, ..Default::default() })
                .accuracy
        })
        .collect();
    ensure(
        acc.iter().all(|&a| a == acc[0]),
        format!("n=0 == n=1 (zero noise) on {} instances; zero-variance accuracy for n=1,4,8: {acc:?}", prepared.len()),
    )
}

/// Uncertainty-weighted sums evaluated entry by entry.
fn aggregation_oracle(means: &[Vec<f64>], vars: &[Vec<f64>], lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let width = means[0].len();
    let mut mu = vec![0.0; width];
    let mut var = vec![0.0; width];
    for i in 0..means.len() {
        for k in 0..width {
            let sigma = if vars[i][k] > VARIANCE_FLOOR { vars[i][k].sqrt() } else { VARIANCE_FLOOR.sqrt() };
            let kappa = (-lambda * sigma).exp();
            mu[k] += kappa * means[i][k];
            var[k] += kappa * kappa * vars[i][k];
        }
    }
    (mu, var)
}

fn max_gap(a: &GaussianEmbedding<f64>, mu: &[f64], var: &[f64]) -> f64 {
    let m = a.mean.iter().zip(mu).map(|(x, y)| (x - y).abs());
    let v = a.variance.iter().zip(var).map(|(x, y)| (x - y).abs());
    m.chain(v).fold(0.0, f64::max)
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let l = rng.random_range(1..=5);
        let v = rng.random_range(1..=50);
        let lambda = [0.1, 0.5, 1.0, 2.0][rng.random_range(0..4)];
        let means: Vec<Vec<f64>> = (0..l).map(|_| (0..v).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let vars: Vec<Vec<f64>> = (0..l)
            .map(|_| (0..v).map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..4.0) }).collect())
            .collect();
        let gaussians: Vec<GaussianEmbedding<f64>> = means
            .iter()
            .zip(&vars)
            .map(|(m, s)| GaussianEmbedding::new(m.clone().into(), s.clone().into()))
            .collect();
        let got = aggregate(&gaussians, Aggregation::UncertaintyAware { lambda, reading: SigmaReading::StdDev });
        let (mu, var) = aggregation_oracle(&means, &vars, lambda);
        worst = worst.max(max_gap(&got, &mu, &var));
    }
    let pair = [
        GaussianEmbedding::new(vec![1.0].into(), vec![0.0].into()),
        GaussianEmbedding::new(vec![1.0].into(), vec![0.6931f64 * 0.6931].into()),
    ];
    let got = aggregate(&pair, Aggregation::UncertaintyAware { lambda: 1.0, reading: SigmaReading::StdDev });
    let (mu, var) = aggregation_oracle(&[vec![1.0], vec![1.0]], &[vec![0.0], vec![0.6931 * 0.6931]], 1.0);
    let hand_gap = (got.mean[0] - 1.5).abs().max((got.variance[0] - 0.1201).abs());
    worst = worst.max(max_gap(&got, &mu, &var));
    ensure(
        worst < 1e-9 && hand_gap < 1e-4,
        format!(
            "max oracle gap {worst:.2e} over 100 random inputs; kappa=0.5 case gives mean {:.6}, variance {:.6}",
            got.mean[0], got.variance[0]
        ),
    )
}

fn criterion_5() -> Check {
    let label = [0.5, 0.5];
    let dists =
        [CandidateDistribution { probabilities: vec![0.5, 0.5] }, CandidateDistribution { probabilities: vec![0.9, 0.1] }];
    let kl2 = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
    let softmax2 = |a: f64, b: f64| {
        let z = a.exp() + b.exp();
        [a.exp() / z, b.exp() / z]
    };
    let neg = score_candidates(&dists, &label, SignConvention::Negated).scores;
    let lit = score_candidates(&dists, &label, SignConvention::Literal).scores;
    let want_neg = softmax2(0.0, -kl2);
    let want_lit = softmax2(0.0, kl2);
    let gap = (0..2).map(|i| (neg[i] - want_neg[i]).abs().max((lit[i] - want_lit[i]).abs())).fold(0.0, f64::max);
    let rounded = (neg[0] - 0.5910).abs().max((neg[1] - 0.4090).abs());
    let reversed = neg[0] > neg[1] && lit[0] < lit[1];
    ensure(
        gap < 1e-6 && rounded < 1e-4 && reversed,
        format!("negated {neg:.4?}, literal {lit:.4?}, brute-force gap {gap:.1e}"),
    )
}

fn criterion_6(pipe: &Pipeline) -> Check {
    let summary = read_json(&pipe.train().join("train_summary.json"));
    let acc = summary["dev_accuracy"].as_f64().unwrap_or(0.0);
    let steps = summary["steps_run"].as_u64().unwrap_or(u64::MAX);
    let secs = pipe.train_time.as_secs_f64();
    let default_cfg = RunConfig::default();
    ensure(
        acc >= 0.90 && steps <= 2000 && secs <= 600.0 && default_cfg.generate.candidate_count == 5,
        format!("dev accuracy {acc:.4} on {} instances after {steps} steps in {secs:.0}s (chance 0.20)", summary["dev_count"]),
    )
}

fn small_overrides(extra: &[&str]) -> Vec<String> {
    let mut o: Vec<String> = [
        "generate.train_count=3000",
        "generate.dev_count=300",
        "generate.test_count=500",
        "backbone.hidden_size=32",
        "backbone.layer_count=2",
        "backbone.head_count=2",
        "backbone.feed_forward_size=64",
        "pretrain.steps=400",
        "train.steps=300",
        "train.eval_every=100",
        "train.log_every=50",
        "train.dev_limit=0",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    o
}

fn with_sets(args: &[&str], overrides: &[String]) -> Vec<String> {
    let mut v: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    for o in overrides {
        v.push("--set".into());
        v.push(o.clone());
    }
    v
}

fn cli_sets(args: &[&str], overrides: &[String]) -> std::result::Result<(), String> {
    let v = with_sets(args, overrides);
    let refs: Vec<&str> = v.iter().map(String::as_str).collect();
    cli_ok(&refs)
}

fn criterion_7(root: &Path) -> Check {
    let _ = std::fs::remove_dir_all(root);
    let overrides = small_overrides(&[]);
    let data = root.join("data");
    cli_sets(&["generate", "--out", p(&data)], &overrides)?;
    cli_sets(&["pretrain", "--data", p(&data), "--out", p(&root.join("pretrain"))], &overrides)?;
    let cfg = RunConfig::resolve(None, &overrides).map_err(|e| e.to_string())?;
    let vocab = Vocabulary::load(&data.join("vocab.json")).map_err(|e| e.to_string())?;
    let train = read_corpus(&data.join("train.jsonl")).map_err(|e| e.to_string())?;
    let dev = read_corpus(&data.join("dev.jsonl")).map_err(|e| e.to_string())?;
    let test = read_corpus(&data.join("test.jsonl")).map_err(|e| e.to_string())?;
    let backbone = root.join("pretrain/backbone.json");
    let ablated = AblationFlags { no_pe_variance: true, no_ve_variance: true, ..Default::default() };
    let mut full = Vec::new();
    let mut plain = Vec::new();
    for seed in [13u64, 14, 15, 16, 17] {
        for (flags, out) in [(AblationFlags::default(), &mut full), (ablated.clone(), &mut plain)] {
            let parts = cli::obtain_backbone::<f32>(&cfg, &vocab, Some(&backbone)).map_err(|e| e.to_string())?;
            let model_config = ModelConfig { flags, ..cfg.model.clone() };
            let train_config = TrainConfig { seed, ..cfg.train.clone() };
            let run = cli::train_variant(&model_config, &train_config, &vocab, parts, &train, &dev).map_err(|e| e.to_string())?;
            let report = evaluate(&run.model, &run.store, &vocab, &test, &cfg.eval).map_err(|e| e.to_string())?;
            out.push(report.accuracy);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    ensure(
        mean(&full) >= mean(&plain),
        format!(
            "test accuracy per seed: full {full:.4?} (mean {:.4}), no_pe_variance+no_ve_variance {plain:.4?} (mean {:.4})",
            mean(&full),
            mean(&plain)
        ),
    )
}

fn criterion_8(pipe: &Pipeline) -> Check {
    let (model, store, vocab) = load_trained(pipe);
    let store = store.cast::<f32>();
    let test = read_corpus(&pipe.data().join("test.jsonl")).map_err(|e| e.to_string())?;
    let prepared = prepare_all(&model, &vocab, &test[..50]).map_err(|e| e.to_string())?;
    let repeats = 50;
    let gold_std = |n: usize| -> Vec<f64> {
        let mut runs = vec![Vec::with_capacity(repeats); prepared.len()];
        for r in 0..repeats {
            let opts = EvalOptions { samples: n, seed: 808, repeat: r as u64, ..Default::default() };
            for rec in evaluate_prepared(&model, &store, &prepared, &opts).records {
                runs[rec.index].push(rec.scores[rec.gold]);
            }
        }
        runs.iter()
            .map(|v| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
            })
            .collect()
    };
    let s1 = gold_std(1);
    let s8 = gold_std(8);
    let shrink = s1.iter().zip(&s8).filter(|(a, b)| b < a).count();
    let frac = shrink as f64 / prepared.len() as f64;
    let med = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    ensure(
        frac >= 0.8,
        format!(
            "std(n=8) < std(n=1) on {shrink}/{} instances; median std {:.2e} -> {:.2e}",
            prepared.len(),
            med(&s1),
            med(&s8)
        ),
    )
}

fn csv_files(dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in std::fs::read_dir(dir).expect("readable dir").flatten() {
        let path = entry.path();
        if path.is_dir() {
            csv_files(&path, out);
        } else if path.extension().is_some_and(|e| e == "csv") {
            out.push(path);
        }
    }
}

fn criterion_9(root: &Path) -> Check {
    let _ = std::fs::remove_dir_all(root);
    let overrides = small_overrides(&[
        "generate.train_count=400",
        "generate.dev_count=60",
        "generate.test_count=60",
        "pretrain.steps=40",
        "train.steps=30",
        "train.eval_every=10",
        "train.log_every=10",
        "ablate.seeds=[1, 2]",
        "sweep.samples=[0, 1, 4]",
        "sweep.lambdas=[0.5, 1.0]",
    ]);
    let run = |dir: &Path| -> std::result::Result<(), String> {
        let data = dir.join("data");
        let bb = dir.join("pretrain/backbone.json");
        cli_sets(&["generate", "--out", p(&data)], &overrides)?;
        cli_sets(&["pretrain", "--data", p(&data), "--out", p(&dir.join("pretrain"))], &overrides)?;
        cli_sets(&["train", "--data", p(&data), "--backbone", p(&bb), "--out", p(&dir.join("train"))], &overrides)?;
        let model = dir.join("train/model.json");
        cli_sets(&["eval", "--data", p(&data), "--checkpoint", p(&model), "--split", "test", "--out", p(&dir.join("eval"))], &overrides)?;
        cli_sets(&["ablate", "--data", p(&data), "--backbone", p(&bb), "--out", p(&dir.join("ablate"))], &overrides)?;
        cli_sets(
            &["sweep", "--data", p(&data), "--over", "samples", "--checkpoint", p(&model), "--out", p(&dir.join("sweep_n"))],
            &overrides,
        )?;
        cli_sets(
            &["sweep", "--data", p(&data), "--over", "lambda", "--backbone", p(&bb), "--out", p(&dir.join("sweep_l"))],
            &overrides,
        )
    };
    let (a, b) = (root.join("a"), root.join("b"));
    run(&a)?;
    run(&b)?;
    let mut files = Vec::new();
    csv_files(&a, &mut files);
    files.sort();
    let mut differing = Vec::new();
    for f in &files {
        let rel = f.strip_prefix(&a).expect("under a");
        let other = b.join(rel);
        if std::fs::read(f).ok() != std::fs::read(&other).ok() {
            differing.push(rel.display().to_string());
        }
    }
    ensure(
        files.len() >= 7 && differing.is_empty(),
        format!("{} metric CSVs compared across two runs, differing: {differing:?}", files.len()),
    )
}

fn criterion_10(pipe: &Pipeline) -> Check {
    let s = read_json(&pipe.pretrain().join("pretrain.json"));
    let loss = s["heldout_loss"].as_f64().unwrap_or(f64::INFINITY);
    let baseline = s["uniform_baseline"].as_f64().unwrap_or(0.0);
    let v = s["vocabulary_size"].as_u64().unwrap_or(0);
    ensure(
        loss < (v as f64).ln() - 0.5 && (baseline - (v as f64).ln()).abs() < 1e-12,
        format!("held-out masked loss {loss:.4} vs ln|V| - 0.5 = {:.4} (|V| = {v})", baseline - 0.5),
    )
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => Err(format!(
            "panicked: {}",
            e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
        )),
    }
}

fn main() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&root).expect("writable target dir");
    let pipeline = catch_unwind(|| Pipeline::run(root.join("default"))).unwrap_or_else(|_| Err("panicked".into()));
    let with_pipe = |f: &dyn Fn(&Pipeline) -> Check| match &pipeline {
        Ok(p) => guarded(|| f(p)),
        Err(e) => Err(format!("default pipeline failed: {e}")),
    };
    let results: Vec<(usize, &str, Check)> = vec![
        (1, "gradient check", guarded(criterion_1)),
        (2, "normalization over 1000 forward passes", guarded(criterion_2)),
        (3, "sampling collapse and degenerate Gaussians", with_pipe(&criterion_3)),
        (4, "aggregation oracle", guarded(criterion_4)),
        (5, "divergence scoring oracle", guarded(criterion_5)),
        (6, "end-to-end learnability", with_pipe(&criterion_6)),
        (7, "variance ablation direction", guarded(|| criterion_7(&root.join("ablation")))),
        (8, "Monte Carlo stabilization", with_pipe(&criterion_8)),
        (9, "byte-identical re-runs", guarded(|| criterion_9(&root.join("rerun")))),
        (10, "pretraining sanity", with_pipe(&criterion_10)),
    ];
    let mut failed = 0;
    for (id, name, r) in &results {
        match r {
            Ok(d) => println!("PASS criterion {id} ({name}): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}): {d}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
