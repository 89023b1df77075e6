//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selora_core::campaign::autoresearch::{
    default_arms, run_autoresearch, ArmEvaluator, ArmOutcome, AutoResearchSpec, RecipeArm, Stage, StageStore, SyntheticEvaluator,
};
use selora_core::campaign::runner::{desk_grid, FaultInjection, LoraDefaults, PairOutcome};
use selora_core::campaign::{run_campaign, run_pair, CampaignSpec, ExperimentConfig, Ledger, Recipe, RunRecord, RunStatusTag};
use selora_core::data::{generate_dataset, Batch, DatasetSpec};
use selora_core::eval::{extra_forgetting, BenchSpec, ForgettingDelta};
use selora_core::gradcheck::{check_all, CheckConfig, OPS};
use selora_core::model::{ModelConfig, TransformerModel};
use selora_core::probe::{gradient_probe, probe_overhead_fraction, ProbeConfig, ProbeReport};
use selora_core::report::{build_report, collate, parse_bars, ReportSpec};
use selora_core::select::{select_layers, LoraTargets, SelectionConfig};
use selora_core::stats::{mean_sd, paired_t_test, student_t_cdf, t_quantile, PairedSample};
use selora_core::train::{speedup_from_times, TrainConfig};

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

const SEEDS: [u64; 3] = [42, 123, 999];

fn probe_correctness() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        let heads = r.random_range(1..4);
        let c = ModelConfig {
            n_layers: r.random_range(3..9),
            d_model: heads * r.random_range(4..12),
            n_heads: heads,
            d_ff: r.random_range(16..64),
            vocab_size: 16,
            max_seq: 8,
            seed: r.random(),
            ..ModelConfig::default()
        };
        let data = ok(generate_dataset(&DatasetSpec { n_train: 64, n_eval: 8, seq_len: 8, vocab_size: 16, ..DatasetSpec::default() }))?;
        let batches: Vec<Batch> = data.stream(4, i).take(5).collect();
        let mut m = ok(TransformerModel::<f64>::new(&c))?;
        let digest = m.params().digest();
        let single = ok(gradient_probe(&mut m, &batches, &ProbeConfig { n_batches: 5, chunk_size: c.n_layers }))?;
        for chunk in 1..c.n_layers {
            let chunked = ok(gradient_probe(&mut m, &batches, &ProbeConfig { n_batches: 5, chunk_size: chunk }))?;
            for (a, b) in single.g.iter().zip(&chunked.g) {
                ensure!(*a > 0.0, "zero probe norm on config {c:?}");
                worst = worst.max((a - b).abs() / a);
            }
        }
        ensure!(m.params().digest() == digest, "probe changed the parameters of config {i}");
    }
    ensure!(worst < 1e-10, "max relative deviation {worst:e}");
    Ok(format!("3 configs, every chunk size, max rel deviation {worst:.1e}, digests unchanged"))
}

fn gradient_checks() -> Outcome {
    let results = ok(check_all(100, 1, &CheckConfig::default()))?;
    let failed: Vec<_> = results.iter().filter(|c| !c.passed()).collect();
    ensure!(failed.is_empty(), "{failed:?}");
    let worst = results.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(format!("{} ops x 100 instances, max rel err {worst:.1e}", OPS.len()))
}

fn equivalence_oracle() -> Outcome {
    let mut config = default_config();
    config.benchmarks = false;
    let spec = CampaignSpec { select_percent: 100.0, steps_matched: 40, ..CampaignSpec::default() };
    let p = ok(run_pair(&config, 42, &spec))?;
    ensure!(p.plan.selected.len() == config.model.n_layers, "k=100 selected {:?}", p.plan.selected);
    let (a, b) = (&p.standard_run.step_losses, &p.selective_run.step_losses);
    ensure!(a.len() == 40 && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "losses differ: {a:?} vs {b:?}");
    Ok(format!("{} step losses bit-identical", a.len()))
}

fn selection_law() -> Outcome {
    let mut cases = 0;
    for l in 1..=64usize {
        let report = ProbeReport::from_norms((0..l).map(|i| ((i * 7919) % 101) as f64 + 1.0).collect());
        for k in 1..=100usize {
            let got = ok(select_layers(&report, &ok(SelectionConfig::new(k as f64))?, l))?;
            let want = (k * l).div_ceil(100);
            ensure!(got.len() == want, "k={k} L={l}: {} layers, want {want}", got.len());
            cases += 1;
        }
    }
    for (l, k, want) in [(32, 50.0, 16), (24, 50.0, 12), (22, 50.0, 11)] {
        let report = ProbeReport::from_norms(vec![1.0; l]);
        let n = ok(select_layers(&report, &ok(SelectionConfig::new(k))?, l))?.len();
        ensure!(n == want, "L={l} k={k}: {n}, want {want}");
    }
    Ok(format!("{cases} grid cases; 32→16, 24→12, 22→11"))
}

fn default_config() -> ExperimentConfig {
    desk_grid().into_iter().find(|c| c.name == "L12-d128").expect("default tier in grid")
}

fn desk_pairs() -> std::result::Result<Vec<PairOutcome>, String> {
    let config = default_config();
    let spec = CampaignSpec { models: vec![config.clone()], ..CampaignSpec::default() };
    SEEDS.iter().map(|&s| ok(run_pair(&config, s, &spec))).collect()
}

fn speedup(pairs: &[PairOutcome]) -> Outcome {
    let std_t: Vec<f64> = pairs.iter().map(|p| p.standard_run.wall_time_s).collect();
    let sel_t: Vec<f64> = pairs.iter().map(|p| p.selective_run.wall_time_s).collect();
    let pct: Vec<f64> = std_t
        .iter()
        .zip(&sel_t)
        .map(|(a, b)| speedup_from_times(*a, *b).map(|s| s.percent))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mean = pct.iter().sum::<f64>() / pct.len() as f64;
    let t = ok(paired_t_test(&PairedSample::new(std_t, sel_t)))?;
    let p = t.p_two_sided.unwrap_or(1.0);
    let wins = pct.iter().filter(|x| **x > 0.0).count();
    let detail = format!(
        "per-seed {:?}%, mean {mean:.1}%, p={p:.4}, wins {wins}/3",
        pct.iter().map(|x| (x * 10.0).round() / 10.0).collect::<Vec<_>>()
    );
    ensure!(mean > 5.0 && p < 0.05 && wins == 3, "{detail}");
    Ok(detail)
}

fn probe_overhead(pairs: &[PairOutcome]) -> Outcome {
    let fr: Vec<f64> = pairs
        .iter()
        .map(|p| probe_overhead_fraction(p.selective.probe_time_s, p.selective_run.wall_time_s).map(|f| 100.0 * f))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let detail = format!("overhead per seed {:?}%", fr.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>());
    ensure!(fr.iter().all(|f| *f < 2.0), "{detail}");
    Ok(detail)
}

fn arithmetic() -> Outcome {
    let s = ok(speedup_from_times(93.9, 69.4))?;
    let (pct, ratio) = (format!("{:.1}", s.percent), format!("{:.3}", s.ratio));
    ensure!(pct == "26.1" && ratio == "1.353", "speedup {pct}% / {ratio}x");
    let delta = |name: &str, d: f64| ForgettingDelta { name: name.into(), base_acc: 0.0, ft_acc: d / 100.0, delta_pp: d };
    let mut out = Vec::new();
    for (std, ale, want) in [(-1.2, -0.7, "+0.5"), (-1.8, 0.0, "+1.8")] {
        let got = format!("{:+.1}", ok(extra_forgetting(&delta("mmlu", std), &delta("mmlu", ale)))?);
        ensure!(got == want, "extra_forgetting({std}, {ale}) = {got}, want {want}");
        out.push(got);
    }
    Ok(format!("26.1% / 1.353x; extra forgetting {} and {} pp", out[0], out[1]))
}

/// Adaptive Simpson integration of the t density from 0 to `t`.
fn t_cdf_oracle(t: f64, df: usize) -> f64 {
    let nu = df as f64;
    // Γ((ν+1)/2) / Γ(ν/2) by the half-step recurrence from Γ(1)/Γ(1/2) or Γ(3/2)/Γ(1).
    let (mut ratio, mut a) = if df % 2 == 1 { (1.0 / std::f64::consts::PI.sqrt(), 1.0) } else { (std::f64::consts::PI.sqrt() / 2.0, 1.5) };
    while a < (nu + 1.0) / 2.0 - 1e-9 {
        ratio *= a / (a - 0.5);
        a += 1.0;
    }
    let c = ratio / (nu * std::f64::consts::PI).sqrt();
    let f = |x: f64| c * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
    #[allow(clippy::too_many_arguments)]
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, eps: f64, depth: u32) -> f64 {
        let m = (a + b) / 2.0;
        let (lm, rm) = ((a + m) / 2.0, (m + b) / 2.0);
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * eps {
            return left + right + (left + right - whole) / 15.0;
        }
        simpson(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
    }
    let (a, b) = (0.0, t.abs());
    let (fa, fm, fb) = (f(a), f(b / 2.0), f(b));
    let area = simpson(&f, a, b, fa, fm, fb, b / 6.0 * (fa + 4.0 * fm + fb), 1e-13, 50);
    0.5 + area.copysign(t)
}

fn stats_oracle() -> Outcome {
    let r = ok(paired_t_test(&PairedSample::new(vec![1.0, 2.0, 3.0], vec![0.0; 3])))?;
    let (t, d) = (r.t.unwrap_or(f64::NAN), r.cohens_d.unwrap_or(f64::NAN));
    ensure!((t - 3.4641).abs() < 5e-5 && r.df == 2 && (d - 2.0).abs() < 1e-12, "t={t} df={} d={d}", r.df);
    let mut worst: f64 = 0.0;
    for df in 1..=60 {
        for i in -40..=40 {
            let x = i as f64 * 0.25;
            worst = worst.max((ok(student_t_cdf(x, df))? - t_cdf_oracle(x, df)).abs());
        }
    }
    ensure!(worst < 1e-8, "cdf deviates from quadrature by {worst:e}");
    let q = ok(t_quantile(0.975, 2))?;
    ensure!((q - 4.3027).abs() < 1e-3, "t_0.975,2 = {q}");
    Ok(format!("t={t:.4} df=2 d={d:.1}; cdf max dev {worst:.1e} over df 1..60; t_0.975,2={q:.4}"))
}

fn quality_bound(pairs: &[PairOutcome]) -> Outcome {
    let mut parts = Vec::new();
    for name in ["mmlu", "math", "code"] {
        let mut extra = Vec::new();
        for p in pairs {
            let (Some(s), Some(a)) = (p.standard.bench(name), p.selective.bench(name)) else {
                return Err(format!("missing {name} score"));
            };
            // Both deltas share the seed's base model, which cancels.
            let d = |acc: f64| ForgettingDelta { name: name.into(), base_acc: 0.0, ft_acc: acc, delta_pp: 100.0 * acc };
            extra.push(ok(extra_forgetting(&d(s), &d(a)))?);
        }
        let mean = extra.iter().sum::<f64>() / extra.len() as f64;
        ensure!(mean.abs() <= 5.0, "{name} mean extra forgetting {mean:+.2}pp");
        parts.push(format!("{name} {mean:+.2}pp"));
    }
    let gaps: Vec<f64> = pairs.iter().map(|p| p.selective.eval_loss - p.standard.eval_loss).collect();
    let gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    ensure!(gap.abs() < 0.15, "eval-loss gap {gap:.4}");
    Ok(format!("extra forgetting {}; eval-loss gap {gap:+.4}", parts.join(", ")))
}

fn autoresearch() -> Outcome {
    let spec = AutoResearchSpec::default();
    let arm = default_arms().into_iter().find(|a| a.name == "p50_lr2e-4").expect("planted arm exists");
    let evaluator = SyntheticEvaluator::planted(arm.clone(), 12);
    let mut reference = StageStore::in_memory();
    ok(run_autoresearch(&spec, "L12-d128", &evaluator, &mut reference, None))?;
    let st = &reference.state;
    let counts = [
        st.quick.as_ref().map(Vec::len),
        st.full.as_ref().map(Vec::len),
        st.push.as_ref().map(Vec::len),
        st.ablation.as_ref().map(Vec::len),
    ];
    ensure!(counts == [Some(8), Some(3), Some(2), Some(12)], "stage sizes {counts:?}");
    let ablation_runs = reference.ledger.records().iter().filter(|r| r.recipe.starts_with("ablation/")).count();
    ensure!(ablation_runs == 36, "{ablation_runs} ablation records");
    let winner = st.winner().ok_or("no winner")?;
    ensure!(winner.arm.selection == arm.selection && winner.arm.lr == arm.lr && winner.arm.attn_rank == arm.attn_rank, "winner {winner:?}");

    struct Counting<'a>(&'a dyn ArmEvaluator, std::sync::atomic::AtomicUsize);
    impl ArmEvaluator for Counting<'_> {
        fn evaluate(&self, arm: &RecipeArm, seed: u64) -> selora_core::Result<ArmOutcome> {
            self.1.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            self.0.evaluate(arm, seed)
        }
    }
    let total = reference.ledger.len();
    for stop in [Stage::Quick, Stage::Full, Stage::Push, Stage::Ablation] {
        let dir = ok(tempfile::tempdir())?;
        let mut store = ok(StageStore::open(dir.path()))?;
        ok(run_autoresearch(&spec, "L12-d128", &evaluator, &mut store, Some(stop)))?;
        drop(store);
        let counting = Counting(&evaluator, Default::default());
        let mut store = ok(StageStore::open(dir.path()))?;
        let before = store.ledger.len();
        ok(run_autoresearch(&spec, "L12-d128", &counting, &mut store, None))?;
        let reran = counting.1.into_inner();
        ensure!(reran == total - before, "resume after {stop:?} reran {reran}, expected {}", total - before);
        ensure!(store.state == reference.state, "state after resuming from {stop:?} differs");
        ensure!(store.ledger.records() == reference.ledger.records(), "ledger after resuming from {stop:?} differs");
    }
    Ok(format!("winner {}; 8/3/2/12 stages, 36 ablation runs; resumes at 4 boundaries", winner.name))
}

fn random_record(r: &mut ChaCha8Rng, i: usize) -> RunRecord {
    let failed = r.random_bool(0.3);
    let mut opt = || if r.random_bool(0.8) { Some(r.random::<f64>()) } else { None };
    let (m, a, c) = (opt(), opt(), opt());
    RunRecord {
        model: format!("m{}", i % 4),
        recipe: ["standard", "selective", "selective_cm", "base"][i % 4].into(),
        seed: r.random(),
        steps: r.random_range(0..1000),
        probe_time_s: r.random::<f64>() * 10.0,
        train_time_s: r.random::<f64>() * 1e3,
        eval_loss: r.random::<f64>() * 5.0,
        bench_mmlu: m,
        bench_math: a,
        bench_code: c,
        selected_layers: (0..r.random_range(0..6)).map(|_| r.random_range(0..32)).collect::<BTreeSet<_>>().into_iter().collect(),
        trainable_params: r.random_range(0..1_000_000),
        status: if failed { RunStatusTag::Failed } else { RunStatusTag::Ok },
        failure_reason: if failed { "diverged, \"quoted\"\nsecond line".into() } else { String::new() },
    }
}

fn tiny_config(name: &str) -> ExperimentConfig {
    let model = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_ff: 32, max_seq: 8, ..ModelConfig::default() };
    ExperimentConfig {
        name: name.into(),
        data: DatasetSpec { n_train: 96, n_eval: 16, seq_len: 8, vocab_size: model.vocab_size, ..DatasetSpec::default() },
        model,
        train: TrainConfig { total_steps: 8, warmup_steps: 2, batch_size: 4, ..TrainConfig::default() },
        probe: ProbeConfig { n_batches: 2, chunk_size: 1 },
        bench: BenchSpec { n_items: 6, seed: 1 },
        lora: LoraDefaults { attn_rank: 2, mlp_rank: 2, alpha: 4.0, targets: LoraTargets::default() },
        ..ExperimentConfig::default()
    }
}

fn ledger_and_reports() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let path = dir.path().join("roundtrip.csv");
    let mut ledger = ok(Ledger::open(&path))?;
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for i in 0..200 {
        ok(ledger.append(random_record(&mut r, i)))?;
    }
    let loaded = ok(Ledger::load(&path))?;
    ensure!(loaded.records() == ledger.records(), "reloaded records differ");
    ensure!(ok(loaded.to_csv_bytes())? == ok(std::fs::read(&path))?, "re-encoded CSV differs from file");

    let spec = CampaignSpec {
        models: vec![tiny_config("tiny-a"), tiny_config("tiny-b")],
        steps_matched: 8,
        steps_cm: 10,
        fault: Some(FaultInjection { model: Some("tiny-b".into()), recipe: Recipe::Selective, seed: 123, step: 3 }),
        ..CampaignSpec::default()
    };
    let campaign = dir.path().join("campaign.csv");
    let mut ledger = ok(Ledger::open(&campaign))?;
    let summary = ok(run_campaign(&spec, &mut ledger))?;
    let on_disk = ok(Ledger::load(&campaign))?;
    let failed: Vec<_> = on_disk.records().iter().filter(|r| !r.is_ok()).collect();
    ensure!(summary.failed == 1 && failed.len() == 1, "{} failed records", failed.len());
    let f = failed[0];
    ensure!(f.model == "tiny-b" && f.recipe == "selective" && f.seed == 123, "wrong failed record {f:?}");
    ensure!(f.failure_reason.contains("step 3"), "failure reason {:?}", f.failure_reason);
    ensure!(on_disk.len() == 12, "{} records", on_disk.len());

    let rspec = ReportSpec::new(&campaign, dir.path().join("report"));
    let (first, _) = ok(build_report(&on_disk, &rspec))?;
    let (second, _) = ok(build_report(&ok(Ledger::load(&campaign))?, &rspec))?;
    ensure!(first == second, "report bytes differ between builds");
    let svgs: Vec<_> = first.iter().filter(|(n, _)| n.ends_with(".svg")).collect();
    ensure!(svgs.len() == 4, "{} figures", svgs.len());

    let c = collate(on_disk.records());
    let (_, svg) = first.iter().find(|(n, _)| n == "speedup_bars.svg").ok_or("no speedup figure")?;
    let bars = parse_bars(svg);
    ensure!(bars.len() == 2, "{} speedup bars", bars.len());
    for (model, value, half) in bars {
        let pct: Vec<f64> = c
            .pairs
            .iter()
            .filter(|p| p.model() == model)
            .map(|p| 100.0 * (p.standard.train_time_s - p.selective.train_time_s) / p.standard.train_time_s)
            .collect();
        let s = ok(mean_sd(&pct))?;
        let want_half = ok(t_quantile(0.975, s.n - 1))? * s.sd / (s.n as f64).sqrt();
        ensure!(
            (value - s.mean).abs() < 1e-5 && (half - want_half).abs() < 1e-5,
            "{model}: bar {value}±{half}, stats {}±{want_half}",
            s.mean
        );
        ensure!((half - s.ci95_half_width()).abs() < 1e-5, "{model}: bar half width {half} vs stats {}", s.ci95_half_width());
    }
    Ok(format!("200-record round trip exact; injected failure retained ({}); 4 SVGs byte-stable; bars match stats", f.failure_reason))
}

fn run(n: usize, label: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS criterion {n}: {label}: {detail} [{secs:.1}s]");
            true
        }
        Err(why) => {
            println!("FAIL criterion {n}: {label}: {why} [{secs:.1}s]");
            false
        }
    }
}

fn main() -> ExitCode {
    // Keep cargo's "running N tests" listing mode from executing the whole suite.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut passed = vec![
        run(1, "probe correctness", probe_correctness),
        run(2, "gradient checks", gradient_checks),
        run(3, "equivalence oracle", equivalence_oracle),
        run(4, "selection law", selection_law),
    ];

    let start = Instant::now();
    let pairs = catch_unwind(desk_pairs).unwrap_or_else(|_| Err("desk pair run panicked".into()));
    println!("desk pairs: 3 seeds on L12-d128, 200 steps [{:.1}s]", start.elapsed().as_secs_f64());
    let with_pairs = |f: fn(&[PairOutcome]) -> Outcome| {
        let pairs = &pairs;
        move || pairs.as_ref().map_err(Clone::clone).and_then(|p| f(p))
    };
    passed.push(run(5, "desk-scale speedup", with_pairs(speedup)));
    passed.push(run(6, "probe overhead", with_pairs(probe_overhead)));
    passed.push(run(7, "arithmetic reproduction", arithmetic));
    passed.push(run(8, "statistics oracle", stats_oracle));
    passed.push(run(9, "quality bound", with_pairs(quality_bound)));
    passed.push(run(10, "autoresearch pipeline", autoresearch));
    passed.push(run(11, "ledger and reports", ledger_and_reports));

    let n_pass = passed.iter().filter(|p| **p).count();
    println!("acceptance: {n_pass}/{} criteria passed", passed.len());
    if n_pass == passed.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
