//! Staged recipe search: quick scan, full runs, push experiments, factorial ablation.
//!
//! Every evaluation lands in a ledger keyed by `(model, "{stage}/{arm}", seed, steps)`
//! and each finished stage is written to `state.json`, so an interrupted search picks
//! up where it stopped without repeating finished work.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ledger::{Ledger, RunRecord, RunStatusTag};
use super::runner::{ExperimentConfig, Workbench};
use crate::error::{Error, Result};
use crate::eval::eval_loss;
use crate::probe::ProbeReport;
use crate::rng;
use crate::select::{select_layers, LoraPlan, LoraTargets, SelectionConfig};
use crate::stats::mean_sd;
use crate::tensor::{Precision, Real};
use crate::train::{train, RunStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmSelection {
    Percent(f64),
    Layers(BTreeSet<usize>),
}

/// One candidate recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeArm {
    pub name: String,
    pub selection: ArmSelection,
    pub attn_rank: usize,
    pub mlp_rank: usize,
    pub lr: f64,
    pub targets: LoraTargets,
    pub steps: usize,
}

impl RecipeArm {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(format!("arm {:?}: {m}", self.name)));
        if self.name.is_empty() || self.name.contains([',', '/']) {
            return bad("name must be non-empty without ',' or '/'".into());
        }
        match &self.selection {
            ArmSelection::Percent(p) => {
                SelectionConfig::new(*p)?;
            }
            ArmSelection::Layers(l) if l.is_empty() => return bad("empty layer set".into()),
            ArmSelection::Layers(_) => {}
        }
        if self.attn_rank == 0 || self.mlp_rank == 0 {
            return bad("ranks must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !self.targets.any() {
            return bad("no adapter targets".into());
        }
        Ok(())
    }

    fn with_steps(&self, steps: usize) -> Self {
        RecipeArm { steps, ..self.clone() }
    }
}

/// The eight quick-scan arms: {25, 50, 75, 100}% of layers × lr {1e-4, 2e-4}.
pub fn default_arms() -> Vec<RecipeArm> {
    let mut arms = Vec::new();
    for pct in [25.0, 50.0, 75.0, 100.0] {
        for (lr, tag) in [(1e-4, "1e-4"), (2e-4, "2e-4")] {
            arms.push(RecipeArm {
                name: format!("p{pct}_lr{tag}"),
                selection: ArmSelection::Percent(pct),
                attn_rank: 16,
                mlp_rank: 16,
                lr,
                targets: LoraTargets::default(),
                steps: 0,
            });
        }
    }
    arms
}

/// A configured variation applied to the stage-2 leader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushVariation {
    pub name: String,
    pub rank_mult: usize,
    pub lr_mult: f64,
    /// Added to a percent selection, capped at 100. Explicit layer sets are unchanged.
    pub extra_percent: f64,
}

impl PushVariation {
    fn apply(&self, leader: &RecipeArm) -> RecipeArm {
        let selection = match &leader.selection {
            ArmSelection::Percent(p) => ArmSelection::Percent((p + self.extra_percent).min(100.0)),
            other => other.clone(),
        };
        RecipeArm {
            name: format!("{}+{}", leader.name, self.name),
            selection,
            attn_rank: leader.attn_rank * self.rank_mult,
            mlp_rank: leader.mlp_rank * self.rank_mult,
            lr: leader.lr * self.lr_mult,
            ..leader.clone()
        }
    }
}

pub fn default_push() -> Vec<PushVariation> {
    vec![
        PushVariation { name: "rank_x2".into(), rank_mult: 2, lr_mult: 1.0, extra_percent: 0.0 },
        PushVariation { name: "wider".into(), rank_mult: 1, lr_mult: 1.0, extra_percent: 25.0 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoResearchSpec {
    pub arms: Vec<RecipeArm>,
    pub quick_steps: usize,
    pub full_steps: usize,
    /// Arms advanced from the quick scan to full runs.
    pub n_advance: usize,
    pub push: Vec<PushVariation>,
    pub ablation_steps: usize,
    pub seeds: Vec<u64>,
}

impl Default for AutoResearchSpec {
    fn default() -> Self {
        AutoResearchSpec {
            arms: default_arms(),
            quick_steps: 150,
            full_steps: 500,
            n_advance: 3,
            push: default_push(),
            ablation_steps: 500,
            seeds: vec![42, 123, 999],
        }
    }
}

pub const QUICK_ARMS: usize = 8;

impl AutoResearchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.arms.len() != QUICK_ARMS {
            return Err(Error::config(format!("quick scan needs exactly {QUICK_ARMS} arms, got {}", self.arms.len())));
        }
        let names: BTreeSet<_> = self.arms.iter().map(|a| &a.name).collect();
        if names.len() != self.arms.len() {
            return Err(Error::config("arm names must be distinct"));
        }
        self.arms.iter().try_for_each(RecipeArm::validate)?;
        if self.quick_steps == 0 || self.full_steps <= self.quick_steps || self.ablation_steps == 0 {
            return Err(Error::config("need 0 < quick_steps < full_steps and ablation_steps > 0"));
        }
        if self.n_advance == 0 || self.n_advance > self.arms.len() {
            return Err(Error::config(format!("n_advance {} out of range", self.n_advance)));
        }
        if self.seeds.is_empty() || self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("ablation seeds must be non-empty and distinct"));
        }
        for p in &self.push {
            if p.rank_mult == 0 || !(p.lr_mult > 0.0) || p.name.contains([',', '/']) {
                return Err(Error::config(format!("invalid push variation {:?}", p.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Quick,
    Full,
    Push,
    Ablation,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Quick, Stage::Full, Stage::Push, Stage::Ablation];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Quick => "quick",
            Stage::Full => "full",
            Stage::Push => "push",
            Stage::Ablation => "ablation",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What an evaluator reports for one trained arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmOutcome {
    pub eval_loss: f64,
    pub probe_time_s: f64,
    pub train_time_s: f64,
    pub selected_layers: Vec<usize>,
    pub trainable_params: usize,
}

/// Trains and scores one arm. Errors become failed ledger records.
pub trait ArmEvaluator: Sync {
    fn evaluate(&self, arm: &RecipeArm, seed: u64) -> Result<ArmOutcome>;
}

/// Real training on an experiment configuration.
pub struct TrainingEvaluator {
    bench: Workbench,
    probes: Mutex<HashMap<u64, ProbeReport>>,
}

impl TrainingEvaluator {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        Ok(TrainingEvaluator { bench: Workbench::new(config)?, probes: Mutex::new(HashMap::new()) })
    }

    fn run<F: Real>(&self, arm: &RecipeArm, seed: u64) -> Result<ArmOutcome> {
        let n_layers = self.bench.config.model.n_layers;
        let mut probe_time_s = 0.0;
        let selected = match &arm.selection {
            ArmSelection::Percent(p) => {
                let cached = self.probes.lock().expect("probe cache").get(&seed).cloned();
                let report = match cached {
                    Some(r) => r,
                    None => {
                        let (r, t) = self.bench.probe::<F>(seed)?;
                        probe_time_s = t;
                        self.probes.lock().expect("probe cache").insert(seed, r.clone());
                        r
                    }
                };
                select_layers(&report, &SelectionConfig::new(*p)?, n_layers)?
            }
            ArmSelection::Layers(l) => l.clone(),
        };
        let plan = LoraPlan::new(selected, arm.attn_rank, arm.mlp_rank, self.bench.config.lora.alpha, arm.targets)?;
        let mut model = self.bench.base_model::<F>(seed)?;
        model.inject_lora(&plan)?;
        let cfg = crate::train::TrainConfig { lr_max: arm.lr, ..self.bench.train_config(seed, arm.steps, None) };
        let run = train(&mut model, &mut self.bench.data.stream(cfg.batch_size, seed), &cfg)?;
        if run.status == RunStatus::Diverged {
            return Err(Error::Diverged(run.failure_reason.unwrap_or_default()));
        }
        Ok(ArmOutcome {
            eval_loss: eval_loss(&model, &self.bench.eval)?,
            probe_time_s,
            train_time_s: run.wall_time_s,
            selected_layers: plan.selected.iter().copied().collect(),
            trainable_params: model.count_trainable(),
        })
    }
}

impl ArmEvaluator for TrainingEvaluator {
    fn evaluate(&self, arm: &RecipeArm, seed: u64) -> Result<ArmOutcome> {
        match self.bench.config.precision {
            Precision::F64 => self.run::<f64>(arm, seed),
            Precision::F32 => self.run::<f32>(arm, seed),
        }
    }
}

/// Closed-form loss surface with its minimum at `optimum`, plus seeded noise.
///
/// Each unit of distance (a doubling of lr or rank, 25 points of layer share, a change of
/// target modules) costs at least 0.02, far above the default noise of 0.001.
#[derive(Debug, Clone)]
pub struct SyntheticEvaluator {
    pub optimum: RecipeArm,
    pub n_layers: usize,
    pub floor: f64,
    pub noise_sd: f64,
}

impl SyntheticEvaluator {
    pub fn planted(optimum: RecipeArm, n_layers: usize) -> Self {
        SyntheticEvaluator { optimum, n_layers, floor: 0.3, noise_sd: 0.001 }
    }

    fn percent(&self, s: &ArmSelection) -> f64 {
        match s {
            ArmSelection::Percent(p) => *p,
            ArmSelection::Layers(l) => 100.0 * l.len() as f64 / self.n_layers as f64,
        }
    }

    pub fn expected_loss(&self, arm: &RecipeArm) -> f64 {
        let o = &self.optimum;
        let log_gap = |a: f64, b: f64| (a / b).log2().abs();
        self.floor
            + 0.05 * log_gap(arm.lr, o.lr)
            + 0.001 * (self.percent(&arm.selection) - self.percent(&o.selection)).abs()
            + 0.02 * log_gap(arm.attn_rank as f64, o.attn_rank as f64)
            + 0.02 * log_gap(arm.mlp_rank as f64, o.mlp_rank as f64)
            + if arm.targets == o.targets { 0.0 } else { 0.03 }
            + 5.0 / arm.steps.max(1) as f64
    }
}

impl ArmEvaluator for SyntheticEvaluator {
    fn evaluate(&self, arm: &RecipeArm, seed: u64) -> Result<ArmOutcome> {
        let noise = Normal::new(0.0, self.noise_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut r = rng::stream(seed, &format!("synthetic/{}", arm.name), &[arm.steps as u64]);
        let pct = self.percent(&arm.selection);
        let k = ((pct * self.n_layers as f64 / 100.0).ceil() as usize).clamp(1, self.n_layers);
        Ok(ArmOutcome {
            eval_loss: self.expected_loss(arm) + noise.sample(&mut r),
            probe_time_s: 0.0,
            train_time_s: 0.0,
            selected_layers: (0..k).collect(),
            trainable_params: k * (arm.attn_rank + arm.mlp_rank),
        })
    }
}

/// One arm's score within a single-seed stage. `eval_loss` is `None` when the run failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmScore {
    pub arm: RecipeArm,
    pub eval_loss: Option<f64>,
}

/// One ablation configuration across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub arm: RecipeArm,
    pub losses: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

impl AblationRow {
    pub fn summary_line(&self) -> String {
        let ok = self.losses.iter().flatten().count();
        match (self.mean, self.sd) {
            (Some(m), Some(s)) => format!("{}: mean eval loss {m:.4} ± {s:.4} (n={ok})", self.name),
            _ => format!("{}: insufficient successful runs ({ok}/{})", self.name, self.losses.len()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AutoResearchState {
    pub quick: Option<Vec<ArmScore>>,
    pub full: Option<Vec<ArmScore>>,
    pub push: Option<Vec<ArmScore>>,
    pub ablation: Option<Vec<AblationRow>>,
}

impl AutoResearchState {
    pub fn completed(&self) -> Vec<Stage> {
        let done = [self.quick.is_some(), self.full.is_some(), self.push.is_some(), self.ablation.is_some()];
        Stage::ALL.into_iter().zip(done).filter(|(_, d)| *d).map(|(s, _)| s).collect()
    }

    /// The lowest-mean ablation configuration; ties broken by lower sd, then name.
    pub fn winner(&self) -> Option<&AblationRow> {
        self.ablation.as_ref()?.first().filter(|r| r.mean.is_some())
    }

    pub fn report(&self) -> String {
        let mut out = String::new();
        let scores = |out: &mut String, title: &str, s: &Option<Vec<ArmScore>>| {
            if let Some(s) = s {
                out.push_str(&format!("## {title}\n"));
                for a in s {
                    match a.eval_loss {
                        Some(l) => out.push_str(&format!("- {} ({} steps): eval loss {l:.4}\n", a.arm.name, a.arm.steps)),
                        None => out.push_str(&format!("- {} ({} steps): failed\n", a.arm.name, a.arm.steps)),
                    }
                }
            }
        };
        scores(&mut out, "Quick scan", &self.quick);
        scores(&mut out, "Full runs", &self.full);
        scores(&mut out, "Push experiments", &self.push);
        if let Some(rows) = &self.ablation {
            out.push_str("## Ablation\n");
            for r in rows {
                out.push_str(&format!("- {}\n", r.summary_line()));
            }
        }
        if let Some(w) = self.winner() {
            out.push_str(&format!("\nWinner {}\n", w.summary_line()));
        }
        out
    }
}

/// Stage state plus the run ledger, optionally persisted under a directory.
pub struct StageStore {
    dir: Option<PathBuf>,
    pub state: AutoResearchState,
    pub ledger: Ledger,
}

impl StageStore {
    pub fn in_memory() -> Self {
        StageStore { dir: None, state: AutoResearchState::default(), ledger: Ledger::in_memory() }
    }

    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let state_path = dir.join("state.json");
        let state =
            if state_path.exists() { serde_json::from_str(&fs::read_to_string(&state_path)?)? } else { AutoResearchState::default() };
        Ok(StageStore { dir: Some(dir.to_path_buf()), state, ledger: Ledger::open(&dir.join("ledger.csv"))? })
    }
}

fn save_state(dir: Option<&Path>, state: &AutoResearchState) -> Result<()> {
    if let Some(dir) = dir {
        let tmp = dir.join("state.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(state)?)?;
        fs::rename(tmp, dir.join("state.json"))?;
    }
    Ok(())
}

fn rank_scores(scores: &mut [ArmScore]) {
    scores.sort_by(|a, b| {
        let key = |s: &ArmScore| s.eval_loss.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b)).then_with(|| a.arm.name.cmp(&b.arm.name))
    });
}

struct Runner<'a> {
    model: &'a str,
    evaluator: &'a dyn ArmEvaluator,
    ledger: &'a mut Ledger,
}

impl Runner<'_> {
    /// Evaluate `arm` under `stage`, reusing a ledger record when one exists.
    fn score(&mut self, stage: Stage, arm: &RecipeArm, seed: u64) -> Result<Option<f64>> {
        let recipe = format!("{stage}/{}", arm.name);
        let key = (self.model.to_string(), recipe.clone(), seed, arm.steps);
        if let Some(r) = self.ledger.get(&key) {
            return Ok(r.is_ok().then_some(r.eval_loss));
        }
        let record = match self.evaluator.evaluate(arm, seed) {
            Ok(o) => RunRecord {
                model: self.model.to_string(),
                recipe,
                seed,
                steps: arm.steps,
                probe_time_s: o.probe_time_s,
                train_time_s: o.train_time_s,
                eval_loss: o.eval_loss,
                bench_mmlu: None,
                bench_math: None,
                bench_code: None,
                selected_layers: o.selected_layers,
                trainable_params: o.trainable_params,
                status: RunStatusTag::Ok,
                failure_reason: String::new(),
            },
            Err(e) => RunRecord::failed(self.model, &recipe, seed, arm.steps, e.to_string()),
        };
        self.ledger.append(record)?;
        let r = self.ledger.get(&key).expect("just appended");
        Ok(r.is_ok().then_some(r.eval_loss))
    }

    fn scan(&mut self, stage: Stage, arms: &[RecipeArm], seed: u64) -> Result<Vec<ArmScore>> {
        let mut scores = Vec::with_capacity(arms.len());
        for arm in arms {
            scores.push(ArmScore { arm: arm.clone(), eval_loss: self.score(stage, arm, seed)? });
        }
        rank_scores(&mut scores);
        if scores.iter().all(|s| s.eval_loss.is_none()) {
            return Err(Error::Diverged(format!("every {stage} run failed")));
        }
        Ok(scores)
    }
}

/// The twelve ablation configurations around `leader`:
/// targets {attn+mlp, attn, mlp} × lr {0.5, 1}× × rank {1, 4}×.
pub fn ablation_grid(leader: &RecipeArm, steps: usize) -> Vec<(String, RecipeArm)> {
    let mut grid = Vec::new();
    for (tname, targets) in [("attn+mlp", leader.targets), ("attn", LoraTargets::attention_only()), ("mlp", LoraTargets::mlp_only())] {
        for (lname, lr_mult) in [("lr0.5x", 0.5), ("lr1x", 1.0)] {
            for (rname, rank_mult) in [("r1x", 1), ("r4x", 4)] {
                let name = format!("{tname}_{lname}_{rname}");
                let arm = RecipeArm {
                    name: name.clone(),
                    targets,
                    lr: leader.lr * lr_mult,
                    attn_rank: leader.attn_rank * rank_mult,
                    mlp_rank: leader.mlp_rank * rank_mult,
                    steps,
                    ..leader.clone()
                };
                grid.push((name, arm));
            }
        }
    }
    grid
}

fn leader(scores: &[&[ArmScore]]) -> RecipeArm {
    let mut all: Vec<ArmScore> = scores.iter().flat_map(|s| s.iter().cloned()).collect();
    rank_scores(&mut all);
    all[0].arm.clone()
}

/// Run (or resume) the four stages, stopping early after `stop_after` if given.
pub fn run_autoresearch(
    spec: &AutoResearchSpec,
    model: &str,
    evaluator: &dyn ArmEvaluator,
    store: &mut StageStore,
    stop_after: Option<Stage>,
) -> Result<()> {
    spec.validate()?;
    let seed = spec.seeds[0];
    let mut runner = Runner { model, evaluator, ledger: &mut store.ledger };
    let stop = |s: Stage| stop_after == Some(s);

    if store.state.quick.is_none() {
        let arms: Vec<_> = spec.arms.iter().map(|a| a.with_steps(spec.quick_steps)).collect();
        store.state.quick = Some(runner.scan(Stage::Quick, &arms, seed)?);
        save_state(store.dir.as_deref(), &store.state)?;
        if stop(Stage::Quick) {
            return Ok(());
        }
    }
    if store.state.full.is_none() {
        let quick = store.state.quick.as_ref().expect("quick stage done");
        let arms: Vec<_> =
            quick.iter().filter(|s| s.eval_loss.is_some()).take(spec.n_advance).map(|s| s.arm.with_steps(spec.full_steps)).collect();
        store.state.full = Some(runner.scan(Stage::Full, &arms, seed)?);
        save_state(store.dir.as_deref(), &store.state)?;
        if stop(Stage::Full) {
            return Ok(());
        }
    }
    if store.state.push.is_none() {
        let lead = leader(&[store.state.full.as_deref().expect("full stage done")]);
        let arms: Vec<_> = spec.push.iter().map(|p| p.apply(&lead)).collect();
        store.state.push = Some(if arms.is_empty() { Vec::new() } else { runner.scan(Stage::Push, &arms, seed)? });
        save_state(store.dir.as_deref(), &store.state)?;
        if stop(Stage::Push) {
            return Ok(());
        }
    }
    if store.state.ablation.is_none() {
        let lead = leader(&[store.state.full.as_deref().expect("full stage done"), store.state.push.as_deref().expect("push stage done")]);
        let mut rows = Vec::new();
        for (name, arm) in ablation_grid(&lead, spec.ablation_steps) {
            let mut losses = Vec::new();
            for &s in &spec.seeds {
                losses.push(runner.score(Stage::Ablation, &arm, s)?);
            }
            let ok: Vec<f64> = losses.iter().flatten().copied().collect();
            let (mean, sd) = match mean_sd(&ok) {
                Ok(st) => (Some(st.mean), Some(st.sd)),
                Err(_) if ok.len() == 1 => (Some(ok[0]), None),
                Err(_) => (None, None),
            };
            rows.push(AblationRow { name, arm, losses, mean, sd });
        }
        rows.sort_by(|a, b| {
            let m = |r: &AblationRow| r.mean.filter(|_| r.sd.is_some()).unwrap_or(f64::INFINITY);
            let s = |r: &AblationRow| r.sd.unwrap_or(f64::INFINITY);
            m(a).total_cmp(&m(b)).then(s(a).total_cmp(&s(b))).then_with(|| a.name.cmp(&b.name))
        });
        store.state.ablation = Some(rows);
        save_state(store.dir.as_deref(), &store.state)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn small_spec() -> AutoResearchSpec {
        AutoResearchSpec { quick_steps: 150, full_steps: 500, ablation_steps: 500, ..AutoResearchSpec::default() }
    }

    fn planted() -> SyntheticEvaluator {
        let arm = default_arms().into_iter().find(|a| a.name == "p50_lr2e-4").unwrap();
        SyntheticEvaluator::planted(arm, 12)
    }

    struct Counting<'a>(&'a dyn ArmEvaluator, AtomicUsize);

    impl ArmEvaluator for Counting<'_> {
        fn evaluate(&self, arm: &RecipeArm, seed: u64) -> Result<ArmOutcome> {
            self.1.fetch_add(1, Ordering::SeqCst);
            self.0.evaluate(arm, seed)
        }
    }

    #[test]
    fn default_arms_are_the_eight_point_grid() {
        let arms = default_arms();
        assert_eq!(arms.len(), 8);
        assert!(small_spec().validate().is_ok());
        let names: Vec<_> = arms.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names[0], "p25_lr1e-4");
        assert_eq!(names[7], "p100_lr2e-4");
    }

    #[test]
    fn planted_winner_and_cardinalities() {
        let mut store = StageStore::in_memory();
        run_autoresearch(&small_spec(), "L12-d128", &planted(), &mut store, None).unwrap();
        let st = &store.state;
        assert_eq!(st.quick.as_ref().unwrap().len(), 8);
        assert_eq!(st.quick.as_ref().unwrap()[0].arm.name, "p50_lr2e-4");
        assert_eq!(st.full.as_ref().unwrap().len(), 3);
        assert_eq!(st.push.as_ref().unwrap().len(), 2);
        assert_eq!(st.ablation.as_ref().unwrap().len(), 12);
        let w = st.winner().unwrap();
        assert_eq!(w.name, "attn+mlp_lr1x_r1x");
        assert_eq!(w.arm.selection, ArmSelection::Percent(50.0));
        let ablation = store.ledger.records().iter().filter(|r| r.recipe.starts_with("ablation/")).count();
        assert_eq!(ablation, 36);
        assert_eq!(store.ledger.len(), 8 + 3 + 2 + 36);
        let line = w.summary_line();
        let re = regex::Regex::new(r"^attn\+mlp_lr1x_r1x: mean eval loss \d\.\d{4} ± \d\.\d{4} \(n=3\)$").unwrap();
        assert!(re.is_match(&line), "{line}");
    }

    #[test]
    fn resumes_at_every_stage_boundary() {
        let spec = small_spec();
        let mut reference = StageStore::in_memory();
        run_autoresearch(&spec, "m", &planted(), &mut reference, None).unwrap();
        let want_records: BTreeSet<String> = reference.ledger.records().iter().map(|r| format!("{r:?}")).collect();

        for stop in [Stage::Quick, Stage::Full, Stage::Push] {
            let dir = tempfile::tempdir().unwrap();
            let mut store = StageStore::open(dir.path()).unwrap();
            run_autoresearch(&spec, "m", &planted(), &mut store, Some(stop)).unwrap();
            assert_eq!(store.state.completed().last(), Some(&stop));
            drop(store);

            let inner = planted();
            let counting = Counting(&inner, AtomicUsize::new(0));
            let mut store = StageStore::open(dir.path()).unwrap();
            let before = store.ledger.len();
            run_autoresearch(&spec, "m", &counting, &mut store, None).unwrap();
            assert_eq!(counting.1.load(Ordering::SeqCst), 49 - before, "stop after {stop}");
            assert_eq!(store.state, reference.state);
            let got: BTreeSet<String> = store.ledger.records().iter().map(|r| format!("{r:?}")).collect();
            assert_eq!(got, want_records);
        }
    }

    #[test]
    fn failures_are_recorded_and_ranked_last() {
        struct Flaky(SyntheticEvaluator);
        impl ArmEvaluator for Flaky {
            fn evaluate(&self, arm: &RecipeArm, seed: u64) -> Result<ArmOutcome> {
                if arm.name == "p50_lr2e-4" {
                    return Err(Error::Diverged("non-finite loss at step 3".into()));
                }
                self.0.evaluate(arm, seed)
            }
        }
        let mut store = StageStore::in_memory();
        let spec = AutoResearchSpec { push: vec![], ..small_spec() };
        run_autoresearch(&spec, "m", &Flaky(planted()), &mut store, Some(Stage::Full)).unwrap();
        let quick = store.state.quick.as_ref().unwrap();
        assert_eq!(quick.last().unwrap().arm.name, "p50_lr2e-4");
        assert!(quick.last().unwrap().eval_loss.is_none());
        assert!(store.ledger.records().iter().any(|r| !r.is_ok() && r.failure_reason.contains("step 3")));
        assert!(store.state.full.as_ref().unwrap().iter().all(|s| s.arm.name != "p50_lr2e-4"));
    }

    #[test]
    fn spec_rejects_wrong_arm_count() {
        let mut spec = small_spec();
        spec.arms.pop();
        assert!(spec.validate().is_err());
        let mut spec = small_spec();
        spec.arms[0].selection = ArmSelection::Layers(BTreeSet::new());
        assert!(spec.validate().is_err());
    }

    #[test]
    fn training_evaluator_runs_an_arm() {
        use crate::model::ModelConfig;
        let model = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_ff: 32, max_seq: 8, ..ModelConfig::default() };
        let mut config = ExperimentConfig::for_model(model);
        config.data.n_train = 64;
        config.data.n_eval = 16;
        config.data.seq_len = 8;
        config.benchmarks = false;
        config.probe.n_batches = 2;
        config.train.batch_size = 4;
        config.train.warmup_steps = 1;
        let ev = TrainingEvaluator::new(&config).unwrap();
        let mut arm = default_arms()[2].with_steps(4);
        arm.attn_rank = 2;
        arm.mlp_rank = 2;
        let o = ev.evaluate(&arm, 42).unwrap();
        assert!(o.eval_loss.is_finite());
        assert_eq!(o.selected_layers.len(), 1);
        assert!(o.probe_time_s > 0.0);
        assert_eq!(ev.evaluate(&arm, 42).unwrap().probe_time_s, 0.0);
    }
}
