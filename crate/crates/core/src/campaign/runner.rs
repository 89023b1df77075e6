//! Paired standard-vs-selective experiments and the campaign driver.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::ledger::{Ledger, RunRecord, RunStatusTag};
use crate::data::{generate_dataset, Batch, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::eval::{eval_loss, score_benchmark, synthetic_suite, BenchSpec, BenchmarkTask};
use crate::model::{ModelConfig, TransformerModel};
use crate::probe::{gradient_probe, ProbeConfig, ProbeReport};
use crate::select::{select_layers, LoraPlan, LoraTargets, SelectionConfig};
use crate::tensor::{Precision, Real};
use crate::train::{train, train_interleaved, RunResult, RunStatus, TrainConfig, TrainSession};

/// Adapter shape shared by both recipes of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraDefaults {
    pub attn_rank: usize,
    pub mlp_rank: usize,
    pub alpha: f64,
    pub targets: LoraTargets,
}

impl Default for LoraDefaults {
    fn default() -> Self {
        LoraDefaults { attn_rank: 16, mlp_rank: 16, alpha: 32.0, targets: LoraTargets::default() }
    }
}

/// Everything needed to build, train and evaluate one model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Grouping key for family-level reports.
    pub family: Option<String>,
    pub model: ModelConfig,
    pub data: DatasetSpec,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub bench: BenchSpec,
    /// Skip the synthetic benchmarks entirely.
    pub benchmarks: bool,
    pub lora: LoraDefaults,
    pub precision: Precision,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        ExperimentConfig {
            name: model_name(&model),
            family: None,
            data: DatasetSpec { vocab_size: model.vocab_size, seq_len: model.max_seq, ..DatasetSpec::default() },
            model,
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            bench: BenchSpec::default(),
            benchmarks: true,
            lora: LoraDefaults::default(),
            precision: Precision::F64,
        }
    }
}

/// `L{layers}-d{width}`.
pub fn model_name(m: &ModelConfig) -> String {
    format!("L{}-d{}", m.n_layers, m.d_model)
}

impl ExperimentConfig {
    pub fn for_model(model: ModelConfig) -> Self {
        ExperimentConfig {
            name: model_name(&model),
            data: DatasetSpec { vocab_size: model.vocab_size, seq_len: model.max_seq, ..DatasetSpec::default() },
            model,
            ..ExperimentConfig::default()
        }
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.name.is_empty() || self.name.contains(',') {
            return Err(Error::config(format!("model name {:?} must be non-empty and comma-free", self.name)));
        }
        if self.data.vocab_size != self.model.vocab_size {
            return Err(Error::config(format!("data vocab {} != model vocab {}", self.data.vocab_size, self.model.vocab_size)));
        }
        if self.data.seq_len > self.model.max_seq {
            return Err(Error::config(format!("data seq_len {} exceeds model max_seq {}", self.data.seq_len, self.model.max_seq)));
        }
        Ok(())
    }

    pub fn family_or_default(&self) -> String {
        self.family.clone().unwrap_or_else(|| default_family(&self.name))
    }
}

/// Model-name prefix up to the first `-`.
pub fn default_family(model: &str) -> String {
    model.split('-').next().unwrap_or(model).to_string()
}

/// The three desk-scale size tiers.
pub fn desk_grid() -> Vec<ExperimentConfig> {
    [(8, 64, 256), (12, 128, 512), (16, 128, 512)]
        .into_iter()
        .map(|(n_layers, d_model, d_ff)| ExperimentConfig::for_model(ModelConfig { n_layers, d_model, d_ff, ..ModelConfig::default() }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    /// The untrained base model, scored once per cell.
    Base,
    /// Adapters on every layer.
    Standard,
    /// Adapters on the probe-selected layers, same step budget.
    Selective,
    /// Selective adapters trained for the compute-matched step budget.
    SelectiveCm,
}

impl Recipe {
    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::Base => "base",
            Recipe::Standard => "standard",
            Recipe::Selective => "selective",
            Recipe::SelectiveCm => "selective_cm",
        }
    }
}

/// Force one run to diverge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultInjection {
    pub model: Option<String>,
    pub recipe: Recipe,
    pub seed: u64,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignSpec {
    pub models: Vec<ExperimentConfig>,
    pub seeds: Vec<u64>,
    pub recipes: Vec<Recipe>,
    pub steps_matched: usize,
    pub steps_cm: usize,
    pub select_percent: f64,
    /// Worker threads; cells are distributed across them.
    pub jobs: usize,
    /// Stop after this many cells have been processed (interruption testing).
    pub max_cells: Option<usize>,
    pub fault: Option<FaultInjection>,
}

impl Default for CampaignSpec {
    fn default() -> Self {
        CampaignSpec {
            models: desk_grid(),
            seeds: vec![42, 123, 999],
            recipes: vec![Recipe::Standard, Recipe::Selective],
            steps_matched: 200,
            steps_cm: 250,
            select_percent: 50.0,
            jobs: 1,
            max_cells: None,
            fault: None,
        }
    }
}

impl CampaignSpec {
    pub fn load_json(path: &Path) -> Result<Self> {
        let spec: CampaignSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("campaign needs at least one seed"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("campaign seeds must be distinct"));
        }
        if self.steps_cm <= self.steps_matched {
            return Err(Error::config(format!("steps_cm {} must exceed steps_matched {}", self.steps_cm, self.steps_matched)));
        }
        if self.models.is_empty() || self.recipes.is_empty() {
            return Err(Error::config("campaign needs at least one model and one recipe"));
        }
        let names: BTreeSet<_> = self.models.iter().map(|m| &m.name).collect();
        if names.len() != self.models.len() {
            return Err(Error::config("campaign model names must be distinct"));
        }
        SelectionConfig::new(self.select_percent)?;
        for m in &self.models {
            m.validate()?;
        }
        Ok(())
    }

    fn diverge_step(&self, model: &str, recipe: Recipe, seed: u64) -> Option<usize> {
        self.fault
            .as_ref()
            .filter(|f| f.recipe == recipe && f.seed == seed && f.model.as_deref().map_or(true, |m| m == model))
            .map(|f| f.step)
    }
}

/// Precomputed per-configuration inputs shared by every seed.
pub struct Workbench {
    pub config: ExperimentConfig,
    pub data: Dataset,
    pub eval: Vec<Batch>,
    pub suite: Vec<BenchmarkTask>,
}

impl Workbench {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = generate_dataset(&config.data)?;
        let eval = data.eval_batches(config.train.batch_size.max(16));
        let suite = if config.benchmarks { synthetic_suite(&data, &config.bench)? } else { Vec::new() };
        Ok(Workbench { config: config.clone(), data, eval, suite })
    }

    pub fn base_model<F: Real>(&self, seed: u64) -> Result<TransformerModel<F>> {
        TransformerModel::new(&ModelConfig { seed, ..self.config.model.clone() })
    }

    /// The first `B` micro-batches of the seeded training stream.
    pub fn probe_batches(&self, seed: u64) -> Vec<Batch> {
        self.data.stream(self.config.train.batch_size, seed).take(self.config.probe.n_batches).collect()
    }

    /// Probe the base model for `seed`, returning the report and wall time.
    pub fn probe<F: Real>(&self, seed: u64) -> Result<(ProbeReport, f64)> {
        let mut model = self.base_model::<F>(seed)?;
        let batches = self.probe_batches(seed);
        let start = Instant::now();
        let report = gradient_probe(&mut model, &batches, &self.config.probe)?;
        Ok((report, start.elapsed().as_secs_f64()))
    }

    pub fn plan(&self, selected: BTreeSet<usize>) -> Result<LoraPlan> {
        let l = &self.config.lora;
        LoraPlan::new(selected, l.attn_rank, l.mlp_rank, l.alpha, l.targets)
    }

    pub fn train_config(&self, seed: u64, steps: usize, diverge_at_step: Option<usize>) -> TrainConfig {
        TrainConfig { seed, total_steps: steps, diverge_at_step, ..self.config.train.clone() }
    }

    /// Held-out loss and benchmark accuracies of a model.
    pub fn evaluate<F: Real>(&self, model: &TransformerModel<F>) -> Result<(f64, [Option<f64>; 3])> {
        let loss = eval_loss(model, &self.eval)?;
        let mut bench = [None; 3];
        for task in &self.suite {
            let slot = match task.name.as_str() {
                "mmlu" => 0,
                "math" => 1,
                _ => 2,
            };
            bench[slot] = Some(score_benchmark(model, task)?.accuracy);
        }
        Ok((loss, bench))
    }

    #[allow(clippy::too_many_arguments)]
    fn record<F: Real>(
        &self,
        recipe: Recipe,
        seed: u64,
        steps: usize,
        probe_time_s: f64,
        model: &TransformerModel<F>,
        run: &RunResult,
    ) -> Result<RunRecord> {
        let name = &self.config.name;
        if run.status == RunStatus::Diverged {
            let reason = run.failure_reason.clone().unwrap_or_else(|| "diverged".into());
            return Ok(RunRecord::failed(name, recipe.as_str(), seed, steps, reason));
        }
        let (eval_loss, [bench_mmlu, bench_math, bench_code]) = self.evaluate(model)?;
        Ok(RunRecord {
            model: name.clone(),
            recipe: recipe.as_str().to_string(),
            seed,
            steps,
            probe_time_s,
            train_time_s: run.wall_time_s,
            eval_loss,
            bench_mmlu,
            bench_math,
            bench_code,
            selected_layers: model.plan().map(|p| p.selected.iter().copied().collect()).unwrap_or_default(),
            trainable_params: model.count_trainable(),
            status: RunStatusTag::Ok,
            failure_reason: String::new(),
        })
    }
}

/// Both halves of a matched-step comparison.
#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub standard: RunRecord,
    pub selective: RunRecord,
    pub plan: LoraPlan,
    pub standard_run: RunResult,
    pub selective_run: RunResult,
}

/// Probe, select, then train standard and selective adapters from identical base
/// models with identical optimizer settings.
///
/// The two runs are advanced in alternating steps on the calling thread, and each
/// run's clock only covers its own steps.
pub fn run_pair(config: &ExperimentConfig, seed: u64, spec: &CampaignSpec) -> Result<PairOutcome> {
    let bench = Workbench::new(config)?;
    match config.precision {
        Precision::F64 => pair_on::<f64>(&bench, seed, spec),
        Precision::F32 => pair_on::<f32>(&bench, seed, spec),
    }
}

fn pair_on<F: Real>(bench: &Workbench, seed: u64, spec: &CampaignSpec) -> Result<PairOutcome> {
    let name = &bench.config.name;
    let n_layers = bench.config.model.n_layers;
    let (report, probe_time) = bench.probe::<F>(seed)?;
    let selected = select_layers(&report, &SelectionConfig::new(spec.select_percent)?, n_layers)?;
    let plan = bench.plan(selected)?;
    let all = bench.plan((0..n_layers).collect())?;

    let base = bench.base_model::<F>(seed)?;
    let (mut std_model, mut sel_model) = (base.clone(), base);
    std_model.inject_lora(&all)?;
    sel_model.inject_lora(&plan)?;
    let steps = spec.steps_matched;
    let std_cfg = bench.train_config(seed, steps, spec.diverge_step(name, Recipe::Standard, seed));
    let sel_cfg = bench.train_config(seed, steps, spec.diverge_step(name, Recipe::Selective, seed));
    let (mut s1, mut s2) = (bench.data.stream(std_cfg.batch_size, seed), bench.data.stream(sel_cfg.batch_size, seed));
    let (std_run, sel_run) = {
        let mut a = TrainSession::new(&mut std_model, &mut s1, &std_cfg)?;
        let mut b = TrainSession::new(&mut sel_model, &mut s2, &sel_cfg)?;
        train_interleaved(&mut a, &mut b)?;
        (a.finish(), b.finish())
    };
    Ok(PairOutcome {
        standard: bench.record(Recipe::Standard, seed, steps, 0.0, &std_model, &std_run)?,
        selective: bench.record(Recipe::Selective, seed, steps, probe_time, &sel_model, &sel_run)?,
        plan,
        standard_run: std_run,
        selective_run: sel_run,
    })
}

/// Train the matched run's selected layers for `steps_cm` steps.
pub fn run_compute_matched(config: &ExperimentConfig, seed: u64, spec: &CampaignSpec, matched: &RunRecord) -> Result<RunRecord> {
    let bench = Workbench::new(config)?;
    match config.precision {
        Precision::F64 => compute_matched_on::<f64>(&bench, seed, spec, matched),
        Precision::F32 => compute_matched_on::<f32>(&bench, seed, spec, matched),
    }
}

/// One standalone run: `Standard` trains every layer, `Selective` probes and keeps
/// the top `select_percent` layers.
pub fn run_single(
    config: &ExperimentConfig,
    seed: u64,
    recipe: Recipe,
    steps: usize,
    select_percent: f64,
) -> Result<(RunRecord, RunResult)> {
    let bench = Workbench::new(config)?;
    match config.precision {
        Precision::F64 => single_on::<f64>(&bench, seed, recipe, steps, select_percent),
        Precision::F32 => single_on::<f32>(&bench, seed, recipe, steps, select_percent),
    }
}

fn single_on<F: Real>(bench: &Workbench, seed: u64, recipe: Recipe, steps: usize, select_percent: f64) -> Result<(RunRecord, RunResult)> {
    let n_layers = bench.config.model.n_layers;
    let (selected, probe_time) = match recipe {
        Recipe::Standard => ((0..n_layers).collect(), 0.0),
        Recipe::Selective => {
            let (report, t) = bench.probe::<F>(seed)?;
            (select_layers(&report, &SelectionConfig::new(select_percent)?, n_layers)?, t)
        }
        other => return Err(Error::InvalidArgument(format!("run_single supports standard and selective, not {}", other.as_str()))),
    };
    let mut model = bench.base_model::<F>(seed)?;
    model.inject_lora(&bench.plan(selected)?)?;
    let cfg = bench.train_config(seed, steps, None);
    let run = train(&mut model, &mut bench.data.stream(cfg.batch_size, seed), &cfg)?;
    Ok((bench.record(recipe, seed, steps, probe_time, &model, &run)?, run))
}

fn compute_matched_on<F: Real>(bench: &Workbench, seed: u64, spec: &CampaignSpec, matched: &RunRecord) -> Result<RunRecord> {
    let name = &bench.config.name;
    if matched.recipe != Recipe::Selective.as_str() || matched.model != *name || matched.seed != seed || !matched.is_ok() {
        return Err(Error::Missing(format!("no successful matched selective run for {name} seed {seed}")));
    }
    let plan = bench.plan(matched.selected_layers.iter().copied().collect())?;
    let mut model = bench.base_model::<F>(seed)?;
    model.inject_lora(&plan)?;
    let steps = spec.steps_cm;
    let cfg = bench.train_config(seed, steps, spec.diverge_step(name, Recipe::SelectiveCm, seed));
    let run = train(&mut model, &mut bench.data.stream(cfg.batch_size, seed), &cfg)?;
    bench.record(Recipe::SelectiveCm, seed, steps, matched.probe_time_s, &model, &run)
}

fn base_record<F: Real>(bench: &Workbench, seed: u64) -> Result<RunRecord> {
    let model = bench.base_model::<F>(seed)?;
    let (eval_loss, [bench_mmlu, bench_math, bench_code]) = bench.evaluate(&model)?;
    Ok(RunRecord {
        model: bench.config.name.clone(),
        recipe: Recipe::Base.as_str().into(),
        seed,
        steps: 0,
        probe_time_s: 0.0,
        train_time_s: 0.0,
        eval_loss,
        bench_mmlu,
        bench_math,
        bench_code,
        selected_layers: Vec::new(),
        trainable_params: 0,
        status: RunStatusTag::Ok,
        failure_reason: String::new(),
    })
}

fn steps_for(spec: &CampaignSpec, recipe: Recipe) -> usize {
    match recipe {
        Recipe::Base => 0,
        Recipe::Standard | Recipe::Selective => spec.steps_matched,
        Recipe::SelectiveCm => spec.steps_cm,
    }
}

/// Run whatever the ledger is missing for one (model, seed) cell.
fn run_cell(bench: &Workbench, seed: u64, spec: &CampaignSpec, have: &dyn Fn(Recipe) -> Option<RunRecord>) -> Vec<RunRecord> {
    let name = &bench.config.name;
    let wanted: Vec<Recipe> = spec.recipes.iter().copied().filter(|&r| have(r).is_none()).collect();
    let mut out = Vec::new();
    let fail_all = |recipes: &[Recipe], e: &Error, out: &mut Vec<RunRecord>| {
        for &r in recipes {
            out.push(RunRecord::failed(name, r.as_str(), seed, steps_for(spec, r), e.to_string()));
        }
    };

    if wanted.contains(&Recipe::Base) {
        let r = match bench.config.precision {
            Precision::F64 => base_record::<f64>(bench, seed),
            Precision::F32 => base_record::<f32>(bench, seed),
        };
        out.push(r.unwrap_or_else(|e| RunRecord::failed(name, "base", seed, 0, e.to_string())));
    }

    let need_std = wanted.contains(&Recipe::Standard);
    let need_sel = wanted.contains(&Recipe::Selective);
    let mut matched = have(Recipe::Selective);
    if need_std || need_sel {
        let pair = match bench.config.precision {
            Precision::F64 => pair_on::<f64>(bench, seed, spec),
            Precision::F32 => pair_on::<f32>(bench, seed, spec),
        };
        match pair {
            Ok(p) => {
                if need_std {
                    out.push(p.standard);
                }
                if need_sel {
                    out.push(p.selective.clone());
                }
                matched = matched.or(Some(p.selective));
            }
            Err(e) => {
                let failed: Vec<Recipe> = [Recipe::Standard, Recipe::Selective].into_iter().filter(|r| wanted.contains(r)).collect();
                fail_all(&failed, &e, &mut out);
            }
        }
    }

    if wanted.contains(&Recipe::SelectiveCm) {
        let r = match &matched {
            Some(m) => match bench.config.precision {
                Precision::F64 => compute_matched_on::<f64>(bench, seed, spec, m),
                Precision::F32 => compute_matched_on::<f32>(bench, seed, spec, m),
            },
            None => Err(Error::Missing("matched selective run".into())),
        };
        out.push(r.unwrap_or_else(|e| RunRecord::failed(name, "selective_cm", seed, spec.steps_cm, e.to_string())));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CampaignSummary {
    pub cells: usize,
    pub appended: usize,
    pub failed: usize,
}

/// Execute every missing (model, seed, recipe) record of `spec`, appending to `ledger`.
///
/// Cells are independent and may run on parallel workers; records reach the ledger
/// through the calling thread only. Failures are recorded, never raised.
pub fn run_campaign(spec: &CampaignSpec, ledger: &mut Ledger) -> Result<CampaignSummary> {
    spec.validate()?;
    let benches: Vec<Workbench> = spec.models.iter().map(Workbench::new).collect::<Result<_>>()?;
    let mut cells: Vec<(usize, u64)> = Vec::new();
    for (m, bench) in benches.iter().enumerate() {
        for &seed in &spec.seeds {
            let complete =
                spec.recipes.iter().all(|&r| ledger.contains(&(bench.config.name.clone(), r.as_str().into(), seed, steps_for(spec, r))));
            if !complete {
                cells.push((m, seed));
            }
        }
    }
    if let Some(limit) = spec.max_cells {
        cells.truncate(limit);
    }

    let snapshot = ledger.clone();
    let lookup = |m: usize, seed: u64| {
        let name = benches[m].config.name.clone();
        let snapshot = &snapshot;
        move |r: Recipe| snapshot.get(&(name.clone(), r.as_str().into(), seed, steps_for(spec, r))).cloned()
    };

    let mut summary = CampaignSummary { cells: cells.len(), ..Default::default() };
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<Vec<RunRecord>>();
    let workers = spec.jobs.clamp(1, cells.len().max(1));
    let mut append_error = None;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (cells, benches, next, lookup) = (&cells, &benches, &next, &lookup);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(m, seed)) = cells.get(i) else { break };
                let records = run_cell(&benches[m], seed, spec, &lookup(m, seed));
                if tx.send(records).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for records in rx {
            for r in records {
                if append_error.is_some() {
                    continue;
                }
                let failed = !r.is_ok();
                match ledger.append(r) {
                    Ok(()) => {
                        summary.appended += 1;
                        summary.failed += failed as usize;
                    }
                    Err(e) => append_error = Some(e),
                }
            }
        }
    });
    match append_error {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}
