use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use selora_core::campaign::autoresearch::{run_autoresearch, AutoResearchSpec, Stage, StageStore, TrainingEvaluator};
use selora_core::campaign::runner::{desk_grid, Workbench};
use selora_core::campaign::{run_campaign, run_pair, run_single, CampaignSpec, ExperimentConfig, Ledger, Recipe};
use selora_core::report::{render_report, ReportSpec};

#[derive(Parser)]
#[command(name = "selora", version, about = "Gradient-probed layer selection for LoRA fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Probe per-layer gradient norms and write the report as JSON.
    Probe {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output JSON file.
        #[arg(long, default_value = "probe.json")]
        out: PathBuf,
    },
    /// Train one recipe and append its record to `<out>/ledger.csv`.
    Train {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Train probe-selected layers; without it every layer gets adapters.
        #[arg(long)]
        select_percent: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Train a standard/selective pair and append both records.
    Pair {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 50.0)]
        select_percent: f64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run (or resume) a multi-seed campaign into `<out>/ledger.csv`.
    Campaign {
        /// Campaign JSON; the desk grid when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        select_percent: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, env = "SELORA_JOBS")]
        jobs: Option<usize>,
        #[arg(long, default_value = "campaign")]
        out: PathBuf,
    },
    /// Run (or resume) the staged recipe search under `<out>`.
    Autoresearch {
        #[command(flatten)]
        exp: ExpArgs,
        /// Search JSON; the default eight-arm search when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Stop once this stage is complete.
        #[arg(long, value_parser = parse_stage)]
        stop_after: Option<Stage>,
        #[arg(long, default_value = "autoresearch")]
        out: PathBuf,
    },
    /// Render tables and figures from a ledger.
    Report {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// Family override, `MODEL=FAMILY`; repeatable.
        #[arg(long, value_parser = parse_family)]
        family: Vec<(String, String)>,
        /// Figure to leave out; repeatable.
        #[arg(long, value_parser = ["speedup_bars", "family_bars", "benchmark_deltas", "tradeoff_scatter"])]
        skip_figure: Vec<String>,
    },
}

#[derive(Args)]
struct ExpArgs {
    /// Experiment JSON; the L12-d128 desk default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Attention adapter rank (also the MLP rank unless --mlp-rank is given).
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    mlp_rank: Option<usize>,
}

impl ExpArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(p) => ExperimentConfig::load_json(p).with_context(|| format!("loading {}", p.display()))?,
            None => desk_grid().into_iter().find(|c| c.name == "L12-d128").expect("desk grid has the default tier"),
        };
        if let Some(r) = self.rank {
            config.lora.attn_rank = r;
            config.lora.mlp_rank = r;
        }
        if let Some(r) = self.mlp_rank {
            config.lora.mlp_rank = r;
        }
        Ok(config)
    }
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    match s {
        "quick" => Ok(Stage::Quick),
        "full" => Ok(Stage::Full),
        "push" => Ok(Stage::Push),
        "ablation" => Ok(Stage::Ablation),
        _ => Err("expected quick, full, push or ablation".into()),
    }
}

fn parse_family(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once('=') {
        Some((m, f)) if !m.is_empty() && !f.is_empty() => Ok((m.into(), f.into())),
        _ => Err("expected MODEL=FAMILY".into()),
    }
}

/// Override the matched step budget, keeping the compute-matched budget proportionally larger.
fn with_steps(spec: CampaignSpec, steps: Option<usize>) -> CampaignSpec {
    let Some(n) = steps else { return spec };
    let cm = (n * spec.steps_cm).div_ceil(spec.steps_matched.max(1)).max(n + 1);
    CampaignSpec { steps_matched: n, steps_cm: cm, ..spec }
}

fn ledger_in(out: &Path) -> Result<Ledger> {
    let path = out.join("ledger.csv");
    Ledger::open(&path).with_context(|| format!("opening {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Probe { exp, seed, out } => {
            let bench = Workbench::new(&exp.load()?)?;
            let (report, secs) = bench.probe::<f64>(seed)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, report.to_json()?).with_context(|| format!("writing {}", out.display()))?;
            println!("probe: {} layers in {secs:.3}s, ranking {:?} -> {}", report.layers, report.ranking, out.display());
        }
        Command::Train { exp, seed, select_percent, steps, out } => {
            let config = exp.load()?;
            let steps = steps.unwrap_or(config.train.total_steps);
            let (recipe, pct) = match select_percent {
                Some(p) => (Recipe::Selective, p),
                None => (Recipe::Standard, 100.0),
            };
            let mut ledger = ledger_in(&out)?;
            let (record, _) = run_single(&config, seed, recipe, steps, pct)?;
            let line = summary(&record);
            ledger.append(record)?;
            println!("{line}");
        }
        Command::Pair { exp, seed, select_percent, steps, out } => {
            let config = exp.load()?;
            let spec = CampaignSpec { models: vec![config.clone()], select_percent, ..CampaignSpec::default() };
            let spec = with_steps(spec, steps);
            spec.validate()?;
            let mut ledger = ledger_in(&out)?;
            let p = run_pair(&config, seed, &spec)?;
            for r in [p.standard, p.selective] {
                println!("{}", summary(&r));
                ledger.append(r)?;
            }
        }
        Command::Campaign { config, select_percent, steps, jobs, out } => {
            let mut spec = match &config {
                Some(p) => CampaignSpec::load_json(p).with_context(|| format!("loading {}", p.display()))?,
                None => CampaignSpec::default(),
            };
            if let Some(k) = select_percent {
                spec.select_percent = k;
            }
            spec = with_steps(spec, steps);
            if let Some(j) = jobs {
                spec.jobs = j;
            }
            spec.validate()?;
            let mut ledger = ledger_in(&out)?;
            let s = run_campaign(&spec, &mut ledger)?;
            println!(
                "campaign: {} cells, {} records appended ({} failed), ledger {}",
                s.cells,
                s.appended,
                s.failed,
                out.join("ledger.csv").display()
            );
        }
        Command::Autoresearch { exp, spec, stop_after, out } => {
            let config = exp.load()?;
            let spec = match &spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
                None => AutoResearchSpec::default(),
            };
            let evaluator = TrainingEvaluator::new(&config)?;
            let mut store = StageStore::open(&out)?;
            run_autoresearch(&spec, &config.name, &evaluator, &mut store, stop_after)?;
            let report = store.state.report();
            fs::write(out.join("report.md"), &report)?;
            print!("{report}");
        }
        Command::Report { ledger, out, family, skip_figure } => {
            let mut spec = ReportSpec::new(ledger, out);
            spec.families = family.into_iter().collect::<BTreeMap<_, _>>();
            for f in &skip_figure {
                match f.as_str() {
                    "speedup_bars" => spec.figures.speedup_bars = false,
                    "family_bars" => spec.figures.family_bars = false,
                    "benchmark_deltas" => spec.figures.benchmark_deltas = false,
                    "tradeoff_scatter" => spec.figures.tradeoff_scatter = false,
                    other => bail!("unknown figure {other}"),
                }
            }
            let written = render_report(&spec)?;
            for w in &written.warnings {
                eprintln!("{w}");
            }
            println!("report: {} files in {}", written.files.len(), spec.out.display());
        }
    }
    Ok(())
}

fn summary(r: &selora_core::campaign::RunRecord) -> String {
    if r.is_ok() {
        format!(
            "{} {} seed={} steps={}: train {:.2}s, eval loss {:.4}, layers {:?}",
            r.model, r.recipe, r.seed, r.steps, r.train_time_s, r.eval_loss, r.selected_layers
        )
    } else {
        format!("{} {} seed={} steps={}: FAILED {}", r.model, r.recipe, r.seed, r.steps, r.failure_reason)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
