//! Tables and figures computed from a ledger.
//!
//! Everything here is a pure function of the ledger records: statistics are recomputed
//! on every call and no value is cached between runs.

pub mod svg;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::campaign::ledger::{Ledger, RunRecord};
use crate::campaign::runner::{default_family, Recipe};
use crate::error::{Error, Result};
use crate::eval::{benchmark_delta, extra_forgetting, forgetting_delta, BenchmarkScore, BENCHMARK_NAMES};
use crate::stats::{mean_sd, paired_t_test, PairedSample};
use crate::train::speedup_from_times;
use svg::{bar_chart, scatter, Bar, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FigureToggles {
    pub speedup_bars: bool,
    pub family_bars: bool,
    pub benchmark_deltas: bool,
    pub tradeoff_scatter: bool,
}

impl Default for FigureToggles {
    fn default() -> Self {
        FigureToggles { speedup_bars: true, family_bars: true, benchmark_deltas: true, tradeoff_scatter: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSpec {
    pub ledger: PathBuf,
    pub out: PathBuf,
    pub figures: FigureToggles,
    /// Model name → family. Unlisted models fall back to their name prefix.
    pub families: BTreeMap<String, String>,
}

impl ReportSpec {
    pub fn new(ledger: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        ReportSpec { ledger: ledger.into(), out: out.into(), figures: FigureToggles::default(), families: BTreeMap::new() }
    }

    pub fn family(&self, model: &str) -> String {
        self.families.get(model).cloned().unwrap_or_else(|| default_family(model))
    }
}

/// Mean with an optional spread; `sd` and `ci_half` need at least two values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Described {
    pub n: usize,
    pub mean: f64,
    pub sd: Option<f64>,
    pub ci_half: Option<f64>,
}

pub fn describe(x: &[f64]) -> Option<Described> {
    match x.len() {
        0 => None,
        1 => Some(Described { n: 1, mean: x[0], sd: None, ci_half: None }),
        _ => {
            let s = mean_sd(x).ok()?;
            Some(Described { n: s.n, mean: s.mean, sd: Some(s.sd), ci_half: Some(s.ci95_half_width()) })
        }
    }
}

fn pm(d: Option<Described>, decimals: usize) -> String {
    match d {
        None => "n/a".into(),
        Some(Described { mean, sd: Some(sd), .. }) => format!("{mean:.decimals$} ± {sd:.decimals$}"),
        Some(Described { mean, .. }) => format!("{mean:.decimals$}"),
    }
}

fn csv_num(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// A standard and a selective record with identical (model, seed, steps).
#[derive(Debug, Clone, Copy)]
pub struct Pair<'a> {
    pub standard: &'a RunRecord,
    pub selective: &'a RunRecord,
}

impl Pair<'_> {
    pub fn model(&self) -> &str {
        &self.standard.model
    }
}

/// Records grouped for reporting, with a warning for every record left out.
pub struct Collated<'a> {
    pub pairs: Vec<Pair<'a>>,
    pub base: BTreeMap<(String, u64), &'a RunRecord>,
    pub compute_matched: BTreeMap<(String, u64), &'a RunRecord>,
    pub warnings: Vec<String>,
    pub total: usize,
    pub failed: usize,
}

pub fn collate(records: &[RunRecord]) -> Collated<'_> {
    let mut std_map: BTreeMap<(String, u64, usize), &RunRecord> = BTreeMap::new();
    let mut sel_map: BTreeMap<(String, u64, usize), &RunRecord> = BTreeMap::new();
    let mut base = BTreeMap::new();
    let mut compute_matched = BTreeMap::new();
    let mut failed = 0;
    for r in records {
        if !r.is_ok() {
            failed += 1;
            continue;
        }
        let key = (r.model.clone(), r.seed, r.steps);
        if r.recipe == Recipe::Standard.as_str() {
            std_map.insert(key, r);
        } else if r.recipe == Recipe::Selective.as_str() {
            sel_map.insert(key, r);
        } else if r.recipe == Recipe::Base.as_str() {
            base.insert((r.model.clone(), r.seed), r);
        } else if r.recipe == Recipe::SelectiveCm.as_str() {
            compute_matched.insert((r.model.clone(), r.seed), r);
        }
    }
    let mut warnings = Vec::new();
    let mut pairs = Vec::new();
    for (key, s) in &std_map {
        match sel_map.get(key) {
            Some(a) => pairs.push(Pair { standard: s, selective: a }),
            None => warnings.push(format!("warning: excluding unpaired standard record model={} seed={} steps={}", key.0, key.1, key.2)),
        }
    }
    for key in sel_map.keys().filter(|k| !std_map.contains_key(*k)) {
        warnings.push(format!("warning: excluding unpaired selective record model={} seed={} steps={}", key.0, key.1, key.2));
    }
    Collated { pairs, base, compute_matched, warnings, total: records.len(), failed }
}

fn by_model<'a>(pairs: &[Pair<'a>]) -> BTreeMap<&'a str, Vec<Pair<'a>>> {
    let mut m: BTreeMap<&str, Vec<Pair>> = BTreeMap::new();
    for p in pairs {
        m.entry(p.standard.model.as_str()).or_default().push(*p);
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupRow {
    pub label: String,
    pub n: usize,
    pub std_time: f64,
    pub sel_time: f64,
    pub speedup: Option<Described>,
    pub ratio: f64,
    pub p_value: Option<f64>,
    pub degenerate: bool,
    pub probe_overhead_pct: Option<Described>,
}

fn speedup_row(label: &str, pairs: &[Pair]) -> Result<SpeedupRow> {
    let mut pct = Vec::new();
    let mut ratio = Vec::new();
    let mut overhead = Vec::new();
    for p in pairs {
        let s = speedup_from_times(p.standard.train_time_s, p.selective.train_time_s)?;
        pct.push(s.percent);
        ratio.push(s.ratio);
        let total = p.selective.probe_time_s + p.selective.train_time_s;
        overhead.push(100.0 * p.selective.probe_time_s / total);
    }
    let a: Vec<f64> = pairs.iter().map(|p| p.standard.train_time_s).collect();
    let b: Vec<f64> = pairs.iter().map(|p| p.selective.train_time_s).collect();
    let (p_value, degenerate) = if pairs.len() >= 2 {
        let t = paired_t_test(&PairedSample::new(a.clone(), b.clone()))?;
        (t.p_two_sided, t.degenerate)
    } else {
        (None, false)
    };
    let n = pairs.len() as f64;
    Ok(SpeedupRow {
        label: label.to_string(),
        n: pairs.len(),
        std_time: a.iter().sum::<f64>() / n,
        sel_time: b.iter().sum::<f64>() / n,
        speedup: describe(&pct),
        ratio: ratio.iter().sum::<f64>() / n,
        p_value,
        degenerate,
        probe_overhead_pct: describe(&overhead),
    })
}

/// Per-model speedup rows followed by an `Overall` row over every pair.
pub fn speedup_rows(pairs: &[Pair]) -> Result<Vec<SpeedupRow>> {
    let mut rows = Vec::new();
    for (model, ps) in by_model(pairs) {
        rows.push(speedup_row(model, &ps)?);
    }
    if !pairs.is_empty() {
        rows.push(speedup_row("Overall", pairs)?);
    }
    Ok(rows)
}

pub fn render_speedup_table(pairs: &[Pair]) -> Result<(String, String)> {
    let rows = speedup_rows(pairs)?;
    let mut md = String::from(
        "| Model | Pairs | Standard time (s) | Selective time (s) | Speedup % | Ratio | p (paired) | Probe overhead % |\n|---|---|---|---|---|---|---|---|\n",
    );
    let mut csv = String::from(
        "model,pairs,standard_time_s,selective_time_s,speedup_pct_mean,speedup_pct_sd,ratio,p_value,degenerate,probe_overhead_pct\n",
    );
    for r in &rows {
        let p = match (r.p_value, r.degenerate) {
            (Some(p), _) => format!("{p:.4}"),
            (None, true) => "degenerate".into(),
            (None, false) => "n/a".into(),
        };
        let _ = writeln!(
            md,
            "| {} | {} | {:.2} | {:.2} | {} | {:.3}× | {p} | {} |",
            r.label,
            r.n,
            r.std_time,
            r.sel_time,
            pm(r.speedup, 1),
            r.ratio,
            pm(r.probe_overhead_pct, 2)
        );
        let _ = writeln!(
            csv,
            "{},{},{:.6},{:.6},{},{},{:.6},{},{},{}",
            r.label,
            r.n,
            r.std_time,
            r.sel_time,
            csv_num(r.speedup.map(|d| d.mean)),
            csv_num(r.speedup.and_then(|d| d.sd)),
            r.ratio,
            csv_num(r.p_value),
            r.degenerate,
            csv_num(r.probe_overhead_pct.map(|d| d.mean))
        );
    }
    Ok((md, csv))
}

fn score(r: &RunRecord, bench: &str) -> Option<BenchmarkScore> {
    r.bench(bench).map(|accuracy| BenchmarkScore { name: bench.to_string(), accuracy, correct: 0, n_items: 0 })
}

/// Per-pair `selective − standard` benchmark delta (pp), which equals the extra forgetting.
fn pair_extra(p: &Pair, bench: &str) -> Result<Option<f64>> {
    match (score(p.standard, bench), score(p.selective, bench)) {
        (Some(s), Some(a)) => benchmark_delta(&s, &a).map(Some),
        _ => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingRow {
    pub model: String,
    pub benchmark: String,
    pub base_acc: Option<Described>,
    pub std_delta: Option<Described>,
    pub sel_delta: Option<Described>,
    pub extra: Option<Described>,
}

pub fn forgetting_rows(c: &Collated) -> Result<Vec<ForgettingRow>> {
    let mut rows = Vec::new();
    for (model, ps) in by_model(&c.pairs) {
        for bench in BENCHMARK_NAMES {
            let (mut base_acc, mut std_d, mut sel_d, mut extra) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for p in &ps {
                let (Some(s), Some(a)) = (score(p.standard, bench), score(p.selective, bench)) else { continue };
                match c.base.get(&(model.to_string(), p.standard.seed)).and_then(|b| score(b, bench)) {
                    Some(b) => {
                        let (fs, fa) = (forgetting_delta(&b, &s)?, forgetting_delta(&b, &a)?);
                        base_acc.push(100.0 * b.accuracy);
                        std_d.push(fs.delta_pp);
                        sel_d.push(fa.delta_pp);
                        extra.push(extra_forgetting(&fs, &fa)?);
                    }
                    None => extra.push(benchmark_delta(&s, &a)?),
                }
            }
            if extra.is_empty() {
                continue;
            }
            rows.push(ForgettingRow {
                model: model.to_string(),
                benchmark: bench.to_string(),
                base_acc: describe(&base_acc),
                std_delta: describe(&std_d),
                sel_delta: describe(&sel_d),
                extra: describe(&extra),
            });
        }
    }
    Ok(rows)
}

pub fn render_forgetting_table(c: &Collated) -> Result<(String, String)> {
    let rows = forgetting_rows(c)?;
    let mut md = String::from(
        "| Model | Benchmark | Base acc % | Standard Δ pp | Selective Δ pp | Extra forgetting pp |\n|---|---|---|---|---|---|\n",
    );
    let mut csv = String::from(
        "model,benchmark,base_acc_pct,standard_delta_pp,selective_delta_pp,extra_forgetting_pp_mean,extra_forgetting_pp_sd,n\n",
    );
    for r in &rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            r.model,
            r.benchmark,
            pm(r.base_acc, 1),
            pm(r.std_delta, 1),
            pm(r.sel_delta, 1),
            pm(r.extra, 1)
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.model,
            r.benchmark,
            csv_num(r.base_acc.map(|d| d.mean)),
            csv_num(r.std_delta.map(|d| d.mean)),
            csv_num(r.sel_delta.map(|d| d.mean)),
            csv_num(r.extra.map(|d| d.mean)),
            csv_num(r.extra.and_then(|d| d.sd)),
            r.extra.map_or(0, |d| d.n)
        );
    }
    Ok((md, csv))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkDeltaRow {
    pub benchmark: String,
    pub model: String,
    pub delta_pp: Option<Described>,
}

/// `selective − standard` accuracy deltas per benchmark, per model, then over all pairs.
pub fn benchmark_delta_rows(pairs: &[Pair]) -> Result<Vec<BenchmarkDeltaRow>> {
    let mut rows = Vec::new();
    for bench in BENCHMARK_NAMES {
        let mut all = Vec::new();
        for (model, ps) in by_model(pairs) {
            let mut d = Vec::new();
            for p in &ps {
                if let Some(x) = pair_extra(p, bench)? {
                    d.push(x);
                }
            }
            if !d.is_empty() {
                all.extend_from_slice(&d);
                rows.push(BenchmarkDeltaRow { benchmark: bench.into(), model: model.into(), delta_pp: describe(&d) });
            }
        }
        if !all.is_empty() {
            rows.push(BenchmarkDeltaRow { benchmark: bench.into(), model: "Overall".into(), delta_pp: describe(&all) });
        }
    }
    Ok(rows)
}

pub fn render_benchmark_table(pairs: &[Pair]) -> Result<(String, String)> {
    let rows = benchmark_delta_rows(pairs)?;
    let mut md = String::from("| Benchmark | Model | Selective − Standard pp |\n|---|---|---|\n");
    let mut csv = String::from("benchmark,model,delta_pp_mean,delta_pp_sd,n\n");
    for r in &rows {
        let _ = writeln!(md, "| {} | {} | {} |", r.benchmark, r.model, pm(r.delta_pp, 2));
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.benchmark,
            r.model,
            csv_num(r.delta_pp.map(|d| d.mean)),
            csv_num(r.delta_pp.and_then(|d| d.sd)),
            r.delta_pp.map_or(0, |d| d.n)
        );
    }
    Ok((md, csv))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityRow {
    pub model: String,
    pub std_loss: Option<Described>,
    pub sel_loss: Option<Described>,
    pub gap: Option<Described>,
    pub cm_loss: Option<Described>,
    pub cm_time_vs_std_pct: Option<Described>,
}

/// Eval losses of the matched pair and, when present, the compute-matched selective run.
pub fn quality_rows(c: &Collated) -> Vec<QualityRow> {
    let mut rows = Vec::new();
    for (model, ps) in by_model(&c.pairs) {
        let s: Vec<f64> = ps.iter().map(|p| p.standard.eval_loss).collect();
        let a: Vec<f64> = ps.iter().map(|p| p.selective.eval_loss).collect();
        let gap: Vec<f64> = ps.iter().map(|p| p.selective.eval_loss - p.standard.eval_loss).collect();
        let (mut cm, mut cm_time) = (Vec::new(), Vec::new());
        for p in &ps {
            if let Some(r) = c.compute_matched.get(&(model.to_string(), p.standard.seed)) {
                cm.push(r.eval_loss);
                cm_time.push(100.0 * (r.train_time_s - p.standard.train_time_s) / p.standard.train_time_s);
            }
        }
        rows.push(QualityRow {
            model: model.to_string(),
            std_loss: describe(&s),
            sel_loss: describe(&a),
            gap: describe(&gap),
            cm_loss: describe(&cm),
            cm_time_vs_std_pct: describe(&cm_time),
        });
    }
    rows
}

pub fn render_quality_table(c: &Collated) -> (String, String) {
    let rows = quality_rows(c);
    let mut md = String::from(
        "| Model | Standard eval loss | Selective eval loss | Gap (sel − std) | Compute-matched eval loss | Compute-matched time vs standard % |\n|---|---|---|---|---|---|\n",
    );
    let mut csv =
        String::from("model,standard_loss,selective_loss,gap_mean,gap_sd,compute_matched_loss,compute_matched_time_vs_standard_pct\n");
    for r in &rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            r.model,
            pm(r.std_loss, 4),
            pm(r.sel_loss, 4),
            pm(r.gap, 4),
            pm(r.cm_loss, 4),
            pm(r.cm_time_vs_std_pct, 1)
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.model,
            csv_num(r.std_loss.map(|d| d.mean)),
            csv_num(r.sel_loss.map(|d| d.mean)),
            csv_num(r.gap.map(|d| d.mean)),
            csv_num(r.gap.and_then(|d| d.sd)),
            csv_num(r.cm_loss.map(|d| d.mean)),
            csv_num(r.cm_time_vs_std_pct.map(|d| d.mean))
        );
    }
    (md, csv)
}

/// A figure's file name and contents, or the reason it was skipped.
pub type Figure = std::result::Result<(String, String), String>;

fn whisker(d: &Described, what: &str) -> std::result::Result<f64, String> {
    d.ci_half.ok_or_else(|| format!("{what} has n={} (need ≥ 2 for a confidence interval)", d.n))
}

pub fn speedup_figure(pairs: &[Pair]) -> Result<Figure> {
    let mut bars = Vec::new();
    for r in speedup_rows(pairs)?.into_iter().filter(|r| r.label != "Overall") {
        let Some(d) = r.speedup else { continue };
        match whisker(&d, &r.label) {
            Ok(h) => bars.push(Bar { label: "speedup".into(), group: r.label.clone(), value: d.mean, half_width: h }),
            Err(e) => return Ok(Err(e)),
        }
    }
    if bars.is_empty() {
        return Ok(Err("no complete standard/selective pairs".into()));
    }
    Ok(Ok(("speedup_bars.svg".into(), bar_chart("speedup_bars", "Training-time speedup by model (mean, 95% CI)", "speedup %", &bars))))
}

pub fn family_figure(pairs: &[Pair], spec: &ReportSpec) -> Result<Figure> {
    let mut fam: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in pairs {
        let s = speedup_from_times(p.standard.train_time_s, p.selective.train_time_s)?;
        fam.entry(spec.family(p.model())).or_default().push(s.percent);
    }
    let mut bars = Vec::new();
    for (f, xs) in &fam {
        let d = describe(xs).expect("non-empty");
        match whisker(&d, f) {
            Ok(h) => bars.push(Bar { label: "speedup".into(), group: f.clone(), value: d.mean, half_width: h }),
            Err(e) => return Ok(Err(e)),
        }
    }
    if bars.is_empty() {
        return Ok(Err("no complete standard/selective pairs".into()));
    }
    Ok(Ok(("family_bars.svg".into(), bar_chart("family_bars", "Speedup by model family (mean, 95% CI)", "speedup %", &bars))))
}

pub fn benchmark_figure(pairs: &[Pair]) -> Result<Figure> {
    let mut bars = Vec::new();
    for r in benchmark_delta_rows(pairs)?.into_iter().filter(|r| r.model != "Overall") {
        let Some(d) = r.delta_pp else { continue };
        match whisker(&d, &format!("{}/{}", r.model, r.benchmark)) {
            Ok(h) => bars.push(Bar { label: r.model.clone(), group: r.benchmark.clone(), value: d.mean, half_width: h }),
            Err(e) => return Ok(Err(e)),
        }
    }
    if bars.is_empty() {
        return Ok(Err("ledger has no benchmark scores".into()));
    }
    Ok(Ok((
        "benchmark_deltas.svg".into(),
        bar_chart("benchmark_deltas", "Benchmark accuracy delta, selective − standard (mean, 95% CI)", "delta pp", &bars),
    )))
}

pub fn tradeoff_figure(c: &Collated) -> Result<Figure> {
    let speed = speedup_rows(&c.pairs)?;
    let forgetting = forgetting_rows(c)?;
    let mut points = Vec::new();
    for r in speed.iter().filter(|r| r.label != "Overall") {
        let Some(sx) = r.speedup else { continue };
        let Some(fy) = forgetting.iter().find(|f| f.model == r.label && f.benchmark == "mmlu").and_then(|f| f.extra) else {
            return Ok(Err(format!("{} has no mmlu scores", r.label)));
        };
        let (hx, hy) = match (whisker(&sx, &r.label), whisker(&fy, &r.label)) {
            (Ok(hx), Ok(hy)) => (hx, hy),
            (Err(e), _) | (_, Err(e)) => return Ok(Err(e)),
        };
        points.push(Point { label: r.label.clone(), x: sx.mean, y: fy.mean, x_half_width: hx, y_half_width: hy });
    }
    if points.is_empty() {
        return Ok(Err("no complete standard/selective pairs".into()));
    }
    Ok(Ok((
        "tradeoff_scatter.svg".into(),
        scatter("tradeoff_scatter", "Speedup vs extra mmlu forgetting (mean, 95% CI)", "speedup %", "extra forgetting pp", &points),
    )))
}

/// Files written by [`render_report`] plus every warning it printed into `summary.md`.
#[derive(Debug, Clone, Default)]
pub struct ReportOutput {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// `(file name, contents)` pairs.
pub type Files = Vec<(String, String)>;

/// Build every table and the enabled figures from an in-memory ledger.
pub fn build_report(ledger: &Ledger, spec: &ReportSpec) -> Result<(Files, Vec<String>)> {
    let c = collate(ledger.records());
    let mut warnings = c.warnings.clone();
    if c.pairs.is_empty() {
        warnings.push("warning: ledger contains no complete standard/selective pair".into());
    }
    let (speed_md, speed_csv) = render_speedup_table(&c.pairs)?;
    let (forget_md, forget_csv) = render_forgetting_table(&c)?;
    let (bench_md, bench_csv) = render_benchmark_table(&c.pairs)?;
    let (qual_md, qual_csv) = render_quality_table(&c);

    let mut files = Vec::new();
    let t = spec.figures;
    let figures: [(bool, &str, Figure); 4] = [
        (t.speedup_bars, "speedup_bars", speedup_figure(&c.pairs)?),
        (t.family_bars, "family_bars", family_figure(&c.pairs, spec)?),
        (t.benchmark_deltas, "benchmark_deltas", benchmark_figure(&c.pairs)?),
        (t.tradeoff_scatter, "tradeoff_scatter", tradeoff_figure(&c)?),
    ];
    for (enabled, name, fig) in figures {
        match (enabled, fig) {
            (false, _) => {}
            (true, Ok(f)) => files.push(f),
            (true, Err(why)) => warnings.push(format!("warning: skipped figure {name}: {why}")),
        }
    }

    let mut md = String::from("# Experiment report\n\n");
    let _ = writeln!(md, "Records: {} total, {} failed (excluded from statistics), {} complete pairs.\n", c.total, c.failed, c.pairs.len());
    for w in &warnings {
        let _ = writeln!(md, "> {w}");
    }
    if !warnings.is_empty() {
        md.push('\n');
    }
    for (title, table) in [
        ("Training-time speedup", &speed_md),
        ("Eval loss and compute-matched runs", &qual_md),
        ("Forgetting", &forget_md),
        ("Benchmark deltas", &bench_md),
    ] {
        let _ = writeln!(md, "## {title}\n\n{table}");
    }
    files.insert(0, ("summary.md".into(), md));
    files.push(("speedup.csv".into(), speed_csv));
    files.push(("quality.csv".into(), qual_csv));
    files.push(("forgetting.csv".into(), forget_csv));
    files.push(("benchmark_deltas.csv".into(), bench_csv));
    Ok((files, warnings))
}

/// Load the ledger, build the report and write every file under `spec.out`.
pub fn render_report(spec: &ReportSpec) -> Result<ReportOutput> {
    if !spec.ledger.exists() {
        return Err(Error::Missing(format!("ledger {}", spec.ledger.display())));
    }
    let ledger = Ledger::load(&spec.ledger)?;
    let (files, warnings) = build_report(&ledger, spec)?;
    fs::create_dir_all(&spec.out)?;
    let mut out = ReportOutput { files: Vec::new(), warnings };
    for (name, body) in files {
        let path = spec.out.join(name);
        fs::write(&path, body)?;
        out.files.push(path);
    }
    Ok(out)
}

/// Read a figure back: `(label, value, half_width)` for each bar in document order.
pub fn parse_bars(svg: &str) -> Vec<(String, f64, f64)> {
    let get = |line: &str, key: &str| -> Option<String> {
        let k = format!(" {key}=\"");
        let start = line.find(&k)? + k.len();
        Some(line[start..].split('"').next()?.to_string())
    };
    svg.lines()
        .filter(|l| l.contains(r#"class="bar""#))
        .filter_map(|l| {
            let group = get(l, "data-group")?;
            Some((group, get(l, "data-value")?.parse().ok()?, get(l, "data-half-width")?.parse().ok()?))
        })
        .collect()
}
