//! Subcommands of the `refinebench` binary.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use refinebench_core::aggregate::WeightVector;
use refinebench_core::benchmark::{load_benchmark, Benchmark, Category};
use refinebench_core::config::{BackendMode, Config};
use refinebench_core::gateway::ReqwestTransport;
use refinebench_core::golden::{parse_perfics_inputs, GoldenData};
use refinebench_core::perfics::{rank_models, scenario_rank, Focus, PerficsParams, ScenarioCandidate, ScenarioConstraints};
use refinebench_core::pipeline::{open_run, score_events, Pipeline, RunSetup, RunSummary};
use refinebench_core::profile::Quantization;
use refinebench_core::report::{emit_table, ranking_table, Cell, Format, ReportTable};
use refinebench_core::store::{read_manifest, RunStore, BENCHMARK_FILE, MANIFEST_FILE};
use refinebench_core::verify::{verify_all, PropertyOptions};

#[derive(Debug, Parser)]
#[command(name = "refinebench", version, about = "Self-refinement benchmark runs, pairwise judging, scoring and ranking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate zero-shot, critique and refinement responses (resumable).
    Run(RunArgs),
    /// Judge candidate responses against the control in both orders (resumable).
    Judge(RunArgs),
    /// Aggregate a judged run into category tables.
    Score(ScoreArgs),
    /// Rank models by the cost-aware metric.
    Rank(RankArgs),
    /// Rank under a VRAM budget and task focus.
    Scenario(ScenarioArgs),
    /// Print the embedded reference tables.
    Report(ReportArgs),
    /// Run every acceptance check against the embedded data.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Config file; defaults to the snapshot stored in the run directory.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long, default_value = "live")]
    backend: BackendMode,
    /// Refinement rounds; overrides the config.
    #[arg(long)]
    iterations: Option<u32>,
    /// Benchmark file; overrides the config.
    #[arg(long)]
    benchmark: Option<PathBuf>,
    /// Fixture directory for record/replay (default: <run-dir>/fixtures).
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Transcripts or judgments in flight. 1 keeps the event log order fixed.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_dir: PathBuf,
    /// vicuna | uniform | PATH to a `category = weight` TOML file.
    #[arg(long, default_value = "vicuna")]
    weights: String,
    #[arg(long, default_value = "markdown")]
    format: Format,
}

#[derive(Debug, Args)]
struct RankArgs {
    /// table4 | PATH to csv with model,vram_cost,baseline,refined,ext_avg.
    #[arg(long, default_value = "table4")]
    profiles: String,
    /// default | PATH to a TOML parameter file.
    #[arg(long, default_value = "default")]
    params: String,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value = "markdown")]
    format: Format,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Use a scored run (with its config) instead of the embedded tables.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "default")]
    params: String,
    /// VRAM budget in GB; omit for no limit.
    #[arg(long)]
    budget_gb: Option<f64>,
    #[arg(long, default_value = "4", value_parser = parse_quant)]
    quant: Quantization,
    /// Focus on one task category.
    #[arg(long, conflicts_with = "weights")]
    category: Option<String>,
    /// Focus on a weighted mix: vicuna | uniform | PATH.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value = "markdown")]
    format: Format,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// all | vram | refinement | orders | ranking
    #[arg(long, default_value = "all")]
    table: String,
    #[arg(long, default_value = "vicuna")]
    weights: String,
    #[arg(long, default_value = "markdown")]
    format: Format,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value = "markdown")]
    format: Format,
    /// Seed for the randomized property checks.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_quant(s: &str) -> Result<Quantization, String> {
    match s {
        "4" => Ok(Quantization::FourBit),
        "16" => Ok(Quantization::SixteenBit),
        other => Err(format!("{other:?} is not 4 or 16")),
    }
}

/// Parses `argv` (program name first), runs the command and maps the outcome
/// to an exit status: 0 success, 1 failure, 2 usage error.
pub fn dispatch<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let mut out = std::io::stdout().lock();
    match execute(cli.command, &mut out) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Runtime::new().context("starting async runtime")
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<bool> {
    match cmd {
        Command::Run(a) => run_phase(a, Phase::Generate, out),
        Command::Judge(a) => run_phase(a, Phase::Judge, out),
        Command::Score(a) => score(a, out),
        Command::Rank(a) => rank(a, out),
        Command::Scenario(a) => scenario(a, out),
        Command::Report(a) => report(a, out),
        Command::Verify(a) => verify(a, out),
    }
}

fn emit(out: &mut dyn Write, t: &ReportTable, format: Format) -> Result<()> {
    writeln!(out, "{}", emit_table(t, format))?;
    Ok(())
}

/// Config from `--config`, else the snapshot in the run manifest.
fn load_config(config: Option<&Path>, run_dir: &Path) -> Result<Config> {
    match config {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display())),
        None => {
            let manifest = read_manifest(run_dir)
                .with_context(|| format!("no --config given and {} has no manifest", run_dir.display()))?;
            Ok(Config::from_snapshot(manifest.config)?)
        }
    }
}

fn stored_benchmark(run_dir: &Path) -> Result<Benchmark> {
    let path = run_dir.join(BENCHMARK_FILE);
    load_benchmark(&path).with_context(|| format!("reading {}", path.display()))
}

fn weights(spec: &str, categories: &[&Category]) -> Result<(WeightVector, String)> {
    Ok(match spec {
        "vicuna" => (WeightVector::vicuna(), "Vicuna".into()),
        "uniform" => (WeightVector::uniform(categories.iter().copied())?, "Uniform".into()),
        path => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading weights {path}"))?;
            let label = Path::new(path)
                .file_stem()
                .map_or_else(|| path.to_string(), |s| s.to_string_lossy().into_owned());
            (WeightVector::from_toml(&text)?, label)
        }
    })
}

fn params(spec: &str, gamma: Option<f64>) -> Result<PerficsParams> {
    let mut p = match spec {
        "default" => PerficsParams::default(),
        path => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading params {path}"))?;
            PerficsParams::from_toml(&text)?
        }
    };
    if let Some(g) = gamma {
        p.gamma = g;
        p.validate()?;
    }
    Ok(p)
}

#[derive(Clone, Copy)]
enum Phase {
    Generate,
    Judge,
}

fn run_phase(a: RunArgs, phase: Phase, out: &mut dyn Write) -> Result<bool> {
    if a.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let mut cfg = load_config(a.config.as_deref(), &a.run_dir)?;
    if let Some(n) = a.iterations {
        cfg.iterations = n;
        cfg.validate()?;
    }
    let resuming = a.run_dir.join(MANIFEST_FILE).exists();
    if resuming && a.iterations.is_some() {
        let stored = Config::from_snapshot(read_manifest(&a.run_dir)?.config)?;
        if stored.iterations != cfg.iterations {
            bail!(
                "run was started with {} iteration(s); use a new --run-dir for {}",
                stored.iterations,
                cfg.iterations
            );
        }
    }
    let bench = match a.benchmark.clone().or_else(|| cfg.benchmark_path()) {
        Some(p) if !a.run_dir.join(BENCHMARK_FILE).exists() => {
            Some(load_benchmark(&p).with_context(|| format!("reading {}", p.display()))?)
        }
        _ => None,
    };
    let (store, bench) = open_run(&a.run_dir, &cfg, bench.as_ref())?;
    let fixtures = a.fixtures.clone().unwrap_or_else(|| store.fixtures_dir());
    let gateway = cfg.build_gateway(a.backend, &fixtures, Arc::new(ReqwestTransport::new()))?;
    let setup = RunSetup::from_config(&cfg)?;
    let pipeline = Pipeline {
        setup: &setup,
        benchmark: &bench,
        gateway: &gateway,
        store: &store,
    };
    let rt = runtime()?;
    let (label, summary) = match phase {
        Phase::Generate => ("generation", rt.block_on(pipeline.generate(a.jobs))?),
        Phase::Judge => ("judging", rt.block_on(pipeline.judge(a.jobs))?),
    };
    print_summary(out, store.run_id(), label, &summary)?;
    Ok(summary.pending == 0)
}

fn print_summary(out: &mut dyn Write, run_id: &str, label: &str, s: &RunSummary) -> Result<()> {
    writeln!(
        out,
        "{run_id} {label}: {} planned, {} already done, {} completed, {} pending",
        s.planned, s.already_done, s.completed, s.pending
    )?;
    if s.pending > 0 {
        writeln!(out, "rerun the same command to resume the pending steps")?;
    }
    Ok(())
}

fn score(a: ScoreArgs, out: &mut dyn Write) -> Result<bool> {
    let cfg = load_config(a.config.as_deref(), &a.run_dir)?;
    let bench = stored_benchmark(&a.run_dir)?;
    let store = RunStore::open(&a.run_dir)?;
    let events = store.events()?;
    let setup = RunSetup::from_config(&cfg)?;
    let scores = score_events(&events, &bench, &setup);
    let cats: Vec<&Category> = bench.categories().iter().map(|c| &c.name).collect();
    let (w, label) = weights(&a.weights, &cats)?;
    emit(out, &scores.refinement_table(&w, &label), a.format)?;
    emit(out, &scores.summary_table(&w), a.format)?;
    for m in &scores.models {
        emit(out, &scores.detail_table(m), a.format)?;
    }
    let cost = store.cost_summary(&cfg.prices)?;
    let mut t = ReportTable::new(
        "Token usage",
        ["Model", "Role", "Calls", "Prompt tokens", "Completion tokens"]
            .map(String::from)
            .to_vec(),
    );
    for (role, map) in [("generation", &cost.models), ("oracle", &cost.oracle)] {
        for (model, u) in map {
            t.push(vec![
                Cell::text(model.clone()),
                Cell::text(role),
                Cell::text(u.call_count.to_string()),
                Cell::text(u.prompt_tokens.to_string()),
                Cell::text(u.completion_tokens.to_string()),
            ]);
        }
    }
    emit(out, &t, a.format)?;
    if !cfg.prices.is_empty() {
        writeln!(out, "estimated cost: {:.4}", cost.estimated_cost)?;
    }
    for m in &scores.models {
        for reason in &m.excluded {
            eprintln!("warning: {}: excluded {reason}", m.model);
        }
    }
    Ok(true)
}

fn rank(a: RankArgs, out: &mut dyn Write) -> Result<bool> {
    let inputs = match a.profiles.as_str() {
        "table4" => GoldenData::embedded()?.perfics_inputs(),
        path => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading profiles {path}"))?;
            parse_perfics_inputs(&text)?
        }
    };
    let p = params(&a.params, a.gamma)?;
    let ranked = rank_models(&inputs, &p)?;
    emit(out, &ranking_table("Ranking", &ranked), a.format)?;
    Ok(true)
}

fn run_candidates(run_dir: &Path, config: Option<&Path>) -> Result<Vec<ScenarioCandidate>> {
    let cfg = load_config(config, run_dir)?;
    let bench = stored_benchmark(run_dir)?;
    let events = RunStore::open(run_dir)?.events()?;
    let scores = score_events(&events, &bench, &RunSetup::from_config(&cfg)?);
    let pairs = |m: &[refinebench_core::aggregate::CategoryScore]| {
        m.iter()
            .map(|s| (s.category.clone(), s.mean_relative_pct))
            .collect::<Vec<_>>()
    };
    scores
        .models
        .iter()
        .map(|m| {
            let profile = cfg
                .models
                .iter()
                .find(|p| p.name == m.model)
                .ok_or_else(|| anyhow!("{} missing from config", m.model))?;
            let external = profile
                .external_average()
                .ok_or_else(|| anyhow!("{} has no external_scores.average", m.model))?;
            Ok(ScenarioCandidate {
                profile: profile.clone(),
                zero_shot: pairs(&m.zero_means),
                refined: pairs(&m.refined_means),
                external,
            })
        })
        .collect()
}

fn scenario(a: ScenarioArgs, out: &mut dyn Write) -> Result<bool> {
    let cands = match &a.run_dir {
        Some(dir) => run_candidates(dir, a.config.as_deref())?,
        None => GoldenData::embedded()?.scenario_candidates(),
    };
    let focus = match (&a.category, &a.weights) {
        (Some(c), _) => Focus::Category(Category::new(c)),
        (None, spec) => {
            let mut cats: Vec<&Category> = Vec::new();
            for c in cands.iter().flat_map(|c| c.zero_shot.iter().map(|(cat, _)| cat)) {
                if !cats.contains(&c) {
                    cats.push(c);
                }
            }
            Focus::Weights(weights(spec.as_deref().unwrap_or("vicuna"), &cats)?.0)
        }
    };
    let constraints = ScenarioConstraints {
        vram_budget_gb: a.budget_gb,
        quantization: a.quant,
        focus,
        gamma_override: a.gamma,
    };
    let p = params(&a.params, None)?;
    let ranked = scenario_rank(&cands, &constraints, &p)?;
    let budget = a.budget_gb.map_or("no VRAM limit".to_string(), |b| format!("{b} GB"));
    let bits = match a.quant {
        Quantization::FourBit => 4,
        Quantization::SixteenBit => 16,
    };
    let focus = a.category.clone().unwrap_or_else(|| a.weights.clone().unwrap_or_else(|| "vicuna".into()));
    writeln!(out, "selected: {}", ranked[0].model)?;
    let title = format!("Scenario: {budget}, {bits}-bit, focus {focus}, gamma {}", a.gamma.unwrap_or(p.gamma));
    emit(out, &ranking_table(&title, &ranked), a.format)?;
    Ok(true)
}

fn vram_table(g: &GoldenData) -> ReportTable {
    let mut t = ReportTable::new(
        "VRAM requirements (GB)",
        ["Model", "16-bit", "4-bit"].map(String::from).to_vec(),
    );
    for v in &g.vram {
        t.push(vec![
            Cell::text(v.model.clone()),
            Cell::Number(v.vram_16bit_gb),
            Cell::Number(v.vram_4bit_gb),
        ]);
    }
    t
}

fn report(a: ReportArgs, out: &mut dyn Write) -> Result<bool> {
    let g = GoldenData::embedded()?;
    let all = a.table == "all";
    let mut matched = false;
    if all || a.table == "vram" {
        emit(out, &vram_table(&g), a.format)?;
        matched = true;
    }
    if all || a.table == "refinement" {
        let cats: Vec<Category> = g
            .category_row(g.models()[0], refinebench_core::judge::Variant::ZeroShot)
            .into_iter()
            .map(|(c, _)| c)
            .collect();
        let (w, label) = weights(&a.weights, &cats.iter().collect::<Vec<_>>())?;
        emit(out, &g.refinement_table(&w, &label), a.format)?;
        matched = true;
    }
    if all || a.table == "orders" {
        for t in g.order_tables() {
            emit(out, &t, a.format)?;
        }
        matched = true;
    }
    if all || a.table == "ranking" {
        let ranked = rank_models(&g.perfics_inputs(), &g.params)?;
        emit(out, &ranking_table("Ranking", &ranked), a.format)?;
        matched = true;
    }
    if !matched {
        bail!("unknown table {:?} (all, vram, refinement, orders, ranking)", a.table);
    }
    Ok(true)
}

fn verify(a: VerifyArgs, out: &mut dyn Write) -> Result<bool> {
    let g = GoldenData::embedded()?;
    let mut opts = PropertyOptions::default();
    if let Some(seed) = a.seed {
        opts.seed = seed;
    }
    // the resume check tears log tails on purpose; its store warnings are noise here
    let level = log::max_level();
    log::set_max_level(log::LevelFilter::Error);
    let report = runtime()?.block_on(verify_all(&g, &opts));
    log::set_max_level(level);
    emit(out, &report.table(), a.format)?;
    if !report.anomalies.is_empty() {
        emit(out, &report.anomaly_table(), a.format)?;
    }
    write!(out, "{}", report.summary_text())?;
    writeln!(out, "{}", if report.passed() { "all checks passed" } else { "verification FAILED" })?;
    Ok(report.passed())
}
