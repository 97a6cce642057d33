use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lukv::evaluate::{
    compare_solvers, decomposition_rows, evaluate_allocation, evaluate_retained, recall_rows, report_rows,
    run_pipeline, write_csv, CompareRow, PipelineConfig,
};
use lukv::loss::loss_curves;
use lukv::metrics::{metric_ranking, score};
use lukv::oracle::{compute_oracle_importance, oracle_ranking};
use lukv::profile::{
    aggregate_profile, apply_eviction, budget_from_ratios, budget_from_ratios_exact, default_grid, lookup_ratios,
    solve_ratio_grid_guarded, Profile, Safeguards,
};
use lukv::selftest::run_selftest;
use lukv::shape::floor_fraction;
use lukv::solver::{
    baseline_allocate, brute_force_allocate, convexify_all, greedy_allocate, mckp_dp_allocate, AllocationDocument,
    Baseline, ADAPTIVE_ALPHA, PYRAMID_BETA,
};
use lukv::trace::{generate_synthetic_trace, load_trace, save_trace};
use lukv::{json, Error, MetricKind, MetricSpec, ModelShape, Scenario, TraceBundle};

#[derive(Parser)]
#[command(name = "lukv", version, about = "Head-level KV cache budget allocation from eviction-loss curves")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace bundle.
    Gen(GenArgs),
    /// Score every prefill position of every head with a metric.
    Score(ScoreArgs),
    /// Allocate a global budget across heads.
    Solve(SolveArgs),
    /// Build or apply compression-ratio profiles.
    #[command(subcommand)]
    Profile(ProfileCommand),
    /// Report the oracle eviction loss of an allocation.
    Eval(EvalArgs),
    /// Compare greedy against the exact DP on raw and convexified curves.
    Compare(CompareArgs),
    /// Run the invariant suite.
    Selftest,
    /// Calibrate, profile and evaluate every allocator end to end.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct MetricArgs {
    #[arg(long, value_parser = parse_metric)]
    metric: MetricKind,
    /// Observation window in rows; defaults per metric.
    #[arg(long)]
    window: Option<usize>,
    /// Pooling kernel width; defaults per metric.
    #[arg(long)]
    kernel: Option<usize>,
}

impl MetricArgs {
    fn spec(&self) -> MetricSpec {
        let mut spec = MetricSpec::new(self.metric);
        if let Some(w) = self.window {
            spec = spec.with_window(w);
        }
        if let Some(k) = self.kernel {
            spec = spec.with_kernel(k);
        }
        spec
    }
}

#[derive(Args)]
struct GenArgs {
    /// Comma-separated `L,H,T,K`.
    #[arg(long, value_parser = parse_shape)]
    shape: [usize; 4],
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "misaligned", value_parser = parse_scenario)]
    scenario: Scenario,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    trace: PathBuf,
    #[command(flatten)]
    metric: MetricArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverChoice {
    Greedy,
    Dp,
    Brute,
    Uniform,
    Pyramid,
    Adaptive,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    trace: PathBuf,
    #[command(flatten)]
    metric: MetricArgs,
    /// Global compression ratio; the budget is `floor((1 - sigma) L H T)`.
    #[arg(long, conflicts_with = "budget", required_unless_present = "budget")]
    sigma: Option<f64>,
    /// Global budget in tokens.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, value_enum, default_value = "greedy")]
    solver: SolverChoice,
    #[arg(long, default_value_t = PYRAMID_BETA)]
    beta: f64,
    #[arg(long, default_value_t = ADAPTIVE_ALPHA)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ProfileCommand {
    /// Aggregate per-trace optimal ratios into a profile.
    Build(ProfileBuildArgs),
    /// Turn a profile into per-head budgets at one global ratio.
    Apply(ProfileApplyArgs),
}

#[derive(Args)]
struct ProfileBuildArgs {
    /// Calibration trace directories.
    #[arg(long, num_args = 1.., required = true)]
    traces: Vec<PathBuf>,
    #[command(flatten)]
    metric: MetricArgs,
    /// Comma-separated grid of global ratios.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProfileApplyArgs {
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    sigma: f64,
    /// Prefill length of the prompt being compressed.
    #[arg(long)]
    tokens: usize,
    /// Hand units lost to flooring back to the heads with the largest remainders.
    #[arg(long)]
    exact_total: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    allocation: PathBuf,
    /// Apply the metric's sink and recent-window safeguards before ranking.
    #[arg(long)]
    safeguards: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    trace: PathBuf,
    #[command(flatten)]
    metric: MetricArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.8,0.9")]
    sigmas: Vec<f64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// JSON config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_metric(s: &str) -> Result<MetricKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_shape(s: &str) -> Result<[usize; 4], String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<Result<_, _>>()?;
    dims.try_into().map_err(|_| "expected four values L,H,T,K".to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.chain().find_map(|e| e.downcast_ref::<Error>()).map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Gen(a) => gen(a)?,
        Command::Score(a) => score_cmd(a)?,
        Command::Solve(a) => solve(a)?,
        Command::Profile(ProfileCommand::Build(a)) => profile_build(a)?,
        Command::Profile(ProfileCommand::Apply(a)) => profile_apply(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Compare(a) => compare(a)?,
        Command::Pipeline(a) => pipeline(a)?,
        Command::Selftest => return Ok(selftest()),
    }
    Ok(ExitCode::SUCCESS)
}

fn load(dir: &Path) -> anyhow::Result<TraceBundle> {
    load_trace(dir).with_context(|| format!("loading trace {}", dir.display()))
}

fn gen(a: GenArgs) -> anyhow::Result<()> {
    let [l, h, t, k] = a.shape;
    let shape = ModelShape::new(l, h, t, k, a.head_dim)?;
    let trace = generate_synthetic_trace(shape, a.seed, a.scenario)?;
    save_trace(&trace, &a.out)?;
    println!("wrote {} ({l}x{h} heads, {t} prefill, {k} decode)", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct ScoreDocument {
    metric: MetricSpec,
    /// `scores[layer][head][position]`.
    scores: Vec<Vec<Vec<f64>>>,
}

fn score_cmd(a: ScoreArgs) -> anyhow::Result<()> {
    let trace = load(&a.trace)?;
    let spec = a.metric.spec();
    let scores = score(&trace, &spec)?;
    json::write(
        &ScoreDocument {
            metric: spec,
            scores: scores.to_nested(),
        },
        &a.out,
    )?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn solve(a: SolveArgs) -> anyhow::Result<()> {
    let trace = load(&a.trace)?;
    let shape = *trace.shape();
    let (l, h, t) = (shape.num_layers, shape.num_heads, shape.prefill_len);
    let b_total = match (a.sigma, a.budget) {
        (_, Some(b)) => b,
        (Some(s), None) if (0.0..=1.0).contains(&s) => floor_fraction(1.0 - s, l * h * t),
        (Some(s), None) => return Err(Error::Config(format!("compression ratio {s} outside [0, 1]")).into()),
        (None, None) => unreachable!("clap requires one of --sigma and --budget"),
    };
    let spec = a.metric.spec();
    let importance = compute_oracle_importance(&trace, true)?;
    let scores = score(&trace, &spec)?;
    let ranking = metric_ranking(&scores)?;
    let raw = loss_curves(&importance, &ranking);
    let (convex, gains) = convexify_all(&raw)?;
    let alloc = match a.solver {
        SolverChoice::Greedy => greedy_allocate(&gains, b_total)?,
        SolverChoice::Dp => mckp_dp_allocate(&raw, b_total)?,
        SolverChoice::Brute => brute_force_allocate(&raw, b_total)?,
        SolverChoice::Uniform => baseline_allocate(Baseline::Uniform, l, h, t, None, b_total)?,
        SolverChoice::Pyramid => baseline_allocate(Baseline::Pyramid { beta: a.beta }, l, h, t, None, b_total)?,
        SolverChoice::Adaptive => {
            baseline_allocate(Baseline::AdaptiveTopk { alpha: a.alpha }, l, h, t, Some(&scores), b_total)?
        }
    };
    let doc = AllocationDocument::new(&alloc, spec.kind.as_str(), Some(&raw), Some(&convex));
    doc.write(&a.out)?;
    println!(
        "{} allocated {b_total} tokens: raw loss {:.6e}, relaxed loss {:.6e}",
        alloc.solver,
        doc.raw_objective.unwrap_or(f64::NAN),
        doc.relaxed_objective.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn profile_build(a: ProfileBuildArgs) -> anyhow::Result<()> {
    let spec = a.metric.spec();
    let grid = a.grid.unwrap_or_else(default_grid);
    let safeguards = Safeguards::for_metric(spec.kind);
    let per_query = a
        .traces
        .iter()
        .map(|dir| Ok(solve_ratio_grid_guarded(&load(dir)?, &spec, &grid, &safeguards)?))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let profile = aggregate_profile(&per_query, spec.kind.as_str(), safeguards, safeguards.max_compression)?;
    profile.write(&a.out)?;
    println!("wrote {} from {} traces", a.out.display(), per_query.len());
    Ok(())
}

#[derive(Serialize)]
struct BudgetsDocument {
    metric: String,
    sigma: f64,
    tokens: usize,
    #[serde(rename = "B_total")]
    b_total: usize,
    ratios: Vec<Vec<f64>>,
    budgets: Vec<Vec<usize>>,
}

fn profile_apply(a: ProfileApplyArgs) -> anyhow::Result<()> {
    let profile = Profile::read(&a.profile)?;
    let ratios = lookup_ratios(&profile, a.sigma)?;
    let budgets = if a.exact_total {
        budget_from_ratios_exact(&ratios, a.tokens, profile.safeguards())?
    } else {
        budget_from_ratios(&ratios, a.tokens, profile.safeguards())?
    };
    let h = profile.num_heads().max(1);
    let doc = BudgetsDocument {
        metric: profile.metric().to_string(),
        sigma: a.sigma,
        tokens: a.tokens,
        b_total: budgets.iter().sum(),
        ratios: ratios.chunks(h).map(<[f64]>::to_vec).collect(),
        budgets: budgets.chunks(h).map(<[usize]>::to_vec).collect(),
    };
    json::write(&doc, &a.out)?;
    println!("wrote {} ({} tokens in total)", a.out.display(), doc.b_total);
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let trace = load(&a.trace)?;
    let doc = AllocationDocument::read(&a.allocation)?;
    let alloc = doc.to_allocation()?;
    let kind: MetricKind = doc.metric.parse()?;
    let spec = MetricSpec::new(kind);
    let importance = compute_oracle_importance(&trace, true)?;
    let oracle = oracle_ranking(&importance);
    let ranking = metric_ranking(&score(&trace, &spec)?)?;
    let report = if a.safeguards {
        let retained = apply_eviction(&ranking, alloc.budgets(), &Safeguards::for_metric(kind))?;
        evaluate_retained(&importance, &retained)?
    } else {
        evaluate_allocation(&importance, &ranking, &alloc)?
    };
    let grid = default_grid();
    let mut recall = recall_rows(&importance, &oracle, MetricKind::OraclePassthrough.as_str(), &grid)?;
    recall.extend(recall_rows(&importance, &ranking, kind.as_str(), &grid)?);
    let (layers, heads) = report_rows(&report, kind.as_str(), alloc.solver.as_str());

    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_csv(&a.out.join("layer_loss.csv"), &layers)?;
    write_csv(&a.out.join("head_loss.csv"), &heads)?;
    write_csv(&a.out.join("recall.csv"), &recall)?;
    write_csv(
        &a.out.join("decomposition.csv"),
        &decomposition_rows(&importance, &oracle, &ranking, kind.as_str(), &grid)?,
    )?;
    println!("total loss {:.6e} over {} tokens", report.total_loss(), report.budget_used());
    Ok(())
}

fn compare(a: CompareArgs) -> anyhow::Result<()> {
    let trace = load(&a.trace)?;
    let spec = a.metric.spec();
    let importance = compute_oracle_importance(&trace, true)?;
    let ranking = metric_ranking(&score(&trace, &spec)?)?;
    let rows: Vec<CompareRow> = compare_solvers(&importance, &ranking, &a.sigmas)?
        .iter()
        .map(|c| CompareRow::new(spec.kind.as_str(), c))
        .collect();
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_csv(&a.out.join("compare.csv"), &rows)?;
    for r in &rows {
        println!(
            "sigma {:<5} B {:<7} greedy relaxed {:.6e}  dp convex {:.6e}  dp raw {:.6e}  greedy raw {:.6e}  gap {:.3e}",
            r.sigma, r.b_total, r.greedy_relaxed, r.dp_convex, r.dp_raw, r.greedy_raw, r.raw_gap
        );
    }
    Ok(())
}

fn selftest() -> ExitCode {
    let report = run_selftest();
    for c in &report.checks {
        let status = if c.passed() { "ok  " } else { "FAIL" };
        println!("{status} {} ({} cases)", c.name, c.cases);
        if let Some(detail) = &c.detail {
            println!("     {} failures; first: {detail}", c.failures);
        }
    }
    println!("finished in {:.2?}", report.elapsed);
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    }
}

fn pipeline(a: PipelineArgs) -> anyhow::Result<()> {
    let config = match &a.config {
        Some(path) => PipelineConfig::read(path)?,
        None => PipelineConfig::default(),
    };
    let summary = run_pipeline(&config, &a.out)?;
    for e in &summary.entries {
        println!("{:<8} {:<14} B {:<7} loss {:.6e}", e.metric, e.allocator, e.b_total, e.total_loss);
    }
    Ok(())
}
