//! `seqpool` command line: simulate datasets, run sampler schedules, and
//! summarize runs.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical
//! failure inside a sampler, 1 anything else (e.g. an unwritable output
//! directory). `SEQPOOL_THREADS` caps the number of worker threads.

mod files;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use seqpool::diagnostics::{ActOptions, CutoffRule, DiagnosticsReport};
use seqpool::oracle::{grid_hmm_posterior, kalman_smoother, GaussianPosterior, Grid};
use seqpool::parallel::{map_indexed, with_threads};
use seqpool::schedule::run_stream;
use seqpool::tally::RateTable;
use seqpool::{ChainRunner, ModelConfig, ModelSpec, ObsModel, ObservationSequence, Schedule, Sequence, Start, Tally};

use files::{parse_variable, read_dataset, read_samples, variable_name, write_dataset, Format, SampleWriter};

/// A problem with the command line or an input file.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "seqpool", version, about = "Embedded HMM, particle Gibbs and Metropolis samplers for latent AR(1) models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a latent path and observations from a model file.
    Simulate(SimulateArgs),
    /// Run a sampler schedule for one or more seeds.
    Run(RunArgs),
    /// Autocorrelation times and acceptance summaries for completed runs.
    Diagnose(DiagnoseArgs),
    /// Exact posterior moments (Kalman smoother, or a grid for P = 1).
    Oracle(OracleArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Overrides the seed in the model file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    schedule: PathBuf,
    /// Dataset CSV; simulated from the model seed when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    iters: usize,
    /// Comma-separated chain seeds, one chain each.
    #[arg(long, value_delimiter = ',', required = true)]
    seed: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    thin: usize,
    /// Initial state: `prior` for a draw from the prior, or a number to
    /// start every coordinate at that value.
    #[arg(long, default_value = "prior", value_parser = parse_start)]
    start: StartAt,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
enum StartAt {
    Prior,
    Constant(f64),
}

fn parse_start(s: &str) -> std::result::Result<StartAt, String> {
    match s {
        "prior" => Ok(StartAt::Prior),
        v => match v.parse::<f64>() {
            Ok(c) if c.is_finite() => Ok(StartAt::Constant(c)),
            _ => Err(format!("expected `prior` or a finite number, got {v:?}")),
        },
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Cutoff {
    Threshold,
    Geyer,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Run directories, or seed directories inside them.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Comma-separated `x[dim][time]` addresses (1-based); all variables when omitted.
    #[arg(long, value_delimiter = ',')]
    vars: Vec<String>,
    #[arg(long, default_value_t = 0.1)]
    burn_in: f64,
    #[arg(long, value_enum, default_value_t = Cutoff::Threshold)]
    cutoff: Cutoff,
    #[arg(long, default_value_t = 0.01)]
    threshold: f64,
    /// Thinning applied before estimating; τ̂ is then in thinned samples.
    #[arg(long, default_value_t = 1)]
    act_thin: usize,
    /// Also write trace.csv with the selected variables per sample.
    #[arg(long)]
    trace: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Grid points for the P = 1 grid posterior.
    #[arg(long, default_value_t = 2000)]
    grid: usize,
    #[arg(long)]
    out: PathBuf,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Usage(format!("reading {}: {e}", path.display())).into())
}

fn load_model(path: &Path) -> Result<(ModelConfig, ModelSpec)> {
    let config: ModelConfig =
        toml::from_str(&read_text(path)?).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
    let spec = config.build()?;
    Ok((config, spec))
}

fn load_observations(config: &ModelConfig, spec: &ModelSpec, data: Option<&Path>) -> Result<ObservationSequence> {
    match data {
        Some(path) => Ok(read_dataset(path, spec.n(), spec.p())?.1),
        None => Ok(spec.simulate(config.seed).1),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let (config, spec) = load_model(&args.model)?;
    let seed = args.seed.unwrap_or(config.seed);
    let (x, y) = spec.simulate(seed);
    fs::create_dir_all(&args.out)?;
    write_dataset(&args.out.join("data.csv"), &x, &y)?;
    let model = ModelConfig { seed, ..config };
    fs::write(args.out.join("model.toml"), toml::to_string(&model)?)?;
    eprintln!("wrote n = {}, P = {} dataset to {}", spec.n(), spec.p(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct RunMeta<'a> {
    model: &'a ModelConfig,
    schedule: &'a Schedule,
    data: String,
    iterations: usize,
    thin: usize,
    seeds: &'a [u64],
    start: StartAt,
    format: Format,
    parallel: bool,
}

/// Per-seed metadata, written next to the samples.
#[derive(Debug, Serialize, Deserialize)]
struct SeedMeta {
    seed: u64,
    iterations: usize,
    thin: usize,
    n: usize,
    p: usize,
    format: Format,
    samples: usize,
    labels: Vec<String>,
    seconds: f64,
    secs_per_sample: Option<f64>,
    /// Overall acceptance and its range over time indices, per move type.
    acceptance: BTreeMap<String, Acceptance>,
    tally: Tally,
    error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Acceptance {
    overall: f64,
    min_over_time: f64,
    max_over_time: f64,
}

fn acceptance_summary(t: &Tally) -> BTreeMap<String, Acceptance> {
    let tables: [(&str, &RateTable); 5] = [
        ("autoregressive", &t.autoregressive),
        ("shift", &t.shift),
        ("flip", &t.flip),
        ("independence", &t.independence),
        ("metropolis", &t.metropolis),
    ];
    tables
        .into_iter()
        .filter_map(|(name, table)| {
            let overall = table.total.rate()?;
            let (lo, hi) = table.range()?;
            Some((name.to_string(), Acceptance { overall, min_over_time: lo, max_over_time: hi }))
        })
        .collect()
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// One chain into its own directory. Sampler failures are recorded in the
/// metadata and returned; they do not affect other seeds.
fn run_seed(
    spec: &ModelSpec,
    y: &ObservationSequence,
    schedule: &Schedule,
    args: &RunArgs,
    seed: u64,
) -> Result<()> {
    let dir = seed_dir(&args.out, seed);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let started = Instant::now();
    let mut writer = SampleWriter::create(&dir, args.format, spec.n(), spec.p())?;
    let start = match args.start {
        StartAt::Prior => Start::Prior,
        StartAt::Constant(c) => Start::Given(Sequence::filled(spec.n(), spec.p(), c)),
    };
    let mut runner = ChainRunner::new(spec, y, schedule, start, run_stream(seed, 0))?;
    let mut samples = 0;
    let mut write_error = None;
    let outcome = runner.run(args.iters, args.thin, |r| {
        if write_error.is_none() {
            match writer.write(seed, r.iteration, r.element, r.x) {
                Ok(()) => samples += 1,
                Err(e) => write_error = Some(e),
            }
        }
    });
    writer.finish()?;
    if let Some(e) = write_error {
        return Err(e);
    }
    let seconds = started.elapsed().as_secs_f64();
    let meta = SeedMeta {
        seed,
        iterations: args.iters,
        thin: args.thin,
        n: spec.n(),
        p: spec.p(),
        format: args.format,
        samples,
        labels: runner.labels().to_vec(),
        seconds,
        secs_per_sample: (samples > 0).then(|| seconds / samples as f64),
        acceptance: acceptance_summary(runner.tally()),
        tally: runner.tally().clone(),
        error: outcome.as_ref().err().map(ToString::to_string),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    outcome.with_context(|| format!("seed {seed}"))
}

fn run(args: RunArgs) -> Result<()> {
    let (config, spec) = load_model(&args.model)?;
    let schedule = Schedule::from_toml(&read_text(&args.schedule)?)
        .map_err(|e| Usage(format!("{}: {e}", args.schedule.display())))?;
    schedule.validate(&spec)?;
    if args.thin == 0 {
        bail!(Usage("--thin must be at least 1".into()));
    }
    let mut sorted = args.seed.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        bail!(Usage("seeds must be distinct".into()));
    }
    let y = load_observations(&config, &spec, args.data.as_deref())?;
    spec.check_observations(&y)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let data = match &args.data {
        Some(p) => p.display().to_string(),
        None => format!("simulated from model seed {}", config.seed),
    };
    let meta = RunMeta {
        model: &config,
        schedule: &schedule,
        data,
        iterations: args.iters,
        thin: args.thin,
        seeds: &args.seed,
        start: args.start,
        format: args.format,
        parallel: seqpool::parallel::is_parallel(),
    };
    write_json(&args.out.join("run.json"), &meta)?;

    let results = map_indexed(args.seed.len(), |k| run_seed(&spec, &y, &schedule, &args, args.seed[k]));
    let mut first_error = None;
    for (seed, result) in args.seed.iter().zip(results) {
        match result {
            Ok(()) => eprintln!("seed {seed}: done"),
            Err(e) => {
                eprintln!("seed {seed}: failed: {e:#}");
                // numerical failures take precedence in the exit status
                if first_error.is_none() || exit_code(&e) == 3 {
                    first_error = Some(e);
                }
            }
        }
    }
    first_error.map_or(Ok(()), Err)
}

/// Seed directories under each path, in seed order within a run.
fn expand_runs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for path in paths {
        if path.join("meta.json").is_file() {
            dirs.push(path.clone());
            continue;
        }
        let entries = fs::read_dir(path).map_err(|e| Usage(format!("reading {}: {e}", path.display())))?;
        let mut seeds: Vec<(u64, PathBuf)> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let seed = name.strip_prefix("seed-")?.parse().ok()?;
                e.path().join("meta.json").is_file().then(|| (seed, e.path()))
            })
            .collect();
        if seeds.is_empty() {
            bail!(Usage(format!("{} holds no completed runs", path.display())));
        }
        seeds.sort();
        dirs.extend(seeds.into_iter().map(|(_, p)| p));
    }
    Ok(dirs)
}

fn diagnose(args: DiagnoseArgs) -> Result<()> {
    let dirs = expand_runs(&args.runs)?;
    let mut metas = Vec::new();
    for dir in &dirs {
        let meta: SeedMeta = serde_json::from_str(&read_text(&dir.join("meta.json"))?)
            .map_err(|e| Usage(format!("{}: {e}", dir.join("meta.json").display())))?;
        if let Some(e) = &meta.error {
            bail!(Usage(format!("{} did not complete: {e}", dir.display())));
        }
        metas.push(meta);
    }
    let (n, p) = (metas[0].n, metas[0].p);
    if let Some((dir, m)) = dirs.iter().zip(&metas).find(|(_, m)| (m.n, m.p, m.samples) != (n, p, metas[0].samples)) {
        bail!(Usage(format!(
            "{} has n = {}, P = {}, {} samples; {} has n = {n}, P = {p}, {} samples",
            dir.display(),
            m.n,
            m.p,
            m.samples,
            dirs[0].display(),
            metas[0].samples
        )));
    }
    let chosen: Vec<usize> = if args.vars.is_empty() {
        (0..n * p).collect()
    } else {
        args.vars.iter().map(|v| parse_variable(v, n, p)).collect::<Result<_>>()?
    };

    let tables = dirs
        .iter()
        .zip(&metas)
        .map(|(dir, meta)| read_samples(dir, meta.format, |_, _| Ok(chosen.clone())))
        .collect::<Result<Vec<_>>>()?;
    if let Some((dir, _)) = dirs.iter().zip(&tables).find(|(_, t)| (t.n, t.p) != (n, p)) {
        bail!(Usage(format!("{}: sample file shape disagrees with meta.json", dir.display())));
    }
    let names: Vec<String> = chosen.iter().map(|&v| variable_name(v, p)).collect();
    let series: Vec<Vec<Vec<f64>>> =
        (0..chosen.len()).map(|c| tables.iter().map(|t| t.columns[c].clone()).collect()).collect();

    let mut tally = Tally::default();
    metas.iter().for_each(|m| tally.merge(&m.tally));
    let seconds: f64 = metas.iter().map(|m| m.seconds).sum();
    let samples: usize = metas.iter().map(|m| m.samples).sum();
    let opts = ActOptions {
        burn_in_frac: args.burn_in,
        cutoff: match args.cutoff {
            Cutoff::Threshold => CutoffRule::Threshold { threshold: args.threshold },
            Cutoff::Geyer => CutoffRule::Geyer,
        },
        thin: args.act_thin,
    };
    let secs_per_sample = if samples > 0 { seconds / samples as f64 } else { 0.0 };
    let report = DiagnosticsReport::build(names, &series, &opts, secs_per_sample, Some(&tally))?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_json(&args.out.join("report.json"), &report)?;
    let mut w = csv::Writer::from_path(args.out.join("report.csv"))?;
    w.write_record(["variable", "act", "act_time_adjusted", "cutoff_lag", "pooled_mean"])?;
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for k in 0..report.variables.len() {
        w.write_record([
            report.variables[k].clone(),
            cell(report.act[k]),
            cell(report.act_time_adjusted[k]),
            report.cutoff_lag[k].map_or(String::new(), |v| v.to_string()),
            cell(report.pooled_mean[k]),
        ])?;
    }
    w.flush()?;

    if args.trace {
        let mut w = csv::Writer::from_path(args.out.join("trace.csv"))?;
        let mut header = vec!["seed".to_string(), "iteration".into(), "element".into()];
        header.extend(report.variables.iter().cloned());
        w.write_record(&header)?;
        for table in &tables {
            for (s, (seed, iteration, element)) in table.provenance.iter().enumerate() {
                let mut row = vec![seed.to_string(), iteration.to_string(), element.to_string()];
                row.extend(table.columns.iter().map(|c| c[s].to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
    }
    for note in &report.notes {
        eprintln!("note: {note}");
    }
    eprintln!("{} variables over {} runs -> {}", report.variables.len(), report.runs, args.out.display());
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<()> {
    let (config, spec) = load_model(&args.model)?;
    let y = load_observations(&config, &spec, args.data.as_deref())?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut w = csv::Writer::from_path(args.out.join("oracle.csv"))?;
    w.write_record(["t", "dim", "mean", "var"])?;
    let mut summary = BTreeMap::new();
    if matches!(spec.obs(), ObsModel::GaussianObs { .. }) {
        let smooth = kalman_smoother(&spec, &y)?;
        for i in 0..spec.n() {
            for j in 0..spec.p() {
                let row = [i + 1, j + 1].map(|v| v.to_string());
                w.write_record([&row[0], &row[1], &smooth.means[i][j].to_string(), &smooth.variance(i, j).to_string()])?;
            }
        }
        summary.insert("method", "kalman".to_string());
        summary.insert("loglik", GaussianPosterior::new(&spec, &y)?.loglik().to_string());
    } else if spec.p() == 1 {
        let grid = grid_hmm_posterior(&spec, &y, Grid::stationary(&spec, args.grid))?;
        for i in 0..spec.n() {
            w.write_record([(i + 1).to_string(), "1".into(), grid.mean(i).to_string(), grid.variance(i).to_string()])?;
        }
        summary.insert("method", format!("grid, {} points", args.grid));
        if let Some(warning) = grid.warning() {
            eprintln!("warning: {warning}");
            summary.insert("warning", warning);
        }
    } else {
        bail!(Usage("exact posteriors need Gaussian observations, or P = 1 for the grid".into()));
    }
    w.flush()?;
    write_json(&args.out.join("oracle.json"), &summary)?;
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<seqpool::Error>() {
            return match err {
                seqpool::Error::Numerical(_) => 3,
                _ => 2,
            };
        }
        if cause.is::<Usage>() {
            return 2;
        }
    }
    1
}

fn threads() -> Result<Option<usize>> {
    match std::env::var("SEQPOOL_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(t) if t > 0 => Ok(Some(t)),
            _ => bail!(Usage(format!("SEQPOOL_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = threads().and_then(|t| {
        with_threads(t, || match cli.command {
            Command::Simulate(a) => simulate(a),
            Command::Run(a) => run(a),
            Command::Diagnose(a) => diagnose(a),
            Command::Oracle(a) => oracle(a),
        })
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
