use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use convreg::estimators::{fit_a, fit_b, fit_c_with, BisectionOptions, Dataset, FitResult};
use convreg::experiments::{run_replications, ExperimentSuite, ReplicationPlan};
use convreg::hyperparams::{
    cross_validate_lambda, default_partition_cells, estimate_s_partition, estimate_s_replication,
    select_u_from_c, theoretical_s, PartitionSpec, DEFAULT_LAMBDA_CANDIDATES,
};
use convreg::queue_sim::{generate_dataset, grad_true_f0, true_f0, DatasetMeta, DEFAULT_DOMAIN};
use convreg::{Domain, Error, MaxAffineModel, SolverTolerances};

#[derive(Parser, Debug)]
#[command(name = "convreg", version, about = "Convex regression with subgradient penalties")]
struct Cli {
    /// Seed from which all randomness is derived.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,

    /// Output file (simulate, fit, eval) or directory (experiment).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Feasibility and KKT tolerance of the QP solver.
    #[arg(long, global = true, default_value_t = 1e-6)]
    tol: f64,

    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate an M/M/1 dataset on the design grid of [1.2, 1.3].
    Simulate(SimulateArgs),
    /// Fit one of the estimators to a dataset CSV.
    Fit(FitArgs),
    /// Evaluate a fitted model on a grid or on given points.
    Eval(EvalArgs),
    /// Run the replicated M/M/1 benchmark.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 5000, value_parser = clap::value_parser!(u64).range(1..))]
    customers: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Problem {
    A,
    B,
    C,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SMethod {
    /// Average within-cell variance over an equal-width partition.
    Partition,
    /// Pooled variance of responses sharing the same point.
    Replication,
    /// sigma2 + c n^{-1/2} sqrt(ln n).
    Theoretical,
    /// The value given with --s.
    Fixed,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("hyper").required(true).args(["lambda", "u", "s", "auto"])))]
struct FitArgs {
    /// Dataset CSV with header x1,...,xd,y.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    problem: Problem,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    u: Option<f64>,
    #[arg(long)]
    s: Option<f64>,
    /// Choose the hyperparameter from the data: cross-validation for A,
    /// the error-bounded fit's gradient bound for B, a variance estimate for C.
    #[arg(long)]
    auto: bool,
    /// Domain bounds `a,b`; read from the dataset's metadata file when omitted.
    #[arg(long, value_parser = parse_bounds)]
    domain: Option<(f64, f64)>,
    #[arg(long, value_enum, default_value_t = SMethod::Partition)]
    s_method: SMethod,
    /// Partition cells per axis (default depends on n).
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    cv_candidates: Option<Vec<f64>>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Relative bracket width at which the bisection on u stops.
    #[arg(long, default_value_t = 1e-4)]
    bisection_tol: f64,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("at").required(true).args(["grid", "points"])))]
struct EvalArgs {
    /// Fit result or bare model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Evenly spaced points per axis, domain ends included.
    #[arg(long)]
    grid: Option<usize>,
    /// CSV whose columns x1,...,xd give the points (other columns ignored).
    #[arg(long)]
    points: Option<PathBuf>,
    /// Add the true M/M/1 function and its derivative.
    #[arg(long, value_enum)]
    truth: Option<Truth>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Truth {
    Mm1,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    n_list: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 5000)]
    customers: usize,
    #[arg(long, value_delimiter = ',')]
    cv_candidates: Option<Vec<f64>>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
}

fn parse_bounds(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected a,b")?;
    let a: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((a, b))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONVREG_LOG", "warn")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon_pool(jobs)?;
    }
    if !(cli.tol.is_finite() && cli.tol > 0.0) {
        bail!("--tol must be positive");
    }
    let tol = SolverTolerances { feas_tol: cli.tol, kkt_tol: cli.tol, ..SolverTolerances::default() };
    match &cli.command {
        Command::Simulate(args) => simulate(&cli, args),
        Command::Fit(args) => fit(&cli, args, &tol),
        Command::Eval(args) => eval(&cli, args),
        Command::Experiment(args) => experiment(&cli, args, &tol),
    }
}

fn rayon_pool(jobs: usize) -> Result<()> {
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().context("configuring worker threads")
}

fn meta_path(data: &Path) -> PathBuf {
    data.with_extension("meta.json")
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data.csv"));
    let (data, meta) = generate_dataset(args.n as usize, args.customers as usize, cli.seed)?;
    data.write_csv(File::create(&out).with_context(|| format!("creating {}", out.display()))?)?;
    meta.write_json(meta_path(&out))?;
    println!("rows={}", data.len());
    println!("data={}", out.display());
    println!("meta={}", meta_path(&out).display());
    Ok(())
}

fn load_dataset(path: &Path, domain: Option<(f64, f64)>) -> Result<Dataset> {
    let (a, b) = match domain {
        Some(bounds) => bounds,
        None => {
            let meta_file = meta_path(path);
            if meta_file.exists() {
                let meta = DatasetMeta::read_json(&meta_file)?;
                (meta.domain[0], meta.domain[1])
            } else {
                log::info!("no metadata next to {}, assuming the M/M/1 domain", path.display());
                DEFAULT_DOMAIN
            }
        }
    };
    Dataset::load_csv(path, a, b).with_context(|| format!("reading {}", path.display()))
}

fn estimate_s(args: &FitArgs, data: &Dataset) -> Result<f64> {
    Ok(match args.s_method {
        SMethod::Fixed => bail!("--s-method fixed takes its value from --s; pass --s instead of --auto"),
        SMethod::Partition => {
            let r = args.r.unwrap_or_else(|| default_partition_cells(data.len()));
            estimate_s_partition(data, &PartitionSpec::uniform(r)?)?
        }
        SMethod::Replication => {
            let mut groups: BTreeMap<Vec<u64>, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
            for (x, y) in data.points().iter().zip(data.responses()) {
                let key = x.iter().map(|v| v.to_bits()).collect();
                groups.entry(key).or_insert_with(|| (x.clone(), Vec::new())).1.push(*y);
            }
            let groups: Vec<_> = groups.into_values().collect();
            estimate_s_replication(&groups, |_| 1.0)?
        }
        SMethod::Theoretical => {
            let sigma2 = args.sigma2.ok_or_else(|| anyhow!("--s-method theoretical needs --sigma2"))?;
            let c = args.c.ok_or_else(|| anyhow!("--s-method theoretical needs --c"))?;
            theoretical_s(sigma2, c, data.len())?
        }
    })
}

fn fit(cli: &Cli, args: &FitArgs, tol: &SolverTolerances) -> Result<()> {
    let data = load_dataset(&args.data, args.domain)?;
    let bisection = BisectionOptions { rel_tol: args.bisection_tol, ..BisectionOptions::default() };
    let result = match args.problem {
        Problem::A => {
            let lambda = match (args.lambda, args.auto) {
                (Some(l), _) => l,
                (None, true) => {
                    let candidates = args.cv_candidates.clone().unwrap_or(DEFAULT_LAMBDA_CANDIDATES.to_vec());
                    let cv = cross_validate_lambda(&data, &candidates, args.folds, cli.seed, tol)?;
                    println!("cv_lambda={}", cv.lambda);
                    cv.lambda
                }
                _ => bail!("problem a needs --lambda or --auto"),
            };
            fit_a(&data, lambda, tol)?
        }
        Problem::B => {
            let u = match (args.u, args.auto) {
                (Some(u), _) => u,
                (None, true) => {
                    let s = estimate_s(args, &data)?;
                    println!("s_estimate={s}");
                    select_u_from_c(&data, s, tol)?
                }
                _ => bail!("problem b needs --u or --auto"),
            };
            fit_b(&data, u, tol)?
        }
        Problem::C => {
            let s = match (args.s, args.auto) {
                (Some(s), _) => s,
                (None, true) => {
                    let s = estimate_s(args, &data)?;
                    println!("s_estimate={s}");
                    s
                }
                _ => bail!("problem c needs --s or --auto"),
            };
            match fit_c_with(&data, s, tol, &bisection) {
                Err(Error::Infeasible { cap, min_sse }) => {
                    println!("min_sse={min_sse}");
                    bail!("SSE cap {cap} is below the minimal achievable SSE {min_sse}");
                }
                other => other?,
            }
        }
    };
    write_fit(cli, &result)
}

fn write_fit(cli: &Cli, result: &FitResult) -> Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("fit.json"));
    std::fs::write(&out, result.to_json()? + "\n").with_context(|| format!("writing {}", out.display()))?;
    println!("estimator={}", result.estimator.as_str());
    println!("sse={}", result.sse);
    println!("grad_bound={}", result.grad_bound);
    println!("hyperparameter={}", result.hyperparameter);
    println!("pieces={}", result.model.pieces().len());
    println!("model={}", out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<MaxAffineModel> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match FitResult::from_json(&text) {
        Ok(fit) => Ok(fit.model),
        Err(_) => MaxAffineModel::from_json(&text).with_context(|| format!("parsing {}", path.display())),
    }
}

fn grid_points(domain: &Domain, count: usize) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        bail!("--grid must be at least 1");
    }
    let axis: Vec<f64> = (0..count)
        .map(|i| if count == 1 { domain.a } else { domain.a + domain.width() * i as f64 / (count - 1) as f64 })
        .collect();
    let mut points = vec![Vec::new()];
    for _ in 0..domain.d {
        points = points.into_iter().flat_map(|p| axis.iter().map(move |&v| [p.clone(), vec![v]].concat())).collect();
    }
    Ok(points)
}

fn read_points(path: &Path, d: usize) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = reader.headers()?.clone();
    let columns = (1..=d)
        .map(|k| {
            let name = format!("x{k}");
            header.iter().position(|h| h.trim() == name).ok_or_else(|| anyhow!("{} has no column {name}", path.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record?;
        points.push(columns.iter().map(|&c| record[c].trim().parse::<f64>()).collect::<std::result::Result<_, _>>()?);
    }
    Ok(points)
}

fn eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let d = model.dim();
    let points = match (&args.points, args.grid) {
        (Some(path), _) => read_points(path, d)?,
        (None, Some(count)) => grid_points(model.domain(), count)?,
        (None, None) => unreachable!("clap requires --grid or --points"),
    };
    if args.truth.is_some() && d != 1 {
        bail!("--truth mm1 needs a one-dimensional model");
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("eval.csv"));
    let mut w = csv::Writer::from_writer(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
    let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    header.push("f".into());
    header.extend((1..=d).map(|k| format!("g{k}")));
    if args.truth.is_some() {
        header.extend(["f0".into(), "grad_f0".into()]);
    }
    w.write_record(&header)?;
    for x in &points {
        let mut row: Vec<String> = x.iter().map(f64::to_string).collect();
        row.push(model.evaluate(x)?.to_string());
        row.extend(model.subgradient(x)?.iter().map(f64::to_string));
        if args.truth.is_some() {
            row.push(true_f0(x[0])?.to_string());
            row.push(grad_true_f0(x[0])?.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    println!("rows={}", points.len());
    println!("eval={}", out.display());
    Ok(())
}

fn experiment(cli: &Cli, args: &ExperimentArgs, tol: &SolverTolerances) -> Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("experiment"));
    let mut reports = Vec::new();
    for &n in &args.n_list {
        let mut plan = ReplicationPlan::new(n, args.reps, args.customers, cli.seed);
        plan.folds = args.folds;
        plan.tolerances = *tol;
        if let Some(c) = &args.cv_candidates {
            plan.cv_candidates = c.clone();
        }
        let report = run_replications(&plan).with_context(|| format!("experiment at n = {n}"))?;
        log::info!("n = {n}: {} of {} replications failed", report.failed_replications, report.reps);
        reports.push(report);
    }
    let suite = ExperimentSuite { reports };
    suite.write_all(&out)?;
    let mut stdout = std::io::stdout().lock();
    for report in &suite.reports {
        writeln!(stdout, "n={} reps={} failed={}", report.n, report.reps, report.failed_replications)?;
        for s in &report.summaries {
            writeln!(
                stdout,
                "n={} config={} mae_value={} mae_subgradient={}",
                report.n,
                s.configuration,
                s.value.cell(3),
                s.subgradient.cell(2)
            )?;
        }
    }
    writeln!(stdout, "report={}", out.join("report.json").display())?;
    Ok(())
}
