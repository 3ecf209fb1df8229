use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ttq::solvers::{solve, Method, SolverConfig};
use ttq_bench::experiments::{
    convergence_experiment, initial_point, interpolation_experiment, recovery_experiment, ConvergenceSpec, Generator, Init,
    InterpolationSpec, RecoverySpec,
};
use ttq_bench::generators::FunctionKind;
use ttq_bench::report;

#[derive(Parser)]
#[command(name = "ttq", version, about = "Tensor-train completion experiments")]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true, env = "TTQ_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Success rates over random trials.
    Recover(RecoverArgs),
    /// Convergence traces of several methods on one instance.
    Converge(ConvergeArgs),
    /// Interpolation of a function tensor with increasing ranks.
    Interpolate(InterpolateArgs),
    /// Complete a tensor from a sample file.
    Complete(CompleteArgs),
}

#[derive(Args)]
struct Problem {
    /// Mode sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "50,50,50")]
    dims: Vec<usize>,
    /// TT ranks including the boundary ones, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,5,5,1")]
    ranks: Vec<usize>,
    /// Oversampling ratio |Ω| / dim.
    #[arg(long)]
    os: Option<f64>,
    /// Use the order-3 generator with this condition number.
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Initialisation: spectral or random.
    #[arg(long, default_value = "spectral")]
    init: Init,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Problem {
    fn generator(&self) -> Generator {
        self.kappa.map_or(Generator::Random, Generator::FixedKappa)
    }
}

#[derive(Args)]
struct RecoverArgs {
    #[command(flatten)]
    problem: Problem,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Success when the relative error is at most this value.
    #[arg(long, default_value_t = 1e-3)]
    threshold: f64,
    /// Stop at this relative residual.
    #[arg(long, default_value_t = 1e-4)]
    stop_residual: f64,
    /// Keep per-trial traces.
    #[arg(long)]
    traces: bool,
}

#[derive(Args)]
struct ConvergeArgs {
    #[command(flatten)]
    problem: Problem,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

#[derive(Args)]
struct InterpolateArgs {
    /// exp-sqrt or inv-norm.
    #[arg(long, default_value = "exp-sqrt")]
    function: FunctionKind,
    #[arg(long, value_delimiter = ',', default_value = "20,20,20,20")]
    dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,5,5,1")]
    max_ranks: Vec<usize>,
    /// Fraction of observed entries.
    #[arg(long, default_value_t = 0.1)]
    ratio: f64,
    #[arg(long, value_delimiter = ',', default_value = "rgdq,rcgq")]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    holdout: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CompleteArgs {
    /// Sample file (see the library documentation for the format).
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, value_delimiter = ',')]
    ranks: Vec<usize>,
    #[arg(long, default_value = "rgdq")]
    method: Method,
    #[arg(long, default_value_t = 250)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value = "spectral")]
    init: Init,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Result file; a `.json` extension selects the JSON format.
    #[arg(long)]
    output: PathBuf,
    /// Optional trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn recover(a: RecoverArgs) -> anyhow::Result<ExitCode> {
    let p = &a.problem;
    let mut spec = RecoverySpec::new(p.dims.clone(), p.ranks.clone());
    spec.os = p.os.unwrap_or(8.0);
    spec.generator = p.generator();
    spec.trials = a.trials;
    if let Some(m) = &p.methods {
        spec.methods = m.clone();
    }
    spec.seed = p.seed;
    spec.success_threshold = a.threshold;
    spec.stop_residual = a.stop_residual;
    spec.max_iters = p.max_iters.unwrap_or(250);
    spec.init = p.init;
    spec.keep_traces = a.traces;
    let res = recovery_experiment(&spec)?;
    report::emit_recovery(std::slice::from_ref(&res), &p.out)?;
    for m in &spec.methods {
        println!("{:<8} {:>3}/{:<3} rate {:.2}", m.name(), res.successes(*m), spec.trials, res.rate(*m));
    }
    if res.any_panicked() {
        eprintln!("at least one trial panicked; see {}", p.out.join("trials_0.csv").display());
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn converge(a: ConvergeArgs) -> anyhow::Result<ExitCode> {
    let p = &a.problem;
    let mut spec = ConvergenceSpec::new(p.dims.clone(), p.ranks.clone());
    spec.os = p.os.unwrap_or(20.0);
    spec.generator = p.generator();
    if let Some(m) = &p.methods {
        spec.methods = m.clone();
    }
    spec.seed = p.seed;
    spec.max_iters = p.max_iters.unwrap_or(250);
    spec.tol_residual = a.tol;
    spec.init = p.init;
    let runs = convergence_experiment(&spec)?;
    report::emit_convergence(&runs, &p.out)?;
    for r in &runs {
        let last = r.trace.last().cloned().unwrap_or_default();
        println!(
            "{:<8} {:>4} iterations  residual {:.3e}  {:.2}s  ({})",
            r.method.name(),
            r.trace.iterations(),
            last.rel_residual,
            last.seconds,
            r.status
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn interpolate(a: InterpolateArgs) -> anyhow::Result<ExitCode> {
    let mut spec = InterpolationSpec::new(a.function, a.dims, a.max_ranks, a.ratio);
    spec.methods = a.methods;
    spec.seed = a.seed;
    spec.holdout = a.holdout;
    let outcomes = interpolation_experiment(&spec)?;
    std::fs::create_dir_all(&a.out)?;
    let rows: Vec<_> = outcomes.iter().map(|o| (spec.kind.to_string(), o)).collect();
    report::write_interpolation(spec.ratio, &rows, BufWriter::new(File::create(a.out.join("interpolation.csv"))?))?;
    for o in &outcomes {
        report::write_trace_file(&a.out, &format!("trace_{}_", spec.kind), &o.trace)?;
        println!(
            "{:<8} test error {:.3e}  {} iterations in {} stages  {:.2}s",
            o.method.name(),
            o.test_error,
            o.iterations,
            o.stages,
            o.seconds
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn complete(a: CompleteArgs) -> anyhow::Result<ExitCode> {
    let samples =
        ttq::io::read_samples(BufReader::new(File::open(&a.samples).with_context(|| format!("opening {}", a.samples.display()))?))?;
    if a.ranks.len() != samples.order() + 1 {
        bail!("expected {} ranks for an order-{} tensor", samples.order() + 1, samples.order());
    }
    let x0 = initial_point(a.init, &samples, &a.ranks, a.seed)?;
    let cfg = SolverConfig { max_iters: a.max_iters, tol_residual: a.tol, ..SolverConfig::default() };
    let out = solve(a.method, &x0, &samples, &cfg, None)?;
    if a.output.extension().is_some_and(|e| e == "json") {
        std::fs::write(&a.output, ttq::io::tt_to_json(&out.x)?)?;
    } else {
        ttq::io::write_tt(&out.x, BufWriter::new(File::create(&a.output)?))?;
    }
    if let Some(t) = &a.trace {
        out.trace.write_csv(BufWriter::new(File::create(t)?))?;
    }
    let last = out.trace.last().cloned().unwrap_or_default();
    println!("{}: {} iterations, relative residual {:.3e} ({})", a.method, out.trace.iterations(), last.rel_residual, out.status);
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Recover(a) => recover(a),
        Command::Converge(a) => converge(a),
        Command::Interpolate(a) => interpolate(a),
        Command::Complete(a) => complete(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
