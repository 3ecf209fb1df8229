//! Experiment protocols: recovery rates, convergence traces and function
//! interpolation with increasing ranks.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use ttq::completion::{evaluate, SampleSet};
use ttq::solvers::{solve, spectral_init, Method, SolveOutput, SolverConfig, SolverTrace};
use ttq::tt::{feasible_ranks, Core, TTTensor};

use crate::generators::{function_value, gen_fixed_kappa, gen_random_tt, random_init, rng_from_seed, FunctionKind};
use crate::sampling::{linear_positions, observe_fn, observe_tt, os_count, sample_disjoint, sample_omega};
use crate::{BenchError, Result};

/// How ground-truth tensors are generated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Generator {
    /// Standard normal cores.
    Random,
    /// Order-3 construction with the given condition number.
    FixedKappa(f64),
}

impl Generator {
    pub fn kappa(&self) -> Option<f64> {
        match self {
            Generator::Random => None,
            Generator::FixedKappa(k) => Some(*k),
        }
    }

    pub fn generate(&self, dims: &[usize], ranks: &[usize], seed: u64) -> Result<TTTensor> {
        match *self {
            Generator::Random => gen_random_tt(dims, ranks, seed),
            Generator::FixedKappa(kappa) => {
                if ranks.len() != 4 || ranks[1] != ranks[2] {
                    return Err(BenchError::Spec(format!("fixed-condition instances need ranks (1, r, r, 1), got {ranks:?}")));
                }
                gen_fixed_kappa(dims, ranks[1], kappa, seed)
            }
        }
    }
}

/// Starting point of each run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Truncated TT-SVD of the rescaled zero-filled observations.
    Spectral,
    /// Gaussian cores scaled to the estimated norm of the target.
    Random,
}

impl std::str::FromStr for Init {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spectral" => Ok(Init::Spectral),
            "random" => Ok(Init::Random),
            _ => Err(BenchError::Spec(format!("unknown initialisation '{s}'"))),
        }
    }
}

/// Starting point for `samples` at the given ranks.
pub fn initial_point(init: Init, samples: &SampleSet, ranks: &[usize], seed: u64) -> Result<TTTensor> {
    match init {
        Init::Spectral => Ok(spectral_init(samples, ranks)?),
        Init::Random => {
            let energy = samples.norm() / samples.sampling_ratio().sqrt();
            random_init(samples.dims(), ranks, energy, seed)
        }
    }
}

/// Seed of trial `t`: the base seed xor the trial index.
pub fn trial_seed(base: u64, trial: usize) -> u64 {
    base ^ trial as u64
}

/// One generated problem: ground truth, observations and starting point.
#[derive(Clone, Debug)]
pub struct Instance {
    pub truth: TTTensor,
    pub samples: SampleSet,
    pub x0: TTTensor,
}

/// Build the instance of one trial. Truth, sample positions and starting
/// point use three streams derived from `seed`.
pub fn make_instance(dims: &[usize], ranks: &[usize], os: f64, generator: Generator, init: Init, seed: u64) -> Result<Instance> {
    let mut rng = rng_from_seed(seed);
    let (s_truth, s_omega, s_init) = (rng.next_u64(), rng.next_u64(), rng.next_u64());
    let truth = generator.generate(dims, ranks, s_truth)?;
    let samples = observe_tt(&truth, os_count(dims, ranks, os)?, s_omega)?;
    let x0 = initial_point(init, &samples, ranks, s_init)?;
    Ok(Instance { truth, samples, x0 })
}

/// Recovery-rate experiment.
#[derive(Clone, Debug)]
pub struct RecoverySpec {
    pub dims: Vec<usize>,
    pub ranks: Vec<usize>,
    pub os: f64,
    pub generator: Generator,
    pub trials: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    /// A run succeeds when `||X - T|| / ||T||` is at most this value.
    pub success_threshold: f64,
    pub stop_residual: f64,
    pub max_iters: usize,
    pub init: Init,
    pub keep_traces: bool,
}

impl RecoverySpec {
    pub fn new(dims: Vec<usize>, ranks: Vec<usize>) -> Self {
        RecoverySpec {
            dims,
            ranks,
            os: 8.0,
            generator: Generator::Random,
            trials: 20,
            methods: vec![Method::RgdQ, Method::RcgQ, Method::RgdE, Method::RcgE],
            seed: 0,
            success_threshold: 1e-3,
            stop_residual: 1e-4,
            max_iters: 250,
            init: Init::Spectral,
            keep_traces: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dims.len() + 1 != self.ranks.len() || !feasible_ranks(&self.dims, &self.ranks) {
            return Err(BenchError::Spec(format!("ranks {:?} are infeasible for dims {:?}", self.ranks, self.dims)));
        }
        if self.methods.is_empty() {
            return Err(BenchError::Spec("no methods selected".into()));
        }
        if let Some(k) = self.generator.kappa() {
            if !(k >= 1.0) {
                return Err(BenchError::Spec(format!("condition number {k} below 1")));
            }
        }
        os_count(&self.dims, &self.ranks, self.os)?;
        Ok(())
    }

    fn solver_config(&self) -> SolverConfig {
        SolverConfig { max_iters: self.max_iters, tol_residual: self.stop_residual, ..SolverConfig::default() }
    }
}

/// Result of one method on one trial.
#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub trial: usize,
    pub method: Method,
    pub success: bool,
    pub rel_error: f64,
    pub rel_residual: f64,
    pub iterations: usize,
    pub seconds: f64,
    pub status: String,
    pub panicked: bool,
    pub trace: Option<SolverTrace>,
}

impl TrialOutcome {
    fn failed(trial: usize, method: Method, status: String, panicked: bool) -> Self {
        TrialOutcome {
            trial,
            method,
            success: false,
            rel_error: f64::NAN,
            rel_residual: f64::NAN,
            iterations: 0,
            seconds: 0.0,
            status,
            panicked,
            trace: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RecoveryResult {
    pub spec: RecoverySpec,
    /// Ordered by trial, then by the method order of the spec.
    pub outcomes: Vec<TrialOutcome>,
}

impl RecoveryResult {
    pub fn successes(&self, method: Method) -> usize {
        self.outcomes.iter().filter(|o| o.method == method && o.success).count()
    }

    pub fn rate(&self, method: Method) -> f64 {
        let n = self.outcomes.iter().filter(|o| o.method == method).count();
        if n == 0 {
            0.0
        } else {
            self.successes(method) as f64 / n as f64
        }
    }

    pub fn any_panicked(&self) -> bool {
        self.outcomes.iter().any(|o| o.panicked)
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// Run `method` with panics converted into an error message.
pub fn guarded_solve(method: Method, inst: &Instance, cfg: &SolverConfig) -> std::result::Result<SolveOutput, (String, bool)> {
    match catch_unwind(AssertUnwindSafe(|| solve(method, &inst.x0, &inst.samples, cfg, None))) {
        Ok(Ok(out)) => Ok(out),
        Ok(Err(e)) => Err((format!("error: {e}"), false)),
        Err(p) => Err((format!("panic: {}", panic_message(p)), true)),
    }
}

fn run_trial(spec: &RecoverySpec, trial: usize) -> Vec<TrialOutcome> {
    let inst = match catch_unwind(AssertUnwindSafe(|| {
        make_instance(&spec.dims, &spec.ranks, spec.os, spec.generator, spec.init, trial_seed(spec.seed, trial))
    })) {
        Ok(Ok(inst)) => inst,
        Ok(Err(e)) => return spec.methods.iter().map(|&m| TrialOutcome::failed(trial, m, format!("error: {e}"), false)).collect(),
        Err(p) => {
            let msg = panic_message(p);
            return spec.methods.iter().map(|&m| TrialOutcome::failed(trial, m, format!("panic: {msg}"), true)).collect();
        }
    };
    let cfg = spec.solver_config();
    spec.methods
        .iter()
        .map(|&method| match guarded_solve(method, &inst, &cfg) {
            Ok(out) => {
                let rel_error = out.x.relative_error(&inst.truth).unwrap_or(f64::NAN);
                let last = out.trace.last().cloned().unwrap_or_default();
                TrialOutcome {
                    trial,
                    method,
                    success: rel_error <= spec.success_threshold,
                    rel_error,
                    rel_residual: last.rel_residual,
                    iterations: out.trace.iterations(),
                    seconds: last.seconds,
                    status: out.status.to_string(),
                    panicked: false,
                    trace: spec.keep_traces.then_some(out.trace),
                }
            }
            Err((status, panicked)) => TrialOutcome::failed(trial, method, status, panicked),
        })
        .collect()
}

/// Run every method on `spec.trials` independent instances (in parallel over
/// trials) and tally successes.
pub fn recovery_experiment(spec: &RecoverySpec) -> Result<RecoveryResult> {
    spec.validate()?;
    let per_trial: Vec<Vec<TrialOutcome>> = (0..spec.trials).into_par_iter().map(|t| run_trial(spec, t)).collect();
    Ok(RecoveryResult { spec: spec.clone(), outcomes: per_trial.into_iter().flatten().collect() })
}

/// Convergence-trace experiment on a single instance.
#[derive(Clone, Debug)]
pub struct ConvergenceSpec {
    pub dims: Vec<usize>,
    pub ranks: Vec<usize>,
    pub os: f64,
    pub generator: Generator,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub max_iters: usize,
    pub tol_residual: f64,
    pub init: Init,
}

impl ConvergenceSpec {
    pub fn new(dims: Vec<usize>, ranks: Vec<usize>) -> Self {
        ConvergenceSpec {
            dims,
            ranks,
            os: 20.0,
            generator: Generator::Random,
            methods: Method::ALL.to_vec(),
            seed: 0,
            max_iters: 250,
            tol_residual: 1e-10,
            init: Init::Spectral,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvergenceRun {
    pub method: Method,
    pub trace: SolverTrace,
    pub status: String,
}

/// Run each method on the same instance and keep full traces, with the
/// relative error to the ground truth filled in.
pub fn convergence_experiment(spec: &ConvergenceSpec) -> Result<Vec<ConvergenceRun>> {
    let inst = make_instance(&spec.dims, &spec.ranks, spec.os, spec.generator, spec.init, spec.seed)?;
    let cfg = SolverConfig { max_iters: spec.max_iters, tol_residual: spec.tol_residual, ..SolverConfig::default() };
    spec.methods
        .par_iter()
        .map(|&m| {
            let out = solve(m, &inst.x0, &inst.samples, &cfg, Some(&inst.truth))?;
            Ok(ConvergenceRun { method: m, trace: out.trace, status: out.status.to_string() })
        })
        .collect()
}

/// Function-interpolation experiment with a rank-increasing schedule.
#[derive(Clone, Debug)]
pub struct InterpolationSpec {
    pub kind: FunctionKind,
    pub dims: Vec<usize>,
    pub max_ranks: Vec<usize>,
    /// `|Ω| / ∏ n_k`.
    pub ratio: f64,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub holdout: usize,
    pub stage_tol: f64,
    pub stage_iters: usize,
    pub final_iters: usize,
    pub rel_change: f64,
    /// Iterations per stage before the relative-change test may fire; right
    /// after a rank increase the new directions are still tiny and the
    /// residual barely moves.
    pub rel_change_after: usize,
}

impl InterpolationSpec {
    pub fn new(kind: FunctionKind, dims: Vec<usize>, max_ranks: Vec<usize>, ratio: f64) -> Self {
        InterpolationSpec {
            kind,
            dims,
            max_ranks,
            ratio,
            methods: vec![Method::RgdQ, Method::RcgQ],
            seed: 0,
            holdout: 100,
            stage_tol: 1e-5,
            stage_iters: 15,
            final_iters: 20,
            rel_change: 1e-3,
            rel_change_after: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InterpolationOutcome {
    pub method: Method,
    /// Relative error on the held-out positions.
    pub test_error: f64,
    pub train_rel_residual: f64,
    pub iterations: usize,
    pub stages: usize,
    pub seconds: f64,
    pub ranks: Vec<usize>,
    /// Concatenated stage traces with iteration numbers running on.
    pub trace: SolverTrace,
}

/// The ranks after the next increment of the sweep, starting the search at
/// bond `cursor` (1-based, cycling through `1..d`). Returns the new ranks and
/// the bond after the one incremented.
pub fn next_ranks(ranks: &[usize], max_ranks: &[usize], dims: &[usize], cursor: usize) -> Option<(Vec<usize>, usize)> {
    let d = dims.len();
    if d < 2 {
        return None;
    }
    for step in 0..d - 1 {
        let k = (cursor.max(1) - 1 + step) % (d - 1) + 1;
        if ranks[k] < max_ranks[k] {
            let mut cand = ranks.to_vec();
            cand[k] += 1;
            if feasible_ranks(dims, &cand) {
                return Some((cand, k % (d - 1) + 1));
            }
        }
    }
    None
}

/// Embed `x` into larger ranks. The tensor is first brought to left-orthogonal
/// form; old entries are kept, new columns get Gaussian entries of standard
/// deviation `scale · ||core||` and new rows Gaussian entries at the
/// root-mean-square size of their core. The represented tensor therefore moves
/// by roughly `scale` in relative terms while the new rank direction remains
/// well separated from zero on one side of the bond.
pub fn pad_to_ranks<R: Rng>(x: &TTTensor, ranks: &[usize], scale: f64, rng: &mut R) -> Result<TTTensor> {
    // In the left-orthogonal gauge the interfaces are well scaled, so the size
    // of the new entries translates directly into the size of the perturbation.
    let x = x.left_orthogonalize()?;
    let cores = x
        .cores()
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let (l, n, r) = c.shape();
            let rms = c.norm() / ((l * n * r) as f64).sqrt();
            Core::from_fn(ranks[j], n, ranks[j + 1], |a, i, b| {
                let g: f64 = StandardNormal.sample(rng);
                if a < l && b < r {
                    c.get(a, i, b)
                } else if b >= r {
                    // New left factor of a grown bond: this sets the size of the perturbation.
                    scale * c.norm() * g
                } else {
                    // New right factor: unit scale keeps both Gram products away from singularity.
                    rms * g
                }
            })
        })
        .collect();
    Ok(TTTensor::new(cores)?)
}

fn relative_test_error(x: &TTTensor, test: &SampleSet) -> Result<f64> {
    let pred = evaluate(x, test)?;
    let num: f64 = pred.iter().zip(test.values()).map(|(p, v)| (p - v) * (p - v)).sum();
    Ok(num.sqrt() / test.norm())
}

/// Observation and held-out sets of an interpolation experiment. The held-out
/// set is disjoint from the observations and drawn from a separate stream.
pub fn interpolation_data(spec: &InterpolationSpec) -> Result<(SampleSet, SampleSet)> {
    let total: usize = spec.dims.iter().product();
    let m = (spec.ratio * total as f64).round() as usize;
    let omega = sample_omega(&spec.dims, m, spec.seed)?;
    let exclude = linear_positions(&spec.dims, &omega);
    let gamma = sample_disjoint(&spec.dims, spec.holdout, &exclude, spec.seed ^ 0x5bd1_e995_0000_0001)?;
    let f = |idx: &[usize]| function_value(spec.kind, &spec.dims, idx);
    Ok((observe_fn(&spec.dims, omega, f)?, observe_fn(&spec.dims, gamma, f)?))
}

fn interpolate_one(spec: &InterpolationSpec, method: Method, train: &SampleSet, test: &SampleSet) -> Result<InterpolationOutcome> {
    let start = Instant::now();
    let d = spec.dims.len();
    let mut ranks = vec![1; d + 1];
    let mut rng = rng_from_seed(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut x = match spectral_init(train, &ranks) {
        Ok(x) => x,
        Err(_) => initial_point(Init::Random, train, &ranks, rng.next_u64())?,
    };
    let mut cursor = 1;
    let mut trace = SolverTrace::new(method.name());
    let mut stages = 0;
    let mut last_rel;
    loop {
        let next = next_ranks(&ranks, &spec.max_ranks, &spec.dims, cursor);
        let is_final = next.is_none();
        let cfg = SolverConfig {
            max_iters: if is_final { spec.final_iters } else { spec.stage_iters },
            tol_residual: spec.stage_tol,
            tol_rel_change: Some(spec.rel_change),
            rel_change_after: spec.rel_change_after,
            ..SolverConfig::default()
        };
        let out = solve(method, &x, train, &cfg, None)?;
        stages += 1;
        let offset = trace.records.last().map_or(0, |r| r.iter + 1);
        let t0 = trace.records.last().map_or(0.0, |r| r.seconds);
        trace.records.extend(out.trace.records.iter().cloned().map(|mut r| {
            r.iter += offset;
            r.seconds += t0;
            r
        }));
        last_rel = out.trace.last().map_or(f64::NAN, |r| r.rel_residual);
        log::debug!(
            "{method} stage {stages} ranks {ranks:?}: {} iterations, residual {last_rel:.3e} ({})",
            out.trace.iterations(),
            out.status
        );
        x = out.x;
        match next {
            None => break,
            Some((r, c)) => {
                x = pad_to_ranks(&x, &r, 1e-8, &mut rng)?;
                ranks = r;
                cursor = c;
            }
        }
    }
    Ok(InterpolationOutcome {
        method,
        test_error: relative_test_error(&x, test)?,
        train_rel_residual: last_rel,
        iterations: trace.records.len().saturating_sub(stages),
        stages,
        seconds: start.elapsed().as_secs_f64(),
        ranks: x.ranks(),
        trace,
    })
}

/// Run the rank-increasing interpolation protocol for every method.
pub fn interpolation_experiment(spec: &InterpolationSpec) -> Result<Vec<InterpolationOutcome>> {
    if spec.max_ranks.len() != spec.dims.len() + 1 || spec.max_ranks[0] != 1 || spec.max_ranks[spec.dims.len()] != 1 {
        return Err(BenchError::Spec(format!("maximal ranks {:?} do not fit dims {:?}", spec.max_ranks, spec.dims)));
    }
    let (train, test) = interpolation_data(spec)?;
    spec.methods.par_iter().map(|&m| interpolate_one(spec, m, &train, &test)).collect()
}
