//! Optimisation drivers for tensor-train completion.
//!
//! Every driver starts from a user-supplied initial point, records one
//! [`IterRecord`] per iterate and stops through [`stopping`]. The `step` and
//! `beta` fields of a record describe the update taken *from* that iterate,
//! so the final record leaves them empty.

mod first_order;
mod gauss_newton;
mod trace;

use std::fmt;
use std::str::FromStr;

pub use first_order::{first_order_embedded, rcg_quotient, rgd_quotient, FirstOrderVariant};
pub use gauss_newton::{gn_least_squares, gn_to_core_direction, rgn, Geometry, GnSolution};
pub use trace::{IterEvents, IterRecord, SolverTrace, TRACE_HEADER};

use crate::completion::SampleSet;
use crate::quotient::HorizontalSolver;
use crate::tt::{tt_svd, DenseTensor, TTTensor, DEFAULT_DENSE_BUDGET};
use crate::{Error, Result};

/// The algorithms provided by this module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    RgdQ,
    RcgQ,
    RgnQ,
    RgdE,
    RcgE,
    RgnE,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::RgdQ, Method::RcgQ, Method::RgnQ, Method::RgdE, Method::RcgE, Method::RgnE];

    pub fn name(self) -> &'static str {
        match self {
            Method::RgdQ => "RGD(Q)",
            Method::RcgQ => "RCG(Q)",
            Method::RgnQ => "RGN(Q)",
            Method::RgdE => "RGD(E)",
            Method::RcgE => "RCG(E)",
            Method::RgnE => "RGN(E)",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "rgdq" => Method::RgdQ,
            "rcgq" => Method::RcgQ,
            "rgnq" => Method::RgnQ,
            "rgde" => Method::RgdE,
            "rcge" => Method::RcgE,
            "rgne" => Method::RgnE,
            _ => return Err(Error::Config(format!("unknown method '{s}'"))),
        })
    }
}

/// Least-squares solver used inside the Gauss–Newton iterations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GnSolver {
    /// Matrix-free CGLS on the sampled Jacobian.
    Iterative { tol: f64, max_iter: usize },
    /// Dense Jacobian and Cholesky on the normal equations (desk scale only).
    NormalEquations,
}

impl Default for GnSolver {
    fn default() -> Self {
        GnSolver::Iterative { tol: 1e-12, max_iter: 200 }
    }
}

/// Solver parameters. Defaults follow the documented design choices.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Stop when the Riemannian gradient norm drops below this value.
    pub tol_grad: f64,
    /// Stop when `||P_Ω X - P_Ω T|| / ||P_Ω T||` drops below this value.
    pub tol_residual: f64,
    /// Stop when the relative change of the residual norm drops below this value.
    pub tol_rel_change: Option<f64>,
    /// The relative-change test is only applied from this iteration on.
    pub rel_change_after: usize,
    pub armijo_beta: f64,
    pub armijo_sigma: f64,
    pub max_backtracks: usize,
    pub rbb_min: f64,
    pub rbb_max: f64,
    pub gn_solver: GnSolver,
    /// Accept a Gauss–Newton step only if it decreases the objective,
    /// otherwise halve it once.
    pub gn_guard: bool,
    pub horizontal_solver: HorizontalSolver,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 250,
            tol_grad: 1e-14,
            tol_residual: 1e-12,
            tol_rel_change: None,
            rel_change_after: 1,
            armijo_beta: 0.5,
            armijo_sigma: 1e-4,
            max_backtracks: 25,
            rbb_min: 1e-8,
            rbb_max: 1e8,
            gn_solver: GnSolver::default(),
            gn_guard: false,
            horizontal_solver: HorizontalSolver::Cholesky,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !(self.tol_grad > 0.0 && self.tol_residual > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if let Some(t) = self.tol_rel_change {
            if t <= 0.0 {
                return Err(Error::Config("relative-change tolerance must be positive".into()));
            }
        }
        if !unit(self.armijo_beta) || !unit(self.armijo_sigma) {
            return Err(Error::Config("Armijo parameters must lie in (0, 1)".into()));
        }
        if !(self.rbb_min > 0.0 && self.rbb_min <= self.rbb_max) {
            return Err(Error::Config("invalid step clamp bounds".into()));
        }
        if let GnSolver::Iterative { tol, max_iter } = self.gn_solver {
            if tol <= 0.0 || max_iter == 0 {
                return Err(Error::Config("invalid least-squares tolerance or cap".into()));
            }
        }
        Ok(())
    }

    fn rule(&self) -> StoppingRule {
        StoppingRule {
            max_iters: self.max_iters,
            tol_grad: self.tol_grad,
            tol_residual: self.tol_residual,
            tol_rel_change: self.tol_rel_change,
            rel_change_after: self.rel_change_after,
        }
    }
}

/// Why a run ended.
#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    MaxIterations,
    GradientNorm,
    RelativeResidual,
    RelativeChange,
    LineSearchFailed,
    /// The iterate left the manifold (rank loss) or a linear solve failed.
    Breakdown(String),
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::MaxIterations => f.write_str("max-iterations"),
            StopReason::GradientNorm => f.write_str("gradient-norm"),
            StopReason::RelativeResidual => f.write_str("relative-residual"),
            StopReason::RelativeChange => f.write_str("relative-change"),
            StopReason::LineSearchFailed => f.write_str("line-search-failed"),
            StopReason::Breakdown(m) => write!(f, "breakdown: {m}"),
        }
    }
}

/// Composable stopping thresholds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StoppingRule {
    pub max_iters: usize,
    pub tol_grad: f64,
    pub tol_residual: f64,
    pub tol_rel_change: Option<f64>,
    pub rel_change_after: usize,
}

/// Decide whether to stop after the last record of `records`. Criteria are
/// checked in the order residual, gradient, relative change, iteration cap.
pub fn stopping(records: &[IterRecord], rule: &StoppingRule) -> Option<StopReason> {
    let last = records.last()?;
    if last.rel_residual < rule.tol_residual {
        return Some(StopReason::RelativeResidual);
    }
    if last.grad_norm < rule.tol_grad {
        return Some(StopReason::GradientNorm);
    }
    if let (Some(tol), [.., prev, _]) = (rule.tol_rel_change, records) {
        if last.iter >= rule.rel_change_after
            && prev.rel_residual > 0.0
            && (last.rel_residual - prev.rel_residual).abs() / prev.rel_residual < tol
        {
            return Some(StopReason::RelativeChange);
        }
    }
    if last.iter >= rule.max_iters {
        return Some(StopReason::MaxIterations);
    }
    None
}

/// Result of a solver run.
#[derive(Clone, Debug)]
pub struct SolveOutput {
    pub x: TTTensor,
    pub trace: SolverTrace,
    pub status: StopReason,
}

/// Run `method` from `x0`. `truth`, when given, is used only to fill the
/// relative-error column of the trace.
pub fn solve(method: Method, x0: &TTTensor, samples: &SampleSet, cfg: &SolverConfig, truth: Option<&TTTensor>) -> Result<SolveOutput> {
    match method {
        Method::RgdQ => rgd_quotient(x0, samples, cfg, truth),
        Method::RcgQ => rcg_quotient(x0, samples, cfg, truth),
        Method::RgnQ => rgn(x0, samples, cfg, Geometry::Quotient, truth),
        Method::RgdE => first_order_embedded(x0, samples, cfg, FirstOrderVariant::Gradient, truth),
        Method::RcgE => first_order_embedded(x0, samples, cfg, FirstOrderVariant::ConjugateGradient, truth),
        Method::RgnE => rgn(x0, samples, cfg, Geometry::Embedded, truth),
    }
}

/// Spectral initialisation: TT-SVD of the zero-filled observations scaled by
/// `prod(n) / |Ω|`, truncated to `ranks`. Requires the dense tensor to fit in
/// the default budget.
pub fn spectral_init(samples: &SampleSet, ranks: &[usize]) -> Result<TTTensor> {
    let dims = samples.dims().to_vec();
    let mut dense = DenseTensor::zeros(dims.clone())?;
    if dense.numel() > DEFAULT_DENSE_BUDGET {
        return Err(Error::DenseBudget { entries: dense.numel() as u128, budget: DEFAULT_DENSE_BUDGET });
    }
    let scale = 1.0 / samples.sampling_ratio();
    for s in 0..samples.len() {
        let lin = dense.linear_index(samples.index(s))?;
        dense.values_mut()[lin] = scale * samples.values()[s];
    }
    let x = tt_svd(&dense, ranks, 0.0)?;
    if x.ranks() != ranks {
        return Err(Error::InvalidRanks(format!("spectral initialisation reached ranks {:?}, requested {ranks:?}", x.ranks())));
    }
    Ok(x)
}

/// Relative residual and objective of a sparse residual.
pub(crate) fn residual_stats(residual: &[f64], data_norm: f64) -> (f64, f64) {
    let sq: f64 = residual.iter().map(|v| v * v).sum();
    (0.5 * sq, if data_norm > 0.0 { sq.sqrt() / data_norm } else { sq.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(iter: usize, rel: f64, grad: f64) -> IterRecord {
        IterRecord { iter, objective: rel * rel, grad_norm: grad, rel_residual: rel, ..IterRecord::default() }
    }

    #[test]
    fn stopping_criteria_fire_in_order() {
        let rule = StoppingRule { max_iters: 10, tol_grad: 1e-8, tol_residual: 1e-6, tol_rel_change: Some(1e-3), rel_change_after: 1 };
        assert_eq!(stopping(&[rec(0, 0.0, 1.0)], &rule), Some(StopReason::RelativeResidual));
        assert_eq!(stopping(&[rec(0, 1.0, 0.0)], &rule), Some(StopReason::GradientNorm));
        assert_eq!(stopping(&[rec(0, 1.0, 1.0)], &rule), None);
        let cap = StoppingRule { max_iters: 0, ..rule };
        assert_eq!(stopping(&[rec(0, 1.0, 1.0)], &cap), Some(StopReason::MaxIterations));
        assert_eq!(stopping(&[rec(10, 1.0, 1.0)], &rule), Some(StopReason::MaxIterations));
        assert_eq!(stopping(&[], &rule), None);
    }

    #[test]
    fn relative_change_fires_on_stagnation() {
        let rule = StoppingRule { max_iters: 100, tol_grad: 1e-12, tol_residual: 1e-5, tol_rel_change: Some(1e-3), rel_change_after: 1 };
        let mut trace = Vec::new();
        let mut r = 1.0;
        let mut fired = None;
        for t in 0..50 {
            // fast decrease first, then stagnation
            r *= if t < 10 { 0.5 } else { 0.9999 };
            trace.push(rec(t, r, 1.0));
            if let Some(reason) = stopping(&trace, &rule) {
                fired = Some((t, reason));
                break;
            }
        }
        assert_eq!(fired, Some((10, StopReason::RelativeChange)));
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        assert!(SolverConfig { armijo_beta: 1.0, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { tol_grad: 0.0, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { rbb_min: 2.0, rbb_max: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("rgd-q".parse::<Method>().unwrap(), Method::RgdQ);
        assert!("newton".parse::<Method>().is_err());
    }
}
