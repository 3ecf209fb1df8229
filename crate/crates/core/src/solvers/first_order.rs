//! Gradient descent and nonlinear conjugate gradients, shared between the
//! quotient geometry (preconditioned metric, core-wise retraction) and the
//! embedded geometry (Euclidean metric, TT-SVD retraction).

use std::time::Instant;

use super::{residual_stats, stopping, IterEvents, IterRecord, SolveOutput, SolverConfig, SolverTrace, StopReason};
use crate::completion::{residual, step_from_sampled_direction, tangent_apply_on_samples, SampleSet};
use crate::embedded::{EmbeddedFrame, EmbeddedTangent};
use crate::quotient::{self, CoreDirection, HorizontalSolver};
use crate::tt::{GramCache, TTTensor};
use crate::{Error, Result};

/// Which first-order scheme to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FirstOrderVariant {
    /// Steepest descent with Armijo backtracking. The quotient variant starts
    /// the search from Barzilai–Borwein steps, the embedded one from the
    /// linearised step.
    Gradient,
    /// Hestenes–Stiefel+ conjugate gradients with the closed-form linearised step.
    ConjugateGradient,
}

/// The geometric operations a first-order method needs at one point.
trait Space: Sized {
    type Tangent: Clone;
    fn at(x: TTTensor, cfg: &SolverConfig) -> Result<Self>;
    fn point(&self) -> &TTTensor;
    fn gradient(&self, samples: &SampleSet, residual: &[f64]) -> Result<Self::Tangent>;
    fn inner(&self, a: &Self::Tangent, b: &Self::Tangent) -> f64;
    fn retract(&self, t: &Self::Tangent, alpha: f64) -> Result<TTTensor>;
    /// Transport a tangent vector at `from` to this point; the flag reports
    /// whether a regularised solve was needed.
    fn transport(&self, from: &Self, t: &Self::Tangent) -> Result<(Self::Tangent, bool)>;
    fn sampled(&self, t: &Self::Tangent, samples: &SampleSet) -> Result<Vec<f64>>;
    /// `alpha * a + beta * b`.
    fn combine(alpha: f64, a: &Self::Tangent, beta: f64, b: &Self::Tangent) -> Self::Tangent;
}

struct QuotientPoint {
    x: TTTensor,
    cache: GramCache,
    solver: HorizontalSolver,
}

impl Space for QuotientPoint {
    type Tangent = CoreDirection;

    fn at(x: TTTensor, cfg: &SolverConfig) -> Result<Self> {
        let cache = GramCache::new(&x);
        Ok(QuotientPoint { x, cache, solver: cfg.horizontal_solver })
    }
    fn point(&self) -> &TTTensor {
        &self.x
    }
    fn gradient(&self, samples: &SampleSet, residual: &[f64]) -> Result<CoreDirection> {
        quotient::riemannian_gradient(&self.x, &self.cache, samples, residual)
    }
    fn inner(&self, a: &CoreDirection, b: &CoreDirection) -> f64 {
        quotient::metric(&self.cache, a, b)
    }
    fn retract(&self, t: &CoreDirection, alpha: f64) -> Result<TTTensor> {
        quotient::retract_total(&self.x, t, alpha)
    }
    fn transport(&self, _from: &Self, t: &CoreDirection) -> Result<(CoreDirection, bool)> {
        let (v, rep) = quotient::project_horizontal_with(&self.x, &self.cache, t, self.solver)?;
        Ok((v, rep.regularized))
    }
    fn sampled(&self, t: &CoreDirection, samples: &SampleSet) -> Result<Vec<f64>> {
        tangent_apply_on_samples(&self.x, t.blocks(), samples)
    }
    fn combine(alpha: f64, a: &CoreDirection, beta: f64, b: &CoreDirection) -> CoreDirection {
        let mut out = a.scaled(alpha);
        out.axpy(beta, b);
        out
    }
}

struct EmbeddedPoint {
    frame: EmbeddedFrame,
}

impl Space for EmbeddedPoint {
    type Tangent = EmbeddedTangent;

    fn at(x: TTTensor, _cfg: &SolverConfig) -> Result<Self> {
        Ok(EmbeddedPoint { frame: EmbeddedFrame::new(&x)? })
    }
    fn point(&self) -> &TTTensor {
        self.frame.base()
    }
    fn gradient(&self, samples: &SampleSet, residual: &[f64]) -> Result<EmbeddedTangent> {
        self.frame.tangent_project(samples, residual)
    }
    fn inner(&self, a: &EmbeddedTangent, b: &EmbeddedTangent) -> f64 {
        self.frame.inner(a, b)
    }
    fn retract(&self, t: &EmbeddedTangent, alpha: f64) -> Result<TTTensor> {
        self.frame.retract(t, alpha)
    }
    fn transport(&self, from: &Self, t: &EmbeddedTangent) -> Result<(EmbeddedTangent, bool)> {
        Ok((self.frame.transport(&from.frame, t)?, false))
    }
    fn sampled(&self, t: &EmbeddedTangent, samples: &SampleSet) -> Result<Vec<f64>> {
        tangent_apply_on_samples(self.frame.base(), t.deltas(), samples)
    }
    fn combine(alpha: f64, a: &EmbeddedTangent, beta: f64, b: &EmbeddedTangent) -> EmbeddedTangent {
        let mut out = a.scaled(alpha);
        out.axpy(beta, b);
        out
    }
}

/// Initial trial step of the Armijo search.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum InitialStep {
    /// Unit step first, Riemannian Barzilai–Borwein afterwards.
    Rbb,
    /// Exact minimiser of the objective linearised along the direction.
    Linearized,
}

/// Riemannian gradient descent under the quotient geometry.
pub fn rgd_quotient(x0: &TTTensor, samples: &SampleSet, cfg: &SolverConfig, truth: Option<&TTTensor>) -> Result<SolveOutput> {
    run_gradient::<QuotientPoint>("RGD(Q)", InitialStep::Rbb, x0, samples, cfg, truth)
}

/// Riemannian conjugate gradients under the quotient geometry.
pub fn rcg_quotient(x0: &TTTensor, samples: &SampleSet, cfg: &SolverConfig, truth: Option<&TTTensor>) -> Result<SolveOutput> {
    run_cg::<QuotientPoint>("RCG(Q)", x0, samples, cfg, truth)
}

/// First-order baselines under the embedded geometry.
pub fn first_order_embedded(
    x0: &TTTensor,
    samples: &SampleSet,
    cfg: &SolverConfig,
    variant: FirstOrderVariant,
    truth: Option<&TTTensor>,
) -> Result<SolveOutput> {
    match variant {
        FirstOrderVariant::Gradient => run_gradient::<EmbeddedPoint>("RGD(E)", InitialStep::Linearized, x0, samples, cfg, truth),
        FirstOrderVariant::ConjugateGradient => run_cg::<EmbeddedPoint>("RCG(E)", x0, samples, cfg, truth),
    }
}

struct Common<'a> {
    truth: Option<&'a TTTensor>,
    data_norm: f64,
    start: Instant,
}

impl Common<'_> {
    fn record(&self, iter: usize, x: &TTTensor, res: &[f64], grad_norm: f64) -> Result<IterRecord> {
        let (objective, rel_residual) = residual_stats(res, self.data_norm);
        let rel_error = self.truth.map(|t| x.relative_error(t)).transpose()?;
        Ok(IterRecord {
            iter,
            objective,
            grad_norm,
            rel_residual,
            rel_error,
            seconds: self.start.elapsed().as_secs_f64(),
            ..IterRecord::default()
        })
    }
}

fn setup<'a, S: Space>(
    x0: &TTTensor,
    samples: &'a SampleSet,
    cfg: &SolverConfig,
    truth: Option<&'a TTTensor>,
) -> Result<(Common<'a>, S, Vec<f64>)> {
    cfg.validate()?;
    let common = Common { truth, data_norm: samples.norm(), start: Instant::now() };
    let pt = S::at(x0.clone(), cfg)?;
    let res = residual(pt.point(), samples)?;
    Ok((common, pt, res))
}

fn run_gradient<S: Space>(
    name: &str,
    initial: InitialStep,
    x0: &TTTensor,
    samples: &SampleSet,
    cfg: &SolverConfig,
    truth: Option<&TTTensor>,
) -> Result<SolveOutput> {
    let (common, mut pt, mut res) = setup::<S>(x0, samples, cfg, truth)?;
    let mut trace = SolverTrace::new(name);
    let rule = cfg.rule();
    let mut prev: Option<(S, S::Tangent, f64)> = None;
    let status = loop {
        let grad = pt.gradient(samples, &res)?;
        let gg = pt.inner(&grad, &grad).max(0.0);
        trace.records.push(common.record(trace.len(), pt.point(), &res, gg.sqrt())?);
        if let Some(reason) = stopping(&trace.records, &rule) {
            break reason;
        }
        let xi = S::combine(-1.0, &grad, 0.0, &grad);
        let mut events = IterEvents::default();
        let alpha0 = match (initial, &prev) {
            (InitialStep::Linearized, _) => match step_from_sampled_direction(&pt.sampled(&xi, samples)?, &res) {
                Ok(a) if a.is_finite() && a > 0.0 => a,
                Ok(_) | Err(Error::InvisibleDirection) => {
                    events.unit_step_fallback = true;
                    1.0
                }
                Err(e) => return Err(e),
            },
            (InitialStep::Rbb, None) => 1.0,
            (InitialStep::Rbb, Some((prev_pt, prev_xi, prev_alpha))) => {
                let (txi, reg) = pt.transport(prev_pt, prev_xi)?;
                events.regularized |= reg;
                let s = S::combine(*prev_alpha, &txi, 0.0, &txi);
                let y = S::combine(1.0, &xi, -1.0, &txi);
                let (a, clamped) = quotient::rbb_from_products(pt.inner(&s, &s), pt.inner(&s, &y), *prev_alpha, cfg.rbb_min, cfg.rbb_max);
                events.rbb_clamped = clamped;
                a
            }
        };
        let f0 = trace.records.last().map(|r| r.objective).unwrap_or(f64::INFINITY);
        let mut alpha = alpha0;
        let mut accepted = None;
        for k in 0..=cfg.max_backtracks {
            if let Ok(xn) = pt.retract(&xi, alpha) {
                let rn = residual(&xn, samples)?;
                let (fnew, _) = residual_stats(&rn, common.data_norm);
                if f0 - fnew >= cfg.armijo_sigma * alpha * gg {
                    accepted = Some((xn, rn));
                    break;
                }
            }
            if k < cfg.max_backtracks {
                alpha *= cfg.armijo_beta;
                events.backtracks += 1;
            }
        }
        let Some((xn, rn)) = accepted else {
            break StopReason::LineSearchFailed;
        };
        let last = trace.records.last_mut().expect("record pushed above");
        last.step = Some(alpha);
        last.events = events;
        match S::at(xn, cfg) {
            Ok(next) => {
                prev = Some((std::mem::replace(&mut pt, next), xi, alpha));
                res = rn;
            }
            Err(e) => break StopReason::Breakdown(e.to_string()),
        }
    };
    Ok(SolveOutput { x: pt.point().clone(), trace, status })
}

/// Closed-form step along `eta` followed by halving until the objective
/// decreases sufficiently relative to the slope `<eta, xi>`.
#[allow(clippy::too_many_arguments)]
fn cg_step<S: Space>(
    pt: &S,
    eta: &S::Tangent,
    xi: &S::Tangent,
    res: &[f64],
    f0: f64,
    samples: &SampleSet,
    cfg: &SolverConfig,
    common: &Common<'_>,
    events: &mut IterEvents,
) -> Result<Option<(TTTensor, Vec<f64>, f64)>> {
    let pxi = pt.sampled(eta, samples)?;
    let mut alpha = match step_from_sampled_direction(&pxi, res) {
        Ok(a) if a.is_finite() && a > 0.0 => a,
        Ok(_) | Err(Error::InvisibleDirection) => {
            events.unit_step_fallback = true;
            1.0
        }
        Err(e) => return Err(e),
    };
    let slope = pt.inner(eta, xi).max(0.0);
    for k in 0..=cfg.max_backtracks {
        if let Ok(xn) = pt.retract(eta, alpha) {
            let rn = residual(&xn, samples)?;
            let (fnew, _) = residual_stats(&rn, common.data_norm);
            if f0 - fnew >= cfg.armijo_sigma * alpha * slope {
                return Ok(Some((xn, rn, alpha)));
            }
        }
        if k < cfg.max_backtracks {
            alpha *= cfg.armijo_beta;
            events.backtracks += 1;
        }
    }
    Ok(None)
}

fn run_cg<S: Space>(name: &str, x0: &TTTensor, samples: &SampleSet, cfg: &SolverConfig, truth: Option<&TTTensor>) -> Result<SolveOutput> {
    let (common, mut pt, mut res) = setup::<S>(x0, samples, cfg, truth)?;
    let mut trace = SolverTrace::new(name);
    let rule = cfg.rule();
    // previous point, gradient and search direction
    let mut prev: Option<(S, S::Tangent, S::Tangent)> = None;
    let status = loop {
        let grad = pt.gradient(samples, &res)?;
        let gg = pt.inner(&grad, &grad).max(0.0);
        trace.records.push(common.record(trace.len(), pt.point(), &res, gg.sqrt())?);
        if let Some(reason) = stopping(&trace.records, &rule) {
            break reason;
        }
        let xi = S::combine(-1.0, &grad, 0.0, &grad);
        let mut events = IterEvents::default();
        let (mut eta, beta) = match &prev {
            None => (xi.clone(), 0.0),
            Some((prev_pt, prev_grad, prev_eta)) => {
                let (tg, r1) = pt.transport(prev_pt, prev_grad)?;
                let (teta, r2) = pt.transport(prev_pt, prev_eta)?;
                events.regularized |= r1 || r2;
                let y = S::combine(1.0, &grad, -1.0, &tg);
                let den = pt.inner(&y, &teta);
                let num = pt.inner(&y, &grad);
                if den.abs() < 1e-300 {
                    events.restarted = true;
                    (xi.clone(), 0.0)
                } else {
                    let beta = (num / den).max(0.0);
                    let eta = S::combine(1.0, &xi, beta, &teta);
                    if pt.inner(&eta, &xi) <= 0.0 {
                        events.restarted = true;
                        (xi.clone(), 0.0)
                    } else {
                        (eta, beta)
                    }
                }
            }
        };
        let f0 = trace.records.last().map(|r| r.objective).unwrap_or(f64::INFINITY);
        // The linearised step is exact for the first-order model only. Near
        // rank-deficient points it can overshoot badly, so it is safeguarded
        // by a sufficient-decrease test, falling back to steepest descent.
        let mut attempt = cg_step(&pt, &eta, &xi, &res, f0, samples, cfg, &common, &mut events)?;
        let mut beta = beta;
        if attempt.is_none() && beta != 0.0 {
            events.restarted = true;
            beta = 0.0;
            attempt = cg_step(&pt, &xi, &xi, &res, f0, samples, cfg, &common, &mut events)?;
            eta = xi.clone();
        }
        let Some((xn, rn, alpha)) = attempt else {
            break StopReason::LineSearchFailed;
        };
        let last = trace.records.last_mut().expect("record pushed above");
        last.step = Some(alpha);
        last.beta = Some(beta);
        last.events = events;
        match S::at(xn, cfg) {
            Ok(next_pt) => {
                prev = Some((std::mem::replace(&mut pt, next_pt), grad, eta));
                res = rn;
            }
            Err(e) => break StopReason::Breakdown(e.to_string()),
        }
    };
    Ok(SolveOutput { x: pt.point().clone(), trace, status })
}
