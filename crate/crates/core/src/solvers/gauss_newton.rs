//! Riemannian Gauss–Newton.
//!
//! Each iteration solves the linearised least-squares problem
//! `min_p ||P_Ω 𝒜(p) + r||` in the orthonormal tangent frame of the current
//! point, where `r = P_Ω X - P_Ω T`. The resulting tangent vector is then
//! applied either through the quotient geometry (horizontal lift and core-wise
//! update) or through the embedded geometry (TT rounding).

use std::time::Instant;

use nalgebra::DVector;

use super::{residual_stats, stopping, GnSolver, IterEvents, IterRecord, SolveOutput, SolverConfig, SolverTrace, StopReason};
use crate::completion::{residual, tangent_apply_on_samples, SampleSet};
use crate::embedded::{EmbeddedFrame, FrameCoords};
use crate::linalg::{self, Mat};
use crate::quotient::{self, CoreDirection};
use crate::tt::{GramCache, TTTensor};
use crate::{Error, Result};

/// Relative normal-equation residual above which an iterative solve is
/// considered unconverged and the damped continuation is started.
const NONCONVERGENCE_THRESHOLD: f64 = 1e-8;
/// Damping factor relative to the largest Rayleigh quotient seen in CGLS.
const DAMPING_FACTOR: f64 = 1e-10;

/// How the Gauss–Newton step is mapped back onto the manifold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Geometry {
    Quotient,
    Embedded,
}

/// Outcome of one linearised least-squares solve.
#[derive(Clone, Debug)]
pub struct GnSolution {
    /// Minimiser in frame coordinates.
    pub coords: FrameCoords,
    /// CGLS iterations (0 for the dense path).
    pub iterations: usize,
    /// `||J^T (b - J p)|| / ||J^T b||` of the returned solution (undamped).
    pub relative_normal_residual: f64,
    /// Whether the damped continuation was used.
    pub damped: bool,
    /// Whether the dense normal equations needed a Tikhonov shift.
    pub regularized: bool,
}

fn jac(frame: &EmbeddedFrame, samples: &SampleSet, p: &FrameCoords) -> Result<Vec<f64>> {
    tangent_apply_on_samples(frame.base(), frame.frame_apply(p).deltas(), samples)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Solve `min_p ||P_Ω 𝒜(p) - b||` at the frame's base point.
pub fn gn_least_squares(frame: &EmbeddedFrame, samples: &SampleSet, b: &[f64], solver: GnSolver) -> Result<GnSolution> {
    if b.len() != samples.len() {
        return Err(Error::Shape(format!("right-hand side has {} entries for {} samples", b.len(), samples.len())));
    }
    match solver {
        GnSolver::NormalEquations => normal_equations(frame, samples, b),
        GnSolver::Iterative { tol, max_iter } => {
            let atb = frame.frame_adjoint(samples, b)?;
            let g0 = atb.norm();
            let zero = frame.zero_coords();
            if g0 == 0.0 {
                return Ok(GnSolution { coords: zero, iterations: 0, relative_normal_residual: 0.0, damped: false, regularized: false });
            }
            let first = cgls(frame, samples, b, zero, 0.0, tol, max_iter)?;
            let rel = normal_residual(frame, samples, b, &first.x)? / g0;
            if rel <= NONCONVERGENCE_THRESHOLD.max(tol) {
                return Ok(GnSolution {
                    coords: first.x,
                    iterations: first.iterations,
                    relative_normal_residual: rel,
                    damped: false,
                    regularized: false,
                });
            }
            log::debug!("CGLS unconverged (relative normal residual {rel:.3e}); continuing with damping");
            let lambda = DAMPING_FACTOR * first.max_rayleigh.max(f64::MIN_POSITIVE);
            let second = cgls(frame, samples, b, first.x.clone(), lambda, tol, max_iter)?;
            let rel2 = normal_residual(frame, samples, b, &second.x)? / g0;
            let (x, r) = if rel2 < rel { (second.x, rel2) } else { (first.x, rel) };
            Ok(GnSolution {
                coords: x,
                iterations: first.iterations + second.iterations,
                relative_normal_residual: r,
                damped: true,
                regularized: false,
            })
        }
    }
}

fn normal_residual(frame: &EmbeddedFrame, samples: &SampleSet, b: &[f64], p: &FrameCoords) -> Result<f64> {
    let jp = jac(frame, samples, p)?;
    let r: Vec<f64> = b.iter().zip(&jp).map(|(bi, ji)| bi - ji).collect();
    Ok(frame.frame_adjoint(samples, &r)?.norm())
}

struct Cgls {
    x: FrameCoords,
    iterations: usize,
    max_rayleigh: f64,
}

/// CGLS for `min ||J p - b||² + λ ||p||²`, started from `x0`.
fn cgls(frame: &EmbeddedFrame, samples: &SampleSet, b: &[f64], x0: FrameCoords, lambda: f64, tol: f64, max_iter: usize) -> Result<Cgls> {
    let mut x = x0;
    let jx = jac(frame, samples, &x)?;
    let mut r: Vec<f64> = b.iter().zip(&jx).map(|(bi, ji)| bi - ji).collect();
    let mut s = frame.frame_adjoint(samples, &r)?;
    s.axpy(-lambda, &x);
    let mut p = s.clone();
    let mut gamma = s.dot(&s);
    let stop = tol * tol * frame.frame_adjoint(samples, b)?.dot_self();
    let mut max_rayleigh = 0.0_f64;
    let mut it = 0;
    while it < max_iter && gamma > stop {
        let q = jac(frame, samples, &p)?;
        let pp = p.dot(&p);
        let qq = norm2(&q);
        if pp > 0.0 {
            max_rayleigh = max_rayleigh.max(qq / pp);
        }
        let delta = qq + lambda * pp;
        if !(delta > 0.0) {
            break;
        }
        let alpha = gamma / delta;
        x.axpy(alpha, &p);
        r.iter_mut().zip(&q).for_each(|(ri, qi)| *ri -= alpha * qi);
        s = frame.frame_adjoint(samples, &r)?;
        s.axpy(-lambda, &x);
        let gnew = s.dot(&s);
        p.scale(gnew / gamma);
        p.axpy(1.0, &s);
        gamma = gnew;
        it += 1;
    }
    Ok(Cgls { x, iterations: it, max_rayleigh })
}

trait DotSelf {
    fn dot_self(&self) -> f64;
}

impl DotSelf for FrameCoords {
    fn dot_self(&self) -> f64 {
        self.dot(self)
    }
}

/// Dense Jacobian in frame coordinates, one column per coordinate.
fn dense_jacobian(frame: &EmbeddedFrame, samples: &SampleSet) -> Result<Mat> {
    let zero = frame.zero_coords();
    let dim = zero.len();
    let mut j = Mat::zeros(samples.len(), dim);
    let mut e = vec![0.0; dim];
    for c in 0..dim {
        e[c] = 1.0;
        let col = jac(frame, samples, &zero.with_values(&e))?;
        e[c] = 0.0;
        j.set_column(c, &DVector::from_vec(col));
    }
    Ok(j)
}

fn normal_equations(frame: &EmbeddedFrame, samples: &SampleSet, b: &[f64]) -> Result<GnSolution> {
    let j = dense_jacobian(frame, samples)?;
    let bv = DVector::from_column_slice(b);
    let jtb = j.transpose() * &bv;
    let g0 = jtb.norm();
    let jtj = j.transpose() * &j;
    let (chol, regularized) =
        linalg::cholesky_regularized(&jtj).ok_or_else(|| Error::LinearSolve("normal equations are not positive definite".into()))?;
    let p = chol.solve(&jtb);
    let rel = if g0 > 0.0 { (&jtb - &jtj * &p).norm() / g0 } else { 0.0 };
    Ok(GnSolution {
        coords: frame.zero_coords().with_values(p.as_slice()),
        iterations: 0,
        relative_normal_residual: rel,
        damped: false,
        regularized,
    })
}

/// The tangent vector with frame coordinates `p`, written as a core direction
/// at the frame's base representative.
pub fn gn_to_core_direction(frame: &EmbeddedFrame, p: &FrameCoords) -> Result<CoreDirection> {
    CoreDirection::from_blocks(frame.base(), frame.frame_apply(p).into_deltas())
}

/// Map frame coordinates to a new point along the chosen geometry.
fn gn_update(frame: &EmbeddedFrame, p: &FrameCoords, geometry: Geometry, alpha: f64, cfg: &SolverConfig) -> Result<(TTTensor, bool)> {
    match geometry {
        Geometry::Embedded => Ok((frame.retract(&frame.frame_apply(p), alpha)?, false)),
        Geometry::Quotient => {
            let xi = gn_to_core_direction(frame, p)?;
            let cache = GramCache::new(frame.base());
            let (h, rep) = quotient::project_horizontal_with(frame.base(), &cache, &xi, cfg.horizontal_solver)?;
            Ok((quotient::retract_total(frame.base(), &h, alpha)?, rep.regularized))
        }
    }
}

/// Riemannian Gauss–Newton. The gradient norm recorded in the trace is the
/// Euclidean norm of the tangent-space projection of `P_Ω^T r` for both
/// geometries.
pub fn rgn(x0: &TTTensor, samples: &SampleSet, cfg: &SolverConfig, geometry: Geometry, truth: Option<&TTTensor>) -> Result<SolveOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let data_norm = samples.norm();
    let name = match geometry {
        Geometry::Quotient => "RGN(Q)",
        Geometry::Embedded => "RGN(E)",
    };
    let mut trace = SolverTrace::new(name);
    let rule = cfg.rule();
    let mut frame = EmbeddedFrame::new(x0)?;
    let mut res = residual(frame.base(), samples)?;
    let status = loop {
        let grad = frame.frame_adjoint(samples, &res)?;
        let (objective, rel_residual) = residual_stats(&res, data_norm);
        let rel_error = truth.map(|t| frame.base().relative_error(t)).transpose()?;
        trace.records.push(IterRecord {
            iter: trace.len(),
            objective,
            grad_norm: grad.norm(),
            rel_residual,
            rel_error,
            seconds: start.elapsed().as_secs_f64(),
            ..IterRecord::default()
        });
        if let Some(reason) = stopping(&trace.records, &rule) {
            break reason;
        }
        let rhs: Vec<f64> = res.iter().map(|v| -v).collect();
        let sol = gn_least_squares(&frame, samples, &rhs, cfg.gn_solver)?;
        let mut events = IterEvents { damped: sol.damped, regularized: sol.regularized, ..IterEvents::default() };
        let mut alpha = 1.0;
        let mut next = None;
        for k in 0..=cfg.max_backtracks {
            if let Ok((xn, reg)) = gn_update(&frame, &sol.coords, geometry, alpha, cfg) {
                events.regularized |= reg;
                next = Some(xn);
                break;
            }
            if k < cfg.max_backtracks {
                alpha *= cfg.armijo_beta;
                events.backtracks += 1;
            }
        }
        let Some(mut xn) = next else {
            break StopReason::Breakdown("retraction left the manifold".into());
        };
        if cfg.gn_guard && residual_stats(&residual(&xn, samples)?, data_norm).0 >= objective {
            if let Ok((xh, _)) = gn_update(&frame, &sol.coords, geometry, 0.5 * alpha, cfg) {
                alpha *= 0.5;
                xn = xh;
                events.guard_active = true;
            }
        }
        let last = trace.records.last_mut().expect("record pushed above");
        last.step = Some(alpha);
        last.events = events;
        match EmbeddedFrame::new(&xn) {
            Ok(f) => {
                frame = f;
                res = residual(frame.base(), samples)?;
            }
            Err(e) => break StopReason::Breakdown(e.to_string()),
        }
    };
    Ok(SolveOutput { x: frame.base().clone(), trace, status })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tt::Core;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_tt(rng: &mut ChaCha8Rng, dims: &[usize], ranks: &[usize]) -> TTTensor {
        let cores = (0..dims.len()).map(|j| Core::from_fn(ranks[j], dims[j], ranks[j + 1], |_, _, _| StandardNormal.sample(rng))).collect();
        TTTensor::new(cores).unwrap()
    }

    fn random_samples(rng: &mut ChaCha8Rng, t: &TTTensor, m: usize) -> SampleSet {
        let total: usize = t.dims().iter().product();
        let mut lin: Vec<usize> = rand::seq::index::sample(rng, total, m).into_vec();
        lin.sort_unstable();
        let d = t.order();
        let mut flat = Vec::with_capacity(m * d);
        let mut idx = vec![0; d];
        for l in lin {
            crate::tt::multi_index(&t.dims(), l, &mut idx);
            flat.extend_from_slice(&idx);
        }
        SampleSet::from_tt(t, flat).unwrap()
    }

    #[test]
    fn cgls_matches_dense_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tt(&mut rng, &[5, 6, 5], &[1, 2, 2, 1]);
        let x = random_tt(&mut rng, &[5, 6, 5], &[1, 2, 2, 1]);
        let s = random_samples(&mut rng, &t, 110);
        let frame = EmbeddedFrame::new(&x).unwrap();
        let b: Vec<f64> = residual(frame.base(), &s).unwrap().iter().map(|v| -v).collect();
        let it = gn_least_squares(&frame, &s, &b, GnSolver::default()).unwrap();
        let ne = gn_least_squares(&frame, &s, &b, GnSolver::NormalEquations).unwrap();
        let mut diff = it.coords.clone();
        diff.axpy(-1.0, &ne.coords);
        assert!(diff.norm() <= 1e-8 * ne.coords.norm(), "{} vs {}", diff.norm(), ne.coords.norm());
        assert!(it.relative_normal_residual < 1e-8);
        assert!(ne.relative_normal_residual < 1e-8);
    }

    #[test]
    fn gn_recovers_low_rank_tensor_quickly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = [6, 6, 6];
        let ranks = [1, 2, 2, 1];
        let t = random_tt(&mut rng, &dims, &ranks);
        let s = random_samples(&mut rng, &t, 120);
        let mut x0 = t.clone();
        let pert = random_tt(&mut rng, &dims, &ranks).scaled(1e-2 * t.norm());
        x0 = x0.add(&pert.scaled(1.0 / pert.norm())).unwrap();
        x0 = x0.round(&ranks, 0.0).unwrap();
        for geom in [Geometry::Quotient, Geometry::Embedded] {
            let cfg = SolverConfig { max_iters: 20, tol_residual: 1e-12, ..SolverConfig::default() };
            let out = rgn(&x0, &s, &cfg, geom, Some(&t)).unwrap();
            let last = out.trace.last().unwrap();
            assert!(last.rel_residual < 1e-12, "{geom:?}: {}", last.rel_residual);
            assert!(out.trace.iterations() <= 10, "{geom:?}: {}", out.trace.iterations());
            assert!(last.rel_error.unwrap() < 1e-9);
        }
    }
}
