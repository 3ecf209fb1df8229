//! Quotient geometry of fixed-rank tensor trains under the preconditioned
//! metric.
//!
//! Points of the total space are tuples of full-rank cores; two tuples are
//! equivalent when they differ by invertible gauge matrices on the bonds.
//! Tangent vectors are tuples of core-shaped arrays ([`CoreDirection`]). The
//! metric weights core `j` by the left Gram matrix of cores `0..j` and the right
//! Gram matrix of cores `j+1..d`, which makes it invariant under the gauge
//! action and turns the horizontal space into the kernel of a small
//! block-tridiagonal SPD system on the bond matrices.
//!
//! Bond matrices are indexed by the bond: entry `b - 1` of a slice of bond
//! matrices belongs to bond `b` (between cores `b - 1` and `b`), `1 <= b < d`,
//! and has size `r_b x r_b`.

use nalgebra::{Cholesky, DVector, Dyn};

use crate::completion::{frame_contraction, SampleSet};
use crate::linalg::{self, Mat};
use crate::tt::{left_contract, right_contract, Core, GramCache, TTTensor};
use crate::{Error, Result};

/// A tangent vector of the total space: one array per core.
#[derive(Clone, Debug, PartialEq)]
pub struct CoreDirection {
    blocks: Vec<Core>,
}

impl CoreDirection {
    pub fn zeros_like(x: &TTTensor) -> Self {
        let blocks = x.cores().iter().map(|c| Core::zeros(c.left_rank(), c.mode_size(), c.right_rank())).collect();
        CoreDirection { blocks }
    }

    /// Wrap blocks, checking them against the shapes of `x`.
    pub fn from_blocks(x: &TTTensor, blocks: Vec<Core>) -> Result<Self> {
        if blocks.len() != x.order() || blocks.iter().zip(x.cores()).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Shape("direction blocks do not match the base point".into()));
        }
        Ok(CoreDirection { blocks })
    }

    pub fn blocks(&self) -> &[Core] {
        &self.blocks
    }
    pub fn blocks_mut(&mut self) -> &mut [Core] {
        &mut self.blocks
    }
    pub fn into_blocks(self) -> Vec<Core> {
        self.blocks
    }

    /// Euclidean inner product of the stacked blocks.
    pub fn dot(&self, other: &CoreDirection) -> f64 {
        self.blocks.iter().zip(&other.blocks).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, alpha: f64) {
        self.blocks.iter_mut().for_each(|b| b.scale(alpha));
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &CoreDirection) {
        self.blocks.iter_mut().zip(&other.blocks).for_each(|(a, b)| a.axpy(alpha, b));
    }

    pub fn sub(&self, other: &CoreDirection) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }
}

/// Invertible bond matrices acting on a tensor train by `X_j(i) ↦ A_j^{-1} X_j(i) A_{j+1}`.
#[derive(Clone, Debug)]
pub struct GaugeElement {
    mats: Vec<Mat>,
}

impl GaugeElement {
    pub fn new(mats: Vec<Mat>) -> Self {
        GaugeElement { mats }
    }

    pub fn identity(x: &TTTensor) -> Self {
        let r = x.ranks();
        GaugeElement { mats: (1..x.order()).map(|b| Mat::identity(r[b], r[b])).collect() }
    }

    pub fn mats(&self) -> &[Mat] {
        &self.mats
    }
}

/// Apply a gauge element. The represented tensor does not change.
pub fn gauge_act(x: &TTTensor, g: &GaugeElement) -> Result<TTTensor> {
    check_bonds(x, g.mats())?;
    TTTensor::new(act_on_cores(x.cores(), g)?)
}

/// The same linear action on a direction at `x`: a horizontal lift at `x`
/// is carried to the horizontal lift at `gauge_act(x, g)`.
pub fn gauge_act_dir(x: &TTTensor, xi: &CoreDirection, g: &GaugeElement) -> Result<CoreDirection> {
    check_bonds(x, g.mats())?;
    Ok(CoreDirection { blocks: act_on_cores(&xi.blocks, g)? })
}

fn act_on_cores(cores: &[Core], g: &GaugeElement) -> Result<Vec<Core>> {
    let d = cores.len();
    let mut inv = Vec::with_capacity(d - 1);
    for (b, a) in g.mats.iter().enumerate() {
        inv.push(a.clone().try_inverse().ok_or_else(|| Error::LinearSolve(format!("gauge matrix on bond {} is singular", b + 1)))?);
    }
    Ok(cores
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let mut c = c.clone();
            if j > 0 {
                c = c.mul_left(&inv[j - 1]);
            }
            if j + 1 < d {
                c = c.mul_right(&g.mats[j].transpose());
            }
            c
        })
        .collect())
}

fn check_bonds(x: &TTTensor, mats: &[Mat]) -> Result<()> {
    let r = x.ranks();
    let d = x.order();
    if mats.len() != d.saturating_sub(1) {
        return Err(Error::Shape(format!("expected {} bond matrices, got {}", d - 1, mats.len())));
    }
    for (k, m) in mats.iter().enumerate() {
        if m.shape() != (r[k + 1], r[k + 1]) {
            return Err(Error::Shape(format!("bond {} matrix has shape {:?}, expected {}x{}", k + 1, m.shape(), r[k + 1], r[k + 1])));
        }
    }
    Ok(())
}

/// Vertical vector generated by bond matrices `D`:
/// block `j` is `X_j(i) D_{j+1} - D_j X_j(i)` (with `D_0 = D_d = 0`).
pub fn vertical_vector(x: &TTTensor, bonds: &[Mat]) -> Result<CoreDirection> {
    check_bonds(x, bonds)?;
    let d = x.order();
    let blocks = (0..d)
        .map(|j| {
            let c = x.core(j);
            let mut out = Core::zeros(c.left_rank(), c.mode_size(), c.right_rank());
            if j + 1 < d {
                out.axpy(1.0, &c.mul_right(&bonds[j].transpose()));
            }
            if j > 0 {
                out.axpy(-1.0, &c.mul_left(&bonds[j - 1]));
            }
            out
        })
        .collect();
    Ok(CoreDirection { blocks })
}

/// The preconditioned metric `Σ_j <ξ_j ×1 L_j ×3 R_{j+1}, η_j>`.
pub fn metric(cache: &GramCache, xi: &CoreDirection, eta: &CoreDirection) -> f64 {
    xi.blocks.iter().zip(&eta.blocks).enumerate().map(|(j, (a, b))| a.mul_left(cache.left(j)).mul_right(cache.right(j + 1)).dot(b)).sum()
}

/// Norm induced by [`metric`].
pub fn metric_norm(cache: &GramCache, xi: &CoreDirection) -> f64 {
    metric(cache, xi, xi).max(0.0).sqrt()
}

/// `h_b(ξ)`: the gradient of `D ↦ ḡ(ξ, V(D))` with respect to bond matrix `b`.
/// A direction is horizontal exactly when every `h_b` vanishes.
pub fn horizontal_residual(x: &TTTensor, cache: &GramCache, xi: &CoreDirection) -> Vec<Mat> {
    let d = x.order();
    (1..d)
        .map(|b| {
            let j = b - 1;
            let left = left_contract(x.core(j), &xi.blocks[j].mul_left(cache.left(j))) * cache.right(b);
            let right = cache.left(b) * right_contract(&xi.blocks[b].mul_right(cache.right(b + 1)), x.core(b));
            left - right
        })
        .collect()
}

/// Matrix-free application of the horizontal-space operator `M(D) = ½ h(V(D))`.
pub fn apply_system(x: &TTTensor, cache: &GramCache, bonds: &[Mat]) -> Result<Vec<Mat>> {
    let v = vertical_vector(x, bonds)?;
    Ok(horizontal_residual(x, cache, &v).into_iter().map(|m| m * 0.5).collect())
}

/// Which linear solver to use for the horizontal system.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HorizontalSolver {
    /// Block-tridiagonal Cholesky on the assembled system.
    Cholesky,
    /// Matrix-free conjugate gradients; stops at `tol * ||b||` or `max_iter`
    /// (`0` means `50 d`).
    Cg { tol: f64, max_iter: usize },
}

impl Default for HorizontalSolver {
    fn default() -> Self {
        HorizontalSolver::Cholesky
    }
}

/// Diagnostics of one horizontal projection.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProjectionReport {
    /// A Tikhonov shift was needed to factor the system.
    pub regularized: bool,
    /// Conjugate-gradient iterations (zero for the direct solver).
    pub iterations: usize,
    /// Final relative residual of the linear solve.
    pub relative_residual: f64,
}

/// The assembled block-tridiagonal horizontal system.
///
/// Unknowns are the column-major vectorised bond matrices. `diag[b]` couples
/// bond `b+1` with itself, `upper[b]` couples bond `b+1` (rows) with bond
/// `b+2` (columns); the lower blocks are the transposes.
#[derive(Clone, Debug)]
pub struct HorizontalSystem {
    diag: Vec<Mat>,
    upper: Vec<Mat>,
    sizes: Vec<usize>,
}

impl HorizontalSystem {
    /// Assemble the blocks from Kronecker products of Gram matrices and slices.
    pub fn assemble(x: &TTTensor, cache: &GramCache) -> Self {
        let d = x.order();
        let ranks = x.ranks();
        let sizes: Vec<usize> = (1..d).map(|b| ranks[b]).collect();
        let diag = (1..d).map(|b| linalg::kron(cache.right(b), cache.left(b))).collect();
        let upper = (1..d.saturating_sub(1))
            .map(|b| {
                let core = x.core(b);
                let (l, n, r) = core.shape();
                let mut acc = Mat::zeros(l * l, r * r);
                for i in 0..n {
                    let s = core.slice(i);
                    acc += linalg::kron(&(&s * cache.right(b + 1)), &(cache.left(b) * &s));
                }
                acc * -0.5
            })
            .collect();
        HorizontalSystem { diag, upper, sizes }
    }

    pub fn num_bonds(&self) -> usize {
        self.diag.len()
    }

    pub fn diag_block(&self, b: usize) -> &Mat {
        &self.diag[b]
    }

    pub fn upper_block(&self, b: usize) -> &Mat {
        &self.upper[b]
    }

    /// Dense matrix of the whole system (for testing and diagnostics).
    pub fn to_dense(&self) -> Mat {
        let sq: Vec<usize> = self.sizes.iter().map(|r| r * r).collect();
        let n: usize = sq.iter().sum();
        let mut m = Mat::zeros(n, n);
        let mut off = 0;
        for b in 0..self.diag.len() {
            m.view_mut((off, off), (sq[b], sq[b])).copy_from(&self.diag[b]);
            if b < self.upper.len() {
                m.view_mut((off, off + sq[b]), (sq[b], sq[b + 1])).copy_from(&self.upper[b]);
                m.view_mut((off + sq[b], off), (sq[b + 1], sq[b])).copy_from(&self.upper[b].transpose());
            }
            off += sq[b];
        }
        m
    }

    /// Solve `M D = rhs` by block-tridiagonal Cholesky. If a pivot block is
    /// not numerically positive definite, the whole system is shifted by
    /// `1e-14 * trace / n` (growing tenfold) and refactored.
    pub fn solve(&self, rhs: &[Mat]) -> Result<(Vec<Mat>, bool)> {
        let nb = self.diag.len();
        if nb == 0 {
            return Ok((Vec::new(), false));
        }
        let total: usize = self.sizes.iter().map(|r| r * r).sum();
        let trace: f64 = self.diag.iter().map(|m| m.trace()).sum();
        let base = (trace.abs() / total as f64).max(f64::MIN_POSITIVE);
        let mut shift = 0.0;
        for attempt in 0..17 {
            if let Some(sol) = self.try_solve(rhs, shift) {
                if attempt > 0 {
                    log::warn!("horizontal system regularised with shift {shift:.3e}");
                }
                return Ok((sol, attempt > 0));
            }
            shift = if shift == 0.0 { 1e-14 * base } else { shift * 10.0 };
        }
        Err(Error::LinearSolve(format!("horizontal system is not positive definite (trace {trace:.3e})")))
    }

    fn try_solve(&self, rhs: &[Mat], shift: f64) -> Option<Vec<Mat>> {
        let nb = self.diag.len();
        let mut chol: Vec<Cholesky<f64, Dyn>> = Vec::with_capacity(nb);
        // C_b = (L_b^{-1} U_b)^T is the sub-diagonal block of the factor.
        let mut coupling: Vec<Mat> = Vec::with_capacity(nb.saturating_sub(1));
        for b in 0..nb {
            let mut a = self.diag[b].clone();
            for i in 0..a.nrows() {
                a[(i, i)] += shift;
            }
            if b > 0 {
                let c: &Mat = &coupling[b - 1];
                a -= c * c.transpose();
            }
            let a = (&a + a.transpose()) * 0.5;
            let c = Cholesky::new(a)?;
            if b + 1 < nb {
                let l = c.l();
                let w = l.solve_lower_triangular(&self.upper[b])?;
                coupling.push(w.transpose());
            }
            chol.push(c);
        }
        let mut y: Vec<DVector<f64>> = Vec::with_capacity(nb);
        for b in 0..nb {
            let mut v = linalg::vec(&rhs[b]);
            if b > 0 {
                v -= &coupling[b - 1] * &y[b - 1];
            }
            y.push(chol[b].l().solve_lower_triangular(&v)?);
        }
        let mut xs: Vec<DVector<f64>> = vec![DVector::zeros(0); nb];
        for b in (0..nb).rev() {
            let mut v = y[b].clone();
            if b + 1 < nb {
                v -= coupling[b].transpose() * &xs[b + 1];
            }
            xs[b] = chol[b].l().tr_solve_lower_triangular(&v)?;
        }
        Some(xs.iter().zip(&self.sizes).map(|(v, &r)| linalg::unvec(v.as_slice(), r, r)).collect())
    }
}

/// Right-hand side `½ h(ξ)` of the horizontal system.
pub fn system_rhs(x: &TTTensor, cache: &GramCache, xi: &CoreDirection) -> Vec<Mat> {
    horizontal_residual(x, cache, xi).into_iter().map(|m| m * 0.5).collect()
}

fn cg_solve(x: &TTTensor, cache: &GramCache, rhs: &[Mat], tol: f64, max_iter: usize) -> Result<(Vec<Mat>, usize, f64)> {
    let dot = |a: &[Mat], b: &[Mat]| a.iter().zip(b).map(|(u, v)| linalg::frob_dot(u, v)).sum::<f64>();
    let bnorm = dot(rhs, rhs).sqrt();
    let mut sol: Vec<Mat> = rhs.iter().map(|m| Mat::zeros(m.nrows(), m.ncols())).collect();
    if bnorm == 0.0 {
        return Ok((sol, 0, 0.0));
    }
    let mut r: Vec<Mat> = rhs.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    for it in 0..max_iter {
        if rr.sqrt() <= tol * bnorm {
            return Ok((sol, it, rr.sqrt() / bnorm));
        }
        let ap = apply_system(x, cache, &p)?;
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::LinearSolve("horizontal operator is not positive definite".into()));
        }
        let alpha = rr / pap;
        for k in 0..sol.len() {
            sol[k] += &p[k] * alpha;
            r[k] -= &ap[k] * alpha;
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for k in 0..p.len() {
            p[k] = &r[k] + &p[k] * beta;
        }
        rr = rr_new;
    }
    let rel = rr.sqrt() / bnorm;
    if rel > tol {
        log::warn!("horizontal CG stopped after {max_iter} iterations at relative residual {rel:.3e}");
    }
    Ok((sol, max_iter, rel))
}

/// Horizontal projection `P^H ξ = ξ - V(D)` with the bond matrices `D`
/// solving the horizontal system.
pub fn project_horizontal_with(
    x: &TTTensor,
    cache: &GramCache,
    xi: &CoreDirection,
    solver: HorizontalSolver,
) -> Result<(CoreDirection, ProjectionReport)> {
    let d = x.order();
    if d < 2 {
        return Ok((xi.clone(), ProjectionReport::default()));
    }
    let rhs = system_rhs(x, cache, xi);
    let (bonds, report) = match solver {
        HorizontalSolver::Cholesky => {
            let sys = HorizontalSystem::assemble(x, cache);
            let (sol, regularized) = sys.solve(&rhs)?;
            (sol, ProjectionReport { regularized, iterations: 0, relative_residual: 0.0 })
        }
        HorizontalSolver::Cg { tol, max_iter } => {
            let cap = if max_iter == 0 { 50 * d } else { max_iter };
            let (sol, iterations, relative_residual) = cg_solve(x, cache, &rhs, tol, cap)?;
            (sol, ProjectionReport { regularized: false, iterations, relative_residual })
        }
    };
    let v = vertical_vector(x, &bonds)?;
    Ok((xi.sub(&v), report))
}

/// Horizontal projection with the default (direct) solver.
pub fn project_horizontal(x: &TTTensor, cache: &GramCache, xi: &CoreDirection) -> Result<CoreDirection> {
    Ok(project_horizontal_with(x, cache, xi, HorizontalSolver::Cholesky)?.0)
}

/// Vertical part `ξ - P^H ξ`.
pub fn project_vertical(x: &TTTensor, cache: &GramCache, xi: &CoreDirection) -> Result<CoreDirection> {
    Ok(xi.sub(&project_horizontal(x, cache, xi)?))
}

/// Riemannian gradient of `½ ||P_Ω X - P_Ω T||²` under the preconditioned
/// metric, given the sparse residual. The result is horizontal.
pub fn riemannian_gradient(x: &TTTensor, cache: &GramCache, samples: &SampleSet, residual: &[f64]) -> Result<CoreDirection> {
    let g = frame_contraction(x, samples, residual)?;
    precondition(x, cache, g)
}

/// Apply the inverse of the metric weights: `G_j ×1 L_j^{-1} ×3 R_{j+1}^{-1}`.
pub fn precondition(x: &TTTensor, cache: &GramCache, g: Vec<Core>) -> Result<CoreDirection> {
    let d = x.order();
    let factor = |m: &Mat, what: &str, j: usize| -> Result<Cholesky<f64, Dyn>> {
        let (c, _) =
            linalg::cholesky_regularized(m).ok_or_else(|| Error::LinearSolve(format!("{what} Gram matrix at position {j} is singular")))?;
        let cond = linalg::cholesky_condition_estimate(&c);
        if cond > 1e12 {
            log::warn!("{what} Gram matrix at position {j} is ill-conditioned (estimate {cond:.3e})");
        }
        Ok(c)
    };
    let mut blocks = Vec::with_capacity(d);
    for (j, gj) in g.into_iter().enumerate() {
        let (l, n, r) = gj.shape();
        let lc = factor(cache.left(j), "left", j)?;
        let rc = factor(cache.right(j + 1), "right", j + 1)?;
        let tmp = Core::from_right_unfolding(&lc.solve(&gj.right_unfolding()), n, r)?;
        let out = rc.solve(&tmp.left_unfolding().transpose()).transpose();
        blocks.push(Core::from_left_unfolding(&out, l, n)?);
    }
    Ok(CoreDirection { blocks })
}

/// Retraction on the total space: `X + α ξ` core by core. Fails if the new
/// cores lose rank.
pub fn retract_total(x: &TTTensor, xi: &CoreDirection, alpha: f64) -> Result<TTTensor> {
    let cores = x
        .cores()
        .iter()
        .zip(&xi.blocks)
        .map(|(c, e)| {
            let mut c = c.clone();
            c.axpy(alpha, e);
            c
        })
        .collect();
    let y = TTTensor::new(cores)?;
    check_full_rank(&y)?;
    Ok(y)
}

/// Verify that every left and right unfolding of the cores has full column
/// (resp. row) rank, which is what membership in the total space requires.
pub fn check_full_rank(x: &TTTensor) -> Result<()> {
    if x.cores().iter().any(|c| c.as_slice().iter().any(|v| !v.is_finite())) {
        return Err(Error::LinearSolve("non-finite core entries".into()));
    }
    x.left_orthogonalize().map(|_| ())
}

/// Vector transport of a direction from a previous point: the horizontal
/// projection at the new point.
pub fn transport(x_new: &TTTensor, cache_new: &GramCache, xi: &CoreDirection) -> Result<CoreDirection> {
    project_horizontal(x_new, cache_new, xi)
}

/// Riemannian Barzilai–Borwein step `ḡ(s,s) / |ḡ(s,y)|`, clamped to
/// `[min, max]`. When `|ḡ(s,y)|` underflows the previous step is reused.
/// Returns the step and whether a safeguard was active.
pub fn rbb_step(cache: &GramCache, s: &CoreDirection, y: &CoreDirection, previous: f64, min: f64, max: f64) -> (f64, bool) {
    rbb_from_products(metric(cache, s, s), metric(cache, s, y), previous, min, max)
}

/// [`rbb_step`] from precomputed inner products `<s,s>` and `<s,y>`.
pub fn rbb_from_products(ss: f64, sy: f64, previous: f64, min: f64, max: f64) -> (f64, bool) {
    if sy.abs() < 1e-300 || !ss.is_finite() || !sy.is_finite() {
        return (previous.clamp(min, max), true);
    }
    let raw = ss / sy.abs();
    if raw > max {
        (max, true)
    } else if raw < min {
        (min, true)
    } else {
        (raw, false)
    }
}
