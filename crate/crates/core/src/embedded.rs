//! Embedded-submanifold geometry of fixed-rank tensor trains with the
//! Euclidean metric of the ambient space.
//!
//! Tangent vectors at a left-orthogonal point are stored as one variation
//! core per position, `ξ = Σ_j X_0 ⋯ δ_j ⋯ X_{d-1}`, with the gauge condition
//! `L(X_j)^T L(δ_j) = 0` for every `j < d-1`. Under this gauge the terms are
//! mutually orthogonal, which gives cheap inner products and a closed-form
//! projection.
//!
//! [`EmbeddedFrame`] also exposes an orthonormal parametrisation of the
//! tangent space, `p ↦ 𝒜(p)`, whose coordinates are small matrices `D_j`:
//! `L(δ_j) = L⊥_j D_j S_{j+1}^{-T}` for `j < d-1` and `δ_{d-1} = D_{d-1}`,
//! where `L⊥_j` completes `L(X_j)` to an orthonormal basis and `S_{j+1}` is the
//! triangular factor of the right Gram matrix.

use crate::completion::{frame_contraction, SampleSet};
use crate::linalg::{self, Mat};
use crate::tt::{left_contract, right_contract, Core, GramCache, SChain, TTTensor};
use crate::{Error, Result};

/// A tangent vector at a left-orthogonal point, stored as gauged variation cores.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedTangent {
    deltas: Vec<Core>,
}

impl EmbeddedTangent {
    pub fn deltas(&self) -> &[Core] {
        &self.deltas
    }
    pub fn into_deltas(self) -> Vec<Core> {
        self.deltas
    }
    pub fn scaled(&self, alpha: f64) -> Self {
        EmbeddedTangent { deltas: self.deltas.iter().map(|c| c.scaled(alpha)).collect() }
    }
    pub fn axpy(&mut self, alpha: f64, other: &EmbeddedTangent) {
        self.deltas.iter_mut().zip(&other.deltas).for_each(|(a, b)| a.axpy(alpha, b));
    }
}

/// Coordinates of a tangent vector in the orthonormal frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameCoords {
    blocks: Vec<Mat>,
}

impl FrameCoords {
    pub fn blocks(&self) -> &[Mat] {
        &self.blocks
    }
    pub fn dot(&self, other: &FrameCoords) -> f64 {
        self.blocks.iter().zip(&other.blocks).map(|(a, b)| linalg::frob_dot(a, b)).sum()
    }
    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
    pub fn axpy(&mut self, alpha: f64, other: &FrameCoords) {
        self.blocks.iter_mut().zip(&other.blocks).for_each(|(a, b)| *a += b * alpha);
    }
    pub fn scale(&mut self, alpha: f64) {
        self.blocks.iter_mut().for_each(|a| *a *= alpha);
    }
    pub fn zeros_like(&self) -> Self {
        FrameCoords { blocks: self.blocks.iter().map(|m| Mat::zeros(m.nrows(), m.ncols())).collect() }
    }
    /// Total number of coordinates (the manifold dimension).
    pub fn len(&self) -> usize {
        self.blocks.iter().map(|m| m.len()).sum()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn to_vec(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }
    /// Rebuild coordinates with the block shapes of `self`.
    pub fn with_values(&self, v: &[f64]) -> Self {
        let mut off = 0;
        let blocks = self
            .blocks
            .iter()
            .map(|m| {
                let b = Mat::from_column_slice(m.nrows(), m.ncols(), &v[off..off + m.len()]);
                off += m.len();
                b
            })
            .collect();
        FrameCoords { blocks }
    }
}

/// Everything needed to work in the tangent space at one point.
#[derive(Clone, Debug)]
pub struct EmbeddedFrame {
    base: TTTensor,
    grams: GramCache,
    chain: SChain,
    complements: Vec<Mat>,
}

impl EmbeddedFrame {
    /// Build the frame at `x`, left-orthogonalising first if necessary.
    pub fn new(x: &TTTensor) -> Result<Self> {
        let base = x.left_orthogonalize()?;
        let grams = GramCache::new(&base);
        let chain = SChain::new(&base)?;
        let d = base.order();
        for j in 1..d {
            let s = chain.s(j);
            let diag_min = (0..s.nrows()).map(|a| s[(a, a)]).fold(f64::INFINITY, f64::min);
            let diag_max = (0..s.nrows()).map(|a| s[(a, a)]).fold(0.0, f64::max);
            if !(diag_min > crate::tt::RANK_TOLERANCE * diag_max) {
                return Err(Error::RankDeficient { core: j, ratio: diag_min / diag_max });
            }
        }
        let complements = (0..d.saturating_sub(1)).map(|j| linalg::orth_complement(&base.core(j).left_unfolding())).collect();
        Ok(EmbeddedFrame { base, grams, chain, complements })
    }

    pub fn base(&self) -> &TTTensor {
        &self.base
    }
    pub fn grams(&self) -> &GramCache {
        &self.grams
    }
    pub fn chain(&self) -> &SChain {
        &self.chain
    }
    pub fn complement(&self, j: usize) -> &Mat {
        &self.complements[j]
    }

    /// Dimension of the manifold, `Σ_{j<d-1} (r_j n_j - r_{j+1}) r_{j+1} + r_{d-1} n_{d-1}`.
    pub fn dimension(&self) -> usize {
        let d = self.base.order();
        let mut dim: usize = self.complements.iter().zip(0..).map(|(c, j)| c.ncols() * self.base.core(j).right_rank()).sum();
        dim += self.base.core(d - 1).len();
        dim
    }

    /// `M S^{-1}` for the triangular factor at position `j`.
    fn right_solve_s(&self, m: &Mat, j: usize) -> Mat {
        let s = self.chain.s(j);
        // Y S = M  <=>  S^T Y^T = M^T
        s.transpose().solve_lower_triangular(&m.transpose()).expect("triangular factor checked at construction").transpose()
    }

    /// `M S^{-T}` for the triangular factor at position `j`.
    fn right_solve_st(&self, m: &Mat, j: usize) -> Mat {
        let s = self.chain.s(j);
        // Y S^T = M  <=>  S Y^T = M^T
        s.solve_upper_triangular(&m.transpose()).expect("triangular factor checked at construction").transpose()
    }

    /// Adjoint of the frame map applied to core-wise contractions `G_j`
    /// (as produced by [`frame_contraction`]).
    pub fn frame_adjoint_from_contractions(&self, g: &[Core]) -> FrameCoords {
        let d = self.base.order();
        let blocks = (0..d)
            .map(|j| {
                if j + 1 == d {
                    g[j].left_unfolding()
                } else {
                    self.right_solve_s(&(self.complements[j].transpose() * g[j].left_unfolding()), j + 1)
                }
            })
            .collect();
        FrameCoords { blocks }
    }

    /// `𝒜*(P_Ω^T z)`: adjoint of the frame map applied to a sparse tensor.
    pub fn frame_adjoint(&self, samples: &SampleSet, z: &[f64]) -> Result<FrameCoords> {
        let g = frame_contraction(&self.base, samples, z)?;
        Ok(self.frame_adjoint_from_contractions(&g))
    }

    /// `𝒜(p)`: the tangent vector with frame coordinates `p`.
    pub fn frame_apply(&self, p: &FrameCoords) -> EmbeddedTangent {
        let d = self.base.order();
        let deltas = (0..d)
            .map(|j| {
                let (l, n, _) = self.base.core(j).shape();
                let m = if j + 1 == d { p.blocks[j].clone() } else { self.right_solve_st(&(&self.complements[j] * &p.blocks[j]), j + 1) };
                Core::from_left_unfolding(&m, l, n).expect("frame block shapes")
            })
            .collect();
        EmbeddedTangent { deltas }
    }

    /// Frame coordinates of a tangent vector (inverse of [`Self::frame_apply`]).
    pub fn coordinates(&self, t: &EmbeddedTangent) -> FrameCoords {
        let d = self.base.order();
        let blocks = (0..d)
            .map(|j| {
                let l = t.deltas[j].left_unfolding();
                if j + 1 == d {
                    l
                } else {
                    self.complements[j].transpose() * l * self.chain.s(j + 1).transpose()
                }
            })
            .collect();
        FrameCoords { blocks }
    }

    /// Zero frame coordinates with the right block shapes.
    pub fn zero_coords(&self) -> FrameCoords {
        let d = self.base.order();
        let blocks = (0..d)
            .map(|j| {
                let c = self.base.core(j);
                if j + 1 == d {
                    Mat::zeros(c.left_rank() * c.mode_size(), 1)
                } else {
                    Mat::zeros(self.complements[j].ncols(), c.right_rank())
                }
            })
            .collect();
        FrameCoords { blocks }
    }

    /// Orthogonal projection onto the tangent space of core-wise contractions
    /// `G_j = (I ⊗ X^{<=j})^T Z_{<j+1>} X^{>=j+1}`.
    pub fn project_contractions(&self, g: Vec<Core>) -> EmbeddedTangent {
        let d = self.base.order();
        let deltas = g
            .into_iter()
            .enumerate()
            .map(|(j, gj)| {
                if j + 1 == d {
                    return gj;
                }
                let (l, n, _) = gj.shape();
                let u = self.base.core(j).left_view();
                let lg = gj.left_unfolding();
                let perp = &lg - u * (u.transpose() * &lg);
                let (c, _) = linalg::cholesky_regularized(self.grams.right(j + 1)).expect("right Gram matrix checked at construction");
                let m = c.solve(&perp.transpose()).transpose();
                Core::from_left_unfolding(&m, l, n).expect("shape preserved")
            })
            .collect();
        EmbeddedTangent { deltas }
    }

    /// Projection of a sparse tensor `P_Ω^T z` onto the tangent space.
    pub fn tangent_project(&self, samples: &SampleSet, z: &[f64]) -> Result<EmbeddedTangent> {
        Ok(self.project_contractions(frame_contraction(&self.base, samples, z)?))
    }

    /// Projection of a tensor given in TT format onto the tangent space.
    pub fn project_tt(&self, z: &TTTensor) -> Result<EmbeddedTangent> {
        Ok(self.project_contractions(tt_frame_contraction(&self.base, z)?))
    }

    /// Euclidean inner product of two tangent vectors at this point.
    pub fn inner(&self, a: &EmbeddedTangent, b: &EmbeddedTangent) -> f64 {
        a.deltas.iter().zip(&b.deltas).enumerate().map(|(j, (x, y))| x.dot(&y.mul_right(self.grams.right(j + 1)))).sum()
    }

    pub fn norm(&self, a: &EmbeddedTangent) -> f64 {
        self.inner(a, a).max(0.0).sqrt()
    }

    /// The tangent vector as a tensor train of doubled ranks.
    pub fn tangent_as_tt(&self, t: &EmbeddedTangent) -> TTTensor {
        structured_tt(&self.base, t, None)
    }

    /// Vector transport of a tangent vector at `from` into the tangent space
    /// at this point (projection of the ambient tensor).
    pub fn transport(&self, from: &EmbeddedFrame, t: &EmbeddedTangent) -> Result<EmbeddedTangent> {
        self.project_tt(&from.tangent_as_tt(t))
    }

    /// Metric projection retraction: TT-rounding of `X + α ξ` back to the
    /// ranks of `X`.
    pub fn retract(&self, t: &EmbeddedTangent, alpha: f64) -> Result<TTTensor> {
        let sum = structured_tt(&self.base, t, Some(alpha));
        sum.round(&self.base.ranks(), 0.0)
    }
}

/// Cores of `X + α ξ` (when `alpha` is given) or of `ξ` alone, using the block
/// structure `[X δ; 0 X]`.
fn structured_tt(x: &TTTensor, t: &EmbeddedTangent, alpha: Option<f64>) -> TTTensor {
    let d = x.order();
    let a = alpha.unwrap_or(1.0);
    if d == 1 {
        let mut c = t.deltas[0].scaled(a);
        if alpha.is_some() {
            c.axpy(1.0, x.core(0));
        }
        return TTTensor::new(vec![c]).expect("single core");
    }
    let cores = (0..d)
        .map(|j| {
            let xc = x.core(j);
            let dc = &t.deltas[j];
            let (l, n, r) = xc.shape();
            if j == 0 {
                Core::from_fn(1, n, 2 * r, |_, i, b| if b < r { xc.get(0, i, b) } else { a * dc.get(0, i, b - r) })
            } else if j + 1 == d {
                Core::from_fn(2 * l, n, 1, |p, i, _| {
                    if p < l {
                        let base = if alpha.is_some() { xc.get(p, i, 0) } else { 0.0 };
                        base + a * dc.get(p, i, 0)
                    } else {
                        xc.get(p - l, i, 0)
                    }
                })
            } else {
                Core::from_fn(2 * l, n, 2 * r, |p, i, b| match (p < l, b < r) {
                    (true, true) => xc.get(p, i, b),
                    (true, false) => a * dc.get(p, i, b - r),
                    (false, true) => 0.0,
                    (false, false) => xc.get(p - l, i, b - r),
                })
            }
        })
        .collect();
    TTTensor::new(cores).expect("block structure preserves rank compatibility")
}

/// `G_j = (I ⊗ Y^{<=j})^T Z_{<j+1>} Y^{>=j+1}` for a tensor `Z` in TT format.
pub fn tt_frame_contraction(y: &TTTensor, z: &TTTensor) -> Result<Vec<Core>> {
    if y.dims() != z.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", y.dims(), z.dims())));
    }
    let d = y.order();
    let mut psi = vec![Mat::from_element(1, 1, 1.0)];
    for j in 0..d - 1 {
        let next = left_contract(y.core(j), &z.core(j).mul_left(&psi[j]));
        psi.push(next);
    }
    let mut phi = vec![Mat::zeros(0, 0); d + 1];
    phi[d] = Mat::from_element(1, 1, 1.0);
    for j in (1..d).rev() {
        phi[j] = right_contract(&z.core(j).mul_right(&phi[j + 1].transpose()), y.core(j));
    }
    Ok((0..d).map(|j| z.core(j).mul_left(&psi[j]).mul_right(&phi[j + 1].transpose())).collect())
}

/// Riemannian gradient of the completion objective on the embedded manifold.
pub fn embedded_gradient(frame: &EmbeddedFrame, samples: &SampleSet, residual: &[f64]) -> Result<EmbeddedTangent> {
    frame.tangent_project(samples, residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tt::DenseTensor;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    }

    fn random_tt(dims: &[usize], ranks: &[usize], seed: u64) -> TTTensor {
        let mut s = seed;
        let cores = dims.iter().enumerate().map(|(k, &n)| Core::from_fn(ranks[k], n, ranks[k + 1], |_, _, _| lcg(&mut s))).collect();
        TTTensor::new(cores).unwrap()
    }

    fn random_coords(f: &EmbeddedFrame, seed: u64) -> FrameCoords {
        let mut s = seed;
        let z = f.zero_coords();
        let v: Vec<f64> = (0..z.len()).map(|_| lcg(&mut s)).collect();
        z.with_values(&v)
    }

    fn dense(t: &TTTensor) -> DenseTensor {
        t.full().unwrap()
    }

    fn dot(a: &DenseTensor, b: &DenseTensor) -> f64 {
        a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn frame_is_orthonormal_and_has_manifold_dimension() {
        let x = random_tt(&[4, 3, 4], &[1, 3, 2, 1], 3);
        let f = EmbeddedFrame::new(&x).unwrap();
        // 4*3 - 9 (core 0, r1=3) ... dimension formula
        let r = [1usize, 3, 2, 1];
        let n = [4usize, 3, 4];
        let want: usize = (0..3).map(|k| r[k] * n[k] * r[k + 1]).sum::<usize>() - (1..3).map(|k| r[k] * r[k]).sum::<usize>();
        assert_eq!(f.dimension(), want);
        let p = random_coords(&f, 5);
        let q = random_coords(&f, 7);
        let tp = dense(&f.tangent_as_tt(&f.frame_apply(&p)));
        let tq = dense(&f.tangent_as_tt(&f.frame_apply(&q)));
        assert!((dot(&tp, &tq) - p.dot(&q)).abs() < 1e-11);
        assert!((f.inner(&f.frame_apply(&p), &f.frame_apply(&q)) - p.dot(&q)).abs() < 1e-11);
        let back = f.coordinates(&f.frame_apply(&p));
        let mut diff = back.clone();
        diff.axpy(-1.0, &p);
        assert!(diff.norm() < 1e-11);
    }

    #[test]
    fn adjoint_matches_dense_pairing() {
        let dims = [3, 4, 3];
        let x = random_tt(&dims, &[1, 2, 2, 1], 11);
        let f = EmbeddedFrame::new(&x).unwrap();
        let idx: Vec<usize> = (0..36).filter(|k| k % 2 == 0).flat_map(|k| [k % 3, (k / 3) % 4, k / 12]).collect();
        let mut seed = 13;
        let z: Vec<f64> = (0..18).map(|_| lcg(&mut seed)).collect();
        let s = SampleSet::from_flat(dims.to_vec(), idx, z.clone()).unwrap();
        let adj = f.frame_adjoint(&s, &z).unwrap();
        let p = random_coords(&f, 17);
        let t = dense(&f.tangent_as_tt(&f.frame_apply(&p)));
        let pairing: f64 = (0..s.len()).map(|k| z[k] * t.get(s.index(k)).unwrap()).sum();
        assert!((adj.dot(&p) - pairing).abs() < 1e-11);
    }

    #[test]
    fn closed_form_projection_equals_frame_composition() {
        let dims = [4, 3, 3, 4];
        let x = random_tt(&dims, &[1, 3, 3, 2, 1], 19);
        let f = EmbeddedFrame::new(&x).unwrap();
        let z = random_tt(&dims, &[1, 2, 2, 2, 1], 23);
        let g = tt_frame_contraction(f.base(), &z).unwrap();
        let proj = f.project_contractions(g.clone());
        let via_frame = f.frame_apply(&f.frame_adjoint_from_contractions(&g));
        for (a, b) in proj.deltas().iter().zip(via_frame.deltas()) {
            let mut e = a.clone();
            e.axpy(-1.0, b);
            assert!(e.norm() < 1e-10 * (1.0 + a.norm()));
        }
        // projection is idempotent and residual is orthogonal to the tangent space
        let pz = dense(&f.tangent_as_tt(&proj));
        let again = dense(&f.tangent_as_tt(&f.project_tt(&f.tangent_as_tt(&proj)).unwrap()));
        assert!(pz.sub(&again).unwrap().norm() < 1e-10 * pz.norm());
        let resid = dense(&z).sub(&pz).unwrap();
        let t = dense(&f.tangent_as_tt(&f.frame_apply(&random_coords(&f, 29))));
        assert!(dot(&resid, &t).abs() < 1e-10 * resid.norm() * t.norm());
    }

    #[test]
    fn gauge_condition_holds_for_projections() {
        let x = random_tt(&[3, 4, 3], &[1, 2, 3, 1], 31);
        let f = EmbeddedFrame::new(&x).unwrap();
        let t = f.project_tt(&random_tt(&[3, 4, 3], &[1, 2, 2, 1], 37)).unwrap();
        for j in 0..2 {
            assert!(left_contract(f.base().core(j), &t.deltas()[j]).norm() < 1e-12);
        }
    }

    #[test]
    fn retraction_is_second_order_close() {
        let x = random_tt(&[4, 4, 4], &[1, 2, 2, 1], 41);
        let f = EmbeddedFrame::new(&x).unwrap();
        let t = f.frame_apply(&random_coords(&f, 43));
        let xd = dense(f.base());
        let td = dense(&f.tangent_as_tt(&t));
        let mut prev = f64::INFINITY;
        for &h in &[1e-2, 1e-3] {
            let y = dense(&f.retract(&t, h).unwrap());
            let lin = DenseTensor::new(xd.dims().to_vec(), xd.values().iter().zip(td.values()).map(|(a, b)| a + h * b).collect()).unwrap();
            let err = y.sub(&lin).unwrap().norm();
            assert!(err < prev / 50.0 || prev.is_infinite());
            prev = err;
        }
        let y = f.retract(&t, 0.0).unwrap();
        assert!(dense(&y).sub(&xd).unwrap().norm() < 1e-12 * xd.norm());
    }

    #[test]
    fn transport_keeps_tangent_vectors_at_same_point() {
        let x = random_tt(&[3, 3, 4], &[1, 2, 2, 1], 47);
        let f = EmbeddedFrame::new(&x).unwrap();
        let t = f.frame_apply(&random_coords(&f, 53));
        let moved = f.transport(&f, &t).unwrap();
        for (a, b) in t.deltas().iter().zip(moved.deltas()) {
            let mut e = a.clone();
            e.axpy(-1.0, b);
            assert!(e.norm() < 1e-10);
        }
    }
}
