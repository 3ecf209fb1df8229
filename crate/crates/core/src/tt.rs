//! Tensor-train representations and the basic operations on them.
//!
//! A core of shape `(l, n, r)` is stored as one contiguous column-major buffer
//! with entry `(a, i, b)` at offset `a + l * (i + n * b)`. With this layout the
//! left unfolding (`l*n x r`) and the right unfolding (`l x n*r`) are both plain
//! reinterpretations of the same buffer, so no data movement is needed to switch
//! between them.
//!
//! Multi-indices are linearised colexicographically (first index fastest) both
//! for dense tensors and for unfoldings.
//!
//! Cores are indexed from zero. For the `j`-th core (`0 <= j < d`) the rank
//! vector entries `ranks[j]` and `ranks[j + 1]` are its left and right ranks,
//! and `ranks[0] = ranks[d] = 1`.

use nalgebra::DMatrixView;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, Mat};
use crate::{Error, Result};

/// Default ceiling on the number of entries any dense materialisation may have.
pub const DEFAULT_DENSE_BUDGET: usize = 100_000_000;

/// Relative singular value ratio below which a core is treated as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-12;

fn checked_numel(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n))
}

fn budget_check(dims: &[usize], budget: usize) -> Result<usize> {
    let entries: u128 = dims.iter().map(|&n| n as u128).product();
    if entries > budget as u128 {
        return Err(Error::DenseBudget { entries, budget });
    }
    Ok(entries as usize)
}

/// A third-order tensor-train core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Core {
    left: usize,
    mode: usize,
    right: usize,
    data: Vec<f64>,
}

impl Core {
    pub fn zeros(left: usize, mode: usize, right: usize) -> Self {
        Core { left, mode, right, data: vec![0.0; left * mode * right] }
    }

    pub fn from_fn(left: usize, mode: usize, right: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(left * mode * right);
        for b in 0..right {
            for i in 0..mode {
                for a in 0..left {
                    data.push(f(a, i, b));
                }
            }
        }
        Core { left, mode, right, data }
    }

    pub fn from_vec(left: usize, mode: usize, right: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != left * mode * right {
            return Err(Error::Shape(format!("core buffer of length {} cannot hold shape ({left}, {mode}, {right})", data.len())));
        }
        Ok(Core { left, mode, right, data })
    }

    /// Rebuild a core from its left unfolding (`left*mode x r`).
    pub fn from_left_unfolding(m: &Mat, left: usize, mode: usize) -> Result<Self> {
        if m.nrows() != left * mode {
            return Err(Error::Shape(format!("left unfolding has {} rows, expected {}", m.nrows(), left * mode)));
        }
        Ok(Core { left, mode, right: m.ncols(), data: m.as_slice().to_vec() })
    }

    /// Rebuild a core from its right unfolding (`l x mode*right`).
    pub fn from_right_unfolding(m: &Mat, mode: usize, right: usize) -> Result<Self> {
        if m.ncols() != mode * right {
            return Err(Error::Shape(format!("right unfolding has {} columns, expected {}", m.ncols(), mode * right)));
        }
        Ok(Core { left: m.nrows(), mode, right, data: m.as_slice().to_vec() })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.left, self.mode, self.right)
    }
    pub fn left_rank(&self) -> usize {
        self.left
    }
    pub fn mode_size(&self) -> usize {
        self.mode
    }
    pub fn right_rank(&self) -> usize {
        self.right
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, a: usize, i: usize, b: usize) -> f64 {
        self.data[a + self.left * (i + self.mode * b)]
    }

    #[inline]
    pub fn set(&mut self, a: usize, i: usize, b: usize, v: f64) {
        self.data[a + self.left * (i + self.mode * b)] = v;
    }

    /// Zero-copy view of the left unfolding.
    pub fn left_view(&self) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.data, self.left * self.mode, self.right)
    }

    /// Zero-copy view of the right unfolding.
    pub fn right_view(&self) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.data, self.left, self.mode * self.right)
    }

    pub fn left_unfolding(&self) -> Mat {
        self.left_view().into_owned()
    }

    pub fn right_unfolding(&self) -> Mat {
        self.right_view().into_owned()
    }

    /// The `i`-th lateral slice, an `l x r` matrix.
    pub fn slice(&self, i: usize) -> Mat {
        Mat::from_fn(self.left, self.right, |a, b| self.get(a, i, b))
    }

    pub fn set_slice(&mut self, i: usize, m: &Mat) {
        for b in 0..self.right {
            for a in 0..self.left {
                self.set(a, i, b, m[(a, b)]);
            }
        }
    }

    /// Mode-1 product: every slice becomes `A * X(i)`.
    pub fn mul_left(&self, a: &Mat) -> Core {
        assert_eq!(a.ncols(), self.left, "mode-1 product dimension mismatch");
        let m = a * self.right_view();
        Core { left: a.nrows(), mode: self.mode, right: self.right, data: m.as_slice().to_vec() }
    }

    /// Mode-3 product: every slice becomes `X(i) * B^T`.
    pub fn mul_right(&self, b: &Mat) -> Core {
        assert_eq!(b.ncols(), self.right, "mode-3 product dimension mismatch");
        let m = self.left_view() * b.transpose();
        Core { left: self.left, mode: self.mode, right: b.nrows(), data: m.as_slice().to_vec() }
    }

    /// Mode-`k` product (`k` in `1..=3`) with a matrix whose column count matches
    /// that mode.
    pub fn mode_product(&self, k: usize, a: &Mat) -> Result<Core> {
        match k {
            1 if a.ncols() == self.left => Ok(self.mul_left(a)),
            3 if a.ncols() == self.right => Ok(self.mul_right(a)),
            2 if a.ncols() == self.mode => {
                let mut out = Core::zeros(self.left, a.nrows(), self.right);
                for b in 0..self.right {
                    for j in 0..a.nrows() {
                        for i in 0..self.mode {
                            let w = a[(j, i)];
                            if w == 0.0 {
                                continue;
                            }
                            for al in 0..self.left {
                                let v = out.get(al, j, b) + w * self.get(al, i, b);
                                out.set(al, j, b, v);
                            }
                        }
                    }
                }
                Ok(out)
            }
            1..=3 => Err(Error::Shape(format!("mode-{k} product with a {:?} matrix", a.shape()))),
            _ => Err(Error::InvalidUnfolding { k, d: 3 }),
        }
    }

    pub fn dot(&self, other: &Core) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(x, y)| x * y).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> Core {
        let mut c = self.clone();
        c.scale(alpha);
        c
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Core) {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter_mut().zip(&other.data).for_each(|(x, y)| *x += alpha * y);
    }
}

/// `L(a)^T L(b)`: contraction over the first two modes.
pub fn left_contract(a: &Core, b: &Core) -> Mat {
    a.left_view().tr_mul(&b.left_view())
}

/// `R(a) R(b)^T`: contraction over the last two modes.
pub fn right_contract(a: &Core, b: &Core) -> Mat {
    a.right_view() * b.right_view().transpose()
}

/// A dense tensor with colexicographically ordered entries.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n = checked_numel(&dims).ok_or_else(|| Error::Shape("dimension product overflows".into()))?;
        if n != values.len() {
            return Err(Error::Shape(format!("{} values for dimensions {dims:?}", values.len())));
        }
        Ok(DenseTensor { dims, values })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n = budget_check(&dims, DEFAULT_DENSE_BUDGET)?;
        Ok(DenseTensor { dims, values: vec![0.0; n] })
    }

    /// Fill a tensor by evaluating `f` at every (zero-based) multi-index.
    pub fn from_fn(dims: Vec<usize>, budget: usize, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let n = budget_check(&dims, budget)?;
        let mut idx = vec![0usize; dims.len()];
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f(&idx));
            for (k, v) in idx.iter_mut().enumerate() {
                *v += 1;
                if *v < dims[k] {
                    break;
                }
                *v = 0;
            }
        }
        Ok(DenseTensor { dims, values })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }
    pub fn order(&self) -> usize {
        self.dims.len()
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn linear_index(&self, idx: &[usize]) -> Result<usize> {
        linear_index(&self.dims, idx)
    }

    pub fn get(&self, idx: &[usize]) -> Result<f64> {
        Ok(self.values[self.linear_index(idx)?])
    }

    /// The `k`-th unfolding (`1 <= k < d`): rows index modes `1..=k`,
    /// columns the remaining modes, both colexicographically.
    pub fn k_unfold(&self, k: usize) -> Result<Mat> {
        let d = self.order();
        if k == 0 || k >= d {
            return Err(Error::InvalidUnfolding { k, d });
        }
        let rows: usize = self.dims[..k].iter().product();
        Ok(Mat::from_column_slice(rows, self.numel() / rows, &self.values))
    }

    /// Mode-`k` product (`1 <= k <= d`) with `a` of shape `m x n_k`.
    pub fn mode_product(&self, k: usize, a: &Mat) -> Result<DenseTensor> {
        let d = self.order();
        if k == 0 || k > d {
            return Err(Error::InvalidUnfolding { k, d });
        }
        let nk = self.dims[k - 1];
        if a.ncols() != nk {
            return Err(Error::Shape(format!("mode-{k} product: matrix {:?}, mode size {nk}", a.shape())));
        }
        let pre: usize = self.dims[..k - 1].iter().product();
        let post: usize = self.dims[k..].iter().product();
        let m = a.nrows();
        let mut out = vec![0.0; pre * m * post];
        for s in 0..post {
            for i in 0..nk {
                let src = &self.values[pre * (i + nk * s)..pre * (i + nk * s + 1)];
                for j in 0..m {
                    let w = a[(j, i)];
                    let dst = &mut out[pre * (j + m * s)..pre * (j + m * s + 1)];
                    dst.iter_mut().zip(src).for_each(|(o, x)| *o += w * x);
                }
            }
        }
        let mut dims = self.dims.clone();
        dims[k - 1] = m;
        Ok(DenseTensor { dims, values: out })
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &DenseTensor) -> Result<DenseTensor> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(DenseTensor { dims: self.dims.clone(), values })
    }
}

/// Colexicographic linear index of a zero-based multi-index.
pub fn linear_index(dims: &[usize], idx: &[usize]) -> Result<usize> {
    if idx.len() != dims.len() || idx.iter().zip(dims).any(|(i, n)| i >= n) {
        return Err(Error::IndexOutOfBounds { index: idx.to_vec(), dims: dims.to_vec() });
    }
    let mut lin = 0usize;
    for k in (0..dims.len()).rev() {
        lin = lin * dims[k] + idx[k];
    }
    Ok(lin)
}

/// Inverse of [`linear_index`].
pub fn multi_index(dims: &[usize], mut lin: usize, out: &mut [usize]) {
    for (k, &n) in dims.iter().enumerate() {
        out[k] = lin % n;
        lin /= n;
    }
}

/// A tensor in tensor-train format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTTensor {
    cores: Vec<Core>,
    /// Set when cores `0..d-1` are known to have orthonormal left unfoldings.
    left_orthogonal: bool,
}

impl TTTensor {
    /// Assemble a tensor train, checking that adjacent ranks agree and that the
    /// boundary ranks are one.
    pub fn new(cores: Vec<Core>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::InvalidRanks("a tensor train needs at least one core".into()));
        }
        if cores[0].left != 1 || cores[cores.len() - 1].right != 1 {
            return Err(Error::InvalidRanks("boundary ranks must be one".into()));
        }
        for (j, w) in cores.windows(2).enumerate() {
            if w[0].right != w[1].left {
                return Err(Error::InvalidRanks(format!(
                    "core {j} has right rank {} but core {} has left rank {}",
                    w[0].right,
                    j + 1,
                    w[1].left
                )));
            }
        }
        if cores.iter().any(|c| c.mode == 0 || c.left == 0 || c.right == 0) {
            return Err(Error::InvalidRanks("zero-sized core".into()));
        }
        Ok(TTTensor { cores, left_orthogonal: false })
    }

    pub(crate) fn with_flag(mut self, left_orthogonal: bool) -> Self {
        self.left_orthogonal = left_orthogonal;
        self
    }

    pub fn order(&self) -> usize {
        self.cores.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.mode).collect()
    }

    /// Rank vector `(1, r_1, ..., r_{d-1}, 1)`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = Vec::with_capacity(self.cores.len() + 1);
        r.push(1);
        r.extend(self.cores.iter().map(|c| c.right));
        r
    }

    pub fn cores(&self) -> &[Core] {
        &self.cores
    }

    pub fn core(&self, j: usize) -> &Core {
        &self.cores[j]
    }

    pub fn into_cores(self) -> Vec<Core> {
        self.cores
    }

    /// Mutable access invalidates the orthogonality flag.
    pub fn cores_mut(&mut self) -> &mut [Core] {
        self.left_orthogonal = false;
        &mut self.cores
    }

    pub fn is_left_orthogonal(&self) -> bool {
        self.left_orthogonal
    }

    /// Number of parameters stored in the cores.
    pub fn num_params(&self) -> usize {
        self.cores.iter().map(Core::len).sum()
    }

    /// Number of entries of the represented tensor (saturating).
    pub fn numel(&self) -> u128 {
        self.cores.iter().map(|c| c.mode as u128).product()
    }

    /// Whether the ranks are compatible with the dimensions, i.e.
    /// `r_{k-1} <= n_k r_k` and `r_k <= n_k r_{k-1}` for every core.
    pub fn has_feasible_ranks(&self) -> bool {
        feasible_ranks(&self.dims(), &self.ranks())
    }

    /// Evaluate a single entry.
    pub fn entry(&self, idx: &[usize]) -> Result<f64> {
        let dims = self.dims();
        if idx.len() != dims.len() || idx.iter().zip(&dims).any(|(i, n)| i >= n) {
            return Err(Error::IndexOutOfBounds { index: idx.to_vec(), dims });
        }
        Ok(self.entry_unchecked(idx, &mut Vec::new(), &mut Vec::new()))
    }

    /// Entry evaluation with caller-provided scratch buffers; no bounds checks.
    pub(crate) fn entry_unchecked(&self, idx: &[usize], v: &mut Vec<f64>, w: &mut Vec<f64>) -> f64 {
        v.clear();
        v.push(1.0);
        for (core, &i) in self.cores.iter().zip(idx) {
            let (l, n, r) = core.shape();
            w.clear();
            w.resize(r, 0.0);
            for (b, wb) in w.iter_mut().enumerate() {
                let off = l * (i + n * b);
                let col = &core.data[off..off + l];
                *wb = col.iter().zip(v.iter()).map(|(x, y)| x * y).sum();
            }
            std::mem::swap(v, w);
        }
        v[0]
    }

    /// Materialise the full tensor, refusing if it exceeds `budget` entries.
    pub fn full_with_budget(&self, budget: usize) -> Result<DenseTensor> {
        let dims = self.dims();
        budget_check(&dims, budget)?;
        let mut m = Mat::from_element(1, 1, 1.0);
        for core in &self.cores {
            m = extend_left_interface(&m, core);
        }
        DenseTensor::new(dims, m.as_slice().to_vec())
    }

    pub fn full(&self) -> Result<DenseTensor> {
        self.full_with_budget(DEFAULT_DENSE_BUDGET)
    }

    /// Materialise all left and right interface matrices.
    pub fn interfaces(&self, budget: usize) -> Result<Interfaces> {
        budget_check(&self.dims(), budget)?;
        let d = self.order();
        let mut left = Vec::with_capacity(d + 1);
        left.push(Mat::from_element(1, 1, 1.0));
        for j in 0..d {
            let next = extend_left_interface(&left[j], &self.cores[j]);
            left.push(next);
        }
        let mut right = vec![Mat::zeros(0, 0); d + 1];
        right[d] = Mat::from_element(1, 1, 1.0);
        for j in (0..d).rev() {
            right[j] = extend_right_interface(&right[j + 1], &self.cores[j]);
        }
        Ok(Interfaces { left, right })
    }

    /// Cores of `self + other` as a block tensor train of summed ranks.
    pub fn add(&self, other: &TTTensor) -> Result<TTTensor> {
        self.linear_combination(1.0, other, 1.0)
    }

    /// `alpha * self + beta * other` in block form (ranks add up).
    pub fn linear_combination(&self, alpha: f64, other: &TTTensor, beta: f64) -> Result<TTTensor> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        let d = self.order();
        if d == 1 {
            let mut c = self.cores[0].scaled(alpha);
            c.axpy(beta, &other.cores[0]);
            return TTTensor::new(vec![c]);
        }
        let mut cores = Vec::with_capacity(d);
        for j in 0..d {
            let x = &self.cores[j];
            let y = &other.cores[j];
            let (lx, n, rx) = x.shape();
            let (ly, _, ry) = y.shape();
            let core = if j == 0 {
                Core::from_fn(1, n, rx + ry, |_, i, b| if b < rx { alpha * x.get(0, i, b) } else { beta * y.get(0, i, b - rx) })
            } else if j == d - 1 {
                Core::from_fn(lx + ly, n, 1, |a, i, _| if a < lx { x.get(a, i, 0) } else { y.get(a - lx, i, 0) })
            } else {
                Core::from_fn(lx + ly, n, rx + ry, |a, i, b| match (a < lx, b < rx) {
                    (true, true) => x.get(a, i, b),
                    (false, false) => y.get(a - lx, i, b - rx),
                    _ => 0.0,
                })
            };
            cores.push(core);
        }
        TTTensor::new(cores)
    }

    /// Multiply the represented tensor by a scalar (applied to the last core).
    pub fn scaled(&self, alpha: f64) -> TTTensor {
        let mut out = self.clone();
        let d = out.order();
        out.cores[d - 1].scale(alpha);
        out
    }

    /// Frobenius inner product of two tensor trains of equal dimensions.
    pub fn dot(&self, other: &TTTensor) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        let mut m = Mat::from_element(1, 1, 1.0);
        for (x, y) in self.cores.iter().zip(&other.cores) {
            m = left_contract(x, &y.mul_left(&m));
        }
        Ok(m[(0, 0)])
    }

    /// Frobenius norm computed through an orthogonalisation sweep, which is
    /// accurate even for tensors with a tiny norm relative to their cores.
    pub fn norm(&self) -> f64 {
        let (swept, _) = self.orthogonal_sweep(false).expect("unchecked sweep cannot fail");
        swept.cores[swept.order() - 1].norm()
    }

    /// `||self - other|| / ||other||`.
    pub fn relative_error(&self, other: &TTTensor) -> Result<f64> {
        let diff = self.linear_combination(1.0, other, -1.0)?;
        Ok(diff.norm() / other.norm())
    }

    /// Left-orthogonalise cores `0..d-1` by a QR sweep. The represented tensor is
    /// unchanged; the last core carries the norm.
    pub fn left_orthogonalize(&self) -> Result<TTTensor> {
        if self.left_orthogonal {
            return Ok(self.clone());
        }
        Ok(self.orthogonal_sweep(true)?.0)
    }

    /// Left-orthogonalise and also return the triangular factors `F_j` with
    /// `X^{<=j} = Q^{<=j} F_j` for `j = 0..=d-1` (`F_0 = [1]`).
    pub fn left_orthogonalize_with_factors(&self) -> Result<(TTTensor, Vec<Mat>)> {
        self.orthogonal_sweep(true)
    }

    fn orthogonal_sweep(&self, check: bool) -> Result<(TTTensor, Vec<Mat>)> {
        let d = self.order();
        let mut cores = Vec::with_capacity(d);
        let mut carry = Mat::from_element(1, 1, 1.0);
        let mut factors = vec![carry.clone()];
        for j in 0..d {
            let z = self.cores[j].mul_left(&carry);
            if j == d - 1 {
                cores.push(z);
                break;
            }
            let (l, n, r) = z.shape();
            let (q, rf) = linalg::qr_thin(&z.left_unfolding());
            if check {
                if l * n < r {
                    return Err(Error::InvalidRanks(format!("core {j}: rank {r} exceeds {l} x {n}")));
                }
                let s = linalg::singular_values(&rf);
                let ratio = if s[0] > 0.0 { s[s.len() - 1] / s[0] } else { 0.0 };
                if ratio < RANK_TOLERANCE {
                    return Err(Error::RankDeficient { core: j, ratio });
                }
            }
            let k = q.ncols();
            cores.push(Core::from_left_unfolding(&q, l, n)?);
            // When l*n < r the factor is wide; keep the shapes consistent.
            carry = if k == r { rf } else { rf.rows(0, k).into_owned() };
            factors.push(carry.clone());
        }
        Ok((TTTensor { cores, left_orthogonal: true }, factors))
    }

    /// Right-orthogonalise cores `1..d` (right unfoldings with orthonormal rows).
    pub fn right_orthogonalize(&self) -> TTTensor {
        let d = self.order();
        let mut cores = self.cores.clone();
        for j in (1..d).rev() {
            let (l, n, r) = cores[j].shape();
            let (q, rf) = linalg::qr_thin(&cores[j].right_unfolding().transpose());
            let k = q.ncols();
            cores[j] = Core::from_right_unfolding(&q.transpose(), n, r).expect("shape preserved");
            let rf = if k == l { rf } else { rf.rows(0, k).into_owned() };
            cores[j - 1] = cores[j - 1].mul_right(&rf);
        }
        TTTensor { cores, left_orthogonal: false }
    }

    /// TT-rounding to at most `max_ranks` (full rank vector of length `d+1`)
    /// and relative accuracy `tol`. The result is left-orthogonal.
    pub fn round(&self, max_ranks: &[usize], tol: f64) -> Result<TTTensor> {
        let d = self.order();
        if max_ranks.len() != d + 1 {
            return Err(Error::InvalidRanks(format!("expected {} ranks, got {}", d + 1, max_ranks.len())));
        }
        let mut x = self.right_orthogonalize();
        let delta = if d > 1 { tol / ((d - 1) as f64).sqrt() * x.cores[0].norm() } else { 0.0 };
        for j in 0..d.saturating_sub(1) {
            let (l, n, _) = x.cores[j].shape();
            let (u, s, v) = linalg::svd(&x.cores[j].left_unfolding());
            let rho = truncation_rank(&s, delta, max_ranks[j + 1]);
            let u = u.columns(0, rho).into_owned();
            let sv = Mat::from_fn(rho, v.nrows(), |a, b| s[a] * v[(b, a)]);
            x.cores[j] = Core::from_left_unfolding(&u, l, n)?;
            x.cores[j + 1] = x.cores[j + 1].mul_left(&sv);
        }
        x.left_orthogonal = true;
        Ok(x)
    }

    /// Condition number: ratio of the largest to the smallest nonzero singular
    /// value over all unfoldings. Returns infinity when an unfolding is rank
    /// deficient with respect to the stored ranks.
    pub fn condition_number(&self) -> f64 {
        let d = self.order();
        if d < 2 {
            return 1.0;
        }
        if !self.has_feasible_ranks() {
            return f64::INFINITY;
        }
        let Ok((_, factors)) = self.orthogonal_sweep(false) else {
            return f64::INFINITY;
        };
        let Ok(chain) = SChain::new(self) else {
            return f64::INFINITY;
        };
        let mut hi = 0.0f64;
        let mut lo = f64::INFINITY;
        for j in 1..d {
            let s = linalg::singular_values(&(&factors[j] * chain.s(j).transpose()));
            if s.len() < self.ranks()[j] {
                return f64::INFINITY;
            }
            hi = hi.max(s[0]);
            lo = lo.min(s[s.len() - 1]);
        }
        if lo <= hi * f64::EPSILON {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    /// Singular values of the `j`-th unfolding (`1 <= j < d`), computed from
    /// the cores without materialising the unfolding.
    pub fn unfolding_singular_values(&self, j: usize) -> Result<Vec<f64>> {
        let d = self.order();
        if j == 0 || j >= d {
            return Err(Error::InvalidUnfolding { k: j, d });
        }
        let (_, factors) = self.orthogonal_sweep(false)?;
        let chain = SChain::new(self)?;
        Ok(linalg::singular_values(&(&factors[j] * chain.s(j).transpose())))
    }
}

/// Whether `ranks` (length `d+1`) is feasible for `dims`.
pub fn feasible_ranks(dims: &[usize], ranks: &[usize]) -> bool {
    ranks.len() == dims.len() + 1
        && ranks[0] == 1
        && ranks[dims.len()] == 1
        && dims.iter().enumerate().all(|(k, &n)| ranks[k] <= n * ranks[k + 1] && ranks[k + 1] <= n * ranks[k])
}

fn truncation_rank(s: &[f64], delta: f64, max_rank: usize) -> usize {
    // smallest rho with sqrt(sum_{j >= rho} s_j^2) <= delta
    let mut tail = 0.0;
    let mut rho = s.len();
    while rho > 0 {
        let next = tail + s[rho - 1] * s[rho - 1];
        if next.sqrt() > delta {
            break;
        }
        tail = next;
        rho -= 1;
    }
    rho.clamp(1, max_rank.max(1)).min(s.len().max(1))
}

/// `X^{<=j+1}` from `X^{<=j}` (`P x l`) and core `j` (`l x n x r`):
/// rows `p + P i` hold `X^{<=j}[p, :] * X(i)`.
fn extend_left_interface(prev: &Mat, core: &Core) -> Mat {
    let p = prev.nrows();
    let (_, n, r) = core.shape();
    let mut out = Mat::zeros(p * n, r);
    for i in 0..n {
        let block = prev * core.slice(i);
        out.rows_mut(p * i, p).copy_from(&block);
    }
    out
}

/// `X^{>=j}` from `X^{>=j+1}` (`Q x r`) and core `j`: rows `i + n q` hold
/// `X^{>=j+1}[q, :] * X(i)^T`.
fn extend_right_interface(next: &Mat, core: &Core) -> Mat {
    let q = next.nrows();
    let (l, n, _) = core.shape();
    let mut out = Mat::zeros(n * q, l);
    for i in 0..n {
        let block = next * core.slice(i).transpose();
        for row in 0..q {
            out.row_mut(i + n * row).copy_from(&block.row(row));
        }
    }
    out
}

/// Materialised interface matrices of a tensor train.
///
/// `left(j)` is `X^{<=j}` with `prod_{k<j} n_k` rows and `r_j` columns;
/// `right(j)` is `X^{>=j}` with `prod_{k>=j} n_k` rows and `r_j` columns.
#[derive(Clone, Debug)]
pub struct Interfaces {
    left: Vec<Mat>,
    right: Vec<Mat>,
}

impl Interfaces {
    pub fn left(&self, j: usize) -> &Mat {
        &self.left[j]
    }
    pub fn right(&self, j: usize) -> &Mat {
        &self.right[j]
    }
}

/// Gram matrices of the interfaces, computed by core-wise recursions.
///
/// `left(j) = X^{<=j}^T X^{<=j}` and `right(j) = X^{>=j}^T X^{>=j}`, both
/// `r_j x r_j`, for `j = 0..=d`; `left(0) = right(d) = [1]`.
#[derive(Clone, Debug)]
pub struct GramCache {
    left: Vec<Mat>,
    right: Vec<Mat>,
}

impl GramCache {
    pub fn new(x: &TTTensor) -> Self {
        let d = x.order();
        let mut left = Vec::with_capacity(d + 1);
        left.push(Mat::from_element(1, 1, 1.0));
        for j in 0..d {
            let core = x.core(j);
            let g = left_contract(core, &core.mul_left(&left[j]));
            left.push(symmetrize(g));
        }
        let mut right = vec![Mat::zeros(0, 0); d + 1];
        right[d] = Mat::from_element(1, 1, 1.0);
        for j in (0..d).rev() {
            let core = x.core(j);
            right[j] = symmetrize(right_contract(&core.mul_right(&right[j + 1]), core));
        }
        GramCache { left, right }
    }

    pub fn left(&self, j: usize) -> &Mat {
        &self.left[j]
    }
    pub fn right(&self, j: usize) -> &Mat {
        &self.right[j]
    }
    pub fn order(&self) -> usize {
        self.left.len() - 1
    }
}

fn symmetrize(m: Mat) -> Mat {
    (&m + m.transpose()) * 0.5
}

/// Triangular square roots of the right Gram matrices.
///
/// `s(j)` is upper triangular with non-negative diagonal and satisfies
/// `s(j)^T s(j) = X^{>=j}^T X^{>=j}`; it is obtained by a right-to-left QR
/// sweep without ever forming the interfaces.
#[derive(Clone, Debug)]
pub struct SChain {
    s: Vec<Mat>,
}

impl SChain {
    pub fn new(x: &TTTensor) -> Result<Self> {
        let d = x.order();
        let mut s = vec![Mat::zeros(0, 0); d + 1];
        s[d] = Mat::from_element(1, 1, 1.0);
        for j in (0..d).rev() {
            let z = x.core(j).mul_right(&s[j + 1]);
            let (l, n, r) = z.shape();
            if n * r < l {
                return Err(Error::InvalidRanks(format!("core {j}: rank {l} exceeds {n} x {r}")));
            }
            let (_, rf) = linalg::qr_thin(&z.right_unfolding().transpose());
            s[j] = rf;
        }
        Ok(SChain { s })
    }

    pub fn s(&self, j: usize) -> &Mat {
        &self.s[j]
    }
}

/// TT-SVD of a dense tensor with rank caps `max_ranks` (length `d+1`) and
/// relative accuracy `tol`. The result is left-orthogonal.
pub fn tt_svd(t: &DenseTensor, max_ranks: &[usize], tol: f64) -> Result<TTTensor> {
    let d = t.order();
    if max_ranks.len() != d + 1 {
        return Err(Error::InvalidRanks(format!("expected {} ranks, got {}", d + 1, max_ranks.len())));
    }
    let dims = t.dims();
    let delta = if d > 1 { tol / ((d - 1) as f64).sqrt() * t.norm() } else { 0.0 };
    let mut cores = Vec::with_capacity(d);
    let mut rest = t.values().to_vec();
    let mut r_prev = 1usize;
    for (j, &n) in dims.iter().enumerate().take(d - 1) {
        let rows = r_prev * n;
        let cols = rest.len() / rows;
        let c = Mat::from_column_slice(rows, cols, &rest);
        let (u, s, v) = linalg::svd(&c);
        let rho = truncation_rank(&s, delta, max_ranks[j + 1]);
        cores.push(Core::from_left_unfolding(&u.columns(0, rho).into_owned(), r_prev, n)?);
        let sv = Mat::from_fn(rho, cols, |a, b| s[a] * v[(b, a)]);
        rest = sv.as_slice().to_vec();
        r_prev = rho;
    }
    cores.push(Core::from_vec(r_prev, dims[d - 1], 1, rest)?);
    Ok(TTTensor::new(cores)?.with_flag(true))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    }

    fn random_tt(dims: &[usize], ranks: &[usize], seed: u64) -> TTTensor {
        let mut s = seed;
        let cores = dims.iter().enumerate().map(|(k, &n)| Core::from_fn(ranks[k], n, ranks[k + 1], |_, _, _| lcg(&mut s))).collect();
        TTTensor::new(cores).unwrap()
    }

    /// Brute-force entry: explicit sum over all rank indices.
    fn brute_entry(x: &TTTensor, idx: &[usize]) -> f64 {
        let ranks = x.ranks();
        let d = x.order();
        let mut alpha = vec![0usize; d + 1];
        let mut total = 0.0;
        loop {
            let mut p = 1.0;
            for k in 0..d {
                p *= x.core(k).get(alpha[k], idx[k], alpha[k + 1]);
            }
            total += p;
            let mut k = 1;
            loop {
                if k >= d {
                    return total;
                }
                alpha[k] += 1;
                if alpha[k] < ranks[k] {
                    break;
                }
                alpha[k] = 0;
                k += 1;
            }
        }
    }

    #[test]
    fn unfoldings_follow_storage_convention() {
        let c = Core::from_fn(2, 3, 4, |a, i, b| (100 * a + 10 * i + b) as f64);
        let l = c.left_unfolding();
        let r = c.right_unfolding();
        assert_eq!(l.shape(), (6, 4));
        assert_eq!(r.shape(), (2, 12));
        for a in 0..2 {
            for i in 0..3 {
                for b in 0..4 {
                    assert_eq!(l[(a + 2 * i, b)], c.get(a, i, b));
                    assert_eq!(r[(a, i + 3 * b)], c.get(a, i, b));
                }
            }
        }
        assert_eq!(Core::from_left_unfolding(&l, 2, 3).unwrap(), c);
        assert_eq!(Core::from_right_unfolding(&r, 3, 4).unwrap(), c);
    }

    #[test]
    fn mode_products_act_on_slices() {
        let mut s = 3;
        let c = Core::from_fn(2, 3, 4, |_, _, _| lcg(&mut s));
        let a = Mat::from_fn(5, 2, |_, _| lcg(&mut s));
        let b = Mat::from_fn(6, 4, |_, _| lcg(&mut s));
        let ca = c.mul_left(&a);
        let cb = c.mul_right(&b);
        for i in 0..3 {
            assert!((ca.slice(i) - &a * c.slice(i)).norm() < 1e-14);
            assert!((cb.slice(i) - c.slice(i) * b.transpose()).norm() < 1e-14);
        }
        let m = Mat::from_fn(2, 3, |_, _| lcg(&mut s));
        let c2 = c.mode_product(2, &m).unwrap();
        for b2 in 0..4 {
            for a2 in 0..2 {
                for j in 0..2 {
                    let want: f64 = (0..3).map(|i| m[(j, i)] * c.get(a2, i, b2)).sum();
                    assert!((c2.get(a2, j, b2) - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn entries_match_brute_force_sum() {
        let x = random_tt(&[3, 4, 2, 3], &[1, 2, 3, 2, 1], 11);
        let full = x.full().unwrap();
        let mut idx = vec![0; 4];
        for lin in 0..full.numel() {
            multi_index(&[3, 4, 2, 3], lin, &mut idx);
            let want = brute_entry(&x, &idx);
            assert!((x.entry(&idx).unwrap() - want).abs() < 1e-13);
            assert!((full.values()[lin] - want).abs() < 1e-13);
        }
    }

    #[test]
    fn entry_rejects_out_of_range() {
        let x = random_tt(&[3, 3], &[1, 2, 1], 1);
        assert!(matches!(x.entry(&[0, 3]), Err(Error::IndexOutOfBounds { .. })));
        assert!(x.entry(&[0]).is_err());
    }

    #[test]
    fn dense_budget_is_enforced() {
        let x = random_tt(&[10, 10, 10], &[1, 2, 2, 1], 1);
        assert!(matches!(x.full_with_budget(999), Err(Error::DenseBudget { .. })));
        assert!(x.full_with_budget(1000).is_ok());
    }

    #[test]
    fn k_unfold_column_major_reshape() {
        let t = DenseTensor::from_fn(vec![2, 3, 4], 1000, |i| (i[0] + 10 * i[1] + 100 * i[2]) as f64).unwrap();
        let m = t.k_unfold(2).unwrap();
        assert_eq!(m.shape(), (6, 4));
        assert_eq!(m[(1 + 2 * 2, 3)], 1.0 + 20.0 + 300.0);
        assert!(t.k_unfold(0).is_err());
        assert!(t.k_unfold(3).is_err());
    }

    #[test]
    fn dense_mode_product_matches_loop() {
        let mut s = 5;
        let t = DenseTensor::from_fn(vec![2, 3, 4], 1000, |_| lcg(&mut s)).unwrap();
        let a = Mat::from_fn(5, 3, |_, _| lcg(&mut s));
        let p = t.mode_product(2, &a).unwrap();
        assert_eq!(p.dims(), &[2, 5, 4]);
        for i0 in 0..2 {
            for j in 0..5 {
                for i2 in 0..4 {
                    let want: f64 = (0..3).map(|i1| a[(j, i1)] * t.get(&[i0, i1, i2]).unwrap()).sum();
                    assert!((p.get(&[i0, j, i2]).unwrap() - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn interfaces_reconstruct_unfoldings() {
        let x = random_tt(&[3, 2, 4, 2], &[1, 2, 3, 2, 1], 7);
        let full = x.full().unwrap();
        let itf = x.interfaces(DEFAULT_DENSE_BUDGET).unwrap();
        for k in 1..4 {
            let unf = full.k_unfold(k).unwrap();
            let rec = itf.left(k) * itf.right(k).transpose();
            assert!((unf - rec).norm() < 1e-12);
        }
        assert!((itf.left(4).column(0) - nalgebra::DVector::from_column_slice(full.values())).norm() < 1e-12);
    }

    #[test]
    fn gram_cache_matches_interfaces() {
        let x = random_tt(&[3, 4, 3, 2], &[1, 3, 3, 2, 1], 9);
        let itf = x.interfaces(DEFAULT_DENSE_BUDGET).unwrap();
        let g = GramCache::new(&x);
        for j in 0..=4 {
            let l = itf.left(j).transpose() * itf.left(j);
            let r = itf.right(j).transpose() * itf.right(j);
            assert!((g.left(j) - l).norm() < 1e-12 * (1.0 + g.left(j).norm()));
            assert!((g.right(j) - r).norm() < 1e-12 * (1.0 + g.right(j).norm()));
        }
    }

    #[test]
    fn s_chain_squares_to_right_gram() {
        let x = random_tt(&[4, 3, 3, 4], &[1, 3, 4, 3, 1], 13);
        let g = GramCache::new(&x);
        let s = SChain::new(&x).unwrap();
        for j in 0..=4 {
            let sj = s.s(j);
            assert!((sj.transpose() * sj - g.right(j)).norm() < 1e-12 * (1.0 + g.right(j).norm()));
            for a in 0..sj.nrows() {
                assert!(sj[(a, a)] >= 0.0);
                for b in 0..a {
                    assert_eq!(sj[(a, b)], 0.0);
                }
            }
        }
    }

    #[test]
    fn left_orthogonalize_preserves_tensor() {
        let x = random_tt(&[3, 4, 3], &[1, 3, 2, 1], 17);
        let y = x.left_orthogonalize().unwrap();
        assert!(y.is_left_orthogonal());
        assert!((x.full().unwrap().sub(&y.full().unwrap()).unwrap()).norm() < 1e-12);
        for j in 0..2 {
            let l = y.core(j).left_unfolding();
            let r = l.ncols();
            assert!((l.transpose() * l - Mat::identity(r, r)).norm() < 1e-12);
        }
        // idempotent up to the sign convention
        let z = y.clone().with_flag(false).left_orthogonalize().unwrap();
        for j in 0..3 {
            assert!((z.core(j).left_unfolding() - y.core(j).left_unfolding()).norm() < 1e-12);
        }
    }

    #[test]
    fn left_orthogonalize_detects_deficiency() {
        let mut x = random_tt(&[3, 4, 3], &[1, 2, 2, 1], 19);
        // duplicate the two right columns of the first core
        for i in 0..3 {
            let v = x.core(0).get(0, i, 0);
            x.cores_mut()[0].set(0, i, 1, v);
        }
        assert!(matches!(x.left_orthogonalize(), Err(Error::RankDeficient { core: 0, .. })));
    }

    #[test]
    fn tt_svd_is_exact_for_low_rank_input() {
        let x = random_tt(&[4, 5, 3, 4], &[1, 3, 3, 2, 1], 23);
        let full = x.full().unwrap();
        let y = tt_svd(&full, &[1, 3, 3, 2, 1], 0.0).unwrap();
        assert_eq!(y.ranks(), vec![1, 3, 3, 2, 1]);
        let err = full.sub(&y.full().unwrap()).unwrap().norm() / full.norm();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn tt_svd_tolerance_bounds_error() {
        // low-rank signal plus small noise: the tolerance should strip the noise
        let base = random_tt(&[5, 6, 5], &[1, 2, 2, 1], 29).full().unwrap();
        let mut s = 30;
        let noise = 1e-3 * base.norm() / (150f64).sqrt();
        let vals = base.values().iter().map(|v| v + noise * lcg(&mut s)).collect();
        let t = DenseTensor::new(vec![5, 6, 5], vals).unwrap();
        let y = tt_svd(&t, &[1, 5, 5, 1], 0.01).unwrap();
        let err = t.sub(&y.full().unwrap()).unwrap().norm() / t.norm();
        assert!(err <= 0.01 + 1e-12);
        assert_eq!(y.ranks(), vec![1, 2, 2, 1]);
    }

    #[test]
    fn rounding_recovers_redundant_representation() {
        let x = random_tt(&[3, 4, 3, 3], &[1, 2, 3, 2, 1], 31);
        let doubled = x.add(&x).unwrap();
        assert_eq!(doubled.ranks(), vec![1, 4, 6, 4, 1]);
        let y = doubled.round(&[1, 2, 3, 2, 1], 1e-12).unwrap();
        assert_eq!(y.ranks(), vec![1, 2, 3, 2, 1]);
        let want = x.full().unwrap();
        let got = y.full().unwrap();
        let err =
            got.sub(&DenseTensor::new(want.dims().to_vec(), want.values().iter().map(|v| 2.0 * v).collect()).unwrap()).unwrap().norm();
        assert!(err < 1e-11 * want.norm());
    }

    #[test]
    fn dot_and_norm_agree_with_dense() {
        let x = random_tt(&[3, 4, 2], &[1, 2, 2, 1], 37);
        let y = random_tt(&[3, 4, 2], &[1, 3, 2, 1], 41);
        let fx = x.full().unwrap();
        let fy = y.full().unwrap();
        let dense: f64 = fx.values().iter().zip(fy.values()).map(|(a, b)| a * b).sum();
        assert!((x.dot(&y).unwrap() - dense).abs() < 1e-12);
        assert!((x.norm() - fx.norm()).abs() < 1e-12);
        let rel = x.relative_error(&y).unwrap();
        assert!((rel - fx.sub(&fy).unwrap().norm() / fy.norm()).abs() < 1e-12);
        assert!(x.relative_error(&x).unwrap() < 1e-14);
    }

    #[test]
    fn condition_number_matches_dense_unfoldings() {
        let x = random_tt(&[4, 3, 4, 3], &[1, 3, 4, 3, 1], 43);
        let full = x.full().unwrap();
        let mut hi = 0.0f64;
        let mut lo = f64::INFINITY;
        for k in 1..4 {
            let s = linalg::singular_values(&full.k_unfold(k).unwrap());
            let r = x.ranks()[k];
            hi = hi.max(s[0]);
            lo = lo.min(s[r - 1]);
            let fast = x.unfolding_singular_values(k).unwrap();
            for (a, b) in fast.iter().zip(&s) {
                assert!((a - b).abs() < 1e-10 * s[0]);
            }
        }
        assert!((x.condition_number() - hi / lo).abs() < 1e-8 * hi / lo);
    }

    #[test]
    fn linear_index_round_trip() {
        let dims = [3, 1, 4, 2];
        let mut idx = [0; 4];
        for lin in 0..24 {
            multi_index(&dims, lin, &mut idx);
            assert_eq!(linear_index(&dims, &idx).unwrap(), lin);
        }
        assert_eq!(linear_index(&dims, &[1, 0, 2, 1]).unwrap(), 1 + 3 * (0 + 1 * (2 + 4 * 1)));
    }

    #[test]
    fn feasibility_rules() {
        assert!(feasible_ranks(&[3, 3, 3], &[1, 3, 3, 1]));
        assert!(!feasible_ranks(&[2, 3, 3], &[1, 3, 3, 1]));
        assert!(!feasible_ranks(&[3, 3], &[1, 4, 1]));
    }
}
