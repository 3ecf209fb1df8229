//! The completion problem: observed entries, residuals and the sample-driven
//! contractions every solver relies on.
//!
//! All loops over the sample set are split into fixed-size chunks that are
//! processed in parallel and then reduced in chunk order, so results are
//! bitwise reproducible regardless of the number of worker threads.

use std::collections::HashSet;

use rayon::prelude::*;

use crate::tt::{Core, DenseTensor, TTTensor};
use crate::{Error, Result};

/// Number of samples handled by one parallel work item.
pub const CHUNK: usize = 2048;

/// A set of distinct observed entries with their values.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    dims: Vec<usize>,
    /// Zero-based multi-indices, `d` consecutive entries per sample.
    idx: Vec<usize>,
    values: Vec<f64>,
}

impl SampleSet {
    /// Build a sample set from flat multi-indices (`d` entries per sample).
    pub fn from_flat(dims: Vec<usize>, idx: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let d = dims.len();
        if d == 0 {
            return Err(Error::InvalidSamples("order must be positive".into()));
        }
        if idx.len() != d * values.len() {
            return Err(Error::InvalidSamples(format!("{} index entries for {} values of an order-{d} tensor", idx.len(), values.len())));
        }
        if values.is_empty() {
            return Err(Error::InvalidSamples("empty sample set".into()));
        }
        let mut seen = HashSet::with_capacity(values.len());
        for s in idx.chunks_exact(d) {
            if s.iter().zip(&dims).any(|(i, n)| i >= n) {
                return Err(Error::IndexOutOfBounds { index: s.to_vec(), dims: dims.clone() });
            }
            if !seen.insert(s) {
                return Err(Error::InvalidSamples(format!("duplicate index {s:?}")));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSamples("non-finite observed value".into()));
        }
        Ok(SampleSet { dims, idx, values })
    }

    /// Observe a tensor train at the given flat multi-indices.
    pub fn from_tt(truth: &TTTensor, idx: Vec<usize>) -> Result<Self> {
        let dims = truth.dims();
        let d = dims.len();
        if idx.len() % d != 0 {
            return Err(Error::InvalidSamples("index buffer length not a multiple of the order".into()));
        }
        if idx.chunks_exact(d).any(|s| s.iter().zip(&dims).any(|(i, n)| i >= n)) {
            return Err(Error::InvalidSamples("index out of range".into()));
        }
        let values = evaluate_indices(truth, &idx);
        SampleSet::from_flat(dims, idx, values)
    }

    /// Observe a dense tensor at the given flat multi-indices.
    pub fn from_dense(truth: &DenseTensor, idx: Vec<usize>) -> Result<Self> {
        let d = truth.order();
        let values = idx.chunks(d).map(|s| truth.get(s)).collect::<Result<Vec<_>>>()?;
        SampleSet::from_flat(truth.dims().to_vec(), idx, values)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }
    pub fn order(&self) -> usize {
        self.dims.len()
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn index(&self, s: usize) -> &[usize] {
        let d = self.order();
        &self.idx[d * s..d * (s + 1)]
    }
    pub fn flat_indices(&self) -> &[usize] {
        &self.idx
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `||P_Ω T||`.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Same index set, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::InvalidSamples("value count does not match index count".into()));
        }
        Ok(SampleSet { dims: self.dims.clone(), idx: self.idx.clone(), values })
    }

    /// Sampling ratio `|Ω| / prod(n)`.
    pub fn sampling_ratio(&self) -> f64 {
        self.len() as f64 / self.dims.iter().map(|&n| n as f64).product::<f64>()
    }

    fn check_compatible(&self, x: &TTTensor) -> Result<()> {
        if x.dims() != self.dims {
            return Err(Error::Shape(format!("tensor {:?} vs samples {:?}", x.dims(), self.dims)));
        }
        Ok(())
    }
}

fn evaluate_indices(x: &TTTensor, idx: &[usize]) -> Vec<f64> {
    let d = x.order();
    idx.par_chunks(d * CHUNK)
        .map(|chunk| {
            let mut v = Vec::new();
            let mut w = Vec::new();
            chunk.chunks_exact(d).map(|s| x.entry_unchecked(s, &mut v, &mut w)).collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .concat()
}

/// `P_Ω X`: the tensor evaluated at every sample.
pub fn evaluate(x: &TTTensor, samples: &SampleSet) -> Result<Vec<f64>> {
    samples.check_compatible(x)?;
    Ok(evaluate_indices(x, &samples.idx))
}

/// Sparse residual `P_Ω X - P_Ω T`.
pub fn residual(x: &TTTensor, samples: &SampleSet) -> Result<Vec<f64>> {
    let mut r = evaluate(x, samples)?;
    r.iter_mut().zip(&samples.values).for_each(|(a, b)| *a -= b);
    Ok(r)
}

/// Least-squares objective `½ ||residual||²`.
pub fn objective(residual: &[f64]) -> f64 {
    0.5 * residual.iter().map(|v| v * v).sum::<f64>()
}

/// Per-sample partial products of the cores.
///
/// For core `j`, `prefix[j]` (length `r_j`) is the product of slices of cores
/// `0..j` and `suffix[j + 1]` (length `r_{j+1}`) the product of cores `j+1..d`.
struct Chains {
    prefix: Vec<Vec<f64>>,
    suffix: Vec<Vec<f64>>,
}

impl Chains {
    fn new(x: &TTTensor) -> Self {
        let ranks = x.ranks();
        Chains { prefix: ranks.iter().map(|&r| vec![0.0; r]).collect(), suffix: ranks.iter().map(|&r| vec![0.0; r]).collect() }
    }

    fn fill(&mut self, x: &TTTensor, idx: &[usize]) {
        let d = x.order();
        self.prefix[0][0] = 1.0;
        for j in 0..d {
            let core = x.core(j);
            let (l, n, r) = core.shape();
            let i = idx[j];
            let data = core.as_slice();
            let (head, tail) = self.prefix.split_at_mut(j + 1);
            let p = &head[j];
            for (b, out) in tail[0].iter_mut().enumerate().take(r) {
                let off = l * (i + n * b);
                *out = data[off..off + l].iter().zip(p).map(|(u, v)| u * v).sum();
            }
        }
        self.suffix[d][0] = 1.0;
        for j in (0..d).rev() {
            let core = x.core(j);
            let (l, n, r) = core.shape();
            let i = idx[j];
            let data = core.as_slice();
            let (head, tail) = self.suffix.split_at_mut(j + 1);
            let q = &tail[0];
            let out = &mut head[j];
            out.iter_mut().for_each(|v| *v = 0.0);
            for (b, &qb) in q.iter().enumerate().take(r) {
                let off = l * (i + n * b);
                for (o, &c) in out.iter_mut().zip(&data[off..off + l]) {
                    *o += c * qb;
                }
            }
        }
    }
}

/// Contract sample weights `z` against the interface frames of `x`.
///
/// Returns, for every core position `j`, a core-shaped array with entries
/// `G_j(a, i, b) = Σ_{s: i_j(s) = i} z_s X^{<=j}[i_{<j}(s), a] X^{>j}[i_{>j}(s), b]`,
/// which is `L(G_j) = (I ⊗ X^{<=j})^T Z_{<j+1>} X^{>=j+1}` for the sparse tensor `Z`.
pub fn frame_contraction(x: &TTTensor, samples: &SampleSet, z: &[f64]) -> Result<Vec<Core>> {
    samples.check_compatible(x)?;
    if z.len() != samples.len() {
        return Err(Error::Shape(format!("{} weights for {} samples", z.len(), samples.len())));
    }
    let d = x.order();
    let zeros = || x.cores().iter().map(|c| Core::zeros(c.left_rank(), c.mode_size(), c.right_rank())).collect::<Vec<_>>();
    let partials: Vec<Vec<Core>> = samples
        .idx
        .par_chunks(d * CHUNK)
        .zip(z.par_chunks(CHUNK))
        .map(|(idx, zc)| {
            let mut acc = zeros();
            let mut ch = Chains::new(x);
            for (s, &w) in idx.chunks_exact(d).zip(zc) {
                if w == 0.0 {
                    continue;
                }
                ch.fill(x, s);
                for (j, g) in acc.iter_mut().enumerate() {
                    let (l, n, r) = g.shape();
                    let i = s[j];
                    let p = &ch.prefix[j];
                    let q = &ch.suffix[j + 1];
                    let data = g.as_mut_slice();
                    for (b, &qb) in q.iter().enumerate().take(r) {
                        let wq = w * qb;
                        let off = l * (i + n * b);
                        for (o, &pa) in data[off..off + l].iter_mut().zip(p) {
                            *o += wq * pa;
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = zeros();
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            t.axpy(1.0, p);
        }
    }
    Ok(total)
}

/// Evaluate a first-order variation `Σ_j X_1 ... δ_j ... X_d` at every sample.
///
/// `deltas[j]` must have the shape of core `j`.
pub fn tangent_apply_on_samples(x: &TTTensor, deltas: &[Core], samples: &SampleSet) -> Result<Vec<f64>> {
    samples.check_compatible(x)?;
    let d = x.order();
    if deltas.len() != d || deltas.iter().zip(x.cores()).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::Shape("variation cores do not match the base point".into()));
    }
    let out = samples
        .idx
        .par_chunks(d * CHUNK)
        .map(|idx| {
            let mut ch = Chains::new(x);
            idx.chunks_exact(d)
                .map(|s| {
                    ch.fill(x, s);
                    let mut v = 0.0;
                    for (j, delta) in deltas.iter().enumerate() {
                        let (l, n, r) = delta.shape();
                        let data = delta.as_slice();
                        let p = &ch.prefix[j];
                        let q = &ch.suffix[j + 1];
                        for (b, &qb) in q.iter().enumerate().take(r) {
                            let off = l * (s[j] + n * b);
                            let inner: f64 = data[off..off + l].iter().zip(p).map(|(u, w)| u * w).sum();
                            v += inner * qb;
                        }
                    }
                    v
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .concat();
    Ok(out)
}

/// Minimiser of the linearised objective `α ↦ ½ ||residual + α P_Ω ξ||²`.
///
/// Fails with [`Error::InvisibleDirection`] if the direction vanishes on Ω.
pub fn linearized_step(x: &TTTensor, deltas: &[Core], samples: &SampleSet, residual: &[f64]) -> Result<f64> {
    let pxi = tangent_apply_on_samples(x, deltas, samples)?;
    step_from_sampled_direction(&pxi, residual)
}

/// Same as [`linearized_step`] when `P_Ω ξ` is already available.
pub fn step_from_sampled_direction(pxi: &[f64], residual: &[f64]) -> Result<f64> {
    let den: f64 = pxi.iter().map(|v| v * v).sum();
    if den <= f64::MIN_POSITIVE {
        return Err(Error::InvisibleDirection);
    }
    let num: f64 = pxi.iter().zip(residual).map(|(a, b)| a * b).sum();
    Ok(-num / den)
}
