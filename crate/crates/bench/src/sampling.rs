//! Observation sets.

use std::collections::HashSet;

use rand::Rng;
use ttq::completion::SampleSet;
use ttq::tt::{multi_index, TTTensor};

use crate::generators::rng_from_seed;
use crate::{BenchError, Result};

/// Dimension of the manifold of tensor trains with the given ranks,
/// `Σ r_{k-1} n_k r_k - Σ_{k=1}^{d-1} r_k²`.
pub fn manifold_dim(dims: &[usize], ranks: &[usize]) -> usize {
    let params: usize = (0..dims.len()).map(|j| ranks[j] * dims[j] * ranks[j + 1]).sum();
    let gauge: usize = ranks[1..dims.len()].iter().map(|r| r * r).sum();
    params - gauge
}

fn total(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| BenchError::Spec(format!("tensor of size {dims:?} has too many entries to index")))
}

/// Number of observations for oversampling ratio `os`, rounded to the nearest
/// integer.
pub fn os_count(dims: &[usize], ranks: &[usize], os: f64) -> Result<usize> {
    let m = (os * manifold_dim(dims, ranks) as f64).round();
    let n = total(dims)?;
    if !(m >= 1.0) || m > n as f64 {
        return Err(BenchError::Spec(format!("oversampling {os} asks for {m} of {n} entries")));
    }
    Ok(m as usize)
}

/// `count` distinct multi-indices drawn uniformly, flattened and sorted by
/// linear (first-index-fastest) position.
pub fn sample_omega(dims: &[usize], count: usize, seed: u64) -> Result<Vec<usize>> {
    let n = total(dims)?;
    if count == 0 || count > n {
        return Err(BenchError::Spec(format!("cannot draw {count} distinct entries out of {n}")));
    }
    let mut rng = rng_from_seed(seed);
    let mut lin = rand::seq::index::sample(&mut rng, n, count).into_vec();
    lin.sort_unstable();
    Ok(flatten(dims, &lin))
}

/// Like [`sample_omega`] but avoiding the linear positions in `exclude`.
pub fn sample_disjoint(dims: &[usize], count: usize, exclude: &HashSet<usize>, seed: u64) -> Result<Vec<usize>> {
    let n = total(dims)?;
    if count == 0 || count + exclude.len() > n {
        return Err(BenchError::Spec(format!("cannot draw {count} entries disjoint from {} out of {n}", exclude.len())));
    }
    let mut rng = rng_from_seed(seed);
    let mut chosen = Vec::with_capacity(count);
    let mut seen = HashSet::with_capacity(count);
    while chosen.len() < count {
        let l = rng.random_range(0..n);
        if !exclude.contains(&l) && seen.insert(l) {
            chosen.push(l);
        }
    }
    chosen.sort_unstable();
    Ok(flatten(dims, &chosen))
}

/// Linear positions of flattened multi-indices.
pub fn linear_positions(dims: &[usize], flat: &[usize]) -> HashSet<usize> {
    flat.chunks(dims.len()).map(|idx| idx.iter().zip(dims).rev().fold(0usize, |acc, (&i, &n)| acc * n + i)).collect()
}

fn flatten(dims: &[usize], lin: &[usize]) -> Vec<usize> {
    let d = dims.len();
    let mut idx = vec![0; d];
    let mut flat = Vec::with_capacity(lin.len() * d);
    for &l in lin {
        multi_index(dims, l, &mut idx);
        flat.extend_from_slice(&idx);
    }
    flat
}

/// Observations of a tensor train on random positions.
pub fn observe_tt(truth: &TTTensor, count: usize, seed: u64) -> Result<SampleSet> {
    let flat = sample_omega(&truth.dims(), count, seed)?;
    Ok(SampleSet::from_tt(truth, flat)?)
}

/// Observations of an entry-wise defined tensor on given positions.
pub fn observe_fn(dims: &[usize], flat: Vec<usize>, f: impl Fn(&[usize]) -> f64) -> Result<SampleSet> {
    let values = flat.chunks(dims.len()).map(&f).collect();
    Ok(SampleSet::from_flat(dims.to_vec(), flat, values)?)
}
