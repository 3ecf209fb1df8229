#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ttq::completion::SampleSet;
use ttq::tt::{multi_index, Core, TTTensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tt(rng: &mut ChaCha8Rng, dims: &[usize], ranks: &[usize]) -> TTTensor {
    let cores = (0..dims.len()).map(|j| Core::from_fn(ranks[j], dims[j], ranks[j + 1], |_, _, _| StandardNormal.sample(rng))).collect();
    TTTensor::new(cores).unwrap()
}

pub fn random_indices(rng: &mut ChaCha8Rng, dims: &[usize], m: usize) -> Vec<usize> {
    let total: usize = dims.iter().product();
    let mut lin = rand::seq::index::sample(rng, total, m).into_vec();
    lin.sort_unstable();
    let mut idx = vec![0; dims.len()];
    let mut flat = Vec::with_capacity(m * dims.len());
    for l in lin {
        multi_index(dims, l, &mut idx);
        flat.extend_from_slice(&idx);
    }
    flat
}

pub fn random_samples(rng: &mut ChaCha8Rng, t: &TTTensor, m: usize) -> SampleSet {
    let flat = random_indices(rng, &t.dims(), m);
    SampleSet::from_tt(t, flat).unwrap()
}

/// Manifold dimension `Σ r_{k-1} n_k r_k - Σ_{k=1}^{d-1} r_k²`.
pub fn manifold_dim(dims: &[usize], ranks: &[usize]) -> usize {
    let p: usize = (0..dims.len()).map(|j| ranks[j] * dims[j] * ranks[j + 1]).sum();
    let g: usize = ranks[1..dims.len()].iter().map(|r| r * r).sum();
    p - g
}

/// `truth` plus a relative perturbation of size `eps`, rounded back to the ranks of `truth`.
pub fn perturbed(rng: &mut ChaCha8Rng, truth: &TTTensor, eps: f64) -> TTTensor {
    let p = random_tt(rng, &truth.dims(), &truth.ranks());
    let p = p.scaled(eps * truth.norm() / p.norm());
    truth.add(&p).unwrap().round(&truth.ranks(), 0.0).unwrap()
}
