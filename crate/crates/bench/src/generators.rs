//! Test tensors: Gaussian tensor trains, order-3 trains with a prescribed
//! condition number, and discretised smooth functions.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ttq::linalg::{qr_thin, Mat};
use ttq::tt::{feasible_ranks, Core, DenseTensor, TTTensor};

use crate::{BenchError, Result};

/// Relative tolerance for the condition-number check of [`gen_fixed_kappa`].
pub const KAPPA_TOLERANCE: f64 = 1e-6;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tensor train with independent standard normal core entries.
pub fn gen_random_tt(dims: &[usize], ranks: &[usize], seed: u64) -> Result<TTTensor> {
    random_tt_with(&mut rng_from_seed(seed), dims, ranks)
}

pub(crate) fn random_tt_with<R: Rng>(rng: &mut R, dims: &[usize], ranks: &[usize]) -> Result<TTTensor> {
    if dims.is_empty() || ranks.len() != dims.len() + 1 || !feasible_ranks(dims, ranks) {
        return Err(BenchError::Spec(format!("ranks {ranks:?} are infeasible for dims {dims:?}")));
    }
    let cores = (0..dims.len()).map(|j| Core::from_fn(ranks[j], dims[j], ranks[j + 1], |_, _, _| StandardNormal.sample(rng))).collect();
    Ok(TTTensor::new(cores)?)
}

fn random_orthonormal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    let g = DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
    qr_thin(&g).0
}

/// Order-3 tensor train with ranks `(1, r, r, 1)` and condition number `kappa`.
///
/// The first core is a random orthonormal `n_1 × r` matrix, the second a
/// superdiagonal tensor multiplied by random orthonormal factors in all three
/// modes, and the third `X Σ Y^T` with `Σ` linearly spaced from 1 to `1/κ`.
/// The condition number of the output is verified before returning.
pub fn gen_fixed_kappa(dims: &[usize], r: usize, kappa: f64, seed: u64) -> Result<TTTensor> {
    if dims.len() != 3 {
        return Err(BenchError::Spec(format!("the fixed-condition generator needs order 3, got {}", dims.len())));
    }
    if !(kappa >= 1.0) || !kappa.is_finite() {
        return Err(BenchError::Spec(format!("condition number must be finite and at least 1, got {kappa}")));
    }
    if r == 0 || dims.iter().any(|&n| n < r) {
        return Err(BenchError::Spec(format!("rank {r} must not exceed any mode size in {dims:?}")));
    }
    let mut rng = rng_from_seed(seed);
    let first = random_orthonormal(&mut rng, dims[0], r);
    let u = random_orthonormal(&mut rng, r, r);
    let v = random_orthonormal(&mut rng, dims[1], r);
    let w = random_orthonormal(&mut rng, r, r);
    let x = random_orthonormal(&mut rng, r, r);
    let y = random_orthonormal(&mut rng, dims[2], r);
    let sigma: Vec<f64> = (0..r).map(|k| if r == 1 { 1.0 } else { 1.0 - (1.0 - 1.0 / kappa) * k as f64 / (r - 1) as f64 }).collect();
    let c1 = Core::from_fn(1, dims[0], r, |_, i, b| first[(i, b)]);
    let c2 = Core::from_fn(r, dims[1], r, |a, j, b| (0..r).map(|k| u[(a, k)] * v[(j, k)] * w[(b, k)]).sum());
    let third = &x * Mat::from_diagonal(&nalgebra::DVector::from_vec(sigma)) * y.transpose();
    let c3 = Core::from_fn(r, dims[2], 1, |a, l, _| third[(a, l)]);
    let t = TTTensor::new(vec![c1, c2, c3])?;
    let found = t.condition_number();
    if (found - kappa).abs() > KAPPA_TOLERANCE * kappa {
        return Err(BenchError::Conditioning { expected: kappa, found });
    }
    Ok(t)
}

/// The two discretised functions used for interpolation experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FunctionKind {
    /// `exp(-sqrt(Σ (i_k / (n_k - 1))²))` with zero-based `i_k`.
    ExpSqrt,
    /// `1 / sqrt(Σ i_k²)` with one-based `i_k`.
    InvNorm,
}

impl std::str::FromStr for FunctionKind {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "expsqrt" | "exp" | "t1" => Ok(FunctionKind::ExpSqrt),
            "invnorm" | "inv" | "t2" => Ok(FunctionKind::InvNorm),
            _ => Err(BenchError::Spec(format!("unknown function '{s}' (expected exp-sqrt or inv-norm)"))),
        }
    }
}

impl std::fmt::Display for FunctionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FunctionKind::ExpSqrt => "exp-sqrt",
            FunctionKind::InvNorm => "inv-norm",
        })
    }
}

/// Value of the function tensor at a zero-based multi-index.
pub fn function_value(kind: FunctionKind, dims: &[usize], idx: &[usize]) -> f64 {
    match kind {
        FunctionKind::ExpSqrt => {
            let s: f64 = idx
                .iter()
                .zip(dims)
                .map(|(&i, &n)| {
                    let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                    t * t
                })
                .sum();
            (-s.sqrt()).exp()
        }
        FunctionKind::InvNorm => {
            let s: f64 = idx.iter().map(|&i| ((i + 1) * (i + 1)) as f64).sum();
            1.0 / s.sqrt()
        }
    }
}

/// Dense function tensor (subject to the dense budget).
pub fn gen_function_tensor(kind: FunctionKind, dims: &[usize], budget: usize) -> Result<DenseTensor> {
    Ok(DenseTensor::from_fn(dims.to_vec(), budget, |idx| function_value(kind, dims, idx))?)
}

/// Gaussian cores rescaled so that `||X||` equals `target_norm`.
pub fn random_init(dims: &[usize], ranks: &[usize], target_norm: f64, seed: u64) -> Result<TTTensor> {
    let x = gen_random_tt(dims, ranks, seed)?;
    let n = x.norm();
    Ok(if n > 0.0 { x.scaled(target_norm / n) } else { x })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ttq::tt::DEFAULT_DENSE_BUDGET;

    #[test]
    fn random_tt_is_deterministic_and_full_rank() {
        let a = gen_random_tt(&[5, 6, 4], &[1, 3, 2, 1], 7).unwrap();
        let b = gen_random_tt(&[5, 6, 4], &[1, 3, 2, 1], 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_random_tt(&[5, 6, 4], &[1, 3, 2, 1], 8).unwrap());
        assert!(gen_random_tt(&[2, 2], &[1, 3, 1], 0).is_err());
        for seed in 0..100 {
            let x = gen_random_tt(&[4, 5, 4], &[1, 3, 3, 1], seed).unwrap();
            assert!(x.left_orthogonalize().is_ok(), "seed {seed}");
            assert!(x.condition_number().is_finite());
        }
    }

    #[test]
    fn gaussian_trains_are_moderately_conditioned() {
        let mut k: Vec<f64> = (0..100).map(|s| gen_random_tt(&[100, 100, 100], &[1, 5, 5, 1], s).unwrap().condition_number()).collect();
        k.sort_by(f64::total_cmp);
        let median = 0.5 * (k[49] + k[50]);
        assert!((1.0..=10.0).contains(&median), "median condition number {median}");
    }

    #[test]
    fn fixed_kappa_hits_target() {
        for (kappa, seed) in [(1.0, 1), (50.0, 2), (600.0, 3)] {
            let t = gen_fixed_kappa(&[12, 10, 11], 4, kappa, seed).unwrap();
            assert!((t.condition_number() - kappa).abs() <= KAPPA_TOLERANCE * kappa);
            let l = t.core(0).left_unfolding();
            assert!((l.transpose() * &l - Mat::identity(4, 4)).norm() < 1e-12);
        }
        assert!(gen_fixed_kappa(&[5, 5, 5, 5], 2, 10.0, 0).is_err());
        assert!(gen_fixed_kappa(&[5, 5, 5], 2, 0.5, 0).is_err());
    }

    #[test]
    fn function_tensors_spot_values() {
        let dims = [7, 5, 9, 4];
        let t2 = gen_function_tensor(FunctionKind::InvNorm, &dims, DEFAULT_DENSE_BUDGET).unwrap();
        assert!((t2.get(&[0, 0, 0, 0]).unwrap() - 0.5).abs() < 1e-15);
        let t1 = gen_function_tensor(FunctionKind::ExpSqrt, &dims, DEFAULT_DENSE_BUDGET).unwrap();
        assert_eq!(t1.get(&[0, 0, 0, 0]).unwrap(), 1.0);
        let mut r = rng_from_seed(5);
        for _ in 0..20 {
            let idx: Vec<usize> = dims.iter().map(|&n| r.random_range(0..n)).collect();
            let s: f64 = idx.iter().zip(&dims).map(|(&i, &n)| (i as f64 / (n - 1) as f64).powi(2)).sum();
            assert_eq!(t1.get(&idx).unwrap(), (-s.sqrt()).exp());
            let q: f64 = idx.iter().map(|&i| ((i + 1) as f64).powi(2)).sum();
            assert_eq!(t2.get(&idx).unwrap(), 1.0 / q.sqrt());
        }
    }

    #[test]
    fn exp_sqrt_unfolding_decays_fast() {
        let t = gen_function_tensor(FunctionKind::ExpSqrt, &[20, 20, 20, 20], DEFAULT_DENSE_BUDGET).unwrap();
        let s = ttq::linalg::singular_values(&t.k_unfold(1).unwrap());
        assert!(s[4] / s[0] < 1e-3, "{}", s[4] / s[0]);
    }
}
