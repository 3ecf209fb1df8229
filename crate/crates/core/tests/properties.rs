//! Randomised invariants.

mod common;

use common::*;
use proptest::prelude::*;
use ttq::io::{read_samples, read_tt, tt_from_json, tt_to_json, write_samples, write_tt};
use ttq::quotient::{metric, project_horizontal, project_vertical, CoreDirection};
use ttq::tt::{Core, GramCache, TTTensor};

/// Shapes with feasible ranks: dims in 2..=4, ranks in 1..=3 capped by the
/// unfolding sizes.
fn shape() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, u64)> {
    (2usize..=4).prop_flat_map(|d| (prop::collection::vec(2usize..=4, d), prop::collection::vec(1usize..=3, d - 1), any::<u64>())).prop_map(
        |(dims, inner, seed)| {
            let d = dims.len();
            let mut ranks = vec![1; d + 1];
            ranks[1..d].copy_from_slice(&inner);
            // shrink until every core satisfies r_{k-1} <= n_k r_k and r_k <= n_k r_{k-1}
            loop {
                let mut changed = false;
                for k in 1..=d {
                    let cap = ranks[k - 1] * dims[k - 1];
                    if ranks[k] > cap {
                        ranks[k] = cap;
                        changed = true;
                    }
                    let cap = ranks[k] * dims[k - 1];
                    if ranks[k - 1] > cap {
                        ranks[k - 1] = cap;
                        changed = true;
                    }
                }
                if !changed {
                    break;
                }
            }
            (dims, ranks, seed)
        },
    )
}

fn random_direction(r: &mut rand_chacha::ChaCha8Rng, x: &TTTensor) -> CoreDirection {
    let blocks = x.cores().iter().map(|c| {
        let (l, n, rr) = c.shape();
        Core::from_fn(l, n, rr, |_, _, _| rand_distr::Distribution::sample(&rand_distr::StandardNormal, r))
    });
    CoreDirection::from_blocks(x, blocks.collect()).unwrap()
}

fn rel_full(a: &TTTensor, b: &TTTensor) -> f64 {
    let fa = a.full().unwrap();
    let fb = b.full().unwrap();
    fa.sub(&fb).unwrap().norm() / fb.norm()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn unfoldings_are_inverse_pairs((dims, ranks, seed) in shape()) {
        let x = random_tt(&mut rng(seed), &dims, &ranks);
        for c in x.cores() {
            let (l, n, r) = c.shape();
            prop_assert_eq!(&Core::from_left_unfolding(&c.left_unfolding(), l, n).unwrap(), c);
            prop_assert_eq!(&Core::from_right_unfolding(&c.right_unfolding(), n, r).unwrap(), c);
        }
    }

    #[test]
    fn entries_agree_with_full_tensor((dims, ranks, seed) in shape()) {
        let x = random_tt(&mut rng(seed), &dims, &ranks);
        let full = x.full().unwrap();
        let mut idx = vec![0; dims.len()];
        for lin in 0..full.numel() {
            ttq::tt::multi_index(&dims, lin, &mut idx);
            let e = x.entry(&idx).unwrap();
            prop_assert!((e - full.values()[lin]).abs() <= 1e-13 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn left_orthogonalization_preserves_tensor((dims, ranks, seed) in shape()) {
        let x = random_tt(&mut rng(seed), &dims, &ranks);
        let y = x.left_orthogonalize().unwrap();
        prop_assert!(rel_full(&y, &x) < 1e-11);
        let g = GramCache::new(&y);
        for j in 1..dims.len() {
            let gj = g.left(j);
            let err = (gj - nalgebra::DMatrix::identity(gj.nrows(), gj.ncols())).norm();
            prop_assert!(err < 1e-12, "orthogonality residual {}", err);
        }
    }

    #[test]
    fn rounding_to_own_ranks_preserves_tensor((dims, ranks, seed) in shape()) {
        let x = random_tt(&mut rng(seed), &dims, &ranks);
        let y = x.round(&ranks, 0.0).unwrap();
        prop_assert!(rel_full(&y, &x) < 1e-11);
        prop_assert!(y.ranks().iter().zip(&ranks).all(|(a, b)| a <= b));
    }

    #[test]
    fn horizontal_and_vertical_projections_split_directions((dims, ranks, seed) in shape()) {
        let mut r = rng(seed);
        let x = random_tt(&mut r, &dims, &ranks);
        let cache = GramCache::new(&x);
        let xi = random_direction(&mut r, &x);
        let eta = random_direction(&mut r, &x);
        let h = project_horizontal(&x, &cache, &xi).unwrap();
        let v = project_vertical(&x, &cache, &xi).unwrap();
        let scale = xi.norm().max(1.0);
        // complementarity
        let mut sum = h.clone();
        sum.axpy(1.0, &v);
        prop_assert!(sum.sub(&xi).norm() <= 1e-9 * scale);
        // idempotence
        let hh = project_horizontal(&x, &cache, &h).unwrap();
        prop_assert!(hh.sub(&h).norm() <= 1e-9 * scale);
        // metric orthogonality and symmetry
        let nrm = (metric(&cache, &h, &h) * metric(&cache, &v, &v)).sqrt().max(1.0);
        prop_assert!(metric(&cache, &h, &v).abs() <= 1e-9 * nrm);
        let a = metric(&cache, &xi, &eta);
        let b = metric(&cache, &eta, &xi);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        prop_assert!(metric(&cache, &xi, &xi) > 0.0);
    }

    #[test]
    fn containers_round_trip_exactly((dims, ranks, seed) in shape(), orth in any::<bool>()) {
        let mut x = random_tt(&mut rng(seed), &dims, &ranks);
        if orth {
            x = x.left_orthogonalize().unwrap();
        }
        let mut buf = Vec::new();
        write_tt(&x, &mut buf).unwrap();
        prop_assert_eq!(&read_tt(buf.as_slice()).unwrap(), &x);
        prop_assert_eq!(&tt_from_json(&tt_to_json(&x).unwrap()).unwrap(), &x);
    }

    #[test]
    fn sample_files_round_trip_exactly((dims, ranks, seed) in shape(), frac in 0.05f64..1.0) {
        let mut r = rng(seed);
        let x = random_tt(&mut r, &dims, &ranks);
        let total: usize = dims.iter().product();
        let m = ((frac * total as f64) as usize).max(1);
        let s = random_samples(&mut r, &x, m);
        let mut buf = Vec::new();
        write_samples(&s, &mut buf).unwrap();
        let back = read_samples(buf.as_slice()).unwrap();
        prop_assert_eq!(back.flat_indices(), s.flat_indices());
        prop_assert_eq!(back.values(), s.values());
    }
}
