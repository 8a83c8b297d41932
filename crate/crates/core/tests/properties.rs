//! Randomized invariants.

use colanet::attention::{fuse_branches, AffineVars, FusionVars};
use colanet::degradation::Rng;
use colanet::patch::{fold, unfold};
use colanet::training::{augment, inverse_mode};
use colanet::{Graph, PatchGeometry, Tensor};
use proptest::prelude::*;

/// Geometries whose grid ends exactly on the border, strides up to the patch side.
fn covering_geometry() -> impl Strategy<Value = PatchGeometry> {
    (1usize..=3, 1usize..=5, 1usize..=5, 0usize..=4, 0usize..=4).prop_flat_map(|(c, ph, pw, gh, gw)| {
        (1usize..=ph.min(pw)).prop_map(move |s| {
            PatchGeometry::new(c, ph + gh * s, pw + gw * s, ph, pw, s).unwrap()
        })
    })
}

fn tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = Rng::new(seed, 3);
    Tensor::from_fn(shape, |_| scale * rng.gaussian())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fold_inverts_unfold(g in covering_geometry(), seed in any::<u64>()) {
        let x = tensor(&[1, g.channels, g.height, g.width], seed, 10.0);
        let back = fold(&unfold(&x, g).unwrap()).unwrap();
        prop_assert!(back.coverage.iter().all(|&c| c));
        prop_assert!(back.image.max_abs_diff(&x) <= 1e-12);
    }

    #[test]
    fn coverage_matches_brute_force(
        (h, w, ph, pw, s) in (1usize..=12, 1usize..=12).prop_flat_map(|(h, w)| (Just(h), Just(w), 1..=h, 1..=w, 1usize..=4))
    ) {
        let g = PatchGeometry::new(1, h, w, ph, pw, s).unwrap();
        let counts = g.coverage_counts();
        for y in 0..h {
            for x in 0..w {
                let mut n = 0;
                let mut top = 0;
                while top + ph <= h {
                    let mut left = 0;
                    while left + pw <= w {
                        if (top..top + ph).contains(&y) && (left..left + pw).contains(&x) {
                            n += 1;
                        }
                        left += s;
                    }
                    top += s;
                }
                prop_assert_eq!(counts[y * w + x], n);
            }
        }
    }

    #[test]
    fn unfold_is_linear(g in covering_geometry(), seed in any::<u64>(), a in -3.0f64..3.0) {
        let shape = [1, g.channels, g.height, g.width];
        let (x, y) = (tensor(&shape, seed, 1.0), tensor(&shape, seed ^ 1, 1.0));
        let combo = x.zip_map(&y, |p, q| a * p + q).unwrap();
        let lhs = unfold(&combo, g).unwrap().patches;
        let (ux, uy) = (unfold(&x, g).unwrap().patches, unfold(&y, g).unwrap().patches);
        let rhs = ux.zip_map(&uy, |p, q| a * p + q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        n in 1usize..5, len in 1usize..9, seed in any::<u64>(), shift in -50.0f64..50.0
    ) {
        let x = tensor(&[n, len], seed, 8.0);
        let g = Graph::new();
        let a = g.input(x.clone());
        let b = g.input(x.map(|v| v + shift));
        let pa = g.value(g.softmax(a, 1).unwrap()).clone();
        let pb = g.value(g.softmax(b, 1).unwrap()).clone();
        for row in pa.data().chunks(len) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        prop_assert!(pa.max_abs_diff(&pb) <= 1e-12);
    }

    #[test]
    fn fusion_weights_sum_to_one(c in 1usize..6, seed in any::<u64>()) {
        let g = Graph::new();
        let a = g.input(tensor(&[2, c, 3, 3], seed, 1.0));
        let b = g.input(tensor(&[2, c, 3, 3], seed ^ 5, 1.0));
        let aff = |k: u64| AffineVars { weight: g.param(tensor(&[c, c], seed ^ k, 1.0)), bias: g.param(tensor(&[c], seed ^ (k + 1), 1.0)) };
        let p = FusionVars { fc1: aff(10), fc2: aff(20) };
        let (_, w) = fuse_branches(&g, a, b, &p).unwrap();
        for (x, y) in w.w_nl.data().iter().zip(w.w_l.data()) {
            prop_assert!((x + y - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn augmentation_inverse_restores(mode in 0u8..8, n in 1usize..6, seed in any::<u64>()) {
        let x = tensor(&[1, 2, n, n], seed, 1.0);
        let back = augment(&augment(&x, mode).unwrap(), inverse_mode(mode)).unwrap();
        prop_assert_eq!(back, x);
    }
}
