//! Property tests for the numeric invariants that hold for all inputs,
//! not just the hand-picked cases in the unit tests.

use proptest::prelude::*;

use adsmpc::autodiff::Tensor;
use adsmpc::closed_loop::clamp_controls;
use adsmpc::dataset::{split_dataset, ExampleCase, SplitMode};
use adsmpc::feeder::{tap_position, tap_value, TAP_MAX, TAP_MIN, TAP_POSITIONS};
use adsmpc::layers::{single_head_attention, AttentionParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn finite_f64() -> impl Strategy<Value = f64> {
    (-1e3f64..1e3).prop_filter("finite", |v| v.is_finite())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// softmax rows sum to one, stay in (0,1), and are invariant under a
    /// constant shift of a row.
    #[test]
    fn softmax_rows_normalized_and_shift_invariant(
        rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 1..6), 1..5),
        shift in -50.0f64..50.0,
    ) {
        let n = rows[0].len();
        prop_assume!(rows.iter().all(|r| r.len() == n));
        let m = rows.len();
        let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
        let x = Tensor::leaf(&[m, n], flat.clone()).unwrap();
        let s = x.softmax_rows().unwrap().to_vec();
        for i in 0..m {
            let row = &s[i * n..(i + 1) * n];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9, "row sum {sum}");
            for v in row {
                prop_assert!(*v > 0.0 && *v < 1.0 + 1e-12);
            }
        }
        // shift the first row by a constant
        let mut shifted = flat;
        for v in shifted[..n].iter_mut() {
            *v += shift;
        }
        let s2 = Tensor::leaf(&[m, n], shifted).unwrap().softmax_rows().unwrap().to_vec();
        for j in 0..n {
            prop_assert!((s[j] - s2[j]).abs() <= 1e-12);
        }
    }

    /// Permuting the input sequence permutes the attention outputs
    /// identically (no positional encoding).
    #[test]
    fn attention_is_permutation_covariant(
        seed in 0u64..1000,
        t in 2usize..5,
        rot in 1usize..4,
    ) {
        let d_x = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttentionParams::init_single(&mut rng, d_x, 3, t);
        use rand::Rng;
        let xs: Vec<Tensor> = (0..t)
            .map(|_| {
                let vals: Vec<f64> = (0..d_x).map(|_| rng.random_range(-2.0..2.0)).collect();
                Tensor::leaf(&[1, d_x], vals).unwrap()
            })
            .collect();
        let base = single_head_attention(&p, &xs).unwrap();
        let rot = rot % t;
        let permuted: Vec<Tensor> = (0..t).map(|i| xs[(i + rot) % t].clone()).collect();
        let out = single_head_attention(&p, &permuted).unwrap();
        for i in 0..t {
            let a = base[(i + rot) % t].to_vec();
            let b = out[i].to_vec();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    /// The feasibility clamp is total on finite inputs and idempotent.
    #[test]
    fn clamp_is_total_and_idempotent(
        tap in finite_f64(),
        cap in finite_f64(),
        delta in finite_f64(),
    ) {
        let dm = 30f64.to_radians();
        let u = clamp_controls([tap, cap, delta], dm).unwrap();
        prop_assert!(u.is_feasible(dm));
        prop_assert!(u.tap >= TAP_MIN - 1e-12 && u.tap <= TAP_MAX + 1e-12);
        prop_assert_eq!(tap_value(tap_position(u.tap)).to_bits(), u.tap.to_bits());
        let again = clamp_controls(
            [u.tap, if u.cap_on { 1.0 } else { 0.0 }, u.delta],
            dm,
        )
        .unwrap();
        prop_assert_eq!(again, u);
    }

    /// Splits are disjoint and exhaustive at every size and seed, with
    /// test = round(0.2·N) and dev = round(0.2·(N − test)).
    #[test]
    fn split_sizes_and_disjointness(n in 5usize..400, seed in 0u64..500) {
        let examples: Vec<ExampleCase> = (0..n)
            .map(|i| ExampleCase {
                u_prev: [0.1, 0.0, 0.3],
                states: vec![vec![i as f64], vec![i as f64 + 0.5]],
                u_target: [0.2, 1.0, 0.4],
                source: i / 10,
            })
            .collect();
        let ds = split_dataset(examples, seed, 0.5, SplitMode::Example).unwrap();
        let n_test = ((0.2 * n as f64) + 0.5).floor() as usize;
        let n_dev = ((0.2 * (n - n_test) as f64) + 0.5).floor() as usize;
        prop_assert_eq!(ds.split.test.len(), n_test);
        prop_assert_eq!(ds.split.dev.len(), n_dev);
        let mut seen = vec![false; n];
        for &i in ds.split.train.iter().chain(&ds.split.dev).chain(&ds.split.test) {
            prop_assert!(!seen[i]);
            seen[i] = true;
        }
        prop_assert!(seen.iter().all(|s| *s));
    }

    /// Tap grid: every position round-trips and snapping is idempotent.
    #[test]
    fn tap_grid_round_trip(pos in 0usize..TAP_POSITIONS, raw in 0.5f64..1.5) {
        prop_assert_eq!(tap_position(tap_value(pos)), pos);
        let snapped = tap_value(tap_position(raw));
        prop_assert_eq!(tap_value(tap_position(snapped)).to_bits(), snapped.to_bits());
    }

    /// Concatenation along the last axis splits back into the parts.
    #[test]
    fn concat_then_rows_recovers_parts(
        a in prop::collection::vec(-10.0f64..10.0, 2..5),
        b in prop::collection::vec(-10.0f64..10.0, 2..5),
    ) {
        let ta = Tensor::leaf(&[1, a.len()], a.clone()).unwrap();
        let tb = Tensor::leaf(&[1, b.len()], b.clone()).unwrap();
        let joined = Tensor::concat(&[ta, tb]).unwrap();
        prop_assert_eq!(joined.shape(), &[1, a.len() + b.len()]);
        let v = joined.to_vec();
        prop_assert_eq!(&v[..a.len()], &a[..]);
        prop_assert_eq!(&v[a.len()..], &b[..]);
    }
}
