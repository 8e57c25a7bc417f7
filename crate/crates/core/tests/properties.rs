use mambamim_core::masking::{deserialize, serialize, Grid3, MaskPyramid, ScanOrder, SequenceLayout, SparseFeature};
use mambamim_core::ssm::{discretize, discretize_invariant, scan_kernel, scan_recurrent, scan_states, SsmParams};
use mambamim_core::toki::{fill_sequence, interpolate_gap, GapSpec, TokiParams, TokiVariant};
use mambamim_core::Tensor;
use proptest::prelude::*;

fn ssm(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-4.0..-0.05f64, n),
        prop::collection::vec(-1.0..1.0f64, n),
        prop::collection::vec(-1.0..1.0f64, n),
    )
}

fn case() -> impl Strategy<Value = ((Vec<f64>, Vec<f64>, Vec<f64>), f64, Vec<f64>)> {
    (1usize..=8, 1usize..=64).prop_flat_map(|(n, l)| (ssm(n), 0.01..1.0f64, prop::collection::vec(-1.0..1.0f64, l)))
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_form_matches_recurrence(((a, b, c), delta, x) in case()) {
        let p = SsmParams::new(a, b, c.clone()).unwrap();
        let d = discretize_invariant(&p, delta).unwrap();
        let r = scan_recurrent(&d, &c, &x).unwrap();
        let k = scan_kernel(&d, &c, &x).unwrap();
        let scale = max_abs(&r).max(1e-300);
        for (u, v) in r.iter().zip(&k) {
            prop_assert!((u - v).abs() / scale <= 1e-10);
        }
    }

    #[test]
    fn scan_is_linear_in_the_input(((a, b, c), delta, x) in case(), alpha in -2.0..2.0f64) {
        let p = SsmParams::new(a, b, c.clone()).unwrap();
        let deltas: Vec<f64> = (0..x.len()).map(|i| delta * (1.0 + 0.1 * (i % 3) as f64)).collect();
        let d = discretize(&p, &deltas).unwrap();
        let y: Vec<f64> = x.iter().rev().copied().collect();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| alpha * u + v).collect();
        let sx = scan_recurrent(&d, &c, &x).unwrap();
        let sy = scan_recurrent(&d, &c, &y).unwrap();
        let sm = scan_recurrent(&d, &c, &mix).unwrap();
        for i in 0..x.len() {
            prop_assert!((alpha * sx[i] + sy[i] - sm[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn scan_is_causal(((a, b, c), delta, x) in case(), j in 0usize..64) {
        let j = j % x.len();
        let p = SsmParams::new(a, b, c.clone()).unwrap();
        let d = discretize_invariant(&p, delta).unwrap();
        let base = scan_recurrent(&d, &c, &x).unwrap();
        let mut xp = x.clone();
        xp[j] += 1.0;
        let moved = scan_recurrent(&d, &c, &xp).unwrap();
        prop_assert_eq!(&base[..j], &moved[..j]);
    }

    #[test]
    fn states_obey_the_stability_bound(((a, b, c), delta, x) in case()) {
        let p = SsmParams::new(a, b, c).unwrap();
        let d = discretize_invariant(&p, delta).unwrap();
        let h = scan_states(&d, &x).unwrap();
        let n = d.state_dim();
        let sup_x = max_abs(&x);
        for k in 0..n {
            let bound = sup_x * d.b_bar()[k].abs() / (1.0 - d.a_bar()[k]);
            for i in 0..x.len() {
                prop_assert!(h[i * n + k].abs() <= bound * (1.0 + 1e-12) + 1e-300);
            }
        }
    }

    #[test]
    fn toki_endpoint_superposition(
        a in prop::collection::vec(-5.0..-0.01f64, 3),
        l1 in prop::collection::vec(-1.0..1.0f64, 3),
        r1 in prop::collection::vec(-1.0..1.0f64, 3),
        l2 in prop::collection::vec(-1.0..1.0f64, 3),
        r2 in prop::collection::vec(-1.0..1.0f64, 3),
        q in 0usize..12,
        alpha in -3.0..3.0f64,
        alg3 in any::<bool>(),
    ) {
        let variant = if alg3 { TokiVariant::Alg3 } else { TokiVariant::Eq8 };
        let p = TokiParams::new(a, variant).unwrap();
        let lm: Vec<f64> = l1.iter().zip(&l2).map(|(u, v)| alpha * u + v).collect();
        let rm: Vec<f64> = r1.iter().zip(&r2).map(|(u, v)| alpha * u + v).collect();
        let z1 = interpolate_gap(&p, GapSpec { left: &l1, right: &r1, q }).unwrap();
        let z2 = interpolate_gap(&p, GapSpec { left: &l2, right: &r2, q }).unwrap();
        let zm = interpolate_gap(&p, GapSpec { left: &lm, right: &rm, q }).unwrap();
        prop_assert_eq!(zm.len(), q);
        for j in 0..q {
            for c in 0..3 {
                prop_assert!((alpha * z1[j][c] + z2[j][c] - zm[j][c]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn toki_preserves_visible_and_localizes_gaps(
        mask in prop::collection::vec(any::<bool>(), 2..40),
        seed in any::<u64>(),
    ) {
        let positions: Vec<usize> = mask.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
        prop_assume!(positions.len() >= 3);
        let ch = 2;
        let tokens: Vec<f64> = (0..positions.len() * ch).map(|i| ((seed >> (i % 50)) & 0xff) as f64 / 37.0 - 3.0 + i as f64 * 0.01).collect();
        let p = TokiParams::constant(ch, -0.7, TokiVariant::Eq8).unwrap();
        let out = fill_sequence(&p, &tokens, &positions, mask.len()).unwrap();
        for (k, &pos) in positions.iter().enumerate() {
            prop_assert_eq!(&out[pos * ch..(pos + 1) * ch], &tokens[k * ch..(k + 1) * ch]);
        }
        // perturbing visible token k only moves the gaps it bounds
        let k = positions.len() / 2;
        let mut t2 = tokens.clone();
        t2[k * ch] += 1.0;
        let moved = fill_sequence(&p, &t2, &positions, mask.len()).unwrap();
        let lo = positions[k - 1];
        let hi = positions[k + 1];
        for i in (0..mask.len()).filter(|&i| i <= lo || i >= hi) {
            prop_assert_eq!(&out[i * ch..(i + 1) * ch], &moved[i * ch..(i + 1) * ch]);
        }
    }

    #[test]
    fn pyramids_are_consistent(seed in any::<u64>(), ratio in 0.0..0.99f64, stages in 1usize..4, e in 1usize..4) {
        let p = MaskPyramid::build(Grid3::new(e, e + 1, 2), stages, ratio, seed).unwrap();
        prop_assert!(p.validate().is_ok());
        prop_assert_eq!(p.coarsest().masked_count(), (ratio * p.coarsest().grid().len() as f64).floor() as usize);
    }

    #[test]
    fn serialization_round_trips(seed in any::<u64>(), x in 1usize..7, y in 1usize..7, z in 1usize..7, ratio in 0.0..0.9f64) {
        let g = Grid3::new(x, y, z);
        let p = MaskPyramid::build(g, 1, ratio, seed).unwrap();
        let m = p.finest().clone();
        prop_assume!(m.visible_count() > 0);
        let dense = Tensor::from_fn(g.tensor_shape(2), |i| (i as f64).sin());
        let f = SparseFeature::from_dense(dense, m.clone()).unwrap();
        let raster = SequenceLayout::new(&m, ScanOrder::Raster, 0).visible_linear;
        for order in ScanOrder::ALL {
            let s = serialize(&f, order, seed).unwrap();
            prop_assert_eq!(&deserialize(&s, None).unwrap(), f.grid());
            let mut idx: Vec<usize> = s.positions.iter().map(|&q| g.index(q)).collect();
            idx.sort_unstable();
            prop_assert_eq!(&idx, &raster);
        }
    }
}
