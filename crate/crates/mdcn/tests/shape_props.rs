//! Property tests: conv/pool shape arithmetic against an enumerating oracle,
//! and the analytic MAC count against instrumented counting.

mod common;

use common::{enumerate_conv_macs, enumerate_out_extent, hash_noise, naive_conv3d};
use mdcn::tensor::{conv_out_extent, ConvSpec, PoolSpec, Shape5, Tensor5};
use proptest::prelude::*;

proptest! {
    #[test]
    fn conv_extent_formula_matches_enumeration(
        input in 1usize..64,
        kernel in 1usize..8,
        stride in 1usize..4,
        pad in 0usize..4,
    ) {
        let enumerated = enumerate_out_extent(input, kernel, stride, pad);
        match conv_out_extent(input, kernel, stride, pad) {
            Ok(out) => prop_assert_eq!(out, enumerated),
            Err(_) => prop_assert_eq!(enumerated, 0),
        }
    }

    #[test]
    fn conv_and_pool_out_shapes_agree_with_axiswise_oracle(
        d in 1usize..12, h in 1usize..12, w in 1usize..12,
        kt in 1usize..4, kh in 1usize..4, kw in 1usize..4,
        st in 1usize..3, sh in 1usize..3, sw in 1usize..3,
        pt in 0usize..2, ph in 0usize..2, pw in 0usize..2,
        c_in in 1usize..4, c_out in 1usize..4,
    ) {
        let input = Shape5::new(2, c_in, d, h, w);
        let spec = ConvSpec::new(c_in, c_out, (kt, kh, kw), (st, sh, sw), (pt, ph, pw)).unwrap();
        let od = enumerate_out_extent(d, kt, st, pt);
        let oh = enumerate_out_extent(h, kh, sh, ph);
        let ow = enumerate_out_extent(w, kw, sw, pw);
        match spec.out_shape(input) {
            Ok(out) => {
                prop_assert_eq!(out, Shape5::new(2, c_out, od, oh, ow));
                let pool = PoolSpec::new((kt, kh, kw), (st, sh, sw), (pt, ph, pw)).unwrap();
                let pooled = pool.out_shape(input).unwrap();
                prop_assert_eq!(pooled, Shape5::new(2, c_in, od, oh, ow));
            }
            Err(_) => prop_assert!(od == 0 || oh == 0 || ow == 0),
        }
    }

    #[test]
    fn analytic_mac_count_equals_instrumented_counter(
        seed in 0u64..1000,
        d in 1usize..6, hw in 1usize..8,
        kt in 1usize..4, ks in 1usize..4,
        s in 1usize..3,
        c_in in 1usize..4, c_out in 1usize..5,
    ) {
        let input = Shape5::new(1, c_in, d.max(kt), hw.max(ks), hw.max(ks));
        let spec = ConvSpec::new(c_in, c_out, (kt, ks, ks), (1, s, s), (kt / 2, ks / 2, ks / 2)).unwrap();
        let analytic = spec.out_shape(input).unwrap().len() as u64 * spec.field_len() as u64;
        prop_assert_eq!(analytic, enumerate_conv_macs(input, &spec));

        let x = Tensor5::from_fn(input, |i| hash_noise(seed, i));
        let w = Tensor5::from_fn(spec.weight_shape(), |i| hash_noise(seed + 7, i));
        let (_, executed) = naive_conv3d(&x, &w, &spec);
        prop_assert_eq!(analytic, executed);
    }
}
