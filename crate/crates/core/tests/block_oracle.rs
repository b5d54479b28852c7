mod common;

use common::{
    block, max_rel_diff, norm_rel_diff, random_block_params, random_config, random_input, Arr,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use res2net::nnops::{conv2d, conv2d_direct, ConvGeometry, Mode};
use res2net::res2net::{res2net_block_forward, Graph, Res2NetBlockConfig};
use res2net::Tensor;

const PREFIX: &str = "blk";

fn library<T: res2net::Scalar>(
    cfg: &Res2NetBlockConfig,
    seed: u64,
    side: usize,
    train: bool,
) -> (Vec<f64>, Vec<f64>) {
    let params = random_block_params(cfg, PREFIX, seed);
    let x = random_input([2, cfg.in_channels, side, side], seed ^ 0xabc);
    let expected = block(&Arr::from_tensor(&x), cfg, &params, PREFIX, train).d;
    let store = params.cast::<T>();
    let mode = if train { Mode::Train } else { Mode::Eval };
    let mut g = Graph::new(&store, mode);
    let xv = g.input(x.cast::<T>());
    let out = res2net_block_forward(&mut g, xv, cfg, PREFIX)
        .unwrap()
        .output;
    (g.value(out).cast::<f64>().into_data(), expected)
}

#[test]
fn twenty_random_blocks_match_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..20 {
        let cfg = random_config(&mut rng);
        let side = rng.gen_range(5..=8);
        let train = case % 2 == 0;
        let (got, want) = library::<f64>(&cfg, case, side, train);
        let err = max_rel_diff(&got, &want);
        assert!(err <= 1e-5, "case {case} {cfg:?} train={train}: {err:e}");
        let (got32, want) = library::<f32>(&cfg, case, side, train);
        let err32 = norm_rel_diff(&got32, &want);
        assert!(err32 <= 1e-5, "case {case} {cfg:?} f32: {err32:e}");
    }
}

#[test]
fn parallel_form_matches_oracle() {
    let cfg = Res2NetBlockConfig::new(8, 8, 2, 4).with_hierarchical(false);
    let (got, want) = library::<f64>(&cfg, 5, 6, false);
    assert!(max_rel_diff(&got, &want) <= 1e-12);
}

#[test]
fn fast_conv_matches_direct_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..30 {
        let groups = [1, 2, 3][rng.gen_range(0..3)];
        let c_in = groups * rng.gen_range(1..=3);
        let c_out = groups * rng.gen_range(1..=3);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let pad = rng.gen_range(0..=k / 2);
        let stride = rng.gen_range(1..=2);
        let side = rng.gen_range(k..k + 6);
        let x = random_input([2, c_in, side, side], rng.gen());
        let w = random_input([c_out, c_in / groups, k, k], rng.gen());
        let geo = ConvGeometry::new(stride, pad, groups);
        let fast = conv2d(&x, &w, geo).unwrap();
        let direct = conv2d_direct(&x, &w, geo).unwrap();
        let oracle = common::conv(
            &Arr::from_tensor(&x),
            &Arr::from_tensor(&w),
            stride,
            pad,
            groups,
        );
        assert_eq!(fast.shape(), [oracle.n, oracle.c, oracle.h, oracle.w]);
        assert!(max_rel_diff(fast.data(), direct.data()) <= 1e-5);
        assert!(max_rel_diff(fast.data(), &oracle.d) <= 1e-5);
        let fast32 = conv2d(&x.cast::<f32>(), &w.cast::<f32>(), geo).unwrap();
        assert!(norm_rel_diff(&fast32.cast::<f64>().into_data(), &oracle.d) <= 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn eval_blocks_match_oracle(seed in any::<u64>(), side in 4usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = random_config(&mut rng);
        let (got, want) = library::<f64>(&cfg, seed, side, false);
        prop_assert!(max_rel_diff(&got, &want) <= 1e-9);
    }

    #[test]
    fn conv_fast_path_equals_loop(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::from_fn([1, 4, 7, 6], |_, _, _, _| rng.gen_range(-1.0..1.0));
        let w = Tensor::<f32>::from_fn([6, 2, 3, 3], |_, _, _, _| rng.gen_range(-1.0..1.0));
        let geo = ConvGeometry::new(1 + (seed % 2) as usize, 1, 2);
        let fast = conv2d(&x, &w, geo).unwrap();
        let direct = conv2d_direct(&x, &w, geo).unwrap();
        let scale = direct.max_abs().max(1e-6);
        prop_assert!(fast.max_abs_diff(&direct).unwrap() / scale <= 1e-5);
    }
}
