//! Gradient checks: every layer's backward pass against central finite
//! differences in f64, plus agreement between the im2col/GEMM convolution
//! and a direct-summation reference, and determinism across thread counts.

mod common;

use common::{finite_diff, hash_noise, max_rel_err, naive_conv3d};
use mdcn::nn::{
    batchnorm_apply, batchnorm_backward, conv3d_backward, conv3d_forward, global_avg_pool,
    global_avg_pool_backward, linear_backward, linear_forward, maxpool3d_apply,
    maxpool3d_backward, relu_backward, relu_forward, softmax_cross_entropy, BnMode, BnState,
};
use mdcn::tensor::{ConvSpec, Mat, PoolSpec, Shape5, Tensor5};

const FD_STEP: f64 = 1e-5;
const LAYER_TOL: f64 = 1e-4;

fn noise_tensor(shape: Shape5, seed: u64) -> Tensor5<f64> {
    Tensor5::from_fn(shape, |i| hash_noise(seed, i))
}

fn noise_mat(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
    Mat::new(rows, cols, (0..rows * cols).map(|i| hash_noise(seed, i)).collect()).unwrap()
}

/// Projects a tensor against fixed noise weights to get a scalar loss whose
/// upstream gradient is exactly those weights.
fn project(y: &[f64], seed: u64) -> f64 {
    y.iter()
        .enumerate()
        .map(|(i, &v)| v * hash_noise(seed, i))
        .sum()
}

fn projection_tensor(shape: Shape5, seed: u64) -> Tensor5<f64> {
    Tensor5::from_fn(shape, |i| hash_noise(seed, i))
}

fn check_conv_pattern(kernel: (usize, usize, usize), padding: (usize, usize, usize), seed: u64) {
    let spec = ConvSpec::new(2, 3, kernel, (1, 1, 1), padding).unwrap();
    let x = noise_tensor(Shape5::new(2, 2, 3, 5, 5), seed);
    let w = noise_tensor(spec.weight_shape(), seed + 1);
    let out_shape = spec.out_shape(x.shape).unwrap();
    let upstream = projection_tensor(out_shape, seed + 2);

    let (gx, gw) = conv3d_backward(&x, &w, &spec, &upstream).unwrap();

    let mut xv = x.data().to_vec();
    let fd_x = finite_diff(
        |vals| {
            let xt = Tensor5::new(x.shape, vals.to_vec()).unwrap();
            project(conv3d_forward(&xt, &w, &spec).unwrap().data(), seed + 2)
        },
        &mut xv,
        FD_STEP,
    );
    assert!(
        max_rel_err(gx.data(), &fd_x) <= LAYER_TOL,
        "conv grad_x mismatch for kernel {kernel:?}"
    );

    let mut wv = w.data().to_vec();
    let fd_w = finite_diff(
        |vals| {
            let wt = Tensor5::new(w.shape, vals.to_vec()).unwrap();
            project(conv3d_forward(&x, &wt, &spec).unwrap().data(), seed + 2)
        },
        &mut wv,
        FD_STEP,
    );
    assert!(
        max_rel_err(gw.data(), &fd_w) <= LAYER_TOL,
        "conv grad_w mismatch for kernel {kernel:?}"
    );
}

#[test]
fn conv_temporal_branch_gradients_match_finite_differences() {
    check_conv_pattern((3, 1, 1), (1, 0, 0), 10);
}

#[test]
fn conv_spatial_branch_gradients_match_finite_differences() {
    check_conv_pattern((1, 3, 3), (0, 1, 1), 20);
}

#[test]
fn conv_spatiotemporal_gradients_match_finite_differences() {
    check_conv_pattern((3, 3, 3), (1, 1, 1), 30);
}

#[test]
fn conv_strided_gradients_match_finite_differences() {
    let spec = ConvSpec::new(2, 2, (1, 2, 2), (1, 2, 2), (0, 1, 1)).unwrap();
    let x = noise_tensor(Shape5::new(1, 2, 2, 6, 6), 40);
    let w = noise_tensor(spec.weight_shape(), 41);
    let out_shape = spec.out_shape(x.shape).unwrap();
    let upstream = projection_tensor(out_shape, 42);
    let (gx, gw) = conv3d_backward(&x, &w, &spec, &upstream).unwrap();

    let mut xv = x.data().to_vec();
    let fd_x = finite_diff(
        |vals| {
            let xt = Tensor5::new(x.shape, vals.to_vec()).unwrap();
            project(conv3d_forward(&xt, &w, &spec).unwrap().data(), 42)
        },
        &mut xv,
        FD_STEP,
    );
    assert!(max_rel_err(gx.data(), &fd_x) <= LAYER_TOL);

    let mut wv = w.data().to_vec();
    let fd_w = finite_diff(
        |vals| {
            let wt = Tensor5::new(w.shape, vals.to_vec()).unwrap();
            project(conv3d_forward(&x, &wt, &spec).unwrap().data(), 42)
        },
        &mut wv,
        FD_STEP,
    );
    assert!(max_rel_err(gw.data(), &fd_w) <= LAYER_TOL);
}

#[test]
fn gemm_conv_agrees_with_direct_summation() {
    for (seed, in_c, out_c, k, s, p) in [
        (1u64, 1, 1, (1, 2, 2), (1, 1, 1), (0, 0, 0)),
        (2, 3, 8, (5, 7, 7), (1, 2, 2), (2, 3, 3)),
        (3, 2, 4, (3, 1, 1), (1, 1, 1), (1, 0, 0)),
        (4, 4, 2, (1, 3, 3), (1, 2, 2), (0, 1, 1)),
        (5, 2, 6, (3, 3, 3), (1, 1, 1), (1, 1, 1)),
    ] {
        let spec = ConvSpec::new(in_c, out_c, k, s, p).unwrap();
        let x = noise_tensor(Shape5::new(2, in_c, 6, 9, 9), seed);
        let w = noise_tensor(spec.weight_shape(), seed + 100);
        let fast = conv3d_forward(&x, &w, &spec).unwrap();
        let (slow, _) = naive_conv3d(&x, &w, &spec);
        // Summation orders differ between the two routes; allow f64 roundoff.
        let worst = fast
            .data()
            .iter()
            .zip(slow.data())
            .map(|(&a, &b)| (a - b).abs() / (1.0 + a.abs().max(b.abs())))
            .fold(0.0f64, f64::max);
        assert!(worst <= 1e-12, "kernel {k:?} stride {s:?}: {worst}");
    }
}

#[test]
fn conv_identity_kernel_selects_channel() {
    let x = noise_tensor(Shape5::new(1, 3, 2, 4, 4), 50);
    for ch in 0..3 {
        let spec = ConvSpec::new(3, 1, (1, 1, 1), (1, 1, 1), (0, 0, 0)).unwrap();
        let mut w = Tensor5::zeros(spec.weight_shape());
        w.set(0, ch, 0, 0, 0, 1.0);
        let y = conv3d_forward(&x, &w, &spec).unwrap();
        for d in 0..2 {
            for h in 0..4 {
                for wv in 0..4 {
                    assert_eq!(y.at(0, 0, d, h, wv), x.at(0, ch, d, h, wv));
                }
            }
        }
    }
}

#[test]
fn conv_is_bit_identical_across_thread_counts() {
    let spec = ConvSpec::new(3, 5, (3, 3, 3), (1, 1, 1), (1, 1, 1)).unwrap();
    let x = noise_tensor(Shape5::new(4, 3, 4, 10, 10), 60);
    let w = noise_tensor(spec.weight_shape(), 61);
    let upstream = projection_tensor(spec.out_shape(x.shape).unwrap(), 62);

    let run = || {
        let y = conv3d_forward(&x, &w, &spec).unwrap();
        let (gx, gw) = conv3d_backward(&x, &w, &spec, &upstream).unwrap();
        (y, gx, gw)
    };
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(run);
    let quad = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(run);
    assert_eq!(single.0.data(), quad.0.data());
    assert_eq!(single.1.data(), quad.1.data());
    assert_eq!(single.2.data(), quad.2.data());
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let shape = Shape5::new(2, 4, 2, 3, 3);
    let x = noise_tensor(shape, 70);
    let mut state = BnState::new(4, 0.1, 1e-5);
    state.gamma = (0..4).map(|i| 1.0 + 0.3 * hash_noise(71, i)).collect();
    state.beta = (0..4).map(|i| hash_noise(72, i)).collect();

    let loss = |xt: &Tensor5<f64>, st: &BnState<f64>| {
        let (y, _, _) = batchnorm_apply(xt, st, BnMode::Train).unwrap();
        project(y.data(), 73)
    };

    let (_, cache, _) = batchnorm_apply(&x, &state, BnMode::Train).unwrap();
    let upstream = projection_tensor(shape, 73);
    let (gx, ggamma, gbeta) = batchnorm_backward(&cache.unwrap(), &upstream).unwrap();

    let mut xv = x.data().to_vec();
    let fd_x = finite_diff(
        |vals| loss(&Tensor5::new(shape, vals.to_vec()).unwrap(), &state),
        &mut xv,
        FD_STEP,
    );
    assert!(max_rel_err(gx.data(), &fd_x) <= LAYER_TOL, "bn grad_x");

    let mut gv = state.gamma.clone();
    let fd_gamma = finite_diff(
        |vals| {
            let mut st = state.clone();
            st.gamma = vals.to_vec();
            loss(&x, &st)
        },
        &mut gv,
        FD_STEP,
    );
    assert!(max_rel_err(&ggamma, &fd_gamma) <= LAYER_TOL, "bn grad_gamma");

    let mut bv = state.beta.clone();
    let fd_beta = finite_diff(
        |vals| {
            let mut st = state.clone();
            st.beta = vals.to_vec();
            loss(&x, &st)
        },
        &mut bv,
        FD_STEP,
    );
    assert!(max_rel_err(&gbeta, &fd_beta) <= LAYER_TOL, "bn grad_beta");
}

#[test]
fn relu_gradient_matches_finite_differences() {
    let shape = Shape5::new(1, 2, 2, 3, 3);
    // Keep values away from the kink at 0 so the FD probe stays one-sided.
    let x = Tensor5::from_fn(shape, |i| {
        let v = hash_noise(80, i);
        if v.abs() < 0.05 {
            v + 0.1
        } else {
            v
        }
    });
    let upstream = projection_tensor(shape, 81);
    let gx = relu_backward(&x, &upstream);
    let mut xv = x.data().to_vec();
    let fd = finite_diff(
        |vals| {
            let xt = Tensor5::new(shape, vals.to_vec()).unwrap();
            project(relu_forward(&xt).data(), 81)
        },
        &mut xv,
        FD_STEP,
    );
    assert!(max_rel_err(gx.data(), &fd) <= LAYER_TOL);
}

#[test]
fn maxpool_gradient_matches_finite_differences() {
    let shape = Shape5::new(1, 2, 3, 6, 6);
    let x = noise_tensor(shape, 90); // continuous noise: ties have measure zero
    let spec = PoolSpec::new((2, 3, 3), (1, 2, 2), (0, 1, 1)).unwrap();
    let (y, argmax) = maxpool3d_apply(&x, &spec).unwrap();
    let upstream = projection_tensor(y.shape, 91);
    let gx = maxpool3d_backward(shape, &argmax, &upstream).unwrap();
    let mut xv = x.data().to_vec();
    let fd = finite_diff(
        |vals| {
            let xt = Tensor5::new(shape, vals.to_vec()).unwrap();
            let (yt, _) = maxpool3d_apply(&xt, &spec).unwrap();
            project(yt.data(), 91)
        },
        &mut xv,
        FD_STEP,
    );
    assert!(max_rel_err(gx.data(), &fd) <= LAYER_TOL);
}

#[test]
fn global_avg_pool_gradient_matches_finite_differences() {
    let shape = Shape5::new(2, 3, 2, 3, 3);
    let x = noise_tensor(shape, 100);
    let pooled = global_avg_pool(&x);
    let upstream = noise_mat(pooled.rows, pooled.cols, 101);
    let gx = global_avg_pool_backward(shape, &upstream);
    let mut xv = x.data().to_vec();
    let fd = finite_diff(
        |vals| {
            let xt = Tensor5::new(shape, vals.to_vec()).unwrap();
            project(global_avg_pool(&xt).data(), 101)
        },
        &mut xv,
        FD_STEP,
    );
    assert!(max_rel_err(gx.data(), &fd) <= LAYER_TOL);
}

#[test]
fn linear_gradients_match_finite_differences() {
    let x = noise_mat(3, 5, 110);
    let w = noise_mat(4, 5, 111);
    let b: Vec<f64> = (0..4).map(|i| hash_noise(112, i)).collect();
    let upstream = noise_mat(3, 4, 113);
    let (gx, gw, gb) = linear_backward(&x, &w, &upstream).unwrap();

    let mut xv = x.data().to_vec();
    let fd_x = finite_diff(
        |vals| {
            let xt = Mat::new(3, 5, vals.to_vec()).unwrap();
            project(linear_forward(&xt, &w, &b).unwrap().data(), 113)
        },
        &mut xv,
        FD_STEP,
    );
    assert!(max_rel_err(gx.data(), &fd_x) <= LAYER_TOL);

    let mut wv = w.data().to_vec();
    let fd_w = finite_diff(
        |vals| {
            let wt = Mat::new(4, 5, vals.to_vec()).unwrap();
            project(linear_forward(&x, &wt, &b).unwrap().data(), 113)
        },
        &mut wv,
        FD_STEP,
    );
    assert!(max_rel_err(gw.data(), &fd_w) <= LAYER_TOL);

    let mut bv = b.clone();
    let fd_b = finite_diff(
        |vals| project(linear_forward(&x, &w, vals).unwrap().data(), 113),
        &mut bv,
        FD_STEP,
    );
    assert!(max_rel_err(&gb, &fd_b) <= LAYER_TOL);
}

#[test]
fn softmax_cross_entropy_gradient_matches_finite_differences() {
    let logits = noise_mat(4, 3, 120);
    let labels = [0usize, 2, 1, 1];
    let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
    let mut lv = logits.data().to_vec();
    let fd = finite_diff(
        |vals| {
            let lt = Mat::new(4, 3, vals.to_vec()).unwrap();
            softmax_cross_entropy(&lt, &labels).unwrap().0
        },
        &mut lv,
        FD_STEP,
    );
    assert!(max_rel_err(grad.data(), &fd) <= LAYER_TOL);
}
