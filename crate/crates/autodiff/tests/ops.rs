use hemoseg_autodiff::{
    softmax_channels, BatchNormOptions, Graph, NormMode, RunningStats, Tensor, TensorError,
};
use hemoseg_oracles::{direct_conv3d, rng, uniform_vec};
use proptest::prelude::*;

fn t64(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    t64(shape, uniform_vec(&mut rng(seed), n, -1.0, 1.0))
}

#[test]
fn identity_kernel_reproduces_input() {
    let x = random(&[2, 1, 3, 4, 5], 1);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(t64(&[1, 1, 1, 1, 1], vec![1.0]));
    let b = g.constant(t64(&[1], vec![0.0]));
    let y = g.conv3d(xv, w, Some(b), [1; 3], [0; 3]).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn ones_kernel_over_ones_gives_27() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f32>::ones([1, 1, 3, 3, 3]));
    let w = g.constant(Tensor::ones([1, 1, 3, 3, 3]));
    let y = g.conv3d(x, w, None, [1; 3], [0; 3]).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[27.0]);
}

#[test]
fn conv_matches_direct_loop_on_padded_random_input() {
    let x = random(&[2, 3, 4, 5, 5], 10);
    let w = random(&[4, 3, 3, 3, 3], 11);
    let b = random(&[4], 12);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv3d(xv, wv, Some(bv), [1; 3], [1; 3]).unwrap();
    let (want, shape) = direct_conv3d(x.data(), [2, 3, 4, 5, 5], w.data(), [4, 3, 3, 3, 3], Some(b.data()), [1; 3], [1; 3]);
    assert_eq!(g.value(y).shape(), &shape);
    for (a, e) in g.value(y).data().iter().zip(&want) {
        assert!((a - e).abs() <= 1e-5 * e.abs().max(1.0), "{a} vs {e}");
    }
}

#[test]
fn conv_channel_mismatch_is_shape_error() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 2, 3, 3, 3]));
    let w = g.constant(Tensor::zeros([1, 3, 3, 3, 3]));
    assert!(matches!(g.conv3d(x, w, None, [1; 3], [1; 3]), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn strided_down_shapes() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 1, 16, 32, 32]));
    let w = g.constant(Tensor::zeros([3, 1, 3, 3, 3]));
    let y = g.conv3d_strided_down(x, w, None, [2, 2, 2]).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 3, 8, 16, 16]);

    let x = g.constant(Tensor::zeros([1, 8, 4, 10, 10]));
    let w = g.constant(Tensor::zeros([5, 8, 3, 3, 3]));
    let y = g.conv3d_strided_down(x, w, None, [1, 2, 2]).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 5, 4, 5, 5]);

    let x = g.constant(Tensor::zeros([1, 8, 5, 10, 10]));
    let err = g.conv3d_strided_down(x, w, None, [2, 2, 2]).unwrap_err();
    assert_eq!(
        err,
        TensorError::IndivisibleExtent { op: "conv3d_strided_down", axis: "depth", extent: 5, factor: 2 }
    );
}

// The full-size [1,8,16,320,320] -> [1,C,8,160,160] case is shape-only;
// its geometry is exercised without allocating the output.
#[test]
fn strided_down_geometry_at_full_size() {
    let geom = hemoseg_autodiff::ConvGeometry::new(&[1, 8, 16, 320, 320], &[16, 8, 3, 3, 3], [2, 2, 2], [1, 1, 1]).unwrap();
    assert_eq!(geom.output, [8, 160, 160]);
}

#[test]
fn upsample_identity_constant_and_hand_values() {
    let x = random(&[1, 2, 2, 3, 4], 3);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.upsample_trilinear(xv, [1, 1, 1]).unwrap();
    assert_eq!(g.value(y), &x);

    let c = g.constant(Tensor::full([1, 1, 2, 2, 3], 0.37f64));
    let y = g.upsample_trilinear(c, [2, 3, 2]).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 4, 6, 6]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.37));

    // samples at (i + 0.5)/2 - 0.5 clamped to [0, 1]: 0, 0.25, 0.75, 1
    let q = g.constant(t64(&[1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let y = g.upsample_trilinear(q, [1, 2, 2]).unwrap();
    let expect = [
        1.0, 1.25, 1.75, 2.0, //
        1.5, 1.75, 2.25, 2.5, //
        2.5, 2.75, 3.25, 3.5, //
        3.0, 3.25, 3.75, 4.0,
    ];
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 4, 4]);
    for (a, e) in g.value(y).data().iter().zip(expect) {
        assert!((a - e).abs() < 1e-12);
    }
}

fn channel_moments(t: &Tensor<f64>) -> Vec<(f64, f64)> {
    let s = t.shape();
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    (0..c)
        .map(|ch| {
            let vals: Vec<f64> = (0..n)
                .flat_map(|b| t.data()[(b * c + ch) * inner..(b * c + ch + 1) * inner].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            (m, v)
        })
        .collect()
}

#[test]
fn batch_norm_train_mode_standardises_channels() {
    let x = random(&[2, 3, 2, 4, 4], 4).map(|v| 3.0 * v + 1.5);
    let mut g = Graph::new();
    let mut rs = RunningStats::new(3);
    let xv = g.constant(x);
    let gamma = g.constant(Tensor::ones([3]));
    let beta = g.constant(Tensor::zeros([3]));
    let y = g.batch_norm3d(xv, gamma, beta, NormMode::Train, &mut rs, BatchNormOptions::default()).unwrap();
    for (m, v) in channel_moments(g.value(y)) {
        assert!(m.abs() < 1e-5);
        // epsilon 1e-5 shifts the variance by about eps / var
        assert!((v - 1.0).abs() < 1e-4, "variance {v}");
    }
    assert!(rs.is_initialized());
}

#[test]
fn batch_norm_zero_gamma_outputs_beta() {
    let mut g = Graph::new();
    let mut rs = RunningStats::new(2);
    let xv = g.constant(random(&[1, 2, 2, 2, 2], 5));
    let gamma = g.constant(Tensor::zeros([2]));
    let beta = g.constant(t64(&[2], vec![0.5, -2.0]));
    let y = g.batch_norm3d(xv, gamma, beta, NormMode::Train, &mut rs, BatchNormOptions::default()).unwrap();
    let y = g.value(y);
    assert!(y.data()[..8].iter().all(|&v| v == 0.5));
    assert!(y.data()[8..].iter().all(|&v| v == -2.0));
}

#[test]
fn batch_norm_eval_before_update_is_an_error() {
    let mut g = Graph::<f32>::new();
    let mut rs = RunningStats::new(1);
    let x = g.constant(Tensor::zeros([1, 1, 2, 2, 2]));
    let gamma = g.constant(Tensor::ones([1]));
    let beta = g.constant(Tensor::zeros([1]));
    let err = g.batch_norm3d(x, gamma, beta, NormMode::Eval, &mut rs, BatchNormOptions::default());
    assert_eq!(err.unwrap_err(), TensorError::UninitializedStatistics);
}

#[test]
fn running_stats_error_decays_geometrically() {
    let x = random(&[2, 2, 2, 3, 3], 6).map(|v| 4.0 * v + 7.0);
    let pop = channel_moments(&x);
    let opts = BatchNormOptions::default();
    let mut rs = RunningStats::new(2);
    for k in 1..=30 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gamma = g.constant(Tensor::ones([2]));
        let beta = g.constant(Tensor::zeros([2]));
        g.batch_norm3d(xv, gamma, beta, NormMode::Train, &mut rs, opts).unwrap();
        let decay = (1.0 - opts.momentum).powi(k);
        for ch in 0..2 {
            let mean_err = (rs.mean[ch] - pop[ch].0).abs();
            let var_err = (rs.var[ch] - pop[ch].1).abs();
            assert!((mean_err - decay * pop[ch].0.abs()).abs() < 1e-9);
            assert!((var_err - decay * (pop[ch].1 - 1.0).abs()).abs() < 1e-9);
        }
    }
}

#[test]
fn relu_examples() {
    let mut g = Graph::new();
    let x = g.constant(t64(&[3], vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let p = random(&[10], 7).map(|v| v.abs() + 0.1);
    let pv = g.constant(p.clone());
    let y = g.relu(pv).unwrap();
    assert_eq!(g.value(y), &p);
}

#[test]
fn add_zero_and_concat_channel_count() {
    let x = random(&[2, 3, 2, 2, 2], 8);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let z = g.constant(Tensor::zeros([2, 3, 2, 2, 2]));
    let s = g.add(xv, z).unwrap();
    assert_eq!(g.value(s), &x);
    let five = g.constant(Tensor::zeros([2, 5, 2, 2, 2]));
    let c = g.concat_channels(xv, five).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 8, 2, 2, 2]);
    let bad = g.constant(Tensor::zeros([2, 5, 2, 2, 3]));
    assert!(g.concat_channels(xv, bad).is_err());
    assert!(g.add(xv, five).is_err());
}

#[test]
fn softmax_examples() {
    let x = t64(&[1, 2, 1], vec![0.3, 0.3]);
    assert_eq!(softmax_channels(&x).unwrap().data(), &[0.5, 0.5]);
    let x = t64(&[1, 2, 1], vec![1000.0, 0.0]);
    let y = softmax_channels(&x).unwrap();
    assert_eq!(y.data(), &[1.0, 0.0]);
}

#[test]
fn backward_basic_accumulation() {
    let mut g = Graph::new();
    let x = g.param(random(&[2, 3], 9));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.param(random(&[2, 3], 9));
    let xx = g.add(x, x).unwrap();
    let s = g.sum(xx).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(random(&[2], 1));
    assert!(matches!(g.backward(x), Err(TensorError::NotScalar { .. })));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(t64(&[2], vec![f64::MAX, f64::MAX]));
    let err = g.add(x, x).unwrap_err();
    assert_eq!(err, TensorError::NonFinite { op: "add" });
}

#[test]
fn two_consumer_dag_sums_path_gradients() {
    // y = relu(x) + softmax-weighted path; grad must equal sum of both paths.
    let x0 = random(&[1, 2, 3], 13).map(|v| v + if v >= 0.0 { 0.1 } else { -0.1 });
    let w1 = random(&[1, 2, 3], 14);
    let w2 = random(&[1, 2, 3], 15);
    let path = |use_a: bool, use_b: bool| {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let mut total = None;
        if use_a {
            let r = g.relu(x).unwrap();
            total = Some(g.weighted_sum(r, w1.clone()).unwrap());
        }
        if use_b {
            let s = g.softmax_channels(x).unwrap();
            let l = g.weighted_sum(s, w2.clone()).unwrap();
            total = Some(match total {
                Some(t) => g.add(t, l).unwrap(),
                None => l,
            });
        }
        let loss = total.unwrap();
        g.backward(loss).unwrap();
        g.grad(x).unwrap().clone()
    };
    let both = path(true, true);
    let a = path(true, false);
    let b = path(false, true);
    for i in 0..both.len() {
        assert!((both.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-14);
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..10_000, c in 2usize..5, scale in 0.1f64..50.0) {
        let x = random(&[2, c, 3, 2, 2], seed).map(|v| v * scale);
        let y = softmax_channels(&x).unwrap();
        let inner = 12;
        for b in 0..2 {
            for i in 0..inner {
                let s: f64 = (0..c).map(|ch| y.data()[(b * c + ch) * inner + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
        prop_assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn conv_agrees_with_direct_loop(seed in 0u64..1000,
                                    n in 1usize..3, c in 1usize..3, k in 1usize..3,
                                    d in 1usize..5, h in 1usize..6, w in 1usize..6,
                                    kd in 1usize..4, kh in 1usize..4, kw in 1usize..4,
                                    sd in 1usize..3, sh in 1usize..3, sw in 1usize..3,
                                    pd in 0usize..2, ph in 0usize..2, pw in 0usize..2) {
        prop_assume!(kd <= d + 2 * pd && kh <= h + 2 * ph && kw <= w + 2 * pw);
        let x = random(&[n, c, d, h, w], seed);
        let wt = random(&[k, c, kd, kh, kw], seed + 1);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(wt.clone()));
        let y = g.conv3d(xv, wv, None, [sd, sh, sw], [pd, ph, pw]).unwrap();
        let (want, shape) = direct_conv3d(x.data(), [n, c, d, h, w], wt.data(), [k, c, kd, kh, kw], None, [sd, sh, sw], [pd, ph, pw]);
        prop_assert_eq!(g.value(y).shape(), &shape[..]);
        for (a, e) in g.value(y).data().iter().zip(&want) {
            prop_assert!((a - e).abs() <= 1e-5 * e.abs().max(1.0));
        }
    }
}
