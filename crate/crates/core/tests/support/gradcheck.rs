//! Central finite-difference gradient checks in f64.

use hemoseg::losses::{ce_loss, deep_supervision_loss, dice_loss, LabelBatch, DICE_EPSILON};
use hemoseg::model::build_unet;
use hemoseg_autodiff::{BatchNormOptions, Graph, NormMode, RunningStats, Tensor, Var};
use hemoseg_oracles::{central_differences, relative_error, rng, sample_coords, uniform_vec};
use rand::Rng;

pub const SEEDS: u64 = 20;
pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-3;
const COORDS: usize = 24;
const NET_COORDS: usize = 4;
/// The network is piecewise smooth (ReLU); a smaller step keeps the probe
/// pair on one side of every kink.
pub const NET_H: f64 = 1e-6;
const FLOOR: f64 = 1e-6;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), uniform_vec(&mut rng(seed), n, -1.0, 1.0)).unwrap()
}

fn labels(shape: [usize; 4], seed: u64) -> LabelBatch {
    let mut r = rng(seed);
    let n = shape.iter().product();
    LabelBatch::new(shape, (0..n).map(|_| u8::from(r.random_bool(0.4))).collect()).unwrap()
}

/// Worst relative error between the tape gradient and central differences
/// over sampled coordinates of every leaf.
pub fn check(leaves: &[Tensor<f64>], seed: u64, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    let mut pick = rng(seed ^ 0x5eed);
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = g.grad(vars[li]).expect("leaf reached by backward").clone();
        let coords = sample_coords(&mut pick, leaf.len(), COORDS);
        let numeric = central_differences(
            |probe| {
                let mut g = Graph::new();
                let vars: Vec<Var> = leaves
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let t = if j == li { Tensor::from_vec(t.shape().to_vec(), probe.to_vec()).unwrap() } else { t.clone() };
                        g.param(t)
                    })
                    .collect();
                let l = build(&mut g, &vars);
                g.value(l).item()
            },
            leaf.data(),
            &coords,
            H,
        );
        for (&i, &n) in coords.iter().zip(&numeric) {
            worst = worst.max(relative_error(analytic.data()[i], n, FLOOR));
        }
    }
    worst
}

fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let w = random(g.value(y).shape(), seed + 300);
    g.weighted_sum(y, w).unwrap()
}

fn conv3d(seed: u64) -> f64 {
    let leaves = [random(&[2, 2, 3, 4, 4], seed), random(&[3, 2, 3, 3, 3], seed + 100), random(&[3], seed + 200)];
    check(&leaves, seed, |g, v| {
        let y = g.conv3d(v[0], v[1], Some(v[2]), [1, 2, 1], [1, 1, 0]).unwrap();
        project(g, y, seed)
    })
}

fn strided_down(seed: u64) -> f64 {
    let leaves = [random(&[1, 2, 4, 4, 4], seed), random(&[2, 2, 3, 3, 3], seed + 100), random(&[2], seed + 200)];
    check(&leaves, seed, |g, v| {
        let y = g.conv3d_strided_down(v[0], v[1], Some(v[2]), [1, 2, 2]).unwrap();
        project(g, y, seed)
    })
}

fn upsample(seed: u64) -> f64 {
    let leaves = [random(&[1, 2, 2, 3, 2], seed)];
    check(&leaves, seed, |g, v| {
        let y = g.upsample_trilinear(v[0], [1, 2, 2]).unwrap();
        project(g, y, seed)
    })
}

fn resize(seed: u64) -> f64 {
    let leaves = [random(&[1, 1, 3, 5, 4], seed)];
    check(&leaves, seed, |g, v| {
        let y = g.resize_trilinear(v[0], [4, 3, 7]).unwrap();
        project(g, y, seed)
    })
}

fn batch_norm_train(seed: u64) -> f64 {
    let leaves = [random(&[2, 3, 2, 3, 3], seed), random(&[3], seed + 100), random(&[3], seed + 200)];
    check(&leaves, seed, |g, v| {
        let mut rs = RunningStats::new(3);
        let y = g.batch_norm3d(v[0], v[1], v[2], NormMode::Train, &mut rs, BatchNormOptions::default()).unwrap();
        project(g, y, seed)
    })
}

fn batch_norm_eval(seed: u64) -> f64 {
    let leaves = [random(&[2, 2, 2, 2, 3], seed), random(&[2], seed + 100), random(&[2], seed + 200)];
    let mut stats = RunningStats::new(2);
    stats.mean = vec![0.1, -0.2];
    stats.var = vec![0.7, 1.3];
    stats.updates = 1;
    check(&leaves, seed, |g, v| {
        let mut rs = stats.clone();
        let y = g.batch_norm3d(v[0], v[1], v[2], NormMode::Eval, &mut rs, BatchNormOptions::default()).unwrap();
        project(g, y, seed)
    })
}

fn relu(seed: u64) -> f64 {
    // inputs kept 0.05 away from the kink so central differences are exact
    let x = random(&[4, 5], seed).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 });
    check(&[x], seed, |g, v| {
        let y = g.relu(v[0]).unwrap();
        project(g, y, seed)
    })
}

fn add_concat(seed: u64) -> f64 {
    let leaves = [random(&[2, 3, 2, 2, 2], seed), random(&[2, 3, 2, 2, 2], seed + 1), random(&[2, 5, 2, 2, 2], seed + 2)];
    check(&leaves, seed, |g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let c = g.concat_channels(s, v[2]).unwrap();
        project(g, c, seed)
    })
}

fn softmax(seed: u64) -> f64 {
    let leaves = [random(&[2, 3, 2, 2, 3], seed).map(|v| 3.0 * v)];
    check(&leaves, seed, |g, v| {
        let y = g.softmax_channels(v[0]).unwrap();
        project(g, y, seed)
    })
}

fn dice(seed: u64) -> f64 {
    let target = labels([2, 2, 3, 3], seed + 7).one_hot::<f64>(2).unwrap();
    let leaves = [random(&[2, 2, 2, 3, 3], seed).map(|v| 2.0 * v)];
    check(&leaves, seed, |g, v| {
        let p = g.softmax_channels(v[0]).unwrap();
        dice_loss(g, p, &target, DICE_EPSILON).unwrap()
    })
}

fn cross_entropy(seed: u64) -> f64 {
    let target = labels([2, 2, 3, 3], seed + 7);
    let leaves = [random(&[2, 2, 2, 3, 3], seed).map(|v| 2.0 * v)];
    check(&leaves, seed, |g, v| {
        let p = g.softmax_channels(v[0]).unwrap();
        ce_loss(g, p, &target).unwrap()
    })
}

/// Toy network (encoder, decoder, heads; patch reduced to 2x8x8) under the
/// deep-supervision loss, checked for every parameter tensor and the input.
pub fn composed_network(seed: u64) -> f64 {
    let cfg = hemoseg::config::UNet3DConfig { patch: [2, 8, 8], ..hemoseg::config::UNet3DConfig::toy() };
    let model = build_unet::<f64>(&cfg, seed).unwrap();
    let [d, h, w] = cfg.patch;
    let x = random(&[2, 1, d, h, w], seed + 11);
    let y = labels([2, d, h, w], seed + 13);
    let loss_of = |params: &[Tensor<f64>], x: &Tensor<f64>| -> (f64, Vec<Option<Tensor<f64>>>, Option<Tensor<f64>>) {
        let mut m = model.clone();
        m.params_mut().clone_from_slice(params);
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let out = m.forward_train(&mut g, xv).unwrap();
        let (loss, _) = deep_supervision_loss(&mut g, &out, &y).unwrap();
        let value = g.value(loss).item();
        g.backward(loss).unwrap();
        let grads = m.gradients(&g, &out);
        (value, grads, g.grad(xv).cloned())
    };
    let params = model.params().to_vec();
    let (_, grads, gx) = loss_of(&params, &x);
    let mut pick = rng(seed ^ 0xfeed);
    let mut worst = 0.0f64;
    for (k, p) in params.iter().enumerate() {
        let analytic = grads[k].as_ref().expect("every parameter receives a gradient");
        let coords = sample_coords(&mut pick, p.len(), NET_COORDS);
        let numeric = central_differences(
            |probe| {
                let mut ps = params.clone();
                ps[k] = Tensor::from_vec(p.shape().to_vec(), probe.to_vec()).unwrap();
                loss_of(&ps, &x).0
            },
            p.data(),
            &coords,
            NET_H,
        );
        for (&i, &n) in coords.iter().zip(&numeric) {
            worst = worst.max(relative_error(analytic.data()[i], n, FLOOR));
        }
    }
    let gx = gx.expect("input gradient");
    let coords = sample_coords(&mut pick, x.len(), COORDS);
    let numeric = central_differences(
        |probe| loss_of(&params, &Tensor::from_vec(x.shape().to_vec(), probe.to_vec()).unwrap()).0,
        x.data(),
        &coords,
        NET_H,
    );
    for (&i, &n) in coords.iter().zip(&numeric) {
        worst = worst.max(relative_error(gx.data()[i], n, FLOOR));
    }
    worst
}

/// Every differentiable op plus the composed network.
pub fn suite() -> Vec<(&'static str, fn(u64) -> f64)> {
    vec![
        ("conv3d", conv3d),
        ("conv3d_strided_down", strided_down),
        ("upsample_trilinear", upsample),
        ("resize_trilinear", resize),
        ("batch_norm3d/train", batch_norm_train),
        ("batch_norm3d/eval", batch_norm_eval),
        ("relu", relu),
        ("add+concat_channels", add_concat),
        ("softmax_channels", softmax),
        ("dice_loss", dice),
        ("ce_loss", cross_entropy),
        ("toy network + deep supervision", composed_network),
    ]
}
