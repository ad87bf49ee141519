//! Central finite-difference checks (h = 1e-4, f64) for every differentiable
//! op, 20 seeds each.

use hemoseg_autodiff::{BatchNormOptions, Graph, NormMode, RunningStats, Tensor, Var};
use hemoseg_oracles::{central_differences, relative_error, rng, sample_coords, uniform_vec};

const SEEDS: u64 = 20;
const H: f64 = 1e-4;
const TOL: f64 = 1e-3;
const COORDS: usize = 24;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), uniform_vec(&mut rng(seed), n, -1.0, 1.0)).unwrap()
}

/// Compares analytic and numeric gradients of `build` w.r.t. each leaf and
/// returns the worst relative error.
fn check(leaves: &[Tensor<f64>], seed: u64, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
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
                        if j == li {
                            g.param(Tensor::from_vec(t.shape().to_vec(), probe.to_vec()).unwrap())
                        } else {
                            g.param(t.clone())
                        }
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
            worst = worst.max(relative_error(analytic.data()[i], n, 1e-6));
        }
    }
    worst
}

fn weights_like(g: &Graph<f64>, v: Var, seed: u64) -> Tensor<f64> {
    random(g.value(v).shape(), seed)
}

#[test]
fn conv3d_gradients() {
    for seed in 0..SEEDS {
        let leaves = [random(&[2, 2, 3, 4, 4], seed), random(&[3, 2, 3, 3, 3], seed + 100), random(&[3], seed + 200)];
        let err = check(&leaves, seed, |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), [1, 2, 1], [1, 1, 0]).unwrap();
            let w = weights_like(g, y, seed + 300);
            g.weighted_sum(y, w).unwrap()
        });
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn conv3d_strided_down_gradients() {
    for seed in 0..SEEDS {
        let leaves = [random(&[1, 2, 4, 4, 4], seed), random(&[2, 2, 3, 3, 3], seed + 100)];
        let err = check(&leaves, seed, |g, v| {
            let y = g.conv3d_strided_down(v[0], v[1], None, [2, 2, 1]).unwrap();
            let w = weights_like(g, y, seed + 300);
            g.weighted_sum(y, w).unwrap()
        });
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn upsample_gradients() {
    for seed in 0..SEEDS {
        let leaves = [random(&[1, 2, 2, 3, 2], seed)];
        let err = check(&leaves, seed, |g, v| {
            let y = g.upsample_trilinear(v[0], [2, 2, 3]).unwrap();
            let w = weights_like(g, y, seed + 300);
            g.weighted_sum(y, w).unwrap()
        });
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn resize_gradients() {
    for seed in 0..SEEDS {
        let leaves = [random(&[1, 1, 3, 5, 4], seed)];
        let err = check(&leaves, seed, |g, v| {
            let y = g.resize_trilinear(v[0], [4, 3, 7]).unwrap();
            let w = weights_like(g, y, seed + 300);
            g.weighted_sum(y, w).unwrap()
        });
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn batch_norm_gradients() {
    for seed in 0..SEEDS {
        let leaves = [random(&[2, 3, 2, 4, 4], seed), random(&[3], seed + 100), random(&[3], seed + 200)];
        let err = check(&leaves, seed, |g, v| {
            let mut rs = RunningStats::new(3);
            let y = g
                .batch_norm3d(v[0], v[1], v[2], NormMode::Train, &mut rs, BatchNormOptions::default())
                .unwrap();
            let w = weights_like(g, y, seed + 300);
            g.weighted_sum(y, w).unwrap()
        });
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn batch_norm_eval_gradients() {
    for seed in 0..SEEDS {
        let leaves = [random(&[2, 2, 2, 2, 3], seed), random(&[2], seed + 100), random(&[2], seed + 200)];
        let mut rs = RunningStats::new(2);
        rs.mean = vec![0.1, -0.2];
        rs.var = vec![0.7, 1.3];
        rs.updates = 1;
        let err = check(&leaves, seed, |g, v| {
            let mut rs = rs.clone();
            let y = g
                .batch_norm3d(v[0], v[1], v[2], NormMode::Eval, &mut rs, BatchNormOptions::default())
                .unwrap();
            let w = weights_like(g, y, seed + 300);
            g.weighted_sum(y, w).unwrap()
        });
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn relu_gradient_is_indicator() {
    for seed in 0..SEEDS {
        // keep inputs clear of the kink so the difference quotient is exact
        let x = random(&[4, 5], seed).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 });
        let leaves = [x.clone()];
        let err = check(&leaves, seed, |g, v| {
            let y = g.relu(v[0]).unwrap();
            g.sum(y).unwrap()
        });
        assert!(err <= TOL);
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let y = g.relu(xv).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        for (&gv, &xv) in g.grad(xv).unwrap().data().iter().zip(x.data()) {
            assert_eq!(gv, if xv > 0.0 { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn add_and_concat_gradients() {
    for seed in 0..SEEDS {
        let leaves = [random(&[2, 3, 2, 2, 2], seed), random(&[2, 3, 2, 2, 2], seed + 1), random(&[2, 5, 2, 2, 2], seed + 2)];
        let err = check(&leaves, seed, |g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            let c = g.concat_channels(s, v[2]).unwrap();
            let w = weights_like(g, c, seed + 300);
            g.weighted_sum(c, w).unwrap()
        });
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn softmax_gradients() {
    for seed in 0..SEEDS {
        let leaves = [random(&[2, 3, 2, 2, 3], seed).map(|v| 3.0 * v)];
        let err = check(&leaves, seed, |g, v| {
            let y = g.softmax_channels(v[0]).unwrap();
            let w = weights_like(g, y, seed + 300);
            g.weighted_sum(y, w).unwrap()
        });
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

/// conv -> BN -> ReLU -> conv -> BN, plus a projected shortcut, then ReLU.
fn residual_block(g: &mut Graph<f64>, v: &[Var]) -> Var {
    let opts = BatchNormOptions::default();
    let mut rs1 = RunningStats::new(3);
    let mut rs2 = RunningStats::new(3);
    let h = g.conv3d(v[0], v[1], Some(v[2]), [1; 3], [1; 3]).unwrap();
    let h = g.batch_norm3d(h, v[3], v[4], NormMode::Train, &mut rs1, opts).unwrap();
    let h = g.relu(h).unwrap();
    let h = g.conv3d(h, v[5], Some(v[6]), [1; 3], [1; 3]).unwrap();
    let h = g.batch_norm3d(h, v[7], v[8], NormMode::Train, &mut rs2, opts).unwrap();
    let skip = g.conv3d(v[0], v[9], None, [1; 3], [0; 3]).unwrap();
    let y = g.add(h, skip).unwrap();
    g.relu(y).unwrap()
}

#[test]
fn residual_block_gradients() {
    for seed in 0..SEEDS {
        let leaves = [
            random(&[2, 2, 3, 4, 4], seed),
            random(&[3, 2, 3, 3, 3], seed + 1),
            random(&[3], seed + 2),
            random(&[3], seed + 3).map(|v| v + 1.5),
            random(&[3], seed + 4),
            random(&[3, 3, 3, 3, 3], seed + 5),
            random(&[3], seed + 6),
            random(&[3], seed + 7).map(|v| v + 1.5),
            random(&[3], seed + 8),
            random(&[3, 2, 1, 1, 1], seed + 9),
        ];
        let err = check(&leaves, seed, |g, v| {
            let y = residual_block(g, v);
            let w = weights_like(g, y, seed + 300);
            g.weighted_sum(y, w).unwrap()
        });
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}
