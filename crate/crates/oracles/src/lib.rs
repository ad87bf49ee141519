//! Brute-force reference computations for tests.
//!
//! Nothing here depends on the implementation crates: every oracle works on
//! plain slices so it stays an independent check of the production path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Seven-nested-loop 3D cross-correlation over `[N,C,D,H,W]` input and
/// `[K,C,kd,kh,kw]` weight. Returns the output and its shape.
pub fn direct_conv3d(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    bias: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [n, c, d, h, wd] = xs;
    let [k, wc, kd, kh, kw] = ws;
    assert_eq!(c, wc);
    let od = (d + 2 * pad[0] - kd) / stride[0] + 1;
    let oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let ow = (wd + 2 * pad[2] - kw) / stride[2] + 1;
    let mut out = vec![0.0; n * k * od * oh * ow];
    for b in 0..n {
        for o in 0..k {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bias.map_or(0.0, |bv| bv[o]);
                        for ci in 0..c {
                            for dz in 0..kd {
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        let iz = (z * stride[0] + dz) as isize - pad[0] as isize;
                                        let iy = (y * stride[1] + dy) as isize - pad[1] as isize;
                                        let ix = (xx * stride[2] + dx) as isize - pad[2] as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= wd as isize
                                        {
                                            continue;
                                        }
                                        let xi = (((b * c + ci) * d + iz as usize) * h + iy as usize) * wd
                                            + ix as usize;
                                        let wi = (((o * c + ci) * kd + dz) * kh + dy) * kw + dx;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[(((b * k + o) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    (out, [n, k, od, oh, ow])
}

/// Central finite differences of `f` at `x` for the listed coordinates.
pub fn central_differences(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, floor)`: relative error that degrades to an
/// absolute error near zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Up to `count` distinct random coordinates in `0..len` (all of them when
/// `len <= count`).
pub fn sample_coords(rng: &mut ChaCha8Rng, len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut picked = Vec::with_capacity(count);
    while picked.len() < count {
        let i = rng.random_range(0..len);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked
}

/// Farthest pair among in-plane voxel centres by exhaustive scan.
///
/// Points are `(row, col)` indices; spacing is `(row_mm, col_mm)`. Ties on
/// distance keep the first pair in `(min point, max point)` lexicographic
/// order. Returns `(p, q, distance_mm)` with `p <= q`.
pub fn exhaustive_farthest_pair(
    points: &[(usize, usize)],
    spacing: (f64, f64),
) -> ((usize, usize), (usize, usize), f64) {
    assert!(!points.is_empty());
    let dist2 = |a: (usize, usize), b: (usize, usize)| {
        let dr = (a.0 as f64 - b.0 as f64) * spacing.0;
        let dc = (a.1 as f64 - b.1 as f64) * spacing.1;
        dr * dr + dc * dc
    };
    let mut best = (points[0], points[0], 0.0f64);
    for (i, &a) in points.iter().enumerate() {
        for &b in &points[i..] {
            let (p, q) = if a <= b { (a, b) } else { (b, a) };
            let d2 = dist2(p, q);
            if d2 > best.2 || (d2 == best.2 && (p, q) < (best.0, best.1)) {
                best = (p, q, d2);
            }
        }
    }
    (best.0, best.1, best.2.sqrt())
}

/// Width of the point set projected onto the unit direction `(ur, uc)`
/// (physical mm along rows / cols).
pub fn projected_width(points: &[(usize, usize)], spacing: (f64, f64), dir: (f64, f64)) -> f64 {
    let proj = |p: &(usize, usize)| p.0 as f64 * spacing.0 * dir.0 + p.1 as f64 * spacing.1 * dir.1;
    let lo = points.iter().map(proj).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(proj).fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

/// `(tp, fp, fn, tn)` by a plain voxel loop.
pub fn confusion_loop(pred: &[u8], gt: &[u8]) -> (u64, u64, u64, u64) {
    assert_eq!(pred.len(), gt.len());
    let (mut tp, mut fp, mut fneg, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fneg += 1,
            (0, 0) => tn += 1,
            _ => panic!("non-binary voxel"),
        }
    }
    (tp, fp, fneg, tn)
}

/// `(4/3) * pi * a * b * c`.
pub fn ellipsoid_volume(a: f64, b: f64, c: f64) -> f64 {
    4.0 / 3.0 * std::f64::consts::PI * a * b * c
}
