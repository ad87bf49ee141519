//! Training-time augmentation on windowed volumes: in-plane rotation, H/W
//! flips, Gaussian noise, in-plane Gaussian smoothing, contrast scaling and
//! a foreground-biased crop. Geometric transforms move image and mask
//! together; intensity transforms touch the image only.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::volume::{SegMask, Volume, VolumeImage};
use crate::error::Result;

/// Padding value for crops and rotations, in windowed units (air).
pub const PAD_VALUE: f32 = 0.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub p_rotate: f64,
    pub max_rotation_deg: f64,
    pub p_flip_h: f64,
    pub p_flip_w: f64,
    pub p_noise: f64,
    pub noise_sigma: (f64, f64),
    pub p_smooth: f64,
    pub smooth_sigma: (f64, f64),
    pub p_contrast: f64,
    pub contrast: (f64, f64),
    /// Output shape; `None` keeps the full volume.
    pub crop: Option<[usize; 3]>,
    /// Probability that the crop is centred on a foreground voxel.
    pub foreground_bias: f64,
}

impl AugmentPolicy {
    pub fn standard(crop: Option<[usize; 3]>) -> Self {
        AugmentPolicy {
            p_rotate: 0.5,
            max_rotation_deg: 30.0,
            p_flip_h: 0.5,
            p_flip_w: 0.5,
            p_noise: 0.5,
            noise_sigma: (0.0, 0.1),
            p_smooth: 0.5,
            smooth_sigma: (0.5, 1.0),
            p_contrast: 0.5,
            contrast: (0.75, 1.25),
            crop,
            foreground_bias: 0.5,
        }
    }

    /// Every transform disabled; only the crop remains.
    pub fn none(crop: Option<[usize; 3]>) -> Self {
        AugmentPolicy {
            p_rotate: 0.0,
            p_flip_h: 0.0,
            p_flip_w: 0.0,
            p_noise: 0.0,
            p_smooth: 0.0,
            p_contrast: 0.0,
            ..Self::standard(crop)
        }
    }
}

pub fn augment(
    image: &VolumeImage,
    mask: &SegMask,
    rng: &mut ChaCha8Rng,
    policy: &AugmentPolicy,
) -> Result<(VolumeImage, SegMask)> {
    if image.shape() != mask.shape() {
        return Err(crate::error::data_err(format!(
            "image {:?} and mask {:?} differ in shape",
            image.shape(),
            mask.shape()
        )));
    }
    let mut img = image.clone();
    let mut msk = mask.clone();
    if rng.random_bool(policy.p_rotate) {
        let max = policy.max_rotation_deg.to_radians();
        let angle = rng.random_range(-max..=max);
        img = rotate_image(&img, angle);
        msk = rotate_mask(&msk, angle);
    }
    if rng.random_bool(policy.p_flip_h) {
        img = flip(&img, 1);
        msk = flip(&msk, 1);
    }
    if rng.random_bool(policy.p_flip_w) {
        img = flip(&img, 2);
        msk = flip(&msk, 2);
    }
    if rng.random_bool(policy.p_noise) {
        let sigma = rng.random_range(policy.noise_sigma.0..=policy.noise_sigma.1);
        if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).expect("sigma >= 0");
            for v in img.data_mut() {
                *v += n.sample(rng) as f32;
            }
        }
    }
    if rng.random_bool(policy.p_smooth) {
        let sigma = rng.random_range(policy.smooth_sigma.0..=policy.smooth_sigma.1);
        img = smooth_inplane(&img, sigma);
    }
    if rng.random_bool(policy.p_contrast) {
        let f = rng.random_range(policy.contrast.0..=policy.contrast.1);
        img = scale_contrast(&img, f);
    }
    if let Some(shape) = policy.crop {
        let origin = crop_origin(&msk, shape, policy.foreground_bias, rng);
        img = img.crop_padded(origin, shape, PAD_VALUE)?;
        msk = msk.crop_padded(origin, shape, 0)?;
    }
    Ok((img, msk))
}

/// Mirror along `axis` (0 depth, 1 height, 2 width).
pub fn flip<T: Copy>(v: &Volume<T>, axis: usize) -> Volume<T> {
    let [d, h, w] = v.shape();
    let mut out = v.clone();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (sz, sy, sx) = match axis {
                    0 => (d - 1 - z, y, x),
                    1 => (z, h - 1 - y, x),
                    _ => (z, y, w - 1 - x),
                };
                out.set(z, y, x, v.get(sz, sy, sx));
            }
        }
    }
    out
}

/// Source position (row, col) in index units for output `(y, x)` rotated by
/// `angle` about the slice centre, in physical coordinates.
fn rotation_source(v_shape: [usize; 3], spacing: [f64; 3], angle: f64) -> impl Fn(usize, usize) -> (f64, f64) {
    let cy = (v_shape[1] as f64 - 1.0) / 2.0;
    let cx = (v_shape[2] as f64 - 1.0) / 2.0;
    let (sr, sc) = (spacing[1], spacing[2]);
    let (s, c) = angle.sin_cos();
    move |y, x| {
        let py = (y as f64 - cy) * sr;
        let px = (x as f64 - cx) * sc;
        let qy = c * py + s * px;
        let qx = -s * py + c * px;
        (qy / sr + cy, qx / sc + cx)
    }
}

/// In-plane rotation with bilinear interpolation; outside samples take
/// [`PAD_VALUE`].
pub fn rotate_image(v: &VolumeImage, angle: f64) -> VolumeImage {
    let [d, h, w] = v.shape();
    let src = rotation_source(v.shape(), v.spacing(), angle);
    let mut out = v.clone();
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = src(y, x);
            let (y0, x0) = (fy.floor(), fx.floor());
            let (ty, tx) = ((fy - y0) as f32, (fx - x0) as f32);
            for z in 0..d {
                let at = |yy: f64, xx: f64| {
                    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                        PAD_VALUE
                    } else {
                        v.get(z, yy as usize, xx as usize)
                    }
                };
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1.0) * tx;
                let bot = at(y0 + 1.0, x0) * (1.0 - tx) + at(y0 + 1.0, x0 + 1.0) * tx;
                out.set(z, y, x, top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

/// In-plane rotation with nearest-neighbour sampling.
pub fn rotate_mask(v: &SegMask, angle: f64) -> SegMask {
    let [d, h, w] = v.shape();
    let src = rotation_source(v.shape(), v.spacing(), angle);
    let mut out = v.clone();
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = src(y, x);
            let (ry, rx) = (fy.round(), fx.round());
            let inside = ry >= 0.0 && rx >= 0.0 && ry < h as f64 && rx < w as f64;
            for z in 0..d {
                out.set(z, y, x, if inside { v.get(z, ry as usize, rx as usize) } else { 0 });
            }
        }
    }
    out
}

/// Separable Gaussian blur over rows and columns (sigma in voxels), with
/// edge clamping.
pub fn smooth_inplane(v: &VolumeImage, sigma: f64) -> VolumeImage {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let [d, h, w] = v.shape();
    let pass = |src: &VolumeImage, along_rows: bool| {
        let mut out = src.clone();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let off = k as isize - radius;
                        let val = if along_rows {
                            src.get(z, (y as isize + off).clamp(0, h as isize - 1) as usize, x)
                        } else {
                            src.get(z, y, (x as isize + off).clamp(0, w as isize - 1) as usize)
                        };
                        acc += kv * val as f64;
                    }
                    out.set(z, y, x, acc as f32);
                }
            }
        }
        out
    };
    pass(&pass(v, true), false)
}

/// `mean + f * (x - mean)` with the mean over the whole volume.
pub fn scale_contrast(v: &VolumeImage, f: f64) -> VolumeImage {
    let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    v.map(|x| (mean + f * (x as f64 - mean)) as f32)
}

/// Crop origin: with probability `bias` (and a non-empty mask) the window is
/// centred on a random foreground voxel, otherwise placed uniformly. Axes
/// shorter than the window get a (possibly negative) origin so the volume
/// sits inside the padded window.
pub fn crop_origin(mask: &SegMask, shape: [usize; 3], bias: f64, rng: &mut ChaCha8Rng) -> [isize; 3] {
    let vs = mask.shape();
    let clamp = |a: usize, o: isize| {
        let lo = (vs[a] as isize - shape[a] as isize).min(0);
        let hi = (vs[a] as isize - shape[a] as isize).max(0);
        o.clamp(lo, hi)
    };
    let fg = rng.random_bool(bias) && mask.count() > 0;
    if fg {
        let k = rng.random_range(0..mask.count());
        let idx = mask.data().iter().enumerate().filter(|(_, &v)| v != 0).nth(k).expect("k < count").0;
        let p = [idx / (vs[1] * vs[2]), (idx / vs[2]) % vs[1], idx % vs[2]];
        [0, 1, 2].map(|a| clamp(a, p[a] as isize - (shape[a] / 2) as isize))
    } else {
        [0, 1, 2].map(|a| {
            let diff = vs[a] as isize - shape[a] as isize;
            if diff >= 0 {
                rng.random_range(0..=diff as i64) as isize
            } else {
                rng.random_range(diff as i64..=0) as isize
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_rotation_is_identity() {
        let v = Volume::new([1, 3, 4], [1.0; 3], (0..12).map(|i| i as f32).collect()).unwrap();
        assert_eq!(rotate_image(&v, 0.0), v);
        let m = v.map(|x| u8::from(x > 5.0));
        assert_eq!(rotate_mask(&m, 0.0), m);
    }

    #[test]
    fn quarter_turn_of_square_maps_corners() {
        let mut m = Volume::filled([1, 3, 3], [1.0; 3], 0u8).unwrap();
        m.set(0, 0, 0, 1);
        let r = rotate_mask(&m, std::f64::consts::FRAC_PI_2);
        assert_eq!(r.count(), 1);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let v = Volume::filled([2, 5, 5], [1.0; 3], 0.25f32).unwrap();
        let s = smooth_inplane(&v, 0.8);
        assert!(s.data().iter().all(|&x| (x - 0.25).abs() < 1e-6));
    }

    #[test]
    fn crop_origin_stays_in_range() {
        let mut m = Volume::filled([4, 10, 10], [1.0; 3], 0u8).unwrap();
        m.set(3, 9, 9, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let o = crop_origin(&m, [8, 4, 4], 1.0, &mut rng);
            assert!((-4..=0).contains(&o[0]));
            assert_eq!([o[1], o[2]], [6, 6]);
        }
    }
}
