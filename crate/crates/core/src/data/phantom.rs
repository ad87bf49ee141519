//! Synthetic head-CT phantoms: air, an ellipsoidal brain, hyperdense
//! ellipsoidal lesions and Gaussian noise. The mask is the exact union of
//! the rasterized lesions (voxel centre inside the analytic ellipsoid).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{join, parse_list, parse_triple, triple, KvFile};
use crate::data::volume::{SegMask, Volume, VolumeImage};
use crate::error::{data_err, ConfigError, Error, Result};

pub const AIR_HU: f32 = -1000.0;
/// Brain semi-axes as a fraction of the physical field of view per axis.
pub const BRAIN_FRACTION: f64 = 0.45;
const PLACEMENT_ATTEMPTS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionClass {
    Solitary,
    Scattered,
}

impl LesionClass {
    pub fn name(self) -> &'static str {
        match self {
            LesionClass::Solitary => "solitary",
            LesionClass::Scattered => "scattered",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Inclusive range.
    pub lesion_count: (usize, usize),
    /// Range for each lesion semi-axis, mm.
    pub semi_axes_mm: (f64, f64),
    pub lesion_hu: (f64, f64),
    pub background_hu: f64,
    pub noise_sigma_hu: f64,
    /// Random in-plane orientation of each lesion.
    pub rotate: bool,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [16, 64, 64],
            spacing: [4.0, 1.0, 1.0],
            lesion_count: (1, 2),
            semi_axes_mm: (4.0, 10.0),
            lesion_hu: (60.0, 80.0),
            background_hu: 40.0,
            noise_sigma_hu: 5.0,
            rotate: true,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        let ok = !self.shape.contains(&0)
            && self.spacing.iter().all(|&s| s > 0.0)
            && self.lesion_count.0 <= self.lesion_count.1
            && self.semi_axes_mm.0 > 0.0
            && self.semi_axes_mm.0 <= self.semi_axes_mm.1
            && self.lesion_hu.0 <= self.lesion_hu.1
            && self.noise_sigma_hu >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(data_err(format!("invalid phantom spec {self:?}")))
        }
    }

    /// Spec for case `index` of a dataset seeded with `self.seed`.
    pub fn for_case(&self, index: u64) -> PhantomSpec {
        PhantomSpec { seed: self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_add(1), ..self.clone() }
    }

    /// Keys `phantom.*` plus the shared `seed`; absent keys keep `base`.
    pub fn from_kv(kv: &KvFile, base: &PhantomSpec) -> std::result::Result<Self, ConfigError> {
        let pair = |key: &str, base: (f64, f64)| -> std::result::Result<(f64, f64), ConfigError> {
            match kv.raw(key) {
                None => Ok(base),
                Some(v) => match parse_list::<f64>(v, key)?[..] {
                    [lo, hi] => Ok((lo, hi)),
                    _ => Err(ConfigError::Invalid(format!("{key}: expected `lo, hi`"))),
                },
            }
        };
        let mut spec = base.clone();
        if let Some(v) = kv.raw("phantom.shape") {
            spec.shape = parse_triple(v, "phantom.shape")?;
        }
        if let Some(v) = kv.raw("phantom.spacing") {
            spec.spacing = parse_list::<f64>(v, "phantom.spacing")?
                .try_into()
                .map_err(|_| ConfigError::Invalid("phantom.spacing: expected three values".into()))?;
        }
        if let Some(v) = kv.raw("phantom.lesion_count") {
            match parse_list::<usize>(v, "phantom.lesion_count")?[..] {
                [lo, hi] => spec.lesion_count = (lo, hi),
                _ => return Err(ConfigError::Invalid("phantom.lesion_count: expected `min, max`".into())),
            }
        }
        spec.semi_axes_mm = pair("phantom.semi_axes_mm", spec.semi_axes_mm)?;
        spec.lesion_hu = pair("phantom.lesion_hu", spec.lesion_hu)?;
        spec.background_hu = kv.get_parsed("phantom.background_hu")?.unwrap_or(spec.background_hu);
        spec.noise_sigma_hu = kv.get_parsed("phantom.noise_sigma_hu")?.unwrap_or(spec.noise_sigma_hu);
        spec.rotate = kv.get_parsed("phantom.rotate")?.unwrap_or(spec.rotate);
        spec.seed = kv.get_parsed("seed")?.unwrap_or(spec.seed);
        spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(spec)
    }

    pub fn to_kv(&self, kv: &mut KvFile) {
        kv.set("phantom.shape", triple(self.shape));
        kv.set("phantom.spacing", join(&self.spacing));
        kv.set("phantom.lesion_count", format!("{}, {}", self.lesion_count.0, self.lesion_count.1));
        kv.set("phantom.semi_axes_mm", format!("{}, {}", self.semi_axes_mm.0, self.semi_axes_mm.1));
        kv.set("phantom.lesion_hu", format!("{}, {}", self.lesion_hu.0, self.lesion_hu.1));
        kv.set("phantom.background_hu", self.background_hu);
        kv.set("phantom.noise_sigma_hu", self.noise_sigma_hu);
        kv.set("phantom.rotate", self.rotate);
        kv.set("seed", self.seed);
    }

    pub fn brain(&self) -> Ellipsoid {
        let fov = [0, 1, 2].map(|a| self.shape[a] as f64 * self.spacing[a]);
        Ellipsoid {
            center_mm: fov.map(|f| f / 2.0),
            semi_axes_mm: fov.map(|f| f * BRAIN_FRACTION),
            angle: 0.0,
        }
    }
}

/// Ellipsoid in physical coordinates, semi-axes `(depth, u, v)` where `u`
/// and `v` are the in-plane axes rotated by `angle` from (row, col).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
    pub angle: f64,
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let [dz, dy, dx] = [0, 1, 2].map(|a| p[a] - self.center_mm[a]);
        let (s, c) = self.angle.sin_cos();
        let u = dy * c + dx * s;
        let v = -dy * s + dx * c;
        let [a, b, cc] = self.semi_axes_mm;
        (dz / a).powi(2) + (u / b).powi(2) + (v / cc).powi(2) <= 1.0
    }

    /// Corners of the oriented bounding box.
    fn corners(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        let (s, c) = self.angle.sin_cos();
        let [a, b, cc] = self.semi_axes_mm;
        (0..8).map(move |k| {
            let z = if k & 1 == 0 { -a } else { a };
            let u = if k & 2 == 0 { -b } else { b };
            let v = if k & 4 == 0 { -cc } else { cc };
            [
                self.center_mm[0] + z,
                self.center_mm[1] + u * c - v * s,
                self.center_mm[2] + u * s + v * c,
            ]
        })
    }

    /// Analytic volume in ml.
    pub fn volume_ml(&self) -> f64 {
        let [a, b, c] = self.semi_axes_mm;
        4.0 / 3.0 * std::f64::consts::PI * a * b * c / 1000.0
    }
}

/// Physical coordinate of voxel `i`'s centre along an axis.
pub fn voxel_center(i: usize, spacing: f64) -> f64 {
    (i as f64 + 0.5) * spacing
}

/// Mask of voxels whose centres lie inside `e`.
pub fn rasterize(shape: [usize; 3], spacing: [f64; 3], e: &Ellipsoid) -> Result<SegMask> {
    let mut m = Volume::filled(shape, spacing, 0u8)?;
    rasterize_into(&mut m, e, |v| *v = 1);
    Ok(m)
}

fn rasterize_into<T: Copy>(vol: &mut Volume<T>, e: &Ellipsoid, mut f: impl FnMut(&mut T)) {
    let [d, h, w] = vol.shape();
    let sp = vol.spacing();
    let reach = e.semi_axes_mm.iter().cloned().fold(0.0, f64::max);
    let range = |a: usize, n: usize| {
        let lo = ((e.center_mm[a] - reach) / sp[a] - 1.0).floor().max(0.0) as usize;
        let hi = (((e.center_mm[a] + reach) / sp[a] + 1.0).ceil().max(0.0) as usize).min(n);
        lo..hi
    };
    for z in range(0, d) {
        for y in range(1, h) {
            for x in range(2, w) {
                let p = [voxel_center(z, sp[0]), voxel_center(y, sp[1]), voxel_center(x, sp[2])];
                if e.contains(p) {
                    let i = vol.index(z, y, x);
                    f(&mut vol.data_mut()[i]);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    /// Hounsfield units.
    pub image: VolumeImage,
    pub mask: SegMask,
    pub lesions: Vec<Ellipsoid>,
    pub class: LesionClass,
}

/// Deterministic in `spec` (including its seed).
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let brain = spec.brain();
    let count = rng.random_range(spec.lesion_count.0..=spec.lesion_count.1);
    let mut lesions = Vec::with_capacity(count);
    for k in 0..count {
        lesions.push(place_lesion(spec, &brain, &mut rng).ok_or_else(|| {
            Error::Data(format!(
                "lesion {k} with semi-axes in {:?} mm does not fit inside the brain after {PLACEMENT_ATTEMPTS} attempts",
                spec.semi_axes_mm
            ))
        })?);
    }

    let mut image = Volume::filled(spec.shape, spec.spacing, AIR_HU)?;
    rasterize_into(&mut image, &brain, |v| *v = spec.background_hu as f32);
    let mut mask = Volume::filled(spec.shape, spec.spacing, 0u8)?;
    for e in &lesions {
        let hu = rng.random_range(spec.lesion_hu.0..=spec.lesion_hu.1) as f32;
        rasterize_into(&mut image, e, |v| *v = hu);
        rasterize_into(&mut mask, e, |v| *v = 1);
    }
    if spec.noise_sigma_hu > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma_hu).expect("sigma is non-negative");
        for v in image.data_mut() {
            *v += noise.sample(&mut rng) as f32;
        }
    }
    let class = if lesions.len() >= 2 { LesionClass::Scattered } else { LesionClass::Solitary };
    Ok(Phantom { image, mask, lesions, class })
}

fn place_lesion(spec: &PhantomSpec, brain: &Ellipsoid, rng: &mut ChaCha8Rng) -> Option<Ellipsoid> {
    let (lo, hi) = spec.semi_axes_mm;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let semi_axes_mm = [0; 3].map(|_| rng.random_range(lo..=hi));
        let center_mm = [0, 1, 2].map(|a| {
            let r = brain.semi_axes_mm[a];
            brain.center_mm[a] + rng.random_range(-r..=r)
        });
        let angle = if spec.rotate { rng.random_range(0.0..std::f64::consts::PI) } else { 0.0 };
        let e = Ellipsoid { center_mm, semi_axes_mm, angle };
        if e.corners().all(|c| brain.contains(c)) {
            return Some(e);
        }
    }
    None
}
