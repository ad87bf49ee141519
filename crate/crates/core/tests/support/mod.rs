#![allow(dead_code)]

pub mod gradcheck;

use hemoseg::config::{CascadeConfig, UNet3DConfig};
use hemoseg::data::dataset::generate_cases;
use hemoseg::data::{Case, PhantomSpec};

/// Smallest configuration exercising every model path: a depth-preserving
/// and a full stride, two deep-supervision heads.
pub fn micro_config() -> UNet3DConfig {
    UNet3DConfig {
        levels: 3,
        channels: vec![2, 3, 4],
        factors: vec![[1, 2, 2], [2, 2, 2]],
        patch: [2, 8, 8],
        deep_supervision: [0, 1].into(),
        ..UNet3DConfig::toy()
    }
}

pub fn phantoms(seed: u64, count: usize) -> Vec<Case> {
    generate_cases(&PhantomSpec { seed, ..PhantomSpec::default() }, count).unwrap()
}

pub fn solitary_phantoms(seed: u64, count: usize) -> Vec<Case> {
    generate_cases(&PhantomSpec { seed, lesion_count: (1, 1), ..PhantomSpec::default() }, count).unwrap()
}

pub fn toy_cascade() -> CascadeConfig {
    CascadeConfig::toy()
}
