//! Volumes, synthetic phantoms, intensity windowing, augmentation and the
//! RVOL file format.

pub mod augment;
pub mod dataset;
pub mod intensity;
pub mod phantom;
pub mod rvol;
pub mod volume;

pub use augment::{augment, AugmentPolicy};
pub use dataset::{load_dataset, write_dataset, Case};
pub use intensity::{hu_window, hu_window_default, zscore_normalize};
pub use phantom::{generate_phantom, Ellipsoid, LesionClass, Phantom, PhantomSpec};
pub use volume::{SegMask, Volume, VolumeImage};
