use crate::data::volume::VolumeImage;

pub const WINDOW_WIDTH: f64 = 90.0;
pub const WINDOW_LEVEL: f64 = 40.0;
pub const STD_FLOOR: f64 = 1e-8;

/// Clamps HU to `[level - width/2, level + width/2]` and maps that range
/// linearly onto `[0, 1]`.
pub fn hu_window(image: &VolumeImage, width: f64, level: f64) -> VolumeImage {
    assert!(width > 0.0, "window width must be positive");
    let lo = level - width / 2.0;
    image.map(|v| ((v as f64 - lo) / width).clamp(0.0, 1.0) as f32)
}

/// Default brain window (width 90, level 40).
pub fn hu_window_default(image: &VolumeImage) -> VolumeImage {
    hu_window(image, WINDOW_WIDTH, WINDOW_LEVEL)
}

/// In-place z-score with the standard deviation floored at [`STD_FLOOR`].
pub fn zscore_in_place(values: &mut [f32]) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    for v in values {
        *v = ((*v as f64 - mean) / std) as f32;
    }
}

pub fn zscore_normalize(image: &VolumeImage) -> VolumeImage {
    let mut out = image.clone();
    zscore_in_place(out.data_mut());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::volume::Volume;

    #[test]
    fn window_endpoints() {
        let v = Volume::new([1, 1, 6], [1.0; 3], vec![-100.0, 200.0, 40.0, 85.0, -5.0, 62.5]).unwrap();
        let w = hu_window_default(&v);
        assert_eq!(w.data(), &[0.0, 1.0, 0.5, 1.0, 0.0, 0.75]);
    }

    #[test]
    fn constant_image_normalizes_to_zero() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], 3.5f32).unwrap();
        assert!(zscore_normalize(&v).data().iter().all(|&x| x == 0.0));
    }
}
