use crate::error::{data_err, Result};

/// A 3D voxel grid `(D, H, W)` with physical spacing `(slice, row, col)` in
/// millimetres. Row-major, width fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    shape: [usize; 3],
    spacing: [f64; 3],
    data: Vec<T>,
}

/// Intensity volume (HU or windowed/normalized values).
pub type VolumeImage = Volume<f32>;
/// Binary label volume with values in `{0, 1}`.
pub type SegMask = Volume<u8>;

impl<T: Copy> Volume<T> {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(data_err(format!("volume extents must be positive, got {shape:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(data_err(format!("spacing must be positive and finite, got {spacing:?}")));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(data_err(format!("{} voxels for shape {shape:?} ({n} expected)", data.len())));
        }
        Ok(Volume { shape, spacing, data })
    }

    pub fn filled(shape: [usize; 3], spacing: [f64; 3], value: T) -> Result<Self> {
        Self::new(shape, spacing, vec![value; shape.iter().product()])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: T) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    /// Same grid with new voxel values.
    pub fn with_data<U: Copy>(&self, data: Vec<U>) -> Result<Volume<U>> {
        Volume::new(self.shape, self.spacing, data)
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume { shape: self.shape, spacing: self.spacing, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Sub-block `[lo, hi)` per axis, which must lie inside the volume.
    pub fn crop(&self, lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if lo[a] >= hi[a] || hi[a] > self.shape[a] {
                return Err(data_err(format!("crop [{lo:?}, {hi:?}) outside shape {:?}", self.shape)));
            }
        }
        let shape = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        let mut data = Vec::with_capacity(shape.iter().product());
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                let start = self.index(z, y, lo[2]);
                data.extend_from_slice(&self.data[start..start + shape[2]]);
            }
        }
        Volume::new(shape, self.spacing, data)
    }

    /// Window of `shape` voxels starting at `origin`, which may extend past
    /// the volume; out-of-range voxels take `fill`.
    pub fn crop_padded(&self, origin: [isize; 3], shape: [usize; 3], fill: T) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for dz in 0..shape[0] {
            let z = origin[0] + dz as isize;
            for dy in 0..shape[1] {
                let y = origin[1] + dy as isize;
                for dx in 0..shape[2] {
                    let x = origin[2] + dx as isize;
                    let inside = (0..self.shape[0] as isize).contains(&z)
                        && (0..self.shape[1] as isize).contains(&y)
                        && (0..self.shape[2] as isize).contains(&x);
                    data.push(if inside { self.get(z as usize, y as usize, x as usize) } else { fill });
                }
            }
        }
        Volume::new(shape, self.spacing, data)
    }

    /// Writes `block` with its origin at `lo`; the block must fit.
    pub fn paste(&mut self, lo: [usize; 3], block: &Volume<T>) -> Result<()> {
        let s = block.shape;
        if (0..3).any(|a| lo[a] + s[a] > self.shape[a]) {
            return Err(data_err(format!("paste of {s:?} at {lo:?} exceeds {:?}", self.shape)));
        }
        for z in 0..s[0] {
            for y in 0..s[1] {
                let dst = self.index(lo[0] + z, lo[1] + y, lo[2]);
                let src = block.index(z, y, 0);
                self.data[dst..dst + s[2]].copy_from_slice(&block.data[src..src + s[2]]);
            }
        }
        Ok(())
    }
}

impl SegMask {
    /// Fails unless every voxel is 0 or 1.
    pub fn check_binary(&self) -> Result<()> {
        match self.data.iter().position(|&v| v > 1) {
            Some(i) => Err(data_err(format!("mask voxel {i} has value {}, expected 0 or 1", self.data[i]))),
            None => Ok(()),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Tight `[lo, hi)` bounds of the nonzero voxels.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0; 3];
        let [d, h, w] = self.shape;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if self.get(z, y, x) != 0 {
                        for (a, v) in [z, y, x].into_iter().enumerate() {
                            lo[a] = lo[a].min(v);
                            hi[a] = hi[a].max(v + 1);
                        }
                    }
                }
            }
        }
        (lo[0] != usize::MAX).then_some((lo, hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_geometry() {
        assert!(Volume::new([1, 0, 1], [1.0; 3], Vec::<u8>::new()).is_err());
        assert!(Volume::new([1, 1, 1], [1.0, 0.0, 1.0], vec![0u8]).is_err());
        assert!(Volume::new([1, 1, 2], [1.0; 3], vec![0u8]).is_err());
    }

    #[test]
    fn crop_paste_round_trip() {
        let v = Volume::new([2, 3, 4], [1.0; 3], (0..24u8).collect()).unwrap();
        let c = v.crop([1, 1, 1], [2, 3, 3]).unwrap();
        assert_eq!(c.data(), &[17, 18, 21, 22]);
        let mut z = Volume::filled([2, 3, 4], [1.0; 3], 0u8).unwrap();
        z.paste([1, 1, 1], &c).unwrap();
        assert_eq!(z.get(1, 2, 2), 22);
        assert_eq!(z.data().iter().filter(|&&x| x != 0).count(), 4);
    }

    #[test]
    fn padded_crop_fills_outside() {
        let v = Volume::new([1, 2, 2], [1.0; 3], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let c = v.crop_padded([0, -1, 0], [1, 3, 3], 0.0).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0, 0.0]);
    }

    #[test]
    fn bounding_box_and_binary_check() {
        let mut m = Volume::filled([3, 4, 5], [1.0; 3], 0u8).unwrap();
        assert_eq!(m.bounding_box(), None);
        m.set(1, 2, 3, 1);
        m.set(2, 0, 3, 1);
        assert_eq!(m.bounding_box(), Some(([1, 0, 3], [3, 3, 4])));
        m.set(0, 0, 0, 2);
        assert!(m.check_binary().is_err());
    }
}
