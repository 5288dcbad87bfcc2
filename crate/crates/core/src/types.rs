//! Value types exchanged between the pipeline stages.
//!
//! Batched intermediate results live as tensors on the autodiff graph; the
//! types here are per-sample snapshots used for inspection, evaluation and
//! export.

use igc_tensor::Tensor;

use crate::error::{Error, Result};

/// Batch of RGB images `[B, 3, H, W]` with values in `[0, 1]`, `H = W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pixels: Tensor,
}

impl ImageBatch {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!(
                "image batch must be [B, 3, H, W], got {s:?}"
            )));
        }
        if s[2] != s[3] {
            return Err(Error::Shape(format!("images must be square, got {}x{}", s[2], s[3])));
        }
        if s[0] == 0 {
            return Err(Error::Shape("empty image batch".into()));
        }
        if let Some(bad) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn batch_size(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.pixels.index0(i)
    }
}

/// Shape and albedo embeddings, each `[B, F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalEmbeddings {
    pub shape: Tensor,
    pub albedo: Tensor,
}

/// Six-dof pose: yaw, pitch, roll in radians, then translation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Pose(pub [f32; 6]);

impl Pose {
    pub fn yaw(&self) -> f32 {
        self.0[0]
    }

    pub fn pitch(&self) -> f32 {
        self.0[1]
    }

    pub fn roll(&self) -> f32 {
        self.0[2]
    }

    pub fn translation(&self) -> [f32; 3] {
        [self.0[3], self.0[4], self.0[5]]
    }

    /// Componentwise mean.
    pub fn mean(poses: &[Pose]) -> Pose {
        let mut out = [0.0f32; 6];
        for p in poses {
            for (o, v) in out.iter_mut().zip(p.0) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= poses.len() as f32);
        Pose(out)
    }
}

/// One part's explicit 3D description in the canonical view.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphicsCapsule {
    /// `[H, W]` depth within the configured range.
    pub depth: Tensor,
    /// `[3, H, W]` albedo in `[0, 1]`.
    pub albedo: Tensor,
    pub pose: Pose,
}

/// Parts assembled by depth.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectCapsule {
    pub depth: Tensor,
    pub albedo: Tensor,
    pub pose: Pose,
    /// `[M, H, W]`, exactly one 1 per pixel.
    pub visibility: Tensor,
    /// `[M, H, W]`, sums to 1 per pixel.
    pub soft_visibility: Tensor,
    /// Front-most capsule per pixel, row-major `[H, W]`.
    pub labels: Vec<u8>,
}

impl ObjectCapsule {
    pub fn num_capsules(&self) -> usize {
        self.visibility.shape()[0]
    }
}

/// Lambertian lighting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lighting {
    pub ambient: f32,
    pub diffuse: f32,
    /// `(l_x, l_y)`; `l_z` follows from normalizing `(l_x, l_y, 1)`.
    pub direction: [f32; 2],
}

impl Lighting {
    /// Unit light vector with positive `z` (light from the camera side).
    pub fn light_vector(&self) -> [f32; 3] {
        let [x, y] = self.direction;
        let n = (x * x + y * y + 1.0).sqrt();
        [x / n, y / n, 1.0 / n]
    }

    pub fn ambient_only(ambient: f32) -> Self {
        Self {
            ambient,
            diffuse: 0.0,
            direction: [0.0, 0.0],
        }
    }
}

/// Confidence maps: one `[B, 2, H_k, W_k]` tensor per level. Channel 0 weights
/// the direct reconstruction, channel 1 the flipped one.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMaps {
    pub levels: Vec<Tensor>,
}

/// Per-pixel capsule labels in image space.
///
/// Values `0..M` are capsule indices; [`SegmentationMap::background`] (= M)
/// marks pixels without geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMap {
    pub size: usize,
    pub num_capsules: usize,
    pub labels: Vec<u8>,
}

impl SegmentationMap {
    pub fn new(size: usize, num_capsules: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != size * size {
            return Err(Error::Shape(format!(
                "label map of {} entries for a {size}x{size} frame",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > num_capsules) {
            return Err(Error::InvalidInput(format!(
                "label {bad} outside 0..={num_capsules}"
            )));
        }
        Ok(Self {
            size,
            num_capsules,
            labels,
        })
    }

    pub fn background(&self) -> u8 {
        self.num_capsules as u8
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.size + col]
    }

    /// Labels with the background capsule folded into the background class.
    pub fn for_evaluation(&self) -> SegmentationMap {
        let bg_capsule = (self.num_capsules - 1) as u8;
        let bg = self.background();
        SegmentationMap {
            size: self.size,
            num_capsules: self.num_capsules,
            labels: self
                .labels
                .iter()
                .map(|&l| if l == bg_capsule { bg } else { l })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn light_vector_is_unit() {
        let l = Lighting {
            ambient: 0.3,
            diffuse: 0.7,
            direction: [0.4, -0.9],
        };
        let v = l.light_vector();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert!(v[2] > 0.0);
    }

    #[test]
    fn image_batch_validation() {
        assert!(ImageBatch::new(Tensor::zeros(&[1, 3, 4, 4])).is_ok());
        assert!(ImageBatch::new(Tensor::zeros(&[1, 1, 4, 4])).is_err());
        assert!(ImageBatch::new(Tensor::zeros(&[1, 3, 4, 5])).is_err());
        assert!(ImageBatch::new(Tensor::full(&[1, 3, 2, 2], 1.5)).is_err());
    }

    #[test]
    fn evaluation_folds_background_capsule() {
        let seg = SegmentationMap::new(2, 3, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(seg.for_evaluation().labels, vec![0, 1, 3, 3]);
        assert!(SegmentationMap::new(2, 3, vec![0, 1, 2, 4]).is_err());
    }

    #[test]
    fn mean_pose() {
        let p = Pose::mean(&[Pose([1.0; 6]), Pose([3.0; 6])]);
        assert_eq!(p, Pose([2.0; 6]));
    }
}
