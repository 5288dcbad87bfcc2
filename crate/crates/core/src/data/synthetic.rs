//! Procedural face-like images with five landmarks, for desk-scale runs and
//! tests when no real dataset is at hand.
//!
//! Each image shows a shaded skin ellipse on a gradient background with
//! hair, brows, eyes, a nose shadow and a mouth. Position, scale, in-plane
//! rotation, a horizontal feature shift mimicking yaw, colors and lighting
//! vary per sample. Landmarks follow the usual five-point order: left eye,
//! right eye, nose tip, left and right mouth corner, in continuous pixel
//! coordinates (pixel `(x, y)` spans `[x, x + 1)`).

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use igc_tensor::Tensor;

use super::{preprocess, InMemory, Landmarks};

const SUPERSAMPLE: usize = 3;

struct Face {
    center: [f32; 2],
    radius: [f32; 2],
    cos: f32,
    sin: f32,
    shift: f32,
    skin: [f32; 3],
    hair: [f32; 3],
    hair_line: f32,
    lips: [f32; 3],
    iris: [f32; 3],
    light: [f32; 2],
    bg_top: [f32; 3],
    bg_bottom: [f32; 3],
}

impl Face {
    fn random(size: usize, rng: &mut impl Rng) -> Self {
        let s = size as f32;
        let angle = rng.random_range(-12.0f32..12.0).to_radians();
        let jitter = |rng: &mut dyn rand::RngCore, base: [f32; 3], amp: f32| -> [f32; 3] {
            let k = rng.random_range(-amp..amp);
            base.map(|c| (c + k + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0))
        };
        Self {
            center: [s / 2.0 + rng.random_range(-3.0..3.0), s / 2.0 + rng.random_range(-1.0..3.0)],
            radius: [s * rng.random_range(0.27..0.32), s * rng.random_range(0.35..0.41)],
            cos: angle.cos(),
            sin: angle.sin(),
            shift: rng.random_range(-0.15..0.15),
            skin: jitter(rng, [0.78, 0.58, 0.47], 0.15),
            hair: jitter(rng, [0.22, 0.15, 0.1], 0.1),
            hair_line: rng.random_range(-0.7..-0.5),
            lips: jitter(rng, [0.7, 0.3, 0.3], 0.08),
            iris: jitter(rng, [0.25, 0.2, 0.15], 0.1),
            light: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.2)],
            bg_top: jitter(rng, [0.45, 0.5, 0.55], 0.25),
            bg_bottom: jitter(rng, [0.3, 0.32, 0.35], 0.2),
        }
    }

    /// Face-local coordinates (units of the radii) to image coordinates.
    fn to_image(&self, p: [f32; 2]) -> [f32; 2] {
        let (x, y) = (p[0] * self.radius[0], p[1] * self.radius[1]);
        [
            self.center[0] + self.cos * x - self.sin * y,
            self.center[1] + self.sin * x + self.cos * y,
        ]
    }

    fn to_local(&self, q: [f32; 2]) -> [f32; 2] {
        let (dx, dy) = (q[0] - self.center[0], q[1] - self.center[1]);
        [
            (self.cos * dx + self.sin * dy) / self.radius[0],
            (-self.sin * dx + self.cos * dy) / self.radius[1],
        ]
    }

    fn landmarks(&self) -> Landmarks {
        let h = self.shift;
        [
            [-0.38 + h, -0.12],
            [0.38 + h, -0.12],
            [1.2 * h, 0.22],
            [-0.3 + h, 0.47],
            [0.3 + h, 0.47],
        ]
        .into_iter()
        .map(|p| self.to_image(p))
        .collect()
    }

    fn color(&self, q: [f32; 2], size: f32) -> [f32; 3] {
        let t = q[1] / size;
        let mut c: [f32; 3] = std::array::from_fn(|i| self.bg_top[i] * (1.0 - t) + self.bg_bottom[i] * t);
        let [x, y] = self.to_local(q);
        let r2 = x * x + y * y;
        if r2 > 1.0 {
            return c;
        }
        // Sphere-like shading of the face.
        let nz = (1.0 - r2).sqrt();
        let lz = (1.0 - self.light[0].powi(2) - self.light[1].powi(2)).sqrt();
        let shade = 0.45 + 0.55 * (x * self.light[0] + y * self.light[1] + nz * lz).max(0.0);
        c = self.skin.map(|v| (v * shade).min(1.0));
        if y < self.hair_line + 0.15 * x * x {
            return self.hair.map(|v| v * (0.8 + 0.2 * shade));
        }
        let h = self.shift;
        let ellipse = |cx: f32, cy: f32, rx: f32, ry: f32| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
        for side in [-1.0f32, 1.0] {
            let ex = side * 0.38 + h;
            if ellipse(ex, -0.27, 0.17, 0.04) < 1.0 {
                return self.hair.map(|v| v * 1.1);
            }
            let e = ellipse(ex, -0.12, 0.15, 0.07);
            if e < 1.0 {
                return if ellipse(ex, -0.12, 0.06, 0.065) < 1.0 {
                    self.iris
                } else {
                    [0.92, 0.9, 0.88]
                };
            }
        }
        if ellipse(1.2 * h, 0.12, 0.07, 0.12) < 1.0 {
            let k = 0.8 + 0.1 * ((x - 1.2 * h) * 8.0).signum();
            return c.map(|v| v * k);
        }
        if ellipse(h, 0.47, 0.3, 0.065) < 1.0 {
            return self.lips;
        }
        c
    }
}

/// One image and its landmarks.
pub fn face_image(size: usize, rng: &mut impl Rng) -> (RgbImage, Landmarks) {
    let face = Face::random(size, rng);
    let noise = Normal::new(0.0f32, 0.01).expect("valid std");
    let mut img = RgbImage::new(size as u32, size as u32);
    let step = 1.0 / SUPERSAMPLE as f32;
    for (px, py, out) in img.enumerate_pixels_mut() {
        let mut acc = [0.0f32; 3];
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let q = [
                    px as f32 + (sx as f32 + 0.5) * step,
                    py as f32 + (sy as f32 + 0.5) * step,
                ];
                let c = face.color(q, size as f32);
                for k in 0..3 {
                    acc[k] += c[k];
                }
            }
        }
        let n = (SUPERSAMPLE * SUPERSAMPLE) as f32;
        *out = Rgb(acc.map(|v| ((v / n + noise.sample(rng)).clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    (img, face.landmarks())
}

/// `n` images from a fixed seed.
pub fn generate(n: usize, size: usize, seed: u64) -> Vec<(RgbImage, Landmarks)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| face_image(size, &mut rng)).collect()
}

/// `n` images held in memory with their landmarks.
pub fn in_memory(n: usize, size: usize, seed: u64) -> InMemory {
    let (images, marks): (Vec<Tensor>, Vec<Landmarks>) = generate(n, size, seed)
        .into_iter()
        .map(|(img, m)| (preprocess(&img, None, size).expect("square image").0, m))
        .unzip();
    InMemory {
        images: if images.is_empty() {
            Tensor::zeros(&[0, 3, size, size])
        } else {
            Tensor::stack(&images)
        },
        landmarks: Some(marks),
    }
}

/// Write `n` images as `face_NNNNN.png` plus `landmarks.csv` into `dir`.
/// Returns the landmark file path.
pub fn write_dataset(dir: &Path, n: usize, size: usize, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut csv = String::from("path,lex,ley,rex,rey,nx,ny,lmx,lmy,rmx,rmy\n");
    for (i, (img, marks)) in generate(n, size, seed).into_iter().enumerate() {
        let name = format!("face_{i:05}.png");
        let path = dir.join(&name);
        img.save(&path).map_err(|e| Error::Image {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        csv.push_str(&name);
        for p in marks {
            csv.push_str(&format!(",{:.4},{:.4}", p[0], p[1]));
        }
        csv.push('\n');
    }
    let lm = dir.join("landmarks.csv");
    fs::write(&lm, csv).map_err(|e| Error::io(lm.display().to_string(), e))?;
    Ok(lm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn landmarks_sit_inside_the_frame_and_eyes_are_apart() {
        for (_, m) in generate(20, 64, 5) {
            assert_eq!(m.len(), 5);
            for p in &m {
                assert!(p[0] > 4.0 && p[0] < 60.0 && p[1] > 4.0 && p[1] < 60.0, "{p:?}");
            }
            let iod = ((m[0][0] - m[1][0]).powi(2) + (m[0][1] - m[1][1]).powi(2)).sqrt();
            assert!(iod > 8.0);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(2, 32, 9);
        let b = generate(2, 32, 9);
        assert_eq!(a[1].0, b[1].0);
        assert_eq!(a[1].1, b[1].1);
    }
}
