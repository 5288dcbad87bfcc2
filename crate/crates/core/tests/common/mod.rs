//! Fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod scene;

use igc_core::data::Landmarks;
use igc_core::eval::centroids;
use igc_core::types::SegmentationMap;
use rand::Rng;

/// Five integer landmarks in a loose face layout on a 64×64 frame: two eyes,
/// nose tip and mouth corners.
pub fn face_landmarks(rng: &mut impl Rng) -> Landmarks {
    let ex = rng.random_range(12..24) as f32;
    let ey = rng.random_range(16..30) as f32;
    let iod = rng.random_range(16..26) as f32;
    vec![
        [ex, ey],
        [ex + iod, ey + rng.random_range(-2..3) as f32],
        [ex + (iod / 2.0).floor() + rng.random_range(-3..4) as f32, ey + rng.random_range(8..14) as f32],
        [ex + rng.random_range(2..6) as f32, ey + rng.random_range(18..24) as f32],
        [ex + iod - rng.random_range(2..6) as f32, ey + rng.random_range(18..24) as f32],
    ]
}

/// A 64×64 map with one pixel per landmark (labels `0..5`) and every other
/// pixel uncovered.
pub fn one_pixel_map(marks: &Landmarks) -> SegmentationMap {
    let mut labels = vec![6u8; 64 * 64];
    for (k, p) in marks.iter().enumerate() {
        labels[p[1] as usize * 64 + p[0] as usize] = k as u8;
    }
    SegmentationMap::new(64, 6, labels).unwrap()
}

pub fn one_pixel_set(n: usize, rng: &mut impl Rng) -> (Vec<SegmentationMap>, Vec<Landmarks>) {
    (0..n)
        .map(|_| {
            let m = face_landmarks(rng);
            (one_pixel_map(&m), m)
        })
        .unzip()
}

/// A map whose segments are 2×2 blocks with top-left corner at each
/// landmark, so every centroid sits at the landmark plus half a pixel. The
/// last capsule covers everything else.
pub fn block_map(marks: &Landmarks, num_capsules: usize) -> SegmentationMap {
    let bg = (num_capsules - 1) as u8;
    let mut labels = vec![bg; 64 * 64];
    for (k, p) in marks.iter().enumerate() {
        let (x, y) = (p[0] as usize, p[1] as usize);
        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            labels[(y + dy) * 64 + x + dx] = k as u8;
        }
    }
    SegmentationMap::new(64, num_capsules, labels).unwrap()
}

/// Blocks of random size scattered around each landmark.
pub fn noisy_map(marks: &Landmarks, rng: &mut impl Rng) -> SegmentationMap {
    let mut labels = vec![5u8; 64 * 64];
    for (k, p) in marks.iter().enumerate() {
        let (w, h) = (rng.random_range(1..4), rng.random_range(1..4));
        let x = (p[0] as i32 + rng.random_range(-2..3)).clamp(0, 60) as usize;
        let y = (p[1] as i32 + rng.random_range(-2..3)).clamp(0, 60) as usize;
        for r in y..y + h {
            for c in x..x + w {
                labels[r * 64 + c] = k as u8;
            }
        }
    }
    SegmentationMap::new(64, 6, labels).unwrap()
}

pub type Centroids = Vec<Option<[f32; 2]>>;

/// Centroids of the foreground capsules; the last capsule is background.
pub fn part_centroids(seg: &SegmentationMap) -> Centroids {
    let mut c = centroids(&seg.for_evaluation());
    c.truncate(seg.num_capsules - 1);
    c
}
