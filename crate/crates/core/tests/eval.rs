mod common;

use common::{block_map, face_landmarks, noisy_map, one_pixel_set, part_centroids, Centroids};
use igc_core::data::Landmarks;
use igc_core::eval::{
    centroids, composite_size, export_hierarchy_image, fit_linear_map, nme_dl, nme_l, read_indexed_labels, DlOptions,
};
use igc_core::train::TrainState;
use igc_core::types::SegmentationMap;
use igc_core::Config;
use igc_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn centroids_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let (n, m) = (rng.random_range(1..20), rng.random_range(1..8));
        let labels: Vec<u8> = (0..n * n).map(|_| rng.random_range(0..=m) as u8).collect();
        let got = centroids(&SegmentationMap::new(n, m, labels.clone()).unwrap());
        assert_eq!(got.len(), m);
        for (j, c) in got.iter().enumerate() {
            let (mut sx, mut sy, mut cnt) = (0.0f64, 0.0f64, 0usize);
            for r in 0..n {
                for col in 0..n {
                    if labels[r * n + col] as usize == j {
                        sx += col as f64;
                        sy += r as f64;
                        cnt += 1;
                    }
                }
            }
            match c {
                None => assert_eq!(cnt, 0),
                Some([x, y]) => {
                    assert!((*x as f64 - sx / cnt as f64).abs() < 1e-4);
                    assert!((*y as f64 - sy / cnt as f64).abs() < 1e-4);
                }
            }
        }
    }
}

#[test]
fn affine_segments_give_zero_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let marks: Vec<Landmarks> = (0..60).map(|_| face_landmarks(&mut rng)).collect();
    let cents: Vec<Centroids> = marks.iter().map(|l| part_centroids(&block_map(l, 6))).collect();
    assert!(cents.iter().all(|c| c.iter().all(Option::is_some)));
    let (train, test) = cents.split_at(40);
    let map = fit_linear_map(train, &marks[..40]).unwrap();
    let nme = nme_l(test, &marks[40..], &map).unwrap();
    assert!(nme < 1e-6, "NME_L {nme}");
}

fn evaluate(maps: &[SegmentationMap], marks: &[Landmarks]) -> f64 {
    let cents: Vec<Centroids> = maps.iter().map(part_centroids).collect();
    let map = fit_linear_map(&cents[..80], &marks[..80]).unwrap();
    nme_l(&cents[80..], &marks[80..], &map).unwrap()
}

#[test]
fn capsule_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let marks: Vec<Landmarks> = (0..120).map(|_| face_landmarks(&mut rng)).collect();
    let maps: Vec<SegmentationMap> = marks.iter().map(|l| noisy_map(l, &mut rng)).collect();
    let base = evaluate(&maps, &marks);
    assert!(base > 0.1);
    let perm = [3u8, 0, 4, 1, 2];
    let shuffled: Vec<SegmentationMap> = maps
        .iter()
        .map(|s| {
            let labels = s.labels.iter().map(|&l| if l < 5 { perm[l as usize] } else { l }).collect();
            SegmentationMap::new(64, 6, labels).unwrap()
        })
        .collect();
    let permuted = evaluate(&shuffled, &marks);
    assert!((base - permuted).abs() < 1e-6, "{base} vs {permuted}");
}

#[test]
fn error_is_scale_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let marks: Vec<Landmarks> = (0..100).map(|_| face_landmarks(&mut rng)).collect();
    let cents: Vec<Centroids> = marks
        .iter()
        .map(|l| {
            l.iter()
                .map(|p| Some([p[0] + rng.random_range(-1.5..1.5), p[1] + rng.random_range(-1.5..1.5)]))
                .collect()
        })
        .collect();
    let scale = |v: &[f32; 2]| [v[0] * 2.0, v[1] * 2.0];
    let run = |c: &[Centroids], l: &[Landmarks]| {
        let map = fit_linear_map(&c[..70], &l[..70]).unwrap();
        nme_l(&c[70..], &l[70..], &map).unwrap()
    };
    let a = run(&cents, &marks);
    let big_c: Vec<Centroids> = cents.iter().map(|c| c.iter().map(|p| p.as_ref().map(scale)).collect()).collect();
    let big_l: Vec<Landmarks> = marks.iter().map(|l| l.iter().map(scale).collect()).collect();
    let b = run(&big_c, &big_l);
    assert!((a - b).abs() < 1e-6 * a.max(1.0), "{a} vs {b}");
}

#[test]
fn missing_test_segments_are_imputed() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let marks: Vec<Landmarks> = (0..40).map(|_| face_landmarks(&mut rng)).collect();
    let mut cents: Vec<Centroids> = marks.iter().map(|l| part_centroids(&block_map(l, 6))).collect();
    cents[3][2] = None;
    let map = fit_linear_map(&cents, &marks).unwrap();
    assert_eq!(map.excluded, 1);
    let (pred, imputed) = map.predict(&cents[3]).unwrap();
    assert_eq!(imputed, 1);
    assert!(pred.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn one_pixel_maps_are_easy_for_the_predictor() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (train_maps, train_marks) = one_pixel_set(400, &mut rng);
    let (test_maps, test_marks) = one_pixel_set(100, &mut rng);
    let opts = DlOptions::from_config(&Config::default());
    let nme = nme_dl(&train_maps, &train_marks, &test_maps, &test_marks, &opts).unwrap();
    assert!(nme < 2.0, "NME_DL {nme}");
}

#[test]
fn predictor_training_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (maps, marks) = one_pixel_set(120, &mut rng);
    let opts = DlOptions {
        steps: 20,
        ..DlOptions::from_config(&Config::default())
    };
    let a = nme_dl(&maps[..100], &marks[..100], &maps[100..], &marks[100..], &opts).unwrap();
    let b = nme_dl(&maps[..100], &marks[..100], &maps[100..], &marks[100..], &opts).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn hierarchy_export_writes_every_figure() {
    let cfg = Config {
        image_size: 32,
        embed_dim: 16,
        part_dim: 16,
        encoder_channels: vec![4, 8, 8, 8, 16],
        decoder_channels: vec![8, 8, 4, 4, 4],
        perceptual_channels: vec![4],
        ..Config::default()
    };
    let params = TrainState::new(&cfg).params;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let image = Tensor::new(&[3, 32, 32], (0..3 * 32 * 32).map(|_| rng.random_range(0.0..1.0)).collect());
    let dir = tempfile::tempdir().unwrap();
    let files = export_hierarchy_image(&params, &cfg, &image, dir.path()).unwrap();
    let m = cfg.num_capsules;
    assert_eq!(files.len(), 3 * m + 6);
    assert!(files.iter().all(|f| f.is_file()));
    let labels = read_indexed_labels(&dir.path().join("labels.png")).unwrap();
    assert_eq!(labels.dimensions(), (32, 32));
    assert!(labels.as_raw().iter().all(|&l| l as usize <= m));
    let grid = image::open(dir.path().join("hierarchy.png")).unwrap();
    assert_eq!((grid.width(), grid.height()), composite_size(m, 32));
    let depth = image::open(dir.path().join("capsule0_depth.png")).unwrap();
    assert_eq!((depth.width(), depth.height()), (32, 32));
}
