mod common;

use common::scene::gradient_error;
use igc_core::render::{assemble, assemble_graph, front_labels, render, Camera};
use igc_core::types::{GraphicsCapsule, Lighting, Pose};
use igc_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn flat_object(n: usize, albedo: Tensor) -> igc_core::types::ObjectCapsule {
    let part = GraphicsCapsule {
        depth: Tensor::full(&[n, n], 1.0),
        albedo,
        pose: Pose::default(),
    };
    assemble(&[part], 0.01).unwrap()
}

fn random_albedo(n: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::new(&[3, n, n], (0..3 * n * n).map(|_| rng.random::<f32>()).collect())
}

#[test]
fn ambient_only_render_reproduces_albedo() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 64;
    let albedo = random_albedo(n, &mut rng);
    let obj = flat_object(n, albedo.clone());
    let out = render(&obj, &Lighting::ambient_only(1.0), &Camera::new(n, 10.0)).unwrap();
    let mae = out.image.zip_map(&albedo.reshape(&[1, 3, n, n]), |a, b| (a - b).abs()).mean();
    assert!(mae < 1e-3, "mean abs error {mae}");
    assert!(out.mask.data().iter().all(|&m| m == 1.0));
}

#[test]
fn flip_of_symmetric_scene_matches_direct() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 32;
    let mut a = random_albedo(n, &mut rng);
    // Mirror the left half onto the right.
    for c in 0..3 {
        for r in 0..n {
            for col in n / 2..n {
                let src = a.data()[(c * n + r) * n + (n - 1 - col)];
                a.data_mut()[(c * n + r) * n + col] = src;
            }
        }
    }
    let obj = flat_object(n, a);
    let light = Lighting {
        ambient: 0.4,
        diffuse: 0.5,
        direction: [0.0, 0.3],
    };
    let out = render(&obj, &light, &Camera::new(n, 10.0)).unwrap();
    let diff = out.image.zip_map(&out.image_flip, |a, b| (a - b).abs()).mean();
    assert!(diff < 1e-3, "flip mismatch {diff}");
}

#[test]
fn energy_bounded_by_ambient_albedo() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 16;
    let parts: Vec<GraphicsCapsule> = (0..3)
        .map(|_| GraphicsCapsule {
            depth: Tensor::new(&[n, n], (0..n * n).map(|_| rng.random_range(0.95..1.05)).collect()),
            albedo: random_albedo(n, &mut rng),
            pose: Pose([0.2, -0.1, 0.05, 0.01, 0.0, 0.02]),
        })
        .collect();
    let obj = assemble(&parts, 0.01).unwrap();
    let out = render(&obj, &Lighting::ambient_only(0.6), &Camera::new(n, 10.0)).unwrap();
    let max_a = obj.albedo.data().iter().cloned().fold(0.0f32, f32::max);
    for &v in out.image.data() {
        assert!(v <= 0.6 * max_a + 1e-3);
    }
}

#[test]
fn assembly_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (m, n) = (6, 16);
    for _ in 0..20 {
        let parts: Vec<GraphicsCapsule> = (0..m)
            .map(|_| GraphicsCapsule {
                depth: Tensor::new(&[n, n], (0..n * n).map(|_| rng.random_range(0.9..1.1)).collect()),
                albedo: random_albedo(n, &mut rng),
                pose: Pose::default(),
            })
            .collect();
        let obj = assemble(&parts, 0.01).unwrap();
        for p in 0..n * n {
            let mut best = 0;
            for k in 0..m {
                if parts[k].depth.data()[p] < parts[best].depth.data()[p] {
                    best = k;
                }
            }
            assert_eq!(obj.depth.data()[p], parts[best].depth.data()[p]);
            for k in 0..m {
                assert_eq!(obj.visibility.data()[k * n * n + p], (k == best) as u8 as f32);
            }
            for c in 0..3 {
                assert_eq!(obj.albedo.data()[c * n * n + p], parts[best].albedo.data()[c * n * n + p]);
            }
            let soft: f32 = (0..m).map(|k| obj.soft_visibility.data()[k * n * n + p]).sum();
            assert!((soft - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn equal_depths_go_to_capsule_zero() {
    let n = 4;
    let parts: Vec<GraphicsCapsule> = (0..3)
        .map(|_| GraphicsCapsule {
            depth: Tensor::full(&[n, n], 1.0),
            albedo: Tensor::full(&[3, n, n], 0.5),
            pose: Pose::default(),
        })
        .collect();
    let obj = assemble(&parts, 0.01).unwrap();
    assert!(obj.labels.iter().all(|&l| l == 0));
    assert!(obj.visibility.data()[..n * n].iter().all(|&v| v == 1.0));
}

#[test]
fn left_right_split_labels_survive_identity_pose() {
    let n = 16;
    let left = Tensor::new(&[n, n], (0..n * n).map(|i| if i % n < n / 2 { 0.95 } else { 1.05 }).collect());
    let right = Tensor::new(&[n, n], (0..n * n).map(|i| if i % n < n / 2 { 1.05 } else { 0.95 }).collect());
    let parts: Vec<GraphicsCapsule> = [left, right, Tensor::full(&[n, n], 1.09)]
        .into_iter()
        .map(|depth| GraphicsCapsule {
            depth,
            albedo: Tensor::full(&[3, n, n], 0.5),
            pose: Pose::default(),
        })
        .collect();
    let obj = assemble(&parts, 0.01).unwrap();
    let out = render(&obj, &Lighting::ambient_only(1.0), &Camera::new(n, 10.0)).unwrap();
    // The depth step between halves tilts the boundary normals but the
    // labels are carried by vertices and stay on the canonical partition.
    assert_eq!(out.label_map, obj.labels);

    let mut turned = obj.clone();
    turned.pose = Pose([30f32.to_radians(), 0.0, 0.0, 0.0, 0.0, 0.0]);
    let out = render(&turned, &Lighting::ambient_only(1.0), &Camera::new(n, 10.0)).unwrap();
    assert!(out.label_map.iter().all(|&l| l <= 3));
    assert_eq!(out.label_map(0).background(), 3);
}

#[test]
fn render_gradient_depth() {
    let e = gradient_error(0);
    assert!(e <= 1e-2, "depth gradient relative error {e}");
}

#[test]
fn render_gradient_albedo() {
    let e = gradient_error(1);
    assert!(e <= 1e-2, "albedo gradient relative error {e}");
}

#[test]
fn render_gradient_pose() {
    let e = gradient_error(2);
    assert!(e <= 1e-2, "pose gradient relative error {e}");
}

#[test]
fn render_gradient_lighting() {
    let e = gradient_error(3);
    assert!(e <= 1e-2, "lighting gradient relative error {e}");
}

#[test]
fn graph_assembly_routes_gradients_to_winners() {
    let (m, n) = (3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let depth = Tensor::new(&[1, m, n, n], (0..m * n * n).map(|_| rng.random_range(0.9..1.1)).collect());
    let labels = front_labels(depth.data(), m, n * n);
    let mut g = Graph::new();
    let d = g.leaf(depth);
    let a = g.leaf(Tensor::full(&[1, m, 3, n, n], 0.5));
    let p = g.leaf(Tensor::zeros(&[1, m, 6]));
    let asm = assemble_graph(&mut g, d, a, p, 0.01).unwrap();
    let s = g.sum(asm.depth);
    let grads = g.backward(s);
    let gd = grads.get(d).unwrap();
    for k in 0..m {
        for px in 0..n * n {
            let expect = (labels[px] as usize == k) as u8 as f32;
            assert_eq!(gd.data()[k * n * n + px], expect);
        }
    }
}

