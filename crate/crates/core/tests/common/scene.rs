use igc_core::render::{render_graph, Camera};
use igc_tensor::gradcheck::{numeric_gradient, relative_error};
use igc_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fixed 8x8 scene posed away from identity so that pixel centers do not sit
/// on triangle edges.
pub struct Scene {
    pub depth: Tensor,
    pub albedo: Tensor,
    pub pose: Tensor,
    pub light: Tensor,
    pub weights: Tensor,
}

pub fn scene() -> Scene {
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let depth = Tensor::new(
        &[1, n, n],
        (0..n * n)
            .map(|i| {
                let (r, c) = ((i / n) as f32, (i % n) as f32);
                1.0 + 0.01 * (0.7 * r).sin() * (0.5 * c).cos()
            })
            .collect(),
    );
    // Smooth albedo keeps the piecewise-linear interpolant nearly kink-free.
    let albedo = Tensor::new(
        &[1, 3, n, n],
        (0..3 * n * n)
            .map(|i| {
                let (ch, r, c) = ((i / (n * n)) as f32, ((i / n) % n) as f32, (i % n) as f32);
                0.5 + 0.2 * (0.6 * c + 0.4 * r + ch).sin()
            })
            .collect(),
    );
    // Translation of about a third of a pixel keeps pixel centers inside
    // triangles for the finite-difference steps.
    let pose = Tensor::new(&[1, 6], vec![0.04, -0.03, 0.02, 0.0085, 0.0074, 0.003]);
    let light = Tensor::new(&[1, 4], vec![0.3, 0.5, 0.2, -0.1]);
    // Loss weights only on interior pixels, away from the silhouette.
    let weights = Tensor::new(
        &[1, 3, n, n],
        (0..3 * n * n)
            .map(|i| {
                let (r, c) = ((i / n) % n, i % n);
                if (2..n - 2).contains(&r) && (2..n - 2).contains(&c) {
                    rng.random_range(0.5..1.5)
                } else {
                    0.0
                }
            })
            .collect(),
    );
    Scene {
        depth,
        albedo,
        pose,
        light,
        weights,
    }
}

/// Weighted render energy; returns the value and gradients for
/// (depth, albedo, pose, light).
pub fn render_energy(s: &Scene) -> (f64, [Tensor; 4]) {
    let cam = Camera::new(8, 10.0);
    let mut g = Graph::new();
    let d = g.leaf(s.depth.clone());
    let a = g.leaf(s.albedo.clone());
    let p = g.leaf(s.pose.clone());
    let l = g.leaf(s.light.clone());
    let r = render_graph(&mut g, &cam, d, a, p, l, &[0; 64], false, 1).unwrap();
    let w = g.constant(s.weights.clone());
    let e = g.mul(r.image, w);
    let e = g.sum(e);
    let grads = g.backward(e);
    let get = |v| grads.get(v).cloned().unwrap();
    (g.value(e).item() as f64, [get(d), get(a), get(p), get(l)])
}

/// Relative error of the analytic gradient of input `which` (depth, albedo,
/// pose, light) against central differences with step 1e-3.
pub fn gradient_error(which: usize) -> f32 {
    let s = scene();
    let (_, analytic) = render_energy(&s);
    let base = [&s.depth, &s.albedo, &s.pose, &s.light][which].clone();
    let numeric = numeric_gradient(&base, 1e-3, |x| {
        let mut t = scene();
        *[&mut t.depth, &mut t.albedo, &mut t.pose, &mut t.light][which] = x.clone();
        render_energy(&t).0
    });
    relative_error(&analytic[which], &numeric, 1e-2)
}
