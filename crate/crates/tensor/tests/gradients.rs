use igc_tensor::gradcheck::{numeric_gradient, relative_error};
use igc_tensor::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Compare autodiff and finite differences of `build(x)` summed against a
/// fixed random projection.
fn check(x: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = build(&mut g, v);
        g.shape(y).to_vec()
    };
    let proj = random(&probe_shape, &mut rng);
    let eval = |t: &Tensor| -> (f32, Option<Tensor>) {
        let mut g = Graph::new();
        let v = g.leaf(t.clone());
        let y = build(&mut g, v);
        let p = g.constant(proj.clone());
        let prod = g.mul(y, p);
        let s = g.sum(prod);
        let grads = g.backward(s);
        (g.value(s).item(), grads.get(v).cloned())
    };
    let analytic = eval(&x).1.expect("input should receive a gradient");
    let numeric = numeric_gradient(&x, 1e-2, |t| eval(t).0 as f64);
    let err = relative_error(&analytic, &numeric, 1e-3);
    assert!(err < 1e-2, "relative error {err}: {analytic:?} vs {numeric:?}");
}

#[test]
fn elementwise_unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[3, 4], &mut rng);
    check(x.clone(), |g, v| g.tanh(v));
    check(x.clone(), |g, v| g.sigmoid(v));
    check(x.clone(), |g, v| g.softplus(v));
    check(x.clone(), |g, v| g.leaky_relu(v, 0.2));
    check(x.clone(), |g, v| g.square(v));
    check(x.clone(), |g, v| g.exp(v));
    let pos = x.map(|v| v.abs() + 0.5);
    check(pos.clone(), |g, v| g.ln(v));
    check(pos, |g, v| g.sqrt(v));
}

#[test]
fn binary_ops_with_broadcasting() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 3, 4], &mut rng);
    let other = random(&[3, 1], &mut rng).map(|v| v.abs() + 0.5);
    let o = other.clone();
    check(x.clone(), move |g, v| {
        let c = g.constant(o.clone());
        g.div(v, c)
    });
    check(other, |g, v| {
        let c = g.constant(random(&[2, 3, 4], &mut ChaCha8Rng::seed_from_u64(5)));
        g.div(c, v)
    });
    check(x.clone(), |g, v| {
        let s = g.narrow(v, 2, 0, 1);
        g.mul(v, s)
    });
}

#[test]
fn reductions_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 4], &mut rng);
    check(x.clone(), |g, v| g.sum_axis(v, 1));
    check(x.clone(), |g, v| g.mean_axis(v, 2));
    check(x.clone(), |g, v| g.softmax(v, 1));
    check(x.clone(), |g, v| g.mean(v));
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 3, 4], &mut rng);
    check(x.clone(), |g, v| g.permute(v, &[2, 0, 1]));
    check(x.clone(), |g, v| g.flip(v, 2));
    check(x.clone(), |g, v| {
        let a = g.narrow(v, 1, 0, 2);
        let b = g.narrow(v, 1, 2, 1);
        g.concat(&[b, a], 1)
    });
    check(x, |g, v| g.reshape(v, &[6, 4]));
}

#[test]
fn matmul_conv_upsample() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[3, 5], &mut rng);
    let w = random(&[5, 2], &mut rng);
    check(x, move |g, v| {
        let c = g.constant(w.clone());
        g.matmul(v, c)
    });
    let img = random(&[2, 3, 6, 6], &mut rng);
    let k = random(&[4, 3, 3, 3], &mut rng);
    let b = random(&[4], &mut rng);
    let (k2, b2) = (k.clone(), b.clone());
    check(img.clone(), move |g, v| {
        let kv = g.constant(k2.clone());
        let bv = g.constant(b2.clone());
        g.conv2d(v, kv, bv, 2, 1)
    });
    let img2 = img.clone();
    check(k, move |g, v| {
        let xv = g.constant(img2.clone());
        let bv = g.constant(b.clone());
        g.conv2d(xv, v, bv, 1, 1)
    });
    check(img, |g, v| g.upsample2x(v));
}

proptest! {
    #[test]
    fn permute_roundtrip(a in 1usize..4, b in 1usize..4, c in 1usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[a, b, c], &mut rng);
        let y = igc_tensor::permute_tensor(&igc_tensor::permute_tensor(&x, &[1, 2, 0]), &[2, 0, 1]);
        prop_assert_eq!(x, y);
    }

    #[test]
    fn identical_graphs_are_bit_identical(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let run = || {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let kv = g.leaf(k.clone());
            let bv = g.constant(Tensor::zeros(&[3]));
            let y = g.conv2d(xv, kv, bv, 1, 1);
            let y = g.tanh(y);
            let s = g.sum(y);
            let grads = g.backward(s);
            (g.value(s).item(), grads.get(kv).cloned())
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
        prop_assert_eq!(a.1, b.1);
    }
}
