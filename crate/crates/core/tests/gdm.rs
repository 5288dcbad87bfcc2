use igc_core::gdm::{decompose_values, hard_softmax, project, BasisBank};
use igc_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    igc_tensor::gaussian(shape, 1.0, rng)
}

#[test]
fn projection_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (b, m, f, d) = (3, 4, 7, 5);
    let fs = randn(&[b, f], &mut rng);
    let basis = randn(&[m, f, d], &mut rng);
    let mut g = Graph::new();
    let fv = g.constant(fs.clone());
    let wv = g.constant(basis.clone());
    let e = project(&mut g, fv, wv).unwrap();
    let got = g.value(e).data();
    for bi in 0..b {
        for mi in 0..m {
            for di in 0..d {
                let mut acc = 0.0f64;
                for fi in 0..f {
                    acc += fs.data()[bi * f + fi] as f64 * basis.data()[(mi * f + fi) * d + di] as f64;
                }
                let v = got[(bi * m + mi) * d + di] as f64;
                assert!((v - acc).abs() < 1e-5, "{v} vs {acc}");
            }
        }
    }
}

/// Hand evaluation of the normalized argmax share, in f64.
fn share_oracle(s: &[f32]) -> Vec<f64> {
    let total: f64 = s.iter().map(|&v| v as f64).sum();
    let mut out = vec![0.0; s.len()];
    if total < 1e-8 {
        return out;
    }
    let max = s.iter().cloned().fold(f32::MIN, f32::max);
    let first = s.iter().position(|&v| v == max).unwrap();
    out[first] = s[first] as f64 / total;
    out
}

#[test]
fn hard_softmax_matches_oracle_with_ties_and_zeros() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..2000 {
        let len = rng.random_range(1..9);
        let s: Vec<f32> = match i % 4 {
            0 => vec![0.0; len],
            1 => vec![rng.random_range(0.0..2.0f32); len],
            2 => (0..len).map(|_| rng.random_range(0..3) as f32).collect(),
            _ => (0..len).map(|_| rng.random_range(0.0..5.0)).collect(),
        };
        let got = hard_softmax(&s);
        for (a, b) in got.iter().zip(share_oracle(&s)) {
            assert!((*a as f64 - b).abs() < 1e-6, "{s:?}: {got:?}");
        }
    }
}

#[test]
fn two_capsule_column_example() {
    // Columns [3, 1] and [1, 3] of the score matrix.
    assert_eq!(hard_softmax(&[3.0, 1.0]), vec![0.75, 0.0]);
    assert_eq!(hard_softmax(&[1.0, 3.0]), vec![0.0, 0.75]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_and_attention_copy(seed in any::<u64>(), m in 2usize..7, d in 1usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = 8;
        let basis = BasisBank::random(m, f, d, &mut rng);
        let fs = randn(&[2, f], &mut rng);
        let fa = randn(&[2, f], &mut rng);
        let (es, ea, attn) = decompose_values(&fs, &fa, &basis, true).unwrap();
        let attn = attn.unwrap();
        for b in 0..2 {
            for di in 0..d {
                let nonzero = (0..m).filter(|&mi| attn[b].get(mi, di) != 0.0).count();
                prop_assert_eq!(nonzero, 1);
                let col: f32 = (0..m).map(|mi| attn[b].get(mi, di)).sum();
                prop_assert!(col > 0.0 && col <= 1.0 + 1e-6);
                for mi in 0..m {
                    let i = (b * m + mi) * d + di;
                    let owned = attn[b].get(mi, di) != 0.0;
                    if !owned {
                        prop_assert_eq!(es.data()[i], 0.0);
                        prop_assert_eq!(ea.data()[i], 0.0);
                    }
                    for mj in (mi + 1)..m {
                        let j = (b * m + mj) * d + di;
                        prop_assert_eq!(es.data()[i] * es.data()[j], 0.0);
                        prop_assert_eq!(ea.data()[i] * ea.data()[j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn projection_is_linear(seed in any::<u64>(), c in -3.0f32..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = randn(&[3, 4, 5], &mut rng);
        let f = randn(&[1, 4], &mut rng);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(basis.clone());
            let e = project(&mut g, xv, wv).unwrap();
            g.value(e).clone()
        };
        let a = run(&f.map(|v| v * c));
        let b = run(&f).map(|v| v * c);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-4);
        }
    }
}
