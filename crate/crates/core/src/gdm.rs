//! Graphics decomposition: global embeddings to part-level embeddings.
//!
//! Each capsule owns a basis `W^m` (`[F, D]`); projecting the global
//! embedding through every basis gives M candidate part embeddings. When
//! one-hot attention is enabled, every embedding dimension is then handed to
//! exactly one capsule: the one with the largest share of the absolute
//! projections at that dimension. The winner keeps its value scaled by that
//! share, all other capsules get zero. The albedo path reuses the attention
//! computed from the shape path, so shape and albedo are split identically.

use igc_tensor::{gaussian, Graph, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// Column sums below this are treated as all-zero columns.
pub const DEGENERATE_SUM: f32 = 1e-8;

/// Shape and albedo bases, each `[M, F, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisBank {
    pub shape: Tensor,
    pub albedo: Tensor,
}

impl BasisBank {
    /// Zero-mean Gaussian entries with standard deviation `1 / sqrt(F)`.
    pub fn random(m: usize, f: usize, d: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (f as f32).sqrt();
        Self {
            shape: gaussian(&[m, f, d], std, rng),
            albedo: gaussian(&[m, f, d], std, rng),
        }
    }
}

/// Attention matrix `[M, D]` of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    pub values: Tensor,
}

impl AttentionMatrix {
    pub fn num_capsules(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dims(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, m: usize, d: usize) -> f32 {
        self.values.data()[m * self.dims() + d]
    }

    /// Capsule owning dimension `d`, or `None` for a degenerate column.
    pub fn owner(&self, d: usize) -> Option<usize> {
        (0..self.num_capsules()).find(|&m| self.get(m, d) != 0.0)
    }
}

/// Normalize non-negative scores and keep only the largest share.
///
/// Ties go to the lowest index. A column whose scores sum below
/// [`DEGENERATE_SUM`] is assigned to index 0 with weight 0, i.e. the output is
/// all zeros.
pub fn hard_softmax(scores: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; scores.len()];
    let total: f32 = scores.iter().sum();
    if scores.is_empty() || total < DEGENERATE_SUM {
        return out;
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    out[best] = scores[best] / total;
    out
}

/// Winner mask `[B, M, D]` and degenerate-column indicator `[B, 1, D]` from
/// pre-attention embeddings `[B, M, D]`, using absolute values as scores.
fn winner_mask(e: &Tensor) -> (Tensor, Tensor) {
    let s = e.shape();
    let (b, m, d) = (s[0], s[1], s[2]);
    let mut mask = vec![0.0f32; b * m * d];
    let mut degenerate = vec![0.0f32; b * d];
    let data = e.data();
    let mut column = vec![0.0f32; m];
    for bi in 0..b {
        for di in 0..d {
            for (mi, c) in column.iter_mut().enumerate() {
                *c = data[(bi * m + mi) * d + di].abs();
            }
            let attn = hard_softmax(&column);
            match attn.iter().position(|&a| a != 0.0) {
                Some(mi) => mask[(bi * m + mi) * d + di] = 1.0,
                None => degenerate[bi * d + di] = 1.0,
            }
        }
    }
    (
        Tensor::new(&[b, m, d], mask),
        Tensor::new(&[b, 1, d], degenerate),
    )
}

/// `e^m = f W^m` for every capsule: `f [B, F]`, `basis [M, F, D]` to `[B, M, D]`.
pub fn project(g: &mut Graph, f: Var, basis: Var) -> Result<Var> {
    let fs = g.shape(f).to_vec();
    let bs = g.shape(basis).to_vec();
    if fs.len() != 2 || bs.len() != 3 || fs[1] != bs[1] {
        return Err(Error::Shape(format!(
            "cannot project embeddings {fs:?} through basis {bs:?}"
        )));
    }
    let (b, m, f_dim, d) = (fs[0], bs[0], bs[1], bs[2]);
    let w = g.permute(basis, &[1, 0, 2]);
    let w = g.reshape(w, &[f_dim, m * d]);
    let e = g.matmul(f, w);
    Ok(g.reshape(e, &[b, m, d]))
}

/// Part-level embeddings on the graph.
pub struct Decomposition {
    /// `[B, M, D]` masked shape embeddings.
    pub shape: Var,
    /// `[B, M, D]` masked albedo embeddings.
    pub albedo: Var,
    /// `[B, M, D]` pre-attention shape embeddings.
    pub shape_raw: Var,
    /// Attention per sample; `None` when one-hot attention is disabled.
    pub attention: Option<Vec<AttentionMatrix>>,
}

/// Split global embeddings into part embeddings.
///
/// The winner mask is a constant of the graph; gradients flow through the
/// retained normalized value `|e| / sum|e|` and the signed embedding.
pub fn decompose(
    g: &mut Graph,
    f_shape: Var,
    f_albedo: Var,
    basis_shape: Var,
    basis_albedo: Var,
    one_hot: bool,
) -> Result<Decomposition> {
    let e_s = project(g, f_shape, basis_shape)?;
    let e_a = project(g, f_albedo, basis_albedo)?;
    if g.shape(e_s) != g.shape(e_a) {
        return Err(Error::Shape(format!(
            "shape path {:?} and albedo path {:?} disagree",
            g.shape(e_s),
            g.shape(e_a)
        )));
    }
    if !one_hot {
        return Ok(Decomposition {
            shape: e_s,
            albedo: e_a,
            shape_raw: e_s,
            attention: None,
        });
    }
    let (mask, degenerate) = winner_mask(g.value(e_s));
    let abs = g.abs(e_s);
    let total = g.sum_axis(abs, 1);
    let guard = g.constant(degenerate);
    let total = g.add(total, guard);
    let share = g.div(abs, total);
    let mask = g.constant(mask);
    let attn = g.mul(share, mask);
    let shape = g.mul(e_s, attn);
    let albedo = g.mul(e_a, attn);
    let attention = split_batch(g.value(attn));
    Ok(Decomposition {
        shape,
        albedo,
        shape_raw: e_s,
        attention: Some(attention),
    })
}

fn split_batch(attn: &Tensor) -> Vec<AttentionMatrix> {
    (0..attn.shape()[0])
        .map(|b| AttentionMatrix {
            values: attn.index0(b),
        })
        .collect()
}

/// Evaluate [`decompose`] on plain tensors: `(shape, albedo, attention)`.
pub fn decompose_values(
    f_shape: &Tensor,
    f_albedo: &Tensor,
    basis: &BasisBank,
    one_hot: bool,
) -> Result<(Tensor, Tensor, Option<Vec<AttentionMatrix>>)> {
    let mut g = Graph::new();
    let fs = g.constant(f_shape.clone());
    let fa = g.constant(f_albedo.clone());
    let ws = g.constant(basis.shape.clone());
    let wa = g.constant(basis.albedo.clone());
    let d = decompose(&mut g, fs, fa, ws, wa, one_hot)?;
    Ok((g.value(d.shape).clone(), g.value(d.albedo).clone(), d.attention))
}

#[cfg(test)]
mod tests {
    use super::*;
    use igc_tensor::gradcheck::{numeric_gradient, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f32], b: &[f32]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6)
    }

    #[test]
    fn hard_softmax_examples() {
        assert!(close(&hard_softmax(&[2.0, 1.0, 1.0]), &[0.5, 0.0, 0.0]));
        assert!(close(&hard_softmax(&[1.0, 0.0, 0.0]), &[1.0, 0.0, 0.0]));
        assert!(close(&hard_softmax(&[1.0, 1.0]), &[0.5, 0.0]));
        assert!(close(&hard_softmax(&[0.0, 0.0, 0.0]), &[0.0, 0.0, 0.0]));
    }

    #[test]
    fn identity_basis_copies_embedding() {
        let (m, f) = (3, 4);
        let mut eye = vec![0.0f32; m * f * f];
        for k in 0..m {
            for i in 0..f {
                eye[(k * f + i) * f + i] = 1.0;
            }
        }
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(&[1, f], vec![1.0, -2.0, 3.0, 0.5]));
        let basis = g.constant(Tensor::new(&[m, f, f], eye));
        let e = project(&mut g, v, basis).unwrap();
        for k in 0..m {
            assert_eq!(&g.value(e).data()[k * f..(k + 1) * f], &[1.0, -2.0, 3.0, 0.5]);
        }
    }

    #[test]
    fn zero_embedding_projects_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = BasisBank::random(3, 8, 5, &mut rng);
        let zero = Tensor::zeros(&[2, 8]);
        let (s, a, attn) = decompose_values(&zero, &zero, &bank, true).unwrap();
        assert!(s.data().iter().all(|&x| x == 0.0));
        assert!(a.data().iter().all(|&x| x == 0.0));
        assert!(attn.unwrap()[0].values.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_by_two_attention_example() {
        // Identity bases make e^m = f restricted to row m of the scores.
        // f_s chosen so that e^0 = [3, 1] and e^1 = [1, 3].
        let basis = Tensor::new(
            &[2, 2, 2],
            vec![3.0, 1.0, 0.0, 0.0, 1.0, 3.0, 0.0, 0.0],
        );
        let bank = BasisBank {
            shape: basis.clone(),
            albedo: basis,
        };
        let f = Tensor::new(&[1, 2], vec![1.0, 0.0]);
        let (_, _, attn) = decompose_values(&f, &f, &bank, true).unwrap();
        let attn = &attn.unwrap()[0];
        assert!(close(attn.values.data(), &[0.75, 0.0, 0.0, 0.75]));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[1, 3]));
        let w = g.constant(Tensor::zeros(&[2, 4, 5]));
        assert!(matches!(project(&mut g, f, w), Err(Error::Shape(_))));
    }

    #[test]
    fn disabled_one_hot_passes_embeddings_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = BasisBank::random(3, 6, 4, &mut rng);
        let f = gaussian(&[2, 6], 1.0, &mut rng);
        let (s, _, attn) = decompose_values(&f, &f, &bank, false).unwrap();
        assert!(attn.is_none());
        assert!(s.data().iter().filter(|&&x| x != 0.0).count() > 2 * 3 * 4 - 2);
    }

    /// Loss = sum of squares of the masked embeddings weighted by a fixed
    /// projection; autodiff against central differences on a 4-dim toy.
    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bank = BasisBank::random(3, 4, 4, &mut rng);
        let f0 = gaussian(&[1, 4], 1.0, &mut rng);
        let weights = gaussian(&[1, 3, 4], 1.0, &mut rng);
        let eval = |f: &Tensor| {
            let mut g = Graph::new();
            let fv = g.leaf(f.clone());
            let fa = g.constant(f0.clone());
            let ws = g.constant(bank.shape.clone());
            let wa = g.constant(bank.albedo.clone());
            let d = decompose(&mut g, fv, fa, ws, wa, true).unwrap();
            let w = g.constant(weights.clone());
            let p = g.mul(d.shape, w);
            let loss = g.sum(p);
            let grads = g.backward(loss);
            (g.value(loss).item(), grads.get(fv).cloned().unwrap(), d.attention.unwrap())
        };
        let (_, analytic, attn) = eval(&f0);
        let numeric = numeric_gradient(&f0, 1e-3, |f| {
            let (l, _, a) = eval(f);
            // The winner pattern must not change inside the probe interval.
            assert_eq!(
                a[0].values.data().iter().map(|&x| x != 0.0).collect::<Vec<_>>(),
                attn[0].values.data().iter().map(|&x| x != 0.0).collect::<Vec<_>>()
            );
            l as f64
        });
        let err = relative_error(&analytic, &numeric, 1e-3);
        assert!(err < 1e-2, "relative error {err}");
    }

    #[test]
    fn masked_entries_carry_no_embedding_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bank = BasisBank::random(3, 4, 6, &mut rng);
        let f = gaussian(&[1, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let ws = g.leaf(bank.shape.clone());
        let wa = g.leaf(bank.albedo.clone());
        let d = decompose(&mut g, fv, fv, ws, wa, true).unwrap();
        let loss = g.sum(d.albedo);
        let grads = g.backward(loss);
        // Albedo basis columns of capsules that lost dimension d get no gradient.
        let attn = &d.attention.unwrap()[0];
        let gw = grads.get(wa).unwrap();
        for m in 0..3 {
            for dim in 0..6 {
                let col_grad: f32 = (0..4).map(|i| gw.data()[(m * 4 + i) * 6 + dim].abs()).sum();
                if attn.get(m, dim) == 0.0 {
                    assert_eq!(col_grad, 0.0);
                }
            }
        }
    }
}
