//! Training objectives and their weighted combination.
//!
//! Every loss is built on the autodiff graph and returns a scalar variable.

use std::f32::consts::SQRT_2;

use igc_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};

const NORM_EPS: f32 = 1e-8;

fn check_positive(g: &Graph, sigma: Var) -> Result<()> {
    match g.value(sigma).data().iter().find(|v| !(**v > 0.0)) {
        Some(bad) => Err(Error::InvalidInput(format!(
            "confidence maps must be strictly positive, found {bad}"
        ))),
        None => Ok(()),
    }
}

/// Mean Laplace negative log-likelihood of `x` around `target` with scale
/// `sigma`; `sigma` broadcasts over the channel axis.
fn laplace_nll(g: &mut Graph, x: Var, target: Var, sigma: Var) -> Var {
    let diff = g.sub(x, target);
    let err = g.abs(diff);
    let err = g.scale(err, SQRT_2);
    let ratio = g.div(err, sigma);
    let log_term = g.scale(sigma, SQRT_2);
    let log_term = g.ln(log_term);
    // Broadcast the log term to the full `[B, C, H, W]` extent before averaging.
    let full = g.add(ratio, log_term);
    g.mean(full)
}

/// Split `[B, 2, H, W]` confidence into the direct and flipped channels.
fn sigma_channels(g: &mut Graph, sigma: Var) -> (Var, Var) {
    (g.narrow(sigma, 1, 0, 1), g.narrow(sigma, 1, 1, 1))
}

/// Confidence-weighted reconstruction of `input` by the direct and flipped
/// renders. `sigma` is `[B, 2, H, W]`.
pub fn reconstruction_loss(g: &mut Graph, input: Var, recon: Var, recon_flip: Var, sigma: Var) -> Result<Var> {
    let s = g.shape(input).to_vec();
    if g.shape(recon) != s.as_slice() || g.shape(recon_flip) != s.as_slice() {
        return Err(Error::Shape(format!(
            "reconstructions {:?} / {:?} do not match input {s:?}",
            g.shape(recon),
            g.shape(recon_flip)
        )));
    }
    if g.shape(sigma) != [s[0], 2, s[2], s[3]] {
        return Err(Error::Shape(format!(
            "confidence {:?} does not match images {s:?}",
            g.shape(sigma)
        )));
    }
    check_positive(g, sigma)?;
    let (s0, s1) = sigma_channels(g, sigma);
    let direct = laplace_nll(g, recon, input, s0);
    let flipped = laplace_nll(g, recon_flip, input, s1);
    Ok(g.add(direct, flipped))
}

/// The reconstruction loss applied to features, summed over levels.
///
/// `features` maps an image batch to one feature map per level; `sigmas`
/// holds the matching `[B, 2, H_k, W_k]` confidence maps.
pub fn perceptual_loss(
    g: &mut Graph,
    mut features: impl FnMut(&mut Graph, Var) -> Vec<Var>,
    input: Var,
    recon: Var,
    recon_flip: Var,
    sigmas: &[Var],
) -> Result<Var> {
    let f_in = features(g, input);
    let f_rec = features(g, recon);
    let f_flip = features(g, recon_flip);
    if f_in.len() != sigmas.len() {
        return Err(Error::Shape(format!(
            "{} feature levels but {} confidence maps",
            f_in.len(),
            sigmas.len()
        )));
    }
    let mut total: Option<Var> = None;
    for k in 0..f_in.len() {
        let level = reconstruction_loss(g, f_in[k], f_rec[k], f_flip[k], sigmas[k])?;
        total = Some(match total {
            Some(t) => g.add(t, level),
            None => level,
        });
    }
    total.ok_or_else(|| Error::InvalidInput("no perceptual levels".into()))
}

/// Contrastive consistency of part embeddings `[B, M, D]` across samples.
///
/// Positives for anchor `(b, m)` are capsule `m` of the other samples;
/// negatives are the other capsules of the other samples. Embeddings are
/// L2-normalized first.
pub fn contrastive_loss(g: &mut Graph, e_shape: Var, tau: f32) -> Result<Var> {
    let s = g.shape(e_shape).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape(format!("embeddings must be [B, M, D], got {s:?}")));
    }
    let (b, m, d) = (s[0], s[1], s[2]);
    if b < 2 {
        return Err(Error::InvalidInput(format!(
            "contrastive loss needs at least two samples, got {b}"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")));
    }
    let sq = g.square(e_shape);
    let norm2 = g.sum_axis(sq, 2);
    let norm2 = g.add_scalar(norm2, NORM_EPS);
    let norm = g.sqrt(norm2);
    let unit = g.div(e_shape, norm);
    let flat = g.reshape(unit, &[b * m, d]);
    let flat_t = g.permute(flat, &[1, 0]);
    let sim = g.matmul(flat, flat_t);
    // Similarities are at most 1, so shifting by 1/tau keeps exp in range
    // without changing the ratios.
    let logits = g.scale(sim, 1.0 / tau);
    let logits = g.add_scalar(logits, -1.0 / tau);
    let ex = g.exp(logits);

    let n = b * m;
    let mut pos = vec![0.0f32; n * n];
    let mut all = vec![0.0f32; n * n];
    for r in 0..n {
        for c in 0..n {
            if r / m != c / m {
                all[r * n + c] = 1.0;
                pos[r * n + c] = (r % m == c % m) as u8 as f32;
            }
        }
    }
    let pos = g.constant(Tensor::new(&[n, n], pos));
    let all = g.constant(Tensor::new(&[n, n], all));
    let pos = g.mul(ex, pos);
    let pos = g.sum_axis(pos, 1);
    let all = g.mul(ex, all);
    let all = g.sum_axis(all, 1);
    let log_all = g.ln(all);
    let log_pos = g.ln(pos);
    let terms = g.sub(log_all, log_pos);
    Ok(g.sum(terms))
}

/// Spread of the foreground capsules' soft areas.
///
/// `soft_visibility` is `[B, M, H, W]`; the last capsule models the
/// background and is left out. Returns the batch mean of the population
/// standard deviation over capsules.
pub fn sparsity_loss(g: &mut Graph, soft_visibility: Var) -> Result<Var> {
    let s = g.shape(soft_visibility).to_vec();
    if s.len() != 4 || s[1] < 2 {
        return Err(Error::Shape(format!(
            "soft visibility must be [B, M >= 2, H, W], got {s:?}"
        )));
    }
    let (b, m) = (s[0], s[1]);
    let fg = g.narrow(soft_visibility, 1, 0, m - 1);
    let flat = g.reshape(fg, &[b, m - 1, s[2] * s[3]]);
    let areas = g.mean_axis(flat, 2);
    let areas = g.reshape(areas, &[b, m - 1]);
    Ok(std_over_capsules(g, areas))
}

/// Batch mean of the population std of `areas` `[B, K]` along `K`.
pub fn std_over_capsules(g: &mut Graph, areas: Var) -> Var {
    let mean = g.mean_axis(areas, 1);
    let dev = g.sub(areas, mean);
    let var = g.square(dev);
    let var = g.mean_axis(var, 1);
    let std = g.sqrt(var);
    g.mean(std)
}

/// Background depth target: 1 in the far band (`depth > gamma`) or, with
/// `far_band` off, where `depth < gamma`.
pub fn background_target(depth: &Tensor, gamma: f32, far_band: bool) -> Tensor {
    depth.map(|d| {
        let hit = if far_band { d > gamma } else { d < gamma };
        hit as u8 as f32
    })
}

/// Mean L1 distance between the background capsule's soft visibility
/// `[B, H, W]` and a constant target.
pub fn background_loss(g: &mut Graph, soft_visibility_bg: Var, target: &Tensor) -> Result<Var> {
    if g.shape(soft_visibility_bg) != target.shape() {
        return Err(Error::Shape(format!(
            "background visibility {:?} vs target {:?}",
            g.shape(soft_visibility_bg),
            target.shape()
        )));
    }
    let t = g.constant(target.clone());
    let d = g.sub(soft_visibility_bg, t);
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Per-term losses on the graph.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub rec: Var,
    pub per: Var,
    pub contra: Var,
    pub sparse: Var,
    pub bg: Var,
}

/// Scalar values of one step's objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub rec: f32,
    pub per: f32,
    pub contra: f32,
    pub sparse: f32,
    pub bg: f32,
    pub total: f32,
    /// Contributions to `total` after weighting, in the order
    /// rec, per, contra, sparse, bg.
    pub weighted: [f32; 5],
}

/// Loss weights in effect, with the contrastive switch applied.
pub fn weights(cfg: &Config) -> [f32; 5] {
    let contra = if cfg.contrastive_enabled { cfg.lambda_contra } else { 0.0 };
    [1.0, cfg.lambda_per, contra, cfg.lambda_sparse, cfg.lambda_bg]
}

impl LossReport {
    /// Weighted sum of component values.
    pub fn from_components(cfg: &Config, step: u64, c: [f32; 5]) -> Self {
        let w = weights(cfg);
        let weighted: [f32; 5] = std::array::from_fn(|i| w[i] * c[i]);
        Self {
            step,
            rec: c[0],
            per: c[1],
            contra: c[2],
            sparse: c[3],
            bg: c[4],
            total: weighted.iter().sum(),
            weighted,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.rec, self.per, self.contra, self.sparse, self.bg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Combine terms into the training objective. Terms with zero weight are
/// left out of the graph so they contribute no gradient.
pub fn total_loss(g: &mut Graph, cfg: &Config, terms: &LossTerms) -> Var {
    let w = weights(cfg);
    let parts = [terms.rec, terms.per, terms.contra, terms.sparse, terms.bg];
    let mut total = parts[0];
    for k in 1..5 {
        if w[k] != 0.0 {
            let t = g.scale(parts[k], w[k]);
            total = g.add(total, t);
        }
    }
    total
}

/// Read the values of `terms` into a report.
pub fn report(g: &Graph, cfg: &Config, step: u64, terms: &LossTerms) -> LossReport {
    let v = |x: Var| g.value(x).item();
    LossReport::from_components(
        cfg,
        step,
        [v(terms.rec), v(terms.per), v(terms.contra), v(terms.sparse), v(terms.bg)],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(g: &mut Graph, v: f32) -> Var {
        g.constant(Tensor::full(&[2, 3, 4, 4], v))
    }

    #[test]
    fn perfect_reconstruction_at_unit_scale() {
        let mut g = Graph::new();
        let i = images(&mut g, 0.3);
        let s = g.constant(Tensor::full(&[2, 2, 4, 4], 1.0 / SQRT_2));
        let l = reconstruction_loss(&mut g, i, i, i, s).unwrap();
        assert!(g.value(l).item().abs() < 1e-6);
    }

    #[test]
    fn scaling_sigma_shifts_by_two_log() {
        for c in [0.5f32, 2.0, 3.0] {
            let mut g = Graph::new();
            let i = images(&mut g, 0.3);
            let s = g.constant(Tensor::full(&[2, 2, 4, 4], c / SQRT_2));
            let l = reconstruction_loss(&mut g, i, i, i, s).unwrap();
            assert!((g.value(l).item() - 2.0 * c.ln()).abs() < 1e-5);
        }
    }

    #[test]
    fn nonpositive_sigma_is_rejected() {
        let mut g = Graph::new();
        let i = images(&mut g, 0.3);
        let s = g.constant(Tensor::zeros(&[2, 2, 4, 4]));
        assert!(reconstruction_loss(&mut g, i, i, i, s).is_err());
    }

    #[test]
    fn contrastive_needs_two_samples_and_positive_tau() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::full(&[1, 3, 4], 1.0));
        assert!(contrastive_loss(&mut g, e, 0.07).is_err());
        let e = g.constant(Tensor::full(&[2, 3, 4], 1.0));
        assert!(contrastive_loss(&mut g, e, 0.0).is_err());
    }

    #[test]
    fn contrastive_ablation_zeroes_weight() {
        let cfg = Config {
            contrastive_enabled: false,
            ..Config::default()
        };
        let r = LossReport::from_components(&cfg, 0, [0.0, 0.0, 1e6, 0.0, 0.0]);
        assert_eq!(r.total, 0.0);
        assert_eq!(r.weighted[2], 0.0);
    }

    #[test]
    fn background_target_direction() {
        let d = Tensor::new(&[3], vec![0.95, 1.09, 1.08]);
        assert_eq!(background_target(&d, 1.08, true).data(), &[0.0, 1.0, 0.0]);
        assert_eq!(background_target(&d, 1.08, false).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn report_roundtrips_through_json() {
        let r = LossReport::from_components(&Config::default(), 7, [1.0, 2.0, 3.0, 4.0, 5.0]);
        let back: LossReport = serde_json::from_str(&r.to_json_line()).unwrap();
        assert_eq!(back, r);
    }
}
