//! Learnable functions: image encoder, shared capsule decoder, lighting and
//! confidence estimators, plus the fixed perceptual feature extractor.
//!
//! Architectures are small convolutional stacks sized by [`Config`]; every
//! function takes the parameter handles registered on the current graph.

use std::f32::consts::PI;

use igc_tensor::{he_uniform, Graph, ParamStore, ParamVars, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, PoseSource};
use crate::error::{Error, Result};
use crate::gdm::BasisBank;
use crate::types::{ConfidenceMaps, GlobalEmbeddings, GraphicsCapsule, ImageBatch, Lighting, Pose};

const LEAK: f32 = 0.2;
const HEAD_GAIN: f32 = 0.1;

/// Pose bounds: yaw, pitch, roll (radians), then translations.
pub const POSE_LIMITS: [f32; 6] = [PI / 3.0, PI / 6.0, PI / 6.0, 0.1, 0.1, 0.1];

/// Trainable and frozen arrays of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub trainable: ParamStore,
    /// Perceptual feature extractor; never updated.
    pub frozen: ParamStore,
}

impl ModelParameters {
    /// Fresh parameters: He-uniform convolutions and linears, zero biases,
    /// Gaussian basis bank.
    pub fn init(cfg: &Config) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let h = cfg.image_size;

        // Encoder.
        let mut c_in = 3;
        for (i, &c) in cfg.encoder_channels.iter().enumerate() {
            b.conv(&format!("enc.conv{i}"), c_in, c, 1.0);
            c_in = c;
        }
        let flat = c_in * encoder_out_side(cfg).pow(2);
        b.linear("enc.shape", flat, cfg.embed_dim, 1.0);
        b.linear("enc.albedo", flat, cfg.embed_dim, 1.0);

        // Graphics decomposition bases.
        let bank = BasisBank::random(cfg.num_capsules, cfg.embed_dim, cfg.part_dim, b.rng);
        b.store.insert("gdm.basis_shape", bank.shape).unwrap();
        b.store.insert("gdm.basis_albedo", bank.albedo).unwrap();

        // Shared capsule decoder.
        for (branch, out) in [("depth", 1), ("albedo", 3)] {
            let c0 = cfg.decoder_channels[0];
            let s0 = decoder_in_side(cfg);
            b.linear(&format!("dec.{branch}.fc"), cfg.part_dim, c0 * s0 * s0, 1.0);
            let mut c_in = c0;
            for (i, &c) in cfg.decoder_channels.iter().enumerate() {
                b.conv(&format!("dec.{branch}.conv{i}"), c_in, c, 1.0);
                c_in = c;
            }
            b.conv(&format!("dec.{branch}.head"), c_in, out, HEAD_GAIN);
        }
        let pose_in = match cfg.pose_source {
            PoseSource::Both => 2 * cfg.part_dim,
            _ => cfg.part_dim,
        };
        b.linear("dec.pose", pose_in, 6, HEAD_GAIN);

        // Lighting estimator.
        let mut c_in = 3;
        for (i, c) in light_channels(cfg).into_iter().enumerate() {
            b.conv(&format!("light.conv{i}"), c_in, c, 1.0);
            c_in = c;
        }
        b.linear("light.fc", c_in * encoder_out_side(cfg).pow(2), 4, HEAD_GAIN);

        // Confidence estimator: down to 1/2^(L+1), back up with a head at every
        // level the losses need.
        let levels = cfg.perceptual_channels.len();
        let mut c_in = 3;
        for k in 0..=levels {
            let c = conf_width(k + 1);
            b.conv(&format!("conf.down{k}"), c_in, c, 1.0);
            c_in = c;
        }
        for k in (0..=levels).rev() {
            let c = conf_width(k);
            b.conv(&format!("conf.up{k}"), c_in, c, 1.0);
            b.conv(&format!("conf.head{k}"), c, 2, HEAD_GAIN);
            c_in = c;
        }
        debug_assert_eq!(h % (1 << (levels + 1)), 0);

        let trainable = b.store;
        let mut frozen = ParamStore::new();
        let mut fb = Builder {
            store: std::mem::take(&mut frozen),
            rng: &mut rng,
        };
        let mut c_in = 3;
        for (i, &c) in cfg.perceptual_channels.iter().enumerate() {
            fb.conv(&format!("per.conv{i}"), c_in, c, 1.0);
            c_in = c;
        }
        Self {
            trainable,
            frozen: fb.store,
        }
    }

    /// Check names, shapes and finiteness against a freshly built model.
    pub fn validate(&self, cfg: &Config) -> Result<()> {
        let reference = ModelParameters::init(cfg);
        self.trainable.check_against(&reference.trainable)?;
        self.frozen.check_against(&reference.frozen)?;
        Ok(())
    }

    pub fn register(&self, g: &mut Graph) -> NetVars {
        NetVars {
            trainable: self.trainable.register(g, true),
            frozen: self.frozen.register(g, false),
        }
    }
}

/// Parameter handles on one graph.
pub struct NetVars {
    pub trainable: ParamVars,
    pub frozen: ParamVars,
}

struct Builder<'r> {
    store: ParamStore,
    rng: &'r mut ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, gain: f32) {
        let w = he_uniform(&[c_out, c_in, 3, 3], c_in * 9, self.rng).map(|v| v * gain);
        self.store.insert(format!("{name}.w"), w).unwrap();
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[c_out])).unwrap();
    }

    fn linear(&mut self, name: &str, n_in: usize, n_out: usize, gain: f32) {
        let w = he_uniform(&[n_in, n_out], n_in, self.rng).map(|v| v * gain);
        self.store.insert(format!("{name}.w"), w).unwrap();
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[n_out])).unwrap();
    }
}

fn encoder_out_side(cfg: &Config) -> usize {
    cfg.image_size >> cfg.encoder_channels.len()
}

fn decoder_in_side(cfg: &Config) -> usize {
    cfg.image_size >> cfg.decoder_channels.len()
}

fn light_channels(cfg: &Config) -> Vec<usize> {
    cfg.encoder_channels.iter().map(|&c| (c / 2).max(4)).collect()
}

fn conf_width(level: usize) -> usize {
    8 << level.min(2)
}

fn conv(g: &mut Graph, pv: &ParamVars, name: &str, x: Var, stride: usize) -> Var {
    let w = pv.get(&format!("{name}.w"));
    let b = pv.get(&format!("{name}.b"));
    g.conv2d(x, w, b, stride, 1)
}

fn linear(g: &mut Graph, pv: &ParamVars, name: &str, x: Var) -> Var {
    let w = pv.get(&format!("{name}.w"));
    let b = pv.get(&format!("{name}.b"));
    g.linear(x, w, b)
}

fn check_images(g: &Graph, images: Var, cfg: &Config) -> Result<usize> {
    let s = g.shape(images);
    if s.len() != 4 || s[1] != 3 || s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(Error::Shape(format!(
            "expected images [B, 3, {0}, {0}], got {s:?}",
            cfg.image_size
        )));
    }
    Ok(s[0])
}

/// Stride-2 convolution stack flattened per sample.
fn down_stack(g: &mut Graph, pv: &ParamVars, prefix: &str, stages: usize, images: Var) -> Var {
    let mut x = images;
    for i in 0..stages {
        let y = conv(g, pv, &format!("{prefix}.conv{i}"), x, 2);
        x = g.leaky_relu(y, LEAK);
    }
    let s = g.shape(x).to_vec();
    g.reshape(x, &[s[0], s[1] * s[2] * s[3]])
}

/// Images `[B, 3, H, W]` to `(f_s, f_a)`, each `[B, F]`.
pub fn image_encoder(g: &mut Graph, nv: &NetVars, cfg: &Config, images: Var) -> Result<(Var, Var)> {
    check_images(g, images, cfg)?;
    let pv = &nv.trainable;
    let h = down_stack(g, pv, "enc", cfg.encoder_channels.len(), images);
    let f_s = linear(g, pv, "enc.shape", h);
    let f_a = linear(g, pv, "enc.albedo", h);
    Ok((f_s, f_a))
}

/// Decoded capsules on the graph, batched over `N = B * M` part embeddings.
pub struct DecodedParts {
    /// `[N, H, W]`
    pub depth: Var,
    /// `[N, 3, H, W]`
    pub albedo: Var,
    /// `[N, 6]`
    pub pose: Var,
}

fn decoder_branch(g: &mut Graph, pv: &ParamVars, cfg: &Config, branch: &str, e: Var) -> Var {
    let n = g.shape(e)[0];
    let s0 = decoder_in_side(cfg);
    let h = linear(g, pv, &format!("dec.{branch}.fc"), e);
    let h = g.leaky_relu(h, LEAK);
    let mut x = g.reshape(h, &[n, cfg.decoder_channels[0], s0, s0]);
    for i in 0..cfg.decoder_channels.len() {
        let up = g.upsample2x(x);
        let y = conv(g, pv, &format!("dec.{branch}.conv{i}"), up, 1);
        x = g.leaky_relu(y, LEAK);
    }
    conv(g, pv, &format!("dec.{branch}.head"), x, 1)
}

/// Shared capsule decoder: part embeddings `[N, D]` to depth, albedo and pose.
///
/// The same parameter set decodes every capsule. Depth is read from the shape
/// embedding only and albedo from the albedo embedding only; the pose source
/// is configurable.
pub fn graphics_decoder(
    g: &mut Graph,
    nv: &NetVars,
    cfg: &Config,
    e_shape: Var,
    e_albedo: Var,
) -> Result<DecodedParts> {
    let (ss, sa) = (g.shape(e_shape).to_vec(), g.shape(e_albedo).to_vec());
    if ss.len() != 2 || ss[1] != cfg.part_dim || ss != sa {
        return Err(Error::Shape(format!(
            "decoder expects two [N, {}] embeddings, got {ss:?} and {sa:?}",
            cfg.part_dim
        )));
    }
    let n = ss[0];
    let pv = &nv.trainable;
    let (h, w) = (cfg.image_size, cfg.image_size);

    let raw = decoder_branch(g, pv, cfg, "depth", e_shape);
    let t = g.tanh(raw);
    let t = g.scale(t, cfg.depth_half_range());
    let t = g.add_scalar(t, cfg.depth_mid());
    let depth = g.reshape(t, &[n, h, w]);

    let raw = decoder_branch(g, pv, cfg, "albedo", e_albedo);
    let albedo = g.sigmoid(raw);

    let pose_in = match cfg.pose_source {
        PoseSource::Shape => e_shape,
        PoseSource::Albedo => e_albedo,
        PoseSource::Both => g.concat(&[e_shape, e_albedo], 1),
    };
    let raw = linear(g, pv, "dec.pose", pose_in);
    let t = g.tanh(raw);
    let limits = g.constant(Tensor::new(&[6], POSE_LIMITS.to_vec()));
    let pose = g.mul(t, limits);
    Ok(DecodedParts { depth, albedo, pose })
}

/// Images to lighting `[B, 4] = (k_a, k_d, l_x, l_y)`.
pub fn lighting_net(g: &mut Graph, nv: &NetVars, cfg: &Config, images: Var) -> Result<Var> {
    let b = check_images(g, images, cfg)?;
    let pv = &nv.trainable;
    let h = down_stack(g, pv, "light", cfg.encoder_channels.len(), images);
    let raw = linear(g, pv, "light.fc", h);
    let k = g.narrow(raw, 1, 0, 2);
    let k = g.sigmoid(k);
    let dir = g.narrow(raw, 1, 2, 2);
    let dir = g.tanh(dir);
    let out = g.concat(&[k, dir], 1);
    debug_assert_eq!(g.shape(out), &[b, 4]);
    Ok(out)
}

/// Confidence maps: level 0 at image resolution, then one per perceptual
/// stage. Each is `[B, 2, H_k, W_k]`, strictly above `sigma_floor`.
pub fn confidence_net(g: &mut Graph, nv: &NetVars, cfg: &Config, images: Var) -> Result<Vec<Var>> {
    check_images(g, images, cfg)?;
    let pv = &nv.trainable;
    let levels = cfg.perceptual_channels.len();
    let mut x = images;
    for k in 0..=levels {
        let y = conv(g, pv, &format!("conf.down{k}"), x, 2);
        x = g.leaky_relu(y, LEAK);
    }
    let mut maps = vec![None; levels + 1];
    for k in (0..=levels).rev() {
        let up = g.upsample2x(x);
        let y = conv(g, pv, &format!("conf.up{k}"), up, 1);
        x = g.leaky_relu(y, LEAK);
        let raw = conv(g, pv, &format!("conf.head{k}"), x, 1);
        let s = g.softplus(raw);
        maps[k] = Some(g.add_scalar(s, cfg.sigma_floor));
    }
    Ok(maps.into_iter().map(Option::unwrap).collect())
}

/// Fixed feature extractor: one feature map per stage.
pub fn perceptual_features(g: &mut Graph, nv: &NetVars, cfg: &Config, images: Var) -> Vec<Var> {
    let pv = &nv.frozen;
    let mut x = images;
    let mut feats = Vec::with_capacity(cfg.perceptual_channels.len());
    for i in 0..cfg.perceptual_channels.len() {
        let y = conv(g, pv, &format!("per.conv{i}"), x, 2);
        x = g.relu(y);
        feats.push(x);
    }
    feats
}

/// Names of the decoder parameters, which all capsules share.
pub fn decoder_parameter_names(params: &ModelParameters) -> Vec<String> {
    params
        .trainable
        .names()
        .filter(|n| n.starts_with("dec."))
        .map(str::to_string)
        .collect()
}

/// Value-level access to the networks, for inspection and tests.
pub struct Model<'a> {
    pub cfg: &'a Config,
    pub params: &'a ModelParameters,
}

impl<'a> Model<'a> {
    pub fn new(cfg: &'a Config, params: &'a ModelParameters) -> Self {
        Self { cfg, params }
    }

    pub fn encode(&self, images: &ImageBatch) -> Result<GlobalEmbeddings> {
        let mut g = Graph::new();
        let nv = self.params.register(&mut g);
        let x = g.constant(images.pixels().clone());
        let (fs, fa) = image_encoder(&mut g, &nv, self.cfg, x)?;
        Ok(GlobalEmbeddings {
            shape: g.value(fs).clone(),
            albedo: g.value(fa).clone(),
        })
    }

    /// Decode `[N, D]` part embeddings into N capsules.
    pub fn decode(&self, e_shape: &Tensor, e_albedo: &Tensor) -> Result<Vec<GraphicsCapsule>> {
        let mut g = Graph::new();
        let nv = self.params.register(&mut g);
        let es = g.constant(e_shape.clone());
        let ea = g.constant(e_albedo.clone());
        let parts = graphics_decoder(&mut g, &nv, self.cfg, es, ea)?;
        Ok(capsules_from(g.value(parts.depth), g.value(parts.albedo), g.value(parts.pose)))
    }

    pub fn lighting(&self, images: &ImageBatch) -> Result<Vec<Lighting>> {
        let mut g = Graph::new();
        let nv = self.params.register(&mut g);
        let x = g.constant(images.pixels().clone());
        let l = lighting_net(&mut g, &nv, self.cfg, x)?;
        Ok(lightings_from(g.value(l)))
    }

    pub fn confidence(&self, images: &ImageBatch) -> Result<ConfidenceMaps> {
        let mut g = Graph::new();
        let nv = self.params.register(&mut g);
        let x = g.constant(images.pixels().clone());
        let maps = confidence_net(&mut g, &nv, self.cfg, x)?;
        Ok(ConfidenceMaps {
            levels: maps.into_iter().map(|m| g.value(m).clone()).collect(),
        })
    }
}

/// Split batched decoder outputs into capsules.
pub fn capsules_from(depth: &Tensor, albedo: &Tensor, pose: &Tensor) -> Vec<GraphicsCapsule> {
    (0..depth.shape()[0])
        .map(|i| {
            let p = pose.index0(i);
            GraphicsCapsule {
                depth: depth.index0(i),
                albedo: albedo.index0(i),
                pose: Pose(p.data().try_into().expect("pose has 6 entries")),
            }
        })
        .collect()
}

pub fn lightings_from(light: &Tensor) -> Vec<Lighting> {
    light
        .data()
        .chunks_exact(4)
        .map(|l| Lighting {
            ambient: l[0],
            diffuse: l[1],
            direction: [l[2], l[3]],
        })
        .collect()
}

impl ConfidenceMaps {
    /// Constant maps shaped like the network output, bypassing the network.
    pub fn constant(cfg: &Config, batch: usize, value: f32) -> Self {
        let levels = (0..=cfg.perceptual_channels.len())
            .map(|k| {
                let side = cfg.image_size >> k;
                Tensor::full(&[batch, 2, side, side], value)
            })
            .collect();
        Self { levels }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use igc_tensor::gradcheck::{numeric_gradient, relative_error};

    fn small_cfg() -> Config {
        Config {
            embed_dim: 16,
            part_dim: 8,
            image_size: 32,
            encoder_channels: vec![4, 4, 4, 4, 4],
            decoder_channels: vec![4, 4, 4, 4, 4],
            perceptual_channels: vec![4],
            ..Config::default()
        }
    }

    #[test]
    fn parameter_names_are_unique_and_validate() {
        let cfg = small_cfg();
        let p = ModelParameters::init(&cfg);
        p.validate(&cfg).unwrap();
        let other = ModelParameters::init(&Config { part_dim: 9, ..small_cfg() });
        assert!(other.validate(&cfg).is_err());
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let cfg = small_cfg();
        assert_eq!(ModelParameters::init(&cfg), ModelParameters::init(&cfg));
        let other = ModelParameters::init(&Config { seed: 1, ..small_cfg() });
        assert_ne!(other.trainable, ModelParameters::init(&cfg).trainable);
    }

    #[test]
    fn encoder_rejects_wrong_inputs() {
        let cfg = small_cfg();
        let p = ModelParameters::init(&cfg);
        let mut g = Graph::new();
        let nv = p.register(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(image_encoder(&mut g, &nv, &cfg, x).is_err());
    }

    #[test]
    fn zero_raw_lighting_gives_half_coefficients() {
        let cfg = small_cfg();
        let mut p = ModelParameters::init(&cfg);
        p.trainable.get_mut("light.fc.w").unwrap().data_mut().fill(0.0);
        let model = Model::new(&cfg, &p);
        let images = ImageBatch::new(Tensor::full(&[2, 3, 32, 32], 0.3)).unwrap();
        for l in model.lighting(&images).unwrap() {
            assert_eq!((l.ambient, l.diffuse), (0.5, 0.5));
            assert_eq!(l.direction, [0.0, 0.0]);
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let cfg = Config {
            embed_dim: 4,
            part_dim: 4,
            image_size: 32,
            encoder_channels: vec![2, 2, 2, 2, 2],
            decoder_channels: vec![2, 2, 2, 2, 2],
            perceptual_channels: vec![2],
            ..Config::default()
        };
        let p = ModelParameters::init(&cfg);
        let x0 = Tensor::new(
            &[1, 3, 32, 32],
            (0..3 * 32 * 32).map(|i| ((i * 37 % 101) as f32) / 101.0).collect(),
        );
        let eval = |x: &Tensor| {
            let mut g = Graph::new();
            let nv = p.register(&mut g);
            let xv = g.leaf(x.clone());
            let (fs, _) = image_encoder(&mut g, &nv, &cfg, xv).unwrap();
            let sq = g.square(fs);
            let s = g.sum(sq);
            let grads = g.backward(s);
            (g.value(s).item(), grads.get(xv).cloned().unwrap())
        };
        let (_, analytic) = eval(&x0);
        // Probe a handful of pixels rather than all 3072.
        let idx: Vec<usize> = (0..3 * 32 * 32).step_by(97).collect();
        let sub = Tensor::new(&[idx.len()], idx.iter().map(|&i| x0.data()[i]).collect());
        let numeric = numeric_gradient(&sub, 1e-3, |s| {
            let mut x = x0.clone();
            for (k, &i) in idx.iter().enumerate() {
                x.data_mut()[i] = s.data()[k];
            }
            eval(&x).0 as f64
        });
        let analytic_sub = Tensor::new(&[idx.len()], idx.iter().map(|&i| analytic.data()[i]).collect());
        let err = relative_error(&analytic_sub, &numeric, 1e-4);
        assert!(err < 1e-2, "relative error {err}");
    }
}
