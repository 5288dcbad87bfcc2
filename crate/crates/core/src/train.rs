//! End-to-end forward pass, optimization step and the training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use igc_tensor::{Adam, Graph, Tensor, Var};

use crate::config::Config;
use crate::data::{epoch_batches, load_checkpoint_for, save_checkpoint, DatasetManifest, InMemory, Split};
use crate::error::{Error, Result};
use crate::gdm::{decompose, Decomposition};
use crate::losses::{self, LossReport, LossTerms};
use crate::nets::{
    capsules_from, confidence_net, graphics_decoder, image_encoder, lighting_net, lightings_from,
    perceptual_features, DecodedParts, ModelParameters, NetVars,
};
use crate::render::{assemble_graph, render_graph, Assembled, Camera, RenderOutput, Rendered};
use crate::types::{
    ConfidenceMaps, GlobalEmbeddings, GraphicsCapsule, ImageBatch, Lighting, ObjectCapsule, Pose,
};

/// Every intermediate of one forward pass, on the graph.
pub struct ForwardGraph {
    pub images: Var,
    pub f_shape: Var,
    pub f_albedo: Var,
    pub decomposition: Decomposition,
    /// Decoder outputs batched over `B * M`.
    pub parts: DecodedParts,
    pub assembled: Assembled,
    pub light: Var,
    pub direct: Rendered,
    pub flipped: Rendered,
    pub sigmas: Vec<Var>,
    pub terms: LossTerms,
    pub total: Var,
}

/// Run encoder, decomposition, shared decoder, assembly, rendering and the
/// losses for one batch.
pub fn forward_graph(g: &mut Graph, nv: &NetVars, cfg: &Config, batch: &ImageBatch) -> Result<ForwardGraph> {
    if batch.size() != cfg.image_size {
        return Err(Error::Shape(format!(
            "batch images are {0}x{0}, config expects {1}x{1}",
            batch.size(),
            cfg.image_size
        )));
    }
    let (b, m, d, n) = (batch.batch_size(), cfg.num_capsules, cfg.part_dim, cfg.image_size);
    let images = g.constant(batch.pixels().clone());
    let (f_shape, f_albedo) = image_encoder(g, nv, cfg, images)?;
    let pv = &nv.trainable;
    let decomposition = decompose(
        g,
        f_shape,
        f_albedo,
        pv.get("gdm.basis_shape"),
        pv.get("gdm.basis_albedo"),
        cfg.one_hot_enabled,
    )?;

    let es = g.reshape(decomposition.shape, &[b * m, d]);
    let ea = g.reshape(decomposition.albedo, &[b * m, d]);
    let parts = graphics_decoder(g, nv, cfg, es, ea)?;
    let depth = g.reshape(parts.depth, &[b, m, n, n]);
    let albedo = g.reshape(parts.albedo, &[b, m, 3, n, n]);
    let pose = g.reshape(parts.pose, &[b, m, 6]);
    let assembled = assemble_graph(g, depth, albedo, pose, cfg.vis_temperature)?;

    let light = lighting_net(g, nv, cfg, images)?;
    let camera = Camera::from_config(cfg);
    let bg = m as u8;
    let (ad, aa, ap) = (assembled.depth, assembled.albedo, assembled.pose);
    let direct = render_graph(g, &camera, ad, aa, ap, light, &assembled.labels, false, bg)?;
    let flipped = render_graph(g, &camera, ad, aa, ap, light, &assembled.labels, true, bg)?;

    let sigmas = confidence_net(g, nv, cfg, images)?;
    let rec = losses::reconstruction_loss(g, images, direct.image, flipped.image, sigmas[0])?;
    let per = losses::perceptual_loss(
        g,
        |g, x| perceptual_features(g, nv, cfg, x),
        images,
        direct.image,
        flipped.image,
        &sigmas[1..],
    )?;
    // A single image has no negatives; inference on one image reports 0.
    let contra = if b >= 2 {
        losses::contrastive_loss(g, decomposition.shape, cfg.tau)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let sparse = losses::sparsity_loss(g, assembled.soft_visibility)?;
    let bg_vis = g.narrow(assembled.soft_visibility, 1, m - 1, 1);
    let bg_vis = g.reshape(bg_vis, &[b, n, n]);
    let target = losses::background_target(g.value(assembled.depth), cfg.gamma, cfg.bg_far_band);
    let bg_loss = losses::background_loss(g, bg_vis, &target)?;
    let terms = LossTerms {
        rec,
        per,
        contra,
        sparse,
        bg: bg_loss,
    };
    let total = losses::total_loss(g, cfg, &terms);
    Ok(ForwardGraph {
        images,
        f_shape,
        f_albedo,
        decomposition,
        parts,
        assembled,
        light,
        direct,
        flipped,
        sigmas,
        terms,
        total,
    })
}

/// Plain-value results of a forward pass.
pub struct ForwardOutput {
    pub render: RenderOutput,
    pub objects: Vec<ObjectCapsule>,
    /// `parts[b][m]`
    pub parts: Vec<Vec<GraphicsCapsule>>,
    pub embeddings: GlobalEmbeddings,
    pub lighting: Vec<Lighting>,
    pub confidence: ConfidenceMaps,
    pub losses: LossReport,
}

/// Forward pass without gradients, returning every intermediate.
pub fn forward(batch: &ImageBatch, params: &ModelParameters, cfg: &Config) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let nv = NetVars {
        trainable: params.trainable.register(&mut g, false),
        frozen: params.frozen.register(&mut g, false),
    };
    let fw = forward_graph(&mut g, &nv, cfg, batch)?;
    let (b, m, n) = (batch.batch_size(), cfg.num_capsules, cfg.image_size);

    let caps = capsules_from(
        g.value(fw.parts.depth),
        g.value(fw.parts.albedo),
        g.value(fw.parts.pose),
    );
    let parts: Vec<Vec<GraphicsCapsule>> = caps.chunks(m).map(|c| c.to_vec()).collect();
    let a = &fw.assembled;
    let objects = (0..b)
        .map(|i| ObjectCapsule {
            depth: g.value(a.depth).index0(i),
            albedo: g.value(a.albedo).index0(i),
            pose: Pose(g.value(a.pose).index0(i).data().try_into().expect("6 pose entries")),
            visibility: a.visibility.index0(i),
            soft_visibility: g.value(a.soft_visibility).index0(i),
            labels: a.labels[i * n * n..(i + 1) * n * n].to_vec(),
        })
        .collect();
    Ok(ForwardOutput {
        render: RenderOutput {
            image: g.value(fw.direct.image).clone(),
            image_flip: g.value(fw.flipped.image).clone(),
            label_map: fw.direct.labels.clone(),
            mask: fw.direct.mask.clone(),
            num_capsules: m,
        },
        objects,
        parts,
        embeddings: GlobalEmbeddings {
            shape: g.value(fw.f_shape).clone(),
            albedo: g.value(fw.f_albedo).clone(),
        },
        lighting: lightings_from(g.value(fw.light)),
        confidence: ConfidenceMaps {
            levels: fw.sigmas.iter().map(|&s| g.value(s).clone()).collect(),
        },
        losses: losses::report(&g, cfg, 0, &fw.terms),
    })
}

/// Parameters, optimizer moments and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParameters,
    pub optimizer: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &Config) -> Self {
        let params = ModelParameters::init(cfg);
        let optimizer = Adam::new(&params.trainable, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
        Self {
            params,
            optimizer,
            step: 0,
        }
    }
}

/// One Adam step on the combined objective. The report carries the losses
/// evaluated before the update.
pub fn train_step(state: &mut TrainState, batch: &ImageBatch, cfg: &Config) -> Result<LossReport> {
    let mut g = Graph::new();
    let nv = state.params.register(&mut g);
    let fw = forward_graph(&mut g, &nv, cfg, batch)?;
    let step = state.step + 1;
    let report = losses::report(&g, cfg, step, &fw.terms);
    if !report.is_finite() {
        return Err(Error::NonFinite {
            step,
            terms: report.to_json_line(),
        });
    }
    let grads = g.backward(fw.total);
    let grads = nv.trainable.collect_grads(&grads, &state.params.trainable);
    if let Some((name, _)) = state
        .params
        .trainable
        .iter()
        .zip(&grads)
        .find(|(_, gr)| !gr.is_finite())
        .map(|((n, _), gr)| (n, gr))
    {
        return Err(Error::NonFinite {
            step,
            terms: format!("gradient of `{name}` is not finite; losses {}", report.to_json_line()),
        });
    }
    state.optimizer.lr = cfg.learning_rate;
    state.optimizer.update(&mut state.params.trainable, &grads);
    state.step = step;
    Ok(report)
}

/// Gradients of the combined objective for every trainable array, in store
/// order, without updating anything.
pub fn gradients(params: &ModelParameters, batch: &ImageBatch, cfg: &Config) -> Result<Vec<(String, Tensor)>> {
    let mut g = Graph::new();
    let nv = params.register(&mut g);
    let fw = forward_graph(&mut g, &nv, cfg, batch)?;
    let grads = g.backward(fw.total);
    let grads = nv.trainable.collect_grads(&grads, &params.trainable);
    Ok(params.trainable.names().map(str::to_string).zip(grads).collect())
}

/// Step through the deterministic batch schedule until `state.step` reaches
/// `until`. `on_step` sees the updated state and the step's report.
pub fn run_steps(
    state: &mut TrainState,
    data: &InMemory,
    cfg: &Config,
    until: u64,
    mut on_step: impl FnMut(&TrainState, &LossReport) -> Result<()>,
) -> Result<()> {
    let per_epoch = (data.len() / cfg.batch_size) as u64;
    if per_epoch == 0 && until > state.step {
        return Err(Error::InvalidInput(format!(
            "{} training images cannot fill a batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let mut cached: Option<(u64, Vec<Vec<usize>>)> = None;
    while state.step < until {
        let epoch = state.step / per_epoch;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            cached = Some((epoch, epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch)));
        }
        let idx = &cached.as_ref().unwrap().1[(state.step % per_epoch) as usize];
        let batch = data.batch(idx)?;
        let report = train_step(state, &batch, cfg)?;
        on_step(state, &report)?;
    }
    Ok(())
}

/// Mean losses over `data` in batches of the configured size; a trailing
/// single image is skipped since the contrastive term needs two.
pub fn evaluate_loss(params: &ModelParameters, data: &InMemory, cfg: &Config) -> Result<Option<LossReport>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut sums = [0.0f64; 5];
    let mut count = 0usize;
    for chunk in idx.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
        let out = forward(&data.batch(chunk)?, params, cfg)?;
        let l = &out.losses;
        for (s, v) in sums.iter_mut().zip([l.rec, l.per, l.contra, l.sparse, l.bg]) {
            *s += v as f64 * chunk.len() as f64;
        }
        count += chunk.len();
    }
    if count == 0 {
        return Ok(None);
    }
    let mean = sums.map(|s| (s / count as f64) as f32);
    Ok(Some(LossReport::from_components(cfg, 0, mean)))
}

/// Where and how [`fit`] runs.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Accept a resume checkpoint written under a different config.
    pub force: bool,
    /// Stop early after this many total steps.
    pub max_steps: Option<u64>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step}"))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))
}

/// Train on the manifest's train split for the configured epochs.
///
/// Every step appends its report to `metrics.jsonl`; every epoch appends the
/// validation losses. Checkpoints `ckpt_<step>` are written every
/// `checkpoint_every` steps and at the end, each with hierarchy figures of
/// the first validation image under `figures/step_<step>`. Returns the final
/// checkpoint.
pub fn fit(manifest: &DatasetManifest, cfg: &Config, opts: &FitOptions) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(opts.out_dir.display().to_string(), e))?;
    let train = InMemory::load(manifest, Split::Train, cfg.image_size)?;
    let val = InMemory::load(manifest, Split::Val, cfg.image_size)?;
    let mut state = match &opts.resume {
        Some(p) => load_checkpoint_for(p, cfg, opts.force)?.state,
        None => TrainState::new(cfg),
    };
    let per_epoch = (train.len() / cfg.batch_size) as u64;
    let mut total = cfg.epochs as u64 * per_epoch;
    if let Some(m) = opts.max_steps {
        total = total.min(m);
    }
    let metrics = opts.out_dir.join("metrics.jsonl");
    let figure_image = [&val, &train].into_iter().find(|d| !d.is_empty()).map(|d| d.images.index0(0));
    let figure_image = figure_image.as_ref();
    log::info!(
        "training {} images, {per_epoch} steps per epoch, steps {}..{total}",
        train.len(),
        state.step
    );
    let mut last_saved = None;
    run_steps(&mut state, &train, cfg, total, |st, report| {
        append_line(&metrics, &report.to_json_line())?;
        if st.step % cfg.checkpoint_every as u64 == 0 {
            save_checkpoint(&checkpoint_path(&opts.out_dir, st.step), cfg, st)?;
            last_saved = Some(st.step);
            if let Some(img) = figure_image {
                let dir = opts.out_dir.join("figures").join(format!("step_{}", st.step));
                crate::eval::export_hierarchy_image(&st.params, cfg, img, &dir)?;
            }
        }
        if per_epoch > 0 && st.step % per_epoch == 0 {
            let epoch = st.step / per_epoch;
            let val_report = evaluate_loss(&st.params, &val, cfg)?;
            let line = serde_json::json!({
                "epoch": epoch,
                "step": st.step,
                "train_total": report.total,
                "val": val_report,
            });
            append_line(&metrics, &line.to_string())?;
            log::info!("epoch {epoch} step {} total {:.4}", st.step, report.total);
        }
        Ok(())
    })?;
    let path = checkpoint_path(&opts.out_dir, state.step);
    if last_saved != Some(state.step) {
        save_checkpoint(&path, cfg, &state)?;
    }
    Ok(path)
}
