//! Unsupervised segmentation metrics and hierarchy figures.
//!
//! Discovered parts are scored as landmark detectors. `NME_L` maps segment
//! centroids to landmarks with a least-squares linear map; `NME_DL` trains a
//! small fixed network on one-hot segment maps. Both report the mean landmark
//! error as a percentage of the inter-ocular distance (landmarks 0 and 1).

use std::fs;
use std::path::{Path, PathBuf};

use igc_tensor::{Adam, Graph, ParamStore, Tensor, Var};
use image::{GrayImage, Rgb, RgbImage};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{
    epoch_order, load_checkpoint, open_image, preprocess, DatasetManifest, InMemory, Landmarks, Split,
};
use crate::error::{Error, Result};
use crate::nets::ModelParameters;
use crate::train::{forward, ForwardOutput};
use crate::types::{ImageBatch, SegmentationMap};

/// Centroid `[x, y]` (column, row) of every capsule label `0..M`; `None` where
/// the capsule covers no pixel.
pub fn centroids(seg: &SegmentationMap) -> Vec<Option<[f32; 2]>> {
    let m = seg.num_capsules;
    let mut acc = vec![[0.0f64; 3]; m];
    for (i, &l) in seg.labels.iter().enumerate() {
        if let Some(a) = acc.get_mut(l as usize) {
            a[0] += (i % seg.size) as f64;
            a[1] += (i / seg.size) as f64;
            a[2] += 1.0;
        }
    }
    acc.iter()
        .map(|a| (a[2] > 0.0).then(|| [(a[0] / a[2]) as f32, (a[1] / a[2]) as f32]))
        .collect()
}

/// Distance between the first two landmarks (the eyes).
pub fn inter_ocular(marks: &[[f32; 2]]) -> Result<f64> {
    if marks.len() < 2 {
        return Err(Error::Evaluation("need both eye landmarks for the normalizer".into()));
    }
    let d = ((marks[0][0] - marks[1][0]) as f64).hypot((marks[0][1] - marks[1][1]) as f64);
    if d > 0.0 {
        Ok(d)
    } else {
        Err(Error::Evaluation("inter-ocular distance is zero".into()))
    }
}

/// Mean landmark error of one sample, in percent of the inter-ocular distance.
pub fn sample_nme(pred: &[[f32; 2]], truth: &[[f32; 2]]) -> Result<f64> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(Error::Evaluation(format!(
            "{} predicted landmarks for {} true ones",
            pred.len(),
            truth.len()
        )));
    }
    let iod = inter_ocular(truth)?;
    let err: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| ((p[0] - t[0]) as f64).hypot((p[1] - t[1]) as f64))
        .sum();
    Ok(100.0 * err / (truth.len() as f64 * iod))
}

fn mean_nme(preds: &[Landmarks], truth: &[Landmarks]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Evaluation("no test samples".into()));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(truth) {
        total += sample_nme(p, t)?;
    }
    Ok(total / preds.len() as f64)
}

/// Least-squares map from stacked centroids (plus a bias) to stacked
/// landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    /// `[2K, 2A + 1]` over the `A` active capsules.
    pub weights: DMatrix<f64>,
    /// Mean training centroid per capsule, substituted for empty segments at
    /// prediction time.
    pub fill: Vec<[f64; 2]>,
    /// Capsules used as features. A capsule empty in more than
    /// [`COLLAPSE_FRACTION`] of the training samples is dropped.
    pub active: Vec<bool>,
    /// Training samples left out because an active segment was empty.
    pub excluded: usize,
    /// The design matrix was rank deficient and a ridge term was added.
    pub regularized: bool,
}

const RIDGE: f64 = 1e-6;

fn feature_row(c: &[Option<[f32; 2]>], fill: &[[f64; 2]], active: &[bool]) -> (Vec<f64>, usize) {
    let mut row = Vec::with_capacity(2 * c.len() + 1);
    let mut imputed = 0;
    for ((p, f), _) in c.iter().zip(fill).zip(active).filter(|(_, a)| **a) {
        match p {
            Some(p) => row.extend([p[0] as f64, p[1] as f64]),
            None => {
                row.extend(f);
                imputed += 1;
            }
        }
    }
    row.push(1.0);
    (row, imputed)
}

/// Fit on training samples whose active segments are all present. Needs at
/// least `2A + 1` of them.
pub fn fit_linear_map(centroids: &[Vec<Option<[f32; 2]>>], landmarks: &[Landmarks]) -> Result<LinearMap> {
    if centroids.len() != landmarks.len() || centroids.is_empty() {
        return Err(Error::Evaluation(format!(
            "{} centroid sets for {} landmark sets",
            centroids.len(),
            landmarks.len()
        )));
    }
    let p = centroids[0].len();
    let k = landmarks[0].len();
    if centroids.iter().any(|c| c.len() != p) || landmarks.iter().any(|l| l.len() != k) {
        return Err(Error::Evaluation("inconsistent capsule or landmark counts".into()));
    }
    let mut fill = vec![[0.0f64; 2]; p];
    let mut seen = vec![0usize; p];
    for c in centroids {
        for (j, q) in c.iter().enumerate() {
            if let Some(q) = q {
                fill[j][0] += q[0] as f64;
                fill[j][1] += q[1] as f64;
                seen[j] += 1;
            }
        }
    }
    for (f, &n) in fill.iter_mut().zip(&seen) {
        if n > 0 {
            f[0] /= n as f64;
            f[1] /= n as f64;
        }
    }

    let active: Vec<bool> = seen
        .iter()
        .map(|&n| (centroids.len() - n) as f64 <= COLLAPSE_FRACTION * centroids.len() as f64)
        .collect();
    let dropped: Vec<usize> = (0..p).filter(|&j| !active[j]).collect();
    if !dropped.is_empty() {
        log::warn!("capsules {dropped:?} are mostly empty and left out of the linear map");
    }
    let complete: Vec<usize> = (0..centroids.len())
        .filter(|&i| centroids[i].iter().zip(&active).all(|(c, &a)| !a || c.is_some()))
        .collect();
    let excluded = centroids.len() - complete.len();
    let cols = 2 * (p - dropped.len()) + 1;
    if complete.len() < cols {
        return Err(Error::Evaluation(format!(
            "{} complete training samples, the fit needs at least {cols}",
            complete.len()
        )));
    }
    if excluded > 0 {
        log::info!("{excluded} training samples with empty segments left out of the linear fit");
    }
    let rows: Vec<Vec<f64>> = complete.iter().map(|&i| feature_row(&centroids[i], &fill, &active).0).collect();
    let x = DMatrix::from_fn(complete.len(), cols, |r, c| rows[r][c]);
    let y = DMatrix::from_fn(complete.len(), 2 * k, |r, c| landmarks[complete[r]][c / 2][c % 2] as f64);

    let svd = x.clone().svd(true, true);
    let tol = svd.singular_values.max() * complete.len().max(cols) as f64 * f64::EPSILON;
    let rank = svd.rank(tol);
    let (solution, regularized) = if rank == cols {
        let w = svd.solve(&y, tol).map_err(|e| Error::Evaluation(e.to_string()))?;
        (w, false)
    } else {
        log::warn!("linear map design matrix has rank {rank} of {cols}; adding ridge {RIDGE}");
        let xt = x.transpose();
        let a = &xt * &x + DMatrix::identity(cols, cols) * RIDGE;
        let w = a
            .cholesky()
            .ok_or_else(|| Error::Evaluation("ridge system is not positive definite".into()))?
            .solve(&(xt * y));
        (w, true)
    };
    Ok(LinearMap {
        weights: solution.transpose(),
        fill,
        active,
        excluded,
        regularized,
    })
}

impl LinearMap {
    pub fn num_capsules(&self) -> usize {
        self.fill.len()
    }

    /// Predicted landmarks and the number of empty segments that were filled.
    pub fn predict(&self, c: &[Option<[f32; 2]>]) -> Result<(Landmarks, usize)> {
        if c.len() != self.num_capsules() {
            return Err(Error::Evaluation(format!(
                "{} centroids for a map over {} capsules",
                c.len(),
                self.num_capsules()
            )));
        }
        let (row, imputed) = feature_row(c, &self.fill, &self.active);
        let out = &self.weights * nalgebra::DVector::from_vec(row);
        let marks = out.as_slice().chunks(2).map(|q| [q[0] as f32, q[1] as f32]).collect();
        Ok((marks, imputed))
    }
}

/// `NME_L` in percent over the test samples.
pub fn nme_l(centroids: &[Vec<Option<[f32; 2]>>], landmarks: &[Landmarks], map: &LinearMap) -> Result<f64> {
    if centroids.len() != landmarks.len() {
        return Err(Error::Evaluation("test centroids and landmarks differ in count".into()));
    }
    let preds = centroids
        .iter()
        .map(|c| map.predict(c).map(|(p, _)| p))
        .collect::<Result<Vec<_>>>()?;
    mean_nme(&preds, landmarks)
}

/// Architecture tag of the `NME_DL` predictor; bump when it changes.
pub const DL_ARCHITECTURE: &str = "masks+moments/conv32s2/conv32s2/conv32s2/sumpool/linear v1";
const DL_WIDTHS: [usize; 3] = [32, 32, 32];
/// Minimum training set for `NME_DL`.
pub const DL_MIN_TRAIN: usize = 100;

/// Training schedule of the `NME_DL` predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct DlOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl DlOptions {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            learning_rate: 1e-4,
            seed: cfg.seed,
        }
    }
}

/// Masks of labels `0..M`, then the same masks weighted by the normalized
/// column and by the normalized row: `[N, 3M, H, W]`. Uncovered pixels are
/// the complement of the masks and get no plane.
fn dl_inputs(maps: &[&SegmentationMap]) -> Tensor {
    let (m, n) = (maps[0].num_capsules, maps[0].size);
    let hw = n * n;
    let ch = 3 * m;
    let mut data = vec![0.0f32; maps.len() * ch * hw];
    for (b, seg) in maps.iter().enumerate() {
        let base = b * ch * hw;
        for (i, &l) in seg.labels.iter().enumerate() {
            let l = l as usize;
            if l < m {
                data[base + l * hw + i] = 1.0;
                data[base + (m + l) * hw + i] = (i % n) as f32 / n as f32;
                data[base + (2 * m + l) * hw + i] = (i / n) as f32 / n as f32;
            }
        }
    }
    Tensor::new(&[maps.len(), ch, n, n], data)
}

fn dl_targets(marks: &[&Landmarks], size: usize) -> Tensor {
    let k = marks[0].len();
    let data = marks.iter().flat_map(|l| l.iter().flat_map(|p| p.map(|v| v / size as f32))).collect();
    Tensor::new(&[marks.len(), 2 * k], data)
}

/// Convolutions start positive with a separable tent profile, so the pooled
/// features begin as linear mixtures of per-segment moments. The head is
/// solved in closed form before and after gradient training.
fn dl_init(channels: usize, k: usize, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let mut c_in = channels;
    for (i, &c) in DL_WIDTHS.iter().enumerate() {
        // Under stride 2 the tent kernel gives every input pixel the same
        // total weight, so the pooled sum is exactly linear in the input.
        const TENT: [f32; 3] = [0.5, 1.0, 0.5];
        let scale = 2.0 / c_in as f32;
        let mut w = Vec::with_capacity(c * c_in * 9);
        for _ in 0..c * c_in {
            let a: f32 = rng.random_range(0.0..scale);
            w.extend((0..9).map(|t| a * TENT[t / 3] * TENT[t % 3]));
        }
        p.insert(format!("conv{i}.w"), Tensor::new(&[c, c_in, 3, 3], w)).unwrap();
        p.insert(format!("conv{i}.b"), Tensor::zeros(&[c])).unwrap();
        c_in = c;
    }
    p.insert("head.w", Tensor::zeros(&[c_in, 2 * k])).unwrap();
    p.insert("head.b", Tensor::full(&[2 * k], 0.5)).unwrap();
    p
}

/// Sum-pooled features of the last stage, `[B, C]`.
fn dl_pooled(g: &mut Graph, p: &igc_tensor::ParamVars, x: Var) -> Var {
    let mut h = x;
    for i in 0..DL_WIDTHS.len() {
        h = g.conv2d(h, p.get(&format!("conv{i}.w")), p.get(&format!("conv{i}.b")), 2, 1);
        h = g.relu(h);
    }
    let s = g.shape(h).to_vec();
    let flat = g.reshape(h, &[s[0], s[1], s[2] * s[3]]);
    let pooled = g.sum_axis(flat, 2);
    g.reshape(pooled, &[s[0], s[1]])
}

fn dl_forward(g: &mut Graph, p: &igc_tensor::ParamVars, x: Var) -> Var {
    let pooled = dl_pooled(g, p, x);
    g.linear(pooled, p.get("head.w"), p.get("head.b"))
}

fn dl_features(params: &ParamStore, maps: &[SegmentationMap]) -> DMatrix<f64> {
    let c = DL_WIDTHS[DL_WIDTHS.len() - 1];
    let mut rows = Vec::with_capacity(maps.len() * c);
    for chunk in maps.chunks(64) {
        let refs: Vec<&SegmentationMap> = chunk.iter().collect();
        let mut g = Graph::new();
        let pv = params.register(&mut g, false);
        let x = g.constant(dl_inputs(&refs));
        let f = dl_pooled(&mut g, &pv, x);
        rows.extend(g.value(f).data().iter().map(|&v| v as f64));
    }
    DMatrix::from_row_slice(maps.len(), c, &rows)
}

/// Solve the linear head in closed form on standardized features by a
/// truncated SVD least squares.
fn dl_refit_head(params: &mut ParamStore, maps: &[SegmentationMap], marks: &[Landmarks], size: usize) -> Result<()> {
    let f = dl_features(params, maps);
    let (rows, c) = f.shape();
    let mean: Vec<f64> = (0..c).map(|j| f.column(j).mean()).collect();
    let scale: Vec<f64> = (0..c)
        .map(|j| {
            let sd = f.column(j).variance().sqrt();
            if sd > 1e-12 { sd } else { 1.0 }
        })
        .collect();
    let x = DMatrix::from_fn(rows, c + 1, |r, j| if j == c { 1.0 } else { (f[(r, j)] - mean[j]) / scale[j] });
    let k2 = 2 * marks[0].len();
    let y = DMatrix::from_fn(rows, k2, |r, j| (marks[r][j / 2][j % 2] / size as f32) as f64);
    let svd = x.svd(true, true);
    let tol = svd.singular_values.max() * 1e-6;
    let beta = svd.solve(&y, tol).map_err(|e| Error::Evaluation(e.to_string()))?;
    let mut w = vec![0.0f32; c * k2];
    let mut b = vec![0.0f32; k2];
    for o in 0..k2 {
        let mut bias = beta[(c, o)];
        for j in 0..c {
            let wj = beta[(j, o)] / scale[j];
            w[j * k2 + o] = wj as f32;
            bias -= wj * mean[j];
        }
        b[o] = bias as f32;
    }
    *params.get_mut("head.w").expect("head weights") = Tensor::new(&[c, k2], w);
    *params.get_mut("head.b").expect("head bias") = Tensor::new(&[k2], b);
    Ok(())
}

/// Number of scalars in the `NME_DL` predictor for `M` capsules and `K`
/// landmarks.
pub fn dl_parameter_count(num_capsules: usize, num_landmarks: usize) -> usize {
    dl_init(3 * num_capsules, num_landmarks, 0).num_scalars()
}

/// Train the shallow predictor on the training maps and report `NME_DL` in
/// percent on the test maps.
pub fn nme_dl(
    train_maps: &[SegmentationMap],
    train_marks: &[Landmarks],
    test_maps: &[SegmentationMap],
    test_marks: &[Landmarks],
    opts: &DlOptions,
) -> Result<f64> {
    if train_maps.len() < DL_MIN_TRAIN {
        return Err(Error::Evaluation(format!(
            "NME_DL needs at least {DL_MIN_TRAIN} training maps, got {}",
            train_maps.len()
        )));
    }
    if train_maps.len() != train_marks.len() || test_maps.len() != test_marks.len() || test_maps.is_empty() {
        return Err(Error::Evaluation("maps and landmarks differ in count".into()));
    }
    let (m, n, k) = (train_maps[0].num_capsules, train_maps[0].size, train_marks[0].len());
    let consistent = |maps: &[SegmentationMap]| maps.iter().all(|s| s.num_capsules == m && s.size == n);
    if !consistent(train_maps) || !consistent(test_maps) {
        return Err(Error::Evaluation("segment maps differ in size or capsule count".into()));
    }

    if n % (1 << DL_WIDTHS.len()) != 0 {
        return Err(Error::Evaluation(format!("map size {n} is not divisible by 8")));
    }
    let mut params = dl_init(3 * m, k, opts.seed);
    dl_refit_head(&mut params, train_maps, train_marks, n)?;
    let mut adam = Adam::new(&params, opts.learning_rate, 0.9, 0.999);
    let bs = opts.batch_size.min(train_maps.len());
    let per_epoch = train_maps.len() / bs;
    let mut order = Vec::new();
    for step in 0..opts.steps {
        let slot = step % per_epoch;
        if slot == 0 {
            order = epoch_order(train_maps.len(), opts.seed, (step / per_epoch) as u64);
        }
        let idx = &order[slot * bs..(slot + 1) * bs];
        let maps: Vec<&SegmentationMap> = idx.iter().map(|&i| &train_maps[i]).collect();
        let marks: Vec<&Landmarks> = idx.iter().map(|&i| &train_marks[i]).collect();
        let mut g = Graph::new();
        let pv = params.register(&mut g, true);
        let x = g.constant(dl_inputs(&maps));
        let y = g.constant(dl_targets(&marks, n));
        let pred = dl_forward(&mut g, &pv, x);
        let diff = g.sub(pred, y);
        let sq = g.square(diff);
        let loss = g.mean(sq);
        let grads = g.backward(loss);
        // Anneal to a tenth of the rate over the last third of the schedule.
        adam.lr = opts.learning_rate * if 3 * step >= 2 * opts.steps { 0.1 } else { 1.0 };
        let grads = pv.collect_grads(&grads, &params);
        adam.update(&mut params, &grads);
    }
    dl_refit_head(&mut params, train_maps, train_marks, n)?;

    let mut preds = Vec::with_capacity(test_maps.len());
    for chunk in test_maps.chunks(64) {
        let maps: Vec<&SegmentationMap> = chunk.iter().collect();
        let mut g = Graph::new();
        let pv = params.register(&mut g, false);
        let x = g.constant(dl_inputs(&maps));
        let out = dl_forward(&mut g, &pv, x);
        for row in g.value(out).data().chunks(2 * k) {
            preds.push(row.chunks(2).map(|q| [q[0] * n as f32, q[1] * n as f32]).collect());
        }
    }
    mean_nme(&preds, test_marks)
}

/// Label maps for every image, in batches of the configured size.
pub fn segment(params: &ModelParameters, cfg: &Config, data: &InMemory) -> Result<Vec<SegmentationMap>> {
    let mut maps = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(cfg.batch_size) {
        let out = forward(&data.batch(chunk)?, params, cfg)?;
        maps.extend((0..chunk.len()).map(|b| out.render.label_map(b)));
    }
    Ok(maps)
}

/// Foreground centroids: the background capsule and uncovered pixels are
/// not parts.
fn part_centroids(seg: &SegmentationMap) -> Vec<Option<[f32; 2]>> {
    let mut c = centroids(&seg.for_evaluation());
    c.truncate(seg.num_capsules - 1);
    c
}

/// A capsule whose segment is empty in more than this fraction of samples
/// counts as collapsed.
pub const COLLAPSE_FRACTION: f64 = 0.1;

/// Segmentation metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub nme_l: f64,
    /// Absent when the training split is too small for the predictor.
    pub nme_dl: Option<f64>,
    pub nme_dl_architecture: String,
    /// Mean fraction of test pixels per label `0..=M`; the last entry is
    /// pixels without geometry.
    pub capsule_areas: Vec<f64>,
    /// Test samples with an empty segment, per foreground capsule.
    pub empty_segments: Vec<usize>,
    /// Foreground capsules whose segment is empty in more than 10% of test
    /// samples.
    pub collapsed: Vec<usize>,
    /// Foreground capsules left out of the linear map as mostly empty on the
    /// training split.
    pub unmapped: Vec<usize>,
    /// Training samples left out of the linear fit.
    pub excluded_train_samples: usize,
    pub linear_map_regularized: bool,
    pub num_train: usize,
    pub num_test: usize,
    pub config_hash: String,
}

impl SegmentationReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Score the model's parts on the manifest's train and test splits.
/// `NME_DL` is skipped with a warning below [`DL_MIN_TRAIN`] training images.
pub fn evaluate_segmentation(
    params: &ModelParameters,
    cfg: &Config,
    manifest: &DatasetManifest,
) -> Result<SegmentationReport> {
    let load = |split| -> Result<(Vec<SegmentationMap>, Vec<Landmarks>)> {
        let data = InMemory::load(manifest, split, cfg.image_size)?;
        let marks = data
            .landmarks
            .clone()
            .ok_or_else(|| Error::Evaluation("the dataset has no landmarks".into()))?;
        if data.is_empty() {
            return Err(Error::Evaluation(format!("the {split:?} split is empty")));
        }
        Ok((segment(params, cfg, &data)?, marks))
    };
    let (train_maps, train_marks) = load(Split::Train)?;
    let (test_maps, test_marks) = load(Split::Test)?;

    let train_c: Vec<_> = train_maps.iter().map(part_centroids).collect();
    let test_c: Vec<_> = test_maps.iter().map(part_centroids).collect();
    let map = fit_linear_map(&train_c, &train_marks)?;
    let nme_l = nme_l(&test_c, &test_marks, &map)?;

    let nme_dl = if train_maps.len() >= DL_MIN_TRAIN {
        let eval_maps = |v: &[SegmentationMap]| v.iter().map(SegmentationMap::for_evaluation).collect::<Vec<_>>();
        Some(nme_dl(
            &eval_maps(&train_maps),
            &train_marks,
            &eval_maps(&test_maps),
            &test_marks,
            &DlOptions::from_config(cfg),
        )?)
    } else {
        log::warn!(
            "skipping NME_DL: {} training images, need {DL_MIN_TRAIN}",
            train_maps.len()
        );
        None
    };

    let m = cfg.num_capsules;
    let mut areas = vec![0.0f64; m + 1];
    for seg in &test_maps {
        for &l in &seg.labels {
            areas[l as usize] += 1.0;
        }
    }
    let pixels = (test_maps.len() * cfg.image_size * cfg.image_size) as f64;
    areas.iter_mut().for_each(|a| *a /= pixels);
    let empty_segments: Vec<usize> = (0..m - 1)
        .map(|j| test_c.iter().filter(|c| c[j].is_none()).count())
        .collect();
    let collapsed = empty_segments
        .iter()
        .enumerate()
        .filter(|(_, &e)| e as f64 > COLLAPSE_FRACTION * test_maps.len() as f64)
        .map(|(j, _)| j)
        .collect();
    Ok(SegmentationReport {
        nme_l,
        nme_dl,
        nme_dl_architecture: DL_ARCHITECTURE.to_string(),
        capsule_areas: areas,
        empty_segments,
        collapsed,
        unmapped: (0..m - 1).filter(|&j| !map.active[j]).collect(),
        excluded_train_samples: map.excluded,
        linear_map_regularized: map.regularized,
        num_train: train_maps.len(),
        num_test: test_maps.len(),
        config_hash: cfg.hash(),
    })
}

/// Distinct colors for labels `0..M`; uncovered pixels are black.
pub fn label_palette(num_capsules: usize) -> Vec<[u8; 3]> {
    const BASE: [[u8; 3]; 8] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
    ];
    let mut p: Vec<[u8; 3]> = (0..num_capsules)
        .map(|i| {
            let c = BASE[i % BASE.len()];
            // Later cycles are darker so colors stay distinct.
            let k = 1.0 / (1 + i / BASE.len()) as f32;
            c.map(|v| (v as f32 * k) as u8)
        })
        .collect();
    p.push([0, 0, 0]);
    p
}

/// Write a label map as an indexed PNG: pixel values are the labels and the
/// palette colors them.
pub fn write_indexed_labels(seg: &SegmentationMap, path: &Path) -> Result<()> {
    let err = |reason: String| Error::Image {
        path: path.display().to_string(),
        reason,
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), seg.size as u32, seg.size as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(label_palette(seg.num_capsules).concat());
    let mut w = enc.write_header().map_err(|e| err(e.to_string()))?;
    w.write_image_data(&seg.labels).map_err(|e| err(e.to_string()))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn gray(map: &Tensor, lo: f32, hi: f32) -> RgbImage {
    let n = map.shape()[map.ndim() - 1] as u32;
    let span = (hi - lo).max(1e-12);
    RgbImage::from_fn(n, n, |x, y| {
        let v = to_u8((map.data()[(y * n + x) as usize] - lo) / span);
        Rgb([v, v, v])
    })
}

/// Depth as grayscale, normalized to its own range with near = bright.
fn depth_image(depth: &Tensor) -> RgbImage {
    let lo = depth.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = depth.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    gray(&depth.map(|d| hi + lo - d), lo, hi)
}

/// `[3, H, W]` to RGB.
fn color_image(t: &Tensor) -> RgbImage {
    let n = t.shape()[2];
    let hw = n * n;
    let d = t.data();
    RgbImage::from_fn(n as u32, n as u32, |x, y| {
        let i = y as usize * n + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[hw + i]), to_u8(d[2 * hw + i])])
    })
}

fn label_image(seg: &SegmentationMap) -> RgbImage {
    let pal = label_palette(seg.num_capsules);
    let n = seg.size as u32;
    RgbImage::from_fn(n, n, |x, y| Rgb(pal[seg.labels[(y * n + x) as usize] as usize]))
}

/// Gap between composite cells, in pixels.
pub const GRID_PAD: u32 = 2;

/// Composite size for `M` capsules at `n`×`n`: three part rows (depth,
/// albedo, visibility) of `M` cells and one object row of five cells.
pub fn composite_size(num_capsules: usize, n: usize) -> (u32, u32) {
    let cols = num_capsules.max(5) as u32;
    let cell = n as u32 + GRID_PAD;
    (cols * cell + GRID_PAD, 4 * cell + GRID_PAD)
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Write the hierarchy figures for one preprocessed image `[3, H, W]`:
/// per capsule depth, albedo and visibility, then object depth and albedo,
/// both renders, the label map, and a composite grid. Returns the paths in
/// that order.
pub fn export_hierarchy_image(
    params: &ModelParameters,
    cfg: &Config,
    image: &Tensor,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let n = cfg.image_size;
    let batch = ImageBatch::new(Tensor::stack(std::slice::from_ref(image)))?;
    let out: ForwardOutput = forward(&batch, params, cfg)?;
    let obj = &out.objects[0];
    let m = cfg.num_capsules;

    let mut cells: Vec<(String, RgbImage)> = Vec::new();
    for (j, cap) in out.parts[0].iter().enumerate() {
        cells.push((format!("capsule{j}_depth.png"), depth_image(&cap.depth)));
    }
    for (j, cap) in out.parts[0].iter().enumerate() {
        cells.push((format!("capsule{j}_albedo.png"), color_image(&cap.albedo)));
    }
    for j in 0..m {
        cells.push((format!("capsule{j}_visibility.png"), gray(&obj.visibility.index0(j), 0.0, 1.0)));
    }
    cells.push(("object_depth.png".into(), depth_image(&obj.depth)));
    cells.push(("object_albedo.png".into(), color_image(&obj.albedo)));
    cells.push(("render.png".into(), color_image(&out.render.image.index0(0))));
    cells.push(("render_flip.png".into(), color_image(&out.render.image_flip.index0(0))));
    let seg = out.render.label_map(0);

    let (w, h) = composite_size(m, n);
    let mut grid = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let place = |grid: &mut RgbImage, img: &RgbImage, row: u32, col: u32| {
        let cell = n as u32 + GRID_PAD;
        image::imageops::replace(grid, img, (GRID_PAD + col * cell) as i64, (GRID_PAD + row * cell) as i64);
    };
    for (i, (_, img)) in cells.iter().enumerate() {
        let (row, col) = if i < 3 * m { (i / m, i % m) } else { (3, i - 3 * m) };
        place(&mut grid, img, row as u32, col as u32);
    }
    place(&mut grid, &label_image(&seg), 3, 4);

    let mut paths = Vec::with_capacity(3 * m + 6);
    for (name, img) in &cells {
        let p = out_dir.join(name);
        save(img, &p)?;
        paths.push(p);
    }
    let labels = out_dir.join("labels.png");
    write_indexed_labels(&seg, &labels)?;
    paths.push(labels);
    let composite = out_dir.join("hierarchy.png");
    save(&grid, &composite)?;
    paths.push(composite);
    Ok(paths)
}

/// Load a checkpoint and an image file and write the hierarchy figures.
pub fn export_hierarchy(ckpt: &Path, image: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let ck = load_checkpoint(ckpt)?;
    let (t, _) = preprocess(&open_image(image)?, None, ck.config.image_size)?;
    export_hierarchy_image(&ck.state.params, &ck.config, &t, out_dir)
}

/// Read back a label PNG written by [`write_indexed_labels`].
pub fn read_indexed_labels(path: &Path) -> Result<GrayImage> {
    let err = |reason: String| Error::Image {
        path: path.display().to_string(),
        reason,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(err(format!("expected 8-bit indexed PNG, got {:?}", info.color_type)));
    }
    buf.truncate(info.buffer_size());
    GrayImage::from_raw(info.width, info.height, buf).ok_or_else(|| err("bad dimensions".into()))
}
