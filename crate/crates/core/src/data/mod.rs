//! Dataset ingestion, preprocessing, deterministic batching and checkpoints.

mod checkpoint;
pub mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use igc_tensor::Tensor;
use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::types::ImageBatch;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Landmark coordinates `(x, y)` in pixels.
pub type Landmarks = Vec<[f32; 2]>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Path relative to the dataset root, with `/` separators.
    pub path: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<Landmarks>,
    /// Optional square crop `(x, y, side)` replacing the center crop.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<[u32; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    dataset: String,
    root: String,
    records: usize,
}

/// Ordered image records of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
}

/// A file skipped during ingestion.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Reject {
    pub path: String,
    pub reason: String,
}

impl DatasetManifest {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn has_landmarks(&self) -> bool {
        self.records.iter().all(|r| r.landmarks.is_some())
    }

    /// JSON lines: a header followed by one record per line.
    pub fn to_jsonl(&self) -> String {
        let header = ManifestHeader {
            dataset: self.name.clone(),
            root: self.root.display().to_string(),
            records: self.records.len(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::InvalidInput("empty manifest".into()))?,
        )?;
        let records = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ImageRecord>, _>>()?;
        if records.len() != header.records {
            return Err(Error::InvalidInput(format!(
                "manifest header announces {} records, found {}",
                header.records,
                records.len()
            )));
        }
        Ok(Self {
            name: header.dataset,
            root: PathBuf::from(header.root),
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_jsonl(&text)
    }
}

fn collect_images(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_images(root, &path, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        {
            let rel = path.strip_prefix(root).expect("walk stays under root");
            let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.push(rel.join("/"));
        }
    }
    Ok(())
}

/// Parse a landmark CSV: `path, x1, y1, ..., xK, yK`, optional header row
/// starting with `path`.
pub fn read_landmarks(path: &Path) -> Result<Vec<(usize, String, Landmarks)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Landmarks {
            row: 0,
            reason: e.to_string(),
        })?;
    let mut rows = Vec::new();
    let mut k = None;
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Landmarks {
            row,
            reason: e.to_string(),
        })?;
        if row == 1 && rec.get(0).is_some_and(|f| f.eq_ignore_ascii_case("path")) {
            continue;
        }
        let bad = |reason: String| Error::Landmarks { row, reason };
        let name = rec.get(0).filter(|s| !s.is_empty()).ok_or_else(|| bad("missing path".into()))?;
        let coords = rec
            .iter()
            .skip(1)
            .map(|f| f.parse::<f32>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| bad("non-numeric coordinate".into()))?;
        if coords.is_empty() || coords.len() % 2 != 0 {
            return Err(bad(format!("expected x/y pairs, got {} values", coords.len())));
        }
        let count = coords.len() / 2;
        match k {
            None => k = Some(count),
            Some(k) if k != count => return Err(bad(format!("{count} landmarks, earlier rows have {k}"))),
            _ => {}
        }
        rows.push((row, name.to_string(), coords.chunks_exact(2).map(|c| [c[0], c[1]]).collect()));
    }
    Ok(rows)
}

/// Deterministic split assignment: shuffle indices with `seed`, then take
/// the train and validation fractions in order.
pub fn assign_splits(n: usize, cfg: &Config) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_train = (n as f32 * cfg.train_fraction).round() as usize;
    let n_val = ((n as f32 * cfg.val_fraction).round() as usize).min(n - n_train);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Scan `root` for images, attach landmarks and assign splits.
///
/// Undecodable images are skipped and returned as rejects. A landmark row
/// naming an image that is not part of the dataset is an error.
pub fn ingest(root: &Path, landmarks: Option<&Path>, cfg: &Config) -> Result<(DatasetManifest, Vec<Reject>)> {
    let mut paths = Vec::new();
    collect_images(root, root, &mut paths)?;
    paths.sort();

    let mut rejects = Vec::new();
    let mut kept = Vec::new();
    for p in paths {
        match image::ImageReader::open(root.join(&p))
            .map_err(|e| e.to_string())
            .and_then(|r| r.with_guessed_format().map_err(|e| e.to_string()))
            .and_then(|r| r.into_dimensions().map_err(|e| e.to_string()))
        {
            Ok(_) => kept.push(p),
            Err(reason) => {
                log::warn!("skipping unreadable image {p}: {reason}");
                rejects.push(Reject { path: p, reason });
            }
        }
    }

    let mut marks: HashMap<String, Landmarks> = HashMap::new();
    if let Some(file) = landmarks {
        let known: std::collections::HashSet<&str> = kept.iter().map(String::as_str).collect();
        let rejected: std::collections::HashSet<&str> = rejects.iter().map(|r| r.path.as_str()).collect();
        for (row, name, pts) in read_landmarks(file)? {
            if rejected.contains(name.as_str()) {
                continue;
            }
            if !known.contains(name.as_str()) {
                return Err(Error::Landmarks {
                    row,
                    reason: format!("image `{name}` not found under {}", root.display()),
                });
            }
            marks.insert(name, pts);
        }
    }

    let splits = assign_splits(kept.len(), cfg);
    let records = kept
        .into_iter()
        .zip(splits)
        .map(|(path, split)| ImageRecord {
            landmarks: marks.remove(&path),
            path,
            split,
            crop: None,
        })
        .collect();
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok((
        DatasetManifest {
            name,
            root: root.to_path_buf(),
            records,
        },
        rejects,
    ))
}

/// Write the rejects report as JSON.
pub fn write_rejects(rejects: &[Reject], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::to_writer_pretty(&mut f, rejects)?;
    f.write_all(b"\n").map_err(|e| Error::io(path.display().to_string(), e))
}

/// Square crop box `(x, y, side)` centered in a `w x h` image.
pub fn center_crop(w: u32, h: u32) -> [u32; 3] {
    let side = w.min(h);
    [(w - side) / 2, (h - side) / 2, side]
}

/// Map a point through crop then resize to `size`.
pub fn transform_point(p: [f32; 2], crop: [u32; 3], size: usize) -> [f32; 2] {
    let s = size as f32 / crop[2] as f32;
    [(p[0] - crop[0] as f32) * s, (p[1] - crop[1] as f32) * s]
}

/// Crop and resize an image to `size x size`, returning `[3, size, size]`
/// in `[0, 1]` and the crop used.
pub fn preprocess(img: &RgbImage, crop: Option<[u32; 3]>, size: usize) -> Result<(Tensor, [u32; 3])> {
    let (w, h) = img.dimensions();
    let crop = crop.unwrap_or_else(|| center_crop(w, h));
    if crop[2] == 0 || crop[0] + crop[2] > w || crop[1] + crop[2] > h {
        return Err(Error::InvalidInput(format!(
            "crop {crop:?} does not fit a {w}x{h} image"
        )));
    }
    let cropped = image::imageops::crop_imm(img, crop[0], crop[1], crop[2], crop[2]).to_image();
    let resized = if crop[2] as usize == size {
        cropped
    } else {
        image::imageops::resize(&cropped, size as u32, size as u32, FilterType::Triangle)
    };
    let mut data = vec![0.0f32; 3 * size * size];
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            data[(c * size + y as usize) * size + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok((Tensor::new(&[3, size, size], data), crop))
}

pub fn open_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

/// A loaded batch and its landmarks in the resized frame.
pub struct LoadedBatch {
    pub images: ImageBatch,
    pub landmarks: Option<Vec<Landmarks>>,
}

/// Load and preprocess the records at `indices`.
pub fn load_batch(manifest: &DatasetManifest, indices: &[usize], size: usize) -> Result<LoadedBatch> {
    if indices.is_empty() {
        return Err(Error::InvalidInput("empty index list".into()));
    }
    let mut images = Vec::with_capacity(indices.len());
    let mut marks = Vec::with_capacity(indices.len());
    for &i in indices {
        let rec = manifest.records.get(i).ok_or_else(|| {
            Error::InvalidInput(format!("index {i} out of range for {} records", manifest.records.len()))
        })?;
        let img = open_image(&manifest.root.join(&rec.path))?;
        let (t, crop) = preprocess(&img, rec.crop, size)?;
        images.push(t);
        marks.push(
            rec.landmarks
                .as_ref()
                .map(|l| l.iter().map(|&p| transform_point(p, crop, size)).collect::<Landmarks>()),
        );
    }
    let landmarks = marks.into_iter().collect::<Option<Vec<_>>>();
    Ok(LoadedBatch {
        images: ImageBatch::new(Tensor::stack(&images))?,
        landmarks,
    })
}

/// Images of one split held in memory, `[N, 3, H, W]`.
#[derive(Clone, Debug)]
pub struct InMemory {
    pub images: Tensor,
    pub landmarks: Option<Vec<Landmarks>>,
}

impl InMemory {
    pub fn load(manifest: &DatasetManifest, split: Split, size: usize) -> Result<Self> {
        let idx = manifest.indices(split);
        if idx.is_empty() {
            return Ok(Self {
                images: Tensor::zeros(&[0, 3, size, size]),
                landmarks: manifest.has_landmarks().then(Vec::new),
            });
        }
        let b = load_batch(manifest, &idx, size)?;
        Ok(Self {
            images: b.images.into_pixels(),
            landmarks: b.landmarks,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        ImageBatch::new(Tensor::stack(&indices.iter().map(|&i| self.images.index0(i)).collect::<Vec<_>>()))
    }
}

/// Sample order for one epoch, fixed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Full batches of one epoch; a trailing partial batch is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    epoch_order(n, seed, epoch)
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}
