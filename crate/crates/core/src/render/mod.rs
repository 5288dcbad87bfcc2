//! Depth-based assembly of part capsules and differentiable rendering of the
//! assembled object.
//!
//! Rendering unprojects the canonical depth map through a pinhole camera,
//! shades it with Lambertian lighting, applies the object pose about the
//! object center at unit distance, projects back and rasterizes the pixel-grid
//! mesh with a z-buffer.

mod raster;

use std::path::Path;

use igc_tensor::{Graph, Tensor, Var};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::types::{GraphicsCapsule, Lighting, ObjectCapsule, Pose, SegmentationMap};

pub use raster::{rasterize, Raster};

/// Pinhole camera looking down `+z`, image plane `size x size` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub size: usize,
    pub focal: f32,
}

impl Camera {
    pub fn new(size: usize, fov_degrees: f32) -> Self {
        let half = (fov_degrees.to_radians() / 2.0).tan();
        Self {
            size,
            focal: size as f32 / 2.0 / half,
        }
    }

    pub fn from_config(cfg: &Config) -> Self {
        Self::new(cfg.image_size, cfg.fov_degrees)
    }

    /// Ray slopes `(x/z, y/z)` through pixel centers, each `[H, W]`.
    fn ray_grid(&self) -> (Tensor, Tensor) {
        let n = self.size;
        let c = n as f32 / 2.0;
        let gx = (0..n * n).map(|i| ((i % n) as f32 + 0.5 - c) / self.focal).collect();
        let gy = (0..n * n).map(|i| ((i / n) as f32 + 0.5 - c) / self.focal).collect();
        (Tensor::new(&[n, n], gx), Tensor::new(&[n, n], gy))
    }
}

/// Front-most capsule per pixel for `M` stacked depth maps of `hw` pixels.
/// Ties go to the lowest index.
pub fn front_labels(depths: &[f32], m: usize, hw: usize) -> Vec<u8> {
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..m {
                if depths[k * hw + p] < depths[best * hw + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// One-hot visibility `[B, M, H, W]` from front labels.
fn one_hot(labels: &[u8], b: usize, m: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut v = vec![0.0f32; b * m * hw];
    for s in 0..b {
        for p in 0..hw {
            v[(s * m + labels[s * hw + p] as usize) * hw + p] = 1.0;
        }
    }
    Tensor::new(&[b, m, h, w], v)
}

/// Assembled object on the graph.
pub struct Assembled {
    /// `[B, H, W]`
    pub depth: Var,
    /// `[B, 3, H, W]`
    pub albedo: Var,
    /// `[B, 6]`, mean of the part poses.
    pub pose: Var,
    /// `[B, M, H, W]`, softmax of `-depth / T_vis` over capsules.
    pub soft_visibility: Var,
    /// `[B, M, H, W]` hard one-hot visibility.
    pub visibility: Tensor,
    /// Front-most capsule per canonical pixel, `B * H * W`.
    pub labels: Vec<u8>,
}

/// Assemble part depths `[B, M, H, W]`, albedos `[B, M, 3, H, W]` and poses
/// `[B, M, 6]` by per-pixel minimum depth.
///
/// The hard visibility enters as a constant; depth and albedo gradients reach
/// the winning part only.
pub fn assemble_graph(
    g: &mut Graph,
    depth: Var,
    albedo: Var,
    pose: Var,
    vis_temperature: f32,
) -> Result<Assembled> {
    let ds = g.shape(depth).to_vec();
    if ds.len() != 4 {
        return Err(Error::Shape(format!("part depths must be [B, M, H, W], got {ds:?}")));
    }
    let (b, m, h, w) = (ds[0], ds[1], ds[2], ds[3]);
    if g.shape(albedo) != [b, m, 3, h, w] || g.shape(pose) != [b, m, 6] {
        return Err(Error::Shape(format!(
            "parts disagree: depth {ds:?}, albedo {:?}, pose {:?}",
            g.shape(albedo),
            g.shape(pose)
        )));
    }
    if !g.value(depth).is_finite() {
        return Err(Error::InvalidInput("non-finite part depth".into()));
    }
    let hw = h * w;
    let labels: Vec<u8> = g
        .value(depth)
        .data()
        .chunks_exact(m * hw)
        .flat_map(|d| front_labels(d, m, hw))
        .collect();
    let visibility = one_hot(&labels, b, m, h, w);

    let vis = g.constant(visibility.clone());
    let picked = g.mul(vis, depth);
    let d_o = g.sum_axis(picked, 1);
    let d_o = g.reshape(d_o, &[b, h, w]);

    let vis5 = g.reshape(vis, &[b, m, 1, h, w]);
    let picked = g.mul(vis5, albedo);
    let a_o = g.sum_axis(picked, 1);
    let a_o = g.reshape(a_o, &[b, 3, h, w]);

    let p_o = g.mean_axis(pose, 1);
    let p_o = g.reshape(p_o, &[b, 6]);

    let logits = g.scale(depth, -1.0 / vis_temperature);
    let soft = g.softmax(logits, 1);
    Ok(Assembled {
        depth: d_o,
        albedo: a_o,
        pose: p_o,
        soft_visibility: soft,
        visibility,
        labels,
    })
}

/// Assemble a single object from its parts.
pub fn assemble(parts: &[GraphicsCapsule], vis_temperature: f32) -> Result<ObjectCapsule> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidInput("no parts to assemble".into()))?;
    let hw_shape = first.depth.shape().to_vec();
    if hw_shape.len() != 2 {
        return Err(Error::Shape(format!("part depth must be [H, W], got {hw_shape:?}")));
    }
    for p in parts {
        if p.depth.shape() != hw_shape.as_slice() || p.albedo.shape() != [3, hw_shape[0], hw_shape[1]] {
            return Err(Error::Shape("parts have different sizes".into()));
        }
    }
    let (m, h, w) = (parts.len(), hw_shape[0], hw_shape[1]);
    let depth = Tensor::stack(&parts.iter().map(|p| p.depth.clone()).collect::<Vec<_>>()).reshape(&[1, m, h, w]);
    let albedo =
        Tensor::stack(&parts.iter().map(|p| p.albedo.clone()).collect::<Vec<_>>()).reshape(&[1, m, 3, h, w]);
    let pose = Tensor::new(&[1, m, 6], parts.iter().flat_map(|p| p.pose.0).collect());

    let mut g = Graph::new();
    let (dv, av, pv) = (g.constant(depth), g.constant(albedo), g.constant(pose));
    let a = assemble_graph(&mut g, dv, av, pv, vis_temperature)?;
    Ok(ObjectCapsule {
        depth: g.value(a.depth).clone().reshape(&[h, w]),
        albedo: g.value(a.albedo).clone().reshape(&[3, h, w]),
        pose: Pose(g.value(a.pose).data().try_into().expect("6 pose entries")),
        visibility: a.visibility.reshape(&[m, h, w]),
        soft_visibility: g.value(a.soft_visibility).clone().reshape(&[m, h, w]),
        labels: a.labels,
    })
}

/// Rendered batch on the graph.
pub struct Rendered {
    /// `[B, 3, H, W]` in `[0, 1]`.
    pub image: Var,
    /// `[B, H, W]` geometry coverage.
    pub mask: Tensor,
    /// Posed label map, `B * H * W`; uncovered pixels carry the sentinel.
    pub labels: Vec<u8>,
}

/// Scalar columns `[B, 1, 1]` of a `[B, K]` variable.
fn columns(g: &mut Graph, v: Var) -> Vec<Var> {
    let s = g.shape(v).to_vec();
    (0..s[1])
        .map(|k| {
            let c = g.narrow(v, 1, k, 1);
            g.reshape(c, &[s[0], 1, 1])
        })
        .collect()
}

/// Clamped central difference along `axis`.
fn central_diff(g: &mut Graph, v: Var, axis: usize) -> Var {
    let n = g.shape(v)[axis];
    let head = g.narrow(v, axis, 0, 1);
    let tail = g.narrow(v, axis, n - 1, 1);
    let body_next = g.narrow(v, axis, 1, n - 1);
    let body_prev = g.narrow(v, axis, 0, n - 1);
    let next = g.concat(&[body_next, tail], axis);
    let prev = g.concat(&[head, body_prev], axis);
    g.sub(next, prev)
}

fn sin(g: &mut Graph, v: Var) -> Var {
    g.unary(v, f32::sin, |x, _, g| g * x.cos())
}

fn cos(g: &mut Graph, v: Var) -> Var {
    g.unary(v, f32::cos, |x, _, g| -g * x.sin())
}

/// `a * b + c * d (+ e * f)` on broadcastable variables.
fn dot3(g: &mut Graph, terms: &[(Var, Var)]) -> Var {
    let mut acc = g.mul(terms[0].0, terms[0].1);
    for &(a, b) in &terms[1..] {
        let t = g.mul(a, b);
        acc = g.add(acc, t);
    }
    acc
}

/// Rotation `R = R_x(pitch) R_y(yaw) R_z(roll)` as nine `[B, 1, 1]` entries.
fn rotation(g: &mut Graph, yaw: Var, pitch: Var, roll: Var) -> [[Var; 3]; 3] {
    let (sa, ca) = (sin(g, yaw), cos(g, yaw));
    let (sb, cb) = (sin(g, pitch), cos(g, pitch));
    let (sc, cc) = (sin(g, roll), cos(g, roll));
    let r00 = g.mul(ca, cc);
    let t = g.mul(ca, sc);
    let r01 = g.neg(t);
    let r02 = sa;
    // Rows 1 and 2 of R_y R_z, then mixed by R_x.
    let m20 = {
        let t = g.mul(sa, cc);
        g.neg(t)
    };
    let m21 = g.mul(sa, sc);
    let m22 = ca;
    let (m10, m11) = (sc, cc);
    let r10 = {
        let a = g.mul(cb, m10);
        let b = g.mul(sb, m20);
        g.sub(a, b)
    };
    let r11 = {
        let a = g.mul(cb, m11);
        let b = g.mul(sb, m21);
        g.sub(a, b)
    };
    let r12 = {
        let b = g.mul(sb, m22);
        g.neg(b)
    };
    let r20 = {
        let a = g.mul(sb, m10);
        let b = g.mul(cb, m20);
        g.add(a, b)
    };
    let r21 = {
        let a = g.mul(sb, m11);
        let b = g.mul(cb, m21);
        g.add(a, b)
    };
    let r22 = g.mul(cb, m22);
    [[r00, r01, r02], [r10, r11, r12], [r20, r21, r22]]
}

/// Render canonical depth `[B, H, W]` and albedo `[B, 3, H, W]` under pose
/// `[B, 6]` and lighting `[B, 4] = (k_a, k_d, l_x, l_y)`.
///
/// `labels` are canonical per-pixel capsule labels (`B * H * W`). With `flip`
/// the canonical maps are mirrored left-right before shading and posing.
#[allow(clippy::too_many_arguments)]
pub fn render_graph(
    g: &mut Graph,
    camera: &Camera,
    depth: Var,
    albedo: Var,
    pose: Var,
    light: Var,
    labels: &[u8],
    flip: bool,
    background: u8,
) -> Result<Rendered> {
    let n = camera.size;
    let b = g.shape(depth)[0];
    if g.shape(depth) != [b, n, n]
        || g.shape(albedo) != [b, 3, n, n]
        || g.shape(pose) != [b, 6]
        || g.shape(light) != [b, 4]
        || labels.len() != b * n * n
    {
        return Err(Error::Shape(format!(
            "render inputs disagree with a {n}x{n} camera: depth {:?}, albedo {:?}, pose {:?}, light {:?}",
            g.shape(depth),
            g.shape(albedo),
            g.shape(pose),
            g.shape(light)
        )));
    }
    for (what, v) in [("depth", depth), ("albedo", albedo), ("pose", pose), ("light", light)] {
        if !g.value(v).is_finite() {
            return Err(Error::InvalidInput(format!("non-finite {what} passed to the renderer")));
        }
    }

    let (depth, albedo, labels) = if flip {
        let flipped: Vec<u8> = labels
            .chunks_exact(n)
            .flat_map(|row| row.iter().rev().copied())
            .collect();
        (g.flip(depth, 2), g.flip(albedo, 3), flipped)
    } else {
        (depth, albedo, labels.to_vec())
    };

    // Canonical points.
    let (gx, gy) = camera.ray_grid();
    let gx = g.constant(gx);
    let gy = g.constant(gy);
    let x = g.mul(depth, gx);
    let y = g.mul(depth, gy);
    let z = depth;

    // Normals from the grid tangents, rescaled to unit pixel spacing so the
    // cross product stays well away from the epsilon.
    let half_f = camera.focal / 2.0;
    let mut tan = |axis: usize| -> [Var; 3] {
        [x, y, z].map(|c| {
            let d = central_diff(g, c, axis);
            g.scale(d, half_f)
        })
    };
    let tu = tan(2);
    let tv = tan(1);
    let cross = |g: &mut Graph, i: usize, j: usize| {
        let a = g.mul(tu[i], tv[j]);
        let b = g.mul(tu[j], tv[i]);
        g.sub(a, b)
    };
    let nx = cross(g, 1, 2);
    let ny = cross(g, 2, 0);
    let nz = cross(g, 0, 1);
    let len2 = dot3(g, &[(nx, nx), (ny, ny), (nz, nz)]);
    let len2 = g.add_scalar(len2, 1e-12);
    let len = g.sqrt(len2);

    // Lambertian shading in the canonical frame.
    let lc = columns(g, light);
    let (ka, kd, lx, ly) = (lc[0], lc[1], lc[2], lc[3]);
    let l2 = dot3(g, &[(lx, lx), (ly, ly)]);
    let l2 = g.add_scalar(l2, 1.0);
    let lnorm = g.sqrt(l2);
    let raw = dot3(g, &[(nx, lx), (ny, ly)]);
    let raw = g.add(raw, nz);
    let denom = g.mul(len, lnorm);
    let ndotl = g.div(raw, denom);
    let diffuse = g.relu(ndotl);
    let diffuse = g.mul(kd, diffuse);
    let shade = g.add(ka, diffuse);
    let shade = g.clamp(shade, 0.0, 1.0);
    let shade = g.reshape(shade, &[b, 1, n, n]);
    let color = g.mul(albedo, shade);

    // Rigid motion about the object center (0, 0, 1).
    let pc = columns(g, pose);
    let r = rotation(g, pc[0], pc[1], pc[2]);
    let zc = g.add_scalar(z, -1.0);
    let xs = dot3(g, &[(r[0][0], x), (r[0][1], y), (r[0][2], zc)]);
    let xs = g.add(xs, pc[3]);
    let ys = dot3(g, &[(r[1][0], x), (r[1][1], y), (r[1][2], zc)]);
    let ys = g.add(ys, pc[4]);
    let zs = dot3(g, &[(r[2][0], x), (r[2][1], y), (r[2][2], zc)]);
    let zs = g.add(zs, pc[5]);
    let zs = g.add_scalar(zs, 1.0);

    // Perspective projection to pixel coordinates.
    let c = n as f32 / 2.0;
    let u = g.div(xs, zs);
    let u = g.scale(u, camera.focal);
    let u = g.add_scalar(u, c);
    let v = g.div(ys, zs);
    let v = g.scale(v, camera.focal);
    let v = g.add_scalar(v, c);

    let zval = g.value(zs).clone();
    let r = rasterize(g, u, v, &zval, color, &labels, background);
    Ok(Rendered {
        image: r.image,
        mask: r.mask,
        labels: r.labels,
    })
}

/// Rendered images of a batch, with and without flipping.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    /// `[B, 3, H, W]`
    pub image: Tensor,
    /// `[B, 3, H, W]`
    pub image_flip: Tensor,
    /// Posed labels `[B, H, W]` of the direct render; `M` marks background.
    pub label_map: Vec<u8>,
    /// `[B, H, W]` coverage of the direct render.
    pub mask: Tensor,
    pub num_capsules: usize,
}

impl RenderOutput {
    pub fn batch_size(&self) -> usize {
        self.image.shape()[0]
    }

    /// Segmentation of sample `b` in image space.
    pub fn label_map(&self, b: usize) -> SegmentationMap {
        let n = self.image.shape()[2];
        let labels = self.label_map[b * n * n..(b + 1) * n * n].to_vec();
        SegmentationMap::new(n, self.num_capsules, labels).expect("renderer emits valid labels")
    }
}

/// Render one object capsule directly and flipped.
pub fn render(obj: &ObjectCapsule, light: &Lighting, camera: &Camera) -> Result<RenderOutput> {
    let n = camera.size;
    let m = obj.num_capsules();
    let mut g = Graph::new();
    let depth = g.constant(obj.depth.clone().reshape(&[1, n, n]));
    let albedo = g.constant(obj.albedo.clone().reshape(&[1, 3, n, n]));
    let pose = g.constant(Tensor::new(&[1, 6], obj.pose.0.to_vec()));
    let l = g.constant(Tensor::new(
        &[1, 4],
        vec![light.ambient, light.diffuse, light.direction[0], light.direction[1]],
    ));
    let bg = m as u8;
    let direct = render_graph(&mut g, camera, depth, albedo, pose, l, &obj.labels, false, bg)?;
    let flipped = render_graph(&mut g, camera, depth, albedo, pose, l, &obj.labels, true, bg)?;
    Ok(RenderOutput {
        image: g.value(direct.image).clone(),
        image_flip: g.value(flipped.image).clone(),
        label_map: direct.labels,
        mask: direct.mask,
        num_capsules: m,
    })
}

/// Write a label map as an 8-bit grayscale PNG plus a JSON sidecar naming
/// each value.
pub fn write_label_map(seg: &SegmentationMap, path: &Path) -> Result<()> {
    let n = seg.size as u32;
    let img = image::GrayImage::from_raw(n, n, seg.labels.clone()).expect("label buffer matches size");
    img.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut legend = serde_json::Map::new();
    for m in 0..seg.num_capsules {
        let name = if m + 1 == seg.num_capsules {
            "background capsule".to_string()
        } else {
            format!("capsule {m}")
        };
        legend.insert(m.to_string(), name.into());
    }
    legend.insert(seg.num_capsules.to_string(), "no geometry".into());
    let sidecar = path.with_extension("json");
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "size": seg.size,
        "num_capsules": seg.num_capsules,
        "background_label": seg.num_capsules,
        "labels": legend,
    }))?;
    std::fs::write(&sidecar, text).map_err(|e| Error::io(sidecar.display().to_string(), e))
}
