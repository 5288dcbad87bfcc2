//! Z-buffered rasterization of the pixel-grid mesh.
//!
//! Every `H x W` vertex grid is split into two triangles per cell. Pixels are
//! sampled at their centers; colors are interpolated with screen-space
//! barycentrics of the nearest covering triangle. Gradients flow to colors
//! and to vertex screen positions through the barycentric weights, while the
//! choice of triangle is treated as fixed.

use igc_tensor::{Graph, Tensor, Var};

/// Slack on barycentric coordinates so that samples lying exactly on an
/// edge or vertex count as covered.
const INSIDE_TOL: f32 = 1e-4;
const MIN_AREA: f32 = 1e-10;
const NO_HIT: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
struct Hit {
    tri: u32,
    w: [f32; 3],
}

const EMPTY: Hit = Hit {
    tri: NO_HIT,
    w: [0.0; 3],
};

/// Rasterizer result on the graph.
pub struct Raster {
    /// `[B, C, H, W]`, background pixels are 0.
    pub image: Var,
    /// `[B, H, W]` coverage, 1 where some triangle was hit.
    pub mask: Tensor,
    /// Label of the dominant vertex per pixel, `background` where uncovered.
    pub labels: Vec<u8>,
}

/// Vertex indices of triangle `t` on a `w`-wide grid.
fn triangle(t: u32, w: usize) -> [usize; 3] {
    let cell = (t / 2) as usize;
    let (r, c) = (cell / (w - 1), cell % (w - 1));
    let a = r * w + c;
    if t.is_multiple_of(2) {
        [a, a + 1, a + w]
    } else {
        [a + w, a + 1, a + w + 1]
    }
}

/// Twice the signed area of `(p, q, s)`.
#[inline]
fn edge(p: [f32; 2], q: [f32; 2], s: [f32; 2]) -> f32 {
    (q[0] - p[0]) * (s[1] - p[1]) - (q[1] - p[1]) * (s[0] - p[0])
}

/// Accumulate `coef * d edge(p, q, s)` into the position gradients of `p` and `q`.
#[inline]
fn edge_grad(p: [f32; 2], q: [f32; 2], s: [f32; 2], coef: f32, dp: &mut [f32; 2], dq: &mut [f32; 2]) {
    dp[0] += coef * (q[1] - s[1]);
    dp[1] += coef * (s[0] - q[0]);
    dq[0] += coef * (s[1] - p[1]);
    dq[1] -= coef * (s[0] - p[0]);
}

fn rasterize_one(u: &[f32], v: &[f32], z: &[f32], h: usize, w: usize, hits: &mut [Hit]) {
    let mut zbuf = vec![f32::INFINITY; h * w];
    let tris = 2 * (h - 1) * (w - 1);
    for t in 0..tris as u32 {
        let [ia, ib, ic] = triangle(t, w);
        let (a, b, c) = ([u[ia], v[ia]], [u[ib], v[ib]], [u[ic], v[ic]]);
        let den = edge(a, b, c);
        if den.abs() < MIN_AREA {
            continue;
        }
        let lo_u = a[0].min(b[0]).min(c[0]);
        let hi_u = a[0].max(b[0]).max(c[0]);
        let lo_v = a[1].min(b[1]).min(c[1]);
        let hi_v = a[1].max(b[1]).max(c[1]);
        // Pixel centers sit at k + 0.5; the margin covers the tolerance band.
        let col0 = ((lo_u - 0.5 - 1e-3).ceil().max(0.0)) as usize;
        let row0 = ((lo_v - 0.5 - 1e-3).ceil().max(0.0)) as usize;
        let col1 = (hi_u - 0.5 + 1e-3).floor();
        let row1 = (hi_v - 0.5 + 1e-3).floor();
        if col1 < 0.0 || row1 < 0.0 {
            continue;
        }
        let col1 = (col1 as usize).min(w - 1);
        let row1 = (row1 as usize).min(h - 1);
        for row in row0..=row1 {
            for col in col0..=col1 {
                let s = [col as f32 + 0.5, row as f32 + 0.5];
                let wa = edge(b, c, s) / den;
                let wb = edge(c, a, s) / den;
                let wc = edge(a, b, s) / den;
                if wa < -INSIDE_TOL || wb < -INSIDE_TOL || wc < -INSIDE_TOL {
                    continue;
                }
                let depth = wa * z[ia] + wb * z[ib] + wc * z[ic];
                let p = row * w + col;
                if depth > 0.0 && depth < zbuf[p] {
                    zbuf[p] = depth;
                    hits[p] = Hit { tri: t, w: [wa, wb, wc] };
                }
            }
        }
    }
}

/// Rasterize per-vertex colors `[B, C, H, W]` placed at screen positions
/// `u`, `v` (pixels, `[B, H, W]`) with depth `z`.
///
/// `vertex_labels` holds one label per vertex (`B * H * W`).
pub fn rasterize(
    g: &mut Graph,
    u: Var,
    v: Var,
    z: &Tensor,
    colors: Var,
    vertex_labels: &[u8],
    background: u8,
) -> Raster {
    let cs = g.shape(colors).to_vec();
    let (bsz, ch, h, w) = (cs[0], cs[1], cs[2], cs[3]);
    let hw = h * w;
    assert!(h >= 2 && w >= 2, "mesh needs at least a 2x2 vertex grid");
    assert_eq!(g.shape(u), &[bsz, h, w]);
    assert_eq!(vertex_labels.len(), bsz * hw);

    let mut hits = vec![EMPTY; bsz * hw];
    {
        let (ud, vd, zd) = (g.value(u).data(), g.value(v).data(), z.data());
        for b in 0..bsz {
            let r = b * hw..(b + 1) * hw;
            rasterize_one(&ud[r.clone()], &vd[r.clone()], &zd[r.clone()], h, w, &mut hits[r]);
        }
    }

    let mut image = vec![0.0f32; bsz * ch * hw];
    let mut mask = vec![0.0f32; bsz * hw];
    let mut labels = vec![background; bsz * hw];
    let cd = g.value(colors).data();
    for b in 0..bsz {
        for p in 0..hw {
            let hit = hits[b * hw + p];
            if hit.tri == NO_HIT {
                continue;
            }
            let verts = triangle(hit.tri, w);
            mask[b * hw + p] = 1.0;
            let dominant = (0..3).fold(0, |best, k| if hit.w[k] > hit.w[best] { k } else { best });
            labels[b * hw + p] = vertex_labels[b * hw + verts[dominant]];
            for c in 0..ch {
                let base = (b * ch + c) * hw;
                let val: f32 = (0..3).map(|k| hit.w[k] * cd[base + verts[k]]).sum();
                // Tolerated samples just outside a triangle can overshoot by ~1e-4.
                image[base + p] = val.clamp(0.0, 1.0);
            }
        }
    }

    let image = g.custom(
        &[u, v, colors],
        Tensor::new(&[bsz, ch, h, w], image),
        Box::new(move |gout, parents, _, needs| {
            let (ud, vd, cd) = (parents[0].data(), parents[1].data(), parents[2].data());
            let go = gout.data();
            let mut du = vec![0.0f32; bsz * hw];
            let mut dv = vec![0.0f32; bsz * hw];
            let mut dc = vec![0.0f32; bsz * ch * hw];
            for b in 0..bsz {
                for p in 0..hw {
                    let hit = hits[b * hw + p];
                    if hit.tri == NO_HIT {
                        continue;
                    }
                    let verts = triangle(hit.tri, w).map(|i| b * hw + i);
                    let mut gw = [0.0f32; 3];
                    for c in 0..ch {
                        let go_c = go[(b * ch + c) * hw + p];
                        if go_c == 0.0 {
                            continue;
                        }
                        for k in 0..3 {
                            let vi = (b * ch + c) * hw + verts[k] % hw;
                            dc[vi] += hit.w[k] * go_c;
                            gw[k] += go_c * cd[vi];
                        }
                    }
                    if !(needs[0] || needs[1]) {
                        continue;
                    }
                    let pos = verts.map(|i| [ud[i], vd[i]]);
                    let den = edge(pos[0], pos[1], pos[2]);
                    let mean: f32 = (0..3).map(|k| hit.w[k] * gw[k]).sum();
                    let coef = gw.map(|x| (x - mean) / den);
                    let s = [(p % w) as f32 + 0.5, (p / w) as f32 + 0.5];
                    let mut dpos = [[0.0f32; 2]; 3];
                    // Weight k is edge(next, next-next, s) / den.
                    for k in 0..3 {
                        let (i, j) = ((k + 1) % 3, (k + 2) % 3);
                        let (mut di, mut dj) = (dpos[i], dpos[j]);
                        edge_grad(pos[i], pos[j], s, coef[k], &mut di, &mut dj);
                        dpos[i] = di;
                        dpos[j] = dj;
                    }
                    for k in 0..3 {
                        du[verts[k]] += dpos[k][0];
                        dv[verts[k]] += dpos[k][1];
                    }
                }
            }
            vec![
                needs[0].then(|| Tensor::new(&[bsz, h, w], du)),
                needs[1].then(|| Tensor::new(&[bsz, h, w], dv)),
                needs[2].then(|| Tensor::new(&[bsz, ch, h, w], dc)),
            ]
        }),
    );
    Raster {
        image,
        mask: Tensor::new(&[bsz, h, w], mask),
        labels,
    }
}
