//! Matrix products and 2-D convolution.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Strided matrix view for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    pub fn row_major(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = a @ b + beta * c` with `c` row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(a: Mat, b: Mat, c: &mut [f32], beta: f32) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: the views are bounds-checked by construction: every index
    // reachable through (rows, cols, rs, cs) lies inside `data`, and `c` has
    // exactly m*n elements addressed row-major.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Default)]
struct Scratch {
    padded: Vec<f32>,
    dpadded: Vec<f32>,
    rows: Vec<f32>,
}

/// Dot product with eight independent partial sums, so it vectorizes while
/// keeping a fixed summation order.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let tail: f32 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    lanes.iter().sum::<f32>() + tail
}

/// Geometry of one convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        let (ho, wo) = (self.ho, self.wo);
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, out) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *out = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Width of a zero-padded input row.
    fn padded_w(&self) -> usize {
        self.w + 2 * self.pad
    }

    /// Length of a padded plane, with one spare row so that every shifted
    /// window of `ho * padded_w` elements stays in bounds.
    fn padded_len(&self) -> usize {
        (self.h + 2 * self.pad + 1) * self.padded_w()
    }

    fn pad_planes(&self, x: &[f32], buf: &mut [f32]) {
        let (wp, plen) = (self.padded_w(), self.padded_len());
        buf.fill(0.0);
        for c in 0..self.c {
            for iy in 0..self.h {
                let src = &x[(c * self.h + iy) * self.w..][..self.w];
                let at = c * plen + (iy + self.pad) * wp + self.pad;
                buf[at..at + self.w].copy_from_slice(src);
            }
        }
    }

    /// Stride-1 convolution over padded planes: each kernel tap becomes one
    /// long axpy at a flat offset. Columns past `wo` in each padded output
    /// row are scratch and discarded.
    fn direct_forward(&self, x: &[f32], w: &[f32], out: &mut [f32], o: usize, scratch: &mut Scratch) {
        let (wp, plen) = (self.padded_w(), self.padded_len());
        let span = self.ho * wp;
        self.pad_planes(x, &mut scratch.padded);
        for oc in 0..o {
            let acc = &mut scratch.rows[..span];
            acc.fill(0.0);
            for c in 0..self.c {
                let plane = &scratch.padded[c * plen..(c + 1) * plen];
                for ki in 0..self.kh {
                    for kj in 0..self.kw {
                        let wv = w[((oc * self.c + c) * self.kh + ki) * self.kw + kj];
                        let src = &plane[ki * wp + kj..][..span];
                        for (d, &s) in acc.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
            let dst = &mut out[oc * self.ho * self.wo..(oc + 1) * self.ho * self.wo];
            for (row, line) in dst.chunks_exact_mut(self.wo).zip(acc.chunks_exact(wp)) {
                for (d, &v) in row.iter_mut().zip(&line[..self.wo]) {
                    *d += v;
                }
            }
        }
    }

    fn direct_backward(
        &self,
        x: &[f32],
        w: &[f32],
        g: &[f32],
        o: usize,
        dx: Option<&mut [f32]>,
        mut dw: Option<&mut [f32]>,
        scratch: &mut Scratch,
    ) {
        let (wp, plen) = (self.padded_w(), self.padded_len());
        let span = self.ho * wp;
        if dw.is_some() {
            self.pad_planes(x, &mut scratch.padded);
        }
        let want_dx = dx.is_some();
        if want_dx {
            scratch.dpadded.fill(0.0);
        }
        for oc in 0..o {
            let gq = &mut scratch.rows[..span];
            gq.fill(0.0);
            let gp = &g[oc * self.ho * self.wo..(oc + 1) * self.ho * self.wo];
            for (line, row) in gq.chunks_exact_mut(wp).zip(gp.chunks_exact(self.wo)) {
                line[..self.wo].copy_from_slice(row);
            }
            for c in 0..self.c {
                for ki in 0..self.kh {
                    for kj in 0..self.kw {
                        let widx = ((oc * self.c + c) * self.kh + ki) * self.kw + kj;
                        let at = c * plen + ki * wp + kj;
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] += dot(gq, &scratch.padded[at..at + span]);
                        }
                        if want_dx {
                            let wv = w[widx];
                            for (d, &gv) in scratch.dpadded[at..at + span].iter_mut().zip(gq.iter()) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
        }
        if let Some(dx) = dx {
            for c in 0..self.c {
                for iy in 0..self.h {
                    let at = c * plen + (iy + self.pad) * wp + self.pad;
                    let dst = &mut dx[(c * self.h + iy) * self.w..][..self.w];
                    for (d, &v) in dst.iter_mut().zip(&scratch.dpadded[at..at + self.w]) {
                        *d += v;
                    }
                }
            }
        }
    }

    fn use_direct(&self) -> bool {
        self.stride == 1
    }

    fn scratch(&self) -> Scratch {
        if !self.use_direct() {
            return Scratch::default();
        }
        let plen = self.padded_len();
        Scratch {
            padded: vec![0.0; self.c * plen],
            dpadded: vec![0.0; self.c * plen],
            rows: vec![0.0; self.ho * self.padded_w()],
        }
    }

    fn col2im(&self, col: &[f32], dx: &mut [f32]) {
        let (ho, wo) = (self.ho, self.wo);
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// `[n, k] @ [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul shapes {sa:?} x {sb:?}");
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; n * m];
        gemm(
            Mat::row_major(self.value(a).data(), n, k),
            Mat::row_major(self.value(b).data(), k, m),
            &mut out,
            0.0,
        );
        self.custom(
            &[a, b],
            Tensor::new(&[n, m], out),
            Box::new(move |g, p, _, needs| {
                let gm = Mat::row_major(g.data(), n, m);
                let da = needs[0].then(|| {
                    let mut d = vec![0.0f32; n * k];
                    gemm(gm, Mat::row_major(p[1].data(), k, m).t(), &mut d, 0.0);
                    Tensor::new(&[n, k], d)
                });
                let db = needs[1].then(|| {
                    let mut d = vec![0.0f32; k * m];
                    gemm(Mat::row_major(p[0].data(), n, k).t(), gm, &mut d, 0.0);
                    Tensor::new(&[k, m], d)
                });
                vec![da, db]
            }),
        )
    }

    /// `x [n, in] @ w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add(y, b)
    }

    /// Cross-correlation of `x [n, c, h, w]` with `w [o, c, kh, kw]` plus a
    /// per-channel bias `b [o]`, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4, "conv2d expects 4-D input and weight");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?} weight {ws:?}");
        assert_eq!(self.shape(b), &[ws[0]], "conv2d bias shape");
        let (n, o) = (xs[0], ws[0]);
        let geom = ConvGeom {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (xs[2] + 2 * pad - ws[2]) / stride + 1,
            wo: (xs[3] + 2 * pad - ws[3]) / stride + 1,
        };
        let (kr, hw) = (geom.col_rows(), geom.col_cols());
        let in_size = geom.c * geom.h * geom.w;
        let mut out = vec![0.0f32; n * o * hw];
        let mut col = vec![0.0f32; if geom.use_direct() { 0 } else { kr * hw }];
        let mut scratch = geom.scratch();
        {
            let xv = self.value(x).data();
            let wv = Mat::row_major(self.value(w).data(), o, kr);
            let bv = self.value(b).data();
            for i in 0..n {
                let dst = &mut out[i * o * hw..(i + 1) * o * hw];
                for (ch, &bias) in bv.iter().enumerate() {
                    dst[ch * hw..(ch + 1) * hw].fill(bias);
                }
                let xi = &xv[i * in_size..(i + 1) * in_size];
                if geom.use_direct() {
                    geom.direct_forward(xi, wv.data, dst, o, &mut scratch);
                } else {
                    geom.im2col(xi, &mut col);
                    gemm(wv, Mat::row_major(&col, kr, hw), dst, 1.0);
                }
            }
        }
        self.custom(
            &[x, w, b],
            Tensor::new(&[n, o, geom.ho, geom.wo], out),
            Box::new(move |g, p, _, needs| {
                let (xv, wv) = (p[0].data(), p[1].data());
                let wm = Mat::row_major(wv, o, kr);
                let mut dx = needs[0].then(|| vec![0.0f32; n * in_size]);
                let mut dw = needs[1].then(|| vec![0.0f32; o * kr]);
                let mut db = needs[2].then(|| vec![0.0f32; o]);
                let direct = geom.use_direct();
                let mut col = if direct { Vec::new() } else { vec![0.0f32; kr * hw] };
                let mut scratch = geom.scratch();
                for i in 0..n {
                    let gi = &g.data()[i * o * hw..(i + 1) * o * hw];
                    let gm = Mat::row_major(gi, o, hw);
                    if let Some(db) = db.as_mut() {
                        for (ch, acc) in db.iter_mut().enumerate() {
                            *acc += gi[ch * hw..(ch + 1) * hw].iter().sum::<f32>();
                        }
                    }
                    if direct {
                        geom.direct_backward(
                            &xv[i * in_size..(i + 1) * in_size],
                            wv,
                            gi,
                            o,
                            dx.as_mut().map(|d| &mut d[i * in_size..(i + 1) * in_size]),
                            dw.as_deref_mut(),
                            &mut scratch,
                        );
                        continue;
                    }
                    if let Some(dw) = dw.as_mut() {
                        geom.im2col(&xv[i * in_size..(i + 1) * in_size], &mut col);
                        gemm(gm, Mat::row_major(&col, kr, hw).t(), dw, 1.0);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(wm.t(), gm, &mut col, 0.0);
                        geom.col2im(&col, &mut dx[i * in_size..(i + 1) * in_size]);
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(p[0].shape(), d)),
                    dw.map(|d| Tensor::new(p[1].shape(), d)),
                    db.map(|d| Tensor::new(p[2].shape(), d)),
                ]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of `[n, c, h, w]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "upsample2x expects 4-D input");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let _ = planes;
        let src = self.value(x).data();
        let mut out = vec![0.0f32; planes * 4 * h * w];
        for (row, dst) in src.chunks_exact(w).zip(out.chunks_exact_mut(4 * w)) {
            let (top, bottom) = dst.split_at_mut(2 * w);
            for (pair, &v) in top.chunks_exact_mut(2).zip(row) {
                pair[0] = v;
                pair[1] = v;
            }
            bottom.copy_from_slice(top);
        }
        self.custom(
            &[x],
            Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out),
            Box::new(move |g, _, _, _| {
                let mut dx = vec![0.0f32; planes * h * w];
                for (row, src) in dx.chunks_exact_mut(w).zip(g.data().chunks_exact(4 * w)) {
                    let (top, bottom) = src.split_at(2 * w);
                    for (j, d) in row.iter_mut().enumerate() {
                        *d = top[2 * j] + top[2 * j + 1] + bottom[2 * j] + bottom[2 * j + 1];
                    }
                }
                vec![Some(Tensor::new(&s, dx))]
            }),
        )
    }
}
