//! Elementwise, reduction and shape ops.

use crate::graph::{Graph, Var};
use crate::tensor::{broadcast_shape, numel, strides, Tensor};

/// Input offsets for every output element when broadcasting `src` to `out`.
fn broadcast_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; n];
    for i in 0..src.len() {
        let o = i + n - src.len();
        eff[o] = if src[i] == 1 { 0 } else { src_strides[i] };
    }
    let total = numel(out);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

/// Sum `g` (shaped like a broadcast result) back down to `src` shape.
fn reduce_to(g: &Tensor, src: &[usize]) -> Tensor {
    if g.shape() == src {
        return g.clone();
    }
    let offsets = broadcast_offsets(src, g.shape());
    let mut out = vec![0.0f32; numel(src)];
    for (&o, &v) in offsets.iter().zip(g.data()) {
        out[o] += v;
    }
    Tensor::new(src, out)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

impl Graph {
    pub fn broadcast_to(&mut self, v: Var, shape: &[usize]) -> Var {
        let src_shape = self.shape(v).to_vec();
        if src_shape == shape {
            return v;
        }
        assert_eq!(
            broadcast_shape(&src_shape, shape).as_deref(),
            Some(shape),
            "cannot broadcast {src_shape:?} to {shape:?}"
        );
        let offsets = broadcast_offsets(&src_shape, shape);
        let src = self.value(v).data();
        let data: Vec<f32> = offsets.iter().map(|&o| src[o]).collect();
        self.custom(
            &[v],
            Tensor::new(shape, data),
            Box::new(move |g, _, _, _| vec![Some(reduce_to(g, &src_shape))]),
        )
    }

    fn broadcast_pair(&mut self, a: Var, b: Var) -> (Var, Var) {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            return (a, b);
        }
        let out = broadcast_shape(&sa, &sb)
            .unwrap_or_else(|| panic!("incompatible shapes {sa:?} and {sb:?}"));
        (self.broadcast_to(a, &out), self.broadcast_to(b, &out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = self.broadcast_pair(a, b);
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.custom(
            &[a, b],
            value,
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = self.broadcast_pair(a, b);
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.custom(
            &[a, b],
            value,
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.map(|x| -x))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = self.broadcast_pair(a, b);
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.custom(
            &[a, b],
            value,
            Box::new(|g, p, _, needs| {
                vec![
                    needs[0].then(|| g.zip_map(p[1], |g, y| g * y)),
                    needs[1].then(|| g.zip_map(p[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (a, b) = self.broadcast_pair(a, b);
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.custom(
            &[a, b],
            value,
            Box::new(|g, p, out, needs| {
                vec![
                    needs[0].then(|| g.zip_map(p[1], |g, y| g / y)),
                    needs[1].then(|| {
                        let t = g.zip_map(out, |g, q| g * q);
                        t.zip_map(p[1], |t, y| -t / y)
                    }),
                ]
            }),
        )
    }

    /// Elementwise op from a forward map and a backward rule `(x, y, g) -> dx`.
    pub fn unary(
        &mut self,
        v: Var,
        forward: impl Fn(f32) -> f32,
        backward: impl Fn(f32, f32, f32) -> f32 + 'static,
    ) -> Var {
        let value = self.value(v).map(forward);
        self.custom(
            &[v],
            value,
            Box::new(move |g, p, out, _| {
                let data = p[0]
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&x, &y), &g)| backward(x, y, g))
                    .collect();
                vec![Some(Tensor::new(g.shape(), data))]
            }),
        )
    }

    pub fn neg(&mut self, v: Var) -> Var {
        self.scale(v, -1.0)
    }

    pub fn scale(&mut self, v: Var, c: f32) -> Var {
        self.unary(v, move |x| x * c, move |_, _, g| g * c)
    }

    pub fn add_scalar(&mut self, v: Var, c: f32) -> Var {
        self.unary(v, move |x| x + c, |_, _, g| g)
    }

    pub fn square(&mut self, v: Var) -> Var {
        self.unary(v, |x| x * x, |x, _, g| 2.0 * x * g)
    }

    pub fn exp(&mut self, v: Var) -> Var {
        self.unary(v, f32::exp, |_, y, g| g * y)
    }

    pub fn ln(&mut self, v: Var) -> Var {
        self.unary(v, f32::ln, |x, _, g| g / x)
    }

    /// `|x|` with zero subgradient at the origin.
    pub fn abs(&mut self, v: Var) -> Var {
        self.unary(v, f32::abs, |x, _, g| {
            if x > 0.0 {
                g
            } else if x < 0.0 {
                -g
            } else {
                0.0
            }
        })
    }

    /// `sqrt(x)`; the gradient at `x = 0` is taken as zero.
    pub fn sqrt(&mut self, v: Var) -> Var {
        self.unary(v, f32::sqrt, |_, y, g| if y > 0.0 { g / (2.0 * y) } else { 0.0 })
    }

    pub fn tanh(&mut self, v: Var) -> Var {
        self.unary(v, f32::tanh, |_, y, g| g * (1.0 - y * y))
    }

    pub fn sigmoid(&mut self, v: Var) -> Var {
        self.unary(v, sigmoid, |_, y, g| g * y * (1.0 - y))
    }

    pub fn softplus(&mut self, v: Var) -> Var {
        self.unary(v, softplus, |x, _, g| g * sigmoid(x))
    }

    pub fn relu(&mut self, v: Var) -> Var {
        self.unary(v, |x| x.max(0.0), |x, _, g| if x > 0.0 { g } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, v: Var, slope: f32) -> Var {
        self.unary(
            v,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _, g| if x > 0.0 { g } else { slope * g },
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the interval.
    pub fn clamp(&mut self, v: Var, lo: f32, hi: f32) -> Var {
        self.unary(
            v,
            move |x| x.clamp(lo, hi),
            move |x, _, g| if x > lo && x < hi { g } else { 0.0 },
        )
    }

    pub fn sum(&mut self, v: Var) -> Var {
        let shape = self.shape(v).to_vec();
        let value = Tensor::scalar(self.value(v).sum());
        self.custom(
            &[v],
            value,
            Box::new(move |g, _, _, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(&mut self, v: Var) -> Var {
        let n = self.value(v).len() as f32;
        let s = self.sum(v);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, v: Var, axis: usize) -> Var {
        let shape = self.shape(v).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(v).data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &src[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        self.custom(
            &[v],
            Tensor::new(&out_shape, out),
            Box::new(move |g, _, _, _| {
                let mut dx = vec![0.0f32; outer * len * inner];
                for o in 0..outer {
                    let gr = &g.data()[o * inner..(o + 1) * inner];
                    for k in 0..len {
                        dx[(o * len + k) * inner..(o * len + k + 1) * inner]
                            .copy_from_slice(gr);
                    }
                }
                vec![Some(Tensor::new(&shape, dx))]
            }),
        )
    }

    pub fn mean_axis(&mut self, v: Var, axis: usize) -> Var {
        let n = self.shape(v)[axis] as f32;
        let s = self.sum_axis(v, axis);
        self.scale(s, 1.0 / n)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, v: Var, axis: usize) -> Var {
        let shape = self.shape(v).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(v).data();
        let mut out = vec![0.0f32; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).fold(f32::NEG_INFINITY, |m, k| m.max(src[at(k)]));
                let mut z = 0.0f32;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        self.custom(
            &[v],
            Tensor::new(&shape, out),
            Box::new(move |g, _, y, _| {
                let (g, y) = (g.data(), y.data());
                let mut dx = vec![0.0f32; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f32 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(&shape, dx))]
            }),
        )
    }

    pub fn reshape(&mut self, v: Var, shape: &[usize]) -> Var {
        let src_shape = self.shape(v).to_vec();
        let value = self.value(v).clone().reshape(shape);
        self.custom(
            &[v],
            value,
            Box::new(move |g, _, _, _| vec![Some(g.clone().reshape(&src_shape))]),
        )
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, v: Var, perm: &[usize]) -> Var {
        let value = permute_tensor(self.value(v), perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.custom(
            &[v],
            value,
            Box::new(move |g, _, _, _| vec![Some(permute_tensor(g, &inverse))]),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, v: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(v).to_vec();
        let (outer, full, inner) = axis_split(&shape, axis);
        assert!(start + len <= full, "narrow out of range");
        let src = self.value(v).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.custom(
            &[v],
            Tensor::new(&out_shape, out),
            Box::new(move |g, _, _, _| {
                let mut dx = vec![0.0f32; outer * full * inner];
                for o in 0..outer {
                    dx[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(&shape, dx))]
            }),
        )
    }

    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Var {
        assert!(!vars.is_empty(), "concat of zero tensors");
        let shapes: Vec<Vec<usize>> = vars.iter().map(|&v| self.shape(v).to_vec()).collect();
        let mut out_shape = shapes[0].clone();
        out_shape[axis] = shapes.iter().map(|s| s[axis]).sum();
        for s in &shapes {
            assert_eq!(s.len(), out_shape.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&out_shape).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch");
            }
        }
        let (outer, total, inner) = axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (&v, s) in vars.iter().zip(&shapes) {
                let n = s[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * n..(o + 1) * n]);
            }
        }
        let lens: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
        self.custom(
            vars,
            Tensor::new(&out_shape, out),
            Box::new(move |g, _, _, needs| {
                let mut grads = Vec::with_capacity(lens.len());
                let mut start = 0;
                for (k, (&len, s)) in lens.iter().zip(&shapes).enumerate() {
                    if needs[k] {
                        let mut d = Vec::with_capacity(numel(s));
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            d.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        grads.push(Some(Tensor::new(s, d)));
                    } else {
                        grads.push(None);
                    }
                    start += len;
                }
                grads
            }),
        )
    }

    /// Reverse the order of entries along `axis`.
    pub fn flip(&mut self, v: Var, axis: usize) -> Var {
        let value = flip_tensor(self.value(v), axis);
        self.custom(
            &[v],
            value,
            Box::new(move |g, _, _, _| vec![Some(flip_tensor(g, axis))]),
        )
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    assert_eq!(perm.len(), shape.len(), "permutation rank mismatch");
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides = strides(shape);
    let eff: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n = out_shape.len();
    let total = t.len();
    let src = t.data();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(src[off]);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

pub fn flip_tensor(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let src = t.data();
    let mut out = vec![0.0f32; src.len()];
    for o in 0..outer {
        for k in 0..len {
            let from = (o * len + k) * inner;
            let to = (o * len + (len - 1 - k)) * inner;
            out[to..to + inner].copy_from_slice(&src[from..from + inner]);
        }
    }
    Tensor::new(t.shape(), out)
}
