//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every training iteration builds a fresh [`Graph`]: parameters enter as
//! differentiable leaves, inputs as constants, and each operation appends a
//! node holding its forward value plus whatever the backward pass needs.
//! Nodes are topologically ordered by construction, so the backward sweep is
//! a single reverse walk over the tape. All compute is single-threaded and
//! bit-deterministic for a given build order.

use crate::tensor::Tensor;
use crate::Real;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

struct Node<T: Real> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    op: Op<T>,
}

enum Op<T: Real> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, dilation: usize, pad: usize },
    InstanceNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Affine { x: Var, mul: T },
    ConcatChannels { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    Reshape { x: Var },
    Transpose2 { x: Var },
    BroadcastSpatial { v: Var },
    MaskedMean { x: Var, mask: Vec<u8>, count: usize },
    GatherCols { x: Var, index: Vec<usize> },
    Linear { x: Var, w: Var, b: Var },
    CosineMaps { rows: Var, features: Var },
    CosinePairs { a: Var, b: Var },
    MaxAxis0 { x: Var, argmax: Vec<usize> },
    MaxPool { x: Var, argmax: Vec<usize> },
    BilinearResize { x: Var },
    SumAll { x: Var },
    MeanAll { x: Var },
    Bce { p: Var, gt: Vec<u8>, eps: T },
    WeightedSum { terms: Vec<(Var, T)> },
}

/// Sentinel argmax index meaning "the padding value won the window".
const PAD_WON: usize = usize::MAX;

fn floor_div(a: isize, b: isize) -> isize {
    a.div_euclid(b)
}

fn ceil_div(a: isize, b: isize) -> isize {
    -((-a).div_euclid(b))
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (an input or a frozen tensor).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last `backward` call, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs)
    }

    // ------------------------------------------------------------------
    // elementwise and shape ops
    // ------------------------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > T::zero() { a } else { T::zero() });
        self.push_op(v, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(stable_sigmoid);
        self.push_op(v, Op::Sigmoid { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let v = Tensor::new(va.shape(), data).unwrap();
        self.push_op(v, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let v = Tensor::new(va.shape(), data).unwrap();
        self.push_op(v, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::new(va.shape(), data).unwrap();
        self.push_op(v, Op::Mul { a, b }, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "div shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x / y).collect();
        let v = Tensor::new(va.shape(), data).unwrap();
        self.push_op(v, Op::Div { a, b }, &[a, b])
    }

    /// `mul * x + add`, both scalars applied elementwise.
    pub fn affine(&mut self, x: Var, mul: T, add: T) -> Var {
        let v = self.value(x).map(|a| mul * a + add);
        self.push_op(v, Op::Affine { x, mul }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshaped(shape).expect("reshape numel mismatch");
        self.push_op(v, Op::Reshape { x }, &[x])
    }

    /// Matrix transpose, `[a,b] -> [b,a]`.
    pub fn transpose2(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2);
        let (a, b) = (xs[0], xs[1]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); a * b];
        for i in 0..a {
            for j in 0..b {
                out[j * a + i] = xd[i * b + j];
            }
        }
        let v = Tensor::new(&[b, a], out).unwrap();
        self.push_op(v, Op::Transpose2 { x }, &[x])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (h, w) = {
            let s = self.value(parts[0]).shape();
            assert_eq!(s.len(), 3);
            (s[1], s[2])
        };
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &[h, w], "concat_channels spatial mismatch");
            channels += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(&[channels, h, w], data).unwrap();
        self.push_op(v, Op::ConcatChannels { parts: parts.to_vec() }, parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = {
            let s = self.value(parts[0]).shape();
            assert_eq!(s.len(), 2);
            s[1]
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.shape()[1], cols, "concat_rows column mismatch");
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(&[rows, cols], data).unwrap();
        self.push_op(v, Op::ConcatRows { parts: parts.to_vec() }, parts)
    }

    /// Expand a `[c]` vector to a spatially constant `[c, h, w]` map.
    pub fn broadcast_spatial(&mut self, v: Var, h: usize, w: usize) -> Var {
        let src = self.value(v);
        assert_eq!(src.shape().len(), 1);
        let c = src.shape()[0];
        let mut data = Vec::with_capacity(c * h * w);
        for &x in src.data() {
            data.extend(std::iter::repeat(x).take(h * w));
        }
        let out = Tensor::new(&[c, h, w], data).unwrap();
        self.push_op(out, Op::BroadcastSpatial { v }, &[v])
    }

    // ------------------------------------------------------------------
    // dense layers
    // ------------------------------------------------------------------

    /// 2-D convolution, `x: [ci,h,w]`, `w: [co,ci,kh,kw]`, `b: [co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, dilation: usize, pad: usize) -> Var {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        assert_eq!(xs.len(), 3);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
        let (ci, h, win) = (xs[0], xs[1], xs[2]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        assert_eq!(self.value(b).shape(), &[co]);
        let oh = (h + 2 * pad).checked_sub(dilation * (kh - 1) + 1).expect("conv2d kernel larger than padded input") / stride + 1;
        let ow = (win + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;

        let mut out = vec![T::zero(); co * oh * ow];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(b).data();
            for oc in 0..co {
                let out_plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
                out_plane.fill(bd[oc]);
                for ic in 0..ci {
                    let x_plane = &xd[ic * h * win..(ic + 1) * h * win];
                    for ku in 0..kh {
                        let a = pad as isize - (ku * dilation) as isize;
                        let i0 = ceil_div(a, stride as isize).max(0) as usize;
                        let i1 = floor_div(h as isize - 1 + a, stride as isize).min(oh as isize - 1);
                        if (i1 as isize) < i0 as isize {
                            continue;
                        }
                        let i1 = i1 as usize;
                        for kv in 0..kw {
                            let wv = wd[((oc * ci + ic) * kh + ku) * kw + kv];
                            let bcol = pad as isize - (kv * dilation) as isize;
                            let j0 = ceil_div(bcol, stride as isize).max(0) as usize;
                            let j1 = floor_div(win as isize - 1 + bcol, stride as isize).min(ow as isize - 1);
                            if (j1 as isize) < j0 as isize {
                                continue;
                            }
                            let j1 = j1 as usize;
                            let xoff = (kv * dilation) as isize - pad as isize;
                            for i in i0..=i1 {
                                let iy = (i * stride) as isize - pad as isize + (ku * dilation) as isize;
                                let xrow = &x_plane[iy as usize * win..(iy as usize + 1) * win];
                                let orow = &mut out_plane[i * ow..(i + 1) * ow];
                                if stride == 1 {
                                    let base = &xrow[(j0 as isize + xoff) as usize..];
                                    for (o, &xv) in orow[j0..=j1].iter_mut().zip(base.iter()) {
                                        *o = *o + wv * xv;
                                    }
                                } else {
                                    for j in j0..=j1 {
                                        let jx = (j * stride) as isize + xoff;
                                        orow[j] = orow[j] + wv * xrow[jx as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let v = Tensor::new(&[co, oh, ow], out).unwrap();
        self.push_op(v, Op::Conv2d { x, w, b, stride, dilation, pad }, &[x, w, b])
    }

    /// Per-channel spatial normalization with learnable scale and shift.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert_eq!(self.value(gamma).shape(), &[c]);
        assert_eq!(self.value(beta).shape(), &[c]);
        let n = T::from(h * w).unwrap();
        let eps = T::from(1e-5).unwrap();

        let mut out = vec![T::zero(); c * h * w];
        let mut means = vec![T::zero(); c];
        let mut inv_stds = vec![T::zero(); c];
        {
            let xd = self.value(x).data();
            let gd = self.value(gamma).data();
            let bd = self.value(beta).data();
            for ch in 0..c {
                let plane = &xd[ch * h * w..(ch + 1) * h * w];
                let mean = plane.iter().copied().fold(T::zero(), |s, v| s + v) / n;
                let var = plane
                    .iter()
                    .map(|&v| {
                        let d = v - mean;
                        d * d
                    })
                    .fold(T::zero(), |s, v| s + v)
                    / n;
                let inv = (var + eps).sqrt().recip();
                means[ch] = mean;
                inv_stds[ch] = inv;
                let (g, b) = (gd[ch], bd[ch]);
                for (o, &v) in out[ch * h * w..(ch + 1) * h * w].iter_mut().zip(plane) {
                    *o = g * (v - mean) * inv + b;
                }
            }
        }
        let v = Tensor::new(&[c, h, w], out).unwrap();
        self.push_op(v, Op::InstanceNorm { x, gamma, beta, mean: means, inv_std: inv_stds }, &[x, gamma, beta])
    }

    /// Row-wise fully connected layer: `x: [r,i] · w: [o,i]ᵀ + b: [o] -> [r,o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        assert_eq!(xs.len(), 2);
        assert_eq!(ws.len(), 2);
        assert_eq!(xs[1], ws[1], "linear input width mismatch");
        let (r, inp, o) = (xs[0], xs[1], ws[0]);
        assert_eq!(self.value(b).shape(), &[o]);
        let mut out = vec![T::zero(); r * o];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(b).data();
            for row in 0..r {
                let xrow = &xd[row * inp..(row + 1) * inp];
                let orow = &mut out[row * o..(row + 1) * o];
                for (oi, ov) in orow.iter_mut().enumerate() {
                    let wrow = &wd[oi * inp..(oi + 1) * inp];
                    let mut acc = bd[oi];
                    for (xv, wv) in xrow.iter().zip(wrow) {
                        acc = acc + *xv * *wv;
                    }
                    *ov = acc;
                }
            }
        }
        let v = Tensor::new(&[r, o], out).unwrap();
        self.push_op(v, Op::Linear { x, w, b }, &[x, w, b])
    }

    // ------------------------------------------------------------------
    // pooling / selection
    // ------------------------------------------------------------------

    /// Mean of each channel over the pixels where `mask` is set.
    /// Caller guarantees `mask` has at least one set pixel.
    pub fn masked_mean(&mut self, x: Var, mask: &[u8]) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        assert_eq!(mask.len(), hw);
        let count = mask.iter().filter(|&&m| m != 0).count();
        assert!(count > 0, "masked_mean over empty mask");
        let cnt = T::from(count).unwrap();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); c];
        for ch in 0..c {
            let plane = &xd[ch * hw..(ch + 1) * hw];
            let mut acc = T::zero();
            for (v, &m) in plane.iter().zip(mask) {
                if m != 0 {
                    acc = acc + *v;
                }
            }
            out[ch] = acc / cnt;
        }
        let v = Tensor::new(&[c], out).unwrap();
        self.push_op(v, Op::MaskedMean { x, mask: mask.to_vec(), count }, &[x])
    }

    /// Rebuild a `[c,h,w]` map by picking, for every pixel `p`, the source
    /// column `index[p]` of `x` (linear spatial index).
    pub fn gather_cols(&mut self, x: Var, index: Vec<usize>) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        assert_eq!(index.len(), hw);
        debug_assert!(index.iter().all(|&i| i < hw));
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); c * hw];
        for ch in 0..c {
            let src = &xd[ch * hw..(ch + 1) * hw];
            let dst = &mut out[ch * hw..(ch + 1) * hw];
            for (d, &i) in dst.iter_mut().zip(&index) {
                *d = src[i];
            }
        }
        let v = Tensor::new(&xs, out).unwrap();
        self.push_op(v, Op::GatherCols { x, index }, &[x])
    }

    /// Column-wise maximum of a `[n,m]` matrix, first maximum wins ties.
    pub fn max_axis0(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2);
        let (n, m) = (xs[0], xs[1]);
        assert!(n > 0);
        let xd = self.value(x).data();
        let mut best = xd[..m].to_vec();
        let mut argmax = vec![0usize; m];
        for i in 1..n {
            let row = &xd[i * m..(i + 1) * m];
            for j in 0..m {
                if row[j] > best[j] {
                    best[j] = row[j];
                    argmax[j] = i;
                }
            }
        }
        let v = Tensor::new(&[m], best).unwrap();
        self.push_op(v, Op::MaxAxis0 { x, argmax }, &[x])
    }

    /// Stride-1 same-size max pooling with an explicit value for cells
    /// outside the image. Window cells are scanned row-major with the pad
    /// value standing in for out-of-bounds positions, so ties resolve to the
    /// first scanned cell.
    pub fn max_pool(&mut self, x: Var, k: usize, pad_value: T) -> Var {
        assert!(k % 2 == 1, "max_pool kernel must be odd");
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let r = (k / 2) as isize;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); c * h * w];
        let mut argmax = vec![PAD_WON; c * h * w];
        for ch in 0..c {
            let plane = &xd[ch * h * w..(ch + 1) * h * w];
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut best = T::neg_infinity();
                    let mut arg = PAD_WON;
                    for u in -r..=r {
                        for v in -r..=r {
                            let (y, xcol) = (i + u, j + v);
                            let inside = y >= 0 && y < h as isize && xcol >= 0 && xcol < w as isize;
                            let val = if inside { plane[(y * w as isize + xcol) as usize] } else { pad_value };
                            if val > best {
                                best = val;
                                arg = if inside { (y * w as isize + xcol) as usize } else { PAD_WON };
                            }
                        }
                    }
                    let o = (i * w as isize + j) as usize;
                    out[ch * h * w + o] = best;
                    argmax[ch * h * w + o] = if arg == PAD_WON { PAD_WON } else { ch * h * w + arg };
                }
            }
        }
        let v = Tensor::new(&xs, out).unwrap();
        self.push_op(v, Op::MaxPool { x, argmax }, &[x])
    }

    // ------------------------------------------------------------------
    // similarity
    // ------------------------------------------------------------------

    /// Cosine similarity of every row of `rows: [n,c]` against the feature
    /// column at every pixel of `features: [c,h,w]`, giving `[n,h,w]`.
    /// Caller guarantees no zero row and no zero feature column.
    pub fn cosine_maps(&mut self, rows: Var, features: Var) -> Var {
        let (ps, fs) = (self.value(rows).shape().to_vec(), self.value(features).shape().to_vec());
        assert_eq!(ps.len(), 2);
        assert_eq!(fs.len(), 3);
        assert_eq!(ps[1], fs[0], "cosine_maps dimension mismatch");
        let (n, c, hw) = (ps[0], ps[1], fs[1] * fs[2]);
        let pd = self.value(rows).data();
        let fd = self.value(features).data();

        let row_norms: Vec<T> = (0..n)
            .map(|k| {
                pd[k * c..(k + 1) * c].iter().map(|&v| v * v).fold(T::zero(), |s, v| s + v).sqrt()
            })
            .collect();
        let mut col_norms = vec![T::zero(); hw];
        for ch in 0..c {
            for (acc, &v) in col_norms.iter_mut().zip(&fd[ch * hw..(ch + 1) * hw]) {
                *acc = *acc + v * v;
            }
        }
        for v in col_norms.iter_mut() {
            *v = v.sqrt();
        }
        debug_assert!(row_norms.iter().all(|v| *v > T::zero()), "zero prototype row");
        debug_assert!(col_norms.iter().all(|v| *v > T::zero()), "zero feature column");

        let mut out = vec![T::zero(); n * hw];
        for k in 0..n {
            let prow = &pd[k * c..(k + 1) * c];
            let orow = &mut out[k * hw..(k + 1) * hw];
            for (ch, &pv) in prow.iter().enumerate() {
                for (o, &fv) in orow.iter_mut().zip(&fd[ch * hw..(ch + 1) * hw]) {
                    *o = *o + pv * fv;
                }
            }
            let rn = row_norms[k];
            for (o, &cn) in orow.iter_mut().zip(&col_norms) {
                *o = *o / (rn * cn);
            }
        }
        let v = Tensor::new(&[n, fs[1], fs[2]], out).unwrap();
        self.push_op(v, Op::CosineMaps { rows, features }, &[rows, features])
    }

    /// Pairwise cosine similarity between rows of `a: [n,c]` and `b: [m,c]`.
    pub fn cosine_pairs(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[1], sb[1], "cosine_pairs dimension mismatch");
        let (n, m, c) = (sa[0], sb[0], sa[1]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let norm = |row: &[T]| row.iter().map(|&v| v * v).fold(T::zero(), |s, v| s + v).sqrt();
        let na: Vec<T> = (0..n).map(|k| norm(&ad[k * c..(k + 1) * c])).collect();
        let nb: Vec<T> = (0..m).map(|k| norm(&bd[k * c..(k + 1) * c])).collect();
        debug_assert!(na.iter().chain(nb.iter()).all(|v| *v > T::zero()), "zero row in cosine_pairs");
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let ra = &ad[i * c..(i + 1) * c];
            for j in 0..m {
                let rb = &bd[j * c..(j + 1) * c];
                let mut dot = T::zero();
                for (x, y) in ra.iter().zip(rb) {
                    dot = dot + *x * *y;
                }
                out[i * m + j] = dot / (na[i] * nb[j]);
            }
        }
        let v = Tensor::new(&[n, m], out).unwrap();
        self.push_op(v, Op::CosinePairs { a, b }, &[a, b])
    }

    // ------------------------------------------------------------------
    // resampling
    // ------------------------------------------------------------------

    /// Bilinear resize of `[c,h,w]` to `[c,out_h,out_w]` with half-pixel
    /// center alignment.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let taps_y = bilinear_taps(h, out_h);
        let taps_x = bilinear_taps(w, out_w);
        let mut out = vec![T::zero(); c * out_h * out_w];
        for ch in 0..c {
            let plane = &xd[ch * h * w..(ch + 1) * h * w];
            let oplane = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for (i, &(y0, y1, wy)) in taps_y.iter().enumerate() {
                let wy = T::from(wy).unwrap();
                let one_wy = T::one() - wy;
                let r0 = &plane[y0 * w..y0 * w + w];
                let r1 = &plane[y1 * w..y1 * w + w];
                let orow = &mut oplane[i * out_w..(i + 1) * out_w];
                for (o, &(x0, x1, wx)) in orow.iter_mut().zip(&taps_x) {
                    let wx = T::from(wx).unwrap();
                    let one_wx = T::one() - wx;
                    let top = r0[x0] * one_wx + r0[x1] * wx;
                    let bot = r1[x0] * one_wx + r1[x1] * wx;
                    *o = top * one_wy + bot * wy;
                }
            }
        }
        let v = Tensor::new(&[c, out_h, out_w], out).unwrap();
        self.push_op(v, Op::BilinearResize { x }, &[x])
    }

    // ------------------------------------------------------------------
    // reductions and losses
    // ------------------------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().fold(T::zero(), |a, v| a + v);
        self.push_op(Tensor::scalar(s), Op::SumAll { x }, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from(self.value(x).numel()).unwrap();
        let s = self.value(x).data().iter().copied().fold(T::zero(), |a, v| a + v) / n;
        self.push_op(Tensor::scalar(s), Op::MeanAll { x }, &[x])
    }

    /// Mean binary cross-entropy of foreground probabilities against a
    /// binary target, with probabilities clamped to `[eps, 1-eps]`.
    pub fn bce(&mut self, p: Var, gt: &[u8], eps: T) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.numel(), gt.len(), "bce target length mismatch");
        let n = T::from(gt.len()).unwrap();
        let one = T::one();
        let mut acc = T::zero();
        for (&prob, &t) in pv.data().iter().zip(gt) {
            let q = clamp(prob, eps, one - eps);
            let term = if t != 0 { q.ln() } else { (one - q).ln() };
            acc = acc + term;
        }
        let v = Tensor::scalar(-acc / n);
        self.push_op(v, Op::Bce { p, gt: gt.to_vec(), eps }, &[p])
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut acc = T::zero();
        for &(v, c) in terms {
            debug_assert_eq!(self.value(v).numel(), 1);
            acc = acc + c * self.value(v).item();
        }
        let parents: Vec<Var> = terms.iter().map(|&(v, _)| v).collect();
        self.push_op(Tensor::scalar(acc), Op::WeightedSum { terms: terms.to_vec() }, &parents)
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Reverse sweep from a scalar root. Gradients accumulate on every node
    /// reachable from differentiable leaves; earlier gradients are cleared.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.nodes[root.0].value.numel(), 1, "backward root must be scalar");
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(T::one()));
        for id in (0..=root.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &rest[0];
            let g = node.grad.as_ref().unwrap();
            backprop(before, node, g);
        }
    }
}

fn clamp<T: Real>(v: T, lo: T, hi: T) -> T {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

fn stable_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Source taps and interpolation weight for one output coordinate.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let s = (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
            let s = s.clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Borrow two distinct nodes mutably.
fn pair_mut<'a, T: Real>(nodes: &'a mut [Node<T>], i: usize, j: usize) -> (&'a mut Node<T>, &'a mut Node<T>) {
    assert_ne!(i, j, "this op does not support the same node in both argument slots");
    if i < j {
        let (l, r) = nodes.split_at_mut(j);
        (&mut l[i], &mut r[0])
    } else {
        let (l, r) = nodes.split_at_mut(i);
        (&mut r[0], &mut l[j])
    }
}

/// Gradient buffer of a parent node, allocated on first touch.
/// Returns `None` when the parent does not need gradients.
fn grad_slice<'a, T: Real>(node: &'a mut Node<T>) -> Option<&'a mut [T]> {
    if !node.needs_grad {
        return None;
    }
    if node.grad.is_none() {
        node.grad = Some(Tensor::zeros(node.value.shape()));
    }
    Some(node.grad.as_mut().unwrap().data_mut())
}

#[allow(clippy::too_many_lines)]
fn backprop<T: Real>(before: &mut [Node<T>], node: &Node<T>, g: &Tensor<T>) {
    match &node.op {
        Op::Leaf => {}
        Op::Relu { x } => {
            let xn = &mut before[x.0];
            let xv: Vec<T> = xn.value.data().to_vec();
            if let Some(gx) = grad_slice(xn) {
                for ((gx, &xv), &gv) in gx.iter_mut().zip(&xv).zip(g.data()) {
                    if xv > T::zero() {
                        *gx = *gx + gv;
                    }
                }
            }
        }
        Op::Sigmoid { x } => {
            let y: Vec<T> = node.value.data().to_vec();
            if let Some(gx) = grad_slice(&mut before[x.0]) {
                for ((gx, &yv), &gv) in gx.iter_mut().zip(&y).zip(g.data()) {
                    *gx = *gx + gv * yv * (T::one() - yv);
                }
            }
        }
        Op::Add { a, b } => {
            for &p in &[a, b] {
                if let Some(gp) = grad_slice(&mut before[p.0]) {
                    for (gp, &gv) in gp.iter_mut().zip(g.data()) {
                        *gp = *gp + gv;
                    }
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(ga) = grad_slice(&mut before[a.0]) {
                for (ga, &gv) in ga.iter_mut().zip(g.data()) {
                    *ga = *ga + gv;
                }
            }
            if let Some(gb) = grad_slice(&mut before[b.0]) {
                for (gb, &gv) in gb.iter_mut().zip(g.data()) {
                    *gb = *gb - gv;
                }
            }
        }
        Op::Mul { a, b } => {
            if a.0 == b.0 {
                // squaring: d(a*a)/da = 2a
                let av: Vec<T> = before[a.0].value.data().to_vec();
                if let Some(ga) = grad_slice(&mut before[a.0]) {
                    let two = T::one() + T::one();
                    for ((ga, &av), &gv) in ga.iter_mut().zip(&av).zip(g.data()) {
                        *ga = *ga + two * gv * av;
                    }
                }
                return;
            }
            let (an, bn) = pair_mut(before, a.0, b.0);
            if an.needs_grad {
                let bv = bn.value.data();
                let ga = grad_slice(an).unwrap();
                for ((ga, &bv), &gv) in ga.iter_mut().zip(bv).zip(g.data()) {
                    *ga = *ga + gv * bv;
                }
            }
            if bn.needs_grad {
                let av = an.value.data().to_vec();
                let gb = grad_slice(bn).unwrap();
                for ((gb, &av), &gv) in gb.iter_mut().zip(&av).zip(g.data()) {
                    *gb = *gb + gv * av;
                }
            }
        }
        Op::Div { a, b } => {
            if a.0 == b.0 {
                // a/a is constant 1, the slot derivatives cancel exactly
                let _ = grad_slice(&mut before[a.0]);
                return;
            }
            let y: Vec<T> = node.value.data().to_vec();
            let (an, bn) = pair_mut(before, a.0, b.0);
            let bv: Vec<T> = bn.value.data().to_vec();
            if let Some(ga) = grad_slice(an) {
                for ((ga, &bv), &gv) in ga.iter_mut().zip(&bv).zip(g.data()) {
                    *ga = *ga + gv / bv;
                }
            }
            if let Some(gb) = grad_slice(bn) {
                for (((gb, &bv), &yv), &gv) in gb.iter_mut().zip(&bv).zip(&y).zip(g.data()) {
                    *gb = *gb - gv * yv / bv;
                }
            }
        }
        Op::Affine { x, mul } => {
            if let Some(gx) = grad_slice(&mut before[x.0]) {
                for (gx, &gv) in gx.iter_mut().zip(g.data()) {
                    *gx = *gx + *mul * gv;
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = grad_slice(&mut before[x.0]) {
                for (gx, &gv) in gx.iter_mut().zip(g.data()) {
                    *gx = *gx + gv;
                }
            }
        }
        Op::Transpose2 { x } => {
            let (b, a) = (node.value.shape()[0], node.value.shape()[1]);
            if let Some(gx) = grad_slice(&mut before[x.0]) {
                for j in 0..b {
                    for i in 0..a {
                        gx[i * b + j] = gx[i * b + j] + g.data()[j * a + i];
                    }
                }
            }
        }
        Op::ConcatChannels { parts } | Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = before[p.0].value.numel();
                if let Some(gp) = grad_slice(&mut before[p.0]) {
                    for (gp, &gv) in gp.iter_mut().zip(&g.data()[offset..offset + len]) {
                        *gp = *gp + gv;
                    }
                }
                offset += len;
            }
        }
        Op::BroadcastSpatial { v } => {
            let shape = node.value.shape();
            let (c, hw) = (shape[0], shape[1] * shape[2]);
            if let Some(gv) = grad_slice(&mut before[v.0]) {
                for (ch, gv) in gv.iter_mut().enumerate().take(c).map(|(i, g)| (i, g)) {
                    let mut acc = T::zero();
                    for &x in &g.data()[ch * hw..(ch + 1) * hw] {
                        acc = acc + x;
                    }
                    *gv = *gv + acc;
                }
            }
        }
        Op::MaskedMean { x, mask, count } => {
            let shape = before[x.0].value.shape().to_vec();
            let (c, hw) = (shape[0], shape[1] * shape[2]);
            let inv = T::from(*count).unwrap().recip();
            if let Some(gx) = grad_slice(&mut before[x.0]) {
                for ch in 0..c {
                    let gv = g.data()[ch] * inv;
                    let plane = &mut gx[ch * hw..(ch + 1) * hw];
                    for (gp, &m) in plane.iter_mut().zip(mask) {
                        if m != 0 {
                            *gp = *gp + gv;
                        }
                    }
                }
            }
        }
        Op::GatherCols { x, index } => {
            let shape = before[x.0].value.shape().to_vec();
            let (c, hw) = (shape[0], shape[1] * shape[2]);
            if let Some(gx) = grad_slice(&mut before[x.0]) {
                for ch in 0..c {
                    let grow = &g.data()[ch * hw..(ch + 1) * hw];
                    let gplane = &mut gx[ch * hw..(ch + 1) * hw];
                    for (p, &src) in index.iter().enumerate() {
                        gplane[src] = gplane[src] + grow[p];
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, stride, dilation, pad } => {
            conv2d_backward(before, node, g, *x, *w, *b, *stride, *dilation, *pad);
        }
        Op::InstanceNorm { x, gamma, beta, mean, inv_std } => {
            let shape = node.value.shape().to_vec();
            let (c, hw) = (shape[0], shape[1] * shape[2]);
            let n = T::from(hw).unwrap();
            let gamma_vals: Vec<T> = before[gamma.0].value.data().to_vec();
            let x_vals: Vec<T> = before[x.0].value.data().to_vec();

            if let Some(gb) = grad_slice(&mut before[beta.0]) {
                for ch in 0..c {
                    let mut acc = T::zero();
                    for &gv in &g.data()[ch * hw..(ch + 1) * hw] {
                        acc = acc + gv;
                    }
                    gb[ch] = gb[ch] + acc;
                }
            }
            if let Some(gg) = grad_slice(&mut before[gamma.0]) {
                for ch in 0..c {
                    let (mu, inv) = (mean[ch], inv_std[ch]);
                    let mut acc = T::zero();
                    for (&gv, &xv) in g.data()[ch * hw..(ch + 1) * hw].iter().zip(&x_vals[ch * hw..(ch + 1) * hw]) {
                        acc = acc + gv * (xv - mu) * inv;
                    }
                    gg[ch] = gg[ch] + acc;
                }
            }
            if let Some(gx) = grad_slice(&mut before[x.0]) {
                for ch in 0..c {
                    let (mu, inv) = (mean[ch], inv_std[ch]);
                    let grow = &g.data()[ch * hw..(ch + 1) * hw];
                    let xrow = &x_vals[ch * hw..(ch + 1) * hw];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for (&gv, &xv) in grow.iter().zip(xrow) {
                        let xh = (xv - mu) * inv;
                        m1 = m1 + gv;
                        m2 = m2 + gv * xh;
                    }
                    m1 = m1 / n;
                    m2 = m2 / n;
                    let scale = gamma_vals[ch] * inv;
                    let gplane = &mut gx[ch * hw..(ch + 1) * hw];
                    for ((gp, &gv), &xv) in gplane.iter_mut().zip(grow).zip(xrow) {
                        let xh = (xv - mu) * inv;
                        *gp = *gp + scale * (gv - m1 - xh * m2);
                    }
                }
            }
        }
        Op::Linear { x, w, b } => {
            let (r, o) = (node.value.shape()[0], node.value.shape()[1]);
            let inp = before[x.0].value.shape()[1];
            let x_vals: Vec<T> = before[x.0].value.data().to_vec();
            let w_vals: Vec<T> = before[w.0].value.data().to_vec();
            if let Some(gb) = grad_slice(&mut before[b.0]) {
                for row in 0..r {
                    for (gb, &gv) in gb.iter_mut().zip(&g.data()[row * o..(row + 1) * o]) {
                        *gb = *gb + gv;
                    }
                }
            }
            if let Some(gw) = grad_slice(&mut before[w.0]) {
                for row in 0..r {
                    let xrow = &x_vals[row * inp..(row + 1) * inp];
                    let grow = &g.data()[row * o..(row + 1) * o];
                    for (oi, &gv) in grow.iter().enumerate() {
                        let gwrow = &mut gw[oi * inp..(oi + 1) * inp];
                        for (gw, &xv) in gwrow.iter_mut().zip(xrow) {
                            *gw = *gw + gv * xv;
                        }
                    }
                }
            }
            if let Some(gx) = grad_slice(&mut before[x.0]) {
                for row in 0..r {
                    let gxrow = &mut gx[row * inp..(row + 1) * inp];
                    let grow = &g.data()[row * o..(row + 1) * o];
                    for (oi, &gv) in grow.iter().enumerate() {
                        let wrow = &w_vals[oi * inp..(oi + 1) * inp];
                        for (gx, &wv) in gxrow.iter_mut().zip(wrow) {
                            *gx = *gx + gv * wv;
                        }
                    }
                }
            }
        }
        Op::MaxAxis0 { x, argmax } => {
            let m = node.value.numel();
            if let Some(gx) = grad_slice(&mut before[x.0]) {
                for j in 0..m {
                    let idx = argmax[j] * m + j;
                    gx[idx] = gx[idx] + g.data()[j];
                }
            }
        }
        Op::MaxPool { x, argmax } => {
            if let Some(gx) = grad_slice(&mut before[x.0]) {
                for (&arg, &gv) in argmax.iter().zip(g.data()) {
                    if arg != PAD_WON {
                        gx[arg] = gx[arg] + gv;
                    }
                }
            }
        }
        Op::CosineMaps { rows, features } => {
            cosine_maps_backward(before, node, g, *rows, *features);
        }
        Op::CosinePairs { a, b } => {
            cosine_pairs_backward(before, node, g, *a, *b);
        }
        Op::BilinearResize { x } => {
            let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
            let shape = before[x.0].value.shape().to_vec();
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let taps_y = bilinear_taps(h, oh);
            let taps_x = bilinear_taps(w, ow);
            if let Some(gx) = grad_slice(&mut before[x.0]) {
                for ch in 0..c {
                    let gplane = &mut gx[ch * h * w..(ch + 1) * h * w];
                    let grow_all = &g.data()[ch * oh * ow..(ch + 1) * oh * ow];
                    for (i, &(y0, y1, wy)) in taps_y.iter().enumerate() {
                        let wy = T::from(wy).unwrap();
                        let one_wy = T::one() - wy;
                        for (j, &(x0, x1, wx)) in taps_x.iter().enumerate() {
                            let gv = grow_all[i * ow + j];
                            let wx = T::from(wx).unwrap();
                            let one_wx = T::one() - wx;
                            gplane[y0 * w + x0] = gplane[y0 * w + x0] + gv * one_wy * one_wx;
                            gplane[y0 * w + x1] = gplane[y0 * w + x1] + gv * one_wy * wx;
                            gplane[y1 * w + x0] = gplane[y1 * w + x0] + gv * wy * one_wx;
                            gplane[y1 * w + x1] = gplane[y1 * w + x1] + gv * wy * wx;
                        }
                    }
                }
            }
        }
        Op::SumAll { x } => {
            let gv = g.item();
            if let Some(gx) = grad_slice(&mut before[x.0]) {
                for gx in gx.iter_mut() {
                    *gx = *gx + gv;
                }
            }
        }
        Op::MeanAll { x } => {
            let n = T::from(before[x.0].value.numel()).unwrap();
            let gv = g.item() / n;
            if let Some(gx) = grad_slice(&mut before[x.0]) {
                for gx in gx.iter_mut() {
                    *gx = *gx + gv;
                }
            }
        }
        Op::Bce { p, gt, eps } => {
            let n = T::from(gt.len()).unwrap();
            let gv = g.item();
            let one = T::one();
            let pn = &mut before[p.0];
            let pv: Vec<T> = pn.value.data().to_vec();
            if let Some(gp) = grad_slice(pn) {
                for ((gp, &prob), &t) in gp.iter_mut().zip(&pv).zip(gt) {
                    if prob < *eps || prob > one - *eps {
                        continue;
                    }
                    let d = if t != 0 { one / prob } else { -(one / (one - prob)) };
                    *gp = *gp - gv * d / n;
                }
            }
        }
        Op::WeightedSum { terms } => {
            let gv = g.item();
            for &(p, c) in terms {
                if let Some(gp) = grad_slice(&mut before[p.0]) {
                    gp[0] = gp[0] + c * gv;
                }
            }
        }
    }
}

fn conv2d_backward<T: Real>(
    before: &mut [Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    dilation: usize,
    pad: usize,
) {
    let (co, oh, ow) = {
        let s = node.value.shape();
        (s[0], s[1], s[2])
    };
    let (ci, h, win) = {
        let s = before[x.0].value.shape();
        (s[0], s[1], s[2])
    };
    let (kh, kw) = {
        let s = before[w.0].value.shape();
        (s[2], s[3])
    };

    if let Some(gb) = grad_slice(&mut before[b.0]) {
        for oc in 0..co {
            let mut acc = T::zero();
            for &gv in &g.data()[oc * oh * ow..(oc + 1) * oh * ow] {
                acc = acc + gv;
            }
            gb[oc] = gb[oc] + acc;
        }
    }

    let x_needs = before[x.0].needs_grad;
    let w_needs = before[w.0].needs_grad;
    if !x_needs && !w_needs {
        return;
    }

    // x and w are distinct nodes in every call site; borrow both at once so
    // the weight-gradient and input-gradient loops can share row traversal.
    let (xn, wn) = pair_mut(before, x.0, w.0);
    let x_vals: Vec<T> = xn.value.data().to_vec();
    let w_vals: Vec<T> = wn.value.data().to_vec();
    let gw = if w_needs { Some(grad_slice(wn).unwrap()) } else { None };
    let gx = if x_needs { Some(grad_slice(xn).unwrap()) } else { None };
    let mut gw = gw;
    let mut gx = gx;

    for oc in 0..co {
        let gplane = &g.data()[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..ci {
            let x_plane = &x_vals[ic * h * win..(ic + 1) * h * win];
            for ku in 0..kh {
                let a = pad as isize - (ku * dilation) as isize;
                let i0 = ceil_div(a, stride as isize).max(0) as usize;
                let i1 = floor_div(h as isize - 1 + a, stride as isize).min(oh as isize - 1);
                if (i1 as isize) < i0 as isize {
                    continue;
                }
                let i1 = i1 as usize;
                for kv in 0..kw {
                    let widx = ((oc * ci + ic) * kh + ku) * kw + kv;
                    let wv = w_vals[widx];
                    let bcol = pad as isize - (kv * dilation) as isize;
                    let j0 = ceil_div(bcol, stride as isize).max(0) as usize;
                    let j1 = floor_div(win as isize - 1 + bcol, stride as isize).min(ow as isize - 1);
                    if (j1 as isize) < j0 as isize {
                        continue;
                    }
                    let j1 = j1 as usize;
                    let xoff = (kv * dilation) as isize - pad as isize;
                    let mut wacc = T::zero();
                    for i in i0..=i1 {
                        let iy = (i * stride) as isize - pad as isize + (ku * dilation) as isize;
                        let row_base = iy as usize * win;
                        let grow = &gplane[i * ow..(i + 1) * ow];
                        match (&mut gx, w_needs) {
                            (Some(gx), true) => {
                                let gxplane = &mut gx[ic * h * win + row_base..ic * h * win + row_base + win];
                                for j in j0..=j1 {
                                    let jx = ((j * stride) as isize + xoff) as usize;
                                    let gv = grow[j];
                                    wacc = wacc + gv * x_plane[row_base + jx];
                                    gxplane[jx] = gxplane[jx] + wv * gv;
                                }
                            }
                            (Some(gx), false) => {
                                let gxplane = &mut gx[ic * h * win + row_base..ic * h * win + row_base + win];
                                for j in j0..=j1 {
                                    let jx = ((j * stride) as isize + xoff) as usize;
                                    gxplane[jx] = gxplane[jx] + wv * grow[j];
                                }
                            }
                            (None, true) => {
                                for j in j0..=j1 {
                                    let jx = ((j * stride) as isize + xoff) as usize;
                                    wacc = wacc + grow[j] * x_plane[row_base + jx];
                                }
                            }
                            (None, false) => {}
                        }
                    }
                    if let Some(gw) = &mut gw {
                        gw[widx] = gw[widx] + wacc;
                    }
                }
            }
        }
    }
}

fn cosine_maps_backward<T: Real>(before: &mut [Node<T>], node: &Node<T>, g: &Tensor<T>, rows: Var, features: Var) {
    let (n, hw) = {
        let s = node.value.shape();
        (s[0], s[1] * s[2])
    };
    let c = before[rows.0].value.shape()[1];
    let s_vals = node.value.data();

    let (pn, fnode) = pair_mut(before, rows.0, features.0);
    let p_vals: Vec<T> = pn.value.data().to_vec();
    let f_vals: Vec<T> = fnode.value.data().to_vec();

    let row_norms: Vec<T> = (0..n)
        .map(|k| p_vals[k * c..(k + 1) * c].iter().map(|&v| v * v).fold(T::zero(), |s, v| s + v).sqrt())
        .collect();
    let mut col_norms = vec![T::zero(); hw];
    for ch in 0..c {
        for (acc, &v) in col_norms.iter_mut().zip(&f_vals[ch * hw..(ch + 1) * hw]) {
            *acc = *acc + v * v;
        }
    }
    for v in col_norms.iter_mut() {
        *v = v.sqrt();
    }

    // a[pix] = sum_k g*s, used by the feature gradient; b[k] = sum_pix g*s.
    let mut a = vec![T::zero(); hw];
    let mut bsum = vec![T::zero(); n];
    for k in 0..n {
        let grow = &g.data()[k * hw..(k + 1) * hw];
        let srow = &s_vals[k * hw..(k + 1) * hw];
        let mut acc = T::zero();
        for ((&gv, &sv), av) in grow.iter().zip(srow).zip(a.iter_mut()) {
            acc = acc + gv * sv;
            *av = *av + gv * sv;
        }
        bsum[k] = acc;
    }

    if pn.needs_grad {
        let gp = grad_slice(pn).unwrap();
        let mut gn = vec![T::zero(); hw];
        for k in 0..n {
            let grow = &g.data()[k * hw..(k + 1) * hw];
            for ((gnv, &gv), &cn) in gn.iter_mut().zip(grow).zip(&col_norms) {
                *gnv = gv / cn;
            }
            let rn = row_norms[k];
            let coeff = bsum[k] / (rn * rn);
            for ch in 0..c {
                let frow = &f_vals[ch * hw..(ch + 1) * hw];
                let mut dot = T::zero();
                for (&gnv, &fv) in gn.iter().zip(frow) {
                    dot = dot + gnv * fv;
                }
                let idx = k * c + ch;
                gp[idx] = gp[idx] + dot / rn - coeff * p_vals[idx];
            }
        }
    }

    if fnode.needs_grad {
        let gf = grad_slice(fnode).unwrap();
        let mut tmp = vec![T::zero(); c * hw];
        for k in 0..n {
            let grow = &g.data()[k * hw..(k + 1) * hw];
            let rn = row_norms[k];
            for ch in 0..c {
                let pv = p_vals[k * c + ch] / rn;
                let trow = &mut tmp[ch * hw..(ch + 1) * hw];
                for (tv, &gv) in trow.iter_mut().zip(grow) {
                    *tv = *tv + gv * pv;
                }
            }
        }
        for ch in 0..c {
            let frow = &f_vals[ch * hw..(ch + 1) * hw];
            let trow = &tmp[ch * hw..(ch + 1) * hw];
            let grow = &mut gf[ch * hw..(ch + 1) * hw];
            for (((gfv, &tv), (&fv, &av)), &cn) in
                grow.iter_mut().zip(trow).zip(frow.iter().zip(&a)).zip(&col_norms)
            {
                *gfv = *gfv + tv / cn - fv * av / (cn * cn);
            }
        }
    }
}

fn cosine_pairs_backward<T: Real>(before: &mut [Node<T>], node: &Node<T>, g: &Tensor<T>, a: Var, b: Var) {
    let (n, m) = {
        let s = node.value.shape();
        (s[0], s[1])
    };
    let c = before[a.0].value.shape()[1];
    let s_vals = node.value.data();
    // Contribution buffers are built before any mutable borrow so that the
    // same node may appear in both argument slots (self-similarity).
    let a_needs = before[a.0].needs_grad;
    let b_needs = before[b.0].needs_grad;
    if !a_needs && !b_needs {
        return;
    }
    let a_vals: Vec<T> = before[a.0].value.data().to_vec();
    let b_vals: Vec<T> = before[b.0].value.data().to_vec();
    let norm = |row: &[T]| row.iter().map(|&v| v * v).fold(T::zero(), |s, v| s + v).sqrt();
    let na: Vec<T> = (0..n).map(|k| norm(&a_vals[k * c..(k + 1) * c])).collect();
    let nb: Vec<T> = (0..m).map(|k| norm(&b_vals[k * c..(k + 1) * c])).collect();

    let mut ga_buf = vec![T::zero(); if a_needs { n * c } else { 0 }];
    let mut gb_buf = vec![T::zero(); if b_needs { m * c } else { 0 }];
    for i in 0..n {
        for j in 0..m {
            let gv = g.data()[i * m + j];
            if gv == T::zero() {
                continue;
            }
            let s = s_vals[i * m + j];
            let denom = na[i] * nb[j];
            if a_needs {
                for ch in 0..c {
                    let idx = i * c + ch;
                    ga_buf[idx] = ga_buf[idx] + gv * (b_vals[j * c + ch] / denom - s * a_vals[idx] / (na[i] * na[i]));
                }
            }
            if b_needs {
                for ch in 0..c {
                    let idx = j * c + ch;
                    gb_buf[idx] = gb_buf[idx] + gv * (a_vals[i * c + ch] / denom - s * b_vals[idx] / (nb[j] * nb[j]));
                }
            }
        }
    }
    if a_needs {
        let ga = grad_slice(&mut before[a.0]).unwrap();
        for (ga, &v) in ga.iter_mut().zip(&ga_buf) {
            *ga = *ga + v;
        }
    }
    if b_needs {
        let gb = grad_slice(&mut before[b.0]).unwrap();
        for (gb, &v) in gb.iter_mut().zip(&gb_buf) {
            *gb = *gb + v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences on every entry of every leaf, compared
    /// against the analytic gradient from one backward pass.
    fn check_grads(build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, shapes: &[&[usize]], seed: u64, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();

        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let root = build(&mut g, &vars);
        g.backward(root);
        let analytic: Vec<Tensor<f64>> =
            vars.iter().map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))).collect();

        let eval = |leaves: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
            let root = build(&mut g, &vars);
            g.value(root).item()
        };

        let h = 1e-5;
        for (li, base) in leaves.iter().enumerate() {
            for e in 0..base.numel() {
                let mut plus = leaves.to_vec();
                plus[li].data_mut()[e] += h;
                let mut minus = leaves.to_vec();
                minus[li].data_mut()[e] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[li].data()[e];
                let denom = numeric.abs().max(a.abs()).max(1e-6);
                assert!(
                    (numeric - a).abs() / denom < tol,
                    "leaf {li} entry {e}: numeric {numeric:.10e} vs analytic {a:.10e}"
                );
            }
        }
    }

    #[test]
    fn grad_conv2d_stride1() {
        check_grads(
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 1, 1, 1);
                g.mean_all(y)
            },
            &[&[2, 5, 4], &[3, 2, 3, 3], &[3]],
            1,
            1e-6,
        );
    }

    #[test]
    fn grad_conv2d_stride2_dilation2() {
        check_grads(
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 2, 2, 2);
                g.mean_all(y)
            },
            &[&[2, 7, 6], &[2, 2, 3, 3], &[2]],
            2,
            1e-6,
        );
    }

    #[test]
    fn grad_instance_norm() {
        check_grads(
            |g, v| {
                let y = g.instance_norm(v[0], v[1], v[2]);
                let z = g.sigmoid(y);
                g.mean_all(z)
            },
            &[&[2, 3, 4], &[2], &[2]],
            3,
            1e-5,
        );
    }

    #[test]
    fn grad_linear_relu() {
        check_grads(
            |g, v| {
                let y = g.linear(v[0], v[1], v[2]);
                let y = g.relu(y);
                let y = g.linear(y, v[3], v[4]);
                g.mean_all(y)
            },
            &[&[3, 4], &[5, 4], &[5], &[2, 5], &[2]],
            4,
            1e-5,
        );
    }

    #[test]
    fn grad_cosine_maps() {
        check_grads(
            |g, v| {
                let y = g.cosine_maps(v[0], v[1]);
                let y = g.sigmoid(y);
                g.mean_all(y)
            },
            &[&[3, 4], &[4, 2, 3]],
            5,
            1e-5,
        );
    }

    #[test]
    fn grad_cosine_pairs_max() {
        check_grads(
            |g, v| {
                let y = g.cosine_pairs(v[0], v[1]);
                let y = g.max_axis0(y);
                g.mean_all(y)
            },
            &[&[3, 4], &[5, 4]],
            6,
            1e-5,
        );
    }

    #[test]
    fn grad_maxpool_mul_chain() {
        check_grads(
            |g, v| {
                let s = g.sigmoid(v[0]);
                let comp = g.affine(s, -1.0, 1.0);
                let pooled = g.max_pool(comp, 3, 1.0);
                let band = g.mul(pooled, s);
                g.mean_all(band)
            },
            &[&[1, 5, 5]],
            7,
            1e-5,
        );
    }

    #[test]
    fn grad_transpose_linear() {
        check_grads(
            |g, v| {
                let t = g.transpose2(v[0]);
                let y = g.linear(t, v[1], v[2]);
                g.mean_all(y)
            },
            &[&[4, 3], &[2, 4], &[2]],
            12,
            1e-5,
        );
    }

    #[test]
    fn grad_bilinear_resize() {
        check_grads(
            |g, v| {
                let y = g.bilinear_resize(v[0], 7, 6);
                let y = g.sigmoid(y);
                g.mean_all(y)
            },
            &[&[2, 3, 3]],
            8,
            1e-5,
        );
    }

    #[test]
    fn grad_bce_sigmoid() {
        let gt = vec![1u8, 0, 0, 1, 1, 0];
        check_grads(
            move |g, v| {
                let p = g.sigmoid(v[0]);
                let p = g.reshape(p, &[6]);
                g.bce(p, &gt, 1e-7)
            },
            &[&[1, 2, 3]],
            9,
            1e-5,
        );
    }

    #[test]
    fn grad_masked_mean_gather_broadcast() {
        let mask = vec![1u8, 0, 1, 0, 0, 1];
        let index = vec![0usize, 2, 5, 5, 2, 0];
        check_grads(
            move |g, v| {
                let pooled = g.masked_mean(v[0], &mask);
                let wide = g.broadcast_spatial(pooled, 2, 3);
                let gathered = g.gather_cols(v[0], index.clone());
                let mixed = g.mul(wide, gathered);
                g.mean_all(mixed)
            },
            &[&[3, 2, 3]],
            10,
            1e-5,
        );
    }

    #[test]
    fn grad_concat_weighted_sum() {
        check_grads(
            |g, v| {
                let cat = g.concat_channels(&[v[0], v[1]]);
                let a = g.mean_all(cat);
                let rows = g.concat_rows(&[v[2], v[3]]);
                let b = g.sum_all(rows);
                let d = g.div(a, b);
                g.weighted_sum(&[(a, 0.25), (b, -0.5), (d, 1.5)])
            },
            &[&[1, 2, 2], &[2, 2, 2], &[2, 3], &[1, 3]],
            11,
            1e-5,
        );
    }

    #[test]
    fn aliased_binary_ops_accumulate_both_slots() {
        // same node in both argument slots: gradient is the sum of the
        // two slot derivatives
        check_grads(
            |g, vs| {
                let sq = g.mul(vs[0], vs[0]);
                g.mean_all(sq)
            },
            &[&[2, 3]],
            97,
            1e-6,
        );
        check_grads(
            |g, vs| {
                let both = g.add(vs[0], vs[0]);
                let sq = g.mul(both, both);
                g.mean_all(sq)
            },
            &[&[4]],
            98,
            1e-6,
        );
        check_grads(
            |g, vs| {
                let s = g.cosine_pairs(vs[0], vs[0]);
                g.mean_all(s)
            },
            &[&[3, 4]],
            99,
            1e-4,
        );
        // x/x and x-x are constants, so the gradient must vanish
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[3], vec![0.5, -1.2, 2.0]).unwrap());
        let div = g.div(x, x);
        let sub = g.sub(x, x);
        let sum = g.add(div, sub);
        let root = g.mean_all(sum);
        g.backward(root);
        for &gv in g.grad(x).unwrap().data() {
            assert_eq!(gv, 0.0);
        }
    }

    #[test]
    fn constants_do_not_accumulate_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::full(&[2, 2], 1.5));
        let c = g.constant(Tensor::full(&[2, 2], 2.0));
        let y = g.mul(a, c);
        let root = g.mean_all(y);
        g.backward(root);
        assert!(g.grad(c).is_none());
        assert!(g.grad(a).is_some());
    }

    #[test]
    fn sigmoid_matches_f32_and_f64() {
        let mut g64 = Graph::<f64>::new();
        let x64 = g64.leaf(Tensor::new(&[3], vec![-2.0, 0.0, 3.0]).unwrap());
        let y64 = g64.sigmoid(x64);
        let mut g32 = Graph::<f32>::new();
        let x32 = g32.leaf(Tensor::new(&[3], vec![-2.0f32, 0.0, 3.0]).unwrap());
        let y32 = g32.sigmoid(x32);
        for (a, b) in g64.value(y64).data().iter().zip(g32.value(y32).data()) {
            assert!((a - *b as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn maxpool_pad_value_wins_at_border() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 3, 3], -1.0));
        let y = g.max_pool(x, 3, 0.5);
        // every window touches the border, so the pad value wins everywhere
        // except nowhere: all nine windows include out-of-image cells except
        // the center one.
        assert_eq!(g.value(y).at3(0, 0, 0), 0.5);
        assert_eq!(g.value(y).at3(0, 1, 1), -1.0);
    }
}
