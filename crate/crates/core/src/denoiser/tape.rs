//! A small reverse-mode tape over dense `f64` tensors.
//!
//! Parameters live in a [`ParamStore`] and are referenced, not copied, by the
//! tape. Backward takes the gradient of the scalar loss with respect to one
//! output node and returns gradients for the trainable parameters.

use matrixmultiply::dgemm;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Frozen buffers take part in the forward pass but never get gradients.
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

pub type ParamId = usize;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradients indexed like the store; `None` for frozen entries.
pub type Gradients = Vec<Option<Vec<f64>>>;

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Silu(NodeId),
    Add(NodeId, NodeId),
    AddChannel(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Upsample2x(NodeId),
    Concat(NodeId, NodeId),
}

struct Node {
    shape: Vec<usize>,
    /// Empty for parameter nodes, whose values live in the store.
    value: Vec<f64>,
    op: Op,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `c[m x n] (+)= a[m x k] * b[k x n]` with explicit strides; `c` is row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    accumulate: bool,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let max_a = (m - 1) * rsa + (k.max(1) - 1) * csa;
    let max_b = (k.max(1) - 1) * rsb + (n - 1) * csb;
    assert!(k == 0 || (max_a < a.len() && max_b < b.len()));
    let beta = if accumulate { 1.0 } else { 0.0 };
    // The packed kernels are much slower with very few output rows, so
    // short-wide products are computed as the transposed product.
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        if m < 64 && n > m {
            dgemm(
                n,
                k,
                m,
                1.0,
                b.as_ptr(),
                csb as isize,
                rsb as isize,
                a.as_ptr(),
                csa as isize,
                rsa as isize,
                beta,
                c.as_mut_ptr(),
                1,
                n as isize,
            );
        } else {
            dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kx`, i.e. the
    /// `ox` with `0 <= ox * stride + kx - pad < w`.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
        let limit = self.w + self.pad - kx;
        let hi = limit.div_ceil(self.stride).min(self.wo);
        (lo.min(hi), hi)
    }

    /// Calls `f(col_offset, in_offset, count)` for every contiguous run of
    /// taps: `count` output pixels starting at `col_offset` in the column
    /// matrix, reading input from `in_offset` with the conv stride.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let p = self.pixels();
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let (lo, hi) = self.ox_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let ix0 = lo * self.stride + kx - self.pad;
                        f(row * p + oy * self.wo + lo, (c * self.h + iy as usize) * self.w + ix0, hi - lo);
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        cols.fill(0.0);
        let s = self.stride;
        self.for_each_run(|co, xo, n| {
            if s == 1 {
                cols[co..co + n].copy_from_slice(&x[xo..xo + n]);
            } else {
                for (j, dst) in cols[co..co + n].iter_mut().enumerate() {
                    *dst = x[xo + j * s];
                }
            }
        });
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let s = self.stride;
        self.for_each_run(|co, xo, n| {
            if s == 1 {
                for (d, c) in dx[xo..xo + n].iter_mut().zip(&cols[co..co + n]) {
                    *d += c;
                }
            } else {
                for (j, c) in cols[co..co + n].iter().enumerate() {
                    dx[xo + j * s] += c;
                }
            }
        });
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        match self.nodes[id].op {
            Op::Param(p) => &self.store.get(p).data,
            _ => &self.nodes[id].value,
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { shape, value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t.shape, t.data, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let shape = self.store.get(id).shape.clone();
        self.push(shape, Vec::new(), Op::Param(id))
    }

    fn conv_geom(&self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> (usize, usize, ConvGeom) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs.len(), 4, "conv input must be NCHW");
        assert_eq!(ws.len(), 4, "conv weight must be [out, in, k, k]");
        assert_eq!(xs[1], ws[1], "conv channel mismatch");
        let k = ws[2];
        let (h, wd) = (xs[2], xs[3]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        (
            xs[0],
            ws[0],
            ConvGeom {
                cin: xs[1],
                h,
                w: wd,
                k,
                stride,
                pad,
                ho,
                wo,
            },
        )
    }

    /// 2-D convolution, weight `[out, in, k, k]`, bias `[out]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let (n, cout, g) = self.conv_geom(x, w, stride, pad);
        let (kk, p) = (g.rows(), g.pixels());
        let in_len = g.cin * g.h * g.w;
        let mut out = vec![0.0; n * cout * p];
        let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { kk * p }];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            for i in 0..n {
                let xi = &xv[i * in_len..(i + 1) * in_len];
                let src: &[f64] = if g.is_pointwise() {
                    xi
                } else {
                    g.im2col(xi, &mut cols);
                    &cols
                };
                let oi = &mut out[i * cout * p..(i + 1) * cout * p];
                for (co, row) in oi.chunks_mut(p).enumerate() {
                    row.fill(bv[co]);
                }
                gemm(cout, kk, p, wv, kk, 1, src, p, 1, true, oi);
            }
        }
        self.push(vec![n, cout, g.ho, g.wo], out, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Group normalization over `(channels / groups, H, W)` with per-channel affine.
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> NodeId {
        let s = self.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        assert_eq!(c % groups, 0, "channels not divisible by groups");
        let cg = c / groups;
        let m = (cg * hw) as f64;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut out = vec![0.0; xv.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for i in 0..n {
            for g in 0..groups {
                let start = (i * c + g * cg) * hw;
                let seg = &xv[start..start + cg * hw];
                let mean = seg.iter().sum::<f64>() / m;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                for (j, &v) in seg.iter().enumerate() {
                    let ch = g * cg + j / hw;
                    out[start + j] = (v - mean) * rstd * gv[ch] + bv[ch];
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        self.push(
            s,
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
        )
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        let s = self.shape(x).to_vec();
        self.push(s, out, Op::Silu(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let s = self.shape(a).to_vec();
        self.push(s, out, Op::Add(a, b))
    }

    /// `x[n, c, :, :] + v[n, c]`.
    pub fn add_channel(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        assert_eq!(self.shape(v), &s[..2], "channel bias shape mismatch");
        let hw = s[2] * s[3];
        let vv = self.value(v);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &a)| a + vv[i / hw])
            .collect();
        self.push(s, out, Op::AddChannel(x, v))
    }

    /// `x[n, in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs[1], ws[1], "linear input mismatch");
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * fout];
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(self.value(b));
        }
        gemm(n, fin, fout, self.value(x), fin, 1, self.value(w), 1, fin, true, &mut out);
        self.push(vec![n, fout], out, Op::Linear { x, w, b })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let xv = self.value(x);
        let mut out = vec![0.0; nc * 4 * h * w];
        for p in 0..nc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(vec![s[0], s[1], 2 * h, 2 * w], out, Op::Upsample2x(x))
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa[0] == sb[0] && sa[2..] == sb[2..], "concat shape mismatch");
        let hw = sa[2] * sa[3];
        let (la, lb) = (sa[1] * hw, sb[1] * hw);
        let mut out = Vec::with_capacity(sa[0] * (la + lb));
        for i in 0..sa[0] {
            out.extend_from_slice(&self.value(a)[i * la..(i + 1) * la]);
            out.extend_from_slice(&self.value(b)[i * lb..(i + 1) * lb]);
        }
        self.push(vec![sa[0], sa[1] + sb[1], sa[2], sa[3]], out, Op::Concat(a, b))
    }

    /// Back-propagates `seed = dL/d(output)` and returns parameter gradients.
    pub fn backward(&self, output: NodeId, seed: &[f64]) -> Gradients {
        assert_eq!(seed.len(), self.value(output).len(), "seed length mismatch");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(seed.to_vec());
        let mut param_grads: Gradients = self
            .store
            .entries()
            .iter()
            .map(|e| e.trainable.then(|| vec![0.0; e.tensor.len()]))
            .collect();

        fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'g mut Vec<f64> {
            grads[id].get_or_insert_with(|| vec![0.0; len])
        }

        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    if let Some(pg) = param_grads[*p].as_mut() {
                        pg.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (n, cout, geo) = self.conv_geom(*x, *w, *stride, *pad);
                    let (kk, p) = (geo.rows(), geo.pixels());
                    let in_len = geo.cin * geo.h * geo.w;
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let mut dw = vec![0.0; cout * kk];
                    let mut db = vec![0.0; cout];
                    let mut dx = vec![0.0; n * in_len];
                    let mut cols = vec![0.0; if geo.is_pointwise() { 0 } else { kk * p }];
                    let mut dcols = vec![0.0; kk * p];
                    for i in 0..n {
                        let gi = &g[i * cout * p..(i + 1) * cout * p];
                        for (co, row) in gi.chunks(p).enumerate() {
                            db[co] += row.iter().sum::<f64>();
                        }
                        let xi = &xv[i * in_len..(i + 1) * in_len];
                        let src: &[f64] = if geo.is_pointwise() {
                            xi
                        } else {
                            geo.im2col(xi, &mut cols);
                            &cols
                        };
                        gemm(cout, p, kk, gi, p, 1, src, 1, p, true, &mut dw);
                        let dxi = &mut dx[i * in_len..(i + 1) * in_len];
                        if geo.is_pointwise() {
                            gemm(kk, cout, p, wv, 1, kk, gi, p, 1, true, dxi);
                        } else {
                            gemm(kk, cout, p, wv, 1, kk, gi, p, 1, false, &mut dcols);
                            geo.col2im_add(&dcols, dxi);
                        }
                    }
                    add_into(acc(&mut grads, *x, n * in_len), &dx);
                    add_into(acc(&mut grads, *w, cout * kk), &dw);
                    add_into(acc(&mut grads, *b, cout), &db);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    mean,
                    rstd,
                } => {
                    let s = &node.shape;
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let cg = c / groups;
                    let m = (cg * hw) as f64;
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let mut dx = vec![0.0; xv.len()];
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for i in 0..n {
                        for gr in 0..*groups {
                            let k = i * groups + gr;
                            let start = (i * c + gr * cg) * hw;
                            let (mu, rs) = (mean[k], rstd[k]);
                            let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                            for j in 0..cg * hw {
                                let ch = gr * cg + j / hw;
                                let xhat = (xv[start + j] - mu) * rs;
                                let gy = g[start + j];
                                dgamma[ch] += gy * xhat;
                                dbeta[ch] += gy;
                                let dxhat = gy * gv[ch];
                                sum_d += dxhat;
                                sum_dx += dxhat * xhat;
                            }
                            for j in 0..cg * hw {
                                let ch = gr * cg + j / hw;
                                let xhat = (xv[start + j] - mu) * rs;
                                let dxhat = g[start + j] * gv[ch];
                                dx[start + j] = rs / m * (m * dxhat - sum_d - xhat * sum_dx);
                            }
                        }
                    }
                    add_into(acc(&mut grads, *x, dx.len()), &dx);
                    add_into(acc(&mut grads, *gamma, c), &dgamma);
                    add_into(acc(&mut grads, *beta, c), &dbeta);
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let dx: Vec<f64> = xv
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gy)| {
                            let s = sigmoid(v);
                            gy * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    add_into(acc(&mut grads, *x, dx.len()), &dx);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    add_into(acc(&mut grads, *b, g.len()), &g);
                }
                Op::AddChannel(x, v) => {
                    let s = &node.shape;
                    let hw = s[2] * s[3];
                    let dv: Vec<f64> = g.chunks(hw).map(|c| c.iter().sum()).collect();
                    add_into(acc(&mut grads, *x, g.len()), &g);
                    add_into(acc(&mut grads, *v, dv.len()), &dv);
                }
                Op::Linear { x, w, b } => {
                    let (xs, ws) = (self.shape(*x), self.shape(*w));
                    let (n, fin, fout) = (xs[0], xs[1], ws[0]);
                    let mut db = vec![0.0; fout];
                    for row in g.chunks(fout) {
                        add_into(&mut db, row);
                    }
                    let mut dw = vec![0.0; fout * fin];
                    gemm(fout, n, fin, &g, 1, fout, self.value(*x), fin, 1, false, &mut dw);
                    let mut dx = vec![0.0; n * fin];
                    gemm(n, fout, fin, &g, fout, 1, self.value(*w), fin, 1, false, &mut dx);
                    add_into(acc(&mut grads, *x, dx.len()), &dx);
                    add_into(acc(&mut grads, *w, dw.len()), &dw);
                    add_into(acc(&mut grads, *b, fout), &db);
                }
                Op::Upsample2x(x) => {
                    let s = self.shape(*x);
                    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                    let mut dx = vec![0.0; nc * h * w];
                    for p in 0..nc {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dx[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    add_into(acc(&mut grads, *x, dx.len()), &dx);
                }
                Op::Concat(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let hw = sa[2] * sa[3];
                    let (la, lb) = (sa[1] * hw, sb[1] * hw);
                    let n = sa[0];
                    let mut da = Vec::with_capacity(n * la);
                    let mut dbv = Vec::with_capacity(n * lb);
                    for i in 0..n {
                        let base = i * (la + lb);
                        da.extend_from_slice(&g[base..base + la]);
                        dbv.extend_from_slice(&g[base + la..base + la + lb]);
                    }
                    add_into(acc(&mut grads, *a, da.len()), &da);
                    add_into(acc(&mut grads, *b, dbv.len()), &dbv);
                }
            }
        }
        param_grads
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
