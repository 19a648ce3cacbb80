use super::{Tensor, TensorError};
use rayon::prelude::*;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

/// One recorded primitive. Enough is saved to replay the adjoint without
/// touching anything but the tape's own tensors.
enum Op {
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f32 },
    AddScalar { a: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Reshape { a: usize },
    Concat { a: usize, b: usize, axis: usize },
    Slice { a: usize, axis: usize, start: usize, len: usize },
    Gather { a: usize, idx: Vec<usize> },
    SoftmaxRows { a: usize, cols: usize },
    Gelu { a: usize },
    LayerNormRows { a: usize, cols: usize, stats: Vec<(f64, f64)> },
    MulRow { a: usize, r: usize },
    AddRow { a: usize, r: usize },
    Mean { a: usize },
    Sum { a: usize },
    L2Norm { a: usize },
    Patchify { a: usize, c: usize, h: usize, w: usize, p: usize },
    Unpatchify { a: usize, c: usize, h: usize, w: usize, p: usize },
}

struct Node {
    op: Op,
    out: usize,
}

/// Wengert list. Ops append in creation order, which is therefore a
/// topological order; backward walks it once in reverse.
#[derive(Default)]
pub struct Tape {
    tensors: Vec<Tensor>,
    labels: Vec<&'static str>,
    nodes: Vec<Node>,
    backward_done: bool,
}

/// GELU (tanh approximation) and its derivative, evaluated in f64.
fn gelu_f64(x: f64) -> f64 {
    const S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    0.5 * x * (1.0 + (S * (x + A * x * x * x)).tanh())
}

fn gelu_grad_f64(x: f64) -> f64 {
    const S: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044_715;
    let u = S * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * S * (1.0 + 3.0 * A * x * x)
}

/// C[m,n] = A[m,k] * B[k,n], accumulating each output row in f64.
/// Rows are independent, so the parallel split cannot change any bit of the
/// result.
pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let row = |i: usize, orow: &mut [f32]| {
        let mut acc = vec![0.0f64; n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let av = f64::from(aik);
            let brow = &b[kk * n..(kk + 1) * n];
            for (slot, &bv) in acc.iter_mut().zip(brow) {
                *slot += av * f64::from(bv);
            }
        }
        for (o, &v) in orow.iter_mut().zip(acc.iter()) {
            *o = v as f32;
        }
    };
    if m * k * n >= (1 << 20) && m >= 8 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Index map shared by patchify and unpatchify: walks every pixel of a
/// [c, h, w] volume and hands over the matching (token, column) slot of the
/// [(h/p)*(w/p), c*p*p] patch matrix.
fn for_each_patch_slot(c: usize, h: usize, w: usize, p: usize, mut f: impl FnMut(usize, usize)) {
    let gw = w / p;
    for gy in 0..h / p {
        for gx in 0..gw {
            let tok = gy * gw + gx;
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        let pix = ch * h * w + (gy * p + py) * w + gx * p + px;
                        let col = ch * p * p + py * p + px;
                        f(pix, tok * (c * p * p) + col);
                    }
                }
            }
        }
    }
}

fn add_into(slot: &mut Option<Vec<f32>>, delta: Vec<f32>) {
    match slot {
        Some(g) => {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    // ── Leaves and accessors ─────────────────────────────────────────────

    pub fn leaf(&mut self, t: Tensor) -> TensorRef {
        self.push(t, "leaf")
    }

    /// Clones `t` in as a differentiation root.
    pub fn param(&mut self, t: &Tensor) -> TensorRef {
        let mut c = t.clone();
        c.requires_grad = true;
        c.grad = None;
        self.push(c, "param")
    }

    /// Clones `t` in with gradients disabled.
    pub fn constant(&mut self, t: &Tensor) -> TensorRef {
        let mut c = t.clone();
        c.requires_grad = false;
        c.grad = None;
        self.push(c, "const")
    }

    pub fn constant_from(&mut self, data: Vec<f32>, shape: Vec<usize>) -> TensorRef {
        self.push(Tensor::new(data, shape), "const")
    }

    pub fn value(&self, r: TensorRef) -> &Tensor {
        &self.tensors[r.0]
    }

    pub fn data(&self, r: TensorRef) -> &[f32] {
        &self.tensors[r.0].data
    }

    pub fn shape(&self, r: TensorRef) -> &[usize] {
        &self.tensors[r.0].shape
    }

    pub fn grad(&self, r: TensorRef) -> Option<&[f32]> {
        self.tensors[r.0].grad.as_deref()
    }

    pub fn detach(&self, r: TensorRef) -> Tensor {
        let t = &self.tensors[r.0];
        Tensor::new(t.data.clone(), t.shape.clone())
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// First tensor containing a non-finite value, in creation order, named
    /// by the primitive that produced it.
    pub fn first_non_finite(&self) -> Option<(&'static str, usize)> {
        for (i, t) in self.tensors.iter().enumerate() {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Some((self.labels[i], i));
            }
        }
        None
    }

    fn push(&mut self, t: Tensor, label: &'static str) -> TensorRef {
        self.tensors.push(t);
        self.labels.push(label);
        TensorRef(self.tensors.len() - 1)
    }

    /// Records `op` only when a gradient will ever flow through it; a tape
    /// full of constants stays a plain value buffer.
    fn push_op(&mut self, t: Tensor, label: &'static str, op: Op, needs_grad: bool) -> TensorRef {
        let mut t = t;
        t.requires_grad = needs_grad;
        let r = self.push(t, label);
        if needs_grad {
            self.nodes.push(Node { op, out: r.0 });
        }
        r
    }

    fn needs(&self, r: TensorRef) -> bool {
        self.tensors[r.0].requires_grad
    }

    fn want2(&self, a: TensorRef, b: TensorRef) -> bool {
        self.needs(a) || self.needs(b)
    }

    fn require_rank(
        &self,
        op: &'static str,
        r: TensorRef,
        rank: usize,
    ) -> Result<(), TensorError> {
        let s = self.shape(r);
        if s.len() != rank {
            return Err(TensorError::Rank {
                op,
                expected: rank,
                shape: s.to_vec(),
            });
        }
        Ok(())
    }

    // ── Elementwise ──────────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: TensorRef, b: TensorRef) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, TensorError> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::new(data, self.shape(a).to_vec());
        Ok(self.push_op(t, "add", Op::Add { a: a.0, b: b.0 }, self.want2(a, b)))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, TensorError> {
        self.same_shape("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let t = Tensor::new(data, self.shape(a).to_vec());
        Ok(self.push_op(t, "sub", Op::Sub { a: a.0, b: b.0 }, self.want2(a, b)))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let t = Tensor::new(data, self.shape(a).to_vec());
        Ok(self.push_op(t, "mul", Op::Mul { a: a.0, b: b.0 }, self.want2(a, b)))
    }

    pub fn scale(&mut self, a: TensorRef, c: f32) -> Result<TensorRef, TensorError> {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let t = Tensor::new(data, self.shape(a).to_vec());
        Ok(self.push_op(t, "scale", Op::Scale { a: a.0, c }, self.needs(a)))
    }

    pub fn add_scalar(&mut self, a: TensorRef, c: f32) -> Result<TensorRef, TensorError> {
        let data = self.data(a).iter().map(|x| x + c).collect();
        let t = Tensor::new(data, self.shape(a).to_vec());
        Ok(self.push_op(t, "add_scalar", Op::AddScalar { a: a.0 }, self.needs(a)))
    }

    pub fn gelu(&mut self, a: TensorRef) -> Result<TensorRef, TensorError> {
        let data = self
            .data(a)
            .iter()
            .map(|&x| gelu_f64(f64::from(x)) as f32)
            .collect();
        let t = Tensor::new(data, self.shape(a).to_vec());
        Ok(self.push_op(t, "gelu", Op::Gelu { a: a.0 }, self.needs(a)))
    }

    // ── Linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, TensorError> {
        self.require_rank("matmul", a, 2)?;
        self.require_rank("matmul", b, 2)?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let t = Tensor::new(data, vec![m, n]);
        Ok(self.push_op(
            t,
            "matmul",
            Op::MatMul { a: a.0, b: b.0, m, k, n },
            self.want2(a, b),
        ))
    }

    pub fn transpose(&mut self, a: TensorRef) -> Result<TensorRef, TensorError> {
        self.require_rank("transpose", a, 2)?;
        let (rows, cols) = (self.shape(a)[0], self.shape(a)[1]);
        let data = transpose_raw(self.data(a), rows, cols);
        let t = Tensor::new(data, vec![cols, rows]);
        Ok(self.push_op(t, "transpose", Op::Transpose { a: a.0, rows, cols }, self.needs(a)))
    }

    pub fn reshape(&mut self, a: TensorRef, shape: Vec<usize>) -> Result<TensorRef, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data(a).len() {
            return Err(TensorError::ElementCount {
                op: "reshape",
                got: self.data(a).len(),
                shape,
            });
        }
        let t = Tensor::new(self.data(a).to_vec(), shape);
        Ok(self.push_op(t, "reshape", Op::Reshape { a: a.0 }, self.needs(a)))
    }

    /// Concatenation of two rank-2 tensors along `axis`.
    pub fn concat(&mut self, a: TensorRef, b: TensorRef, axis: usize) -> Result<TensorRef, TensorError> {
        self.require_rank("concat", a, 2)?;
        self.require_rank("concat", b, 2)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if axis > 1 {
            return Err(TensorError::Axis { op: "concat", axis, shape: sa });
        }
        if sa[1 - axis] != sb[1 - axis] {
            return Err(TensorError::ShapeMismatch { op: "concat", lhs: sa, rhs: sb });
        }
        let t = if axis == 0 {
            let mut data = self.data(a).to_vec();
            data.extend_from_slice(self.data(b));
            Tensor::new(data, vec![sa[0] + sb[0], sa[1]])
        } else {
            let (ca, cb) = (sa[1], sb[1]);
            let mut data = Vec::with_capacity(self.data(a).len() + self.data(b).len());
            for i in 0..sa[0] {
                data.extend_from_slice(&self.data(a)[i * ca..(i + 1) * ca]);
                data.extend_from_slice(&self.data(b)[i * cb..(i + 1) * cb]);
            }
            Tensor::new(data, vec![sa[0], ca + cb])
        };
        Ok(self.push_op(t, "concat", Op::Concat { a: a.0, b: b.0, axis }, self.want2(a, b)))
    }

    /// Contiguous range along `axis` of a rank-2 tensor.
    pub fn slice(
        &mut self,
        a: TensorRef,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorRef, TensorError> {
        self.require_rank("slice", a, 2)?;
        let s = self.shape(a).to_vec();
        if axis > 1 {
            return Err(TensorError::Axis { op: "slice", axis, shape: s });
        }
        if start + len > s[axis] {
            return Err(TensorError::Range { op: "slice", start, len, extent: s[axis] });
        }
        let t = if axis == 0 {
            let cols = s[1];
            Tensor::new(
                self.data(a)[start * cols..(start + len) * cols].to_vec(),
                vec![len, cols],
            )
        } else {
            let cols = s[1];
            let mut data = Vec::with_capacity(s[0] * len);
            for i in 0..s[0] {
                data.extend_from_slice(&self.data(a)[i * cols + start..i * cols + start + len]);
            }
            Tensor::new(data, vec![s[0], len])
        };
        Ok(self.push_op(t, "slice", Op::Slice { a: a.0, axis, start, len }, self.needs(a)))
    }

    /// Row lookup: out[i] = a[idx[i]]. Repeated indices accumulate gradient.
    pub fn gather(&mut self, a: TensorRef, idx: &[usize]) -> Result<TensorRef, TensorError> {
        self.require_rank("gather", a, 2)?;
        let (rows, cols) = (self.shape(a)[0], self.shape(a)[1]);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::Index { op: "gather", index: i, extent: rows });
            }
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&self.data(a)[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(data, vec![idx.len(), cols]);
        Ok(self.push_op(t, "gather", Op::Gather { a: a.0, idx: idx.to_vec() }, self.needs(a)))
    }

    // ── Rows ─────────────────────────────────────────────────────────────

    fn row_arg_check(
        &self,
        op: &'static str,
        a: TensorRef,
        r: TensorRef,
    ) -> Result<(usize, usize), TensorError> {
        self.require_rank(op, a, 2)?;
        self.require_rank(op, r, 1)?;
        let (rows, cols) = (self.shape(a)[0], self.shape(a)[1]);
        if self.shape(r)[0] != cols {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(r).to_vec(),
            });
        }
        Ok((rows, cols))
    }

    /// out[i, j] = a[i, j] * r[j]. The explicit row-broadcast primitive.
    pub fn mul_row(&mut self, a: TensorRef, r: TensorRef) -> Result<TensorRef, TensorError> {
        let (rows, cols) = self.row_arg_check("mul_row", a, r)?;
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(self.data(a)[i * cols + j] * self.data(r)[j]);
            }
        }
        let t = Tensor::new(data, vec![rows, cols]);
        Ok(self.push_op(t, "mul_row", Op::MulRow { a: a.0, r: r.0 }, self.want2(a, r)))
    }

    /// out[i, j] = a[i, j] + r[j].
    pub fn add_row(&mut self, a: TensorRef, r: TensorRef) -> Result<TensorRef, TensorError> {
        let (rows, cols) = self.row_arg_check("add_row", a, r)?;
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(self.data(a)[i * cols + j] + self.data(r)[j]);
            }
        }
        let t = Tensor::new(data, vec![rows, cols]);
        Ok(self.push_op(t, "add_row", Op::AddRow { a: a.0, r: r.0 }, self.want2(a, r)))
    }

    /// Numerically stabilized row softmax of a rank-2 tensor.
    pub fn softmax_rows(&mut self, a: TensorRef) -> Result<TensorRef, TensorError> {
        self.require_rank("softmax_rows", a, 2)?;
        let (rows, cols) = (self.shape(a)[0], self.shape(a)[1]);
        let mut data = vec![0.0f32; rows * cols];
        for i in 0..rows {
            let row = &self.data(a)[i * cols..(i + 1) * cols];
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            let exps: Vec<f64> = row
                .iter()
                .map(|&x| {
                    let e = f64::from(x - m).exp();
                    sum += e;
                    e
                })
                .collect();
            for (o, e) in data[i * cols..(i + 1) * cols].iter_mut().zip(exps) {
                *o = (e / sum) as f32;
            }
        }
        let t = Tensor::new(data, vec![rows, cols]);
        Ok(self.push_op(t, "softmax_rows", Op::SoftmaxRows { a: a.0, cols }, self.needs(a)))
    }

    /// Per-row standardization (no affine): (x - mean) / sqrt(var + eps).
    pub fn layer_norm_rows(&mut self, a: TensorRef, eps: f32) -> Result<TensorRef, TensorError> {
        self.require_rank("layer_norm_rows", a, 2)?;
        let (rows, cols) = (self.shape(a)[0], self.shape(a)[1]);
        let mut data = vec![0.0f32; rows * cols];
        let mut stats = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = &self.data(a)[i * cols..(i + 1) * cols];
            let mean = row.iter().map(|&x| f64::from(x)).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|&x| {
                    let d = f64::from(x) - mean;
                    d * d
                })
                .sum::<f64>()
                / cols as f64;
            let rstd = 1.0 / (var + f64::from(eps)).sqrt();
            stats.push((mean, rstd));
            for (o, &x) in data[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                *o = ((f64::from(x) - mean) * rstd) as f32;
            }
        }
        let t = Tensor::new(data, vec![rows, cols]);
        Ok(self.push_op(
            t,
            "layer_norm_rows",
            Op::LayerNormRows { a: a.0, cols, stats },
            self.needs(a),
        ))
    }

    // ── Reductions ───────────────────────────────────────────────────────

    pub fn mean(&mut self, a: TensorRef) -> Result<TensorRef, TensorError> {
        let n = self.data(a).len().max(1);
        let s: f64 = self.data(a).iter().map(|&x| f64::from(x)).sum();
        let t = Tensor::new(vec![(s / n as f64) as f32], vec![1]);
        Ok(self.push_op(t, "mean", Op::Mean { a: a.0 }, self.needs(a)))
    }

    pub fn sum(&mut self, a: TensorRef) -> Result<TensorRef, TensorError> {
        let s: f64 = self.data(a).iter().map(|&x| f64::from(x)).sum();
        let t = Tensor::new(vec![s as f32], vec![1]);
        Ok(self.push_op(t, "sum", Op::Sum { a: a.0 }, self.needs(a)))
    }

    /// Frobenius norm over all elements. Gradient at the origin is defined
    /// as zero (the subgradient choice that keeps aligned-at-start training
    /// finite).
    pub fn l2_norm(&mut self, a: TensorRef) -> Result<TensorRef, TensorError> {
        let s: f64 = self.data(a).iter().map(|&x| f64::from(x) * f64::from(x)).sum();
        let t = Tensor::new(vec![s.sqrt() as f32], vec![1]);
        Ok(self.push_op(t, "l2_norm", Op::L2Norm { a: a.0 }, self.needs(a)))
    }

    // ── Patch layout ─────────────────────────────────────────────────────

    /// [c, h, w] pixels to [(h/p)*(w/p), c*p*p] patch rows, row-major over
    /// the patch grid. A pure permutation; exact inverse of `unpatchify`.
    pub fn patchify(&mut self, a: TensorRef, p: usize) -> Result<TensorRef, TensorError> {
        self.require_rank("patchify", a, 3)?;
        let (c, h, w) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(TensorError::Range {
                op: "patchify",
                start: 0,
                len: p,
                extent: h.min(w),
            });
        }
        let mut data = vec![0.0f32; c * h * w];
        let src = self.data(a);
        for_each_patch_slot(c, h, w, p, |pix, slot| data[slot] = src[pix]);
        let t = Tensor::new(data, vec![(h / p) * (w / p), c * p * p]);
        Ok(self.push_op(t, "patchify", Op::Patchify { a: a.0, c, h, w, p }, self.needs(a)))
    }

    /// Inverse of `patchify`: [(h/p)*(w/p), c*p*p] back to [c, h, w].
    pub fn unpatchify(
        &mut self,
        a: TensorRef,
        c: usize,
        h: usize,
        w: usize,
        p: usize,
    ) -> Result<TensorRef, TensorError> {
        self.require_rank("unpatchify", a, 2)?;
        let want = [(h / p) * (w / p), c * p * p];
        if p == 0 || h % p != 0 || w % p != 0 || self.shape(a) != want {
            return Err(TensorError::ShapeMismatch {
                op: "unpatchify",
                lhs: self.shape(a).to_vec(),
                rhs: want.to_vec(),
            });
        }
        let mut data = vec![0.0f32; c * h * w];
        let src = self.data(a);
        for_each_patch_slot(c, h, w, p, |pix, slot| data[pix] = src[slot]);
        let t = Tensor::new(data, vec![c, h, w]);
        Ok(self.push_op(t, "unpatchify", Op::Unpatchify { a: a.0, c, h, w, p }, self.needs(a)))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Each node is visited exactly once;
    /// fan-out accumulates additively. Populates `grad` on every tensor that
    /// requires one (zeros where the loss does not depend on it).
    pub fn backward(&mut self, loss: TensorRef) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        self.backward_done = true;
        if self.tensors[loss.0].numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.tensors[loss.0].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.tensors.len()];
        grads[loss.0] = Some(vec![1.0]);

        let tensors = &self.tensors;
        for node in self.nodes.iter().rev() {
            let Some(g) = grads[node.out].clone() else {
                continue;
            };
            match &node.op {
                Op::Add { a, b } => {
                    if tensors[*a].requires_grad {
                        add_into(&mut grads[*a], g.clone());
                    }
                    if tensors[*b].requires_grad {
                        add_into(&mut grads[*b], g);
                    }
                }
                Op::Sub { a, b } => {
                    if tensors[*a].requires_grad {
                        add_into(&mut grads[*a], g.clone());
                    }
                    if tensors[*b].requires_grad {
                        add_into(&mut grads[*b], g.iter().map(|x| -x).collect());
                    }
                }
                Op::Mul { a, b } => {
                    if tensors[*a].requires_grad {
                        let d = g.iter().zip(&tensors[*b].data).map(|(x, y)| x * y).collect();
                        add_into(&mut grads[*a], d);
                    }
                    if tensors[*b].requires_grad {
                        let d = g.iter().zip(&tensors[*a].data).map(|(x, y)| x * y).collect();
                        add_into(&mut grads[*b], d);
                    }
                }
                Op::Scale { a, c } => {
                    if tensors[*a].requires_grad {
                        add_into(&mut grads[*a], g.iter().map(|x| x * c).collect());
                    }
                }
                Op::AddScalar { a } => {
                    if tensors[*a].requires_grad {
                        add_into(&mut grads[*a], g);
                    }
                }
                Op::MatMul { a, b, m, k, n } => {
                    if tensors[*a].requires_grad {
                        let bt = transpose_raw(&tensors[*b].data, *k, *n);
                        add_into(&mut grads[*a], matmul_raw(&g, &bt, *m, *n, *k));
                    }
                    if tensors[*b].requires_grad {
                        let at = transpose_raw(&tensors[*a].data, *m, *k);
                        add_into(&mut grads[*b], matmul_raw(&at, &g, *k, *m, *n));
                    }
                }
                Op::Transpose { a, rows, cols } => {
                    if tensors[*a].requires_grad {
                        add_into(&mut grads[*a], transpose_raw(&g, *cols, *rows));
                    }
                }
                Op::Reshape { a } => {
                    if tensors[*a].requires_grad {
                        add_into(&mut grads[*a], g);
                    }
                }
                Op::Concat { a, b, axis } => {
                    let (sa, sb) = (&tensors[*a].shape, &tensors[*b].shape);
                    if *axis == 0 {
                        let na = tensors[*a].data.len();
                        if tensors[*a].requires_grad {
                            add_into(&mut grads[*a], g[..na].to_vec());
                        }
                        if tensors[*b].requires_grad {
                            add_into(&mut grads[*b], g[na..].to_vec());
                        }
                    } else {
                        let (ca, cb) = (sa[1], sb[1]);
                        if tensors[*a].requires_grad {
                            let mut d = Vec::with_capacity(sa[0] * ca);
                            for i in 0..sa[0] {
                                d.extend_from_slice(&g[i * (ca + cb)..i * (ca + cb) + ca]);
                            }
                            add_into(&mut grads[*a], d);
                        }
                        if tensors[*b].requires_grad {
                            let mut d = Vec::with_capacity(sb[0] * cb);
                            for i in 0..sb[0] {
                                d.extend_from_slice(&g[i * (ca + cb) + ca..(i + 1) * (ca + cb)]);
                            }
                            add_into(&mut grads[*b], d);
                        }
                    }
                }
                Op::Slice { a, axis, start, len } => {
                    if tensors[*a].requires_grad {
                        let s = &tensors[*a].shape;
                        let mut d = vec![0.0f32; tensors[*a].data.len()];
                        if *axis == 0 {
                            let cols = s[1];
                            d[start * cols..(start + len) * cols].copy_from_slice(&g);
                        } else {
                            let cols = s[1];
                            for i in 0..s[0] {
                                d[i * cols + start..i * cols + start + len]
                                    .copy_from_slice(&g[i * len..(i + 1) * len]);
                            }
                        }
                        add_into(&mut grads[*a], d);
                    }
                }
                Op::Gather { a, idx } => {
                    if tensors[*a].requires_grad {
                        let cols = tensors[*a].shape[1];
                        let mut d = vec![0.0f32; tensors[*a].data.len()];
                        for (r, &i) in idx.iter().enumerate() {
                            for j in 0..cols {
                                d[i * cols + j] += g[r * cols + j];
                            }
                        }
                        add_into(&mut grads[*a], d);
                    }
                }
                Op::SoftmaxRows { a, cols } => {
                    if tensors[*a].requires_grad {
                        let y = &tensors[node.out].data;
                        let mut d = vec![0.0f32; y.len()];
                        for i in 0..y.len() / cols {
                            let ys = &y[i * cols..(i + 1) * cols];
                            let gs = &g[i * cols..(i + 1) * cols];
                            let dot: f64 = ys
                                .iter()
                                .zip(gs)
                                .map(|(&yv, &gv)| f64::from(yv) * f64::from(gv))
                                .sum();
                            for ((o, &yv), &gv) in
                                d[i * cols..(i + 1) * cols].iter_mut().zip(ys).zip(gs)
                            {
                                *o = (f64::from(yv) * (f64::from(gv) - dot)) as f32;
                            }
                        }
                        add_into(&mut grads[*a], d);
                    }
                }
                Op::Gelu { a } => {
                    if tensors[*a].requires_grad {
                        let d = tensors[*a]
                            .data
                            .iter()
                            .zip(&g)
                            .map(|(&x, &gv)| (gelu_grad_f64(f64::from(x)) * f64::from(gv)) as f32)
                            .collect();
                        add_into(&mut grads[*a], d);
                    }
                }
                Op::LayerNormRows { a, cols, stats } => {
                    if tensors[*a].requires_grad {
                        let y = &tensors[node.out].data;
                        let mut d = vec![0.0f32; y.len()];
                        for (i, &(_, rstd)) in stats.iter().enumerate() {
                            let ys = &y[i * cols..(i + 1) * cols];
                            let gs = &g[i * cols..(i + 1) * cols];
                            let n = *cols as f64;
                            let mg: f64 =
                                gs.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
                            let mgy: f64 = gs
                                .iter()
                                .zip(ys)
                                .map(|(&gv, &yv)| f64::from(gv) * f64::from(yv))
                                .sum::<f64>()
                                / n;
                            for ((o, &yv), &gv) in
                                d[i * cols..(i + 1) * cols].iter_mut().zip(ys).zip(gs)
                            {
                                *o = (rstd * (f64::from(gv) - mg - f64::from(yv) * mgy)) as f32;
                            }
                        }
                        add_into(&mut grads[*a], d);
                    }
                }
                Op::MulRow { a, r } => {
                    let cols = tensors[*r].data.len();
                    if tensors[*a].requires_grad {
                        let rv = &tensors[*r].data;
                        let d = g
                            .iter()
                            .enumerate()
                            .map(|(i, &gv)| gv * rv[i % cols])
                            .collect();
                        add_into(&mut grads[*a], d);
                    }
                    if tensors[*r].requires_grad {
                        let av = &tensors[*a].data;
                        let mut acc = vec![0.0f64; cols];
                        for (i, &gv) in g.iter().enumerate() {
                            acc[i % cols] += f64::from(gv) * f64::from(av[i]);
                        }
                        add_into(&mut grads[*r], acc.iter().map(|&v| v as f32).collect());
                    }
                }
                Op::AddRow { a, r } => {
                    let cols = tensors[*r].data.len();
                    if tensors[*a].requires_grad {
                        add_into(&mut grads[*a], g.clone());
                    }
                    if tensors[*r].requires_grad {
                        let mut acc = vec![0.0f64; cols];
                        for (i, &gv) in g.iter().enumerate() {
                            acc[i % cols] += f64::from(gv);
                        }
                        add_into(&mut grads[*r], acc.iter().map(|&v| v as f32).collect());
                    }
                }
                Op::Mean { a } => {
                    if tensors[*a].requires_grad {
                        let n = tensors[*a].data.len().max(1) as f32;
                        add_into(&mut grads[*a], vec![g[0] / n; tensors[*a].data.len()]);
                    }
                }
                Op::Sum { a } => {
                    if tensors[*a].requires_grad {
                        add_into(&mut grads[*a], vec![g[0]; tensors[*a].data.len()]);
                    }
                }
                Op::L2Norm { a } => {
                    if tensors[*a].requires_grad {
                        let norm = f64::from(tensors[node.out].data[0]);
                        let d = if norm > 0.0 {
                            tensors[*a]
                                .data
                                .iter()
                                .map(|&x| (f64::from(g[0]) * f64::from(x) / norm) as f32)
                                .collect()
                        } else {
                            vec![0.0f32; tensors[*a].data.len()]
                        };
                        add_into(&mut grads[*a], d);
                    }
                }
                Op::Patchify { a, c, h, w, p } => {
                    if tensors[*a].requires_grad {
                        let mut d = vec![0.0f32; tensors[*a].data.len()];
                        for_each_patch_slot(*c, *h, *w, *p, |pix, slot| d[pix] = g[slot]);
                        add_into(&mut grads[*a], d);
                    }
                }
                Op::Unpatchify { a, c, h, w, p } => {
                    if tensors[*a].requires_grad {
                        let mut d = vec![0.0f32; tensors[*a].data.len()];
                        for_each_patch_slot(*c, *h, *w, *p, |pix, slot| d[slot] = g[pix]);
                        add_into(&mut grads[*a], d);
                    }
                }
            }
        }

        for (i, g) in grads.into_iter().enumerate() {
            if self.tensors[i].requires_grad {
                let n = self.tensors[i].data.len();
                self.tensors[i].grad = Some(g.unwrap_or_else(|| vec![0.0; n]));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    /// Central finite differences of a scalar function at `x`, step `h`.
    fn numerical_grad(f: &mut dyn FnMut(&[f32]) -> f32, x: &[f32], h: f32) -> Vec<f32> {
        let mut g = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            g.push((fp - fm) / (2.0 * h));
        }
        g
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "tensor.test");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        Tensor::new(data, shape.to_vec())
    }

    /// FD noise floor: loss evaluations are f32, so differences below about
    /// 1e-3 in gradient units are indistinguishable from rounding.
    fn assert_grads_close(analytic: &[f32], numeric: &[f32], ctx: &str) {
        assert_eq!(analytic.len(), numeric.len(), "{ctx}: length");
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let tol = 1e-3f32.max(1e-3 * a.abs().max(n.abs()));
            assert!(
                (a - n).abs() <= tol,
                "{ctx}[{i}]: analytic {a} vs numeric {n}"
            );
        }
    }

    /// Checks d(weighted sum of op(x))/dx against finite differences. The
    /// fixed random weighting makes every output component observable.
    fn check_unary(
        name: &str,
        shape: &[usize],
        seed: u64,
        op: impl Fn(&mut Tape, TensorRef) -> TensorRef,
    ) {
        let x0 = rand_tensor(shape, seed);
        let out_probe = {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let y = op(&mut tape, x);
            tape.data(y).len()
        };
        let w: Vec<f32> = {
            let mut r = rng::stream(seed ^ 0xabcd, "tensor.test.w");
            (0..out_probe).map(|_| r.gen_range(-1.0f32..1.0)).collect()
        };

        let mut eval = |xs: &[f32]| -> f32 {
            let mut tape = Tape::new();
            let x = tape.constant_from(xs.to_vec(), shape.to_vec());
            let y = op(&mut tape, x);
            let flat_len = tape.data(y).len();
            let y = tape.reshape(y, vec![flat_len, 1]).unwrap();
            let wt = tape.constant_from(w.clone(), vec![flat_len, 1]);
            let p = tape.mul(y, wt).unwrap();
            let s = tape.sum(p).unwrap();
            tape.data(s)[0]
        };
        let numeric = numerical_grad(&mut eval, &x0.data, 1e-3);

        let mut tape = Tape::new();
        let x = tape.param(&x0);
        let y = op(&mut tape, x);
        let flat_len = tape.data(y).len();
        let y = tape.reshape(y, vec![flat_len, 1]).unwrap();
        let wt = tape.constant_from(w.clone(), vec![flat_len, 1]);
        let p = tape.mul(y, wt).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_grads_close(tape.grad(x).unwrap(), &numeric, name);
    }

    #[test]
    fn grad_check_add() {
        check_unary("add", &[3, 4], 1, |t, x| {
            let b = t.constant(&rand_tensor(&[3, 4], 100));
            t.add(x, b).unwrap()
        });
        // and through the second argument
        check_unary("add.rhs", &[3, 4], 2, |t, x| {
            let a = t.constant(&rand_tensor(&[3, 4], 101));
            t.add(a, x).unwrap()
        });
    }

    #[test]
    fn grad_check_sub() {
        check_unary("sub.lhs", &[3, 4], 3, |t, x| {
            let b = t.constant(&rand_tensor(&[3, 4], 102));
            t.sub(x, b).unwrap()
        });
        check_unary("sub.rhs", &[3, 4], 4, |t, x| {
            let a = t.constant(&rand_tensor(&[3, 4], 103));
            t.sub(a, x).unwrap()
        });
    }

    #[test]
    fn grad_check_mul() {
        check_unary("mul.lhs", &[3, 4], 5, |t, x| {
            let b = t.constant(&rand_tensor(&[3, 4], 104));
            t.mul(x, b).unwrap()
        });
        check_unary("mul.rhs", &[3, 4], 6, |t, x| {
            let a = t.constant(&rand_tensor(&[3, 4], 105));
            t.mul(a, x).unwrap()
        });
    }

    #[test]
    fn grad_check_scale_and_add_scalar() {
        check_unary("scale", &[2, 5], 7, |t, x| t.scale(x, -1.7).unwrap());
        check_unary("add_scalar", &[2, 5], 8, |t, x| t.add_scalar(x, 0.3).unwrap());
    }

    #[test]
    fn grad_check_matmul_both_sides() {
        check_unary("matmul.lhs", &[3, 4], 9, |t, x| {
            let b = t.constant(&rand_tensor(&[4, 5], 106));
            t.matmul(x, b).unwrap()
        });
        check_unary("matmul.rhs", &[4, 5], 10, |t, x| {
            let a = t.constant(&rand_tensor(&[3, 4], 107));
            t.matmul(a, x).unwrap()
        });
    }

    #[test]
    fn grad_check_transpose_reshape() {
        check_unary("transpose", &[3, 5], 11, |t, x| t.transpose(x).unwrap());
        check_unary("reshape", &[3, 4], 12, |t, x| t.reshape(x, vec![2, 6]).unwrap());
    }

    #[test]
    fn grad_check_concat_slice() {
        check_unary("concat0.lhs", &[2, 3], 13, |t, x| {
            let b = t.constant(&rand_tensor(&[4, 3], 108));
            t.concat(x, b, 0).unwrap()
        });
        check_unary("concat1.rhs", &[2, 5], 14, |t, x| {
            let a = t.constant(&rand_tensor(&[2, 3], 109));
            t.concat(a, x, 1).unwrap()
        });
        check_unary("slice0", &[5, 3], 15, |t, x| t.slice(x, 0, 1, 3).unwrap());
        check_unary("slice1", &[3, 6], 16, |t, x| t.slice(x, 1, 2, 3).unwrap());
    }

    #[test]
    fn grad_check_gather() {
        check_unary("gather", &[4, 3], 17, |t, x| {
            t.gather(x, &[2, 0, 2, 1]).unwrap()
        });
    }

    #[test]
    fn grad_check_softmax_rows() {
        check_unary("softmax_rows", &[3, 5], 18, |t, x| t.softmax_rows(x).unwrap());
    }

    #[test]
    fn grad_check_gelu() {
        check_unary("gelu", &[3, 4], 19, |t, x| t.gelu(x).unwrap());
    }

    #[test]
    fn grad_check_layer_norm_rows() {
        check_unary("layer_norm_rows", &[3, 6], 20, |t, x| {
            t.layer_norm_rows(x, 1e-5).unwrap()
        });
    }

    #[test]
    fn grad_check_mul_row_add_row() {
        check_unary("mul_row.mat", &[3, 4], 21, |t, x| {
            let r = t.constant(&rand_tensor(&[4], 110));
            t.mul_row(x, r).unwrap()
        });
        check_unary("mul_row.vec", &[4], 22, |t, x| {
            let a = t.constant(&rand_tensor(&[3, 4], 111));
            t.mul_row(a, x).unwrap()
        });
        check_unary("add_row.mat", &[3, 4], 23, |t, x| {
            let r = t.constant(&rand_tensor(&[4], 112));
            t.add_row(x, r).unwrap()
        });
        check_unary("add_row.vec", &[4], 24, |t, x| {
            let a = t.constant(&rand_tensor(&[3, 4], 113));
            t.add_row(a, x).unwrap()
        });
    }

    #[test]
    fn grad_check_reductions() {
        check_unary("mean", &[3, 4], 25, |t, x| t.mean(x).unwrap());
        check_unary("sum", &[3, 4], 26, |t, x| t.sum(x).unwrap());
        check_unary("l2_norm", &[3, 4], 27, |t, x| t.l2_norm(x).unwrap());
    }

    #[test]
    fn grad_check_patchify_roundtrip() {
        check_unary("patchify", &[2, 4, 4], 28, |t, x| t.patchify(x, 2).unwrap());
        check_unary("unpatchify", &[4, 8], 29, |t, x| {
            t.unpatchify(x, 2, 4, 4, 2).unwrap()
        });
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        // Independent j-inner oracle in f64; different loop nest from the
        // production kernel.
        let a = rand_tensor(&[7, 5], 30);
        let b = rand_tensor(&[5, 6], 31);
        let mut want = vec![0.0f32; 7 * 6];
        for i in 0..7 {
            for j in 0..6 {
                let mut acc = 0.0f64;
                for k in 0..5 {
                    acc += f64::from(a.data[i * 5 + k]) * f64::from(b.data[k * 6 + j]);
                }
                want[i * 6 + j] = acc as f32;
            }
        }
        let mut tape = Tape::new();
        let ar = tape.leaf(a);
        let br = tape.leaf(b);
        let c = tape.matmul(ar, br).unwrap();
        assert_eq!(tape.data(c), &want[..]);
    }

    #[test]
    fn matmul_is_associative_to_f32_tolerance() {
        let a = rand_tensor(&[4, 6], 32);
        let b = rand_tensor(&[6, 5], 33);
        let c = rand_tensor(&[5, 3], 34);
        let mut tape = Tape::new();
        let (ar, br, cr) = (tape.leaf(a), tape.leaf(b), tape.leaf(c));
        let ab = tape.matmul(ar, br).unwrap();
        let left = tape.matmul(ab, cr).unwrap();
        let bc = tape.matmul(br, cr).unwrap();
        let right = tape.matmul(ar, bc).unwrap();
        for (l, r) in tape.data(left).iter().zip(tape.data(right)) {
            assert!((l - r).abs() < 1e-4, "{l} vs {r}");
        }
    }

    #[test]
    fn mean_of_one_to_four_is_two_point_five() {
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![1.0, 2.0, 3.0, 4.0], vec![4]);
        let m = tape.mean(x).unwrap();
        assert_eq!(tape.data(m), &[2.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = rand_tensor(&[6, 9], 35);
        let mut tape = Tape::new();
        let xr = tape.leaf(x);
        let y = tape.softmax_rows(xr).unwrap();
        for row in tape.data(y).chunks(9) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
    }

    #[test]
    fn concat_shapes_compose() {
        let mut tape = Tape::new();
        let a = tape.constant(&rand_tensor(&[2, 3], 36));
        let b = tape.constant(&rand_tensor(&[2, 5], 37));
        let c = tape.concat(a, b, 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 8]);
        let back = tape.slice(c, 1, 0, 3).unwrap();
        assert_eq!(tape.data(back), tape.data(a));
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let mut tape = Tape::new();
        let x = tape.param(&rand_tensor(&[2, 2], 38));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        for &g in tape.grad(x).unwrap() {
            assert_eq!(g, 2.0);
        }
    }

    #[test]
    fn l2_norm_gradient_at_origin_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros(vec![3, 3]));
        let n = tape.l2_norm(x).unwrap();
        tape.backward(n).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn patchify_unpatchify_is_bitwise_inverse() {
        let x = rand_tensor(&[3, 8, 8], 39);
        let mut tape = Tape::new();
        let xr = tape.leaf(x.clone());
        let p = tape.patchify(xr, 4).unwrap();
        assert_eq!(tape.shape(p), &[4, 48]);
        let back = tape.unpatchify(p, 3, 8, 8, 4).unwrap();
        assert_eq!(tape.data(back), &x.data[..]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(&rand_tensor(&[2, 2], 40));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s), Err(TensorError::BackwardTwice));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(&rand_tensor(&[2, 2], 41));
        let y = tape.scale(x, 2.0).unwrap();
        match tape.backward(y) {
            Err(TensorError::NonScalarLoss { shape }) => assert_eq!(shape, vec![2, 2]),
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&rand_tensor(&[2, 3], 42));
        let b = tape.constant(&rand_tensor(&[3, 2], 43));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn constant_only_tapes_record_no_nodes() {
        let mut tape = Tape::new();
        let a = tape.constant(&rand_tensor(&[4, 4], 44));
        let b = tape.constant(&rand_tensor(&[4, 4], 45));
        let c = tape.matmul(a, b).unwrap();
        let _ = tape.softmax_rows(c).unwrap();
        assert_eq!(tape.num_nodes(), 0);
    }

    #[test]
    fn first_non_finite_names_the_producing_op() {
        let mut tape = Tape::new();
        let a = tape.constant_from(vec![1.0, f32::INFINITY], vec![1, 2]);
        let b = tape.constant_from(vec![0.0, 0.0], vec![1, 2]);
        let c = tape.mul(a, b).unwrap(); // inf * 0 = nan
        assert!(tape.data(c)[1].is_nan());
        let (op, node) = tape.first_non_finite().unwrap();
        assert_eq!(op, "const");
        assert_eq!(node, 0);
    }

    #[test]
    fn gradients_default_to_zero_when_loss_is_disconnected() {
        let mut tape = Tape::new();
        let x = tape.param(&rand_tensor(&[2, 2], 46));
        let y = tape.constant(&rand_tensor(&[2, 2], 47));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
    }
}
