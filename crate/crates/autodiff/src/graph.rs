use std::collections::HashMap;

use crate::{AdError, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row-major matrix value held by a tape node.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_f32(rows: usize, cols: usize, src: &[f32]) -> Self {
        assert_eq!(rows * cols, src.len(), "Mat::from_f32 size");
        Self {
            rows,
            cols,
            data: src.iter().map(|&v| T::from_f32(v)).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.as_f32()).collect()
    }
}

/// Offset applied to one parameter element when it is bound, used by
/// finite-difference checks.
#[derive(Debug, Clone, Copy)]
pub struct Perturbation {
    pub set: u32,
    pub tensor: usize,
    pub element: usize,
    pub delta: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Exp(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    SumAll(usize),
    SumCols(usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Mat<T>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Single-threaded; build one per training step.
#[derive(Debug)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    bound: HashMap<(u32, usize), usize>,
    perturb: Option<Perturbation>,
    detached: Vec<usize>,
    replay: Option<Vec<Mat<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            bound: HashMap::new(),
            perturb: None,
            detached: Vec::new(),
            replay: None,
        }
    }

    /// Tape that offsets one parameter element on binding.
    pub fn with_perturbation(p: Perturbation) -> Self {
        let mut g = Self::new();
        g.perturb = Some(p);
        g
    }

    /// Make every `detach` return the given values, in call order, instead
    /// of the freshly computed ones. Lets a perturbed replay hold
    /// stop-gradient quantities at their unperturbed values.
    pub fn set_detach_replay(&mut self, values: Vec<Mat<T>>) {
        self.replay = Some(values);
    }

    /// Values produced by every `detach` call so far, in call order.
    pub fn detached_values(&self) -> Vec<Mat<T>> {
        self.detached.iter().map(|&i| self.nodes[i].value.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let m = &self.nodes[v.0].value;
        (m.rows, m.cols)
    }

    /// Value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!((m.rows, m.cols), (1, 1), "scalar() on non-scalar node");
        m.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_f32(&mut self, rows: usize, cols: usize, data: &[f32]) -> Var {
        self.constant(Mat::from_f32(rows, cols, data))
    }

    /// Bind a stored parameter tensor (cached per `(set, index)`).
    pub fn bind_param(&mut self, set: u32, index: usize, tensor: &Tensor, trainable: bool) -> Var {
        if let Some(&i) = self.bound.get(&(set, index)) {
            return Var(i);
        }
        let (rows, cols) = tensor.matrix_dims();
        let mut value = Mat::from_f32(rows, cols, tensor.data());
        if let Some(p) = self.perturb {
            if p.set == set && p.tensor == index {
                value.data[p.element] = value.data[p.element] + T::from_f64(p.delta);
            }
        }
        let v = self.push(value, Op::Leaf, trainable);
        self.bound.insert((set, index), v.0);
        v
    }

    /// Stop-gradient: same value, no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let ordinal = self.detached.len();
        let value = match &self.replay {
            Some(r) => r[ordinal].clone(),
            None => self.nodes[x.0].value.clone(),
        };
        let v = self.push(value, Op::Leaf, false);
        self.detached.push(v.0);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(am.cols, bm.rows, "matmul inner dimension");
        let (m, k, n) = (am.rows, am.cols, bm.cols);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &am.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let brow = &bm.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(
            Mat {
                rows: m,
                cols: n,
                data: out,
            },
            Op::MatMul(a.0, b.0),
            ng,
        )
    }

    /// `a + bias` with `bias` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (am, bm) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        assert_eq!(bm.data.len(), am.cols, "add_bias width");
        let mut out = am.data.clone();
        for row in out.chunks_mut(am.cols) {
            for (o, &b) in row.iter_mut().zip(&bm.data) {
                *o = *o + b;
            }
        }
        let value = Mat {
            rows: am.rows,
            cols: am.cols,
            data: out,
        };
        let ng = self.ng(a.0) || self.ng(bias.0);
        self.push(value, Op::AddBias(a.0, bias.0), ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Var {
        let (am, bm) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((am.rows, am.cols), (bm.rows, bm.cols), "elementwise shape mismatch");
        let data = am.data.iter().zip(&bm.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Mat {
            rows: am.rows,
            cols: am.cols,
            data,
        };
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(value, op, ng)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let am = &self.nodes[a.0].value;
        let value = Mat {
            rows: am.rows,
            cols: am.cols,
            data: am.data.iter().map(|&x| f(x)).collect(),
        };
        let ng = self.ng(a.0);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ct = T::from_f64(c);
        self.map(a, Op::Scale(a.0, c), |x| x * ct)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ct = T::from_f64(c);
        self.map(a, Op::AddScalar(a.0), |x| x + ct)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a.0), |x| x.tanh())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a.0), |x| x.exp())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a.0), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        self.map(a, Op::Clamp(a.0, lo, hi), |x| x.max(l).min(h))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.nodes[parts[0].0].value.rows;
        let cols: usize = parts
            .iter()
            .map(|p| {
                let m = &self.nodes[p.0].value;
                assert_eq!(m.rows, rows, "concat_cols row mismatch");
                m.cols
            })
            .sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        self.push(
            Mat { rows, cols, data },
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            ng,
        )
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let am = &self.nodes[a.0].value;
        assert!(start < end && end <= am.cols, "slice_cols range");
        let cols = end - start;
        let mut data = Vec::with_capacity(am.rows * cols);
        for r in 0..am.rows {
            data.extend_from_slice(&am.row(r)[start..end]);
        }
        let value = Mat {
            rows: am.rows,
            cols,
            data,
        };
        let ng = self.ng(a.0);
        self.push(value, Op::SliceCols(a.0, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.nodes[parts[0].0].value.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = &self.nodes[p.0].value;
            assert_eq!(m.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        self.push(
            Mat { rows, cols, data },
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
            ng,
        )
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let am = &self.nodes[a.0].value;
        assert!(start < end && end <= am.rows, "slice_rows range");
        let value = Mat {
            rows: end - start,
            cols: am.cols,
            data: am.data[start * am.cols..end * am.cols].to_vec(),
        };
        let ng = self.ng(a.0);
        self.push(value, Op::SliceRows(a.0, start), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().fold(T::zero(), |acc, &x| acc + x);
        let ng = self.ng(a.0);
        self.push(
            Mat {
                rows: 1,
                cols: 1,
                data: vec![s],
            },
            Op::SumAll(a.0),
            ng,
        )
    }

    /// Per-row sum, `[rows, cols] -> [rows, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let am = &self.nodes[a.0].value;
        let data: Vec<T> = am
            .data
            .chunks(am.cols)
            .map(|r| r.iter().fold(T::zero(), |acc, &x| acc + x))
            .collect();
        let value = Mat {
            rows: am.rows,
            cols: 1,
            data,
        };
        let ng = self.ng(a.0);
        self.push(value, Op::SumCols(a.0), ng)
    }

    /// Sum of all entries divided by `n`.
    pub fn sum_over(&mut self, a: Var, n: usize) -> Var {
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of squared differences divided by `n`.
    pub fn sq_error_over(&mut self, a: Var, b: Var, n: usize) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.sum_over(sq, n)
    }

    /// Gradients of a scalar node with respect to every bound parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AdError> {
        let lm = &self.nodes[loss.0].value;
        if (lm.rows, lm.cols) != (1, 1) {
            return Err(AdError::NonScalarLoss {
                rows: lm.rows,
                cols: lm.cols,
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (am, bm) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (am.rows, am.cols, bm.cols);
                    if self.ng(*a) {
                        let mut da = vec![T::zero(); m * k];
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &bm.data[p * n..(p + 1) * n];
                                let mut s = T::zero();
                                for (&x, &y) in grow.iter().zip(brow) {
                                    s = s + x * y;
                                }
                                da[r * k + p] = s;
                            }
                        }
                        accumulate(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let mut db = vec![T::zero(); k * n];
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            let arow = &am.data[r * k..(r + 1) * k];
                            for (p, &av) in arow.iter().enumerate() {
                                if av == T::zero() {
                                    continue;
                                }
                                let drow = &mut db[p * n..(p + 1) * n];
                                for (d, &x) in drow.iter_mut().zip(grow) {
                                    *d = *d + av * x;
                                }
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::AddBias(a, b) => {
                    let cols = node.value.cols;
                    if self.ng(*b) {
                        let mut db = vec![T::zero(); cols];
                        for row in g.chunks(cols) {
                            for (d, &x) in db.iter_mut().zip(row) {
                                *d = *d + x;
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.iter().map(|&x| -x).collect());
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value.data, &self.nodes[*b].value.data);
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                    }
                }
                Op::Scale(a, c) => {
                    let ct = T::from_f64(*c);
                    accumulate(&mut grads, *a, g.iter().map(|&x| x * ct).collect());
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let y = &node.value.data;
                    let d = g.iter().zip(y).map(|(&x, &t)| x * (T::one() - t * t)).collect();
                    accumulate(&mut grads, *a, d);
                }
                Op::Exp(a) => {
                    let y = &node.value.data;
                    accumulate(&mut grads, *a, g.iter().zip(y).map(|(&x, &e)| x * e).collect());
                }
                Op::Square(a) => {
                    let xv = &self.nodes[*a].value.data;
                    let two = T::from_f64(2.0);
                    accumulate(&mut grads, *a, g.iter().zip(xv).map(|(&x, &v)| x * two * v).collect());
                }
                Op::Clamp(a, lo, hi) => {
                    let xv = &self.nodes[*a].value.data;
                    let (l, h) = (T::from_f64(*lo), T::from_f64(*hi));
                    let d = g
                        .iter()
                        .zip(xv)
                        .map(|(&x, &v)| if v >= l && v <= h { x } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows;
                    let cols = node.value.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.nodes[p].value.cols;
                        if self.ng(p) {
                            let mut d = Vec::with_capacity(rows * pc);
                            for r in 0..rows {
                                d.extend_from_slice(&g[r * cols + offset..r * cols + offset + pc]);
                            }
                            accumulate(&mut grads, p, d);
                        }
                        offset += pc;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = &self.nodes[*a].value;
                    let w = node.value.cols;
                    let mut d = vec![T::zero(); src.rows * src.cols];
                    for r in 0..src.rows {
                        d[r * src.cols + start..r * src.cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatRows(parts) => {
                    let cols = node.value.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.rows * cols;
                        if self.ng(p) {
                            accumulate(&mut grads, p, g[offset..offset + n].to_vec());
                        }
                        offset += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = &self.nodes[*a].value;
                    let mut d = vec![T::zero(); src.rows * src.cols];
                    let s = start * src.cols;
                    d[s..s + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let n = self.nodes[*a].value.data.len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::SumCols(a) => {
                    let src = &self.nodes[*a].value;
                    let mut d = Vec::with_capacity(src.rows * src.cols);
                    for &x in &g {
                        d.extend(std::iter::repeat_n(x, src.cols));
                    }
                    accumulate(&mut grads, *a, d);
                }
            }
        }

        let mut by_param = HashMap::new();
        for (&(set, index), &node) in &self.bound {
            if node <= loss.0 {
                if let Some(g) = grads[node].take() {
                    by_param.insert((set, index), g);
                }
            }
        }
        Ok(Gradients { by_param })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], i: usize, d: Vec<T>) {
    match &mut grads[i] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(d) {
                *e = *e + x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

/// Parameter gradients produced by [`Graph::backward`]. Parameters that were
/// never bound, frozen, or unreachable from the loss read back as zeros.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    by_param: HashMap<(u32, usize), Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, set: u32, index: usize) -> Option<&[T]> {
        self.by_param.get(&(set, index)).map(|v| v.as_slice())
    }

    /// Gradients for every tensor of `set`, zero-filled where absent.
    pub fn for_set(&self, set: &crate::ParamSet) -> Vec<Tensor> {
        set.tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| match self.get(set.key(), i) {
                Some(g) => Tensor::new(t.shape().to_vec(), g.iter().map(|v| v.as_f32()).collect())
                    .expect("gradient shape matches parameter"),
                None => Tensor::zeros(t.shape().to_vec()),
            })
            .collect()
    }

    /// True if any tensor of the set received a nonzero gradient.
    pub fn touches(&self, set: u32) -> bool {
        self.by_param
            .iter()
            .any(|(&(s, _), g)| s == set && g.iter().any(|v| *v != T::zero()))
    }
}
