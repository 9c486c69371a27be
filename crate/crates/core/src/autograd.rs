//! A small reverse-mode tape over dense row-major matrices.
//!
//! Parameters are borrowed from a flat vector; gradients of parameter
//! leaves are accumulated back into a flat gradient vector of the same
//! layout.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Scalar:
    Float + Debug + Default + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_bt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_at<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let br = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Cols {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    PickLogProb {
        x: Var,
        targets: Vec<u32>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p [T],
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p [T]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        let n = &self.nodes[v.0];
        match n.op {
            Op::Param(off) => &self.params[off..off + n.rows * n.cols],
            _ => &n.value,
        }
    }

    pub fn param(&mut self, offset: usize, rows: usize, cols: usize) -> Var {
        assert!(offset + rows * cols <= self.params.len(), "parameter block out of range");
        self.push(rows, cols, Vec::new(), Op::Param(offset))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<T>) -> Var {
        assert_eq!(value.len(), rows * cols);
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions");
        let mut out = vec![T::zero(); m * n];
        gemm(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(m, n, out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_bt inner dimensions");
        let mut out = vec![T::zero(); m * n];
        gemm_bt(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(m, n, out, Op::MatMulBT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.push(r, c, out, Op::Add(a, b))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row).1, c);
        let b = self.value(row);
        let out = self.value(a).chunks(c).flat_map(|x| x.iter().zip(b).map(|(&x, &y)| x + y)).collect();
        self.push(r, c, out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        self.push(r, c, out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.push(r, c, out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (r, c) = self.shape(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let eps = T::of(LN_EPS);
        let n = T::of(c as f64);
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).chunks(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.push(r, c, out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// Row-wise softmax. With `causal`, row `i` only sees columns `0..=i`.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let (r, c) = self.shape(a);
        let mut out = vec![T::zero(); r * c];
        for (i, row) in self.value(a).chunks(c).enumerate() {
            let visible = if causal { (i + 1).min(c) } else { c };
            let max = row[..visible].iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..visible {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for o in &mut out[i * c..i * c + visible] {
                *o = *o / sum;
            }
        }
        self.push(r, c, out, Op::Softmax(a))
    }

    pub fn cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(start + width <= c);
        let out = self.value(x).chunks(c).flat_map(|row| row[start..start + width].iter().copied()).collect();
        self.push(r, width, out, Op::Cols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.shape(parts[0]).0;
        let c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        self.push(r, c, out, Op::Concat(parts.to_vec()))
    }

    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let (rows, c) = self.shape(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            let id = id as usize;
            assert!(id < rows, "gather id out of range");
            out.extend_from_slice(&t[id * c..(id + 1) * c]);
        }
        self.push(ids.len(), c, out, Op::Gather { table, ids: ids.to_vec() })
    }

    /// Log-softmax of each row of `logits`, picked at that row's target.
    /// Result is `rows×1`.
    pub fn pick_log_prob(&mut self, logits: Var, targets: &[u32]) -> Var {
        let (r, c) = self.shape(logits);
        assert_eq!(r, targets.len());
        let mut probs = vec![T::zero(); r * c];
        let mut out = Vec::with_capacity(r);
        for (i, row) in self.value(logits).chunks(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            out.push(row[targets[i] as usize] - lse);
        }
        self.push(
            r,
            1,
            out,
            Op::PickLogProb {
                x: logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Back-propagates `seeds` (upstream gradients of chosen nodes) and adds
    /// `scale ×` the parameter gradients into `param_grad`.
    pub fn backward(&self, seeds: &[(Var, Vec<T>)], scale: T, param_grad: &mut [T]) {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(g.len(), self.nodes[v.0].rows * self.nodes[v.0].cols);
            accumulate(&mut grads, self.nodes[v.0].rows * self.nodes[v.0].cols, *v, |dst| {
                for (d, &s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            });
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let (r, c) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {}
                Op::Param(off) => {
                    for (p, &gv) in param_grad[*off..*off + r * c].iter_mut().zip(&g) {
                        *p += scale * gv;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = c;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, m * k, *a, |da| gemm_bt(&g, bv, da, m, n, k));
                    accumulate(&mut grads, k * n, *b, |db| gemm_at(av, &g, db, k, m, n));
                }
                Op::MatMulBT(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = c;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, m * k, *a, |da| gemm(&g, bv, da, m, n, k));
                    accumulate(&mut grads, n * k, *b, |db| gemm_at(&g, av, db, n, m, k));
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        accumulate(&mut grads, r * c, v, |d| add_into(d, &g));
                    }
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, r * c, *a, |d| add_into(d, &g));
                    accumulate(&mut grads, c, *row, |d| {
                        for gr in g.chunks(c) {
                            add_into(d, gr);
                        }
                    });
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, r * c, *a, |d| {
                        for (x, &gv) in d.iter_mut().zip(&g) {
                            *x += gv * *s;
                        }
                    });
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    accumulate(&mut grads, r * c, *a, |d| {
                        for ((x, &gv), &inp) in d.iter_mut().zip(&g).zip(av) {
                            *x += gv * gelu_grad(inp);
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let gv = self.value(*gain);
                    let n = T::of(c as f64);
                    accumulate(&mut grads, c, *gain, |d| {
                        for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                d[j] += gr[j] * hr[j];
                            }
                        }
                    });
                    accumulate(&mut grads, c, *bias, |d| {
                        for gr in g.chunks(c) {
                            add_into(d, gr);
                        }
                    });
                    accumulate(&mut grads, r * c, *x, |d| {
                        for i in 0..r {
                            let gr = &g[i * c..(i + 1) * c];
                            let hr = &xhat[i * c..(i + 1) * c];
                            let mut sum_dh = T::zero();
                            let mut sum_dh_h = T::zero();
                            for j in 0..c {
                                let dh = gr[j] * gv[j];
                                sum_dh += dh;
                                sum_dh_h += dh * hr[j];
                            }
                            for j in 0..c {
                                let dh = gr[j] * gv[j];
                                d[i * c + j] += rstd[i] / n * (n * dh - sum_dh - hr[j] * sum_dh_h);
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, r * c, *a, |d| {
                        for i in 0..r {
                            let yr = &y[i * c..(i + 1) * c];
                            let gr = &g[i * c..(i + 1) * c];
                            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for j in 0..c {
                                d[i * c + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::Cols { x, start } => {
                    let xc = self.shape(*x).1;
                    accumulate(&mut grads, r * xc, *x, |d| {
                        for i in 0..r {
                            add_into(&mut d[i * xc + start..i * xc + start + c], &g[i * c..(i + 1) * c]);
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.shape(p).1;
                        accumulate(&mut grads, r * pc, p, |d| {
                            for i in 0..r {
                                add_into(&mut d[i * pc..(i + 1) * pc], &g[i * c + off..i * c + off + pc]);
                            }
                        });
                        off += pc;
                    }
                }
                Op::Gather { table, ids } => {
                    let (tr, tc) = self.shape(*table);
                    accumulate(&mut grads, tr * tc, *table, |d| {
                        for (i, &id) in ids.iter().enumerate() {
                            let id = id as usize;
                            add_into(&mut d[id * tc..(id + 1) * tc], &g[i * tc..(i + 1) * tc]);
                        }
                    });
                }
                Op::PickLogProb { x, targets, probs } => {
                    let (xr, xc) = self.shape(*x);
                    accumulate(&mut grads, xr * xc, *x, |d| {
                        for i in 0..xr {
                            let gi = g[i];
                            if gi == T::zero() {
                                continue;
                            }
                            for j in 0..xc {
                                d[i * xc + j] -= gi * probs[i * xc + j];
                            }
                            d[i * xc + targets[i] as usize] += gi;
                        }
                    });
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], len: usize, v: Var, f: impl FnOnce(&mut [T])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}
