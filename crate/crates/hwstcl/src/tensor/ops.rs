//! Differentiable operations.
//!
//! Every op produces a fresh node whose backward rule captures the values
//! it needs by clone, so a recorded graph stays valid even if leaf data is
//! mutated afterwards (the training loop rebuilds graphs each step anyway).
//!
//! Broadcasting is deliberately narrow: binary elementwise ops accept equal
//! shapes or a 1-element tensor on either side, nothing else. Row
//! broadcasting is its own op ([`Tensor::broadcast_rows`]).

use super::{GradStore, Tensor};

/// Guard inside the row-norm square root; keeps zero rows at zero instead
/// of dividing by zero. Post-ReLU representations can legitimately be all
/// zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

// Row-major matmul kernels, shared by forward and backward rules. The
// zero-skip keeps sparse-ish adjacency products cheap without changing the
// order in which nonzero terms are accumulated.

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out += g · bᵀ where g is m×n and b is k×n; result m×k.
fn matmul_gbt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow.iter()) {
                acc += gv * bv;
            }
            orow[kk] += acc;
        }
    }
}

/// out += aᵀ · g where a is m×k and g is m×n; result k×n.
fn matmul_atg(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow.iter()) {
                *o += av * gv;
            }
        }
    }
}

fn broadcast_pair(a: &Tensor, b: &Tensor, op: &str) -> (Vec<usize>, bool, bool) {
    let sa = a.shape();
    let sb = b.shape();
    let na = a.numel();
    let nb = b.numel();
    if sa == sb {
        (sa, false, false)
    } else if na == 1 {
        (sb, true, false)
    } else if nb == 1 {
        (sa, false, true)
    } else {
        panic!("{op}: incompatible shapes {sa:?} vs {sb:?} (only scalar and equal-shape broadcasting)");
    }
}

fn deposit(store: &mut GradStore, key: usize, len: usize, as_scalar: bool, contrib: &[f64]) {
    let buf = store.entry(key, if as_scalar { 1 } else { len });
    if as_scalar {
        let mut acc = 0.0;
        for c in contrib {
            acc += c;
        }
        buf[0] += acc;
    } else {
        for (b, c) in buf.iter_mut().zip(contrib.iter()) {
            *b += c;
        }
    }
}

impl Tensor {
    // ----- binary elementwise --------------------------------------------

    pub fn add(&self, other: &Tensor) -> Tensor {
        let (shape, a_sc, b_sc) = broadcast_pair(self, other, "add");
        let ad = self.data();
        let bd = other.data();
        let n = shape.iter().product::<usize>();
        let out: Vec<f64> = (0..n)
            .map(|i| ad[if a_sc { 0 } else { i }] + bd[if b_sc { 0 } else { i }])
            .collect();
        drop(ad);
        drop(bd);
        let (ka, kb) = (self.key(), other.key());
        Tensor::from_op(
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, store| {
                deposit(store, ka, g.len(), a_sc, g);
                deposit(store, kb, g.len(), b_sc, g);
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let (shape, a_sc, b_sc) = broadcast_pair(self, other, "sub");
        let ad = self.data();
        let bd = other.data();
        let n = shape.iter().product::<usize>();
        let out: Vec<f64> = (0..n)
            .map(|i| ad[if a_sc { 0 } else { i }] - bd[if b_sc { 0 } else { i }])
            .collect();
        drop(ad);
        drop(bd);
        let (ka, kb) = (self.key(), other.key());
        Tensor::from_op(
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, store| {
                deposit(store, ka, g.len(), a_sc, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                deposit(store, kb, g.len(), b_sc, &neg);
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (shape, a_sc, b_sc) = broadcast_pair(self, other, "mul");
        let ad = self.data().clone();
        let bd = other.data().clone();
        let n = shape.iter().product::<usize>();
        let out: Vec<f64> = (0..n)
            .map(|i| ad[if a_sc { 0 } else { i }] * bd[if b_sc { 0 } else { i }])
            .collect();
        let (ka, kb) = (self.key(), other.key());
        Tensor::from_op(
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, store| {
                let ga: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * bd[if b_sc { 0 } else { i }])
                    .collect();
                deposit(store, ka, g.len(), a_sc, &ga);
                let gb: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * ad[if a_sc { 0 } else { i }])
                    .collect();
                deposit(store, kb, g.len(), b_sc, &gb);
            }),
        )
    }

    /// Pointwise division. Panics on a zero divisor entry.
    pub fn div(&self, other: &Tensor) -> Tensor {
        let (shape, a_sc, b_sc) = broadcast_pair(self, other, "div");
        let ad = self.data().clone();
        let bd = other.data().clone();
        assert!(
            bd.iter().all(|&v| v != 0.0),
            "div: division by zero"
        );
        let n = shape.iter().product::<usize>();
        let out: Vec<f64> = (0..n)
            .map(|i| ad[if a_sc { 0 } else { i }] / bd[if b_sc { 0 } else { i }])
            .collect();
        let out_saved = out.clone();
        let (ka, kb) = (self.key(), other.key());
        Tensor::from_op(
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, store| {
                let ga: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv / bd[if b_sc { 0 } else { i }])
                    .collect();
                deposit(store, ka, g.len(), a_sc, &ga);
                let gb: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| -gv * out_saved[i] / bd[if b_sc { 0 } else { i }])
                    .collect();
                deposit(store, kb, g.len(), b_sc, &gb);
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v + c).collect();
        let k = self.key();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, store| deposit(store, k, g.len(), false, g)),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        let k = self.key();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let scaled: Vec<f64> = g.iter().map(|v| v * c).collect();
                deposit(store, k, g.len(), false, &scaled);
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    // ----- unary elementwise ----------------------------------------------

    pub fn exp(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v.exp()).collect();
        let y = out.clone();
        let k = self.key();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let gx: Vec<f64> = g.iter().zip(y.iter()).map(|(gv, yv)| gv * yv).collect();
                deposit(store, k, g.len(), false, &gx);
            }),
        )
    }

    /// Natural log. Panics on a non-positive entry.
    pub fn log(&self) -> Tensor {
        let x = self.data().clone();
        assert!(
            x.iter().all(|&v| v > 0.0),
            "log: non-positive value"
        );
        let out: Vec<f64> = x.iter().map(|v| v.ln()).collect();
        let k = self.key();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let gx: Vec<f64> = g.iter().zip(x.iter()).map(|(gv, xv)| gv / xv).collect();
                deposit(store, k, g.len(), false, &gx);
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let x = self.data().clone();
        let out: Vec<f64> = x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let k = self.key();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                deposit(store, k, g.len(), false, &gx);
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let y = out.clone();
        let k = self.key();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(gv, &yv)| gv * yv * (1.0 - yv))
                    .collect();
                deposit(store, k, g.len(), false, &gx);
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v.tanh()).collect();
        let y = out.clone();
        let k = self.key();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(gv, &yv)| gv * (1.0 - yv * yv))
                    .collect();
                deposit(store, k, g.len(), false, &gx);
            }),
        )
    }

    pub fn square(&self) -> Tensor {
        let x = self.data().clone();
        let out: Vec<f64> = x.iter().map(|v| v * v).collect();
        let k = self.key();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(gv, xv)| 2.0 * gv * xv)
                    .collect();
                deposit(store, k, g.len(), false, &gx);
            }),
        )
    }

    /// Square root. Panics on negative entries; the gradient at exactly
    /// zero is undefined and callers are expected to epsilon-guard.
    pub fn sqrt(&self) -> Tensor {
        let x = self.data().clone();
        assert!(x.iter().all(|&v| v >= 0.0), "sqrt: negative value");
        let out: Vec<f64> = x.iter().map(|v| v.sqrt()).collect();
        let y = out.clone();
        let k = self.key();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(gv, &yv)| gv / (2.0 * yv))
                    .collect();
                deposit(store, k, g.len(), false, &gx);
            }),
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes through strictly inside the
    /// interval and is zero on clipped entries.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        assert!(lo <= hi, "clamp: lo > hi");
        let x = self.data().clone();
        let out: Vec<f64> = x.iter().map(|v| v.clamp(lo, hi)).collect();
        let k = self.key();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(gv, &xv)| if xv >= lo && xv <= hi { *gv } else { 0.0 })
                    .collect();
                deposit(store, k, g.len(), false, &gx);
            }),
        )
    }

    /// `x^(-1/2)` for positive entries and exactly zero otherwise, with a
    /// zero gradient on the zero branch. This is the isolated-node
    /// convention for inverse-degree normalisation.
    pub fn rsqrt_or_zero(&self) -> Tensor {
        let x = self.data().clone();
        let out: Vec<f64> = x
            .iter()
            .map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 })
            .collect();
        let k = self.key();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(gv, &xv)| {
                        if xv > 0.0 {
                            -0.5 * gv * xv.powf(-1.5)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                deposit(store, k, g.len(), false, &gx);
            }),
        )
    }

    // ----- matrix ops ------------------------------------------------------

    /// Standard matrix product of rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, ka) = (self.rows(), self.cols());
        let (kb, n) = (other.rows(), other.cols());
        assert_eq!(
            ka, kb,
            "matmul: inner extents differ ({m}x{ka} vs {kb}x{n})"
        );
        let ad = self.data().clone();
        let bd = other.data().clone();
        let mut out = vec![0.0; m * n];
        matmul_raw(&ad, &bd, m, ka, n, &mut out);
        let (key_a, key_b) = (self.key(), other.key());
        Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, store| {
                {
                    let ga = store.entry(key_a, m * ka);
                    matmul_gbt(g, &bd, m, ka, n, ga);
                }
                {
                    let gb = store.entry(key_b, ka * n);
                    matmul_atg(&ad, g, m, ka, n, gb);
                }
            }),
        )
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let d = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        drop(d);
        let k = self.key();
        Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let buf = store.entry(k, m * n);
                for j in 0..n {
                    for i in 0..m {
                        buf[i * n + j] += g[j * m + i];
                    }
                }
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "reshape: element count mismatch");
        let k = self.key();
        Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |g, store| deposit(store, k, g.len(), false, g)),
        )
    }

    // ----- reductions -------------------------------------------------------

    pub fn sum_all(&self) -> Tensor {
        let mut acc = 0.0;
        for v in self.data().iter() {
            acc += v;
        }
        let len = self.numel();
        let k = self.key();
        Tensor::from_op(
            vec![1],
            vec![acc],
            vec![self.clone()],
            Box::new(move |g, store| {
                let buf = store.entry(k, len);
                for b in buf.iter_mut() {
                    *b += g[0];
                }
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    pub fn max_all(&self) -> Tensor {
        let d = self.data();
        let mut best = 0usize;
        for (i, v) in d.iter().enumerate() {
            if *v > d[best] {
                best = i;
            }
        }
        let val = d[best];
        drop(d);
        let len = self.numel();
        let k = self.key();
        Tensor::from_op(
            vec![1],
            vec![val],
            vec![self.clone()],
            Box::new(move |g, store| {
                let buf = store.entry(k, len);
                buf[best] += g[0];
            }),
        )
    }

    /// Reduction over one axis; the axis disappears from the shape (a fully
    /// reduced tensor has shape `[1]`).
    pub fn reduce_axis(&self, op: ReduceOp, axis: usize) -> Tensor {
        let shape = self.shape();
        assert!(axis < shape.len(), "reduce: axis {axis} out of range for {shape:?}");
        let extent = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let d = self.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; if op == ReduceOp::Max { outer * inner } else { 0 }];
        for o in 0..outer {
            for i in 0..inner {
                let oi = o * inner + i;
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let mut acc = 0.0;
                        for e in 0..extent {
                            acc += d[(o * extent + e) * inner + i];
                        }
                        out[oi] = if op == ReduceOp::Mean {
                            acc / extent as f64
                        } else {
                            acc
                        };
                    }
                    ReduceOp::Max => {
                        let mut best = 0usize;
                        let mut bv = d[(o * extent) * inner + i];
                        for e in 1..extent {
                            let v = d[(o * extent + e) * inner + i];
                            if v > bv {
                                bv = v;
                                best = e;
                            }
                        }
                        out[oi] = bv;
                        argmax[oi] = best;
                    }
                }
            }
        }
        drop(d);
        let len = self.numel();
        let k = self.key();
        Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let buf = store.entry(k, len);
                for o in 0..outer {
                    for i in 0..inner {
                        let oi = o * inner + i;
                        match op {
                            ReduceOp::Sum => {
                                for e in 0..extent {
                                    buf[(o * extent + e) * inner + i] += g[oi];
                                }
                            }
                            ReduceOp::Mean => {
                                let share = g[oi] / extent as f64;
                                for e in 0..extent {
                                    buf[(o * extent + e) * inner + i] += share;
                                }
                            }
                            ReduceOp::Max => {
                                buf[(o * extent + argmax[oi]) * inner + i] += g[oi];
                            }
                        }
                    }
                }
            }),
        )
    }

    /// Multi-axis reduction; axes are reduced highest-first so indices stay
    /// valid. An empty axis list reduces everything.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize]) -> Tensor {
        if axes.is_empty() {
            return match op {
                ReduceOp::Sum => self.sum_all(),
                ReduceOp::Mean => self.mean_all(),
                ReduceOp::Max => self.max_all(),
            };
        }
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), axes.len(), "reduce: duplicate axes {axes:?}");
        let mut t = self.clone();
        for &ax in sorted.iter().rev() {
            t = t.reduce_axis(op, ax);
        }
        t
    }

    pub fn sum_axis(&self, axis: usize) -> Tensor {
        self.reduce_axis(ReduceOp::Sum, axis)
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor {
        self.reduce_axis(ReduceOp::Mean, axis)
    }

    // ----- row/shape plumbing ------------------------------------------------

    /// Rows `[start, start+len)` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        let (m, c) = (self.rows(), self.cols());
        assert!(start + len <= m, "slice_rows: [{start}, {}) out of {m}", start + len);
        let d = self.data();
        let out = d[start * c..(start + len) * c].to_vec();
        drop(d);
        let k = self.key();
        Tensor::from_op(
            vec![len, c],
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let buf = store.entry(k, m * c);
                for (b, gv) in buf[start * c..(start + len) * c].iter_mut().zip(g.iter()) {
                    *b += gv;
                }
            }),
        )
    }

    /// Vertical concatenation of rank-2 tensors with equal column counts.
    pub fn concat_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let c = parts[0].cols();
        let mut data = Vec::new();
        let mut row_counts = Vec::with_capacity(parts.len());
        for p in parts {
            assert_eq!(p.cols(), c, "concat_rows: column mismatch");
            row_counts.push(p.rows());
            data.extend_from_slice(&p.data());
        }
        let total: usize = row_counts.iter().sum();
        let keys: Vec<usize> = parts.iter().map(|p| p.key()).collect();
        Tensor::from_op(
            vec![total, c],
            data,
            parts.to_vec(),
            Box::new(move |g, store| {
                let mut offset = 0;
                for (key, rows) in keys.iter().zip(row_counts.iter()) {
                    let len = rows * c;
                    let buf = store.entry(*key, len);
                    for (b, gv) in buf.iter_mut().zip(g[offset..offset + len].iter()) {
                        *b += gv;
                    }
                    offset += len;
                }
            }),
        )
    }

    /// Concatenation of flattened tensors into one rank-1 tensor.
    pub fn concat_flat(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_flat: empty input");
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            lens.push(p.numel());
            data.extend_from_slice(&p.data());
        }
        let total = data.len();
        let keys: Vec<usize> = parts.iter().map(|p| p.key()).collect();
        Tensor::from_op(
            vec![total],
            data,
            parts.to_vec(),
            Box::new(move |g, store| {
                let mut offset = 0;
                for (key, len) in keys.iter().zip(lens.iter()) {
                    let buf = store.entry(*key, *len);
                    for (b, gv) in buf.iter_mut().zip(g[offset..offset + len].iter()) {
                        *b += gv;
                    }
                    offset += len;
                }
            }),
        )
    }

    /// Tiles a single row (shape `[c]` or `[1, c]`) over `n` rows; the
    /// backward rule sums gradients over rows.
    pub fn broadcast_rows(&self, n: usize) -> Tensor {
        let shape = self.shape();
        let c = match shape.as_slice() {
            [c] => *c,
            [1, c] => *c,
            other => panic!("broadcast_rows: expected [c] or [1, c], got {other:?}"),
        };
        let row = self.to_vec();
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(&row);
        }
        let len = self.numel();
        let k = self.key();
        Tensor::from_op(
            vec![n, c],
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let buf = store.entry(k, len);
                for r in 0..n {
                    for j in 0..c {
                        buf[j] += g[r * c + j];
                    }
                }
            }),
        )
    }

    /// `out[j] = self.flat[indices[j]]`; the backward rule scatter-adds, so
    /// repeated indices tie their gradient contributions together.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let d = self.data();
        let n = d.len();
        for &ix in indices {
            assert!(ix < n, "gather: index {ix} out of range {n}");
        }
        let out: Vec<f64> = indices.iter().map(|&ix| d[ix]).collect();
        drop(d);
        let idx = indices.to_vec();
        let k = self.key();
        Tensor::from_op(
            vec![indices.len()],
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let buf = store.entry(k, n);
                for (gv, &ix) in g.iter().zip(idx.iter()) {
                    buf[ix] += gv;
                }
            }),
        )
    }

    /// Main diagonal of a square rank-2 tensor as a rank-1 tensor.
    pub fn diag_part(&self) -> Tensor {
        let (m, c) = (self.rows(), self.cols());
        assert_eq!(m, c, "diag_part: tensor is not square");
        let d = self.data();
        let out: Vec<f64> = (0..m).map(|i| d[i * c + i]).collect();
        drop(d);
        let k = self.key();
        Tensor::from_op(
            vec![m],
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let buf = store.entry(k, m * c);
                for (i, gv) in g.iter().enumerate() {
                    buf[i * c + i] += gv;
                }
            }),
        )
    }

    /// Scales every row of a rank-2 tensor to unit Euclidean norm, with
    /// `NORM_EPS` inside the square root so zero rows map to zero rows.
    pub fn l2_normalize_rows(&self) -> Tensor {
        let (m, c) = (self.rows(), self.cols());
        let x = self.data().clone();
        let mut out = vec![0.0; m * c];
        let mut norms = vec![0.0; m];
        for i in 0..m {
            let row = &x[i * c..(i + 1) * c];
            let mut ss = 0.0;
            for v in row {
                ss += v * v;
            }
            let norm = (ss + NORM_EPS).sqrt();
            norms[i] = norm;
            for j in 0..c {
                out[i * c + j] = row[j] / norm;
            }
        }
        let y = out.clone();
        let k = self.key();
        Tensor::from_op(
            vec![m, c],
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let buf = store.entry(k, m * c);
                for i in 0..m {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let mut dot = 0.0;
                    for (gv, yv) in gr.iter().zip(yr.iter()) {
                        dot += gv * yv;
                    }
                    for j in 0..c {
                        buf[i * c + j] += (gr[j] - dot * yr[j]) / norms[i];
                    }
                }
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::ReduceOp;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn identity_matmul_is_identity() {
        let m = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = Tensor::eye(3).matmul(&m);
        assert_eq!(out.to_vec(), m.to_vec());
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[2, 1], vec![0.0, 1.0]);
        assert_eq!(a.matmul(&b).to_vec(), vec![2.0, 4.0]);
    }

    #[test]
    #[should_panic(expected = "inner extents differ")]
    fn matmul_shape_mismatch_panics() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let _ = a.matmul(&b);
    }

    #[test]
    fn exp_and_sigmoid_at_zero() {
        assert_eq!(Tensor::scalar(0.0).exp().item(), 1.0);
        assert_eq!(Tensor::scalar(0.0).sigmoid().item(), 0.5);
    }

    #[test]
    #[should_panic(expected = "non-positive value")]
    fn log_of_zero_panics() {
        let _ = Tensor::scalar(0.0).log();
    }

    #[test]
    #[should_panic(expected = "division by zero")]
    fn div_by_zero_panics() {
        let _ = Tensor::scalar(1.0).div(&Tensor::scalar(0.0));
    }

    #[test]
    fn scalar_broadcast_both_ways() {
        let v = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]);
        let s = Tensor::scalar(10.0);
        assert_eq!(v.add(&s).to_vec(), vec![11.0, 12.0, 13.0]);
        assert_eq!(s.sub(&v).to_vec(), vec![9.0, 8.0, 7.0]);
    }

    #[test]
    #[should_panic(expected = "only scalar and equal-shape broadcasting")]
    fn rank_broadcast_is_rejected() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3]);
        let _ = a.add(&b);
    }

    #[test]
    fn reduce_examples() {
        let v = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]);
        assert_eq!(v.sum_all().item(), 6.0);
        assert_eq!(Tensor::zeros(&[4]).mean_all().item(), 0.0);
        let m = Tensor::from_vec(&[2, 2], vec![1.0, 5.0, 3.0, 2.0]);
        assert_eq!(m.reduce(ReduceOp::Max, &[0]).to_vec(), vec![3.0, 5.0]);
        assert_eq!(m.reduce(ReduceOp::Sum, &[0, 1]).item(), 11.0);
    }

    #[test]
    fn mean_axis_matches_scalar_loop() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let t = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let reduced = t.mean_axis(0);
        let d = t.data();
        for j in 0..3 {
            let mut acc = 0.0;
            for i in 0..4 {
                acc += d[i * 3 + j];
            }
            assert_close(reduced.to_vec()[j], acc / 4.0, 1e-15);
        }
    }

    #[test]
    fn l2_normalize_rows_examples() {
        let t = Tensor::from_vec(&[3, 2], vec![3.0, 4.0, 1.0, 0.0, 0.0, 0.0]);
        let n = t.l2_normalize_rows();
        let d = n.to_vec();
        assert_close(d[0], 0.6, 1e-12);
        assert_close(d[1], 0.8, 1e-12);
        assert_close(d[2], 1.0, 1e-6); // unit row essentially unchanged
        assert_eq!(d[4], 0.0); // zero row stays zero
        assert_eq!(d[5], 0.0);
    }

    #[test]
    fn slice_concat_roundtrip_and_grads() {
        let x = Tensor::from_vec(&[4, 2], (0..8).map(|i| i as f64).collect()).requires_grad();
        let top = x.slice_rows(0, 2);
        let bot = x.slice_rows(2, 2);
        let back = Tensor::concat_rows(&[top, bot]);
        assert_eq!(back.to_vec(), x.to_vec());
        back.mul_scalar(2.0).sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![2.0; 8]);
    }

    #[test]
    fn gather_ties_gradients() {
        let x = Tensor::from_vec(&[3], vec![5.0, 7.0, 9.0]).requires_grad();
        let g = x.gather(&[1, 1, 2]);
        assert_eq!(g.to_vec(), vec![7.0, 7.0, 9.0]);
        g.sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![0.0, 2.0, 1.0]);
    }

    #[test]
    fn broadcast_rows_backward_sums() {
        let b = Tensor::from_vec(&[2], vec![1.0, 2.0]).requires_grad();
        let tiled = b.broadcast_rows(3);
        assert_eq!(tiled.shape(), vec![3, 2]);
        tiled.sum_all().backward();
        assert_eq!(b.grad().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn transpose_and_diag() {
        let m = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(m.transpose().to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let sq = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(sq.diag_part().to_vec(), vec![1.0, 4.0]);
    }

    #[test]
    fn matmul_associativity_on_random_triples() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let a = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut rng);
            let c = Tensor::uniform(&[5, 2], -1.0, 1.0, &mut rng);
            let left = a.matmul(&b).matmul(&c);
            let right = a.matmul(&b.matmul(&c));
            for (l, r) in left.to_vec().iter().zip(right.to_vec().iter()) {
                assert_close(*l, *r, 1e-10);
            }
        }
    }

    #[test]
    fn clamp_gradient_zero_outside() {
        let x = Tensor::from_vec(&[3], vec![-2.0, 0.5, 2.0]).requires_grad();
        let y = x.clamp(0.0, 1.0);
        assert_eq!(y.to_vec(), vec![0.0, 0.5, 1.0]);
        y.sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn rsqrt_or_zero_handles_isolated() {
        let x = Tensor::from_vec(&[3], vec![4.0, 0.0, 1.0]);
        assert_eq!(x.rsqrt_or_zero().to_vec(), vec![0.5, 0.0, 1.0]);
    }
}
