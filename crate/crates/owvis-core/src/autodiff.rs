//! Reverse-mode automatic differentiation over [`Tensor`].
//!
//! A [`Tape`] records every operation of one forward pass; `backward`
//! walks the records in reverse and accumulates gradients for named
//! parameter leaves. All math is f64 and every operation has a fixed
//! accumulation order, so repeated runs produce bit-identical results.

use std::collections::{BTreeMap, HashMap};

use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tensor, &Tape, &mut Vec<Option<Tensor>>)>;

struct Node {
    value: Tensor,
    back: Option<BackFn>,
    param: Option<String>,
}

/// Gradients of a scalar with respect to all named leaves it reaches.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_param.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_param.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_all(&mut self, c: f64) {
        for t in self.by_param.values_mut() {
            for x in t.data_mut() {
                *x *= c;
            }
        }
    }
}

/// One cell-aligned box region on an objectness map, end-exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapRegion {
    pub frame: usize,
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl MapRegion {
    pub fn cell_count(&self) -> usize {
        (self.r1 - self.r0) * (self.c1 - self.c0)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
}

fn accum(grads: &mut Vec<Option<Tensor>>, id: usize, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, back: Option<BackFn>) -> Var {
        self.nodes.push(Node { value, back, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Insert a named parameter leaf. Repeated calls with the same name on
    /// one tape return the same node so gradient contributions accumulate.
    pub fn leaf(&mut self, value: Tensor, name: &str) -> Var {
        if let Some(&v) = self.param_vars.get(name) {
            return v;
        }
        self.nodes.push(Node { value, back: None, param: Some(name.to_string()) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    /// Back-propagate from a scalar node; returns gradients for all
    /// named leaves that received one.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &self.nodes[id].back {
                back(&g, self, &mut grads);
            }
            if let Some(name) = &self.nodes[id].param {
                match out.by_param.get_mut(name) {
                    Some(existing) => existing.add_assign(&g),
                    None => {
                        out.by_param.insert(name.clone(), g);
                    }
                }
            }
        }
        out
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data);
        self.push(
            value,
            Some(Box::new(move |g, _t, grads| {
                accum(grads, a.0, g.clone());
                accum(grads, b.0, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape(), data);
        self.push(
            value,
            Some(Box::new(move |g, _t, grads| {
                accum(grads, a.0, g.clone());
                accum(grads, b.0, g.map(|x| -x));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data);
        self.push(
            value,
            Some(Box::new(move |g, t, grads| {
                let bv = t.value(b);
                let av = t.value(a);
                let da =
                    Tensor::new(g.shape(), g.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect());
                let db =
                    Tensor::new(g.shape(), g.data().iter().zip(av.data()).map(|(g, x)| g * x).collect());
                accum(grads, a.0, da);
                accum(grads, b.0, db);
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "div shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x / y).collect();
        let value = Tensor::new(ta.shape(), data);
        self.push(
            value,
            Some(Box::new(move |g, t, grads| {
                let av = t.value(a);
                let bv = t.value(b);
                let da =
                    Tensor::new(g.shape(), g.data().iter().zip(bv.data()).map(|(g, y)| g / y).collect());
                let db = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect(),
                );
                accum(grads, a.0, da);
                accum(grads, b.0, db);
            })),
        )
    }

    // ---- elementwise with constants ----

    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape(), c.shape());
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data);
        self.push(value, Some(Box::new(move |g, _t, grads| accum(grads, a.0, g.clone()))))
    }

    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape(), c.shape());
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data);
        let cc = c.clone();
        self.push(
            value,
            Some(Box::new(move |g, _t, grads| {
                let da =
                    Tensor::new(g.shape(), g.data().iter().zip(cc.data()).map(|(g, y)| g * y).collect());
                accum(grads, a.0, da);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Some(Box::new(move |g, _t, grads| accum(grads, a.0, g.map(|x| x * c)))))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Some(Box::new(move |g, _t, grads| accum(grads, a.0, g.clone()))))
    }

    // ---- elementwise unary ----

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(
            value,
            Some(Box::new(move |g, t, grads| {
                let av = t.value(a);
                let da = Tensor::new(
                    g.shape(),
                    g.data().iter().zip(av.data()).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
                );
                accum(grads, a.0, da);
            })),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push(
            value,
            Some(Box::new(move |g, t, grads| {
                let av = t.value(a);
                let da = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else if *x < 0.0 { -*g } else { 0.0 })
                        .collect(),
                );
                accum(grads, a.0, da);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid_stable);
        let out = self.push(value, None);
        let id = out.0;
        self.nodes[id].back = Some(Box::new(move |g, t, grads| {
            let y = t.value(Var(id));
            let da = Tensor::new(
                g.shape(),
                g.data().iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
            );
            accum(grads, a.0, da);
        }));
        out
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let out = self.push(value, None);
        let id = out.0;
        self.nodes[id].back = Some(Box::new(move |g, t, grads| {
            let y = t.value(Var(id));
            let da = Tensor::new(g.shape(), g.data().iter().zip(y.data()).map(|(g, y)| g * y).collect());
            accum(grads, a.0, da);
        }));
        out
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus_stable);
        self.push(
            value,
            Some(Box::new(move |g, t, grads| {
                let x = t.value(a);
                let da = Tensor::new(
                    g.shape(),
                    g.data().iter().zip(x.data()).map(|(g, x)| g * sigmoid_stable(*x)).collect(),
                );
                accum(grads, a.0, da);
            })),
        )
    }

    /// Elementwise `a^p` for `a >= 0`.
    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).map(|x| x.powf(p));
        self.push(
            value,
            Some(Box::new(move |g, t, grads| {
                let x = t.value(a);
                let da = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, x)| {
                            if p == 0.0 || (*x == 0.0 && p < 1.0) {
                                0.0
                            } else {
                                g * p * x.powf(p - 1.0)
                            }
                        })
                        .collect(),
                );
                accum(grads, a.0, da);
            })),
        )
    }

    pub fn clamp_max(&mut self, a: Var, max: f64) -> Var {
        let value = self.value(a).map(|x| x.min(max));
        self.push(
            value,
            Some(Box::new(move |g, t, grads| {
                let x = t.value(a);
                let da = Tensor::new(
                    g.shape(),
                    g.data().iter().zip(x.data()).map(|(g, x)| if *x < max { *g } else { 0.0 }).collect(),
                );
                accum(grads, a.0, da);
            })),
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let shape = self.value(a).shape().to_vec();
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |g, _t, grads| {
                accum(grads, a.0, Tensor::full(&shape, g.item()));
            })),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Row sums of a 2-D tensor: `[n, k] -> [n]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape().len(), 2, "sum_rows expects 2-D");
        let (n, k) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = ta.data()[i * k..(i + 1) * k].iter().sum();
        }
        self.push(
            Tensor::new(&[n], out),
            Some(Box::new(move |g, _t, grads| {
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    let gi = g.data()[i];
                    for v in &mut da[i * k..(i + 1) * k] {
                        *v = gi;
                    }
                }
                accum(grads, a.0, Tensor::new(&[n, k], da));
            })),
        )
    }

    /// Sum of selected entries of a 1-D tensor.
    pub fn index_sum(&mut self, a: Var, idx: &[usize]) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape().len(), 1, "index_sum expects 1-D");
        let n = ta.shape()[0];
        let s: f64 = idx.iter().map(|&i| ta.data()[i]).sum();
        let idx = idx.to_vec();
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |g, _t, grads| {
                let mut da = vec![0.0; n];
                for &i in &idx {
                    da[i] += g.item();
                }
                accum(grads, a.0, Tensor::new(&[n], da));
            })),
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let ta = self.value(a);
        let old_shape = ta.shape().to_vec();
        let value = ta.clone().reshaped(shape);
        self.push(
            value,
            Some(Box::new(move |g, _t, grads| {
                accum(grads, a.0, g.clone().reshaped(&old_shape));
            })),
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let ta = self.value(a);
        let value = permute_tensor(ta, axes);
        let axes_v = axes.to_vec();
        self.push(
            value,
            Some(Box::new(move |g, _t, grads| {
                let mut inv = vec![0usize; axes_v.len()];
                for (i, &ax) in axes_v.iter().enumerate() {
                    inv[ax] = i;
                }
                accum(grads, a.0, permute_tensor(g, &inv));
            })),
        )
    }

    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape().to_vec();
        let tail: Vec<usize> = first[1..].to_vec();
        let mut total0 = 0usize;
        let mut lens = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(&tp.shape()[1..], &tail[..], "concat0 trailing shape mismatch");
            total0 += tp.shape()[0];
            lens.push((p, tp.shape().to_vec(), tp.numel()));
            data.extend_from_slice(tp.data());
        }
        let mut shape = vec![total0];
        shape.extend_from_slice(&tail);
        self.push(
            Tensor::new(&shape, data),
            Some(Box::new(move |g, _t, grads| {
                let mut off = 0usize;
                for (p, shape, numel) in &lens {
                    let part = Tensor::new(shape, g.data()[off..off + numel].to_vec());
                    accum(grads, p.0, part);
                    off += numel;
                }
            })),
        )
    }

    /// Slice `len` rows starting at `start` along axis 0.
    pub fn slice0(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        let row: usize = shape[1..].iter().product();
        assert!(start + len <= shape[0]);
        let data = ta.data()[start * row..(start + len) * row].to_vec();
        let mut out_shape = vec![len];
        out_shape.extend_from_slice(&shape[1..]);
        self.push(
            Tensor::new(&out_shape, data),
            Some(Box::new(move |g, _t, grads| {
                let mut da = vec![0.0; shape.iter().product()];
                da[start * row..(start + len) * row].copy_from_slice(g.data());
                accum(grads, a.0, Tensor::new(&shape, da));
            })),
        )
    }

    /// Gather rows (axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        let row: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            assert!(i < shape[0], "gather_rows index {} out of {}", i, shape[0]);
            data.extend_from_slice(&ta.data()[i * row..(i + 1) * row]);
        }
        let mut out_shape = vec![idx.len()];
        out_shape.extend_from_slice(&shape[1..]);
        let idx = idx.to_vec();
        self.push(
            Tensor::new(&out_shape, data),
            Some(Box::new(move |g, _t, grads| {
                let mut da = vec![0.0; shape.iter().product()];
                for (j, &i) in idx.iter().enumerate() {
                    for c in 0..row {
                        da[i * row + c] += g.data()[j * row + c];
                    }
                }
                accum(grads, a.0, Tensor::new(&shape, da));
            })),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape().len(), 2);
        assert_eq!(tb.shape().len(), 2);
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims: {:?} x {:?}", ta.shape(), tb.shape());
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(
            Tensor::new(&[m, n], out),
            Some(Box::new(move |g, t, grads| {
                let av = t.value(a);
                let bv = t.value(b);
                let mut da = vec![0.0; m * k];
                matmul_bt_acc(g.data(), bv.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                matmul_at_acc(av.data(), g.data(), &mut db, m, k, n);
                accum(grads, a.0, Tensor::new(&[m, k], da));
                accum(grads, b.0, Tensor::new(&[k, n], db));
            })),
        )
    }

    /// Batched matmul: `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape().len(), 3);
        assert_eq!(tb.shape().len(), 3);
        let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (bs2, k2, n) = (tb.shape()[0], tb.shape()[1], tb.shape()[2]);
        assert_eq!(bs, bs2);
        assert_eq!(k, k2);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            matmul_acc(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push(
            Tensor::new(&[bs, m, n], out),
            Some(Box::new(move |g, t, grads| {
                let av = t.value(a);
                let bv = t.value(b);
                let mut da = vec![0.0; bs * m * k];
                let mut db = vec![0.0; bs * k * n];
                for i in 0..bs {
                    matmul_bt_acc(
                        &g.data()[i * m * n..(i + 1) * m * n],
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        &mut da[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                    matmul_at_acc(
                        &av.data()[i * m * k..(i + 1) * m * k],
                        &g.data()[i * m * n..(i + 1) * m * n],
                        &mut db[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                accum(grads, a.0, Tensor::new(&[bs, m, k], da));
                accum(grads, b.0, Tensor::new(&[bs, k, n], db));
            })),
        )
    }

    /// Broadcast-add a `[d]` vector to every row of `[n, d]`.
    pub fn add_rowvec(&mut self, a: Var, v: Var) -> Var {
        let (ta, tv) = (self.value(a), self.value(v));
        assert_eq!(ta.shape().len(), 2);
        let (n, d) = (ta.shape()[0], ta.shape()[1]);
        assert_eq!(tv.numel(), d, "add_rowvec width mismatch");
        let mut data = ta.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += tv.data()[j];
            }
        }
        self.push(
            Tensor::new(&[n, d], data),
            Some(Box::new(move |g, t, grads| {
                accum(grads, a.0, g.clone());
                let mut dv = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        dv[j] += g.data()[i * d + j];
                    }
                }
                accum(grads, v.0, Tensor::new(t.value(v).shape(), dv));
            })),
        )
    }

    // ---- normalization & attention pieces ----

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        let k = *shape.last().expect("softmax on 0-d");
        let rows = ta.numel() / k;
        let mut data = vec![0.0; ta.numel()];
        for r in 0..rows {
            let x = &ta.data()[r * k..(r + 1) * k];
            let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..k {
                let e = (x[j] - mx).exp();
                data[r * k + j] = e;
                s += e;
            }
            for j in 0..k {
                data[r * k + j] /= s;
            }
        }
        let out = self.push(Tensor::new(&shape, data), None);
        let id = out.0;
        self.nodes[id].back = Some(Box::new(move |g, t, grads| {
            let y = t.value(Var(id));
            let mut da = vec![0.0; y.numel()];
            for r in 0..rows {
                let ys = &y.data()[r * k..(r + 1) * k];
                let gs = &g.data()[r * k..(r + 1) * k];
                let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                for j in 0..k {
                    da[r * k + j] = ys[j] * (gs[j] - dot);
                }
            }
            accum(grads, a.0, Tensor::new(y.shape(), da));
        }));
        out
    }

    /// Layer normalization along `axis` with affine parameters of length
    /// `shape[axis]`.
    pub fn layer_norm(&mut self, a: Var, axis: usize, gamma: Var, beta: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        let l = shape[axis];
        assert_eq!(self.value(gamma).numel(), l);
        assert_eq!(self.value(beta).numel(), l);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut data = vec![0.0; ta.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * l * inner + i;
                let mut mean = 0.0;
                for j in 0..l {
                    mean += ta.data()[base + j * inner];
                }
                mean /= l as f64;
                let mut var = 0.0;
                for j in 0..l {
                    let d = ta.data()[base + j * inner] - mean;
                    var += d * d;
                }
                var /= l as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..l {
                    let xh = (ta.data()[base + j * inner] - mean) * inv;
                    data[base + j * inner] = gv[j] * xh + bv[j];
                }
            }
        }
        self.push(
            Tensor::new(&shape, data),
            Some(Box::new(move |g, t, grads| {
                let x = t.value(a);
                let gam = t.value(gamma);
                let mut dx = vec![0.0; x.numel()];
                let mut dgamma = vec![0.0; l];
                let mut dbeta = vec![0.0; l];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * l * inner + i;
                        let mut mean = 0.0;
                        for j in 0..l {
                            mean += x.data()[base + j * inner];
                        }
                        mean /= l as f64;
                        let mut var = 0.0;
                        for j in 0..l {
                            let d = x.data()[base + j * inner] - mean;
                            var += d * d;
                        }
                        var /= l as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        // dxhat, then the standard two-correction formula
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..l {
                            let xh = (x.data()[base + j * inner] - mean) * inv;
                            let go = g.data()[base + j * inner];
                            let dxh = go * gam.data()[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xh;
                            dgamma[j] += go * xh;
                            dbeta[j] += go;
                        }
                        for j in 0..l {
                            let xh = (x.data()[base + j * inner] - mean) * inv;
                            let dxh = g.data()[base + j * inner] * gam.data()[j];
                            dx[base + j * inner] =
                                inv * (dxh - sum_dxhat / l as f64 - xh * sum_dxhat_xhat / l as f64);
                        }
                    }
                }
                accum(grads, a.0, Tensor::new(x.shape(), dx));
                accum(grads, gamma.0, Tensor::new(&[l], dgamma));
                accum(grads, beta.0, Tensor::new(&[l], dbeta));
            })),
        )
    }

    // ---- convolutions ----

    /// 2-D convolution: x `[B,Cin,H,W]`, w `[Cout,Cin,kh,kw]`, bias `[Cout]`,
    /// symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let (bs, cin, h, wid) = shape4(tx.shape());
        let (cout, cin2, kh, kw) = shape4(tw.shape());
        assert_eq!(cin, cin2, "conv2d channel mismatch");
        assert_eq!(self.value(b).numel(), cout);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;
        let bias = self.value(b).data().to_vec();
        let mut out = vec![0.0; bs * cout * ho * wo];
        conv2d_forward(
            tx.data(),
            tw.data(),
            &bias,
            &mut out,
            (bs, cin, h, wid),
            (cout, kh, kw),
            stride,
            pad,
        );
        self.push(
            Tensor::new(&[bs, cout, ho, wo], out),
            Some(Box::new(move |g, t, grads| {
                let xv = t.value(x);
                let wv = t.value(w);
                let mut dx = vec![0.0; xv.numel()];
                let mut dw = vec![0.0; wv.numel()];
                let mut db = vec![0.0; cout];
                conv2d_backward(
                    xv.data(),
                    wv.data(),
                    g.data(),
                    &mut dx,
                    &mut dw,
                    &mut db,
                    (bs, cin, h, wid),
                    (cout, kh, kw),
                    stride,
                    pad,
                );
                accum(grads, x.0, Tensor::new(xv.shape(), dx));
                accum(grads, w.0, Tensor::new(wv.shape(), dw));
                accum(grads, b.0, Tensor::new(&[cout], db));
            })),
        )
    }

    /// 3-D convolution over one clip: x `[Cin,T,H,W]`, w `[Cout,Cin,kt,kh,kw]`.
    /// Temporal padding may be asymmetric (`pad_t = (front, back)`).
    #[allow(clippy::too_many_arguments)]
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize, usize),
        pad_t: (usize, usize),
        pad_hw: usize,
    ) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tx.shape().len(), 4, "conv3d input [Cin,T,H,W]");
        let (cin, t_in, h, wid) = shape4(tx.shape());
        assert_eq!(tw.shape().len(), 5);
        let cout = tw.shape()[0];
        assert_eq!(tw.shape()[1], cin, "conv3d channel mismatch");
        let (kt, kh, kw) = (tw.shape()[2], tw.shape()[3], tw.shape()[4]);
        assert_eq!(self.value(b).numel(), cout);
        let (st, sh, sw) = stride;
        let to = (t_in + pad_t.0 + pad_t.1 - kt) / st + 1;
        let ho = (h + 2 * pad_hw - kh) / sh + 1;
        let wo = (wid + 2 * pad_hw - kw) / sw + 1;
        let bias = self.value(b).data().to_vec();
        let mut out = vec![0.0; cout * to * ho * wo];
        conv3d_forward(
            tx.data(),
            tw.data(),
            &bias,
            &mut out,
            (cin, t_in, h, wid),
            (cout, kt, kh, kw),
            stride,
            pad_t,
            pad_hw,
        );
        self.push(
            Tensor::new(&[cout, to, ho, wo], out),
            Some(Box::new(move |g, t, grads| {
                let xv = t.value(x);
                let wv = t.value(w);
                let mut dx = vec![0.0; xv.numel()];
                let mut dw = vec![0.0; wv.numel()];
                let mut db = vec![0.0; cout];
                conv3d_backward(
                    xv.data(),
                    wv.data(),
                    g.data(),
                    &mut dx,
                    &mut dw,
                    &mut db,
                    (cin, t_in, h, wid),
                    (cout, kt, kh, kw),
                    stride,
                    pad_t,
                    pad_hw,
                );
                accum(grads, x.0, Tensor::new(xv.shape(), dx));
                accum(grads, w.0, Tensor::new(wv.shape(), dw));
                accum(grads, b.0, Tensor::new(&[cout], db));
            })),
        )
    }

    // ---- resampling ----

    /// Bilinear resize of `[N,h,w]` maps to `(out_h, out_w)`, half-pixel
    /// centers, edges clamped.
    pub fn upsample_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape().len(), 3, "upsample expects [N,h,w]");
        let (n, h, w) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let plan = bilinear_plan(h, w, out_h, out_w);
        let mut data = vec![0.0; n * out_h * out_w];
        for i in 0..n {
            let src = &ta.data()[i * h * w..(i + 1) * h * w];
            let dst = &mut data[i * out_h * out_w..(i + 1) * out_h * out_w];
            for (o, taps) in plan.iter().enumerate() {
                let mut v = 0.0;
                for &(si, wt) in taps {
                    v += src[si] * wt;
                }
                dst[o] = v;
            }
        }
        let plan_b = plan.clone();
        self.push(
            Tensor::new(&[n, out_h, out_w], data),
            Some(Box::new(move |g, _t, grads| {
                let mut da = vec![0.0; n * h * w];
                for i in 0..n {
                    let gsl = &g.data()[i * out_h * out_w..(i + 1) * out_h * out_w];
                    let dsl = &mut da[i * h * w..(i + 1) * h * w];
                    for (o, taps) in plan_b.iter().enumerate() {
                        for &(si, wt) in taps {
                            dsl[si] += gsl[o] * wt;
                        }
                    }
                }
                accum(grads, a.0, Tensor::new(&[n, h, w], da));
            })),
        )
    }

    /// Crop `[N,h,w]` maps to a `(h_out, w_out)` window at `(top, left)`.
    pub fn crop2d(&mut self, a: Var, top: usize, left: usize, h_out: usize, w_out: usize) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape().len(), 3);
        let (n, h, w) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        assert!(top + h_out <= h && left + w_out <= w, "crop window out of bounds");
        let mut data = vec![0.0; n * h_out * w_out];
        for i in 0..n {
            for r in 0..h_out {
                let src = i * h * w + (top + r) * w + left;
                let dst = i * h_out * w_out + r * w_out;
                data[dst..dst + w_out].copy_from_slice(&ta.data()[src..src + w_out]);
            }
        }
        self.push(
            Tensor::new(&[n, h_out, w_out], data),
            Some(Box::new(move |g, _t, grads| {
                let mut da = vec![0.0; n * h * w];
                for i in 0..n {
                    for r in 0..h_out {
                        let dst = i * h * w + (top + r) * w + left;
                        let src = i * h_out * w_out + r * w_out;
                        da[dst..dst + w_out].copy_from_slice(&g.data()[src..src + w_out]);
                    }
                }
                accum(grads, a.0, Tensor::new(&[n, h, w], da));
            })),
        )
    }

    // ---- objectness score geometry ----

    /// Per-query sums of region means over an objectness map `[M,Hs,Ws]`.
    /// `regions[i]` lists the cell regions of query `i` (one per frame with a
    /// usable box). Gradients flow into the map only.
    pub fn region_mean_scores(&mut self, omap: Var, regions: &[Vec<MapRegion>]) -> Var {
        let tm = self.value(omap);
        assert_eq!(tm.shape().len(), 3, "objectness map must be [M,Hs,Ws]");
        let (frames, hs, ws) = (tm.shape()[0], tm.shape()[1], tm.shape()[2]);
        let q = regions.len();
        let mut out = vec![0.0; q];
        for (i, regs) in regions.iter().enumerate() {
            let mut s = 0.0;
            for r in regs {
                debug_assert!(r.frame < frames && r.r1 <= hs && r.c1 <= ws);
                let mut acc = 0.0;
                for row in r.r0..r.r1 {
                    let base = r.frame * hs * ws + row * ws;
                    for col in r.c0..r.c1 {
                        acc += tm.data()[base + col];
                    }
                }
                s += acc / r.cell_count() as f64;
            }
            out[i] = s;
        }
        let regions = regions.to_vec();
        self.push(
            Tensor::new(&[q], out),
            Some(Box::new(move |g, _t, grads| {
                let mut dm = vec![0.0; frames * hs * ws];
                for (i, regs) in regions.iter().enumerate() {
                    let gi = g.data()[i];
                    for r in regs {
                        let wgt = gi / r.cell_count() as f64;
                        for row in r.r0..r.r1 {
                            let base = r.frame * hs * ws + row * ws;
                            for col in r.c0..r.c1 {
                                dm[base + col] += wgt;
                            }
                        }
                    }
                }
                accum(grads, omap.0, Tensor::new(&[frames, hs, ws], dm));
            })),
        )
    }
}

fn shape4(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected 4-D shape, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

pub fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_stable(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let shape = t.shape();
    assert_eq!(axes.len(), shape.len());
    let nd = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![0.0; t.numel()];
    let mut idx = vec![0usize; nd];
    for o in out.iter_mut() {
        let mut src = 0usize;
        for (k, &ax) in axes.iter().enumerate() {
            src += idx[k] * in_strides[ax];
        }
        *o = t.data()[src];
        // advance odometer over out_shape
        for k in (0..nd).rev() {
            idx[k] += 1;
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

type BilinearTaps = Vec<Vec<(usize, f64)>>;

fn bilinear_plan(h: usize, w: usize, out_h: usize, out_w: usize) -> BilinearTaps {
    let mut plan = Vec::with_capacity(out_h * out_w);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let mut taps = Vec::with_capacity(4);
            taps.push((y0 * w + x0, (1.0 - wy) * (1.0 - wx)));
            if x1 != x0 {
                taps.push((y0 * w + x1, (1.0 - wy) * wx));
            }
            if y1 != y0 {
                taps.push((y1 * w + x0, wy * (1.0 - wx)));
                if x1 != x0 {
                    taps.push((y1 * w + x1, wy * wx));
                }
            }
            plan.push(taps);
        }
    }
    plan
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    out: &mut [f64],
    xdims: (usize, usize, usize, usize),
    wdims: (usize, usize, usize),
    stride: usize,
    pad: usize,
) {
    let (_bs, cin, h, wid) = xdims;
    let (cout, kh, kw) = wdims;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wid + 2 * pad - kw) / stride + 1;
    use rayon::prelude::*;
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(chunk, oplane)| {
        let b = chunk / cout;
        let co = chunk % cout;
        for v in oplane.iter_mut() {
            *v = bias[co];
        }
        for ci in 0..cin {
            let xplane = &x[(b * cin + ci) * h * wid..(b * cin + ci + 1) * h * wid];
            let wbase = ((co * cin + ci) * kh) * kw;
            for oy in 0..ho {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xplane[iy as usize * wid..(iy as usize + 1) * wid];
                    let wrow = &w[wbase + ky * kw..wbase + (ky + 1) * kw];
                    let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                    for ox in 0..wo {
                        let ix0 = (ox * stride) as isize - pad as isize;
                        let mut acc = 0.0;
                        for (kx, &wv) in wrow.iter().enumerate() {
                            let ix = ix0 + kx as isize;
                            if ix >= 0 && ix < wid as isize {
                                acc += xrow[ix as usize] * wv;
                            }
                        }
                        orow[ox] += acc;
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
    xdims: (usize, usize, usize, usize),
    wdims: (usize, usize, usize),
    stride: usize,
    pad: usize,
) {
    let (bs, cin, h, wid) = xdims;
    let (cout, kh, kw) = wdims;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wid + 2 * pad - kw) / stride + 1;
    for b in 0..bs {
        for co in 0..cout {
            let gplane = &g[(b * cout + co) * ho * wo..(b * cout + co + 1) * ho * wo];
            db[co] += gplane.iter().sum::<f64>();
            for ci in 0..cin {
                let xplane = &x[(b * cin + ci) * h * wid..(b * cin + ci + 1) * h * wid];
                let dxplane_base = (b * cin + ci) * h * wid;
                let wbase = ((co * cin + ci) * kh) * kw;
                for oy in 0..ho {
                    let iy0 = (oy * stride) as isize - pad as isize;
                    for ox in 0..wo {
                        let go = gplane[oy * wo + ox];
                        if go == 0.0 {
                            continue;
                        }
                        let ix0 = (ox * stride) as isize - pad as isize;
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= wid as isize {
                                    continue;
                                }
                                let xi = iy as usize * wid + ix as usize;
                                dw[wbase + ky * kw + kx] += go * xplane[xi];
                                dx[dxplane_base + xi] += go * w[wbase + ky * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3d_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    out: &mut [f64],
    xdims: (usize, usize, usize, usize),
    wdims: (usize, usize, usize, usize),
    stride: (usize, usize, usize),
    pad_t: (usize, usize),
    pad_hw: usize,
) {
    let (cin, t_in, h, wid) = xdims;
    let (_cout, kt, kh, kw) = wdims;
    let (st, sh, sw) = stride;
    let to = (t_in + pad_t.0 + pad_t.1 - kt) / st + 1;
    let ho = (h + 2 * pad_hw - kh) / sh + 1;
    let wo = (wid + 2 * pad_hw - kw) / sw + 1;
    use rayon::prelude::*;
    out.par_chunks_mut(to * ho * wo).enumerate().for_each(|(co, ovol)| {
        for v in ovol.iter_mut() {
            *v = bias[co];
        }
        for ot in 0..to {
            let it0 = (ot * st) as isize - pad_t.0 as isize;
            for oy in 0..ho {
                let iy0 = (oy * sh) as isize - pad_hw as isize;
                for ox in 0..wo {
                    let ix0 = (ox * sw) as isize - pad_hw as isize;
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ktt in 0..kt {
                            let it = it0 + ktt as isize;
                            if it < 0 || it >= t_in as isize {
                                continue;
                            }
                            for ky in 0..kh {
                                let iy = iy0 + ky as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = ix0 + kx as isize;
                                    if ix < 0 || ix >= wid as isize {
                                        continue;
                                    }
                                    let xi = ((ci * t_in + it as usize) * h + iy as usize) * wid
                                        + ix as usize;
                                    let wi = (((co * cin + ci) * kt + ktt) * kh + ky) * kw + kx;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                    }
                    ovol[(ot * ho + oy) * wo + ox] += acc;
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn conv3d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
    xdims: (usize, usize, usize, usize),
    wdims: (usize, usize, usize, usize),
    stride: (usize, usize, usize),
    pad_t: (usize, usize),
    pad_hw: usize,
) {
    let (cin, t_in, h, wid) = xdims;
    let (cout, kt, kh, kw) = wdims;
    let (st, sh, sw) = stride;
    let to = (t_in + pad_t.0 + pad_t.1 - kt) / st + 1;
    let ho = (h + 2 * pad_hw - kh) / sh + 1;
    let wo = (wid + 2 * pad_hw - kw) / sw + 1;
    for co in 0..cout {
        let gvol = &g[co * to * ho * wo..(co + 1) * to * ho * wo];
        db[co] += gvol.iter().sum::<f64>();
        for ot in 0..to {
            let it0 = (ot * st) as isize - pad_t.0 as isize;
            for oy in 0..ho {
                let iy0 = (oy * sh) as isize - pad_hw as isize;
                for ox in 0..wo {
                    let go = gvol[(ot * ho + oy) * wo + ox];
                    if go == 0.0 {
                        continue;
                    }
                    let ix0 = (ox * sw) as isize - pad_hw as isize;
                    for ci in 0..cin {
                        for ktt in 0..kt {
                            let it = it0 + ktt as isize;
                            if it < 0 || it >= t_in as isize {
                                continue;
                            }
                            for ky in 0..kh {
                                let iy = iy0 + ky as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = ix0 + kx as isize;
                                    if ix < 0 || ix >= wid as isize {
                                        continue;
                                    }
                                    let xi = ((ci * t_in + it as usize) * h + iy as usize) * wid
                                        + ix as usize;
                                    let wi = (((co * cin + ci) * kt + ktt) * kh + ky) * kw + kx;
                                    dw[wi] += go * x[xi];
                                    dx[xi] += go * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
