//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a
//! node holding its output value, the handles of its inputs and, when any
//! input needs a gradient, a boxed closure implementing the vector-Jacobian
//! product. Nodes are only ever appended after their inputs, so the node
//! index order is a topological order and [`Tape::backward`] is a single
//! reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{
    axis_split, log_sum_exp_row, matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, softmax_values, Float, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// Called with the upstream gradient, the input values, the output value and
/// a per-input flag saying whether that input needs a gradient. Returns one
/// entry per input; entries for inputs that do not need a gradient may be
/// `None`.
pub type BackwardFn<T> = Box<dyn Fn(&[T], &[&Tensor<T>], &Tensor<T>, &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Recorded computation graph. Single-owner; not shared across threads.
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf. Whether it collects a gradient follows
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad())
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Record an operation whose output `value` was computed by the caller.
    ///
    /// `backward` is dropped unchanged when no input needs a gradient.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from the scalar `loss`. Every node is visited at most
    /// once; gradients from multiple consumers are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let input_values: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = backward(&g, &input_values, &node.value, &needs);
            grads[idx] = Some(g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((input, need), ig) in node.inputs.iter().zip(&needs).zip(input_grads) {
                let (true, Some(ig)) = (*need, ig) else { continue };
                debug_assert_eq!(ig.len(), self.nodes[input.0].value.len());
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.custom(
            &[a, b],
            value,
            Box::new(|g, _, _, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.custom(
            &[a, b],
            value,
            Box::new(|g, ins, _, needs| {
                let ga = needs[0].then(|| g.iter().zip(ins[1].data()).map(|(&g, &y)| g * y).collect());
                let gb = needs[1].then(|| g.iter().zip(ins[0].data()).map(|(&g, &x)| g * x).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let av = self.value(a);
        let value = Tensor::new(av.shape(), av.data().iter().map(|&x| x * s).collect()).expect("same shape");
        self.custom(
            &[a],
            value,
            Box::new(move |g, _, _, _| vec![Some(g.iter().map(|&g| g * s).collect())]),
        )
    }

    /// `a[m,n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let (m, n) = av.dims2("add_bias")?;
        if bv.len() != n {
            return Err(Error::shape("add_bias", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        for r in 0..m {
            for (x, &b) in data[r * n..(r + 1) * n].iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.custom(
            &[a, bias],
            value,
            Box::new(move |g, _, _, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![T::zero(); n];
                    for r in 0..m {
                        for (a, &v) in acc.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *a += v;
                        }
                    }
                    acc
                });
                vec![Some(g.to_vec()), gb]
            }),
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::of_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = T::of_f64(0.044715);
        let half = T::of_f64(0.5);
        let three = T::of_f64(3.0);
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let value = Tensor::new(av.shape(), data).expect("same shape");
        self.custom(
            &[a],
            value,
            Box::new(move |g, ins, _, _| {
                let gx = g
                    .iter()
                    .zip(ins[0].data())
                    .map(|(&g, &x)| {
                        let u = c * (x + k * x * x * x);
                        let t = u.tanh();
                        let du = c * (T::one() + three * k * x * x);
                        g * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
                    })
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let total = T::of_f64(av.data().iter().map(|v| v.as_f64()).sum());
        let n = av.len();
        self.custom(
            &[a],
            Tensor::scalar(total),
            Box::new(move |g, _, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    // ---- linear algebra ----------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul")?;
        let (k2, n) = bv.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let value = Tensor::new(&[m, n], matmul_kernel(av.data(), bv.data(), m, k, n))?;
        Ok(self.custom(
            &[a, b],
            value,
            Box::new(move |g, ins, _, needs| {
                // dA = dC B^T, dB = A^T dC
                let ga = needs[0].then(|| matmul_nt_kernel(g, ins[1].data(), m, n, k));
                let gb = needs[1].then(|| matmul_tn_kernel(ins[0].data(), g, m, k, n));
                vec![ga, gb]
            }),
        ))
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul_nt")?;
        let (n, k2) = bv.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", av.shape(), bv.shape()));
        }
        let value = Tensor::new(&[m, n], matmul_nt_kernel(av.data(), bv.data(), m, k, n))?;
        Ok(self.custom(
            &[a, b],
            value,
            Box::new(move |g, ins, _, needs| {
                let ga = needs[0].then(|| matmul_kernel(g, ins[1].data(), m, n, k));
                let gb = needs[1].then(|| matmul_tn_kernel(g, ins[0].data(), m, n, k));
                vec![ga, gb]
            }),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.dims2("transpose")?;
        let value = Tensor::new(&[n, m], transpose_data(av.data(), m, n))?;
        Ok(self.custom(
            &[a],
            value,
            Box::new(move |g, _, _, _| vec![Some(transpose_data(g, n, m))]),
        ))
    }

    // ---- indexing ----------------------------------------------------

    /// Gather rows of `table[V,w]` at `indices` into `[indices.len(), w]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, w) = tv.dims2("embedding")?;
        if indices.is_empty() {
            return Err(Error::invalid("embedding lookup with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(format!("embedding index {bad} out of range for {vocab} rows")));
        }
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(&[indices.len(), w], data)?;
        let idx = indices.to_vec();
        Ok(self.custom(
            &[table],
            value,
            Box::new(move |g, _, _, _| {
                let mut gt = vec![T::zero(); vocab * w];
                for (r, &i) in idx.iter().enumerate() {
                    for (a, &v) in gt[i * w..(i + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                        *a += v;
                    }
                }
                vec![Some(gt)]
            }),
        ))
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.dims2("slice_cols")?;
        if start >= end || end > n {
            return Err(Error::invalid(format!("column slice {start}..{end} invalid for {n} columns")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&av.data()[r * n + start..r * n + end]);
        }
        let value = Tensor::new(&[m, w], data)?;
        Ok(self.custom(
            &[a],
            value,
            Box::new(move |g, _, _, _| {
                let mut ga = vec![T::zero(); m * n];
                for r in 0..m {
                    ga[r * n + start..r * n + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                vec![Some(ga)]
            }),
        ))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let m = self.value(parts[0]).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols", self.value(parts[0]).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for r in 0..m {
                data[r * total + off..r * total + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::new(&[m, total], data)?;
        Ok(self.custom(
            parts,
            value,
            Box::new(move |g, _, _, needs| {
                let mut off = 0;
                let mut out = Vec::with_capacity(widths.len());
                for (&w, &need) in widths.iter().zip(needs) {
                    out.push(need.then(|| {
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        gp
                    }));
                    off += w;
                }
                out
            }),
        ))
    }

    /// A contiguous range of a tensor's flat data, reshaped to `shape`.
    pub fn slice_flat(&mut self, a: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let n: usize = shape.iter().product();
        if offset + n > av.len() {
            return Err(Error::invalid(format!(
                "flat slice {offset}..{} exceeds {} elements",
                offset + n,
                av.len()
            )));
        }
        let total = av.len();
        let value = Tensor::new(shape, av.data()[offset..offset + n].to_vec())?;
        Ok(self.custom(
            &[a],
            value,
            Box::new(move |g, _, _, _| {
                let mut ga = vec![T::zero(); total];
                ga[offset..offset + n].copy_from_slice(g);
                vec![Some(ga)]
            }),
        ))
    }

    // ---- normalization -----------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = softmax_values(self.value(a), axis)?;
        let (outer, len, inner) = axis_split(value.shape(), axis);
        Ok(self.custom(
            &[a],
            value,
            Box::new(move |g, _, y, _| {
                let y = y.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut s = T::zero();
                        for j in 0..len {
                            s += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            gx[idx] = y[idx] * (g[idx] - s);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Layer normalization over the last axis of a rank-2 tensor.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (m, d) = xv.dims2("layer_norm")?;
        if d == 0 {
            return Err(Error::invalid("layer_norm over a zero-length axis"));
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != d || bv.len() != d {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let mut xhat = vec![T::zero(); m * d];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * d];
        for r in 0..m {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps.as_f64()).sqrt();
            rstd[r] = T::of_f64(rs);
            for c in 0..d {
                let h = T::of_f64((row[c].as_f64() - mean) * rs);
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::new(&[m, d], out)?;
        let dn = T::of_f64(d as f64);
        Ok(self.custom(
            &[x, gamma, beta],
            value,
            Box::new(move |g, ins, _, needs| {
                let gamma = ins[1].data();
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); m * d];
                    for r in 0..m {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..d {
                            let dh = gr[c] * gamma[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for c in 0..d {
                            let dh = gr[c] * gamma[c];
                            gx[r * d + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    gx
                });
                let (gg, gb) = if needs[1] || needs[2] {
                    let mut gg = vec![T::zero(); d];
                    let mut gb = vec![T::zero(); d];
                    for r in 0..m {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                            gb[c] += g[r * d + c];
                        }
                    }
                    (Some(gg), Some(gb))
                } else {
                    (None, None)
                };
                vec![gx, gg, gb]
            }),
        ))
    }

    // ---- losses ------------------------------------------------------

    /// Mean over `active` rows of `-log softmax(logits[row])[targets[row]]`.
    ///
    /// `targets` is indexed by row and only read at active rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], active: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = lv.dims2("cross_entropy")?;
        if active.is_empty() {
            return Err(Error::invalid("cross-entropy over an empty active set"));
        }
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        for &p in active {
            if p >= rows {
                return Err(Error::invalid(format!("active position {p} out of range for {rows} rows")));
            }
            if targets[p] >= vocab {
                return Err(Error::invalid(format!("target token {} out of range for vocab {vocab}", targets[p])));
            }
        }
        let k = active.len() as f64;
        let mut total = 0f64;
        let mut lse = Vec::with_capacity(active.len());
        for &p in active {
            let row = lv.row(p);
            let z = log_sum_exp_row(row);
            lse.push(z);
            total += z - row[targets[p]].as_f64();
        }
        let value = Tensor::scalar(T::of_f64(total / k));
        let active = active.to_vec();
        let targets = targets.to_vec();
        Ok(self.custom(
            &[logits],
            value,
            Box::new(move |g, ins, _, _| {
                let lv = ins[0];
                let mut gl = vec![T::zero(); rows * vocab];
                let scale = g[0].as_f64() / k;
                for (&p, &z) in active.iter().zip(&lse) {
                    let row = lv.row(p);
                    let out = &mut gl[p * vocab..(p + 1) * vocab];
                    for c in 0..vocab {
                        let prob = (row[c].as_f64() - z).exp();
                        out[c] += T::of_f64(prob * scale);
                    }
                    out[targets[p]] -= T::of_f64(scale);
                }
                vec![Some(gl)]
            }),
        ))
    }
}

fn transpose_data<T: Float>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = src[r * n + c];
        }
    }
    out
}

/// Compare the tape gradient of a scalar function against central
/// differences, returning the largest per-coordinate relative error
/// `|a - b| / max(|a|, |b|, 1e-8)`.
///
/// `f` must be deterministic; a stochastic `f` gives a meaningless number.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<f64>
where
    T: Float,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![T::zero(); x.len()]);

    let eval = |probe: Tensor<T>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let y = f(&mut t, v)?;
        let value = t.value(y);
        if value.len() != 1 {
            return Err(Error::invalid("grad_check needs a scalar-valued function"));
        }
        Ok(value.data()[0].as_f64())
    };

    let mut worst = 0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps.as_f64());
        let a = analytic[i].as_f64();
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
