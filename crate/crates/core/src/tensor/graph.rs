use std::collections::HashMap;

use super::conv::ConvGeom;
use super::fftconv::{conv1d_forward_batch, conv1d_input_grad_batch, conv1d_weight_grad_batch};
use super::{ParamKind, ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::spectral::{self, Band, SplitMode};

const BN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTransposed { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, scale: Var, shift: Var, xhat: Vec<T>, inv_std: Vec<T>, batch: bool },
    Relu { x: Var },
    Affine { x: Var, w: Var, b: Var },
    Concat { parts: Vec<Var> },
    Channel { x: Var, c: usize },
    MeanAll { x: Var },
    MeanLength { x: Var },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, c: T },
    AddScalar { x: Var },
    Abs { x: Var },
    Square { x: Var },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Spectral { x: Var, tau: Var, band: Band, mode: SplitMode<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation. Nodes are appended in evaluation order, which is
/// also a valid topological order for the reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch { op, detail: detail.into() }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Unnamed leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, true, "input")
    }

    /// Binds a named parameter. Repeated calls with the same name return the
    /// same leaf, so gradients from several forward passes accumulate.
    /// Buffers and parameters bound with `trainable == false` are constants.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str, trainable: bool) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        let rg = trainable && store.kind(name) == Some(ParamKind::Trainable);
        let v = self.push(t, Op::Leaf, rg, "param")?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// `x: [N, C_in, L]`, `w: [C_out, C_in, K]`, `b: [C_out]` gives `[N, C_out, L_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (n, c_in, l) = self.value(x).dims3("conv1d")?;
        let (c_out, wc_in, k) = self.value(w).dims3("conv1d")?;
        if wc_in != c_in {
            return Err(mismatch("conv1d", format!("input has {c_in} channels, kernel expects {wc_in}")));
        }
        let t_out = geom
            .out_len(l, k)
            .ok_or_else(|| mismatch("conv1d", format!("kernel {k} does not fit length {l} with {geom:?}")))?;
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(mismatch("conv1d", format!("bias shape {:?}", self.shape(b))));
            }
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = conv1d_forward_batch(xs, n, c_in, l, ws, c_out, k, &geom);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), t_out);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(vec![n, c_out, t_out], out)?, Op::Conv { x, w, b, geom }, rg, "conv1d")
    }

    /// Transposed convolution, the adjoint of [`Graph::conv1d`] with symmetric
    /// padding `pad`. `x: [N, C_in, L]`, `w: [C_in, C_out, K]`, output length
    /// `(L - 1) * stride + K - 2 * pad`.
    pub fn conv1d_transposed(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c_in, l) = self.value(x).dims3("conv1d_transposed")?;
        let (wc_in, c_out, k) = self.value(w).dims3("conv1d_transposed")?;
        if wc_in != c_in {
            return Err(mismatch("conv1d_transposed", format!("input has {c_in} channels, kernel expects {wc_in}")));
        }
        if l == 0 || stride == 0 || (l - 1) * stride + k <= 2 * pad {
            return Err(mismatch("conv1d_transposed", "non-positive output length"));
        }
        let l_out = (l - 1) * stride + k - 2 * pad;
        let geom = ConvGeom::new(stride, pad, pad);
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(mismatch("conv1d_transposed", format!("bias shape {:?}", self.shape(b))));
            }
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = conv1d_input_grad_batch(xs, n, c_in, l, ws, c_out, k, &geom, l_out);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), l_out);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(vec![n, c_out, l_out], out)?,
            Op::ConvTransposed { x, w, b, geom },
            rg,
            "conv1d_transposed",
        )
    }

    /// Batch norm with statistics over `(batch, length)` per channel.
    pub fn batch_norm_train(&mut self, x: Var, scale: Var, shift: Var) -> Result<(Var, BatchStats<T>)> {
        let (n, c, l) = self.value(x).dims3("batch_norm")?;
        self.check_channel_vec("batch_norm", scale, c)?;
        self.check_channel_vec("batch_norm", shift, c)?;
        if n * l == 0 {
            return Err(Error::Empty("batch_norm input"));
        }
        let m = T::from_usize(n * l).unwrap();
        let xs = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s = s + xs[(b * c + ch) * l..(b * c + ch + 1) * l].iter().copied().sum::<T>();
            }
            let mu = s / m;
            let mut v = T::zero();
            for b in 0..n {
                for &e in &xs[(b * c + ch) * l..(b * c + ch + 1) * l] {
                    v = v + (e - mu) * (e - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = v / m;
        }
        let stats = BatchStats { mean: mean.clone(), var: var.clone() };
        let inv_std: Vec<T> = var.iter().map(|&v| (v + T::from_f64c(BN_EPS)).sqrt().recip()).collect();
        self.finish_bn(x, scale, shift, mean, inv_std, true).map(|v| (v, stats))
    }

    /// Batch norm with fixed statistics: `(x - mean) / sqrt(var + eps) * scale + shift`.
    pub fn batch_norm_eval(&mut self, x: Var, scale: Var, shift: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let (_, c, _) = self.value(x).dims3("batch_norm")?;
        self.check_channel_vec("batch_norm", scale, c)?;
        self.check_channel_vec("batch_norm", shift, c)?;
        if mean.len() != c || var.len() != c {
            return Err(mismatch("batch_norm", "running statistics length"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + T::from_f64c(BN_EPS)).sqrt().recip()).collect();
        self.finish_bn(x, scale, shift, mean.to_vec(), inv_std, false)
    }

    fn finish_bn(&mut self, x: Var, scale: Var, shift: Var, mean: Vec<T>, inv_std: Vec<T>, batch: bool) -> Result<Var> {
        let (n, c, l) = self.value(x).dims3("batch_norm")?;
        let xs = self.value(x).data();
        let gs = self.value(scale).data();
        let bs = self.value(shift).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * l..(b * c + ch + 1) * l;
                for ((h, o), &e) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&xs[r]) {
                    *h = (e - mean[ch]) * inv_std[ch];
                    *o = *h * gs[ch] + bs[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        self.push(
            Tensor::new(vec![n, c, l], out)?,
            Op::BatchNorm { x, scale, shift, xhat, inv_std, batch },
            rg,
            "batch_norm",
        )
    }

    fn check_channel_vec(&self, op: &'static str, v: Var, c: usize) -> Result<()> {
        if self.shape(v) != [c] {
            return Err(mismatch(op, format!("expected [{c}], got {:?}", self.shape(v))));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out: Vec<T> = t.data().iter().map(|&v| v.max(T::zero())).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::Relu { x }, rg, "relu")
    }

    /// Maps the last axis: `x: [N, C, L_in]`, `w: [L_out, L_in]`, `b: [L_out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, c, l_in) = self.value(x).dims3("affine")?;
        let (l_out, wl_in) = match self.shape(w) {
            &[o, i] => (o, i),
            s => return Err(mismatch("affine", format!("weight shape {s:?}"))),
        };
        if wl_in != l_in || self.shape(b) != [l_out] {
            return Err(mismatch("affine", format!("x {:?}, w {:?}, b {:?}", self.shape(x), self.shape(w), self.shape(b))));
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = self.value(b).data();
        let mut out = vec![T::zero(); n * c * l_out];
        for r in 0..n * c {
            let xr = &xs[r * l_in..(r + 1) * l_in];
            for o in 0..l_out {
                let wr = &ws[o * l_in..(o + 1) * l_in];
                out[r * l_out + o] = bs[o] + xr.iter().zip(wr).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(vec![n, c, l_out], out)?, Op::Affine { x, w, b }, rg, "affine")
    }

    /// Concatenates `[N, C_i, L]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_channels"))?;
        let (n, _, l) = self.value(*first).dims3("concat_channels")?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, pl) = self.value(p).dims3("concat_channels")?;
            if pn != n || pl != l {
                return Err(mismatch("concat_channels", format!("{:?} vs {:?}", self.shape(p), self.shape(*first))));
            }
            chans.push(pc);
        }
        let c_total: usize = chans.iter().sum();
        let mut out = Vec::with_capacity(n * c_total * l);
        for b in 0..n {
            for (&p, &pc) in parts.iter().zip(&chans) {
                out.extend_from_slice(&self.value(p).data()[b * pc * l..(b + 1) * pc * l]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(vec![n, c_total, l], out)?, Op::Concat { parts: parts.to_vec() }, rg, "concat_channels")
    }

    /// Selects channel `c` of `[N, C, L]` as `[N, 1, L]`.
    pub fn channel(&mut self, x: Var, c: usize) -> Result<Var> {
        let (n, ch, l) = self.value(x).dims3("channel")?;
        if c >= ch {
            return Err(mismatch("channel", format!("channel {c} of {ch}")));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * l);
        for b in 0..n {
            out.extend_from_slice(&xs[(b * ch + c) * l..(b * ch + c + 1) * l]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, 1, l], out)?, Op::Channel { x, c }, rg, "channel")
    }

    /// Mean of every element, as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Empty("mean_all"));
        }
        let m = t.data().iter().copied().sum::<T>() / T::from_usize(t.len()).unwrap();
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::MeanAll { x }, rg, "mean_all")
    }

    /// Mean over the length axis: `[N, C, L]` to `[N, C, 1]`.
    pub fn mean_length(&mut self, x: Var) -> Result<Var> {
        let (n, c, l) = self.value(x).dims3("mean_length")?;
        if l == 0 {
            return Err(Error::Empty("mean_length"));
        }
        let lt = T::from_usize(l).unwrap();
        let out: Vec<T> = self.value(x).data().chunks(l).map(|r| r.iter().copied().sum::<T>() / lt).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c, 1], out)?, Op::MeanLength { x }, rg, "mean_length")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape { x }, rg, "reshape")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), out)
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(x);
        Tensor { shape: t.shape().to_vec(), data: t.data().iter().map(|&v| f(v)).collect() }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add { a, b }, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub { a, b }, rg, "sub")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.unary(x, |v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, c }, rg, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.unary(x, |v| v + c);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar { x }, rg, "add_scalar")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, |v| v.abs());
        let rg = self.rg(x);
        self.push(t, Op::Abs { x }, rg, "abs")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, |v| v * v);
        let rg = self.rg(x);
        self.push(t, Op::Square { x }, rg, "square")
    }

    /// Mean softmax cross-entropy over rows of the last axis.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let k = *shape.last().ok_or_else(|| mismatch("softmax_cross_entropy", "scalar logits"))?;
        let rows = self.value(logits).len() / k.max(1);
        if rows != labels.len() || rows == 0 {
            return Err(mismatch("softmax_cross_entropy", format!("{rows} rows, {} labels", labels.len())));
        }
        if labels.iter().any(|&y| y >= k) {
            return Err(mismatch("softmax_cross_entropy", "label out of range"));
        }
        let ls = self.value(logits).data();
        let mut probs = vec![T::zero(); ls.len()];
        let mut loss = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = &ls[r * k..(r + 1) * k];
            let p = softmax(row);
            loss = loss - p[y].ln().max(T::from_f64c(-1e30));
            probs[r * k..(r + 1) * k].copy_from_slice(&p);
        }
        loss = loss / T::from_usize(rows).unwrap();
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent { logits, labels: labels.to_vec(), probs },
            rg,
            "softmax_cross_entropy",
        )
    }

    /// One band of the learnable-cutoff spectral decomposition, applied to
    /// every `[N, C, L]` row independently. `tau` is a scalar.
    pub fn spectral_band(&mut self, x: Var, tau: Var, band: Band, mode: SplitMode<T>) -> Result<Var> {
        let (_, _, l) = self.value(x).dims3("spectral_band")?;
        if !self.value(tau).is_scalar() {
            return Err(mismatch("spectral_band", format!("tau shape {:?}", self.shape(tau))));
        }
        if l < 2 {
            return Err(mismatch("spectral_band", "length must be at least 2"));
        }
        let tau_v = self.value(tau).item();
        let mask = spectral::band_mask(l, tau_v, band, mode);
        let out = spectral::filter_rows(self.value(x).data(), l, &mask);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(tau);
        self.push(Tensor::new(shape, out)?, Op::Spectral { x, tau, band, mode }, rg, "spectral_band")
    }

    /// Reverse sweep from a scalar `loss`. The graph cannot be extended or
    /// differentiated again afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
        }

        Ok(Gradients { grads: leaf_grads, names: std::mem::take(&mut self.params) })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a = *a + c),
            slot => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (n, c_in, l) = self.value(*x).dims3("conv1d")?;
                let (c_out, _, k) = self.value(*w).dims3("conv1d")?;
                let t_out = node.value.shape()[2];
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                if self.rg(*x) {
                    let gx = conv1d_input_grad_batch(g, n, c_out, t_out, ws, c_in, k, geom, l);
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*w) {
                    let gw = conv1d_weight_grad_batch(g, n, c_out, t_out, xs, c_in, l, k, geom);
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, channel_sums(g, n, c_out, t_out));
                }
            }
            Op::ConvTransposed { x, w, b, geom } => {
                let (n, c_in, l) = self.value(*x).dims3("conv1d_transposed")?;
                let (_, c_out, k) = self.value(*w).dims3("conv1d_transposed")?;
                let l_out = node.value.shape()[2];
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                if self.rg(*x) {
                    let gx = conv1d_forward_batch(g, n, c_out, l_out, ws, c_in, k, geom);
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*w) {
                    let gw = conv1d_weight_grad_batch(xs, n, c_in, l, g, c_out, l_out, k, geom);
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, channel_sums(g, n, c_out, l_out));
                }
            }
            Op::BatchNorm { x, scale, shift, xhat, inv_std, batch } => {
                let (n, c, l) = node.value.dims3("batch_norm")?;
                let gamma = self.value(*scale).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * l..(b * c + ch + 1) * l;
                        for (&gv, &h) in g[r.clone()].iter().zip(&xhat[r]) {
                            sum_g[ch] = sum_g[ch] + gv;
                            sum_gx[ch] = sum_gx[ch] + gv * h;
                        }
                    }
                }
                if self.rg(*x) {
                    let m = T::from_usize(n * l).unwrap();
                    let mut gx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gamma[ch] * inv_std[ch];
                            let r = (b * c + ch) * l..(b * c + ch + 1) * l;
                            for ((o, &gv), &h) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                *o = if *batch {
                                    k * (gv - (sum_g[ch] + h * sum_gx[ch]) / m)
                                } else {
                                    k * gv
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                self.accumulate(grads, *scale, sum_gx);
                self.accumulate(grads, *shift, sum_g);
            }
            Op::Relu { x } => {
                let gx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Affine { x, w, b } => {
                let (n, c, l_in) = self.value(*x).dims3("affine")?;
                let l_out = self.shape(*b)[0];
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); xs.len()];
                    for r in 0..n * c {
                        let gr = &g[r * l_out..(r + 1) * l_out];
                        let dst = &mut gx[r * l_in..(r + 1) * l_in];
                        for (o, &gv) in gr.iter().enumerate() {
                            for (d, &wv) in dst.iter_mut().zip(&ws[o * l_in..(o + 1) * l_in]) {
                                *d = *d + gv * wv;
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); ws.len()];
                    for r in 0..n * c {
                        let xr = &xs[r * l_in..(r + 1) * l_in];
                        for o in 0..l_out {
                            let gv = g[r * l_out + o];
                            for (d, &xv) in gw[o * l_in..(o + 1) * l_in].iter_mut().zip(xr) {
                                *d = *d + gv * xv;
                            }
                        }
                    }
                    self.accumulate(grads, *w, gw);
                }
                let mut gb = vec![T::zero(); l_out];
                for r in 0..n * c {
                    for (d, &gv) in gb.iter_mut().zip(&g[r * l_out..(r + 1) * l_out]) {
                        *d = *d + gv;
                    }
                }
                self.accumulate(grads, *b, gb);
            }
            Op::Concat { parts } => {
                let (n, c_total, l) = node.value.dims3("concat_channels")?;
                let mut off = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(n * pc * l);
                        for b in 0..n {
                            let start = (b * c_total + off) * l;
                            gp.extend_from_slice(&g[start..start + pc * l]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += pc;
                }
            }
            Op::Channel { x, c } => {
                let (n, ch, l) = self.value(*x).dims3("channel")?;
                let mut gx = vec![T::zero(); n * ch * l];
                for b in 0..n {
                    gx[(b * ch + c) * l..(b * ch + c + 1) * l].copy_from_slice(&g[b * l..(b + 1) * l]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MeanAll { x } => {
                let len = self.value(*x).len();
                let v = g[0] / T::from_usize(len).unwrap();
                self.accumulate(grads, *x, vec![v; len]);
            }
            Op::MeanLength { x } => {
                let (_, _, l) = self.value(*x).dims3("mean_length")?;
                let lt = T::from_usize(l).unwrap();
                let gx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv / lt, l)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Scale { x, c } => self.accumulate(grads, *x, g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::Abs { x } => {
                let gx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &v)| {
                        if v > T::zero() {
                            gv
                        } else if v < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Square { x } => {
                let two = T::from_f64c(2.0);
                let gx = g.iter().zip(self.value(*x).data()).map(|(&gv, &v)| two * v * gv).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    gl[r * k + y] = gl[r * k + y] - scale;
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::Spectral { x, tau, band, mode } => {
                let (_, _, l) = self.value(*x).dims3("spectral_band")?;
                let tau_v = self.value(*tau).item();
                if self.rg(*x) {
                    let mask = spectral::band_mask(l, tau_v, *band, *mode);
                    self.accumulate(grads, *x, spectral::filter_rows(g, l, &mask));
                }
                if self.rg(*tau) {
                    let dmask = spectral::band_mask_dtau(l, tau_v, *band, *mode);
                    let gt = spectral::mask_sensitivity(self.value(*x).data(), g, l, &dmask);
                    self.accumulate(grads, *tau, vec![gt]);
                }
            }
        }
        Ok(())
    }
}

fn softmax<T: Real>(row: &[T]) -> Vec<T> {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], len: usize) {
    let c = bias.len();
    for (r, row) in out.chunks_mut(len).enumerate() {
        let bv = bias[r % c];
        row.iter_mut().for_each(|v| *v = *v + bv);
    }
}

fn channel_sums<T: Real>(g: &[T], n: usize, c: usize, len: usize) -> Vec<T> {
    let mut s = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in s.iter_mut().enumerate() {
            *acc = *acc + g[(b * c + ch) * len..(b * c + ch + 1) * len].iter().copied().sum::<T>();
        }
    }
    s
}

/// Gradients of leaves reached by one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    names: HashMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter bound with [`Graph::param`].
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|&v| self.get(v))
    }

    /// Names of bound parameters that received a gradient.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.names
            .iter()
            .filter(|(_, v)| self.grads[v.0].is_some())
            .map(|(n, _)| n.as_str())
    }
}
