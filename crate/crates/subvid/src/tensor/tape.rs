//! Define-by-run Wengert tape. Forward ops append nodes; `backward` replays
//! the tape in reverse and accumulates gradients on every `requires_grad`
//! node reachable from the loss.

use super::{broadcast_shapes, Scalar, TensorData};
use crate::error::{Error, Result};

/// Index of a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Id(pub(crate) usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Id, Id),
    Mul(Id, Id),
    Scale(Id, T),
    Matmul(Id, Id),
    Permute(Id, Vec<usize>),
    Reshape(Id),
    Concat(Vec<Id>, usize),
    Slice {
        src: Id,
        axis: usize,
        start: usize,
        end: usize,
    },
    Softmax(Id),
    LayerNorm {
        x: Id,
        gamma: Id,
        beta: Id,
    },
    Silu(Id),
    MeanAll(Id),
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Per-op scratch saved for backward (layer_norm: mean+invstd per row).
    cache: Vec<T>,
}

/// Gradients produced by one backward pass, indexed by node id.
pub struct Grads<T> {
    g: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: Id) -> Option<&[T]> {
        self.g.get(id.0).and_then(|o| o.as_deref())
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: &TensorData<T>, requires_grad: bool) -> Id {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad, vec![])
            .expect("leaf insertion cannot fail")
    }

    pub fn constant(&mut self, t: &TensorData<T>) -> Id {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: T) -> Id {
        self.push(vec![], vec![v], Op::Leaf, false, vec![])
            .expect("scalar insertion cannot fail")
    }

    pub fn shape_of(&self, id: Id) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data_of(&self, id: Id) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn numel_of(&self, id: Id) -> usize {
        self.nodes[id.0].data.len()
    }

    pub fn to_tensor(&self, id: Id) -> TensorData<T> {
        TensorData::new(self.shape_of(id).to_vec(), self.data_of(id).to_vec())
            .expect("node shape/data are consistent")
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        requires_grad: bool,
        cache: Vec<T>,
    ) -> Result<Id> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite output from {} op",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            cache,
        });
        Ok(Id(self.nodes.len() - 1))
    }

    fn rg(&self, id: Id) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── elementwise, broadcasting ────────────────────────────────────

    pub fn add(&mut self, a: Id, b: Id) -> Result<Id> {
        self.binary(a, b, true)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Result<Id> {
        self.binary(a, b, false)
    }

    fn binary(&mut self, a: Id, b: Id, is_add: bool) -> Result<Id> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        let out_shape = broadcast_shapes(&sa, &sb)?;
        let numel: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); numel];
        {
            let da = self.data_of(a);
            let db = self.data_of(b);
            if sa == sb {
                if is_add {
                    for i in 0..numel {
                        out[i] = da[i] + db[i];
                    }
                } else {
                    for i in 0..numel {
                        out[i] = da[i] * db[i];
                    }
                }
            } else {
                for_each_bcast(&out_shape, &sa, &sb, |o, ai, bi| {
                    out[o] = if is_add { da[ai] + db[bi] } else { da[ai] * db[bi] };
                });
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let op = if is_add { Op::Add(a, b) } else { Op::Mul(a, b) };
        self.push(out_shape, out, op, rg, vec![])
    }

    pub fn scale(&mut self, a: Id, s: T) -> Result<Id> {
        let data: Vec<T> = self.data_of(a).iter().map(|&v| v * s).collect();
        let shape = self.shape_of(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, data, Op::Scale(a, s), rg, vec![])
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Result<Id> {
        let nb = self.scale(b, -T::one())?;
        self.add(a, nb)
    }

    // ── matmul ───────────────────────────────────────────────────────

    /// 2D matmul, batched 3D matmul, or 3D × 2D (shared right operand) /
    /// 2D × 3D (shared left operand).
    pub fn matmul(&mut self, a: Id, b: Id) -> Result<Id> {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        let (batch, m, k, n, out_shape) = matmul_dims(&sa, &sb)?;
        let mut out = vec![T::zero(); batch * m * n];
        {
            let da = self.data_of(a);
            let db = self.data_of(b);
            let a_stride = if sa.len() == 3 { m * k } else { 0 };
            let b_stride = if sb.len() == 3 { k * n } else { 0 };
            for bt in 0..batch {
                mm_nn(
                    &da[bt * a_stride..bt * a_stride + m * k],
                    &db[bt * b_stride..bt * b_stride + k * n],
                    m,
                    k,
                    n,
                    &mut out[bt * m * n..(bt + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out_shape, out, Op::Matmul(a, b), rg, vec![])
    }

    // ── data movement ────────────────────────────────────────────────

    pub fn permute(&mut self, a: Id, axes: &[usize]) -> Result<Id> {
        let sa = self.shape_of(a).to_vec();
        if axes.len() != sa.len() {
            return Err(Error::Dimension(format!(
                "permute axes {:?} do not match rank {}",
                axes,
                sa.len()
            )));
        }
        let mut seen = vec![false; sa.len()];
        for &ax in axes {
            if ax >= sa.len() || seen[ax] {
                return Err(Error::Dimension(format!("invalid permutation {axes:?}")));
            }
            seen[ax] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| sa[ax]).collect();
        let data = permute_data(self.data_of(a), &sa, axes);
        let rg = self.rg(a);
        self.push(out_shape, data, Op::Permute(a, axes.to_vec()), rg, vec![])
    }

    pub fn reshape(&mut self, a: Id, shape: &[usize]) -> Result<Id> {
        let numel: usize = shape.iter().product();
        if numel != self.numel_of(a) {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape_of(a),
                shape
            )));
        }
        let data = self.data_of(a).to_vec();
        let rg = self.rg(a);
        self.push(shape.to_vec(), data, Op::Reshape(a), rg, vec![])
    }

    pub fn concat(&mut self, inputs: &[Id], axis: usize) -> Result<Id> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.shape_of(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0usize;
        for &id in inputs {
            let s = self.shape_of(id);
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(Error::Dimension(format!(
                    "concat shape {s:?} incompatible with {first:?} along axis {axis}"
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * axis_total * inner];
        let mut offset = 0usize;
        for &id in inputs {
            let s_axis = self.shape_of(id)[axis];
            let src = self.data_of(id);
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * s_axis * inner;
                out[dst_base..dst_base + s_axis * inner]
                    .copy_from_slice(&src[src_base..src_base + s_axis * inner]);
            }
            offset += s_axis;
        }
        let rg = inputs.iter().any(|&id| self.rg(id));
        self.push(out_shape, out, Op::Concat(inputs.to_vec(), axis), rg, vec![])
    }

    pub fn slice(&mut self, src: Id, axis: usize, start: usize, end: usize) -> Result<Id> {
        let s = self.shape_of(src).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::Dimension(format!(
                "slice [{start},{end}) on axis {axis} of shape {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len = end - start;
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let mut out = vec![T::zero(); outer * len * inner];
        let data = self.data_of(src);
        for o in 0..outer {
            let src_base = (o * s[axis] + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&data[src_base..src_base + len * inner]);
        }
        let rg = self.rg(src);
        self.push(
            out_shape,
            out,
            Op::Slice {
                src,
                axis,
                start,
                end,
            },
            rg,
            vec![],
        )
    }

    // ── nonlinear kernels ────────────────────────────────────────────

    /// Numerically stabilized softmax along the last axis.
    pub fn softmax(&mut self, a: Id) -> Result<Id> {
        let s = self.shape_of(a).to_vec();
        let n = *s.last().ok_or_else(|| {
            Error::Dimension("softmax requires at least one axis".to_string())
        })?;
        if n == 0 {
            return Err(Error::Dimension("softmax over empty axis".into()));
        }
        let data = self.data_of(a);
        let mut out = vec![T::zero(); data.len()];
        for (row_in, row_out) in data.chunks(n).zip(out.chunks_mut(n)) {
            let mx = row_in.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                let e = (v - mx).exp();
                *o = e;
                sum = sum + e;
            }
            for o in row_out.iter_mut() {
                *o = *o / sum;
            }
        }
        let rg = self.rg(a);
        self.push(s, out, Op::Softmax(a), rg, vec![])
    }

    /// Layer normalization over the last axis followed by `gamma`/`beta`
    /// affine (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Id, gamma: Id, beta: Id, eps: T) -> Result<Id> {
        let s = self.shape_of(x).to_vec();
        let n = *s
            .last()
            .ok_or_else(|| Error::Dimension("layer_norm needs at least one axis".to_string()))?;
        if n == 0 {
            return Err(Error::Dimension("layer_norm over empty axis".into()));
        }
        if self.shape_of(gamma) != [n] || self.shape_of(beta) != [n] {
            return Err(Error::Dimension(format!(
                "layer_norm affine shapes {:?}/{:?} do not match axis {}",
                self.shape_of(gamma),
                self.shape_of(beta),
                n
            )));
        }
        let rows = self.numel_of(x) / n;
        let mut out = vec![T::zero(); self.numel_of(x)];
        let mut cache = vec![T::zero(); 2 * rows];
        {
            let data = self.data_of(x);
            let g = self.data_of(gamma);
            let b = self.data_of(beta);
            let inv_n = T::one() / T::from_f64(n as f64);
            for r in 0..rows {
                let row = &data[r * n..(r + 1) * n];
                let mu = row.iter().cloned().sum::<T>() * inv_n;
                let var = row
                    .iter()
                    .map(|&v| (v - mu) * (v - mu))
                    .sum::<T>()
                    * inv_n;
                let inv = T::one() / (var + eps).sqrt();
                cache[2 * r] = mu;
                cache[2 * r + 1] = inv;
                for j in 0..n {
                    out[r * n + j] = (row[j] - mu) * inv * g[j] + b[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(s, out, Op::LayerNorm { x, gamma, beta }, rg, cache)
    }

    pub fn silu(&mut self, a: Id) -> Result<Id> {
        let data: Vec<T> = self
            .data_of(a)
            .iter()
            .map(|&v| v * sigmoid(v))
            .collect();
        let shape = self.shape_of(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, data, Op::Silu(a), rg, vec![])
    }

    /// Mean over all elements, producing a rank-0 scalar.
    pub fn mean_all(&mut self, a: Id) -> Result<Id> {
        let numel = self.numel_of(a);
        if numel == 0 {
            return Err(Error::Dimension("mean of empty tensor".into()));
        }
        let sum: T = self.data_of(a).iter().cloned().sum();
        let v = sum / T::from_f64(numel as f64);
        let rg = self.rg(a);
        self.push(vec![], vec![v], Op::MeanAll(a), rg, vec![])
    }

    // ── composites ───────────────────────────────────────────────────

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Id, b: Id) -> Result<Id> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    /// `x @ w + bias`, bias broadcast over leading axes.
    pub fn linear(&mut self, x: Id, w: Id, bias: Id) -> Result<Id> {
        let y = self.matmul(x, w)?;
        self.add(y, bias)
    }

    // ── backward ─────────────────────────────────────────────────────

    pub fn backward(&self, loss: Id) -> Result<Grads<T>> {
        if self.numel_of(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape_of(loss)
            )));
        }
        let mut g: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Grads { g });
        }
        g[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                g[i] = None;
                continue;
            }
            let gout = match g[i].take() {
                Some(v) => v,
                None => continue,
            };
            self.backward_node(i, &gout, &mut g);
            g[i] = Some(gout);
        }
        Ok(Grads { g })
    }

    fn backward_node(&self, i: usize, gout: &[T], g: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &(id, _other) in &[(*a, *b), (*b, *a)] {
                    if self.rg(id) {
                        let gi = acc(g, id, self.numel_of(id));
                        if self.shape_of(id) == node.shape.as_slice() {
                            for (gv, &go) in gi.iter_mut().zip(gout) {
                                *gv = *gv + go;
                            }
                        } else {
                            let si = self.shape_of(id).to_vec();
                            for_each_bcast(&node.shape, &si, &node.shape, |o, ai, _| {
                                gi[ai] = gi[ai] + gout[o];
                            });
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                for (id, other) in [(a, b), (b, a)] {
                    if self.rg(id) {
                        let dother = self.data_of(other);
                        let si = self.shape_of(id).to_vec();
                        let so = self.shape_of(other).to_vec();
                        let gi = acc(g, id, self.numel_of(id));
                        for_each_bcast(&node.shape, &si, &so, |o, ai, bi| {
                            gi[ai] = gi[ai] + gout[o] * dother[bi];
                        });
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    let gi = acc(g, *a, self.numel_of(*a));
                    for (gv, &go) in gi.iter_mut().zip(gout) {
                        *gv = *gv + go * *s;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let sa = self.shape_of(*a).to_vec();
                let sb = self.shape_of(*b).to_vec();
                let (batch, m, k, n, _) =
                    matmul_dims(&sa, &sb).expect("forward already validated");
                let a_stride = if sa.len() == 3 { m * k } else { 0 };
                let b_stride = if sb.len() == 3 { k * n } else { 0 };
                if self.rg(*a) {
                    let db = self.data_of(*b);
                    let ga = acc(g, *a, self.numel_of(*a));
                    for bt in 0..batch {
                        mm_nt(
                            &gout[bt * m * n..(bt + 1) * m * n],
                            &db[bt * b_stride..bt * b_stride + k * n],
                            m,
                            n,
                            k,
                            &mut ga[bt * a_stride..bt * a_stride + m * k],
                        );
                    }
                }
                if self.rg(*b) {
                    let da = self.data_of(*a);
                    let gb = acc(g, *b, self.numel_of(*b));
                    for bt in 0..batch {
                        mm_tn(
                            &da[bt * a_stride..bt * a_stride + m * k],
                            &gout[bt * m * n..(bt + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut gb[bt * b_stride..bt * b_stride + k * n],
                        );
                    }
                }
            }
            Op::Permute(a, axes) => {
                if self.rg(*a) {
                    let mut inv = vec![0usize; axes.len()];
                    for (d, &ax) in axes.iter().enumerate() {
                        inv[ax] = d;
                    }
                    let back = permute_data(gout, &node.shape, &inv);
                    let gi = acc(g, *a, self.numel_of(*a));
                    for (gv, bv) in gi.iter_mut().zip(back) {
                        *gv = *gv + bv;
                    }
                }
            }
            Op::Reshape(a) => {
                if self.rg(*a) {
                    let gi = acc(g, *a, self.numel_of(*a));
                    for (gv, &go) in gi.iter_mut().zip(gout) {
                        *gv = *gv + go;
                    }
                }
            }
            Op::Concat(inputs, axis) => {
                let axis = *axis;
                let out_axis = node.shape[axis];
                let outer: usize = node.shape[..axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let mut offset = 0usize;
                for &id in inputs {
                    let s_axis = self.shape_of(id)[axis];
                    if self.rg(id) {
                        let gi = acc(g, id, self.numel_of(id));
                        for o in 0..outer {
                            let src_base = (o * out_axis + offset) * inner;
                            let dst_base = o * s_axis * inner;
                            for j in 0..s_axis * inner {
                                gi[dst_base + j] = gi[dst_base + j] + gout[src_base + j];
                            }
                        }
                    }
                    offset += s_axis;
                }
            }
            Op::Slice {
                src,
                axis,
                start,
                end,
            } => {
                if self.rg(*src) {
                    let s = self.shape_of(*src).to_vec();
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[*axis + 1..].iter().product();
                    let len = end - start;
                    let gi = acc(g, *src, self.numel_of(*src));
                    for o in 0..outer {
                        let dst_base = (o * s[*axis] + start) * inner;
                        let src_base = o * len * inner;
                        for j in 0..len * inner {
                            gi[dst_base + j] = gi[dst_base + j] + gout[src_base + j];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.rg(*a) {
                    let n = *node.shape.last().unwrap();
                    let y = &node.data;
                    let gi = acc(g, *a, self.numel_of(*a));
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &gout[r * n..(r + 1) * n];
                        let dot: T = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..n {
                            gi[r * n + j] = gi[r * n + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let n = *node.shape.last().unwrap();
                let rows = node.data.len() / n;
                let dx_data = self.data_of(*x);
                let dgamma_data = self.data_of(*gamma);
                let inv_n = T::one() / T::from_f64(n as f64);
                if self.rg(*beta) {
                    let gb = acc(g, *beta, n);
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] = gb[j] + gout[r * n + j];
                        }
                    }
                }
                if self.rg(*gamma) {
                    let gg = acc(g, *gamma, n);
                    for r in 0..rows {
                        let mu = node.cache[2 * r];
                        let inv = node.cache[2 * r + 1];
                        for j in 0..n {
                            let xhat = (dx_data[r * n + j] - mu) * inv;
                            gg[j] = gg[j] + gout[r * n + j] * xhat;
                        }
                    }
                }
                if self.rg(*x) {
                    let gx = acc(g, *x, dx_data.len());
                    for r in 0..rows {
                        let mu = node.cache[2 * r];
                        let inv = node.cache[2 * r + 1];
                        let mut mean_dxhat = T::zero();
                        let mut mean_dxhat_xhat = T::zero();
                        for j in 0..n {
                            let xhat = (dx_data[r * n + j] - mu) * inv;
                            let dxhat = gout[r * n + j] * dgamma_data[j];
                            mean_dxhat = mean_dxhat + dxhat;
                            mean_dxhat_xhat = mean_dxhat_xhat + dxhat * xhat;
                        }
                        mean_dxhat = mean_dxhat * inv_n;
                        mean_dxhat_xhat = mean_dxhat_xhat * inv_n;
                        for j in 0..n {
                            let xhat = (dx_data[r * n + j] - mu) * inv;
                            let dxhat = gout[r * n + j] * dgamma_data[j];
                            gx[r * n + j] = gx[r * n + j]
                                + inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Silu(a) => {
                if self.rg(*a) {
                    let dx = self.data_of(*a);
                    let gi = acc(g, *a, dx.len());
                    for j in 0..dx.len() {
                        let s = sigmoid(dx[j]);
                        gi[j] = gi[j] + gout[j] * s * (T::one() + dx[j] * (T::one() - s));
                    }
                }
            }
            Op::MeanAll(a) => {
                if self.rg(*a) {
                    let numel = self.numel_of(*a);
                    let go = gout[0] / T::from_f64(numel as f64);
                    let gi = acc(g, *a, numel);
                    for gv in gi.iter_mut() {
                        *gv = *gv + go;
                    }
                }
            }
        }
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Matmul(..) => "matmul",
        Op::Permute(..) => "permute",
        Op::Reshape(..) => "reshape",
        Op::Concat(..) => "concat",
        Op::Slice { .. } => "slice",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Silu(..) => "silu",
        Op::MeanAll(..) => "mean",
    }
}

fn acc<T: Scalar>(g: &mut [Option<Vec<T>>], id: Id, numel: usize) -> &mut Vec<T> {
    let slot = &mut g[id.0];
    if slot.is_none() {
        *slot = Some(vec![T::zero(); numel]);
    }
    slot.as_mut().unwrap()
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize, Vec<usize>)> {
    let bad = || {
        Error::Dimension(format!(
            "matmul of shapes {sa:?} and {sb:?} is not supported"
        ))
    };
    match (sa.len(), sb.len()) {
        (2, 2) => {
            if sa[1] != sb[0] {
                return Err(bad());
            }
            Ok((1, sa[0], sa[1], sb[1], vec![sa[0], sb[1]]))
        }
        (3, 3) => {
            if sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(bad());
            }
            Ok((sa[0], sa[1], sa[2], sb[2], vec![sa[0], sa[1], sb[2]]))
        }
        (3, 2) => {
            if sa[2] != sb[0] {
                return Err(bad());
            }
            Ok((sa[0], sa[1], sa[2], sb[1], vec![sa[0], sa[1], sb[1]]))
        }
        (2, 3) => {
            if sa[1] != sb[1] {
                return Err(bad());
            }
            Ok((sb[0], sa[0], sa[1], sb[2], vec![sb[0], sa[0], sb[2]]))
        }
        _ => Err(bad()),
    }
}

/// C += A(m×k) @ B(k×n)
fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

/// C(m×k) += A(m×n) @ B(k×n)ᵀ
fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = T::zero();
            for l in 0..n {
                s = s + arow[l] * brow[l];
            }
            c[i * k + j] = c[i * k + j] + s;
        }
    }
}

/// C(k×n) += A(m×k)ᵀ @ B(m×n)
fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    for l in 0..m {
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..k {
            let av = a[l * k + i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    if rank == 0 {
        return data.to_vec();
    }
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank - 1).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let out_strides_in: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let mut out = vec![T::zero(); data.len()];
    let mut coords = vec![0usize; rank];
    let mut in_idx = 0usize;
    for o in out.iter_mut() {
        *o = data[in_idx];
        for d in (0..rank).rev() {
            coords[d] += 1;
            in_idx += out_strides_in[d];
            if coords[d] < out_shape[d] {
                break;
            }
            in_idx -= out_strides_in[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    out
}

/// Visit every output element of a broadcast binary op, yielding
/// `(out_index, a_index, b_index)`.
fn for_each_bcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1usize; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let pa = pad(a_shape);
    let pb = pad(b_shape);
    let strides = |s: &[usize]| -> Vec<usize> {
        let mut st = vec![0usize; rank];
        let mut acc = 1usize;
        for d in (0..rank).rev() {
            st[d] = if s[d] == 1 { 0 } else { acc };
            acc *= s[d];
        }
        st
    };
    let sa = strides(&pa);
    let sb = strides(&pb);
    let mut coords = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for o in 0..numel {
        f(o, ai, bi);
        for d in (0..rank).rev() {
            coords[d] += 1;
            ai += sa[d];
            bi += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            ai -= sa[d] * out_shape[d];
            bi -= sb[d] * out_shape[d];
            coords[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn td(shape: &[usize], data: &[f64]) -> TensorData<f64> {
        TensorData::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_oracle() {
        let mut t = Tape::new();
        let a = t.constant(&td(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = t.constant(&td(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data_of(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_padded() {
        // 2x3 times 3x2 "identity-padded" (I with a zero row appended)
        let mut t = Tape::new();
        let a = t.constant(&td(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = t.constant(&td(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape_of(c), &[2, 2]);
        assert_eq!(t.data_of(c), &[1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch_errors() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(&TensorData::zeros(vec![2, 3]));
        let b = t.constant(&TensorData::zeros(vec![2, 2]));
        assert!(matches!(
            t.matmul(a, b),
            Err(crate::error::Error::Dimension(_))
        ));
    }

    #[test]
    fn add_zero_is_bitwise_identity() {
        let mut t = Tape::new();
        let x = t.constant(&td(&[3], &[1.25, -0.5, 3.75]));
        let z = t.constant(&td(&[3], &[0.0, 0.0, 0.0]));
        let y = t.add(x, z).unwrap();
        assert_eq!(t.data_of(y), t.data_of(x));
    }

    #[test]
    fn softmax_uniform_and_oracle() {
        let mut t = Tape::new();
        let u = t.constant(&td(&[3], &[0.0, 0.0, 0.0]));
        let su = t.softmax(u).unwrap();
        for &v in t.data_of(su) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        // direct exp/normalize oracle for [1,2,3]
        let x = t.constant(&td(&[3], &[1.0, 2.0, 3.0]));
        let s = t.softmax(x).unwrap();
        let es: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|v: &f64| v.exp()).collect();
        let tot: f64 = es.iter().sum();
        for (got, e) in t.data_of(s).iter().zip(&es) {
            assert!((got - e / tot).abs() < 1e-12);
        }
        let d = t.data_of(s);
        assert!((d[0] - 0.0900).abs() < 5e-5);
        assert!((d[1] - 0.2447).abs() < 5e-5);
        assert!((d[2] - 0.6652).abs() < 5e-5);
    }

    #[test]
    fn softmax_is_overflow_stable() {
        let mut t = Tape::new();
        let x = t.constant(&td(&[2], &[1000.0, 0.0]));
        let s = t.softmax(x).unwrap();
        let d = t.data_of(s);
        assert!((d[0] - 1.0).abs() < 1e-12);
        assert!(d[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.constant(&TensorData::<f64>::randn(vec![7, 11], &mut rng));
        let s = t.softmax(x).unwrap();
        for row in t.data_of(s).chunks(11) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut t = Tape::new();
        let ones = t.constant(&td(&[3], &[1.0, 1.0, 1.0]));
        let zeros = t.constant(&td(&[3], &[0.0, 0.0, 0.0]));
        // constant row normalizes to zero
        let c = t.constant(&td(&[1, 3], &[5.0, 5.0, 5.0]));
        let y = t.layer_norm(c, ones, zeros, 1e-5).unwrap();
        for &v in t.data_of(y) {
            assert!(v.abs() < 1e-6);
        }
        // [1,3] -> approximately [-1, 1]
        let ones2 = t.constant(&td(&[2], &[1.0, 1.0]));
        let zeros2 = t.constant(&td(&[2], &[0.0, 0.0]));
        let x = t.constant(&td(&[1, 2], &[1.0, 3.0]));
        let y2 = t.layer_norm(x, ones2, zeros2, 1e-8).unwrap();
        let d = t.data_of(y2);
        assert!((d[0] + 1.0).abs() < 1e-3);
        assert!((d[1] - 1.0).abs() < 1e-3);
        // scale = 0 collapses output to the shift
        let zscale = t.constant(&td(&[2], &[0.0, 0.0]));
        let shift = t.constant(&td(&[2], &[0.7, -0.3]));
        let y3 = t.layer_norm(x, zscale, shift, 1e-8).unwrap();
        assert_eq!(t.data_of(y3), &[0.7, -0.3]);
    }

    #[test]
    fn layer_norm_pre_affine_rows_have_zero_mean() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let ones = t.constant(&TensorData::full(vec![9], 1.0));
        let zeros = t.constant(&TensorData::zeros(vec![9]));
        let x = t.constant(&TensorData::<f64>::randn(vec![6, 9], &mut rng));
        let y = t.layer_norm(x, ones, zeros, 1e-9).unwrap();
        for row in t.data_of(y).chunks(9) {
            let mean: f64 = row.iter().sum::<f64>() / 9.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 9.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_square_and_sum() {
        // f(x) = mean(x*x) scaled by n equals sum of squares; grad at x=3 is 6
        let mut t = Tape::new();
        let x = t.leaf(&td(&[1], &[3.0]), true);
        let sq = t.mul(x, x).unwrap();
        let loss = t.mean_all(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);

        // f(x) = sum(x) -> grad all ones
        let mut t = Tape::new();
        let x = t.leaf(&td(&[4], &[1.0, 2.0, 3.0, 4.0]), true);
        let m = t.mean_all(x).unwrap();
        let loss = t.scale(m, 4.0).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(&td(&[2], &[1.0, 2.0]), true);
        assert!(matches!(
            t.backward(x),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn unreachable_leaf_has_no_grad() {
        let mut t = Tape::new();
        let x = t.leaf(&td(&[1], &[2.0]), true);
        let y = t.leaf(&td(&[1], &[5.0]), true);
        let sq = t.mul(x, x).unwrap();
        let loss = t.mean_all(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.get(y).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut t = Tape::new();
        let a = t.constant(&td(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = t.constant(&td(&[1, 2], &[5.0, 6.0]));
        let c = t.concat(&[a, b], 0).unwrap();
        assert_eq!(t.data_of(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let top = t.slice(c, 0, 0, 2).unwrap();
        let bot = t.slice(c, 0, 2, 3).unwrap();
        assert_eq!(t.data_of(top), t.data_of(a));
        assert_eq!(t.data_of(bot), t.data_of(b));
    }

    #[test]
    fn concat_axis1_layout() {
        let mut t = Tape::new();
        let a = t.constant(&td(&[2, 1], &[1.0, 3.0]));
        let b = t.constant(&td(&[2, 2], &[10.0, 20.0, 30.0, 40.0]));
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape_of(c), &[2, 3]);
        assert_eq!(t.data_of(c), &[1.0, 10.0, 20.0, 3.0, 30.0, 40.0]);
    }

    #[test]
    fn permute_round_trip() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = TensorData::<f64>::randn(vec![2, 3, 4], &mut rng);
        let mut t = Tape::new();
        let a = t.constant(&x);
        let p = t.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(t.shape_of(p), &[4, 2, 3]);
        let back = t.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(t.data_of(back), x.data());
    }

    #[test]
    fn non_finite_output_is_a_numeric_error() {
        let mut t = Tape::new();
        let big = t.constant(&td(&[1], &[f64::MAX]));
        assert!(matches!(
            t.add(big, big),
            Err(crate::error::Error::Numeric(_))
        ));
    }
}
