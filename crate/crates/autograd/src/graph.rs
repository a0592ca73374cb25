use crate::conv::{geometry, ConvGeometry};
use crate::dense::split_volume;
use crate::tensor::Element;
use crate::{AutogradError, Dense, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv3d { input: Var, kernel: Var, geo: ConvGeometry },
    AddChannelBias { x: Var, bias: Var },
    Activation { x: Var, kind: Activation },
    Softmax { x: Var },
    MaskedMean { x: Var, voxels: Vec<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Affine { x: Var, scale: f64 },
    Sum(Var),
    Mean(Var),
    Upsample2(Var),
    Concat(Var, Var),
    MatVec { w: Var, x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Dense<T>,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation tape.
///
/// Nodes are appended in evaluation order, so parents always precede their
/// children and the tape is acyclic by construction. Values are computed
/// eagerly; [`Graph::backward`] replays the tape in reverse.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err<S: Into<String>>(msg: S) -> AutogradError {
    AutogradError::Shape(msg.into())
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Dense<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Dense<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Trainable leaf: receives a gradient from [`Graph::backward`].
    pub fn param(&mut self, value: Dense<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: inputs, targets, frozen weights.
    pub fn constant(&mut self, value: Dense<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Dense::scalar(T::from_f64(v)))
    }

    pub fn conv3d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geo = geometry(self.shape(input), self.shape(kernel), stride, padding).map_err(shape_err)?;
        let out = geo.forward(self.value(input).data(), self.value(kernel).data());
        let shape = vec![geo.c_out, geo.output[0], geo.output[1], geo.output[2]];
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(Dense::from_vec(shape, out), Op::Conv3d { input, kernel, geo }, rg))
    }

    /// Adds `bias[c]` to every voxel of channel `c`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.first().ok_or_else(|| shape_err("channel bias on a scalar"))?;
        if self.shape(bias) != [c] {
            return Err(shape_err(format!("bias shape {:?} does not match {c} channels", self.shape(bias))));
        }
        let inner = self.value(x).len() / c;
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (ch, chunk) in out.chunks_mut(inner).enumerate() {
            for v in chunk {
                *v += b[ch];
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Dense::from_vec(xs, out), Op::AddChannelBias { x, bias }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let f: fn(T) -> T = match kind {
            Activation::Relu => |v| if v > T::zero() { v } else { T::zero() },
            Activation::Tanh => |v| v.tanh(),
            Activation::Sigmoid => |v| T::one() / (T::one() + (-v).exp()),
        };
        let out = self.value(x).map(|&v| f(v));
        let rg = self.rg(x);
        self.push(out, Op::Activation { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Softmax across the leading (channel) axis at every voxel.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let k = *xs.first().ok_or_else(|| shape_err("softmax on a scalar"))?;
        if k < 2 {
            return Err(shape_err(format!("softmax needs at least 2 channels, got {k}")));
        }
        let src = self.value(x).data();
        if !src.iter().all(|v| v.is_finite()) {
            return Err(AutogradError::NonFinite("softmax input".into()));
        }
        let n = src.len() / k;
        let mut out = vec![T::zero(); src.len()];
        for v in 0..n {
            let mut m = src[v];
            for c in 1..k {
                m = m.max(src[c * n + v]);
            }
            let mut total = T::zero();
            for c in 0..k {
                let e = (src[c * n + v] - m).exp();
                out[c * n + v] = e;
                total += e;
            }
            for c in 0..k {
                out[c * n + v] = out[c * n + v] / total;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Dense::from_vec(xs, out), Op::Softmax { x }, rg))
    }

    /// Mean of the channel vectors at the voxels where `mask` is nonzero.
    ///
    /// `x` is `K×X×Y×Z`, `mask` is `X×Y×Z`; the result has shape `[K]`.
    pub fn masked_mean(&mut self, x: Var, mask: &[u8]) -> Result<Var> {
        let voxels: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (m != 0).then_some(i))
            .collect();
        self.masked_mean_indices(x, mask.len(), voxels)
    }

    /// [`Graph::masked_mean`] with the selected voxel indices precomputed.
    pub fn masked_mean_indices(&mut self, x: Var, mask_len: usize, voxels: Vec<usize>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let k = *xs.first().ok_or_else(|| shape_err("masked mean on a scalar"))?;
        let n = self.value(x).len() / k;
        if n != mask_len {
            return Err(shape_err(format!("mask covers {mask_len} voxels, tensor has {n}")));
        }
        if voxels.is_empty() {
            return Err(AutogradError::DegenerateRegion);
        }
        let src = self.value(x).data();
        let count = T::from_f64(voxels.len() as f64);
        let out: Vec<T> = (0..k)
            .map(|c| {
                let mut acc = T::zero();
                for &v in &voxels {
                    acc += src[c * n + v];
                }
                acc / count
            })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Dense::from_vec(vec![k], out), Op::MaskedMean { x, voxels }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Dense::from_vec(shape, out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|&v| v.ln());
        let rg = self.rg(x);
        self.push(out, Op::Log(x), rg)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        let out = self.value(x).map(|&v| v.max(l).min(h));
        let rg = self.rg(x);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::from_f64(scale), T::from_f64(shift));
        let out = self.value(x).map(|&v| s * v + t);
        let rg = self.rg(x);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.rg(x);
        self.push(Dense::scalar(acc), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let n = T::from_f64(self.value(x).len() as f64);
        let rg = self.rg(x);
        self.push(Dense::scalar(acc / n), Op::Mean(x), rg)
    }

    /// Nearest-neighbour 2× upsampling of every spatial axis of `C×X×Y×Z`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, [nx, ny, nz]) =
            split_volume(self.shape(x)).ok_or_else(|| shape_err("upsample expects C×X×Y×Z"))?;
        let src = self.value(x).data();
        let (ox, oy, oz) = (2 * nx, 2 * ny, 2 * nz);
        let mut out = vec![T::zero(); c * ox * oy * oz];
        for ch in 0..c {
            for x in 0..ox {
                for y in 0..oy {
                    let dst = ((ch * ox + x) * oy + y) * oz;
                    let srow = ((ch * nx + x / 2) * ny + y / 2) * nz;
                    for z in 0..oz {
                        out[dst + z] = src[srow + z / 2];
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Dense::from_vec(vec![c, ox, oy, oz], out), Op::Upsample2(x), rg))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(shape_err(format!("cannot concatenate {sa:?} and {sb:?}")));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Dense::from_vec(shape, out), Op::Concat(a, b), rg))
    }

    /// `w · x` for `w: M×N`, `x: N`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (ws, xs) = (self.shape(w).to_vec(), self.shape(x).to_vec());
        let [m, n] = ws[..] else {
            return Err(shape_err(format!("matvec weight must be a matrix, got {ws:?}")));
        };
        if xs != [n] {
            return Err(shape_err(format!("matvec: {ws:?} times {xs:?}")));
        }
        let (wd, xd) = (self.value(w).data(), self.value(x).data());
        let out: Vec<T> = (0..m)
            .map(|i| {
                let mut acc = T::zero();
                for j in 0..n {
                    acc += wd[i * n + j] * xd[j];
                }
                acc
            })
            .collect();
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(Dense::from_vec(vec![m], out), Op::MatVec { w, x }, rg))
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(AutogradError::NonScalarRoot(root_value.shape().to_vec()));
        }
        if !root_value.item().is_finite() {
            return Err(AutogradError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|g| Dense::from_vec(n.value.shape().to_vec(), g)))
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], target: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(target) {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| vec![T::zero(); self.nodes[target.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { input, kernel, geo } => {
                let (xv, kv) = (self.value(*input).data(), self.value(*kernel).data());
                self.accumulate(grads, *input, |gi| geo.backward_input(kv, g, gi));
                self.accumulate(grads, *kernel, |gk| geo.backward_kernel(xv, g, gk));
            }
            Op::AddChannelBias { x, bias } => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                let c = self.shape(*bias)[0];
                let inner = g.len() / c;
                self.accumulate(grads, *bias, |gb| {
                    for (ch, chunk) in g.chunks(inner).enumerate() {
                        let mut acc = T::zero();
                        for &v in chunk {
                            acc += v;
                        }
                        gb[ch] += acc;
                    }
                });
            }
            Op::Activation { x, kind } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        let d = match kind {
                            Activation::Relu => {
                                if xv[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Activation::Tanh => T::one() - out[i] * out[i],
                            Activation::Sigmoid => out[i] * (T::one() - out[i]),
                        };
                        gx[i] += g[i] * d;
                    }
                });
            }
            Op::Softmax { x } => {
                let k = node.value.shape()[0];
                let n = out.len() / k;
                self.accumulate(grads, *x, |gx| {
                    for v in 0..n {
                        let mut dot = T::zero();
                        for c in 0..k {
                            dot += g[c * n + v] * out[c * n + v];
                        }
                        for c in 0..k {
                            gx[c * n + v] += out[c * n + v] * (g[c * n + v] - dot);
                        }
                    }
                });
            }
            Op::MaskedMean { x, voxels } => {
                let k = node.value.len();
                let n = self.value(*x).len() / k;
                let count = T::from_f64(voxels.len() as f64);
                self.accumulate(grads, *x, |gx| {
                    for c in 0..k {
                        let share = g[c] / count;
                        for &v in voxels {
                            gx[c * n + v] += share;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] / xv[i];
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let (l, h) = (T::from_f64(*lo), T::from_f64(*hi));
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        if xv[i] >= l && xv[i] <= h {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Affine { x, scale } => {
                let s = T::from_f64(*scale);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * s;
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| {
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                });
            }
            Op::Mean(x) => {
                let share = g[0] / T::from_f64(self.value(*x).len() as f64);
                self.accumulate(grads, *x, |gx| {
                    for v in gx.iter_mut() {
                        *v += share;
                    }
                });
            }
            Op::Upsample2(x) => {
                let (c, [nx, ny, nz]) = split_volume(self.shape(*x)).expect("checked in forward");
                let (ox, oy, oz) = (2 * nx, 2 * ny, 2 * nz);
                self.accumulate(grads, *x, |gx| {
                    for ch in 0..c {
                        for x in 0..ox {
                            for y in 0..oy {
                                let src = ((ch * ox + x) * oy + y) * oz;
                                let dst = ((ch * nx + x / 2) * ny + y / 2) * nz;
                                for z in 0..oz {
                                    gx[dst + z / 2] += g[src + z];
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let split = self.value(*a).len();
                self.accumulate(grads, *a, |ga| add_into(ga, &g[..split]));
                self.accumulate(grads, *b, |gb| add_into(gb, &g[split..]));
            }
            Op::MatVec { w, x } => {
                let n = self.shape(*x)[0];
                let m = g.len();
                let (wd, xd) = (self.value(*w).data(), self.value(*x).data());
                self.accumulate(grads, *w, |gw| {
                    for i in 0..m {
                        for j in 0..n {
                            gw[i * n + j] += g[i] * xd[j];
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[j] += wd[i * n + j] * g[i];
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Dense<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a node, if the root depends on it.
    pub fn get(&self, v: Var) -> Option<&Dense<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled when the root does not depend on it.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Dense<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Dense::zeros(graph.shape(v).to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(g: &mut Graph<f64>, v: &[f64], trainable: bool) -> Var {
        let d = Dense::from_vec(vec![v.len()], v.to_vec());
        if trainable {
            g.param(d)
        } else {
            g.constant(d)
        }
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::<f64>::new();
        let x = vec1(&mut g, &[-1.0, 0.0, 2.0], false);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_and_tanh_values() {
        let mut g = Graph::<f64>::new();
        let x = vec1(&mut g, &[0.0, 1.0], false);
        let s = g.sigmoid(x);
        let t = g.tanh(x);
        assert_eq!(g.value(s).data()[0], 0.5);
        // tanh(1) = (e^2 - 1)/(e^2 + 1)
        let e2 = std::f64::consts::E * std::f64::consts::E;
        assert!((g.value(t).data()[1] - (e2 - 1.0) / (e2 + 1.0)).abs() < 1e-15);
        assert!((g.value(t).data()[1] - 0.761_594_155_955_764_9).abs() < 1e-15);
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::<f64>::new();
        let theta = vec1(&mut g, &[1.0, 2.0], true);
        let sq = g.mul(theta, theta).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(theta).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let theta = vec1(&mut g, &[1.0, 2.0], true);
        let other = vec1(&mut g, &[3.0], true);
        let loss = g.sum(other);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(theta).is_none());
        assert_eq!(grads.wrt(&g, theta).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f64>::new();
        let theta = vec1(&mut g, &[1.0, 2.0], true);
        assert!(matches!(g.backward(theta), Err(AutogradError::NonScalarRoot(_))));
    }

    #[test]
    fn softmax_closed_form() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Dense::from_vec(vec![2, 1, 1, 2], vec![0.0, 0.7, 3f64.ln(), 0.7]));
        let y = g.softmax_channels(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[2] - 0.75).abs() < 1e-15);
        assert_eq!(d[1], 0.5);
        assert_eq!(d[3], 0.5);
    }

    #[test]
    fn softmax_rejects_nan_and_single_channel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Dense::from_vec(vec![2, 1, 1, 1], vec![f64::NAN, 0.0]));
        assert!(matches!(g.softmax_channels(x), Err(AutogradError::NonFinite(_))));
        let y = g.constant(Dense::from_vec(vec![1, 1, 1, 1], vec![0.0]));
        assert!(g.softmax_channels(y).is_err());
    }

    #[test]
    fn masked_mean_examples() {
        let mut g = Graph::<f64>::new();
        // K=2 over 3 voxels: [0.2,0.8], [0.4,0.6], [0.9,0.1]
        let x = g.constant(Dense::from_vec(vec![2, 3, 1, 1], vec![0.2, 0.4, 0.9, 0.8, 0.6, 0.1]));
        let m = g.masked_mean(x, &[1, 1, 0]).unwrap();
        let d = g.value(m).data();
        assert!((d[0] - 0.3).abs() < 1e-15 && (d[1] - 0.7).abs() < 1e-15);
        let one = g.masked_mean(x, &[0, 0, 1]).unwrap();
        assert_eq!(g.value(one).data(), &[0.9, 0.1]);
        assert_eq!(g.masked_mean(x, &[0, 0, 0]), Err(AutogradError::DegenerateRegion));
    }

    #[test]
    fn upsample_and_concat_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Dense::from_vec(vec![1, 1, 2, 1], vec![1.0, 2.0]));
        let u = g.upsample2(x).unwrap();
        assert_eq!(g.shape(u), &[1, 2, 4, 2]);
        assert_eq!(g.value(u).data()[..4], [1.0, 1.0, 1.0, 1.0]);
        let c = g.concat(u, u).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 4, 2]);
        let l = g.sum(c);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[16.0, 16.0]);
    }

    #[test]
    fn matvec_identity() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(Dense::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let x = vec1(&mut g, &[0.3, 0.7], true);
        let y = g.matvec(w, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, 0.7]);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
    }
}
