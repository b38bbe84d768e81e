//! Reverse-mode autodiff over `[C, D, H, W]` activations.

use crate::interp::{self, Kernel};
use crate::scalar::Scalar;

use super::{NeuralError, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv { x: usize, w: usize, b: usize, k: [usize; 3] },
    Add(usize, usize),
    Scale(usize, T),
    Relu(usize),
    LeakyRelu(usize, T),
    Upsample(usize),
    AvgPool { x: usize, f: [usize; 3] },
    L1(usize, usize),
    SqDiffConst(usize, T),
    Tv(usize),
    WeightedSum(Vec<(usize, T)>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: [usize; 4],
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation for one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn spatial(s: [usize; 4]) -> [usize; 3] {
    [s[3], s[2], s[1]]
}

fn vol(s: [usize; 4]) -> usize {
    s[1] * s[2] * s[3]
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, shape: [usize; 4], value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Scalar value of a loss node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("consistent node")
    }

    /// Leaf node. Tracked leaves accumulate gradients.
    pub fn leaf(&mut self, shape: [usize; 4], values: Vec<T>, tracked: bool) -> Result<Var> {
        if values.len() != shape.iter().product::<usize>() {
            return Err(NeuralError::Shape(format!(
                "leaf of shape {shape:?} given {} values",
                values.len()
            )));
        }
        Ok(self.push(shape, values, Op::Leaf, tracked))
    }

    pub fn input(&mut self, t: &Tensor<T>) -> Result<Var> {
        let shape = t.shape4()?;
        self.leaf(shape, t.values().to_vec(), t.is_tracked())
    }

    /// "Same" 3D convolution with zero padding. `w` has shape
    /// `[cout, cin, kd·kh·kw]` flattened; `b` has `cout` entries.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, k: [usize; 3]) -> Result<Var> {
        let xs = self.shape(x);
        let cin = xs[0];
        let kk = k[0] * k[1] * k[2];
        let wl = self.nodes[w.0].value.len();
        let cout = self.nodes[b.0].value.len();
        if k.iter().any(|&v| v % 2 == 0) {
            return Err(NeuralError::Shape(format!("kernel {k:?} must be odd")));
        }
        if wl != cout * cin * kk {
            return Err(NeuralError::Shape(format!(
                "conv weight has {wl} values, expected {cout}×{cin}×{kk}"
            )));
        }
        let os = [cout, xs[1], xs[2], xs[3]];
        let mut out = vec![T::zero(); cout * vol(xs)];
        conv_forward(&self.nodes[x.0].value, xs, &self.nodes[w.0].value, &self.nodes[b.0].value, k, &mut out);
        let ng = self.ng(x.0) || self.ng(w.0) || self.ng(b.0);
        Ok(self.push(os, out, Op::Conv { x: x.0, w: w.0, b: b.0, k }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NeuralError::Shape(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let v: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&p, &q)| p + q)
            .collect();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(self.shape(a), v, Op::Add(a.0, b.0), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.nodes[a.0].value.iter().map(|&p| p * s).collect();
        self.push(self.shape(a), v, Op::Scale(a.0, s), self.ng(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.iter().map(|&p| p.max(T::zero())).collect();
        self.push(self.shape(a), v, Op::Relu(a.0), self.ng(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.nodes[a.0]
            .value
            .iter()
            .map(|&p| if p > T::zero() { p } else { p * slope })
            .collect();
        self.push(self.shape(a), v, Op::LeakyRelu(a.0, slope), self.ng(a.0))
    }

    /// Per-channel separable linear resampling to the spatial extent `out`
    /// (`[D, H, W]`), using the same weights as [`crate::volume::resample`].
    pub fn upsample(&mut self, a: Var, out: [usize; 3]) -> Var {
        let s = self.shape(a);
        let os = [s[0], out[0], out[1], out[2]];
        let (iv, ov) = (vol(s), vol(os));
        let mut v = Vec::with_capacity(s[0] * ov);
        for c in 0..s[0] {
            let ch = &self.nodes[a.0].value[c * iv..(c + 1) * iv];
            v.extend(interp::resample_separable(ch, spatial(s), spatial(os), Kernel::Linear));
        }
        self.push(os, v, Op::Upsample(a.0), self.ng(a.0))
    }

    /// Non-overlapping mean pooling by integer factors `[fd, fh, fw]`.
    pub fn avg_pool(&mut self, a: Var, f: [usize; 3]) -> Result<Var> {
        let s = self.shape(a);
        if (0..3).any(|i| f[i] == 0 || s[i + 1] % f[i] != 0) {
            return Err(NeuralError::Shape(format!("pool {f:?} does not divide {s:?}")));
        }
        let os = [s[0], s[1] / f[0], s[2] / f[1], s[3] / f[2]];
        let inv = T::one() / T::from_usize_lossy(f[0] * f[1] * f[2]);
        let x = &self.nodes[a.0].value;
        let mut v = vec![T::zero(); os.iter().product()];
        for c in 0..s[0] {
            for z in 0..s[1] {
                for y in 0..s[2] {
                    let ib = ((c * s[1] + z) * s[2] + y) * s[3];
                    let ob = ((c * os[1] + z / f[0]) * os[2] + y / f[1]) * os[3];
                    for xx in 0..s[3] {
                        v[ob + xx / f[2]] += x[ib + xx];
                    }
                }
            }
        }
        v.iter_mut().for_each(|p| *p *= inv);
        Ok(self.push(os, v, Op::AvgPool { x: a.0, f }, self.ng(a.0)))
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NeuralError::Shape(format!(
                "l1 of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let n = T::from_usize_lossy(self.nodes[a.0].value.len().max(1));
        let s: T = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&p, &q)| (p - q).abs())
            .sum();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push([1, 1, 1, 1], vec![s / n], Op::L1(a.0, b.0), ng))
    }

    /// Mean of `(a − c)²`, the least-squares GAN term.
    pub fn sq_diff_const(&mut self, a: Var, c: T) -> Var {
        let x = &self.nodes[a.0].value;
        let n = T::from_usize_lossy(x.len().max(1));
        let s: T = x.iter().map(|&p| (p - c) * (p - c)).sum();
        self.push([1, 1, 1, 1], vec![s / n], Op::SqDiffConst(a.0, c), self.ng(a.0))
    }

    /// Mean absolute forward difference, pooled over every spatial axis with
    /// more than one sample.
    pub fn tv(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let x = &self.nodes[a.0].value;
        let (sum, count) = tv_terms(x, s, |_, _, _| ());
        let v = if count == 0 {
            T::zero()
        } else {
            sum / T::from_usize_lossy(count)
        };
        self.push([1, 1, 1, 1], vec![v], Op::Tv(a.0), self.ng(a.0))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = T::zero();
        for &(v, w) in terms {
            if self.nodes[v.0].value.len() != 1 {
                return Err(NeuralError::Shape("weighted_sum expects scalar nodes".into()));
            }
            s += w * self.nodes[v.0].value[0];
        }
        let ng = terms.iter().any(|(v, _)| self.ng(v.0));
        let t = terms.iter().map(|&(v, w)| (v.0, w)).collect();
        Ok(self.push([1, 1, 1, 1], vec![s], Op::WeightedSum(t), ng))
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Back-propagates from a scalar node. Gradients of tracked leaves are
    /// available through [`Tape::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NeuralError::Shape("backward needs a scalar loss".into()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, target: usize) -> Option<&mut Vec<T>> {
        if !self.nodes[target].needs_grad {
            return None;
        }
        let n = self.nodes[target].value.len();
        Some(self.grads[target].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Conv { x, w, b, k } => {
                let xs = self.nodes[x].shape;
                if self.ng(b) {
                    let cout = self.nodes[b].value.len();
                    let v = vol(xs);
                    let gb: Vec<T> = (0..cout).map(|c| g[c * v..(c + 1) * v].iter().copied().sum()).collect();
                    let acc = self.acc(b).expect("needs grad");
                    acc.iter_mut().zip(gb).for_each(|(a, d)| *a += d);
                }
                if self.ng(w) {
                    let mut gw = vec![T::zero(); self.nodes[w].value.len()];
                    conv_grad_weight(&self.nodes[x].value, xs, g, k, &mut gw);
                    let acc = self.acc(w).expect("needs grad");
                    acc.iter_mut().zip(gw).for_each(|(a, d)| *a += d);
                }
                if self.ng(x) {
                    let mut gx = vec![T::zero(); self.nodes[x].value.len()];
                    conv_grad_input(&self.nodes[w].value, xs, self.nodes[b].value.len(), g, k, &mut gx);
                    let acc = self.acc(x).expect("needs grad");
                    acc.iter_mut().zip(gx).for_each(|(a, d)| *a += d);
                }
            }
            Op::Add(a, b) => {
                for t in [a, b] {
                    if let Some(acc) = self.acc(t) {
                        acc.iter_mut().zip(g).for_each(|(p, &d)| *p += d);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(acc) = self.acc(a) {
                    acc.iter_mut().zip(g).for_each(|(p, &d)| *p += d * s);
                }
            }
            Op::Relu(a) => {
                let gx: Vec<T> = self.nodes[a]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                if let Some(acc) = self.acc(a) {
                    acc.iter_mut().zip(gx).for_each(|(p, d)| *p += d);
                }
            }
            Op::LeakyRelu(a, slope) => {
                let gx: Vec<T> = self.nodes[a]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&x, &d)| if x > T::zero() { d } else { d * slope })
                    .collect();
                if let Some(acc) = self.acc(a) {
                    acc.iter_mut().zip(gx).for_each(|(p, d)| *p += d);
                }
            }
            Op::Upsample(a) => {
                let s = self.nodes[a].shape;
                let os = self.nodes[i].shape;
                let (iv, ov) = (vol(s), vol(os));
                let mut gx = Vec::with_capacity(s[0] * iv);
                for c in 0..s[0] {
                    let mut cur = g[c * ov..(c + 1) * ov].to_vec();
                    // forward ran x, y, z; the adjoint runs z, y, x
                    let mut dims = spatial(os);
                    let src = spatial(s);
                    for axis in (0..3).rev() {
                        if dims[axis] != src[axis] {
                            let mut in_dims = dims;
                            in_dims[axis] = src[axis];
                            cur = interp::linear_axis_adjoint(&cur, in_dims, axis, dims[axis]);
                            dims = in_dims;
                        }
                    }
                    gx.extend(cur);
                }
                if let Some(acc) = self.acc(a) {
                    acc.iter_mut().zip(gx).for_each(|(p, d)| *p += d);
                }
            }
            Op::AvgPool { x, f } => {
                let s = self.nodes[x].shape;
                let os = self.nodes[i].shape;
                let inv = T::one() / T::from_usize_lossy(f[0] * f[1] * f[2]);
                if let Some(acc) = self.acc(x) {
                    for c in 0..s[0] {
                        for z in 0..s[1] {
                            for y in 0..s[2] {
                                let ib = ((c * s[1] + z) * s[2] + y) * s[3];
                                let ob = ((c * os[1] + z / f[0]) * os[2] + y / f[1]) * os[3];
                                for xx in 0..s[3] {
                                    acc[ib + xx] += g[ob + xx / f[2]] * inv;
                                }
                            }
                        }
                    }
                }
            }
            Op::L1(a, b) => {
                let n = T::from_usize_lossy(self.nodes[a].value.len().max(1));
                let d: Vec<T> = self.nodes[a]
                    .value
                    .iter()
                    .zip(&self.nodes[b].value)
                    .map(|(&p, &q)| sign(p - q) * g[0] / n)
                    .collect();
                if let Some(acc) = self.acc(a) {
                    acc.iter_mut().zip(&d).for_each(|(p, &v)| *p += v);
                }
                if let Some(acc) = self.acc(b) {
                    acc.iter_mut().zip(&d).for_each(|(p, &v)| *p -= v);
                }
            }
            Op::SqDiffConst(a, c) => {
                let n = T::from_usize_lossy(self.nodes[a].value.len().max(1));
                let two = T::lit(2.0);
                let d: Vec<T> = self.nodes[a].value.iter().map(|&p| two * (p - c) * g[0] / n).collect();
                if let Some(acc) = self.acc(a) {
                    acc.iter_mut().zip(d).for_each(|(p, v)| *p += v);
                }
            }
            Op::Tv(a) => {
                let s = self.nodes[a].shape;
                let mut d = vec![T::zero(); self.nodes[a].value.len()];
                let (_, count) = tv_terms(&self.nodes[a].value, s, |lo, hi, sg| {
                    d[hi] += sg;
                    d[lo] -= sg;
                });
                if count > 0 {
                    let k = g[0] / T::from_usize_lossy(count);
                    if let Some(acc) = self.acc(a) {
                        acc.iter_mut().zip(d).for_each(|(p, v)| *p += v * k);
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for (t, w) in terms {
                    if let Some(acc) = self.acc(t) {
                        acc[0] += w * g[0];
                    }
                }
            }
        }
    }
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Walks all forward differences; `visit(lo, hi, sign(x[hi] − x[lo]))`.
fn tv_terms<T: Scalar>(x: &[T], s: [usize; 4], mut visit: impl FnMut(usize, usize, T)) -> (T, usize) {
    let mut sum = T::zero();
    let mut count = 0;
    let strides = [s[2] * s[3], s[3], 1];
    for c in 0..s[0] {
        let base = c * vol(s);
        for (ax, &stride) in strides.iter().enumerate() {
            let n = s[ax + 1];
            if n < 2 {
                continue;
            }
            for z in 0..s[1] {
                for y in 0..s[2] {
                    for xx in 0..s[3] {
                        let pos = [z, y, xx][ax];
                        if pos + 1 >= n {
                            continue;
                        }
                        let lo = base + (z * s[2] + y) * s[3] + xx;
                        let hi = lo + stride;
                        let d = x[hi] - x[lo];
                        sum += d.abs();
                        count += 1;
                        visit(lo, hi, sign(d));
                    }
                }
            }
        }
    }
    (sum, count)
}

/// Valid output range along one axis for kernel offset `o` relative to the
/// centre: output positions `p` with `0 ≤ p + o < n`.
#[inline]
fn valid(n: usize, o: isize) -> (usize, usize) {
    let lo = (-o).max(0) as usize;
    let hi = (n as isize - o.max(0)).max(lo as isize) as usize;
    (lo.min(n), hi.min(n))
}

fn conv_forward<T: Scalar>(x: &[T], xs: [usize; 4], w: &[T], b: &[T], k: [usize; 3], out: &mut [T]) {
    let (cin, d, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let v = d * h * wd;
    let kk = k[0] * k[1] * k[2];
    let half = [k[0] / 2, k[1] / 2, k[2] / 2].map(|v| v as isize);
    for (co, &bias) in b.iter().enumerate() {
        let o = &mut out[co * v..(co + 1) * v];
        o.iter_mut().for_each(|p| *p = bias);
        for ci in 0..cin {
            let xin = &x[ci * v..(ci + 1) * v];
            for kz in 0..k[0] {
                let oz = kz as isize - half[0];
                let (z0, z1) = valid(d, oz);
                for ky in 0..k[1] {
                    let oy = ky as isize - half[1];
                    let (y0, y1) = valid(h, oy);
                    for kx in 0..k[2] {
                        let wv = w[(co * cin + ci) * kk + (kz * k[1] + ky) * k[2] + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let ox = kx as isize - half[2];
                        let (x0, x1) = valid(wd, ox);
                        for z in z0..z1 {
                            let zi = (z as isize + oz) as usize;
                            for y in y0..y1 {
                                let yi = (y as isize + oy) as usize;
                                let orow = &mut o[(z * h + y) * wd..(z * h + y + 1) * wd];
                                let irow = &xin[(zi * h + yi) * wd..(zi * h + yi + 1) * wd];
                                let shift = (x0 as isize + ox) as usize;
                                for (p, &q) in orow[x0..x1].iter_mut().zip(&irow[shift..shift + (x1 - x0)]) {
                                    *p += wv * q;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_grad_weight<T: Scalar>(x: &[T], xs: [usize; 4], g: &[T], k: [usize; 3], gw: &mut [T]) {
    let (cin, d, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let v = d * h * wd;
    let kk = k[0] * k[1] * k[2];
    let cout = gw.len() / (cin * kk);
    let half = [k[0] / 2, k[1] / 2, k[2] / 2].map(|v| v as isize);
    for co in 0..cout {
        let go = &g[co * v..(co + 1) * v];
        for ci in 0..cin {
            let xin = &x[ci * v..(ci + 1) * v];
            for kz in 0..k[0] {
                let oz = kz as isize - half[0];
                let (z0, z1) = valid(d, oz);
                for ky in 0..k[1] {
                    let oy = ky as isize - half[1];
                    let (y0, y1) = valid(h, oy);
                    for kx in 0..k[2] {
                        let ox = kx as isize - half[2];
                        let (x0, x1) = valid(wd, ox);
                        let mut s = T::zero();
                        for z in z0..z1 {
                            let zi = (z as isize + oz) as usize;
                            for y in y0..y1 {
                                let yi = (y as isize + oy) as usize;
                                let grow = &go[(z * h + y) * wd..(z * h + y + 1) * wd];
                                let irow = &xin[(zi * h + yi) * wd..(zi * h + yi + 1) * wd];
                                let shift = (x0 as isize + ox) as usize;
                                for (&p, &q) in grow[x0..x1].iter().zip(&irow[shift..shift + (x1 - x0)]) {
                                    s += p * q;
                                }
                            }
                        }
                        gw[(co * cin + ci) * kk + (kz * k[1] + ky) * k[2] + kx] += s;
                    }
                }
            }
        }
    }
}

fn conv_grad_input<T: Scalar>(w: &[T], xs: [usize; 4], cout: usize, g: &[T], k: [usize; 3], gx: &mut [T]) {
    let (cin, d, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let v = d * h * wd;
    let kk = k[0] * k[1] * k[2];
    let half = [k[0] / 2, k[1] / 2, k[2] / 2].map(|v| v as isize);
    for ci in 0..cin {
        let gi = &mut gx[ci * v..(ci + 1) * v];
        for co in 0..cout {
            let go = &g[co * v..(co + 1) * v];
            for kz in 0..k[0] {
                let oz = kz as isize - half[0];
                let (z0, z1) = valid(d, oz);
                for ky in 0..k[1] {
                    let oy = ky as isize - half[1];
                    let (y0, y1) = valid(h, oy);
                    for kx in 0..k[2] {
                        let wv = w[(co * cin + ci) * kk + (kz * k[1] + ky) * k[2] + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let ox = kx as isize - half[2];
                        let (x0, x1) = valid(wd, ox);
                        for z in z0..z1 {
                            let zi = (z as isize + oz) as usize;
                            for y in y0..y1 {
                                let yi = (y as isize + oy) as usize;
                                let grow = &go[(z * h + y) * wd..(z * h + y + 1) * wd];
                                let shift = (x0 as isize + ox) as usize;
                                let irow = &mut gi[(zi * h + yi) * wd..(zi * h + yi + 1) * wd];
                                for (p, &q) in irow[shift..shift + (x1 - x0)].iter_mut().zip(&grow[x0..x1]) {
                                    *p += wv * q;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution used as an oracle: sums over the full kernel with
    /// explicit bounds checks.
    fn naive_conv(x: &[f64], xs: [usize; 4], w: &[f64], b: &[f64], k: [usize; 3]) -> Vec<f64> {
        let cout = b.len();
        let [cin, d, h, wd] = xs;
        let mut out = vec![0.0; cout * d * h * wd];
        for co in 0..cout {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut s = b[co];
                        for ci in 0..cin {
                            for kz in 0..k[0] {
                                for ky in 0..k[1] {
                                    for kx in 0..k[2] {
                                        let zi = z as isize + kz as isize - (k[0] / 2) as isize;
                                        let yi = y as isize + ky as isize - (k[1] / 2) as isize;
                                        let xi = xx as isize + kx as isize - (k[2] / 2) as isize;
                                        if zi < 0 || yi < 0 || xi < 0 || zi >= d as isize || yi >= h as isize || xi >= wd as isize {
                                            continue;
                                        }
                                        let wi = ((co * cin + ci) * k[0] + kz) * k[1] * k[2] + ky * k[2] + kx;
                                        s += w[wi] * x[((ci * d + zi as usize) * h + yi as usize) * wd + xi as usize];
                                    }
                                }
                            }
                        }
                        out[((co * d + z) * h + y) * wd + xx] = s;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive() {
        let xs = [2, 3, 5, 4];
        let k = [3, 3, 3];
        let x = lcg(1, 2 * 60);
        let w = lcg(2, 3 * 2 * 27);
        let b = lcg(3, 3);
        let mut t = Tape::new();
        let xv = t.leaf(xs, x.clone(), false).unwrap();
        let wv = t.leaf([3, 2, 27, 1], w.clone(), false).unwrap();
        let bv = t.leaf([3, 1, 1, 1], b.clone(), false).unwrap();
        let y = t.conv(xv, wv, bv, k).unwrap();
        let oracle = naive_conv(&x, xs, &w, &b, k);
        for (a, o) in t.value(y).iter().zip(&oracle) {
            assert!((a - o).abs() < 1e-12);
        }
    }

    #[test]
    fn tv_cases() {
        let mut t = Tape::<f64>::new();
        let c = t.leaf([1, 1, 3, 3], vec![7.0; 9], false).unwrap();
        let v = t.tv(c);
        assert_eq!(t.scalar(v), 0.0);
        let alt = t.leaf([1, 1, 1, 4], vec![0.0, 1.0, 0.0, 1.0], false).unwrap();
        let v = t.tv(alt);
        assert_eq!(t.scalar(v), 1.0);
    }

    #[test]
    fn l1_closed_form() {
        let mut t = Tape::<f64>::new();
        let gt = lcg(5, 12);
        let pred: Vec<f64> = gt.iter().map(|v| v + 2.0).collect();
        let a = t.leaf([1, 1, 3, 4], pred, true).unwrap();
        let b = t.leaf([1, 1, 3, 4], gt.clone(), false).unwrap();
        let l = t.l1(a, b).unwrap();
        assert!((t.scalar(l) - 2.0).abs() < 1e-12);
        t.backward(l).unwrap();
        for &g in t.grad(a).unwrap() {
            assert!((g - 1.0 / 12.0).abs() < 1e-15);
        }
        let same = t.l1(b, b).unwrap();
        assert_eq!(t.scalar(same), 0.0);
    }

    #[test]
    fn pool_and_untracked() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let p = t.avg_pool(a, [1, 2, 2]).unwrap();
        assert_eq!(t.value(p), &[2.5]);
        let l = t.sq_diff_const(p, 0.5);
        assert_eq!(t.scalar(l), 4.0);
        t.backward(l).unwrap();
        assert!(t.grad(a).is_none());
    }
}
