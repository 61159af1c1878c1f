use ndarray::{Array4, Axis, Zip};

use crate::conv;
use crate::Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, padding: usize },
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2(Var),
    Concat(Var, Var),
    Repeat { x: Var, times: usize },
    Dense { x: Var, w: Var, b: Var },
    GlobalAvgPool(Var),
    Composite { raw: Var, mask: Array4<T> },
    Add(Var, Var),
    Scale(Var, T),
    MeanAbsDiff(Var, Var),
    WeightedL1 { a: Var, b: Var, w: Array4<T> },
    NegMeanLog { p: Var, eps: T, complement: bool },
    Bce { p: Var, targets: Vec<T>, eps: T },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Array4<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode autodiff tape over NCHW tensors.
///
/// Every value is an `Array4`; scalars are `(1, 1, 1, 1)` and dense
/// activations are `(N, F, 1, 1)`. Nodes that do not depend on any leaf
/// created with `requires_grad = true` skip gradient work entirely.
#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], retained for leaves only.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Array4<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array4<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array4<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn scalar<T: Real>(v: T) -> Array4<T> {
    Array4::from_elem((1, 1, 1, 1), v)
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn stable_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array4<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Array4<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array4<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Array4<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Array4<T> {
        &self.nodes[v.0].value
    }

    /// First element of `v`; intended for `(1,1,1,1)` loss nodes.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.iter().next().copied().unwrap_or_else(T::zero)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Stride-1 convolution. `w` is `(Cout, Cin, k, k)`, `b` is `(1, Cout, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: usize) -> Var {
        let value = conv::forward(self.value(x), self.value(w), b.map(|b| self.value(b)), padding);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::Conv2d { x, w, b, padding }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self.value(x).mapv(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(stable_sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// 2×2 max pooling with stride 2; height and width must be even.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let (n, c, h, w) = input.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::<T>::zeros((n, c, ho, wo));
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let strides = [c * h * w, h * w, w];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut best = input[[b, ch, 2 * y, 2 * xx]];
                        let mut at = (2 * y, 2 * xx);
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let v = input[[b, ch, 2 * y + dy, 2 * xx + dx]];
                            if v > best {
                                best = v;
                                at = (2 * y + dy, 2 * xx + dx);
                            }
                        }
                        out[[b, ch, y, xx]] = best;
                        argmax.push(b * strides[0] + ch * strides[1] + at.0 * strides[2] + at.1);
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::MaxPool2 { x, argmax }, rg)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let (n, c, h, w) = input.dim();
        let out = Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(b, ch, y, xx)| {
            input[[b, ch, y / 2, xx / 2]]
        });
        let rg = self.rg(x);
        self.push(out, Op::Upsample2(x), rg)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat operands must agree on batch and spatial dims");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Concat(a, b), rg)
    }

    /// Tile the channel axis `times` times (grayscale to RGB replication).
    pub fn repeat_channels(&mut self, x: Var, times: usize) -> Var {
        let v = self.value(x);
        let views: Vec<_> = (0..times).map(|_| v.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("repeat");
        let rg = self.rg(x);
        self.push(value, Op::Repeat { x, times }, rg)
    }

    /// Fully connected layer over the flattened `(C, H, W)` features.
    /// `w` is `(out, in, 1, 1)`, `b` is `(1, out, 1, 1)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let n = xv.dim().0;
        let feat = xv.len() / n.max(1);
        let wv = self.value(w);
        let out_dim = wv.dim().0;
        assert_eq!(wv.dim().1, feat, "dense weight expects {} inputs, got {feat}", wv.dim().1);
        let xm = xv.as_standard_layout().into_owned().into_shape_with_order((n, feat)).expect("flatten");
        let wm = wv.view().into_shape_with_order((out_dim, feat)).expect("weights contiguous");
        let bv = self.value(b).as_slice().expect("bias contiguous").to_vec();
        let mut y = xm.dot(&wm.t());
        for mut row in y.outer_iter_mut() {
            for (o, v) in row.iter_mut().enumerate() {
                *v += bv[o];
            }
        }
        let value = y.into_shape_with_order((n, out_dim, 1, 1)).expect("dense out");
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(value, Op::Dense { x, w, b }, rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (n, c, h, w) = v.dim();
        let denom = T::lit((h * w) as f64);
        let value = Array4::from_shape_fn((n, c, 1, 1), |(b, ch, _, _)| {
            v.index_axis(Axis(0), b).index_axis(Axis(0), ch).sum() / denom
        });
        let rg = self.rg(x);
        self.push(value, Op::GlobalAvgPool(x), rg)
    }

    /// `mask ⊙ raw + (1 − mask) ⊙ base`; only `raw` carries gradient.
    pub fn composite(&mut self, raw: Var, mask: &Array4<T>, base: &Array4<T>) -> Var {
        let r = self.value(raw);
        assert_eq!(r.dim(), mask.dim(), "composite mask shape");
        assert_eq!(r.dim(), base.dim(), "composite base shape");
        let mut value = r.clone();
        Zip::from(&mut value).and(mask).and(base).for_each(|v, &m, &b| {
            // Exact copy where the mask is 0 or 1 keeps context pixels bit-identical.
            *v = if m == T::zero() {
                b
            } else if m == T::one() {
                *v
            } else {
                m * *v + (T::one() - m) * b
            };
        });
        let rg = self.rg(raw);
        self.push(value, Op::Composite { raw, mask: mask.clone() }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).mapv(|v| v * k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    /// Mean over all elements of `|a − b|`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim(), "mean_abs_diff shape");
        let n = T::lit(av.len() as f64);
        let s: T = av.iter().zip(bv.iter()).map(|(&x, &y)| (x - y).abs()).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(scalar(s / n), Op::MeanAbsDiff(a, b), rg)
    }

    /// Per-sample sum of `|w ⊙ (a − b)|`, averaged over the batch axis.
    pub fn weighted_l1(&mut self, a: Var, b: Var, w: &Array4<T>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim(), "weighted_l1 shape");
        assert_eq!(av.dim(), w.dim(), "weighted_l1 weight shape");
        let batch = T::lit(av.dim().0.max(1) as f64);
        let mut s = T::zero();
        Zip::from(av).and(bv).and(w).for_each(|&x, &y, &k| s += (k * (x - y)).abs());
        let rg = self.rg(a) || self.rg(b);
        self.push(scalar(s / batch), Op::WeightedL1 { a, b, w: w.clone() }, rg)
    }

    /// `−mean(log p)` (or `−mean(log(1 − p))` when `complement`), with `p`
    /// clamped to `[eps, 1 − eps]`.
    pub fn neg_mean_log(&mut self, p: Var, eps: T, complement: bool) -> Var {
        let pv = self.value(p);
        let n = T::lit(pv.len() as f64);
        let hi = T::one() - eps;
        let s: T = pv
            .iter()
            .map(|&x| {
                let c = x.max(eps).min(hi);
                if complement { (T::one() - c).ln() } else { c.ln() }
            })
            .sum();
        let rg = self.rg(p);
        self.push(scalar(-s / n), Op::NegMeanLog { p, eps, complement }, rg)
    }

    /// Mean binary cross-entropy of probabilities `p` against `targets`.
    pub fn bce(&mut self, p: Var, targets: &[T], eps: T) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.len(), targets.len(), "bce target count");
        let n = T::lit(pv.len() as f64);
        let hi = T::one() - eps;
        let s: T = pv
            .iter()
            .zip(targets)
            .map(|(&x, &t)| {
                let c = x.max(eps).min(hi);
                t * c.ln() + (T::one() - t) * (T::one() - c).ln()
            })
            .sum();
        let rg = self.rg(p);
        self.push(scalar(-s / n), Op::Bce { p, targets: targets.to_vec(), eps }, rg)
    }

    /// Backpropagate from `loss` (seeded with ones of its shape).
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Array4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array4::from_elem(self.value(loss).raw_dim(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array4<T>>], v: Var, delta: Array4<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Array4<T>, g: Array4<T>, grads: &mut [Option<Array4<T>>]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, padding } => {
                let cg = conv::backward(
                    self.value(*x),
                    self.value(*w),
                    &g,
                    *padding,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let mut d = g;
                Zip::from(&mut d).and(self.value(*x)).for_each(|d, &v| {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let mut d = g;
                Zip::from(&mut d).and(self.value(*x)).for_each(|d, &v| {
                    if v <= T::zero() {
                        *d *= *slope;
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let mut d = g;
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= y * (T::one() - y));
                self.accumulate(grads, *x, d);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = Array4::<T>::zeros(self.value(*x).raw_dim());
                let ds = d.as_slice_mut().expect("standard layout");
                for (gv, &at) in g.iter().zip(argmax) {
                    ds[at] += *gv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::Upsample2(x) => {
                let mut d = Array4::<T>::zeros(self.value(*x).raw_dim());
                for ((b, ch, y, xx), &gv) in g.indexed_iter() {
                    d[[b, ch, y / 2, xx / 2]] += gv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).dim().1;
                let da = g.slice(ndarray::s![.., ..ca, .., ..]).to_owned();
                let db = g.slice(ndarray::s![.., ca.., .., ..]).to_owned();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Repeat { x, times } => {
                let c = self.value(*x).dim().1;
                let mut d = g.slice(ndarray::s![.., ..c, .., ..]).to_owned();
                for t in 1..*times {
                    d += &g.slice(ndarray::s![.., t * c..(t + 1) * c, .., ..]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Dense { x, w, b } => {
                let xv = self.value(*x);
                let n = xv.dim().0;
                let feat = xv.len() / n.max(1);
                let wv = self.value(*w);
                let out_dim = wv.dim().0;
                let gm = g.view().into_shape_with_order((n, out_dim)).expect("dense grad");
                if self.rg(*x) {
                    let wm = wv.view().into_shape_with_order((out_dim, feat)).expect("w");
                    let dx = gm.dot(&wm).into_shape_with_order(xv.raw_dim()).expect("dx");
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let xm = xv.as_standard_layout().into_owned().into_shape_with_order((n, feat)).expect("x");
                    let dw = gm.t().dot(&xm).into_shape_with_order(wv.raw_dim()).expect("dw");
                    self.accumulate(grads, *w, dw);
                }
                if self.rg(*b) {
                    let db = gm.sum_axis(Axis(0)).into_shape_with_order((1, out_dim, 1, 1)).expect("db");
                    self.accumulate(grads, *b, db);
                }
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dim();
                let denom = T::lit((h * w) as f64);
                let d = Array4::from_shape_fn((n, c, h, w), |(b, ch, _, _)| g[[b, ch, 0, 0]] / denom);
                self.accumulate(grads, *x, d);
            }
            Op::Composite { raw, mask } => {
                let d = &g * mask;
                self.accumulate(grads, *raw, d);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g);
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, g.mapv(|v| v * *k));
            }
            Op::MeanAbsDiff(a, b) => {
                let gs = g[[0, 0, 0, 0]];
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = gs / T::lit(av.len() as f64);
                let mut d = Array4::<T>::zeros(av.raw_dim());
                Zip::from(&mut d).and(av).and(bv).for_each(|d, &x, &y| *d = sign(x - y) * scale);
                if self.rg(*b) {
                    self.accumulate(grads, *b, d.mapv(|v| -v));
                }
                self.accumulate(grads, *a, d);
            }
            Op::WeightedL1 { a, b, w } => {
                let gs = g[[0, 0, 0, 0]];
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = gs / T::lit(av.dim().0.max(1) as f64);
                let mut d = Array4::<T>::zeros(av.raw_dim());
                Zip::from(&mut d)
                    .and(av)
                    .and(bv)
                    .and(w)
                    .for_each(|d, &x, &y, &k| *d = sign(k * (x - y)) * k * scale);
                if self.rg(*b) {
                    self.accumulate(grads, *b, d.mapv(|v| -v));
                }
                self.accumulate(grads, *a, d);
            }
            Op::NegMeanLog { p, eps, complement } => {
                let gs = g[[0, 0, 0, 0]];
                let pv = self.value(*p);
                let n = T::lit(pv.len() as f64);
                let hi = T::one() - *eps;
                let d = pv.mapv(|x| {
                    if x < *eps || x > hi {
                        T::zero()
                    } else if *complement {
                        gs / (n * (T::one() - x))
                    } else {
                        -gs / (n * x)
                    }
                });
                self.accumulate(grads, *p, d);
            }
            Op::Bce { p, targets, eps } => {
                let gs = g[[0, 0, 0, 0]];
                let pv = self.value(*p);
                let n = T::lit(pv.len() as f64);
                let hi = T::one() - *eps;
                let mut d = Array4::<T>::zeros(pv.raw_dim());
                for ((dv, &x), &t) in d.iter_mut().zip(pv.iter()).zip(targets) {
                    if x >= *eps && x <= hi {
                        *dv = gs * (-t / x + (T::one() - t) / (T::one() - x)) / n;
                    }
                }
                self.accumulate(grads, *p, d);
            }
        }
    }
}
