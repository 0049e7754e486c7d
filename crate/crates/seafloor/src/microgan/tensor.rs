//! Minimal reverse-mode autodiff over 4-d tensors.
//!
//! Tensors are reference-counted graph nodes carrying values and a gradient
//! accumulator. Ops push a backward closure that routes the output gradient
//! to the parents; [`Tensor::backward`] visits the reachable graph exactly
//! once in reverse topological order. Everything is `f64` and
//! single-threaded apart from the convolution kernels, which parallelize
//! over disjoint output slices so results stay bit-reproducible.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use rayon::prelude::*;

/// (batch, channels, height, width); unused trailing dims are 1.
/// Weight tensors reuse the same container as (out, in, k, k).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &[f64])>;

struct Node {
    id: u64,
    shape: Shape,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Vec<f64>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

thread_local! {
    static NEXT_ID: RefCell<u64> = const { RefCell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let mut c = c.borrow_mut();
        *c += 1;
        *c
    })
}

/// Reference-counted autodiff tensor.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl Tensor {
    fn from_parts(shape: Shape, data: Vec<f64>, parents: Vec<Tensor>, backward: Option<BackwardFn>) -> Tensor {
        debug_assert_eq!(data.len(), shape.len());
        let n = data.len();
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(vec![0.0; n]),
            parents,
            backward,
        }))
    }

    /// Leaf tensor (parameter or constant input).
    pub fn leaf(shape: Shape, data: Vec<f64>) -> Tensor {
        Tensor::from_parts(shape, data, Vec::new(), None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(Shape::scalar(), vec![v])
    }

    pub fn shape(&self) -> Shape {
        self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Scalar value of a 1-element tensor.
    pub fn value(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Ref<'_, Vec<f64>> {
        self.0.grad.borrow()
    }

    /// Overwrites the values in place (used by the optimizer and by
    /// finite-difference probes). Shape is fixed.
    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.0.data.borrow_mut();
        debug_assert_eq!(d.len(), data.len());
        d.copy_from_slice(data);
    }

    pub fn apply_to_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.borrow_mut());
    }

    pub fn zero_grad(&self) {
        for g in self.0.grad.borrow_mut().iter_mut() {
            *g = 0.0;
        }
    }

    /// Cuts the graph: same values, no parents.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.shape(), self.data().clone())
    }

    pub fn grad_is_finite(&self) -> bool {
        self.0.grad.borrow().iter().all(|g| g.is_finite())
    }

    /// Reverse-mode sweep from a scalar output. Seeds this tensor's gradient
    /// with 1 and visits every reachable node exactly once.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward starts from a scalar loss");
        let order = topo_order(self);
        self.0.grad.borrow_mut()[0] = 1.0;
        for node in order.iter().rev() {
            if let Some(back) = &node.0.backward {
                let data = node.0.data.borrow();
                let grad = node.0.grad.borrow();
                back(&data, &grad);
            }
        }
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    // Iterative post-order DFS; parent order is fixed by construction so the
    // traversal (and therefore accumulation order) is reproducible.
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    seen.insert(root.0.id);
    while let Some((node, child_idx)) = stack.pop() {
        if child_idx < node.0.parents.len() {
            let parent = node.0.parents[child_idx].clone();
            stack.push((node, child_idx + 1));
            if seen.insert(parent.0.id) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

fn assert_same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {} vs {}",
        a.shape(),
        b.shape()
    );
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "add");
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_parts(
        a.shape(),
        data,
        vec![a.clone(), b.clone()],
        Some(Box::new(move |_, g| {
            {
                let mut ga = pa.0.grad.borrow_mut();
                for (gi, go) in ga.iter_mut().zip(g) {
                    *gi += go;
                }
            }
            let mut gb = pb.0.grad.borrow_mut();
            for (gi, go) in gb.iter_mut().zip(g) {
                *gi += go;
            }
        })),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "sub");
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_parts(
        a.shape(),
        data,
        vec![a.clone(), b.clone()],
        Some(Box::new(move |_, g| {
            {
                let mut ga = pa.0.grad.borrow_mut();
                for (gi, go) in ga.iter_mut().zip(g) {
                    *gi += go;
                }
            }
            let mut gb = pb.0.grad.borrow_mut();
            for (gi, go) in gb.iter_mut().zip(g) {
                *gi -= go;
            }
        })),
    )
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "mul");
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_parts(
        a.shape(),
        data,
        vec![a.clone(), b.clone()],
        Some(Box::new(move |_, g| {
            {
                let bd = pb.0.data.borrow();
                let mut ga = pa.0.grad.borrow_mut();
                for i in 0..g.len() {
                    ga[i] += g[i] * bd[i];
                }
            }
            let ad = pa.0.data.borrow();
            let mut gb = pb.0.grad.borrow_mut();
            for i in 0..g.len() {
                gb[i] += g[i] * ad[i];
            }
        })),
    )
}

/// `|a - b|` as one primitive; the gradient routes `sign(a - b)`.
pub fn abs_diff(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "abs_diff");
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| (x - y).abs()).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_parts(
        a.shape(),
        data,
        vec![a.clone(), b.clone()],
        Some(Box::new(move |_, g| {
            let signs: Vec<f64> = {
                let ad = pa.0.data.borrow();
                let bd = pb.0.data.borrow();
                ad.iter().zip(bd.iter()).map(|(x, y)| (x - y).signum()).collect()
            };
            {
                let mut ga = pa.0.grad.borrow_mut();
                for i in 0..g.len() {
                    ga[i] += g[i] * signs[i];
                }
            }
            let mut gb = pb.0.grad.borrow_mut();
            for i in 0..g.len() {
                gb[i] -= g[i] * signs[i];
            }
        })),
    )
}

pub fn mul_scalar(a: &Tensor, c: f64) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|x| x * c).collect();
    let pa = a.clone();
    Tensor::from_parts(
        a.shape(),
        data,
        vec![a.clone()],
        Some(Box::new(move |_, g| {
            let mut ga = pa.0.grad.borrow_mut();
            for (gi, go) in ga.iter_mut().zip(g) {
                *gi += go * c;
            }
        })),
    )
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|x| x + c).collect();
    let pa = a.clone();
    Tensor::from_parts(
        a.shape(),
        data,
        vec![a.clone()],
        Some(Box::new(move |_, g| {
            let mut ga = pa.0.grad.borrow_mut();
            for (gi, go) in ga.iter_mut().zip(g) {
                *gi += go;
            }
        })),
    )
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn relu(a: &Tensor) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|&x| x.max(0.0)).collect();
    let pa = a.clone();
    Tensor::from_parts(
        a.shape(),
        data,
        vec![a.clone()],
        Some(Box::new(move |_, g| {
            let xs = pa.0.data.borrow().clone();
            let mut ga = pa.0.grad.borrow_mut();
            for i in 0..g.len() {
                if xs[i] > 0.0 {
                    ga[i] += g[i];
                }
            }
        })),
    )
}

pub fn leaky_relu(a: &Tensor, slope: f64) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect();
    let pa = a.clone();
    Tensor::from_parts(
        a.shape(),
        data,
        vec![a.clone()],
        Some(Box::new(move |_, g| {
            let xs = pa.0.data.borrow().clone();
            let mut ga = pa.0.grad.borrow_mut();
            for i in 0..g.len() {
                ga[i] += g[i] * if xs[i] > 0.0 { 1.0 } else { slope };
            }
        })),
    )
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
    let pa = a.clone();
    Tensor::from_parts(
        a.shape(),
        data,
        vec![a.clone()],
        Some(Box::new(move |out, g| {
            let mut ga = pa.0.grad.borrow_mut();
            for i in 0..g.len() {
                ga[i] += g[i] * out[i] * (1.0 - out[i]);
            }
        })),
    )
}

pub fn tanh(a: &Tensor) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|&x| x.tanh()).collect();
    let pa = a.clone();
    Tensor::from_parts(
        a.shape(),
        data,
        vec![a.clone()],
        Some(Box::new(move |out, g| {
            let mut ga = pa.0.grad.borrow_mut();
            for i in 0..g.len() {
                ga[i] += g[i] * (1.0 - out[i] * out[i]);
            }
        })),
    )
}

/// Elementwise natural log; inputs are expected positive (the loss graph
/// only applies it to `t + 0.5` with `t >= 0`).
pub fn ln(a: &Tensor) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|&x| x.ln()).collect();
    let pa = a.clone();
    Tensor::from_parts(
        a.shape(),
        data,
        vec![a.clone()],
        Some(Box::new(move |_, g| {
            let xs = pa.0.data.borrow().clone();
            let mut ga = pa.0.grad.borrow_mut();
            for i in 0..g.len() {
                ga[i] += g[i] / xs[i];
            }
        })),
    )
}

/// Elementwise square root with a clamped gradient at zero.
pub fn sqrt(a: &Tensor) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|&x| x.sqrt()).collect();
    let pa = a.clone();
    Tensor::from_parts(
        a.shape(),
        data,
        vec![a.clone()],
        Some(Box::new(move |out, g| {
            let mut ga = pa.0.grad.borrow_mut();
            for i in 0..g.len() {
                ga[i] += g[i] * 0.5 / out[i].max(1e-12);
            }
        })),
    )
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

pub fn sum_all(a: &Tensor) -> Tensor {
    let s: f64 = a.data().iter().sum();
    let pa = a.clone();
    Tensor::from_parts(
        Shape::scalar(),
        vec![s],
        vec![a.clone()],
        Some(Box::new(move |_, g| {
            let go = g[0];
            let mut ga = pa.0.grad.borrow_mut();
            for gi in ga.iter_mut() {
                *gi += go;
            }
        })),
    )
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.len() as f64;
    mul_scalar(&sum_all(a), 1.0 / n)
}

/// Mean over pixels of `|dx d| + |dy d|` with forward differences
/// (zero on the last column / row) for a (B,1,H,W) map.
pub fn tv_abs_mean(a: &Tensor) -> Tensor {
    let Shape([b, c, h, w]) = a.shape();
    assert_eq!(c, 1, "tv_abs_mean expects a 1-channel map");
    let norm = 1.0 / (b * h * w) as f64;
    let mut total = 0.0;
    {
        let d = a.data();
        for bi in 0..b {
            let base = bi * h * w;
            for y in 0..h {
                for x in 0..w {
                    let v = d[base + y * w + x];
                    if x + 1 < w {
                        total += (d[base + y * w + x + 1] - v).abs();
                    }
                    if y + 1 < h {
                        total += (d[base + (y + 1) * w + x] - v).abs();
                    }
                }
            }
        }
    }
    let pa = a.clone();
    Tensor::from_parts(
        Shape::scalar(),
        vec![total * norm],
        vec![a.clone()],
        Some(Box::new(move |_, g| {
            let go = g[0] * norm;
            let d = pa.0.data.borrow().clone();
            let mut ga = pa.0.grad.borrow_mut();
            for bi in 0..b {
                let base = bi * h * w;
                for y in 0..h {
                    for x in 0..w {
                        let v = d[base + y * w + x];
                        if x + 1 < w {
                            let s = (d[base + y * w + x + 1] - v).signum();
                            ga[base + y * w + x + 1] += go * s;
                            ga[base + y * w + x] -= go * s;
                        }
                        if y + 1 < h {
                            let s = (d[base + (y + 1) * w + x] - v).signum();
                            ga[base + (y + 1) * w + x] += go * s;
                            ga[base + y * w + x] -= go * s;
                        }
                    }
                }
            }
        })),
    )
}

/// Mean binary cross-entropy against a constant 0/1 target, with the
/// probabilities clamped into `[eps, 1-eps]`; clamped elements get zero
/// gradient (true subgradient of the clamp composition).
pub fn bce_with_clamp(p: &Tensor, target_one: bool, eps: f64) -> Tensor {
    let n = p.len() as f64;
    let loss = p
        .data()
        .iter()
        .map(|&v| {
            let q = v.clamp(eps, 1.0 - eps);
            if target_one {
                -q.ln()
            } else {
                -(1.0 - q).ln()
            }
        })
        .sum::<f64>()
        / n;
    let pa = p.clone();
    Tensor::from_parts(
        Shape::scalar(),
        vec![loss],
        vec![p.clone()],
        Some(Box::new(move |_, g| {
            let go = g[0] / n;
            let xs = pa.0.data.borrow().clone();
            let mut ga = pa.0.grad.borrow_mut();
            for i in 0..xs.len() {
                let v = xs[i];
                if v > eps && v < 1.0 - eps {
                    ga[i] += go * if target_one { -1.0 / v } else { 1.0 / (1.0 - v) };
                }
            }
        })),
    )
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

/// Channel concatenation of (B,C1,H,W) and (B,C2,H,W).
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let Shape([ba, ca, ha, wa]) = a.shape();
    let Shape([bb, cb, hb, wb]) = b.shape();
    assert!(
        ba == bb && ha == hb && wa == wb,
        "concat_channels: incompatible {} vs {}",
        a.shape(),
        b.shape()
    );
    let plane = ha * wa;
    let mut data = Vec::with_capacity((ca + cb) * ba * plane);
    {
        let da = a.data();
        let db = b.data();
        for bi in 0..ba {
            data.extend_from_slice(&da[bi * ca * plane..(bi + 1) * ca * plane]);
            data.extend_from_slice(&db[bi * cb * plane..(bi + 1) * cb * plane]);
        }
    }
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_parts(
        Shape([ba, ca + cb, ha, wa]),
        data,
        vec![a.clone(), b.clone()],
        Some(Box::new(move |_, g| {
            let stride = (ca + cb) * plane;
            {
                let mut ga = pa.0.grad.borrow_mut();
                for bi in 0..ba {
                    let src = &g[bi * stride..bi * stride + ca * plane];
                    let dst = &mut ga[bi * ca * plane..(bi + 1) * ca * plane];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let mut gb = pb.0.grad.borrow_mut();
            for bi in 0..ba {
                let src = &g[bi * stride + ca * plane..(bi + 1) * stride];
                let dst = &mut gb[bi * cb * plane..(bi + 1) * cb * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        })),
    )
}

/// Repeats a 1-channel map across `channels` channels.
pub fn broadcast_channels(a: &Tensor, channels: usize) -> Tensor {
    let Shape([b, c, h, w]) = a.shape();
    assert_eq!(c, 1, "broadcast_channels expects a 1-channel input");
    let plane = h * w;
    let mut data = Vec::with_capacity(b * channels * plane);
    {
        let da = a.data();
        for bi in 0..b {
            for _ in 0..channels {
                data.extend_from_slice(&da[bi * plane..(bi + 1) * plane]);
            }
        }
    }
    let pa = a.clone();
    Tensor::from_parts(
        Shape([b, channels, h, w]),
        data,
        vec![a.clone()],
        Some(Box::new(move |_, g| {
            let mut ga = pa.0.grad.borrow_mut();
            for bi in 0..b {
                for ci in 0..channels {
                    let src = &g[(bi * channels + ci) * plane..(bi * channels + ci + 1) * plane];
                    let dst = &mut ga[bi * plane..(bi + 1) * plane];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        })),
    )
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest(a: &Tensor) -> Tensor {
    let Shape([b, c, h, w]) = a.shape();
    let (h2, w2) = (h * 2, w * 2);
    let mut data = vec![0.0; b * c * h2 * w2];
    {
        let da = a.data();
        for bc in 0..b * c {
            let src = &da[bc * h * w..(bc + 1) * h * w];
            let dst = &mut data[bc * h2 * w2..(bc + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    dst[y * w2 + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
    }
    let pa = a.clone();
    Tensor::from_parts(
        Shape([b, c, h2, w2]),
        data,
        vec![a.clone()],
        Some(Box::new(move |_, g| {
            let mut ga = pa.0.grad.borrow_mut();
            for bc in 0..b * c {
                let src = &g[bc * h2 * w2..(bc + 1) * h2 * w2];
                let dst = &mut ga[bc * h * w..(bc + 1) * h * w];
                for y in 0..h2 {
                    for x in 0..w2 {
                        dst[(y / 2) * w + x / 2] += src[y * w2 + x];
                    }
                }
            }
        })),
    )
}

/// Reinterprets a (B,D,h,w) feature map as (B,1,h*w,D) token rows.
pub fn tokens_from_feature_map(a: &Tensor) -> Tensor {
    let Shape([b, d, h, w]) = a.shape();
    let n = h * w;
    let mut data = vec![0.0; b * n * d];
    {
        let da = a.data();
        for bi in 0..b {
            for di in 0..d {
                for p in 0..n {
                    data[bi * n * d + p * d + di] = da[(bi * d + di) * n + p];
                }
            }
        }
    }
    let pa = a.clone();
    Tensor::from_parts(
        Shape([b, 1, n, d]),
        data,
        vec![a.clone()],
        Some(Box::new(move |_, g| {
            let mut ga = pa.0.grad.borrow_mut();
            for bi in 0..b {
                for di in 0..d {
                    for p in 0..n {
                        ga[(bi * d + di) * n + p] += g[bi * n * d + p * d + di];
                    }
                }
            }
        })),
    )
}

/// Swaps the last two dims: (B,H,N,M) -> (B,H,M,N).
pub fn transpose_last2(a: &Tensor) -> Tensor {
    let Shape([b, hh, n, m]) = a.shape();
    let mut data = vec![0.0; a.len()];
    {
        let da = a.data();
        for bh in 0..b * hh {
            let src = &da[bh * n * m..(bh + 1) * n * m];
            let dst = &mut data[bh * n * m..(bh + 1) * n * m];
            for i in 0..n {
                for j in 0..m {
                    dst[j * n + i] = src[i * m + j];
                }
            }
        }
    }
    let pa = a.clone();
    Tensor::from_parts(
        Shape([b, hh, m, n]),
        data,
        vec![a.clone()],
        Some(Box::new(move |_, g| {
            let mut ga = pa.0.grad.borrow_mut();
            for bh in 0..b * hh {
                let gdst = &g[bh * n * m..(bh + 1) * n * m];
                let gsrc = &mut ga[bh * n * m..(bh + 1) * n * m];
                for i in 0..n {
                    for j in 0..m {
                        gsrc[i * m + j] += gdst[j * n + i];
                    }
                }
            }
        })),
    )
}

/// Batched matrix product (B,H,N,K) x (B',H',K,M) -> (B,H,N,M); the right
/// operand broadcasts when its leading dims are 1 (weight matrices).
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let Shape([ba, ha, n, ka]) = a.shape();
    let Shape([bb, hb, kb, m]) = b.shape();
    assert_eq!(ka, kb, "matmul: inner dims {ka} vs {kb}");
    assert!(
        (bb == ba && hb == ha) || (bb == 1 && hb == 1),
        "matmul: right operand must match {} or be a broadcastable (1,1,k,m) matrix, got {}",
        a.shape(),
        b.shape()
    );
    let k = ka;
    let bh = ba * ha;
    let broadcast = bb == 1 && hb == 1;
    let mut data = vec![0.0; bh * n * m];
    {
        let da = a.data();
        let db = b.data();
        for idx in 0..bh {
            let asrc = &da[idx * n * k..(idx + 1) * n * k];
            let bsrc = if broadcast {
                &db[0..k * m]
            } else {
                &db[idx * k * m..(idx + 1) * k * m]
            };
            let dst = &mut data[idx * n * m..(idx + 1) * n * m];
            for i in 0..n {
                for kk in 0..k {
                    let av = asrc[i * k + kk];
                    let brow = &bsrc[kk * m..(kk + 1) * m];
                    let drow = &mut dst[i * m..(i + 1) * m];
                    for j in 0..m {
                        drow[j] += av * brow[j];
                    }
                }
            }
        }
    }
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_parts(
        Shape([ba, ha, n, m]),
        data,
        vec![a.clone(), b.clone()],
        Some(Box::new(move |_, g| {
            // dA = g . B^T
            {
                let db = pb.0.data.borrow();
                let mut ga = pa.0.grad.borrow_mut();
                for idx in 0..bh {
                    let gsrc = &g[idx * n * m..(idx + 1) * n * m];
                    let bsrc = if broadcast {
                        &db[0..k * m]
                    } else {
                        &db[idx * k * m..(idx + 1) * k * m]
                    };
                    let adst = &mut ga[idx * n * k..(idx + 1) * n * k];
                    for i in 0..n {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            let grow = &gsrc[i * m..(i + 1) * m];
                            let brow = &bsrc[kk * m..(kk + 1) * m];
                            for j in 0..m {
                                acc += grow[j] * brow[j];
                            }
                            adst[i * k + kk] += acc;
                        }
                    }
                }
            }
            // dB = A^T . g (summed over broadcast dims)
            let da = pa.0.data.borrow();
            let mut gb = pb.0.grad.borrow_mut();
            for idx in 0..bh {
                let gsrc = &g[idx * n * m..(idx + 1) * n * m];
                let asrc = &da[idx * n * k..(idx + 1) * n * k];
                let bdst = if broadcast {
                    &mut gb[0..k * m]
                } else {
                    &mut gb[idx * k * m..(idx + 1) * k * m]
                };
                for i in 0..n {
                    for kk in 0..k {
                        let av = asrc[i * k + kk];
                        let grow = &gsrc[i * m..(i + 1) * m];
                        let brow = &mut bdst[kk * m..(kk + 1) * m];
                        for j in 0..m {
                            brow[j] += av * grow[j];
                        }
                    }
                }
            }
        })),
    )
}

/// Softmax over the last dim.
pub fn softmax(a: &Tensor) -> Tensor {
    let Shape([b, h, n, m]) = a.shape();
    let rows = b * h * n;
    let mut data = vec![0.0; a.len()];
    {
        let da = a.data();
        for r in 0..rows {
            let src = &da[r * m..(r + 1) * m];
            let dst = &mut data[r * m..(r + 1) * m];
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..m {
                let e = (src[j] - max).exp();
                dst[j] = e;
                sum += e;
            }
            for v in dst.iter_mut() {
                *v /= sum;
            }
        }
    }
    let pa = a.clone();
    Tensor::from_parts(
        a.shape(),
        data,
        vec![a.clone()],
        Some(Box::new(move |out, g| {
            let mut ga = pa.0.grad.borrow_mut();
            for r in 0..rows {
                let y = &out[r * m..(r + 1) * m];
                let go = &g[r * m..(r + 1) * m];
                let dot: f64 = y.iter().zip(go).map(|(yi, gi)| yi * gi).sum();
                let dst = &mut ga[r * m..(r + 1) * m];
                for j in 0..m {
                    dst[j] += y[j] * (go[j] - dot);
                }
            }
        })),
    )
}

/// Layer normalization over the last dim with learned gain and bias.
pub fn layer_norm(a: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let Shape([b, h, n, m]) = a.shape();
    assert_eq!(gamma.len(), m, "layer_norm: gain length");
    assert_eq!(beta.len(), m, "layer_norm: bias length");
    let rows = b * h * n;
    let mut data = vec![0.0; a.len()];
    let mut inv_std = vec![0.0; rows];
    let mut normalized = vec![0.0; a.len()];
    {
        let da = a.data();
        let gm = gamma.data();
        let bt = beta.data();
        for r in 0..rows {
            let src = &da[r * m..(r + 1) * m];
            let mu = src.iter().sum::<f64>() / m as f64;
            let var = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..m {
                let y = (src[j] - mu) * istd;
                normalized[r * m + j] = y;
                data[r * m + j] = gm[j] * y + bt[j];
            }
        }
    }
    let (pa, pg, pb) = (a.clone(), gamma.clone(), beta.clone());
    Tensor::from_parts(
        a.shape(),
        data,
        vec![a.clone(), gamma.clone(), beta.clone()],
        Some(Box::new(move |_, g| {
            let gm = pg.0.data.borrow().clone();
            {
                let mut ga = pa.0.grad.borrow_mut();
                for r in 0..rows {
                    let go = &g[r * m..(r + 1) * m];
                    let y = &normalized[r * m..(r + 1) * m];
                    let gh: Vec<f64> = (0..m).map(|j| go[j] * gm[j]).collect();
                    let mean_gh = gh.iter().sum::<f64>() / m as f64;
                    let mean_ghy = gh.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    let dst = &mut ga[r * m..(r + 1) * m];
                    for j in 0..m {
                        dst[j] += (gh[j] - mean_gh - y[j] * mean_ghy) * inv_std[r];
                    }
                }
            }
            {
                let mut gg = pg.0.grad.borrow_mut();
                for r in 0..rows {
                    let go = &g[r * m..(r + 1) * m];
                    let y = &normalized[r * m..(r + 1) * m];
                    for j in 0..m {
                        gg[j] += go[j] * y[j];
                    }
                }
            }
            let mut gb = pb.0.grad.borrow_mut();
            for r in 0..rows {
                let go = &g[r * m..(r + 1) * m];
                for j in 0..m {
                    gb[j] += go[j];
                }
            }
        })),
    )
}

/// Mean over the token axis: (B,1,N,D) -> (B,1,1,D).
pub fn mean_tokens(a: &Tensor) -> Tensor {
    let Shape([b, h, n, d]) = a.shape();
    assert_eq!(h, 1, "mean_tokens expects a single head dim");
    let mut data = vec![0.0; b * d];
    {
        let da = a.data();
        for bi in 0..b {
            for p in 0..n {
                for j in 0..d {
                    data[bi * d + j] += da[bi * n * d + p * d + j];
                }
            }
        }
        for v in data.iter_mut() {
            *v /= n as f64;
        }
    }
    let pa = a.clone();
    Tensor::from_parts(
        Shape([b, 1, 1, d]),
        data,
        vec![a.clone()],
        Some(Box::new(move |_, g| {
            let scale = 1.0 / n as f64;
            let mut ga = pa.0.grad.borrow_mut();
            for bi in 0..b {
                for p in 0..n {
                    for j in 0..d {
                        ga[bi * n * d + p * d + j] += g[bi * d + j] * scale;
                    }
                }
            }
        })),
    )
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Valid output range for one kernel offset: indices `o` with
/// `o*stride + koff - pad` inside `[0, extent)`.
fn conv_valid_range(out_len: usize, extent: usize, stride: usize, pad: usize, koff: usize) -> (usize, usize) {
    let lo = if pad > koff {
        (pad - koff).div_ceil(stride)
    } else {
        0
    };
    if extent + pad <= koff {
        return (0, 0);
    }
    let hi = ((extent - 1 + pad - koff) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// 2-d convolution with zero padding. `x` is (B,Cin,H,W), `w` is
/// (Cout,Cin,k,k), `bias` is (1,Cout,1,1).
pub fn conv2d(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let Shape([b, cin, h, wd]) = x.shape();
    let Shape([cout, cin_w, kh, kw]) = w.shape();
    assert_eq!(cin, cin_w, "conv2d: input channels {cin} vs kernel {cin_w}");
    assert_eq!(kh, kw, "conv2d: square kernels only");
    assert_eq!(bias.len(), cout, "conv2d: bias length");
    let k = kh;
    assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: kernel larger than input");
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;

    let xd_guard = x.data();
    let wd_guard = w.data();
    let bd_guard = bias.data();
    let xd: &[f64] = &xd_guard;
    let wdv: &[f64] = &wd_guard;
    let bd: &[f64] = &bd_guard;
    let mut out = vec![0.0; b * cout * ho * wo];
    // Disjoint (batch, out-channel) output slices; safe to fill in parallel.
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(idx, dst)| {
        let bi = idx / cout;
        let oc = idx % cout;
        dst.fill(bd[oc]);
        for ic in 0..cin {
            let xplane = &xd[(bi * cin + ic) * h * wd..(bi * cin + ic + 1) * h * wd];
            let wk = &wdv[(oc * cin + ic) * k * k..(oc * cin + ic + 1) * k * k];
            for ky in 0..k {
                let (oy_lo, oy_hi) = conv_valid_range(ho, h, stride, pad, ky);
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let xrow = &xplane[iy * wd..iy * wd + wd];
                    let drow = &mut dst[oy * wo..oy * wo + wo];
                    for kx in 0..k {
                        let wv = wk[ky * k + kx];
                        let (ox_lo, ox_hi) = conv_valid_range(wo, wd, stride, pad, kx);
                        for ox in ox_lo..ox_hi {
                            drow[ox] += wv * xrow[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    });
    drop(xd_guard);
    drop(wd_guard);
    drop(bd_guard);

    let (px, pw, pb) = (x.clone(), w.clone(), bias.clone());
    Tensor::from_parts(
        Shape([b, cout, ho, wo]),
        out,
        vec![x.clone(), w.clone(), bias.clone()],
        Some(Box::new(move |_, g| {
            let xd_guard = px.0.data.borrow();
            let wd_guard = pw.0.data.borrow();
            let xd: &[f64] = &xd_guard;
            let wdv: &[f64] = &wd_guard;
            // Input gradient: parallel over batch items (disjoint slices).
            {
                let mut gx = px.0.grad.borrow_mut();
                gx.par_chunks_mut(cin * h * wd).enumerate().for_each(|(bi, gxb)| {
                    for oc in 0..cout {
                        let gsrc = &g[(bi * cout + oc) * ho * wo..(bi * cout + oc + 1) * ho * wo];
                        for ic in 0..cin {
                            let wk = &wdv[(oc * cin + ic) * k * k..(oc * cin + ic + 1) * k * k];
                            let gplane = &mut gxb[ic * h * wd..(ic + 1) * h * wd];
                            for ky in 0..k {
                                let (oy_lo, oy_hi) = conv_valid_range(ho, h, stride, pad, ky);
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * stride + ky - pad;
                                    let grow = &gsrc[oy * wo..oy * wo + wo];
                                    let grad_row = &mut gplane[iy * wd..iy * wd + wd];
                                    for kx in 0..k {
                                        let wv = wk[ky * k + kx];
                                        let (ox_lo, ox_hi) = conv_valid_range(wo, wd, stride, pad, kx);
                                        for ox in ox_lo..ox_hi {
                                            grad_row[ox * stride + kx - pad] += grow[ox] * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            // Weight gradient: parallel over output channels (disjoint slices).
            {
                let mut gw = pw.0.grad.borrow_mut();
                gw.par_chunks_mut(cin * k * k).enumerate().for_each(|(oc, gwoc)| {
                    for bi in 0..b {
                        let gsrc = &g[(bi * cout + oc) * ho * wo..(bi * cout + oc + 1) * ho * wo];
                        for ic in 0..cin {
                            let xplane = &xd[(bi * cin + ic) * h * wd..(bi * cin + ic + 1) * h * wd];
                            for ky in 0..k {
                                let (oy_lo, oy_hi) = conv_valid_range(ho, h, stride, pad, ky);
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * stride + ky - pad;
                                    let xrow = &xplane[iy * wd..iy * wd + wd];
                                    let grow = &gsrc[oy * wo..oy * wo + wo];
                                    for kx in 0..k {
                                        let (ox_lo, ox_hi) = conv_valid_range(wo, wd, stride, pad, kx);
                                        let mut acc = 0.0;
                                        for ox in ox_lo..ox_hi {
                                            acc += grow[ox] * xrow[ox * stride + kx - pad];
                                        }
                                        gwoc[ic * k * k + ky * k + kx] += acc;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            let mut gb = pb.0.grad.borrow_mut();
            for oc in 0..cout {
                let mut acc = 0.0;
                for bi in 0..b {
                    let gsrc = &g[(bi * cout + oc) * ho * wo..(bi * cout + oc + 1) * ho * wo];
                    acc += gsrc.iter().sum::<f64>();
                }
                gb[oc] += acc;
            }
        })),
    )
}
