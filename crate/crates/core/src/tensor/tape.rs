use std::sync::atomic::{AtomicU64, Ordering};

use super::gemm::{gemm, MatRef};
use super::kernels::{self, ConvGeom, PoolGeom};
use super::{Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    tape: u64,
}

/// Stride and zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0 }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    AddScalar(usize),
    Square(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
        inner: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    MaxPool {
        x: usize,
        argmax: Vec<u32>,
    },
    Relu(usize),
    Reshape(usize),
    Mean(usize),
    Sum(usize),
    Clamp {
        x: usize,
        lo: f32,
        hi: f32,
    },
    Sign(usize),
    CrossEntropy {
        logits: usize,
        dlogits: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run recording of one forward pass.
///
/// Nodes are appended in execution order, so the recording is always
/// topologically sorted. Leaf gradients persist across `backward` calls and
/// accumulate until [`Tape::zero_grad`].
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f32>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::OffTape);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let value = value.with_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn node(&self, v: Var) -> Result<&Node, TensorError> {
        let i = self.check(v)?;
        Ok(&self.nodes[i])
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Records a copy of `t` as a leaf; it is differentiable iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.zero_grad();
        let rg = t.requires_grad();
        self.push(value, rg, Op::Leaf)
    }

    /// Records an owned tensor as a leaf with the given differentiability.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Copies `v` into a new non-differentiable leaf.
    pub fn detach(&mut self, v: Var) -> Result<Var, TensorError> {
        let value = self.node(v)?.value.clone();
        Ok(self.constant(value))
    }

    /// Value of a recorded variable.
    ///
    /// Panics if `v` belongs to another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        assert!(v.tape == self.id, "variable used with a foreign tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        v.tape == self.id && self.nodes[v.idx].requires_grad
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        if v.tape != self.id {
            return None;
        }
        self.leaf_grads.get(v.idx)?.as_deref()
    }

    /// The leaf's value with its accumulated gradient attached.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.value(v).clone();
        if let Some(g) = self.grad(v) {
            t.accumulate_grad(g).expect("gradient shape matches its leaf");
        }
        t
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok((ia, ib))
    }

    fn zip_map(&self, ia: usize, ib: usize, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape as operand")
    }

    fn map(&self, ia: usize, f: impl Fn(f32) -> f32) -> Tensor {
        let t = &self.nodes[ia].value;
        let data = t.data().iter().map(|&x| f(x)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape as operand")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = self.binary("add", a, b)?;
        let out = self.zip_map(ia, ib, |x, y| x + y);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, rg, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = self.binary("sub", a, b)?;
        let out = self.zip_map(ia, ib, |x, y| x - y);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, rg, Op::Sub(ia, ib)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = self.binary("mul", a, b)?;
        let out = self.zip_map(ia, ib, |x, y| x * y);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, rg, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = self.map(ia, |x| x * s);
        let rg = self.rg(ia);
        Ok(self.push(out, rg, Op::Scale(ia, s)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = self.map(ia, |x| x + s);
        let rg = self.rg(ia);
        Ok(self.push(out, rg, Op::AddScalar(ia)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = self.map(ia, |x| x * x);
        let rg = self.rg(ia);
        Ok(self.push(out, rg, Op::Square(ia)))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        gemm(
            1.0,
            MatRef::row_major(self.nodes[ia].value.data(), m, k),
            MatRef::row_major(self.nodes[ib].value.data(), k, n),
            0.0,
            &mut out,
        );
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, rg, Op::MatMul { a: ia, b: ib, m, k, n }))
    }

    /// Adds `bias[c]` to every element of channel `c`, where the channel axis
    /// is axis 1 of a rank-2 or rank-4 tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (sx, sb) = (self.nodes[ix].value.shape(), self.nodes[ib].value.shape());
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(mismatch("add_bias", sx, sb));
        }
        let inner: usize = sx[2..].iter().product();
        let channels = sx[1];
        let b = self.nodes[ib].value.data();
        let mut out = self.nodes[ix].value.clone();
        for (j, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let add = b[j % channels];
            chunk.iter_mut().for_each(|v| *v += add);
        }
        let rg = self.rg(ix) || self.rg(ib);
        Ok(self.push(out, rg, Op::AddBias { x: ix, bias: ib, inner }))
    }

    /// `x w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// 2-D cross-correlation of `x: [n, c, h, w]` with `w: [oc, c, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    ) -> Result<Var, TensorError> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = b.map(|b| self.check(b)).transpose()?;
        let (sx, sw) = (self.nodes[ix].value.shape(), self.nodes[iw].value.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(mismatch("conv2d", sx, sw));
        }
        if spec.stride == 0 {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: sw.to_vec(),
                reason: "stride must be positive".into(),
            });
        }
        let (ph, pw) = (sx[2] + 2 * spec.padding, sx[3] + 2 * spec.padding);
        if sw[2] > ph || sw[3] > pw {
            return Err(TensorError::KernelTooLarge {
                kernel: (sw[2], sw[3]),
                padded: (ph, pw),
            });
        }
        if let Some(ib) = ib {
            let sb = self.nodes[ib].value.shape();
            if sb != [sw[0]] {
                return Err(mismatch("conv2d bias", sw, sb));
            }
        }
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            oc: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride: spec.stride,
            pad: spec.padding,
            oh: (ph - sw[2]) / spec.stride + 1,
            ow: (pw - sw[3]) / spec.stride + 1,
        };
        let (out, cols) = kernels::conv2d_forward(
            &geom,
            self.nodes[ix].value.data(),
            self.nodes[iw].value.data(),
            ib.map(|i| self.nodes[i].value.data()),
        );
        let out = Tensor::new(vec![geom.n, geom.oc, geom.oh, geom.ow], out)?;
        let rg = self.rg(ix) || self.rg(iw) || ib.is_some_and(|i| self.rg(i));
        // Patch matrices are only needed for the filter gradient.
        let cols = if self.rg(iw) { cols } else { Vec::new() };
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                x: ix,
                w: iw,
                b: ib,
                geom,
                cols,
            },
        ))
    }

    /// Non-overlapping or strided max pooling over the two trailing axes.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var, TensorError> {
        let ix = self.check(x)?;
        let sx = self.nodes[ix].value.shape();
        if sx.len() != 4 || kernel == 0 || stride == 0 || kernel > sx[2] || kernel > sx[3] {
            return Err(TensorError::InvalidShape {
                op: "max_pool2d",
                shape: sx.to_vec(),
                reason: format!("kernel {kernel} stride {stride}"),
            });
        }
        let g = PoolGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            k: kernel,
            stride,
            oh: (sx[2] - kernel) / stride + 1,
            ow: (sx[3] - kernel) / stride + 1,
        };
        let (out, argmax) = kernels::max_pool_forward(&g, self.nodes[ix].value.data());
        let out = Tensor::new(vec![g.n, g.c, g.oh, g.ow], out)?;
        let rg = self.rg(ix);
        Ok(self.push(out, rg, Op::MaxPool { x: ix, argmax }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = self.map(ia, |x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(ia);
        Ok(self.push(out, rg, Op::Relu(ia)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.clone().reshape(shape)?;
        let rg = self.rg(ia);
        Ok(self.push(out, rg, Op::Reshape(ia)))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.node(a)?.value.shape();
        let n = s[0];
        let rest = s[1..].iter().product::<usize>().max(1);
        self.reshape(a, vec![n, rest])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let s: f64 = self.nodes[ia].value.data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(ia);
        Ok(self.push(Tensor::scalar(s as f32), rg, Op::Sum(ia)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let m = s / t.numel() as f64;
        let rg = self.rg(ia);
        Ok(self.push(Tensor::scalar(m as f32), rg, Op::Mean(ia)))
    }

    /// Clamps to `[lo, hi]`; the gradient is zero at and beyond the bounds.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = self.map(ia, |x| x.max(lo).min(hi));
        let rg = self.rg(ia);
        Ok(self.push(out, rg, Op::Clamp { x: ia, lo, hi }))
    }

    /// Elementwise sign with `sign(0) = 0`; propagates zero gradient.
    pub fn sign(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = self.map(ia, sign);
        let rg = self.rg(ia);
        Ok(self.push(out, rg, Op::Sign(ia)))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    ///
    /// Evaluated through log-sum-exp in f64. The gradient of the true-class
    /// logit is formed as minus the sum of the other probabilities, so it
    /// stays nonzero when the true class saturates in f32.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let il = self.check(logits)?;
        let t = &self.nodes[il].value;
        let s = t.shape();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "softmax_cross_entropy",
                shape: s.to_vec(),
                reason: "logits must be [batch, classes]".into(),
            });
        }
        let (n, c) = (s[0], s[1]);
        if labels.len() != n {
            return Err(mismatch("softmax_cross_entropy", s, &[labels.len()]));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(TensorError::LabelOutOfRange {
                index,
                label,
                classes: c,
            });
        }
        let mut total = 0.0f64;
        let mut dlogits = vec![0.0f32; n * c];
        let inv_n = 1.0 / n as f64;
        let mut probs = vec![0.0f64; c];
        for (i, (row, &y)) in t.data().chunks(c).zip(labels).enumerate() {
            let (lse, _) = log_sum_exp(row);
            total += lse - row[y] as f64;
            let mut others = 0.0f64;
            for (j, (&z, p)) in row.iter().zip(probs.iter_mut()).enumerate() {
                *p = (z as f64 - lse).exp();
                if j != y {
                    others += *p;
                }
            }
            let out = &mut dlogits[i * c..(i + 1) * c];
            for (j, (&p, d)) in probs.iter().zip(out.iter_mut()).enumerate() {
                *d = if j == y { -others * inv_n } else { p * inv_n } as f32;
            }
        }
        let value = Tensor::scalar((total * inv_n) as f32);
        let rg = self.rg(il);
        Ok(self.push(value, rg, Op::CrossEntropy { logits: il, dlogits }))
    }

    /// Reverse pass from a scalar `loss`, accumulating into every
    /// differentiable leaf it reaches.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let li = self.check(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(TensorError::NotScalar(self.nodes[li].value.shape().to_vec()));
        }
        if !self.nodes[li].requires_grad {
            return Ok(());
        }
        let Tape {
            nodes, leaf_grads, ..
        } = self;
        let mut adj: Vec<Option<Vec<f32>>> = (0..=li).map(|_| None).collect();
        adj[li] = Some(vec![1.0]);

        fn send(adj: &mut [Option<Vec<f32>>], nodes: &[Node], to: usize, g: Vec<f32>) {
            if !nodes[to].requires_grad {
                return;
            }
            match &mut adj[to] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=li).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = |j: usize| nodes[j].value.data();
            match &node.op {
                Op::Leaf => match &mut leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                },
                Op::Add(a, b) => {
                    send(&mut adj, nodes, *a, g.clone());
                    send(&mut adj, nodes, *b, g);
                }
                Op::Sub(a, b) => {
                    send(&mut adj, nodes, *a, g.clone());
                    send(&mut adj, nodes, *b, g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let ga = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                    let gb = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                    send(&mut adj, nodes, *a, ga);
                    send(&mut adj, nodes, *b, gb);
                }
                Op::Scale(a, s) => send(&mut adj, nodes, *a, g.iter().map(|v| v * s).collect()),
                Op::AddScalar(a) | Op::Reshape(a) => send(&mut adj, nodes, *a, g),
                Op::Square(a) => {
                    let ga = g.iter().zip(val(*a)).map(|(g, x)| 2.0 * x * g).collect();
                    send(&mut adj, nodes, *a, ga);
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if nodes[*a].requires_grad {
                        let mut da = vec![0.0f32; m * k];
                        gemm(
                            1.0,
                            MatRef::row_major(&g, m, n),
                            MatRef::transposed(val(*b), k, n),
                            0.0,
                            &mut da,
                        );
                        send(&mut adj, nodes, *a, da);
                    }
                    if nodes[*b].requires_grad {
                        let mut db = vec![0.0f32; k * n];
                        gemm(
                            1.0,
                            MatRef::transposed(val(*a), m, k),
                            MatRef::row_major(&g, m, n),
                            0.0,
                            &mut db,
                        );
                        send(&mut adj, nodes, *b, db);
                    }
                }
                Op::AddBias { x, bias, inner } => {
                    if nodes[*bias].requires_grad {
                        let channels = nodes[*bias].value.numel();
                        let mut sums = vec![0.0f64; channels];
                        for (j, chunk) in g.chunks(*inner).enumerate() {
                            sums[j % channels] += chunk.iter().map(|&v| v as f64).sum::<f64>();
                        }
                        send(&mut adj, nodes, *bias, sums.into_iter().map(|v| v as f32).collect());
                    }
                    send(&mut adj, nodes, *x, g);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    if nodes[*x].requires_grad {
                        let dx = kernels::conv2d_backward_input(geom, &g, val(*w));
                        send(&mut adj, nodes, *x, dx);
                    }
                    let want_b = b.is_some_and(|b| nodes[b].requires_grad);
                    if nodes[*w].requires_grad {
                        let (dw, db) = kernels::conv2d_backward_params(geom, &g, cols, want_b);
                        send(&mut adj, nodes, *w, dw);
                        if let (Some(b), Some(db)) = (b, db) {
                            send(&mut adj, nodes, *b, db);
                        }
                    } else if let (true, Some(b)) = (want_b, b) {
                        let p = geom.out_pixels();
                        let mut sums = vec![0.0f64; geom.oc];
                        for (j, chunk) in g.chunks(p).enumerate() {
                            sums[j % geom.oc] += chunk.iter().map(|&v| v as f64).sum::<f64>();
                        }
                        send(&mut adj, nodes, *b, sums.into_iter().map(|v| v as f32).collect());
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let dx = kernels::max_pool_backward(nodes[*x].value.numel(), &g, argmax);
                    send(&mut adj, nodes, *x, dx);
                }
                Op::Relu(a) => {
                    let ga = g
                        .iter()
                        .zip(val(*a))
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    send(&mut adj, nodes, *a, ga);
                }
                Op::Sum(a) => {
                    let n = nodes[*a].value.numel();
                    send(&mut adj, nodes, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.numel();
                    send(&mut adj, nodes, *a, vec![(g[0] as f64 / n as f64) as f32; n]);
                }
                Op::Clamp { x, lo, hi } => {
                    let gx = g
                        .iter()
                        .zip(val(*x))
                        .map(|(g, &v)| if v > *lo && v < *hi { *g } else { 0.0 })
                        .collect();
                    send(&mut adj, nodes, *x, gx);
                }
                Op::Sign(a) => {
                    let n = nodes[*a].value.numel();
                    send(&mut adj, nodes, *a, vec![0.0; n]);
                }
                Op::CrossEntropy { logits, dlogits } => {
                    let s = g[0];
                    send(&mut adj, nodes, *logits, dlogits.iter().map(|d| d * s).collect());
                }
            }
        }
        Ok(())
    }
}

/// Sign with `sign(0) = 0`.
pub fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Returns `(log sum exp(row), max(row))` in f64.
pub(crate) fn log_sum_exp(row: &[f32]) -> (f64, f64) {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let s: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
    (m + s.ln(), m)
}
