use super::tensor::{numel, Tensor};
use super::NumError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which elements [`Tape::select_sign`] keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Positive,
    Negative,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { input: Var, kernel: Var },
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    LogSigmoid(Var),
    ClampStraight(Var),
    Sum(Var),
    Mean(Var),
    SelectSign(Var, Sign),
    PairwiseMul(Var, Var),
    SumLast(Var),
    Gather { x: Var, rows: Vec<usize> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, or `None` when `var` does not
    /// require grad or is unreachable from the loss.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but returns zeros for unreachable leaves.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// Append-only record of primitive operations for reverse-mode
/// differentiation.
///
/// Nodes are stored in creation order, which is a topological order. Each
/// tape supports one backward pass per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), NumError> {
    if a != b {
        return Err(NumError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of `v`, if it has exactly one element.
    pub fn item(&self, v: Var) -> Option<f64> {
        let n = &self.nodes[v.0];
        (n.value.len() == 1).then(|| n.value[0])
    }

    /// Copies `v` out into a standalone tensor (no grad).
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are valid tensors")
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Result<Var, NumError> {
        debug_assert_eq!(numel(&shape), value.len());
        if let Some(v) = value.iter().find(|v| !v.is_finite()) {
            return Err(NumError::NonFinite {
                op: op_name,
                value: *v,
            });
        }
        // recording new work starts a fresh forward pass
        self.backward_done = false;
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records `t` as a leaf; it participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            "leaf",
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
        .expect("tensors are finite by construction")
    }

    /// Records a constant leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, NumError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// Value copy of `x` cut off from the gradient graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push("detach", shape, value, false, Op::Leaf)
            .expect("detached values are finite")
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumError> {
        same_shape(name, &self.nodes[a.0].shape, &self.nodes[b.0].shape)?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a, b]);
        self.push(name, shape, value, rg, op)
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, NumError> {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a]);
        self.push(name, shape, value, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var, NumError> {
        self.unary("scalar_mul", a, |x| s * x, Op::ScalarMul(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, NumError> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumError> {
        if let Some(&v) = self.nodes[a.0].value.iter().find(|&&v| v <= 0.0) {
            return Err(NumError::NonPositiveLog { value: v });
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, NumError> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// `log σ(x)`, finite for every finite input.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary("log_sigmoid", a, log_sigmoid, Op::LogSigmoid(a))
    }

    /// Clamps values to `[lo, hi]` but passes the gradient through unchanged.
    pub fn clamp_st(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, NumError> {
        self.unary("clamp_st", x, |v| v.clamp(lo, hi), Op::ClampStraight(x))
    }

    /// Keeps elements of the requested sign and zeroes the rest. Exact zeros
    /// are dropped under both signs and pass no gradient.
    pub fn select_sign(&mut self, a: Var, sign: Sign) -> Result<Var, NumError> {
        let keep = move |x: f64| match sign {
            Sign::Positive => x > 0.0,
            Sign::Negative => x < 0.0,
        };
        self.unary(
            "select_sign",
            a,
            move |x| if keep(x) { x } else { 0.0 },
            Op::SelectSign(a, sign),
        )
    }

    /// Sum of all elements, left to right.
    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let s = self.nodes[a.0].value.iter().fold(0.0, |acc, &x| acc + x);
        let rg = self.rg(&[a]);
        self.push("sum", vec![1], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumError> {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.nodes[a.0].value.iter().fold(0.0, |acc, &x| acc + x);
        let rg = self.rg(&[a]);
        self.push("mean", vec![1], vec![s / n], rg, Op::Mean(a))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = av[i * k + p];
                let brow = &bv[p * m..(p + 1) * m];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        self.push("matmul", vec![n, m], out, rg, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(NumError::ShapeMismatch {
                op: "transpose",
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push("transpose", vec![c, r], out, rg, Op::Transpose(a))
    }

    /// Stride-1 convolution with zero padding that preserves the spatial size.
    ///
    /// `input` is `[h, w, c_in]`, `kernel` is `[kh, kw, c_in, c_out]` with odd
    /// `kh`, `kw`. Output is `[h, w, c_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var, NumError> {
        let (si, sk) = (&self.nodes[input.0].shape, &self.nodes[kernel.0].shape);
        if si.len() != 3 || sk.len() != 4 || si[2] != sk[2] || sk[0] % 2 == 0 || sk[1] % 2 == 0 {
            return Err(NumError::ShapeMismatch {
                op: "conv2d",
                lhs: si.clone(),
                rhs: sk.clone(),
            });
        }
        let g = ConvGeom::new(si, sk);
        let out = conv_forward(&g, &self.nodes[input.0].value, &self.nodes[kernel.0].value);
        let rg = self.rg(&[input, kernel]);
        self.push(
            "conv2d",
            vec![g.h, g.w, g.cout],
            out,
            rg,
            Op::Conv2d { input, kernel },
        )
    }

    /// Adds a `[c]` bias to every row of an `[..., c]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NumError> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[b.0].shape);
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(NumError::ShapeMismatch {
                op: "add_bias",
                lhs: sx.clone(),
                rhs: sb.clone(),
            });
        }
        let c = sb[0];
        let bv = &self.nodes[b.0].value;
        let value = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % c])
            .collect();
        let shape = sx.clone();
        let rg = self.rg(&[x, b]);
        self.push("add_bias", shape, value, rg, Op::AddBias(x, b))
    }

    /// `[n, d]` and `[c, d]` to the `[n, c, d]` tensor of elementwise products
    /// `out[i, j, k] = f[i, k] * w[j, k]`.
    pub fn pairwise_mul(&mut self, f: Var, w: Var) -> Result<Var, NumError> {
        let (sf, sw) = (&self.nodes[f.0].shape, &self.nodes[w.0].shape);
        if sf.len() != 2 || sw.len() != 2 || sf[1] != sw[1] {
            return Err(NumError::ShapeMismatch {
                op: "pairwise_mul",
                lhs: sf.clone(),
                rhs: sw.clone(),
            });
        }
        let (n, c, d) = (sf[0], sw[0], sf[1]);
        let (fv, wv) = (&self.nodes[f.0].value, &self.nodes[w.0].value);
        let mut out = Vec::with_capacity(n * c * d);
        for i in 0..n {
            let fr = &fv[i * d..(i + 1) * d];
            for j in 0..c {
                let wr = &wv[j * d..(j + 1) * d];
                out.extend(fr.iter().zip(wr).map(|(a, b)| a * b));
            }
        }
        let rg = self.rg(&[f, w]);
        self.push("pairwise_mul", vec![n, c, d], out, rg, Op::PairwiseMul(f, w))
    }

    /// Sums over the last axis, left to right.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, NumError> {
        let s = &self.nodes[a.0].shape;
        if s.len() < 2 {
            return Err(NumError::ShapeMismatch {
                op: "sum_last",
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        let d = *s.last().unwrap();
        let shape = s[..s.len() - 1].to_vec();
        let value = self.nodes[a.0]
            .value
            .chunks(d)
            .map(|ch| ch.iter().fold(0.0, |acc, &x| acc + x))
            .collect();
        let rg = self.rg(&[a]);
        self.push("sum_last", shape, value, rg, Op::SumLast(a))
    }

    /// Selects entries along the first axis, in the given order.
    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumError> {
        let s = &self.nodes[x.0].shape;
        if rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(NumError::IndexOutOfRange {
                op: "gather",
                extent: s[0],
                indices: rows.to_vec(),
            });
        }
        let stride: usize = s[1..].iter().product();
        let v = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            value.extend_from_slice(&v[r * stride..(r + 1) * stride]);
        }
        let mut shape = s.clone();
        shape[0] = rows.len();
        let rg = self.rg(&[x]);
        self.push(
            "gather",
            shape,
            value,
            rg,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, NumError> {
        let s = &self.nodes[a.0].shape;
        if numel(&shape) != numel(s) || shape.contains(&0) {
            return Err(NumError::ShapeMismatch {
                op: "reshape",
                lhs: s.clone(),
                rhs: shape,
            });
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.rg(&[a]);
        self.push("reshape", shape, value, rg, Op::Reshape(a))
    }

    /// Reverse pass from a scalar `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, NumError> {
        if self.backward_done {
            return Err(NumError::BackwardTwice);
        }
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(NumError::NotScalar {
                shape: ln.shape.clone(),
            });
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !ln.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for g in grads.iter() {
            if let Some(v) = g.as_ref().and_then(|g| g.iter().find(|v| !v.is_finite())) {
                return Err(NumError::NonFinite {
                    op: "backward",
                    value: *v,
                });
            }
        }
        // Only leaves keep their gradients; intermediate buffers are dropped.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Copies the gradient for `var` into `t.grad`, accumulating additively.
    pub fn write_grad(&self, grads: &Gradients, var: Var, t: &mut Tensor) {
        if let (Some(src), Some(dst)) = (grads.get(var), t.grad_mut()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| axpy(s, g, 1.0));
                acc(*b, &mut |s| axpy(s, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| axpy(s, g, 1.0));
                acc(*b, &mut |s| axpy(s, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(bv) {
                        *s += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(av) {
                        *s += g * x;
                    }
                });
            }
            Op::ScalarMul(a, k) => acc(*a, &mut |s| axpy(s, g, *k)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |s| axpy(s, g, 1.0)),
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *s += g;
                        }
                    }
                });
            }
            Op::SelectSign(a, sign) => {
                let av = val(*a);
                let sign = *sign;
                acc(*a, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(av) {
                        let keep = match sign {
                            Sign::Positive => *x > 0.0,
                            Sign::Negative => *x < 0.0,
                        };
                        if keep {
                            *s += g;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = &node.value;
                acc(*a, &mut |s| {
                    for ((s, g), p) in s.iter_mut().zip(g).zip(out) {
                        *s += g * p * (1.0 - p);
                    }
                });
            }
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(av) {
                        *s += g / x;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for ((s, g), v) in s.iter_mut().zip(g).zip(xv) {
                        if *v >= *lo && *v <= *hi {
                            *s += g;
                        }
                    }
                });
            }
            Op::LogSigmoid(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(av) {
                        *s += g * sigmoid(-x);
                    }
                });
            }
            Op::ClampStraight(a) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }),
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    // dA = G B^T
                    acc(*a, &mut |s| {
                        for i in 0..n {
                            let gr = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let br = &bv[p * m..(p + 1) * m];
                                s[i * k + p] += gr.iter().zip(br).fold(0.0, |t, (x, y)| t + x * y);
                            }
                        }
                    });
                }
                if wants(*b) {
                    // dB = A^T G
                    acc(*b, &mut |s| {
                        for i in 0..n {
                            let gr = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let x = av[i * k + p];
                                for (o, y) in s[p * m..(p + 1) * m].iter_mut().zip(gr) {
                                    *o += x * y;
                                }
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let s0 = &nodes[a.0].shape;
                let (r, c) = (s0[0], s0[1]);
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Conv2d { input, kernel } => {
                let geom = ConvGeom::new(&nodes[input.0].shape, &nodes[kernel.0].shape);
                let (iv, kv) = (val(*input), val(*kernel));
                if wants(*input) {
                    acc(*input, &mut |s| conv_grad_input(&geom, g, kv, s));
                }
                if wants(*kernel) {
                    acc(*kernel, &mut |s| conv_grad_kernel(&geom, g, iv, s));
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |s| axpy(s, g, 1.0));
                let c = nodes[b.0].value.len();
                acc(*b, &mut |s| {
                    for row in g.chunks(c) {
                        for (o, v) in s.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::PairwiseMul(f, w) => {
                let (sf, sw) = (&nodes[f.0].shape, &nodes[w.0].shape);
                let (n, c, d) = (sf[0], sw[0], sf[1]);
                let (fv, wv) = (val(*f), val(*w));
                acc(*f, &mut |s| {
                    for i in 0..n {
                        for j in 0..c {
                            let gr = &g[(i * c + j) * d..(i * c + j + 1) * d];
                            let wr = &wv[j * d..(j + 1) * d];
                            for ((o, gg), ww) in s[i * d..(i + 1) * d].iter_mut().zip(gr).zip(wr) {
                                *o += gg * ww;
                            }
                        }
                    }
                });
                acc(*w, &mut |s| {
                    for i in 0..n {
                        let fr = &fv[i * d..(i + 1) * d];
                        for j in 0..c {
                            let gr = &g[(i * c + j) * d..(i * c + j + 1) * d];
                            for ((o, gg), ff) in s[j * d..(j + 1) * d].iter_mut().zip(gr).zip(fr) {
                                *o += gg * ff;
                            }
                        }
                    }
                });
            }
            Op::SumLast(a) => {
                let d = *nodes[a.0].shape.last().unwrap();
                acc(*a, &mut |s| {
                    for (chunk, gv) in s.chunks_mut(d).zip(g) {
                        chunk.iter_mut().for_each(|o| *o += gv);
                    }
                });
            }
            Op::Gather { x, rows } => {
                let stride = g.len() / rows.len();
                acc(*x, &mut |s| {
                    for (k, &r) in rows.iter().enumerate() {
                        for (o, v) in s[r * stride..(r + 1) * stride]
                            .iter_mut()
                            .zip(&g[k * stride..(k + 1) * stride])
                        {
                            *o += v;
                        }
                    }
                });
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn new(si: &[usize], sk: &[usize]) -> Self {
        Self {
            h: si[0],
            w: si[1],
            cin: si[2],
            kh: sk[0],
            kw: sk[1],
            cout: sk[3],
        }
    }

    /// Calls `f(out_pixel, in_pixel, tap)` for every valid (output, tap) pair.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        for y in 0..self.h {
            for x in 0..self.w {
                let out_px = y * self.w + x;
                for ky in 0..self.kh {
                    let iy = y as isize + ky as isize - ph;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = x as isize + kx as isize - pw;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        f(out_px, iy as usize * self.w + ix as usize, ky * self.kw + kx);
                    }
                }
            }
        }
    }
}

fn conv_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (cin, cout) = (g.cin, g.cout);
    let mut out = vec![0.0; g.h * g.w * cout];
    g.for_each_tap(|o, i, t| {
        let orow = &mut out[o * cout..(o + 1) * cout];
        let ipx = &input[i * cin..(i + 1) * cin];
        let kt = &kernel[t * cin * cout..(t + 1) * cin * cout];
        for (ci, &v) in ipx.iter().enumerate() {
            for (acc, &k) in orow.iter_mut().zip(&kt[ci * cout..(ci + 1) * cout]) {
                *acc += v * k;
            }
        }
    });
    out
}

fn conv_grad_input(g: &ConvGeom, gout: &[f64], kernel: &[f64], dinput: &mut [f64]) {
    let (cin, cout) = (g.cin, g.cout);
    g.for_each_tap(|o, i, t| {
        let grow = &gout[o * cout..(o + 1) * cout];
        let kt = &kernel[t * cin * cout..(t + 1) * cin * cout];
        for (ci, d) in dinput[i * cin..(i + 1) * cin].iter_mut().enumerate() {
            *d += grow
                .iter()
                .zip(&kt[ci * cout..(ci + 1) * cout])
                .fold(0.0, |s, (a, b)| s + a * b);
        }
    });
}

fn conv_grad_kernel(g: &ConvGeom, gout: &[f64], input: &[f64], dkernel: &mut [f64]) {
    let (cin, cout) = (g.cin, g.cout);
    g.for_each_tap(|o, i, t| {
        let grow = &gout[o * cout..(o + 1) * cout];
        let ipx = &input[i * cin..(i + 1) * cin];
        let kt = &mut dkernel[t * cin * cout..(t + 1) * cin * cout];
        for (ci, &v) in ipx.iter().enumerate() {
            for (d, &gg) in kt[ci * cout..(ci + 1) * cout].iter_mut().zip(grow) {
                *d += v * gg;
            }
        }
    });
}
