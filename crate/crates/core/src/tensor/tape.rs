use super::kernels::{self, ConvGeom, ConvGrads};
use super::{shape_err, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Relu(Var),
    Sigmoid(Var),
    LogClamped(Var, T),
    Square(Var),
    Powf(Var, T),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    MaxPool3(Var, Vec<usize>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    ChannelSoftmax(Var),
    SumChannels(Var),
    Gather(Var, Vec<usize>),
    ConcatChannels(Vec<Var>),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Records tensor operations in execution order and replays them backwards.
///
/// Values are owned by the tape; a [`Var`] is only meaningful for the tape that
/// produced it. One tape serves one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if cfg!(debug_assertions) && !value.iter().all(|v| v.is_finite()) {
            let inputs_finite = self.inputs_of(&op).iter().all(|v| self.nodes[v.0].value.iter().all(|x| x.is_finite()));
            debug_assert!(!inputs_finite, "non-finite output from finite inputs in {op:?}");
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Affine(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::LogClamped(a, _)
            | Op::Square(a)
            | Op::Powf(a, _)
            | Op::Abs(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MaxPool3(a, _)
            | Op::Upsample2x(a)
            | Op::ChannelSoftmax(a)
            | Op::SumChannels(a)
            | Op::Gather(a, _) => vec![*a],
            Op::Conv2d { input, weight, bias, .. } => vec![*input, *weight, *bias],
            Op::ConcatChannels(vs) => vs.clone(),
        }
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    /// Records a copy of `tensor`; gradients are tracked if the tensor requires them.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, tensor.requires_grad())
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    pub fn item(&self, v: Var) -> T {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "item() on non-scalar node of shape {:?}", n.shape);
        n.value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient of the last backward pass for a leaf that requires grad.
    ///
    /// Leaves the loss did not reach get an all-zero gradient.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let n = self.node(a);
        let value = n.value.iter().map(|&x| f(x)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, op, rg)
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>, bool), TensorError> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape {
            return Err(shape_err(op_name, "shape", format!("{:?} vs {:?}", na.shape, nb.shape)));
        }
        let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        Ok((na.shape.clone(), value, na.requires_grad || nb.requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (s, v, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(s, v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (s, v, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(s, v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (s, v, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(s, v, Op::Mul(a, b), rg))
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        self.unary(a, Op::Affine(a, scale), |x| scale * x + shift)
    }

    pub fn scalar_mul(&mut self, a: Var, s: T) -> Var {
        self.affine(a, s, T::zero())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        })
    }

    /// `log(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, eps: T) -> Result<Var, TensorError> {
        if eps.is_nan() || eps <= T::zero() {
            return Err(TensorError::Argument {
                op: "log_clamped",
                detail: format!("eps must be > 0, got {eps}"),
            });
        }
        Ok(self.unary(a, Op::LogClamped(a, eps), |x| x.max(eps).ln()))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `x^p` for `x ≥ 0`.
    pub fn powf(&mut self, a: Var, p: T) -> Var {
        self.unary(a, Op::Powf(a, p), |x| x.powf(p))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let s = n.value.iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = n.requires_grad;
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let s = n.value.iter().fold(T::zero(), |acc, &x| acc + x);
        let count = T::from_usize(n.value.len().max(1)).unwrap();
        let rg = n.requires_grad;
        self.push(vec![], vec![s / count], Op::Mean(a), rg)
    }

    fn expect_rank4(&self, op: &'static str, a: Var) -> Result<[usize; 4], TensorError> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(shape_err(op, "rank", format!("expected NCHW, got {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// 3×3 max filter with stride 1 and −∞ padding; output keeps the spatial size.
    pub fn max_pool3x3(&mut self, a: Var) -> Result<Var, TensorError> {
        self.expect_rank4("max_pool3x3", a)?;
        let n = self.node(a);
        let (value, arg) = kernels::max_pool3x3_raw(&n.shape, &n.value);
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, value, Op::MaxPool3(a, arg), rg))
    }

    /// 2-d cross-correlation over NCHW input with an `O×C×k×k` weight and `O` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.expect_rank4("conv2d", input)?;
        let ws = self.shape(weight).to_vec();
        if ws.len() != 4 {
            return Err(shape_err("conv2d", "weight rank", format!("expected O×C×k×k, got {ws:?}")));
        }
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(shape_err("conv2d", "input channels", format!("input has {c}, weight expects {wc}")));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(shape_err("conv2d", "kernel", format!("kernel must be square and odd, got {kh}×{kw}")));
        }
        if self.shape(bias) != [o] {
            return Err(shape_err("conv2d", "bias", format!("expected [{o}], got {:?}", self.shape(bias))));
        }
        if stride == 0 {
            return Err(TensorError::Argument {
                op: "conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        let (ho, wo) = match (
            kernels::conv_output_size(h, kh, stride, padding),
            kernels::conv_output_size(w, kw, stride, padding),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(shape_err("conv2d", "spatial", format!("{h}×{w} input too small for kernel {kh} with padding {padding}"))),
        };
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            o,
            k: kh,
            stride,
            pad: padding,
            ho,
            wo,
        };
        let value = kernels::conv2d_forward(&geom, self.data(input), self.data(weight), self.data(bias));
        let rg = self.requires_grad(input) || self.requires_grad(weight) || self.requires_grad(bias);
        Ok(self.push(vec![n, o, ho, wo], value, Op::Conv2d { input, weight, bias, geom }, rg))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.expect_rank4("upsample2x", a)?;
        let value = kernels::upsample2x_raw(self.shape(a), self.data(a));
        let rg = self.requires_grad(a);
        Ok(self.push(vec![n, c, 2 * h, 2 * w], value, Op::Upsample2x(a), rg))
    }

    /// Softmax across the channel axis, independently per pixel.
    pub fn channel_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let [_, c, _, _] = self.expect_rank4("channel_softmax", a)?;
        if c == 0 {
            return Err(shape_err("channel_softmax", "channels", "need at least one channel"));
        }
        let value = kernels::channel_softmax_raw(self.shape(a), self.data(a));
        let (shape, rg) = (self.shape(a).to_vec(), self.requires_grad(a));
        Ok(self.push(shape, value, Op::ChannelSoftmax(a), rg))
    }

    /// Sums NCHW over C, giving N×1×H×W.
    pub fn sum_channels(&mut self, a: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.expect_rank4("sum_channels", a)?;
        let plane = h * w;
        let src = self.data(a);
        let mut value = vec![T::zero(); n * plane];
        for b in 0..n {
            for ch in 0..c {
                let row = &src[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                for (d, &s) in value[b * plane..(b + 1) * plane].iter_mut().zip(row) {
                    *d = *d + s;
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(vec![n, 1, h, w], value, Op::SumChannels(a), rg))
    }

    /// Picks flat elements of `a` into a 1-d tensor.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var, TensorError> {
        let src = self.data(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(shape_err("gather", "index", format!("index {bad} out of bounds for {} elements", src.len())));
        }
        let value = indices.iter().map(|&i| src[i]).collect();
        let rg = self.requires_grad(a);
        Ok(self.push(vec![indices.len()], value, Op::Gather(a, indices), rg))
    }

    /// Concatenates NCHW tensors along C.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_channels", "inputs", "nothing to concatenate"));
        };
        let [n, _, h, w] = self.expect_rank4("concat_channels", first)?;
        let mut total_c = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.expect_rank4("concat_channels", p)?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err("concat_channels", "batch/spatial", format!("{:?} vs {:?}", self.shape(p), self.shape(first))));
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut value = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &p in parts {
                let pc = self.shape(p)[1];
                value.extend_from_slice(&self.data(p)[b * pc * plane..(b + 1) * pc * plane]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(vec![n, total_c, h, w], value, Op::ConcatChannels(parts.to_vec()), rg))
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Afterwards every leaf that requires grad holds a gradient (zeros when the loss
    /// does not depend on it). Gradients from multiple uses of a value accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::BackwardTwice);
        }
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        if !ln.requires_grad {
            return Err(TensorError::DetachedLoss);
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                node.grad = Some(g.unwrap_or_else(|| vec![T::zero(); node.value.len()]));
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let y = &node.value;
        // accumulate into the gradient buffer of `v`, allocating on first use
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            let target = &nodes[v.0];
            if !target.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); target.value.len()]);
            f(buf);
        };
        let zip_acc = |grads: &mut [Option<Vec<T>>], v: Var, f: &dyn Fn(usize) -> T| {
            acc(grads, v, &mut |buf| {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = *b + f(j);
                }
            })
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                zip_acc(grads, *a, &|j| g[j]);
                zip_acc(grads, *b, &|j| g[j]);
            }
            Op::Sub(a, b) => {
                zip_acc(grads, *a, &|j| g[j]);
                zip_acc(grads, *b, &|j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                zip_acc(grads, *a, &|j| g[j] * vb[j]);
                zip_acc(grads, *b, &|j| g[j] * va[j]);
            }
            Op::Affine(a, s) => zip_acc(grads, *a, &|j| g[j] * *s),
            Op::Relu(a) => {
                let x = &nodes[a.0].value;
                zip_acc(grads, *a, &|j| if x[j] > T::zero() { g[j] } else { T::zero() });
            }
            Op::Sigmoid(a) => zip_acc(grads, *a, &|j| g[j] * y[j] * (T::one() - y[j])),
            Op::LogClamped(a, eps) => {
                let x = &nodes[a.0].value;
                zip_acc(grads, *a, &|j| if x[j] > *eps { g[j] / x[j] } else { T::zero() });
            }
            Op::Square(a) => {
                let x = &nodes[a.0].value;
                let two = T::lit(2.0);
                zip_acc(grads, *a, &|j| g[j] * two * x[j]);
            }
            Op::Powf(a, p) => {
                let x = &nodes[a.0].value;
                zip_acc(grads, *a, &|j| {
                    if *p == T::one() {
                        g[j]
                    } else if x[j] == T::zero() && *p > T::one() {
                        T::zero()
                    } else {
                        g[j] * *p * x[j].powf(*p - T::one())
                    }
                });
            }
            Op::Abs(a) => {
                let x = &nodes[a.0].value;
                zip_acc(grads, *a, &|j| {
                    if x[j] > T::zero() {
                        g[j]
                    } else if x[j] < T::zero() {
                        -g[j]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Sum(a) => zip_acc(grads, *a, &|_| g[0]),
            Op::Mean(a) => {
                let count = T::from_usize(nodes[a.0].value.len().max(1)).unwrap();
                let gm = g[0] / count;
                zip_acc(grads, *a, &|_| gm);
            }
            Op::MaxPool3(a, arg) => acc(grads, *a, &mut |buf| {
                for (j, &src) in arg.iter().enumerate() {
                    buf[src] = buf[src] + g[j];
                }
            }),
            Op::Conv2d { input, weight, bias, geom } => {
                let mut gi = take_if_needed(grads, nodes, *input);
                let mut gw = take_if_needed(grads, nodes, *weight);
                let mut gb = take_if_needed(grads, nodes, *bias);
                kernels::conv2d_backward(
                    geom,
                    &nodes[input.0].value,
                    &nodes[weight.0].value,
                    g,
                    ConvGrads {
                        input: gi.as_deref_mut(),
                        weight: gw.as_deref_mut(),
                        bias: gb.as_deref_mut(),
                    },
                );
                for (v, buf) in [(*input, gi), (*weight, gw), (*bias, gb)] {
                    if let Some(buf) = buf {
                        grads[v.0] = Some(buf);
                    }
                }
            }
            Op::Upsample2x(a) => {
                let shape = &nodes[a.0].shape;
                acc(grads, *a, &mut |buf| kernels::upsample2x_backward(shape, g, buf));
            }
            Op::ChannelSoftmax(a) => acc(grads, *a, &mut |buf| kernels::channel_softmax_backward(&node.shape, y, g, buf)),
            Op::SumChannels(a) => {
                let s = &nodes[a.0].shape;
                let (c, plane) = (s[1], s[2] * s[3]);
                acc(grads, *a, &mut |buf| {
                    for (j, b) in buf.iter_mut().enumerate() {
                        let (batch, p) = (j / (c * plane), j % plane);
                        *b = *b + g[batch * plane + p];
                    }
                });
            }
            Op::Gather(a, idx) => acc(grads, *a, &mut |buf| {
                for (j, &src) in idx.iter().enumerate() {
                    buf[src] = buf[src] + g[j];
                }
            }),
            Op::ConcatChannels(parts) => {
                let s = &node.shape;
                let (n, total_c, plane) = (s[0], s[1], s[2] * s[3]);
                let mut offset = 0;
                for &p in parts {
                    let pc = nodes[p.0].shape[1];
                    acc(grads, p, &mut |buf| {
                        for b in 0..n {
                            let src = &g[(b * total_c + offset) * plane..(b * total_c + offset + pc) * plane];
                            for (d, &v) in buf[b * pc * plane..(b + 1) * pc * plane].iter_mut().zip(src) {
                                *d = *d + v;
                            }
                        }
                    });
                    offset += pc;
                }
            }
        }
    }
}

fn take_if_needed<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].take().unwrap_or_else(|| vec![T::zero(); node.value.len()]))
}
