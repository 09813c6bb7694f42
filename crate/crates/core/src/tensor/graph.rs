use super::kernels::{self, ConvGeom};
use super::{dims2, dims4, window_out, Precision, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Relu {
        input: NodeId,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    Reshape {
        input: NodeId,
    },
    Softmax {
        input: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum {
        input: NodeId,
    },
    WeightedSum {
        input: NodeId,
        weights: Vec<T>,
    },
    Scale {
        input: NodeId,
        factor: T,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    SliceCols {
        input: NodeId,
        start: usize,
        end: usize,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of executed operations for one forward pass, consumed by one
/// backward pass.
///
/// Precision is the element type: `Graph<f32>` trains, `Graph<f64>` verifies.
#[derive(Debug)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<NodeId> {
        if self.consumed {
            return Err(Error::Usage("graph already consumed by backward".into()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    /// Records a leaf. It receives a gradient iff `tensor.requires_grad`.
    pub fn input(&mut self, mut tensor: Tensor<T>) -> NodeId {
        let needs_grad = tensor.requires_grad;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, needs_grad)
            .expect("leaf recorded on a live graph")
    }

    /// Records a copy of `tensor` as a leaf.
    pub fn input_ref(&mut self, tensor: &Tensor<T>) -> NodeId {
        let mut t = Tensor::from_vec(tensor.shape(), tensor.data().to_vec()).expect("valid tensor");
        t.requires_grad = tensor.requires_grad;
        self.input(t)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.node(id).value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.node(id).value.shape()
    }

    /// Gradient of the last backward's loss with respect to `id`, if it had one.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Like [`grad`](Self::grad) but zero-filled for nodes that were unreachable
    /// from the loss.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor<T> {
        let shape = self.shape(id);
        match self.grad(id) {
            Some(g) => Tensor::from_vec(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Writes the gradient for `id` into `tensor.grad`.
    pub fn write_grad(&self, id: NodeId, tensor: &mut Tensor<T>) -> Result<()> {
        if tensor.shape() != self.shape(id) {
            return Err(Error::shape(format!(
                "gradient shape {:?} does not match tensor {:?}",
                self.shape(id),
                tensor.shape()
            )));
        }
        tensor.grad = Some(self.grad_or_zeros(id).into_data());
        Ok(())
    }

    fn any_needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.node(i).needs_grad)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let [n, cin, h, w] = dims4(self.shape(input))?;
        let [cout, wcin, kh, kw] = dims4(self.shape(weight))?;
        if cin != wcin {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input {:?} vs weight {:?}",
                self.shape(input),
                self.shape(weight)
            )));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::shape(format!(
                "conv2d bias {:?} does not match {cout} output channels",
                self.shape(bias)
            )));
        }
        let (ho, wo) = match (
            window_out(h, kh, stride, padding),
            window_out(w, kw, stride, padding),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d kernel {kh}x{kw} (stride {stride}, padding {padding}) does not fit input {:?}",
                    self.shape(input)
                )))
            }
        };
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            ho,
            wo,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let needs = self.any_needs_grad(&[input, weight, bias]);
        self.push(
            Tensor::from_vec(&[n, cout, ho, wo], out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            needs,
        )
    }

    pub fn maxpool2d(&mut self, input: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let [n, c, h, w] = dims4(self.shape(input))?;
        let (ho, wo) = match (window_out(h, kernel, stride, 0), window_out(w, kernel, stride, 0)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::shape(format!(
                    "maxpool2d kernel {kernel} (stride {stride}) larger than spatial extent of {:?}",
                    self.shape(input)
                )))
            }
        };
        let (out, argmax) =
            kernels::maxpool_forward(self.value(input).data(), n * c, h, w, kernel, stride, ho, wo);
        let needs = self.any_needs_grad(&[input]);
        self.push(
            Tensor::from_vec(&[n, c, ho, wo], out)?,
            Op::MaxPool2d { input, argmax },
            needs,
        )
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let out = x
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let value = Tensor::from_vec(x.shape(), out)?;
        let needs = self.any_needs_grad(&[input]);
        self.push(value, Op::Relu { input }, needs)
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let [n, din] = dims2(self.shape(input))?;
        let [dout, wdin] = dims2(self.shape(weight))?;
        if din != wdin || self.shape(bias) != [dout] {
            return Err(Error::shape(format!(
                "linear mismatch: input {:?}, weight {:?}, bias {:?}",
                self.shape(input),
                self.shape(weight),
                self.shape(bias)
            )));
        }
        let out = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            din,
            dout,
        );
        let needs = self.any_needs_grad(&[input, weight, bias]);
        self.push(
            Tensor::from_vec(&[n, dout], out)?,
            Op::Linear {
                input,
                weight,
                bias,
            },
            needs,
        )
    }

    /// Concatenates along channels: `a` occupies `[0, Ca)`, `b` occupies `[Ca, Ca + Cb)`.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [n, ca, h, w] = dims4(self.shape(a))?;
        let [nb, cb, hb, wb] = dims4(self.shape(b))?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(format!(
                "concat_channels batch/spatial mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let plane = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
        }
        let needs = self.any_needs_grad(&[a, b]);
        self.push(
            Tensor::from_vec(&[n, ca + cb, h, w], out)?,
            Op::ConcatChannels { a, b },
            needs,
        )
    }

    /// `[N, ...] → [N, prod(...)]`.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape(input);
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(input).clone().reshape(shape)?;
        let needs = self.any_needs_grad(&[input]);
        self.push(value, Op::Reshape { input }, needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let value = super::softmax(self.value(input));
        let needs = self.any_needs_grad(&[input]);
        self.push(value, Op::Softmax { input }, needs)
    }

    /// Mean over the batch of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let [n, k] = dims2(self.shape(logits))?;
        if targets.len() != n {
            return Err(Error::validation(format!(
                "cross_entropy got {} targets for a batch of {n}",
                targets.len()
            )));
        }
        if let Some((pos, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= k) {
            return Err(Error::validation(format!(
                "target {t} at position {pos} out of range for {k} classes"
            )));
        }
        let x = self.value(logits).data();
        let mut total = T::zero();
        for (row, &t) in x.chunks(k).zip(targets) {
            total += kernels::log_sum_exp(row) - row[t];
        }
        let loss = total / T::from_usize(n).unwrap();
        let mut probs = x.to_vec();
        for row in probs.chunks_mut(k) {
            kernels::softmax_in_place(row);
        }
        let needs = self.any_needs_grad(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        )
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let s: T = self.value(input).data().iter().copied().sum();
        let needs = self.any_needs_grad(&[input]);
        self.push(Tensor::scalar(s), Op::Sum { input }, needs)
    }

    /// `Σ weights ⊙ input` with constant weights.
    pub fn weighted_sum(&mut self, input: NodeId, weights: &[T]) -> Result<NodeId> {
        let x = self.value(input).data();
        if x.len() != weights.len() {
            return Err(Error::shape(format!(
                "weighted_sum: {} weights for {} values",
                weights.len(),
                x.len()
            )));
        }
        let s: T = x.iter().zip(weights).map(|(&a, &b)| a * b).sum();
        let needs = self.any_needs_grad(&[input]);
        self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
            needs,
        )
    }

    pub fn scale(&mut self, input: NodeId, factor: T) -> Result<NodeId> {
        let x = self.value(input);
        let value = Tensor::from_vec(x.shape(), x.data().iter().map(|&v| v * factor).collect())?;
        let needs = self.any_needs_grad(&[input]);
        self.push(value, Op::Scale { input, factor }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        let needs = self.any_needs_grad(&[a, b]);
        self.push(value, Op::Add { a, b }, needs)
    }

    /// Columns `[start, end)` of an `[N, D]` tensor.
    pub fn slice_cols(&mut self, input: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let [n, d] = dims2(self.shape(input))?;
        if start >= end || end > d {
            return Err(Error::shape(format!(
                "column range {start}..{end} out of bounds for {:?}",
                self.shape(input)
            )));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * (end - start));
        for row in x.chunks(d) {
            out.extend_from_slice(&row[start..end]);
        }
        let needs = self.any_needs_grad(&[input]);
        self.push(
            Tensor::from_vec(&[n, end - start], out)?,
            Op::SliceCols { input, start, end },
            needs,
        )
    }

    /// Reverse pass from a one-element `loss`. Consumes the graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage(
                "backward called twice on the same graph".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(dy);
                continue;
            }
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        // nodes without requires_grad ancestry never hold gradients
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    dy,
                    needs(*input),
                );
                if needs(*input) {
                    accumulate(grads, *input, dx);
                }
                accumulate(grads, *weight, dw);
                accumulate(grads, *bias, db);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (&src, &g) in argmax.iter().zip(dy) {
                    dx[src] += g;
                }
                accumulate(grads, *input, dx);
            }
            Op::Relu { input } => {
                let dx = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(grads, *input, dx);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let [n, din] = dims2(self.shape(*input)).expect("checked in forward");
                let dout = self.shape(*weight)[0];
                let (dx, dw, db) = kernels::linear_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    dy,
                    n,
                    din,
                    dout,
                    needs(*input),
                );
                if needs(*input) {
                    accumulate(grads, *input, dx);
                }
                accumulate(grads, *weight, dw);
                accumulate(grads, *bias, db);
            }
            Op::ConcatChannels { a, b } => {
                let [n, ca, h, w] = dims4(self.shape(*a)).expect("checked in forward");
                let cb = self.shape(*b)[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for row in dy.chunks((ca + cb) * plane) {
                    da.extend_from_slice(&row[..ca * plane]);
                    db.extend_from_slice(&row[ca * plane..]);
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Reshape { input } => accumulate(grads, *input, dy.to_vec()),
            Op::Softmax { input } => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(k).zip(dy.chunks(k)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                accumulate(grads, *input, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let k = probs.len() / n;
                let scale = dy[0] / T::from_usize(n).unwrap();
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * k + t] -= scale;
                }
                accumulate(grads, *logits, dx);
            }
            Op::Sum { input } => {
                let len = self.value(*input).len();
                accumulate(grads, *input, vec![dy[0]; len]);
            }
            Op::WeightedSum { input, weights } => {
                accumulate(grads, *input, weights.iter().map(|&w| w * dy[0]).collect());
            }
            Op::Scale { input, factor } => {
                accumulate(grads, *input, dy.iter().map(|&g| g * *factor).collect());
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, dy.to_vec());
                accumulate(grads, *b, dy.to_vec());
            }
            Op::SliceCols { input, start, end } => {
                let d = self.shape(*input)[1];
                let width = end - start;
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (row, g) in dx.chunks_mut(d).zip(dy.chunks(width)) {
                    row[*start..*end].copy_from_slice(g);
                }
                accumulate(grads, *input, dx);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, delta: Vec<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
