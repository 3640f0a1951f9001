use super::conv::{self, ConvGeom};
use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, T),
    Concat(Var, Var),
    Narrow {
        input: Var,
        start: usize,
    },
    ScaleChannel {
        input: Var,
        weights: Var,
    },
    MeanAll(Var),
    MeanSpatial(Var),
    SmoothL1 {
        pred: Var,
        target: Var,
    },
    SquaredError {
        a: Var,
        b: Var,
    },
    InvertHaze {
        hazy: Var,
        transmission: Var,
        airlight: Var,
        floor: T,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            }
            | Op::ConvTranspose2d {
                input, weight, bias, ..
            } => {
                vec![input, weight, bias]
            }
            Op::Relu(x) | Op::Sigmoid(x) | Op::Scale(x, _) | Op::MeanAll(x) | Op::MeanSpatial(x) => vec![x],
            Op::Narrow { input, .. } => vec![input],
            Op::Add(a, b) | Op::Concat(a, b) => vec![a, b],
            Op::ScaleChannel { input, weights } => vec![input, weights],
            Op::SmoothL1 { pred, target } => vec![pred, target],
            Op::SquaredError { a, b } => vec![a, b],
            Op::InvertHaze {
                hazy,
                transmission,
                airlight,
                ..
            } => vec![hazy, transmission, airlight],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; only tracked leaves keep one.
    grad: Option<Tensor<T>>,
}

/// Append-only tape of tensor operations.
///
/// Nodes are recorded in creation order, so the tape is a DAG whose reverse
/// order is a valid backward schedule. Leaves created with
/// [`Graph::param`] are tracked: [`Graph::backward`] adds into their
/// gradient buffers, so two backward calls without [`Graph::zero_grads`]
/// leave twice the gradient. Interior gradients are transient.
#[derive(Clone, Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{a} vs {b}")))
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Which side of its breakpoint every element of every piecewise op
    /// lies on: relu inputs above zero, smooth L1 errors inside the
    /// quadratic zone, transmissions above the floor. Two evaluations with
    /// equal patterns lie in the same smooth piece of the function.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => out.extend(self.value(x).data().iter().map(|&v| v > T::zero())),
                Op::SmoothL1 { pred, target } => out.extend(
                    self.value(pred)
                        .data()
                        .iter()
                        .zip(self.value(target).data())
                        .map(|(&p, &t)| (p - t).abs() < T::one()),
                ),
                Op::InvertHaze {
                    transmission, floor, ..
                } => out.extend(self.value(transmission).data().iter().map(|&t| t > floor)),
                _ => {}
            }
        }
        out
    }

    /// Untracked leaf (inputs, targets, frozen weights).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf whose gradient is kept after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let shape = value.shape();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            grad: Some(Tensor::zeros(shape)),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().fill(T::zero());
            }
        }
    }

    fn conv_geom(
        &self,
        op: &'static str,
        input: Shape,
        weight: Shape,
        stride: usize,
        padding: usize,
    ) -> Result<ConvGeom> {
        if weight.h != weight.w {
            return Err(Error::shape(op, format!("kernel must be square, got {weight}")));
        }
        if stride == 0 {
            return Err(Error::shape(op, "stride must be at least 1"));
        }
        let k = weight.h;
        let oh = ConvGeom::out_dim(input.h, k, stride, padding);
        let ow = ConvGeom::out_dim(input.w, k, stride, padding);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(ConvGeom {
                c_in: weight.c,
                h: input.h,
                w: input.w,
                c_out: weight.n,
                k,
                stride,
                pad: padding,
                oh,
                ow,
            }),
            _ => Err(Error::shape(
                op,
                format!(
                    "{}x{} input is smaller than a {k}x{k} kernel with padding {padding}",
                    input.h, input.w
                ),
            )),
        }
    }

    /// Cross-correlation with `weight` laid out `(c_out, c_in, k, k)` and a
    /// `(1, c_out, 1, 1)` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.c != ws.c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but weight {ws} expects {}", xs.c, ws.c),
            ));
        }
        if bs.numel() != ws.n {
            return Err(Error::shape(
                "conv2d",
                format!("bias {bs} for {} output channels", ws.n),
            ));
        }
        let geom = self.conv_geom("conv2d", xs, ws, stride, padding)?;
        let out = conv::conv2d_forward(
            &geom,
            xs.n,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::from_vec(Shape::new(xs.n, geom.c_out, geom.oh, geom.ow), out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] with the
    /// same weight. `weight` is `(c_in, c_out, k, k)` from this op's point of
    /// view; output extent is `(h - 1) * stride - 2 * padding + k + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.c != ws.n {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {} channels but weight {ws} expects {}", xs.c, ws.n),
            ));
        }
        if bs.numel() != ws.c {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("bias {bs} for {} output channels", ws.c),
            ));
        }
        if stride == 0 || output_padding >= stride {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("output padding {output_padding} must be smaller than stride {stride}"),
            ));
        }
        let k = ws.h;
        let extent = |len: usize| ((len - 1) * stride + k + output_padding).checked_sub(2 * padding);
        if xs.h == 0 || xs.w == 0 {
            return Err(Error::shape("conv_transpose2d", format!("empty input {xs}")));
        }
        let (h, w) = match (extent(xs.h), extent(xs.w)) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => return Err(Error::shape("conv_transpose2d", format!("empty output for input {xs}"))),
        };
        let geom = self.conv_geom("conv_transpose2d", Shape::new(xs.n, ws.c, h, w), ws, stride, padding)?;
        debug_assert_eq!((geom.oh, geom.ow), (xs.h, xs.w));
        let out = conv::conv_transpose_forward(
            &geom,
            xs.n,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::from_vec(Shape::new(xs.n, ws.c, h, w), out)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(value, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let mut value = self.value(a).clone();
        for (o, &v) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor))
    }

    /// Channel-axis concatenation of `a` then `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::shape("concat_channels", format!("{sa} vs {sb}")));
        }
        let shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut data = Vec::with_capacity(shape.numel());
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for n in 0..sa.n {
            data.extend_from_slice(&da[n * sa.item_len()..(n + 1) * sa.item_len()]);
            data.extend_from_slice(&db[n * sb.item_len()..(n + 1) * sb.item_len()]);
        }
        let value = Tensor::from_vec(shape, data)?;
        Ok(self.push(value, Op::Concat(a, b)))
    }

    /// Channels `[start, start + len)`.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if len == 0 || start + len > s.c {
            return Err(Error::shape(
                "narrow_channels",
                format!("channels {start}..{} out of {}", start + len, s.c),
            ));
        }
        let shape = Shape::new(s.n, len, s.h, s.w);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..s.n {
            let base = n * s.item_len() + start * s.plane();
            data.extend_from_slice(&src[base..base + len * s.plane()]);
        }
        let value = Tensor::from_vec(shape, data)?;
        Ok(self.push(value, Op::Narrow { input: x, start }))
    }

    /// Multiply channel `i` of every item by `weights[i]`. A single weight
    /// is broadcast to all channels.
    pub fn scale_channel(&mut self, x: Var, weights: Var) -> Result<Var> {
        let s = self.shape(x);
        let wn = self.shape(weights).numel();
        if wn != s.c && wn != 1 {
            return Err(Error::shape(
                "scale_channel",
                format!("{wn} weights for {} channels", s.c),
            ));
        }
        let w = self.value(weights).data().to_vec();
        let mut value = self.value(x).clone();
        let plane = s.plane();
        for (i, chunk) in value.data_mut().chunks_mut(plane).enumerate() {
            let a = if wn == 1 { w[0] } else { w[i % s.c] };
            for v in chunk {
                *v *= a;
            }
        }
        Ok(self.push(value, Op::ScaleChannel { input: x, weights }))
    }

    /// Mean of every element, as a `(1, 1, 1, 1)` tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mean = t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64);
        self.push(Tensor::scalar(mean), Op::MeanAll(x))
    }

    /// Per-item, per-channel spatial mean: `(n, c, h, w) -> (n, c, 1, 1)`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let plane = T::lit(s.plane() as f64);
        let data = self
            .value(x)
            .data()
            .chunks(s.plane())
            .map(|c| c.iter().copied().sum::<T>() / plane)
            .collect();
        let value = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("shape");
        self.push(value, Op::MeanSpatial(x))
    }

    /// Smooth L1 (Huber with unit threshold) summed over channels, averaged
    /// over pixels and batch items.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        let s = self.shape(pred);
        same_shape("smooth_l1", s, self.shape(target))?;
        let half = T::lit(0.5);
        let total: T = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| {
                let e = (p - t).abs();
                if e < T::one() {
                    half * e * e
                } else {
                    e - half
                }
            })
            .sum();
        let value = Tensor::scalar(total / T::lit((s.n * s.plane()) as f64));
        Ok(self.push(value, Op::SmoothL1 { pred, target }))
    }

    /// Mean of squared differences over all elements.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a);
        same_shape("squared_error", s, self.shape(b))?;
        let total: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(total / T::lit(s.numel() as f64));
        Ok(self.push(value, Op::SquaredError { a, b }))
    }

    /// Haze-model inversion `(I - A (1 - t')) / t'` with `t' = max(t, floor)`.
    /// `transmission` is `(n, 1, h, w)` and `airlight` is `(n, 1, 1, 1)`;
    /// the result is not clamped so gradients stay alive out of gamut.
    pub fn invert_haze(&mut self, hazy: Var, transmission: Var, airlight: Var, floor: T) -> Result<Var> {
        let (hs, ts, as_) = (self.shape(hazy), self.shape(transmission), self.shape(airlight));
        if ts != Shape::new(hs.n, 1, hs.h, hs.w) || as_ != Shape::new(hs.n, 1, 1, 1) {
            return Err(Error::shape(
                "invert_haze",
                format!("image {hs}, transmission {ts}, airlight {as_}"),
            ));
        }
        let (i, t, a) = (self.value(hazy), self.value(transmission), self.value(airlight));
        let value = Tensor::from_fn(hs, |n, c, y, x| {
            let tt = t.at(n, 0, y, x).max(floor);
            let aa = a.data()[n];
            (i.at(n, c, y, x) - aa * (T::one() - tt)) / tt
        });
        Ok(self.push(
            value,
            Op::InvertHaze {
                hazy,
                transmission,
                airlight,
                floor,
            },
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`, adding into the gradients of
    /// tracked leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {ls}")));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if let Some(acc) = self.nodes[id].grad.as_mut() {
                    for (a, v) in acc.data_mut().iter_mut().zip(g) {
                        *a += v;
                    }
                }
                continue;
            }
            for (input, contribution) in self.local_grads(id, &g) {
                match grads[input.0].as_mut() {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(contribution) {
                            *a += v;
                        }
                    }
                    None => grads[input.0] = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for each input that needs one.
    fn local_grads(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                ref geom,
            } => {
                let n = self.shape(input).n;
                let r = conv::conv2d_backward(
                    geom,
                    n,
                    val(input),
                    val(weight),
                    g,
                    [needs(input), needs(weight), needs(bias)],
                );
                out.extend(r.dx.map(|d| (input, d)));
                out.extend(r.dw.map(|d| (weight, d)));
                out.extend(r.db.map(|d| (bias, d)));
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                ref geom,
            } => {
                let n = self.shape(input).n;
                let r = conv::conv_transpose_backward(
                    geom,
                    n,
                    val(input),
                    val(weight),
                    g,
                    [needs(input), needs(weight), needs(bias)],
                );
                out.extend(r.dx.map(|d| (input, d)));
                out.extend(r.dw.map(|d| (weight, d)));
                out.extend(r.db.map(|d| (bias, d)));
            }
            Op::Relu(x) => {
                let d = val(x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((x, d));
            }
            Op::Sigmoid(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (T::one() - s))
                    .collect();
                out.push((x, d));
            }
            Op::Add(a, b) => {
                if needs(a) {
                    out.push((a, g.to_vec()));
                }
                if needs(b) {
                    out.push((b, g.to_vec()));
                }
            }
            Op::Scale(x, f) => out.push((x, g.iter().map(|&v| v * f).collect())),
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (la, lb) = (sa.item_len(), sb.item_len());
                let mut ga = Vec::with_capacity(sa.numel());
                let mut gb = Vec::with_capacity(sb.numel());
                for chunk in g.chunks(la + lb) {
                    ga.extend_from_slice(&chunk[..la]);
                    gb.extend_from_slice(&chunk[la..]);
                }
                if needs(a) {
                    out.push((a, ga));
                }
                if needs(b) {
                    out.push((b, gb));
                }
            }
            Op::Narrow { input, start } => {
                let s = self.shape(input);
                let len = node.value.shape().c;
                let mut d = vec![T::zero(); s.numel()];
                for n in 0..s.n {
                    let dst = n * s.item_len() + start * s.plane();
                    let src = n * len * s.plane();
                    d[dst..dst + len * s.plane()].copy_from_slice(&g[src..src + len * s.plane()]);
                }
                out.push((input, d));
            }
            Op::ScaleChannel { input, weights } => {
                let s = self.shape(input);
                let w = val(weights);
                let broadcast = w.len() == 1;
                let x = val(input);
                if needs(input) {
                    let d = g
                        .chunks(s.plane())
                        .enumerate()
                        .flat_map(|(i, chunk)| {
                            let a = if broadcast { w[0] } else { w[i % s.c] };
                            chunk.iter().map(move |&v| v * a)
                        })
                        .collect();
                    out.push((input, d));
                }
                if needs(weights) {
                    let mut dw = vec![T::zero(); w.len()];
                    for (i, (gc, xc)) in g.chunks(s.plane()).zip(x.chunks(s.plane())).enumerate() {
                        let slot = if broadcast { 0 } else { i % s.c };
                        dw[slot] += gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    out.push((weights, dw));
                }
            }
            Op::MeanAll(x) => {
                let len = self.shape(x).numel();
                out.push((x, vec![g[0] / T::lit(len as f64); len]));
            }
            Op::MeanSpatial(x) => {
                let s = self.shape(x);
                let plane = T::lit(s.plane() as f64);
                let d = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / plane, s.plane()))
                    .collect();
                out.push((x, d));
            }
            Op::SmoothL1 { pred, target } => {
                let s = self.shape(pred);
                let scale = g[0] / T::lit((s.n * s.plane()) as f64);
                let d: Vec<T> = val(pred)
                    .iter()
                    .zip(val(target))
                    .map(|(&p, &t)| {
                        let e = p - t;
                        let slope = if e.abs() < T::one() { e } else { e.signum() };
                        slope * scale
                    })
                    .collect();
                if needs(target) {
                    out.push((target, d.iter().map(|&v| -v).collect()));
                }
                if needs(pred) {
                    out.push((pred, d));
                }
            }
            Op::SquaredError { a, b } => {
                let len = self.shape(a).numel();
                let scale = T::lit(2.0) * g[0] / T::lit(len as f64);
                let d: Vec<T> = val(a).iter().zip(val(b)).map(|(&x, &y)| (x - y) * scale).collect();
                if needs(b) {
                    out.push((b, d.iter().map(|&v| -v).collect()));
                }
                if needs(a) {
                    out.push((a, d));
                }
            }
            Op::InvertHaze {
                hazy,
                transmission,
                airlight,
                floor,
            } => {
                let s = self.shape(hazy);
                let (iv, tv, av) = (
                    &self.nodes[hazy.0].value,
                    &self.nodes[transmission.0].value,
                    &self.nodes[airlight.0].value,
                );
                let gt = Tensor::from_vec(s, g.to_vec()).expect("shape");
                if needs(hazy) {
                    let d = Tensor::from_fn(s, |n, c, y, x| gt.at(n, c, y, x) / tv.at(n, 0, y, x).max(floor));
                    out.push((hazy, d.into_data()));
                }
                if needs(transmission) {
                    // dJ/dt' = (A - I) / t'^2, zero where the floor is active.
                    let mut d = vec![T::zero(); s.n * s.plane()];
                    for n in 0..s.n {
                        let a = av.data()[n];
                        for y in 0..s.h {
                            for x in 0..s.w {
                                let t = tv.at(n, 0, y, x);
                                if t < floor {
                                    continue;
                                }
                                let mut acc = T::zero();
                                for c in 0..s.c {
                                    acc += gt.at(n, c, y, x) * (a - iv.at(n, c, y, x)) / (t * t);
                                }
                                d[(n * s.h + y) * s.w + x] = acc;
                            }
                        }
                    }
                    out.push((transmission, d));
                }
                if needs(airlight) {
                    // dJ/dA = -(1 - t') / t'
                    let mut d = vec![T::zero(); s.n];
                    for (n, slot) in d.iter_mut().enumerate() {
                        for c in 0..s.c {
                            for y in 0..s.h {
                                for x in 0..s.w {
                                    let t = tv.at(n, 0, y, x).max(floor);
                                    *slot += gt.at(n, c, y, x) * (t - T::one()) / t;
                                }
                            }
                        }
                    }
                    out.push((airlight, d));
                }
            }
        }
        out
    }
}
