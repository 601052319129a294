//! Wengert-style tape: every op appends a node whose inputs already exist,
//! so a single reverse sweep over the node list is a valid backward order.

use super::kernels::{self, ConvGeom};
use super::{check_finite, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    AvgPool {
        input: Var,
        k: usize,
        stride: usize,
    },
    Relu(Var),
    Resize(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    NarrowChannels {
        input: Var,
        start: usize,
    },
    TopKMean {
        input: Var,
        selected: Vec<usize>,
    },
    /// Straight-through estimator: gradient passes where `pass` is set.
    Masked {
        input: Var,
        pass: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(op, "rank", format!("{a:?} vs {b:?}")));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x != y {
            return Err(Error::dim(op, i, format!("{a:?} vs {b:?}")));
        }
    }
    Ok(())
}

fn rank4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::dim(op, "rank", format!("expected NCHW, got {shape:?}"))),
    }
}

/// Number of entries kept by top-fraction selection, i.e. ceil(fraction * n) clamped to 1..=n.
pub fn top_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * (n.max(1) as f64) {
        r
    } else {
        x.ceil()
    };
    (k as usize).clamp(1, n.max(1))
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        check_finite(name, &data)?;
        Ok(self.push(shape, data, op, requires_grad))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf; it participates in backward iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, cin, h, w) = rank4("conv2d", self.shape(input))?;
        let (cout, wcin, kh, kw) = rank4("conv2d", self.shape(weight))?;
        if wcin != cin {
            return Err(Error::dim(
                "conv2d",
                "channels (1)",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::dim(
                "conv2d",
                "bias (0)",
                format!("bias {:?} does not match {cout} output channels", self.shape(bias)),
            ));
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::Parameter("conv2d needs stride and kernel ≥ 1".into()));
        }
        if h + 2 * padding < kh {
            return Err(Error::dim("conv2d", "height (2)", format!("{h}+2·{padding} < kernel {kh}")));
        }
        if w + 2 * padding < kw {
            return Err(Error::dim("conv2d", "width (3)", format!("{w}+2·{padding} < kernel {kw}")));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let data = kernels::conv2d_forward(&geom, self.value(input), self.value(weight), self.value(bias));
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        self.push_checked(
            "conv2d",
            vec![n, cout, geom.oh, geom.ow],
            data,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        )
    }

    pub fn avg_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        if k == 0 || stride == 0 {
            return Err(Error::Parameter("avg_pool2d needs k ≥ 1 and stride ≥ 1".into()));
        }
        let (n, c, h, w) = rank4("avg_pool2d", self.shape(input))?;
        if k > h {
            return Err(Error::dim("avg_pool2d", "height (2)", format!("window {k} exceeds {h}")));
        }
        if k > w {
            return Err(Error::dim("avg_pool2d", "width (3)", format!("window {k} exceeds {w}")));
        }
        let (data, oh, ow) = kernels::avg_pool_forward(self.value(input), n * c, h, w, k, stride);
        let rg = self.rg(input);
        self.push_checked("avg_pool2d", vec![n, c, oh, ow], data, Op::AvgPool { input, k, stride }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let data = self.value(input).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(input);
        Ok(self.push(shape, data, Op::Relu(input), rg))
    }

    /// Align-corners bilinear resize of the two trailing axes.
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Parameter("resize target must be at least 1×1".into()));
        }
        let (n, c, h, w) = rank4("bilinear_resize", self.shape(input))?;
        let data = kernels::resize_forward(self.value(input), n * c, h, w, out_h, out_w);
        let rg = self.rg(input);
        self.push_checked("bilinear_resize", vec![n, c, out_h, out_w], data, Op::Resize(input), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("add", shape, data, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("sub", shape, data, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push_checked("scale", shape, data, Op::Scale(a, factor), rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).iter().map(|x| x * x).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push_checked("square", shape, data, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push_checked("sum", vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push_checked("mean", vec![1], vec![m], Op::Mean(a), rg)
    }

    /// Mean over all elements of `(a - b)²`.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse_mean", self.shape(a), self.shape(b))?;
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::Contract("mse_mean of empty tensors".into()));
        }
        let s: f64 = va.iter().zip(self.value(b)).map(|(x, y)| (x - y) * (x - y)).sum();
        let m = s / va.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("mse_mean", vec![1], vec![m], Op::Mse(a, b), rg)
    }

    /// Channels `start..start+len` of an NCHW tensor.
    pub fn narrow_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = rank4("narrow_channels", self.shape(input))?;
        if start + len > c || len == 0 {
            return Err(Error::dim(
                "narrow_channels",
                "channels (1)",
                format!("range {start}..{} outside 0..{c}", start + len),
            ));
        }
        let plane = h * w;
        let src = self.value(input);
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            data.extend_from_slice(&src[(b * c + start) * plane..(b * c + start + len) * plane]);
        }
        let rg = self.rg(input);
        Ok(self.push(vec![n, len, h, w], data, Op::NarrowChannels { input, start }, rg))
    }

    /// Mean of the `ceil(fraction·n)` largest entries. Ties resolve to the lower linear index.
    pub fn top_fraction_mean(&mut self, input: Var, fraction: f64) -> Result<Var> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Parameter(format!("fraction {fraction} outside (0, 1]")));
        }
        let v = self.value(input);
        if v.is_empty() {
            return Err(Error::Contract("hard mining over an empty tensor".into()));
        }
        let k = top_count(fraction, v.len());
        let mut order: Vec<usize> = (0..v.len()).collect();
        let cmp = |a: &usize, b: &usize| v[*b].total_cmp(&v[*a]).then(a.cmp(b));
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable();
        let m = order.iter().map(|&i| v[i]).sum::<f64>() / k as f64;
        let rg = self.rg(input);
        self.push_checked(
            "top_fraction_mean",
            vec![1],
            vec![m],
            Op::TopKMean {
                input,
                selected: order,
            },
            rg,
        )
    }

    /// Applies `f` elementwise with a straight-through gradient where `f` reports `true`.
    pub fn straight_through(&mut self, input: Var, f: impl Fn(f64) -> (f64, bool)) -> Result<Var> {
        let (data, pass): (Vec<f64>, Vec<bool>) = self.value(input).iter().map(|&x| f(x)).unzip();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(input);
        self.push_checked("straight_through", shape, data, Op::Masked { input, pass }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let take = |grads: &mut [Option<Vec<f64>>], v: Var| -> Option<Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; nodes[v.0].data.len()]))
        };
        let put = |grads: &mut [Option<Vec<f64>>], v: Var, buf: Option<Vec<f64>>| {
            let Some(buf) = buf else { return };
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&buf).for_each(|(a, b)| *a += b),
                slot => *slot = Some(buf),
            }
        };
        let mut update = |v: Var, f: &dyn Fn(&mut [f64])| {
            let mut buf = take(grads, v);
            if let Some(b) = buf.as_mut() {
                f(b);
            }
            put(grads, v, buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let mut gi = take(grads, *input);
                let mut gw = take(grads, *weight);
                let mut gb = take(grads, *bias);
                kernels::conv2d_backward(
                    geom,
                    &nodes[input.0].data,
                    &nodes[weight.0].data,
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                put(grads, *input, gi);
                put(grads, *weight, gw);
                put(grads, *bias, gb);
            }
            Op::AvgPool { input, k, stride } => {
                let [n, c, h, w] = nodes[input.0].shape[..] else { unreachable!() };
                let [_, _, oh, ow] = nodes[i].shape[..] else { unreachable!() };
                update(*input, &|gi| kernels::avg_pool_backward(g, gi, n * c, h, w, *k, *stride, oh, ow));
            }
            Op::Relu(a) => {
                let x = &nodes[a.0].data;
                update(*a, &|ga| {
                    for ((d, &x), &gv) in ga.iter_mut().zip(x).zip(g) {
                        if x > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Resize(a) => {
                let [n, c, h, w] = nodes[a.0].shape[..] else { unreachable!() };
                let [_, _, oh, ow] = nodes[i].shape[..] else { unreachable!() };
                update(*a, &|ga| kernels::resize_backward(g, ga, n * c, (h, w), (oh, ow)));
            }
            Op::Add(a, b) => {
                update(*a, &|ga| ga.iter_mut().zip(g).for_each(|(d, gv)| *d += gv));
                update(*b, &|gb| gb.iter_mut().zip(g).for_each(|(d, gv)| *d += gv));
            }
            Op::Sub(a, b) => {
                update(*a, &|ga| ga.iter_mut().zip(g).for_each(|(d, gv)| *d += gv));
                update(*b, &|gb| gb.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv));
            }
            Op::Scale(a, f) => {
                update(*a, &|ga| ga.iter_mut().zip(g).for_each(|(d, gv)| *d += f * gv));
            }
            Op::Square(a) => {
                let x = &nodes[a.0].data;
                update(*a, &|ga| {
                    for ((d, &x), &gv) in ga.iter_mut().zip(x).zip(g) {
                        *d += 2.0 * x * gv;
                    }
                });
            }
            Op::Sum(a) => update(*a, &|ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => update(*a, &|ga| {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|d| *d += s);
            }),
            Op::Mse(a, b) => {
                let (va, vb) = (&nodes[a.0].data, &nodes[b.0].data);
                let s = 2.0 * g[0] / va.len() as f64;
                update(*a, &|ga| {
                    for ((d, x), y) in ga.iter_mut().zip(va).zip(vb) {
                        *d += s * (x - y);
                    }
                });
                update(*b, &|gb| {
                    for ((d, x), y) in gb.iter_mut().zip(va).zip(vb) {
                        *d -= s * (x - y);
                    }
                });
            }
            Op::NarrowChannels { input, start } => {
                let [n, c, h, w] = nodes[input.0].shape[..] else { unreachable!() };
                let len = nodes[i].shape[1];
                let plane = h * w;
                update(*input, &|gi| {
                    for b in 0..n {
                        let dst = &mut gi[(b * c + start) * plane..(b * c + start + len) * plane];
                        let src = &g[b * len * plane..(b + 1) * len * plane];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::TopKMean { input, selected } => update(*input, &|gi| {
                let s = g[0] / selected.len() as f64;
                for &j in selected {
                    gi[j] += s;
                }
            }),
            Op::Masked { input, pass } => update(*input, &|gi| {
                for ((d, &p), &gv) in gi.iter_mut().zip(pass).zip(g) {
                    if p {
                        *d += gv;
                    }
                }
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y), &[9.0]);
    }

    #[test]
    fn conv_pointwise_with_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), &[3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 1.0).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 3, 4], &data));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), &data[..]);
    }

    #[test]
    fn conv_channel_mismatch_names_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 3, 3]));
        let w = tape.constant(Tensor::zeros(vec![1, 3, 1, 1]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let err = tape.conv2d(x, w, b, 1, 0).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
    }

    #[test]
    fn avg_pool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y), &[2.5]);
        let id = tape.avg_pool2d(x, 1, 1).unwrap();
        assert_eq!(tape.value(id), &[1.0, 2.0, 3.0, 4.0]);
        let c = tape.constant(Tensor::full(vec![1, 2, 4, 6], 3.25));
        let pc = tape.avg_pool2d(c, 2, 2).unwrap();
        assert_eq!(tape.shape(pc), &[1, 2, 2, 3]);
        assert!(tape.value(pc).iter().all(|&v| v == 3.25));
        assert!(matches!(tape.avg_pool2d(x, 0, 1), Err(Error::Parameter(_))));
        assert!(matches!(tape.avg_pool2d(x, 2, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[-1.0, 0.0, 2.0]).with_requires_grad(true));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0]);
        let neg = tape.constant(Tensor::full(vec![4], -0.5));
        let z = tape.relu(neg).unwrap();
        assert!(tape.value(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
        let same = tape.bilinear_resize(x, 2, 2).unwrap();
        assert_eq!(tape.value(same), tape.value(x));
        let up = tape.bilinear_resize(x, 3, 3).unwrap();
        assert_eq!(tape.value(up), &[0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
        let c = tape.constant(Tensor::full(vec![1, 1, 3, 5], 0.7));
        let cu = tape.bilinear_resize(c, 11, 4).unwrap();
        assert!(tape.value(cu).iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 3.0]).with_requires_grad(true));
        let b = tape.constant(t(&[2], &[0.0, 1.0]));
        let l = tape.mse_mean(a, b).unwrap();
        assert_eq!(tape.scalar(l), 2.5);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0, 2.0]);
        let z = tape.mse_mean(a, a).unwrap();
        assert_eq!(tape.scalar(z), 0.0);
        let c = tape.constant(Tensor::zeros(vec![3]));
        assert!(matches!(tape.mse_mean(a, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_rules() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(vec![2, 3], 0.3).with_requires_grad(true));
        let d = tape.leaf(&Tensor::full(vec![2, 3], 0.3));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().iter().all(|&v| v == 1.0));
        assert!(g.get(d).is_none());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn top_fraction_mean_selects_largest() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[10], &[3.0, 1.0, 10.0, 2.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).with_requires_grad(true));
        let m = tape.top_fraction_mean(x, 0.1).unwrap();
        assert_eq!(tape.scalar(m), 10.0);
        let g = tape.backward(m).unwrap();
        let gx = g.get(x).unwrap();
        assert_eq!(gx.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(gx[2], 1.0);
        let all = tape.top_fraction_mean(x, 1.0).unwrap();
        assert_eq!(tape.scalar(all), 5.5);
    }

    #[test]
    fn top_fraction_ties_take_first_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(vec![10], 1.0).with_requires_grad(true));
        let m = tape.top_fraction_mean(x, 0.2).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(&g.get(x).unwrap()[..3], &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn top_count_is_exact_ceiling() {
        for n in 1..500 {
            assert_eq!(top_count(0.1, n), n.div_ceil(10), "n={n}");
        }
        assert_eq!(top_count(1.0, 7), 7);
    }
}
