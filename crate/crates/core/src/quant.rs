//! Uniform affine fake-quantization and Fisher-weighted block reconstruction.
//!
//! Weights are quantized symmetrically per output channel, activations
//! asymmetrically per tensor. Scales come from a fixed grid of 100
//! candidates `f · max|x| / qmax` with `f ∈ {0.21, 0.22, …, 1.20}`; the block
//! search picks, per channel, the candidate minimising
//! `E[Σ_i (∂L/∂z_i)² · Δz_i²]` over the calibration set.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::models::{batched, ForwardOptions, LayerSpec, Network, ParamMode};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{Tape, Tensor, Var};

pub const ALLOWED_BITS: [u32; 4] = [2, 3, 4, 8];

/// Scale multipliers searched by [`calibrate_scale`] and [`quantize_block`].
pub fn candidate_factors() -> impl Iterator<Item = f64> {
    (21..=120).map(|k| k as f64 / 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    PerOutputChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantTarget {
    Weights,
    Activations,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantScheme {
    pub bits: u32,
    /// One scale per tensor, or one per output channel.
    pub scales: Vec<f64>,
    pub zero_point: i64,
    pub granularity: Granularity,
    pub target: QuantTarget,
}

pub fn check_bits(bits: u32) -> Result<()> {
    if ALLOWED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("bit width {bits} not in {{2,3,4,8}}")))
    }
}

/// Largest positive level of a symmetric `bits`-bit grid.
fn qmax_symmetric(bits: u32) -> f64 {
    ((1i64 << (bits - 1)) - 1) as f64
}

#[inline]
fn qdq(x: f64, scale: f64, zero_point: i64, lo: i64, hi: i64) -> f64 {
    let q = ((x / scale).round() + zero_point as f64).clamp(lo as f64, hi as f64);
    (q - zero_point as f64) * scale
}

impl QuantScheme {
    pub fn weights(bits: u32, scales: Vec<f64>) -> Result<Self> {
        let granularity = if scales.len() == 1 {
            Granularity::PerTensor
        } else {
            Granularity::PerOutputChannel
        };
        let s = Self {
            bits,
            scales,
            zero_point: 0,
            granularity,
            target: QuantTarget::Weights,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn activations(bits: u32, scale: f64, zero_point: i64) -> Result<Self> {
        let s = Self {
            bits,
            scales: vec![scale],
            zero_point,
            granularity: Granularity::PerTensor,
            target: QuantTarget::Activations,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.scales.is_empty() {
            return Err(Error::Parameter("scheme has no scales".into()));
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Parameter(format!("scale {s} must be positive")));
        }
        let (lo, hi) = self.range();
        if self.target == QuantTarget::Weights && self.zero_point != 0 {
            return Err(Error::Parameter("weight quantization is symmetric (zero_point = 0)".into()));
        }
        if self.zero_point < lo || self.zero_point > hi {
            return Err(Error::Parameter(format!("zero point {} outside [{lo}, {hi}]", self.zero_point)));
        }
        Ok(())
    }

    /// Representable integer range.
    pub fn range(&self) -> (i64, i64) {
        match self.target {
            QuantTarget::Weights => (-(1i64 << (self.bits - 1)), (1i64 << (self.bits - 1)) - 1),
            QuantTarget::Activations => (0, (1i64 << self.bits) - 1),
        }
    }

    /// Rounds onto the grid and maps back. Per-channel schemes split axis 0.
    pub fn quantize_dequantize(&self, x: &Tensor) -> Result<Tensor> {
        self.validate()?;
        let (lo, hi) = self.range();
        let groups = self.scales.len();
        if groups > 1 && x.shape().first() != Some(&groups) {
            return Err(Error::dim(
                "quantize_dequantize",
                "0",
                format!("{groups} channel scales for shape {:?}", x.shape()),
            ));
        }
        let per = x.numel() / groups.max(1);
        let mut out = x.clone();
        out.set_requires_grad(false);
        out.clear_grad();
        for (g, chunk) in out.data_mut().chunks_mut(per.max(1)).enumerate() {
            let s = self.scales[g.min(groups - 1)];
            chunk.iter_mut().for_each(|v| *v = qdq(*v, s, self.zero_point, lo, hi));
        }
        Ok(out)
    }

    /// Fake-quant on the tape with a straight-through gradient inside the clamp range.
    pub fn fake_quant(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.granularity != Granularity::PerTensor {
            return Err(Error::Parameter("activation fake-quant is per-tensor".into()));
        }
        let (lo, hi) = self.range();
        let (s, zp) = (self.scales[0], self.zero_point);
        let (min_v, max_v) = ((lo - zp) as f64 * s, (hi - zp) as f64 * s);
        tape.straight_through(x, |v| (qdq(v, s, zp, lo, hi), v >= min_v && v <= max_v))
    }

    /// `[bits, zero_point, scales…]`, the checkpoint encoding.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = vec![self.bits as f64, self.zero_point as f64];
        data.extend_from_slice(&self.scales);
        let n = data.len();
        Tensor::new(vec![n], data).unwrap()
    }

    pub fn from_tensor(t: &Tensor, target: QuantTarget) -> Result<Self> {
        let d = t.data();
        if d.len() < 3 {
            return Err(Error::Contract("quant scheme tensor too short".into()));
        }
        let scales = d[2..].to_vec();
        let s = Self {
            bits: d[0] as u32,
            granularity: if scales.len() == 1 {
                Granularity::PerTensor
            } else {
                Granularity::PerOutputChannel
            },
            scales,
            zero_point: d[1] as i64,
            target,
        };
        s.validate()?;
        Ok(s)
    }
}

fn sq_err_symmetric(x: &[f64], s: f64, lo: i64, hi: i64) -> f64 {
    x.iter().map(|&v| (v - qdq(v, s, 0, lo, hi)).powi(2)).sum()
}

/// MSE-optimal symmetric scale(s) over the candidate grid; an all-zero group gets scale 1.
pub fn calibrate_scale(x: &Tensor, bits: u32, granularity: Granularity) -> Result<Vec<f64>> {
    check_bits(bits)?;
    if x.numel() == 0 {
        return Err(Error::Contract("calibrate_scale on an empty tensor".into()));
    }
    let groups = match granularity {
        Granularity::PerTensor => 1,
        Granularity::PerOutputChannel => x.shape()[0],
    };
    let qmax = qmax_symmetric(bits);
    let (lo, hi) = (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1);
    Ok(x
        .data()
        .chunks(x.numel() / groups)
        .map(|g| {
            let m = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if m == 0.0 {
                return 1.0;
            }
            let mut best = (f64::INFINITY, 1.0);
            for f in candidate_factors() {
                let s = f * m / qmax;
                let e = sq_err_symmetric(g, s, lo, hi);
                if e < best.0 {
                    best = (e, s);
                }
            }
            best.1
        })
        .collect())
}

/// Asymmetric per-tensor activation scheme minimising MSE over clipped min/max ranges.
pub fn calibrate_activation(values: &[f64], bits: u32) -> Result<QuantScheme> {
    check_bits(bits)?;
    if values.is_empty() {
        return Err(Error::Contract("calibrate_activation on no values".into()));
    }
    let stride = values.len().div_ceil(1 << 18);
    let sample: Vec<f64> = values.iter().step_by(stride).copied().collect();
    let lo = values.iter().fold(0.0f64, |a, &v| a.min(v));
    let hi = values.iter().fold(0.0f64, |a, &v| a.max(v));
    let levels = ((1i64 << bits) - 1) as f64;
    if hi - lo == 0.0 {
        return QuantScheme::activations(bits, 1.0, 0);
    }
    let mut best: Option<(f64, QuantScheme)> = None;
    for f in candidate_factors() {
        let scale = f * (hi - lo) / levels;
        let zp = ((-f * lo) / scale).round().clamp(0.0, levels) as i64;
        let scheme = QuantScheme::activations(bits, scale, zp)?;
        let (qlo, qhi) = scheme.range();
        let e: f64 = sample.iter().map(|&v| (v - qdq(v, scale, zp, qlo, qhi)).powi(2)).sum();
        if best.as_ref().is_none_or(|(b, _)| e < *b) {
            best = Some((e, scheme));
        }
    }
    Ok(best.unwrap().1)
}

/// Conv layers `first..=last` (0-based conv indices) reconstructed jointly.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantBlock {
    pub first: usize,
    pub last: usize,
}

impl QuantBlock {
    pub fn single(conv: usize) -> Self {
        Self { first: conv, last: conv }
    }

    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn check(&self, net: &Network) -> Result<()> {
        if self.first > self.last || self.last >= net.conv_count() {
            return Err(Error::Contract(format!(
                "block {}..={} outside the {} conv layers of `{}`",
                self.first,
                self.last,
                net.conv_count(),
                net.name
            )));
        }
        Ok(())
    }
}

/// Checks that blocks cover every conv layer exactly once, in order.
pub fn check_partition(blocks: &[QuantBlock], net: &Network) -> Result<()> {
    let mut next = 0;
    for b in blocks {
        b.check(net)?;
        if b.first != next {
            return Err(Error::Contract(format!("blocks do not partition the network at conv {next}")));
        }
        next = b.last + 1;
    }
    if next != net.conv_count() {
        return Err(Error::Contract("blocks do not cover the last conv layer".into()));
    }
    Ok(())
}

/// Full-precision block inputs, outputs and output gradients over a calibration set.
#[derive(Clone, Debug)]
pub struct CalibrationCache {
    pub block: QuantBlock,
    /// `[M, C_in, H, W]` inputs to the block's first conv.
    pub inputs: Tensor,
    /// `[M, C, H', W']` pre-activation outputs of the block's last conv.
    pub outputs: Tensor,
    /// `∂L/∂z` per calibration image, same shape as `outputs`.
    pub grads: Tensor,
}

/// Records per-image forward/backward passes of the full-precision network and
/// caches, for each block, its inputs, outputs and loss gradients.
///
/// `loss` receives the tape, the forward record and the calibration index.
pub fn build_caches<F>(net: &Network, blocks: &[QuantBlock], images: &[Tensor], mut loss: F) -> Result<Vec<CalibrationCache>>
where
    F: FnMut(&mut Tape, &crate::models::Forward, usize) -> Result<Var>,
{
    check_partition(blocks, net)?;
    if images.is_empty() {
        return Err(Error::Contract("calibration set is empty".into()));
    }
    let mut ins: Vec<Vec<Tensor>> = vec![Vec::new(); blocks.len()];
    let mut outs: Vec<Vec<Tensor>> = vec![Vec::new(); blocks.len()];
    let mut grads: Vec<Vec<Tensor>> = vec![Vec::new(); blocks.len()];
    for (idx, image) in images.iter().enumerate() {
        let mut tape = Tape::new();
        let x = tape.constant(batched(image)?);
        let f = net.forward(&mut tape, x, ParamMode::Tracked, ForwardOptions::default())?;
        let l = loss(&mut tape, &f, idx)?;
        let g = tape.backward(l)?;
        for (b, block) in blocks.iter().enumerate() {
            let z = f.conv_outputs[block.last];
            ins[b].push(tape.tensor(f.conv_inputs[block.first]));
            outs[b].push(tape.tensor(z));
            let gz = g.get(z).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(z).len()]);
            grads[b].push(Tensor::new(tape.shape(z).to_vec(), gz)?);
        }
    }
    let stack = |v: &Vec<Tensor>| Tensor::stack_batch(&v.iter().collect::<Vec<_>>());
    blocks
        .iter()
        .enumerate()
        .map(|(b, block)| {
            Ok(CalibrationCache {
                block: block.clone(),
                inputs: stack(&ins[b])?,
                outputs: stack(&outs[b])?,
                grads: stack(&grads[b])?,
            })
        })
        .collect()
}

/// Mean over calibration images of the squared output gradients.
pub fn fisher_diagonal(cache: &CalibrationCache) -> Result<Tensor> {
    let shape = cache.grads.shape();
    if shape.is_empty() || shape[0] == 0 {
        return Err(Error::Contract("calibration cache is empty".into()));
    }
    let m = shape[0];
    let per = cache.grads.numel() / m;
    let mut diag = vec![0.0; per];
    for img in cache.grads.data().chunks(per) {
        diag.iter_mut().zip(img).for_each(|(d, g)| *d += g * g);
    }
    diag.iter_mut().for_each(|d| *d /= m as f64);
    Tensor::new(shape[1..].to_vec(), diag)
}

/// Layers of `net` from the block's first conv through its last conv.
fn block_layers<'a>(net: &'a Network, block: &QuantBlock) -> &'a [LayerSpec] {
    let convs = net.conv_layers();
    &net.layers[convs[block.first]..=convs[block.last]]
}

/// Runs the block on `input` with the given conv weights (one per block conv).
fn run_block(net: &Network, block: &QuantBlock, input: &Tensor, weights: &[&Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut x = tape.constant(input.clone());
    let mut conv = 0;
    for layer in block_layers(net, block) {
        x = match *layer {
            LayerSpec::Conv { stride, padding, .. } => {
                let w = tape.constant(weights[conv].clone());
                let b = tape.constant(net.conv_bias(block.first + conv).clone());
                conv += 1;
                tape.conv2d(x, w, b, stride, padding)?
            }
            LayerSpec::AvgPool { kernel, stride } => tape.avg_pool2d(x, kernel, stride)?,
            LayerSpec::Relu => tape.relu(x)?,
            LayerSpec::BilinearUp { height, width } => tape.bilinear_resize(x, height, width)?,
        };
    }
    Ok(tape.tensor(x))
}

fn weighted_error(cache: &CalibrationCache, zhat: &[f64]) -> f64 {
    let m = cache.outputs.shape()[0] as f64;
    let s: f64 = zhat
        .iter()
        .zip(cache.outputs.data())
        .zip(cache.grads.data())
        .map(|((a, z), g)| g * g * (a - z) * (a - z))
        .sum();
    s / m
}

/// `E[Σ_i g_i² Δz_i²]` for the block with weights quantized by `schemes` (one per block conv).
pub fn block_reconstruction_error(
    net: &Network,
    cache: &CalibrationCache,
    schemes: &[QuantScheme],
) -> Result<f64> {
    let block = &cache.block;
    block.check(net)?;
    if schemes.len() != block.len() {
        return Err(Error::Contract(format!("{} schemes for a {}-layer block", schemes.len(), block.len())));
    }
    let weights = (block.first..=block.last)
        .zip(schemes)
        .map(|(c, s)| s.quantize_dequantize(net.conv_weight(c)))
        .collect::<Result<Vec<_>>>()?;
    let zhat = run_block(net, block, &cache.inputs, &weights.iter().collect::<Vec<_>>())?;
    Ok(weighted_error(cache, zhat.data()))
}

#[derive(Clone, Debug)]
pub struct BlockQuantization {
    pub schemes: Vec<QuantScheme>,
    /// Snapped weights, one per block conv.
    pub weights: Vec<Tensor>,
    /// Objective with MSE-calibrated scales, before the Fisher-weighted search.
    pub error_before: f64,
    /// Objective after each coordinate-descent sweep.
    pub sweep_errors: Vec<f64>,
}

impl BlockQuantization {
    pub fn error_after(&self) -> f64 {
        *self.sweep_errors.last().unwrap_or(&self.error_before)
    }
}

pub const SWEEPS: usize = 2;

/// Picks per-channel scales from the candidate grid by coordinate descent on the
/// Fisher-weighted block objective, starting from MSE-calibrated scales.
pub fn quantize_block(net: &Network, cache: &CalibrationCache, bits_per_layer: &[u32]) -> Result<BlockQuantization> {
    let block = &cache.block;
    block.check(net)?;
    if bits_per_layer.len() != block.len() {
        return Err(Error::Contract(format!(
            "{} bit widths for a {}-layer block",
            bits_per_layer.len(),
            block.len()
        )));
    }
    let mut schemes = Vec::with_capacity(block.len());
    for (c, &bits) in (block.first..=block.last).zip(bits_per_layer) {
        let scales = calibrate_scale(net.conv_weight(c), bits, Granularity::PerOutputChannel)?;
        schemes.push(QuantScheme::weights(bits, scales)?);
    }
    let error_before = block_reconstruction_error(net, cache, &schemes)?;
    let mut current = error_before;
    let mut sweep_errors = Vec::with_capacity(SWEEPS);
    for sweep in 0..SWEEPS {
        // A single-layer block is separable per output channel, so the first sweep is already optimal.
        if sweep > 0 && block.len() == 1 {
            sweep_errors.push(current);
            continue;
        }
        for pos in 0..block.len() {
            current = if pos + 1 == block.len() {
                search_last_layer(net, cache, &mut schemes)?
            } else {
                search_inner_layer(net, cache, &mut schemes, pos, current)?
            };
        }
        sweep_errors.push(current);
    }
    let weights = (block.first..=block.last)
        .zip(&schemes)
        .map(|(c, s)| s.quantize_dequantize(net.conv_weight(c)))
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockQuantization {
        schemes,
        weights,
        error_before,
        sweep_errors,
    })
}

fn channel_max(w: &Tensor) -> Vec<f64> {
    let per = w.numel() / w.shape()[0];
    w.data().chunks(per).map(|c| c.iter().fold(0.0f64, |a, v| a.max(v.abs()))).collect()
}

/// Exhaustive per-channel search over the block's last conv. The output channels
/// of that conv contribute independent terms to the objective.
fn search_last_layer(net: &Network, cache: &CalibrationCache, schemes: &mut [QuantScheme]) -> Result<f64> {
    let block = &cache.block;
    let last = block.last;
    let pos = block.len() - 1;
    // Input to the last conv under the current upstream quantization.
    let last_input = if block.len() == 1 {
        cache.inputs.clone()
    } else {
        let sub = QuantBlock {
            first: block.first,
            last: last - 1,
        };
        let ws = (block.first..last)
            .zip(schemes.iter())
            .map(|(c, s)| s.quantize_dequantize(net.conv_weight(c)))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let mut x = tape.constant(run_block(net, &sub, &cache.inputs, &ws.iter().collect::<Vec<_>>())?);
        let convs = net.conv_layers();
        for layer in &net.layers[convs[last - 1] + 1..convs[last]] {
            x = match *layer {
                LayerSpec::AvgPool { kernel, stride } => tape.avg_pool2d(x, kernel, stride)?,
                LayerSpec::Relu => tape.relu(x)?,
                LayerSpec::BilinearUp { height, width } => tape.bilinear_resize(x, height, width)?,
                LayerSpec::Conv { .. } => unreachable!("no conv between consecutive convs"),
            };
        }
        tape.tensor(x)
    };
    let LayerSpec::Conv { stride, padding, .. } = net.layers[net.conv_layers()[last]] else { unreachable!() };
    let w = net.conv_weight(last);
    let bias = net.conv_bias(last).data();
    let (cout, cin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let &[m, _, h, wd] = last_input.shape() else {
        return Err(Error::Contract("cache inputs must be NCHW".into()));
    };
    let geom = ConvGeom {
        n: m,
        cin,
        h,
        w: wd,
        cout: 1,
        kh,
        kw,
        stride,
        pad: padding,
        oh: cache.outputs.shape()[2],
        ow: cache.outputs.shape()[3],
    };
    let plane = geom.oh * geom.ow;
    let per_w = cin * kh * kw;
    let bits = schemes[pos].bits;
    let (lo, hi) = schemes[pos].range();
    let qmax = qmax_symmetric(bits);
    let maxes = channel_max(w);
    let mut total = 0.0;
    let mut zhat_c = vec![0.0; m * plane];
    let mut z_c = vec![0.0; m * plane];
    let mut g_c = vec![0.0; m * plane];
    for o in 0..cout {
        for n in 0..m {
            let src = (n * cout + o) * plane;
            z_c[n * plane..(n + 1) * plane].copy_from_slice(&cache.outputs.data()[src..src + plane]);
            g_c[n * plane..(n + 1) * plane].copy_from_slice(&cache.grads.data()[src..src + plane]);
        }
        let w_o = &w.data()[o * per_w..(o + 1) * per_w];
        let mut eval = |s: f64| {
            let wq: Vec<f64> = w_o.iter().map(|&v| qdq(v, s, 0, lo, hi)).collect();
            let out = kernels::conv2d_forward(&geom, last_input.data(), &wq, &[bias[o]]);
            zhat_c.copy_from_slice(&out);
            zhat_c
                .iter()
                .zip(&z_c)
                .zip(&g_c)
                .map(|((a, z), g)| g * g * (a - z) * (a - z))
                .sum::<f64>()
                / m as f64
        };
        if maxes[o] == 0.0 {
            total += eval(schemes[pos].scales[o]);
            continue;
        }
        let mut best = (eval(schemes[pos].scales[o]), schemes[pos].scales[o]);
        for f in candidate_factors() {
            let s = f * maxes[o] / qmax;
            let e = eval(s);
            if e < best.0 {
                best = (e, s);
            }
        }
        schemes[pos].scales[o] = best.1;
        total += best.0;
    }
    Ok(total)
}

/// Per-channel search over an inner conv of a multi-layer block, re-running the block per candidate.
fn search_inner_layer(
    net: &Network,
    cache: &CalibrationCache,
    schemes: &mut [QuantScheme],
    pos: usize,
    mut current: f64,
) -> Result<f64> {
    let conv = cache.block.first + pos;
    let qmax = qmax_symmetric(schemes[pos].bits);
    let maxes = channel_max(net.conv_weight(conv));
    for o in 0..maxes.len() {
        if maxes[o] == 0.0 {
            continue;
        }
        let mut best = (current, schemes[pos].scales[o]);
        for f in candidate_factors() {
            let s = f * maxes[o] / qmax;
            schemes[pos].scales[o] = s;
            let e = block_reconstruction_error(net, cache, schemes)?;
            if e < best.0 {
                best = (e, s);
            }
        }
        schemes[pos].scales[o] = best.1;
        current = best.0;
    }
    Ok(current)
}

/// A network with snapped weights plus its activation fake-quantizers.
#[derive(Clone, Debug)]
pub struct QuantizedNetwork {
    pub net: Network,
    pub bits: Vec<u32>,
    pub weight_schemes: Vec<QuantScheme>,
    pub activation_schemes: Vec<Option<QuantScheme>>,
    pub reports: Vec<LayerQuantReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerQuantReport {
    pub layer: usize,
    pub bits: u32,
    pub scale_min: f64,
    pub scale_mean: f64,
    pub scale_max: f64,
    pub error_before: f64,
    pub error_after: f64,
}

impl QuantizedNetwork {
    pub fn forward_options(&self) -> ForwardOptions<'_> {
        ForwardOptions {
            activation_quant: Some(&self.activation_schemes),
        }
    }

    /// Report lines `layer,bits,scale_min/mean/max,block_error_before,block_error_after`.
    pub fn report(&self) -> String {
        let mut out = String::from("layer,bits,scale_stats(min/mean/max),block_error_before,block_error_after\n");
        for r in &self.reports {
            writeln!(
                out,
                "{},{},{:.6e}/{:.6e}/{:.6e},{:.9e},{:.9e}",
                r.layer + 1,
                r.bits,
                r.scale_min,
                r.scale_mean,
                r.scale_max,
                r.error_before,
                r.error_after
            )
            .unwrap();
        }
        out
    }

    /// Activation schemes as `<prefix>.act<l>` tensors.
    pub fn activation_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.activation_schemes
            .iter()
            .enumerate()
            .filter_map(|(l, s)| s.as_ref().map(|s| (format!("{prefix}.act{l}"), s.to_tensor())))
            .collect()
    }
}

/// Reads back activation schemes written by [`QuantizedNetwork::activation_tensors`].
pub fn activation_schemes_from(prefix: &str, layers: usize, entries: &[(String, Tensor)]) -> Result<Vec<Option<QuantScheme>>> {
    (0..layers)
        .map(|l| {
            let key = format!("{prefix}.act{l}");
            entries
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| QuantScheme::from_tensor(t, QuantTarget::Activations))
                .transpose()
        })
        .collect()
}

/// Quantizes every conv of `net` as its own block. The first and last conv are
/// pinned to 8 bits. With `quantize_activations`, each tap gets a per-tensor
/// fake-quantizer at the layer's bit width, calibrated layer by layer on the
/// partially quantized network.
pub fn quantize_network(
    net: &Network,
    caches: &[CalibrationCache],
    bit_assignment: &[u32],
    calibration: &[Tensor],
    quantize_activations: bool,
) -> Result<QuantizedNetwork> {
    let n = net.conv_count();
    if bit_assignment.len() != n {
        return Err(Error::Contract(format!("{} bit widths for {n} conv layers", bit_assignment.len())));
    }
    for &b in bit_assignment {
        check_bits(b)?;
    }
    let mut bits = bit_assignment.to_vec();
    bits[0] = 8;
    bits[n - 1] = 8;
    if caches.len() != n || caches.iter().enumerate().any(|(i, c)| c.block != QuantBlock::single(i)) {
        return Err(Error::Contract("expected one single-conv calibration cache per layer".into()));
    }
    let mut snapped = net.clone();
    let mut weight_schemes = Vec::with_capacity(n);
    let mut reports = Vec::with_capacity(n);
    for (l, cache) in caches.iter().enumerate() {
        let q = quantize_block(net, cache, &bits[l..=l])?;
        let scales = &q.schemes[0].scales;
        reports.push(LayerQuantReport {
            layer: l,
            bits: bits[l],
            scale_min: scales.iter().copied().fold(f64::INFINITY, f64::min),
            scale_mean: scales.iter().sum::<f64>() / scales.len() as f64,
            scale_max: scales.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            error_before: q.error_before,
            error_after: q.error_after(),
        });
        snapped.conv_weight_mut(l).data_mut().copy_from_slice(q.weights[0].data());
        weight_schemes.push(q.schemes.into_iter().next().unwrap());
    }
    let mut activation_schemes: Vec<Option<QuantScheme>> = vec![None; n];
    if quantize_activations {
        for l in 0..n {
            let mut values = Vec::new();
            for image in calibration {
                let mut tape = Tape::new();
                let x = tape.constant(batched(image)?);
                let opts = ForwardOptions {
                    activation_quant: Some(&activation_schemes),
                };
                let f = snapped.forward(&mut tape, x, ParamMode::Constant, opts)?;
                values.extend_from_slice(tape.value(f.taps[l]));
            }
            activation_schemes[l] = Some(calibrate_activation(&values, bits[l])?);
        }
    }
    Ok(QuantizedNetwork {
        net: snapped,
        bits,
        weight_schemes,
        activation_schemes,
        reports,
    })
}
