//! Network definitions: the PDN teacher and student, the autoencoder and the
//! frozen extractor used as the teacher's pretraining target.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::quant::QuantScheme;
use crate::rng::{self, Rng64};
use crate::tensor::{adam_step, AdamState, Gradients, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Relu,
    /// Align-corners bilinear resize to a fixed spatial size.
    BilinearUp {
        height: usize,
        width: usize,
    },
}

impl LayerSpec {
    fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Output `(channels, height, width)` for an input of the given shape.
    pub fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if c != in_channels {
                    return Err(Error::dim("layer", "channels (1)", format!("{c} ≠ {in_channels}")));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(Error::dim("layer", "spatial", format!("{h}×{w} too small for kernel {kernel}")));
                }
                Ok((
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ))
            }
            LayerSpec::AvgPool { kernel, stride } => {
                if h < kernel || w < kernel {
                    return Err(Error::dim("layer", "spatial", format!("{h}×{w} too small for pool {kernel}")));
                }
                Ok((c, (h - kernel) / stride + 1, (w - kernel) / stride + 1))
            }
            LayerSpec::Relu => Ok((c, h, w)),
            LayerSpec::BilinearUp { height, width } => Ok((c, height, width)),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::Relu => "relu",
            LayerSpec::BilinearUp { .. } => "bilinear-up",
        }
    }
}

/// Hidden widths of the three inner PDN convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PdnWidths(pub [usize; 3]);

impl Default for PdnWidths {
    fn default() -> Self {
        Self([16, 32, 32])
    }
}

/// How parameters are recorded on the tape for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    /// Constants: nothing upstream of the input receives gradient.
    Constant,
    /// Leaves that require grad, so intermediate outputs do too.
    Tracked,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Per-conv activation fake-quantizers applied to each tap.
    pub activation_quant: Option<&'a [Option<QuantScheme>]>,
}

/// Everything one forward pass leaves on the tape.
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: Var,
    /// Post-activation output of each conv layer.
    pub taps: Vec<Var>,
    /// Input of each conv layer.
    pub conv_inputs: Vec<Var>,
    /// Raw conv output (before activation) of each conv layer.
    pub conv_outputs: Vec<Var>,
    /// Parameter leaves, in [`Network::params`] order.
    pub params: Vec<Var>,
}

/// Post-activation outputs captured during one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTaps(pub Vec<Tensor>);

impl LayerTaps {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    params: Vec<(String, Tensor)>,
    pub frozen: bool,
}

impl Network {
    /// Creates a network with He-uniform conv weights and zero biases.
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>, rng: &mut Rng64) -> Self {
        let mut params = Vec::new();
        let mut conv = 0;
        for layer in &layers {
            if let LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } = *layer
            {
                let fan_in = (in_channels * kernel * kernel) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let w = Tensor::from_fn(vec![out_channels, in_channels, kernel, kernel], |_| {
                    rng.gen_range(-bound..bound)
                });
                params.push((format!("conv{conv}.weight"), w.with_requires_grad(true)));
                params.push((format!("conv{conv}.bias"), Tensor::zeros(vec![out_channels]).with_requires_grad(true)));
                conv += 1;
            }
        }
        Self {
            name: name.into(),
            layers,
            params,
            frozen: false,
        }
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, LayerSpec::Conv { .. })).count()
    }

    /// Indices into `layers` of the conv layers, in order.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn conv_weight(&self, conv: usize) -> &Tensor {
        &self.params[2 * conv].1
    }

    pub fn conv_bias(&self, conv: usize) -> &Tensor {
        &self.params[2 * conv + 1].1
    }

    pub fn conv_weight_mut(&mut self, conv: usize) -> &mut Tensor {
        &mut self.params[2 * conv].1
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        for (_, p) in &mut self.params {
            p.set_requires_grad(!frozen);
            p.clear_grad();
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Feature shape `(C, H, W)` produced for an `(c, h, w)` input.
    pub fn output_shape(&self, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        self.layers.iter().try_fold(input, |s, l| l.output_shape(s))
    }

    /// Replaces parameter values by those of `other`, which must share the layer table.
    pub fn copy_params_from(&mut self, other: &Network) -> Result<()> {
        if self.layers != other.layers {
            return Err(Error::Contract(format!(
                "cannot copy parameters from `{}` into `{}`: layer tables differ",
                other.name, self.name
            )));
        }
        for ((_, dst), (_, src)) in self.params.iter_mut().zip(&other.params) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Records a forward pass of an `[N, C, H, W]` input.
    pub fn forward(&self, tape: &mut Tape, input: Var, mode: ParamMode, opts: ForwardOptions<'_>) -> Result<Forward> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| match mode {
                ParamMode::Tracked => tape.leaf(&t.clone().with_requires_grad(true)),
                ParamMode::Constant => tape.constant(t.clone()),
            })
            .collect();
        let mut x = input;
        let mut conv = 0;
        let mut taps = Vec::new();
        let mut conv_inputs = Vec::new();
        let mut conv_outputs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { stride, padding, .. } => {
                    conv_inputs.push(x);
                    x = tape.conv2d(x, params[2 * conv], params[2 * conv + 1], stride, padding)?;
                    conv_outputs.push(x);
                    conv += 1;
                }
                LayerSpec::AvgPool { kernel, stride } => x = tape.avg_pool2d(x, kernel, stride)?,
                LayerSpec::Relu => x = tape.relu(x)?,
                LayerSpec::BilinearUp { height, width } => x = tape.bilinear_resize(x, height, width)?,
            }
            let ends_conv = conv > taps.len() && !matches!(self.layers.get(i + 1), Some(LayerSpec::Relu));
            if ends_conv {
                if let Some(Some(q)) = opts.activation_quant.and_then(|qs| qs.get(conv - 1)) {
                    x = q.fake_quant(tape, x)?;
                }
                taps.push(x);
            }
        }
        Ok(Forward {
            output: x,
            taps,
            conv_inputs,
            conv_outputs,
            params,
        })
    }

    /// Plain forward returning the output and the per-conv taps, batch axis stripped for single images.
    pub fn forward_with_taps(&self, image: &Tensor) -> Result<(Tensor, LayerTaps)> {
        let input = batched(image)?;
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let f = self.forward(&mut tape, x, ParamMode::Constant, ForwardOptions::default())?;
        let taps = f.taps.iter().map(|&v| tape.tensor(v)).collect();
        Ok((tape.tensor(f.output), LayerTaps(taps)))
    }

    /// Adds gradients from a backward pass into the parameters bound by `forward`.
    pub fn accumulate_grads(&mut self, grads: &Gradients, bound: &[Var]) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        for ((_, p), &v) in self.params.iter_mut().zip(bound) {
            match grads.get(v) {
                Some(g) => p.accumulate_grad(g)?,
                None => p.accumulate_grad(&vec![0.0; p.numel()])?,
            }
        }
        Ok(())
    }

    /// One Adam update; frozen networks are left untouched.
    pub fn adam_step(&mut self, state: &mut AdamState) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        adam_step(self.params_mut(), state)
    }

    /// Parameters under `<prefix>.<name>` for checkpointing.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(n, t)| (format!("{prefix}.{n}"), Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap()))
            .collect()
    }

    /// Loads `<prefix>.<name>` entries written by [`Network::named_tensors`].
    pub fn load_named(&mut self, prefix: &str, entries: &[(String, Tensor)]) -> Result<()> {
        for (name, p) in &mut self.params {
            let key = format!("{prefix}.{name}");
            let (_, t) = entries
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks `{key}`")))?;
            if t.shape() != p.shape() {
                return Err(Error::dim("load_named", &key, format!("{:?} vs {:?}", t.shape(), p.shape())));
            }
            p.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Text table of the layer stack for an input of shape `(c, h, w)`.
    pub fn summary(&self, input: (usize, usize, usize)) -> Result<String> {
        let mut out = format!("# {} ({} parameters)\n", self.name, self.num_parameters());
        out.push_str("idx kind        in  out kernel stride output\n");
        let mut shape = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(shape)?;
            let (kernel, stride) = match *layer {
                LayerSpec::Conv { kernel, stride, .. } | LayerSpec::AvgPool { kernel, stride } => {
                    (kernel.to_string(), stride.to_string())
                }
                _ => ("-".into(), "-".into()),
            };
            writeln!(
                out,
                "{i:<3} {:<11} {:<3} {:<3} {kernel:<6} {stride:<6} {}x{}x{}",
                layer.kind(),
                shape.0,
                next.0,
                next.0,
                next.1,
                next.2
            )
            .unwrap();
            shape = next;
        }
        Ok(out)
    }
}

/// `[C, H, W]` → `[1, C, H, W]`; rank-4 inputs pass through.
pub fn batched(image: &Tensor) -> Result<Tensor> {
    match *image.shape() {
        [c, h, w] => image.clone().reshape(vec![1, c, h, w]),
        [_, _, _, _] => Ok(image.clone()),
        _ => Err(Error::dim("batched", "rank", format!("{:?}", image.shape()))),
    }
}

fn pdn_layers(out_channels: usize, widths: PdnWidths) -> Vec<LayerSpec> {
    let [h1, h2, h3] = widths.0;
    vec![
        LayerSpec::conv(3, h1, 5, 1, 2),
        LayerSpec::Relu,
        LayerSpec::AvgPool { kernel: 2, stride: 2 },
        LayerSpec::conv(h1, h2, 5, 1, 0),
        LayerSpec::Relu,
        LayerSpec::AvgPool { kernel: 2, stride: 2 },
        LayerSpec::conv(h2, h3, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::conv(h3, out_channels, 3, 1, 1),
    ]
}

/// Four-conv patch description network; final channels are `out_channels * width_multiplier`.
pub fn build_pdn(
    name: &str,
    out_channels: usize,
    width_multiplier: usize,
    widths: PdnWidths,
    seed: u64,
) -> Result<Network> {
    if out_channels == 0 || width_multiplier == 0 {
        return Err(Error::Parameter("PDN needs out_channels ≥ 1 and multiplier ≥ 1".into()));
    }
    let mut r = rng::rng(seed);
    Ok(Network::new(name, pdn_layers(out_channels * width_multiplier, widths), &mut r))
}

/// Frozen randomly initialized PDN-shaped feature extractor.
pub fn build_extractor(out_channels: usize, widths: PdnWidths, seed: u64) -> Result<Network> {
    let mut net = build_pdn("extractor", out_channels, 1, widths, rng::derive_seed(seed, "extractor", 0))?;
    net.set_frozen(true);
    Ok(net)
}

/// Strided-conv encoder to a `latent`-dim vector and bilinear-up decoder to `feature_size²`.
pub fn build_autoencoder(
    latent: usize,
    out_channels: usize,
    image_size: usize,
    feature_size: usize,
    hidden: usize,
    seed: u64,
) -> Result<Network> {
    if latent == 0 || out_channels == 0 {
        return Err(Error::Parameter("autoencoder needs latent ≥ 1 and out_channels ≥ 1".into()));
    }
    if !image_size.is_multiple_of(8) || image_size < 16 {
        return Err(Error::Parameter(format!("autoencoder input size {image_size} must be a multiple of 8, ≥ 16")));
    }
    let bottom = image_size / 8;
    let mid = feature_size.div_ceil(2).max(2);
    let layers = vec![
        LayerSpec::conv(3, hidden / 2, 4, 2, 1),
        LayerSpec::Relu,
        LayerSpec::conv(hidden / 2, hidden, 4, 2, 1),
        LayerSpec::Relu,
        LayerSpec::conv(hidden, hidden, 4, 2, 1),
        LayerSpec::Relu,
        LayerSpec::conv(hidden, latent, bottom, 1, 0),
        LayerSpec::BilinearUp { height: 4, width: 4 },
        LayerSpec::conv(latent, hidden, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::BilinearUp { height: mid, width: mid },
        LayerSpec::conv(hidden, hidden, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::BilinearUp {
            height: feature_size,
            width: feature_size,
        },
        LayerSpec::conv(hidden, hidden, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::conv(hidden, out_channels, 3, 1, 1),
    ];
    let mut r = rng::rng(seed);
    Ok(Network::new("autoencoder", layers, &mut r))
}
