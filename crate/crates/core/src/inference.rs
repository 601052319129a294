//! Anomaly maps from teacher/student and autoencoder/student discrepancies,
//! bias-mass aggregation and heatmap export.

use crate::error::{Error, Result};
use crate::io::{to_byte, Raster};
use crate::models::{batched, ForwardOptions, Network, ParamMode};
use crate::quant::QuantScheme;
use crate::tensor::{Tape, Tensor};

/// Elementwise squared difference of two feature stacks.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffCube(pub Tensor);

pub fn diff_cube(a: &Tensor, b: &Tensor) -> Result<DiffCube> {
    if a.shape() != b.shape() {
        return Err(Error::dim("diff_cube", "all", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).collect();
    Ok(DiffCube(Tensor::new(a.shape().to_vec(), data)?))
}

/// Per-pixel mean over channels of a `[C, H, W]` (or `[1, C, H, W]`) cube.
pub fn channel_mean(d: &DiffCube) -> Result<Tensor> {
    let (c, h, w) = match *d.0.shape() {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => return Err(Error::dim("channel_mean", "rank", format!("{:?}", d.0.shape()))),
    };
    if c == 0 {
        return Err(Error::dim("channel_mean", "channels", "C must be ≥ 1"));
    }
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for ch in d.0.data().chunks(plane) {
        out.iter_mut().zip(ch).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= c as f64);
    Tensor::new(vec![h, w], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    pub local: Tensor,
    pub global: Tensor,
    pub combined: Tensor,
    /// `combined` resized to the input resolution.
    pub resized: Tensor,
    pub image_score: f64,
}

fn resize_map(map: &Tensor, (h, w): (usize, usize)) -> Result<Tensor> {
    let (mh, mw) = (map.shape()[0], map.shape()[1]);
    let mut tape = Tape::new();
    let x = tape.constant(map.clone().reshape(vec![1, 1, mh, mw])?);
    let y = tape.bilinear_resize(x, h, w)?;
    tape.tensor(y).reshape(vec![h, w])
}

/// Local map from teacher vs student teacher head, global map from autoencoder
/// vs student autoencoder head, averaged and resized to `input_size`.
pub fn compose_maps(
    teacher_out: &Tensor,
    student_teacher_head: &Tensor,
    ae_out: &Tensor,
    student_ae_head: &Tensor,
    input_size: (usize, usize),
) -> Result<AnomalyMap> {
    let local = channel_mean(&diff_cube(teacher_out, student_teacher_head)?)?;
    let global = channel_mean(&diff_cube(ae_out, student_ae_head)?)?;
    if local.shape() != global.shape() {
        return Err(Error::dim("compose_maps", "spatial", format!("{:?} vs {:?}", local.shape(), global.shape())));
    }
    let combined_data = local.data().iter().zip(global.data()).map(|(a, b)| (a + b) / 2.0).collect();
    let combined = Tensor::new(local.shape().to_vec(), combined_data)?;
    let resized = resize_map(&combined, input_size)?;
    let image_score = resized.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(AnomalyMap {
        local,
        global,
        combined,
        resized,
        image_score,
    })
}

/// Share of the mean heatmap's mass that falls inside `region`.
pub fn bias_mass(maps: &[AnomalyMap], region: &[bool]) -> Result<f64> {
    if !region.iter().any(|&m| m) {
        return Err(Error::Parameter("bias_mass needs a nonempty region mask".into()));
    }
    let first = maps.first().ok_or_else(|| Error::Parameter("bias_mass needs at least one map".into()))?;
    if first.resized.numel() != region.len() {
        return Err(Error::dim("bias_mass", "pixels", format!("{} vs {}", first.resized.numel(), region.len())));
    }
    let mut mean = vec![0.0; region.len()];
    for m in maps {
        if m.resized.shape() != first.resized.shape() {
            return Err(Error::dim("bias_mass", "pixels", "maps differ in size"));
        }
        mean.iter_mut().zip(m.resized.data()).for_each(|(a, v)| *a += v);
    }
    let total: f64 = mean.iter().sum();
    if !(total > 0.0) {
        return Err(Error::UndefinedMetric("bias_mass of an all-zero mean heatmap".into()));
    }
    let inside: f64 = mean.iter().zip(region).filter(|(_, &r)| r).map(|(v, _)| v).sum();
    Ok(inside / total)
}

/// The three networks used at test time, with optional activation fake-quant per network.
#[derive(Clone, Debug)]
pub struct Detector {
    pub teacher: Network,
    pub student: Network,
    pub ae: Network,
    pub teacher_act: Option<Vec<Option<QuantScheme>>>,
    pub student_act: Option<Vec<Option<QuantScheme>>>,
}

impl Detector {
    pub fn new(teacher: Network, student: Network, ae: Network) -> Self {
        Self {
            teacher,
            student,
            ae,
            teacher_act: None,
            student_act: None,
        }
    }

    fn run(net: &Network, acts: &Option<Vec<Option<QuantScheme>>>, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let opts = ForwardOptions {
            activation_quant: acts.as_deref(),
        };
        let f = net.forward(&mut tape, x, ParamMode::Constant, opts)?;
        Ok(tape.tensor(f.output))
    }

    /// Anomaly map of one `[3, H, W]` image.
    pub fn map(&self, image: &Tensor) -> Result<AnomalyMap> {
        let input = batched(image)?;
        let (h, w) = (input.shape()[2], input.shape()[3]);
        let t = Self::run(&self.teacher, &self.teacher_act, &input)?;
        let s = Self::run(&self.student, &self.student_act, &input)?;
        let a = Self::run(&self.ae, &None, &input)?;
        let c = t.shape()[1];
        if s.shape()[1] != 2 * c {
            return Err(Error::dim("Detector::map", "channels (1)", "student must have twice the teacher channels"));
        }
        let plane = s.numel() / s.shape()[1];
        let head = |start: usize| Tensor::new(t.shape().to_vec(), s.data()[start * plane..(start + c) * plane].to_vec());
        compose_maps(&t, &head(0)?, &a, &head(c)?, (h, w))
    }
}

/// Per-image min-max scaled grayscale heatmap.
pub fn heatmap_raster(map: &AnomalyMap) -> Raster {
    let (h, w) = (map.resized.shape()[0], map.resized.shape()[1]);
    let d = map.resized.data();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels = d
        .iter()
        .map(|&v| if span > 0.0 { to_byte((v - lo) / span) } else { 0 })
        .collect();
    Raster::gray(w, h, pixels)
}

/// Input image blended with the heatmap (in the red channel) at alpha 0.5.
pub fn overlay_raster(image: &Tensor, map: &AnomalyMap) -> Result<Raster> {
    let base = Raster::from_tensor(image)?;
    let heat = heatmap_raster(map);
    if (base.width, base.height) != (heat.width, heat.height) {
        return Err(Error::dim("overlay_raster", "spatial", "image and map differ in size"));
    }
    let mut pixels = base.pixels.clone();
    for (p, &hv) in heat.pixels.iter().enumerate() {
        let tint = [hv, 0, 255 - hv];
        for c in 0..3 {
            let v = 0.5 * base.pixels[3 * p + c] as f64 + 0.5 * tint[c] as f64;
            pixels[3 * p + c] = v.round() as u8;
        }
    }
    Ok(Raster::rgb(base.width, base.height, pixels))
}

pub fn heatmap_file_stem(split: &str, index: usize, stage: &str) -> String {
    format!("{split}_{index}_{stage}")
}
