//! Per-layer teacher/student tap discrepancy scores and the bit-width policy
//! that maps them to {2, 3, 4, 8} bits.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::models::{LayerTaps, Network};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerScore {
    /// 0-based conv index.
    pub layer: usize,
    pub raw: f64,
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BitPolicy {
    /// Ascending cut points; a score below `thresholds[i]` gets `bits[i]`.
    pub thresholds: [f64; 3],
    pub bits: [u32; 4],
    pub forced_layers: BTreeSet<usize>,
}

impl BitPolicy {
    /// Quartile buckets over {2,3,4,8} with the first and last layer pinned to 8 bits.
    pub fn new(layers: usize) -> Self {
        let forced_layers = [0, layers.saturating_sub(1)].into_iter().collect();
        Self {
            thresholds: [0.25, 0.5, 0.75],
            bits: [2, 3, 4, 8],
            forced_layers,
        }
    }

    pub fn bits_for(&self, score: f64) -> u32 {
        let bucket = self.thresholds.iter().take_while(|&&t| score >= t).count();
        self.bits[bucket]
    }
}

/// Mean squared tap difference per layer, averaged over images. The final
/// teacher layer is compared against the first half of the student's channels.
pub fn layer_scores(teacher: &[LayerTaps], student: &[LayerTaps]) -> Result<Vec<LayerScore>> {
    if teacher.is_empty() || teacher.len() != student.len() {
        return Err(Error::Contract(format!(
            "layer_scores needs equal, nonempty tap sets (got {} and {})",
            teacher.len(),
            student.len()
        )));
    }
    let layers = teacher[0].len();
    let mut raw = vec![0.0; layers];
    for (t, s) in teacher.iter().zip(student) {
        if t.len() != layers || s.len() != layers {
            return Err(Error::Contract("tap sets differ in layer count".into()));
        }
        for l in 0..layers {
            raw[l] += tap_mse(&t.0[l], &s.0[l], l)?;
        }
    }
    let n = teacher.len() as f64;
    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(layer, r)| LayerScore {
            layer,
            raw: r / n,
            normalized: 0.0,
        })
        .collect())
}

fn tap_mse(t: &Tensor, s: &Tensor, layer: usize) -> Result<f64> {
    let mismatch = || Error::Contract(format!("tap shape mismatch at layer {}: {:?} vs {:?}", layer + 1, t.shape(), s.shape()));
    let (ts, ss) = (t.shape(), s.shape());
    if ts.len() < 3 || ts.len() != ss.len() {
        return Err(mismatch());
    }
    let c_axis = ts.len() - 3;
    if ts[..c_axis] != ss[..c_axis] || ts[c_axis + 1..] != ss[c_axis + 1..] || ss[c_axis] < ts[c_axis] {
        return Err(mismatch());
    }
    let batch: usize = ts[..c_axis].iter().product();
    let (tc, sc) = (ts[c_axis], ss[c_axis]);
    if batch != 1 || (sc != tc && sc != 2 * tc) {
        return Err(mismatch());
    }
    // The student's leading channels are its teacher head.
    let len = t.numel();
    let sum: f64 = t.data().iter().zip(&s.data()[..len]).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / len as f64)
}

/// Min-max normalization to [0, 1]; all-equal raws map to 0.5.
pub fn normalize_scores(scores: &[LayerScore]) -> Result<Vec<LayerScore>> {
    if scores.is_empty() {
        return Err(Error::Contract("normalize_scores needs at least one layer".into()));
    }
    let lo = scores.iter().map(|s| s.raw).fold(f64::INFINITY, f64::min);
    let hi = scores.iter().map(|s| s.raw).fold(f64::NEG_INFINITY, f64::max);
    Ok(scores
        .iter()
        .map(|s| LayerScore {
            normalized: if hi > lo { (s.raw - lo) / (hi - lo) } else { 0.5 },
            ..s.clone()
        })
        .collect())
}

pub fn assign_bits(scores: &[LayerScore], policy: &BitPolicy) -> Vec<u32> {
    scores
        .iter()
        .map(|s| {
            if policy.forced_layers.contains(&s.layer) {
                8
            } else {
                policy.bits_for(s.normalized)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HqsResult {
    pub scores: Vec<LayerScore>,
    pub bits: Vec<u32>,
    pub policy: BitPolicy,
}

impl HqsResult {
    /// Report lines `layer,raw_score,normalized,bits,forced`, layers numbered from 1.
    pub fn report(&self) -> String {
        let mut out = String::from("layer,raw_score,normalized,bits,forced\n");
        for (s, b) in self.scores.iter().zip(&self.bits) {
            writeln!(
                out,
                "{},{:.17e},{:.6},{},{}",
                s.layer + 1,
                s.raw,
                s.normalized,
                b,
                self.policy.forced_layers.contains(&s.layer)
            )
            .unwrap();
        }
        out
    }
}

/// Scores the trained teacher/student pair on `calib` and assigns shared per-layer bits.
pub fn hqs_pipeline(teacher: &Network, student: &Network, calib: &[Tensor], policy: &BitPolicy) -> Result<HqsResult> {
    if teacher.conv_count() != student.conv_count() {
        return Err(Error::Contract("teacher and student differ in conv count".into()));
    }
    let mut tt = Vec::with_capacity(calib.len());
    let mut st = Vec::with_capacity(calib.len());
    for image in calib {
        tt.push(teacher.forward_with_taps(image)?.1);
        st.push(student.forward_with_taps(image)?.1);
    }
    let scores = normalize_scores(&layer_scores(&tt, &st)?)?;
    if policy.forced_layers.iter().any(|&l| l >= scores.len()) {
        return Err(Error::Contract("bit policy pins a layer the network does not have".into()));
    }
    let bits = assign_bits(&scores, policy);
    Ok(HqsResult {
        scores,
        bits,
        policy: policy.clone(),
    })
}
