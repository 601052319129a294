//! Image-level AUROC and average precision, pixel-level AU-PRO, and the
//! per-stage evaluation report.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::Label;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub label: Label,
    pub pixel_mask: Option<Vec<bool>>,
}

impl ScoredSample {
    pub fn new(score: f64, label: Label) -> Self {
        Self {
            score,
            label,
            pixel_mask: None,
        }
    }
}

fn counts(samples: &[ScoredSample]) -> (usize, usize) {
    let pos = samples.iter().filter(|s| s.label == Label::Anomalous).count();
    (pos, samples.len() - pos)
}

fn check_scores(samples: &[ScoredSample]) -> Result<()> {
    if samples.iter().any(|s| s.score.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    Ok(())
}

/// Mann-Whitney AUROC; tied pairs count one half.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    check_scores(samples)?;
    let (pos, neg) = counts(samples);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!("AUROC needs both labels ({pos} anomalous, {neg} normal)")));
    }
    let mut order: Vec<&ScoredSample> = samples.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score));
    // Twice the rank sum of positives, using midranks for ties, stays integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && order[j].score == order[i].score {
            j += 1;
        }
        let twice_mid = (i + 1 + j) as u64;
        let group_pos = order[i..j].iter().filter(|s| s.label == Label::Anomalous).count() as u64;
        twice_rank_sum += twice_mid * group_pos;
        i = j;
    }
    let twice_u = twice_rank_sum - (pos * (pos + 1)) as u64;
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Average of precision at each anomalous sample's rank, scores descending;
/// within a tie, normal samples rank first.
pub fn average_precision(samples: &[ScoredSample]) -> Result<f64> {
    check_scores(samples)?;
    let (pos, _) = counts(samples);
    if pos == 0 {
        return Err(Error::UndefinedMetric("average precision needs an anomalous sample".into()));
    }
    let mut order: Vec<&ScoredSample> = samples.iter().collect();
    order.sort_by(|a, b| {
        b.score.total_cmp(&a.score).then_with(|| match (a.label, b.label) {
            (Label::Normal, Label::Anomalous) => Ordering::Less,
            (Label::Anomalous, Label::Normal) => Ordering::Greater,
            _ => Ordering::Equal,
        })
    });
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, s) in order.iter().enumerate() {
        if s.label == Label::Anomalous {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

/// 4-connected components of a `height × width` mask, as pixel index lists.
pub fn connected_regions(mask: &[bool], height: usize, width: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut regions = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut region = Vec::new();
        while let Some(p) = stack.pop() {
            region.push(p);
            let (y, x) = (p / width, p % width);
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
        }
        region.sort_unstable();
        regions.push(region);
    }
    regions
}

/// Most thresholds evaluated by [`au_pro`]; larger value sets are quantile-subsampled.
pub const MAX_PRO_THRESHOLDS: usize = 512;

/// Descending thresholds: every unique value, or evenly spaced order statistics when there are too many.
pub fn pro_thresholds(values: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() > MAX_PRO_THRESHOLDS {
        let n = sorted.len();
        let picked: Vec<f64> = (0..MAX_PRO_THRESHOLDS)
            .map(|j| sorted[j * (n - 1) / (MAX_PRO_THRESHOLDS - 1)])
            .collect();
        sorted = picked;
        sorted.dedup();
    }
    sorted.reverse();
    sorted
}

/// Trapezoid area under `(fpr, overlap)` points (fpr ascending) up to `limit`, divided by `limit`.
pub fn integrate_to_limit(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area / limit
}

struct ProInput {
    regions: Vec<Vec<(usize, usize)>>,
    normal_pixels: usize,
}

fn check_pro_input(maps: &[Tensor], masks: &[Vec<bool>], fpr_limit: f64) -> Result<ProInput> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Parameter(format!("fpr_limit {fpr_limit} outside (0, 1]")));
    }
    if maps.len() != masks.len() {
        return Err(Error::dim("au_pro", "images", format!("{} maps vs {} masks", maps.len(), masks.len())));
    }
    let mut regions = Vec::new();
    let mut normal_pixels = 0;
    for (i, (m, k)) in maps.iter().zip(masks).enumerate() {
        let &[h, w] = m.shape() else {
            return Err(Error::dim("au_pro", "rank", format!("map {i} has shape {:?}", m.shape())));
        };
        if k.len() != h * w {
            return Err(Error::dim("au_pro", "pixels", format!("map {i}: {} vs mask {}", h * w, k.len())));
        }
        if m.data().iter().any(|v| v.is_nan()) {
            return Err(Error::UndefinedMetric("NaN in anomaly map".into()));
        }
        normal_pixels += k.iter().filter(|&&b| !b).count();
        regions.extend(connected_regions(k, h, w).into_iter().map(|r| r.into_iter().map(|p| (i, p)).collect()));
    }
    if regions.is_empty() {
        return Err(Error::UndefinedMetric("AU-PRO needs at least one anomalous pixel".into()));
    }
    if normal_pixels == 0 {
        return Err(Error::UndefinedMetric("AU-PRO needs at least one normal pixel".into()));
    }
    Ok(ProInput { regions, normal_pixels })
}

/// Area under the per-region-overlap vs false-positive-rate curve up to
/// `fpr_limit`, normalized by the limit. Maps are `[H, W]`; regions are the
/// 4-connected components of each mask.
pub fn au_pro(maps: &[Tensor], masks: &[Vec<bool>], fpr_limit: f64) -> Result<f64> {
    let input = check_pro_input(maps, masks, fpr_limit)?;
    // Pixel list: (value, region id or usize::MAX for normal pixels).
    let mut region_of: Vec<Vec<usize>> = maps.iter().map(|m| vec![usize::MAX; m.numel()]).collect();
    for (r, region) in input.regions.iter().enumerate() {
        for &(i, p) in region {
            region_of[i][p] = r;
        }
    }
    let mut pixels: Vec<(f64, usize)> = Vec::new();
    for (i, m) in maps.iter().enumerate() {
        for (p, &v) in m.data().iter().enumerate() {
            let r = region_of[i][p];
            if r != usize::MAX || !masks[i][p] {
                pixels.push((v, r));
            }
        }
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let thresholds = pro_thresholds(&pixels.iter().map(|p| p.0).collect::<Vec<_>>());
    let sizes: Vec<f64> = input.regions.iter().map(|r| r.len() as f64).collect();
    let mut hits = vec![0usize; sizes.len()];
    let mut fp = 0usize;
    let mut next = 0;
    let mut points = vec![(0.0, 0.0)];
    for t in thresholds {
        while next < pixels.len() && pixels[next].0 >= t {
            match pixels[next].1 {
                usize::MAX => fp += 1,
                r => hits[r] += 1,
            }
            next += 1;
        }
        let overlap = hits.iter().zip(&sizes).map(|(&h, s)| h as f64 / s).sum::<f64>() / sizes.len() as f64;
        points.push((fp as f64 / input.normal_pixels as f64, overlap));
    }
    Ok(integrate_to_limit(&points, fpr_limit))
}

/// Brute-force reference implementations used by the test suite.
pub mod oracle {
    use super::*;

    /// Explicit double loop over (normal, anomalous) pairs.
    pub fn oracle_auroc(samples: &[ScoredSample]) -> Result<f64> {
        check_scores(samples)?;
        let (pos, neg) = counts(samples);
        if pos == 0 || neg == 0 {
            return Err(Error::UndefinedMetric("AUROC needs both labels".into()));
        }
        let mut twice_wins = 0u64;
        for a in samples.iter().filter(|s| s.label == Label::Anomalous) {
            for n in samples.iter().filter(|s| s.label == Label::Normal) {
                twice_wins += match a.score.partial_cmp(&n.score).unwrap() {
                    Ordering::Greater => 2,
                    Ordering::Equal => 1,
                    Ordering::Less => 0,
                };
            }
        }
        Ok(twice_wins as f64 / (2 * pos * neg) as f64)
    }

    /// Precision at each anomalous sample, counting everything ranked at or above it.
    pub fn oracle_ap(samples: &[ScoredSample]) -> Result<f64> {
        check_scores(samples)?;
        let anomalous: Vec<(usize, &ScoredSample)> =
            samples.iter().enumerate().filter(|(_, s)| s.label == Label::Anomalous).collect();
        if anomalous.is_empty() {
            return Err(Error::UndefinedMetric("average precision needs an anomalous sample".into()));
        }
        // Tied anomalous samples are ordered among themselves by input position.
        let mut sum = 0.0;
        for &(i, a) in &anomalous {
            let above_pos = anomalous
                .iter()
                .filter(|&&(j, b)| b.score > a.score || (b.score == a.score && j <= i))
                .count();
            let above_neg = samples.iter().filter(|s| s.label == Label::Normal && s.score >= a.score).count();
            sum += above_pos as f64 / (above_pos + above_neg) as f64;
        }
        Ok(sum / anomalous.len() as f64)
    }

    /// Every threshold evaluated independently over every pixel.
    pub fn oracle_au_pro(maps: &[Tensor], masks: &[Vec<bool>], fpr_limit: f64) -> Result<f64> {
        let input = check_pro_input(maps, masks, fpr_limit)?;
        let mut values: Vec<f64> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
        values.sort_by(|a, b| b.total_cmp(a));
        values.dedup();
        let mut points = vec![(0.0, 0.0)];
        for &t in &values {
            let mut fp = 0usize;
            for (m, k) in maps.iter().zip(masks) {
                fp += m.data().iter().zip(k).filter(|(&v, &a)| !a && v >= t).count();
            }
            let overlap: f64 = input
                .regions
                .iter()
                .map(|r| r.iter().filter(|&&(i, p)| maps[i].data()[p] >= t).count() as f64 / r.len() as f64)
                .sum::<f64>()
                / input.regions.len() as f64;
            points.push((fp as f64 / input.normal_pixels as f64, overlap));
        }
        Ok(integrate_to_limit(&points, fpr_limit))
    }
}

/// Metrics for one pipeline stage.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub stage: String,
    pub auroc: f64,
    pub ap: f64,
    pub aupro: f64,
    pub bias_mass: f64,
    pub n_normal: usize,
    pub n_anom: usize,
    pub seed: u64,
}

impl EvalReport {
    pub const HEADER: &'static str = "stage,auroc,ap,aupro,bias_mass,n_normal,n_anom,seed";

    pub fn parse_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Contract(format!("malformed report line `{line}`"));
        if f.len() != 8 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            stage: f[0].to_owned(),
            auroc: num(f[1])?,
            ap: num(f[2])?,
            aupro: num(f[3])?,
            bias_mass: num(f[4])?,
            n_normal: f[5].parse().map_err(|_| bad())?,
            n_anom: f[6].parse().map_err(|_| bad())?,
            seed: f[7].parse().map_err(|_| bad())?,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{},{},{}",
            self.stage, self.auroc, self.ap, self.aupro, self.bias_mass, self.n_normal, self.n_anom, self.seed
        )
    }
}
