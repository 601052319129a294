//! Teacher pretraining against the frozen extractor and joint
//! student/autoencoder training with hard-mined teacher-student loss.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{batched, ForwardOptions, Network, ParamMode};
use crate::quant::QuantScheme;
use crate::rng;
use crate::tensor::{AdamState, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_ts: f64,
    pub lambda_aes: f64,
    pub lambda_tae: f64,
    pub lr: f64,
    pub iterations: usize,
    pub batch: usize,
    pub hard_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_ts: 1.0,
            lambda_aes: 1.0,
            lambda_tae: 1.0,
            lr: 1e-3,
            iterations: 2000,
            batch: 1,
            hard_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_ts, self.lambda_aes, self.lambda_tae];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Parameter("loss weights must be finite and ≥ 0".into()));
        }
        if !(self.hard_fraction > 0.0 && self.hard_fraction <= 1.0) {
            return Err(Error::Parameter(format!("hard_fraction {} outside (0, 1]", self.hard_fraction)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Parameter(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Parameter("batch must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// `(CWH)⁻¹ Σ_c ‖a_c − b_c‖²_F`.
pub fn pair_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("pair_loss", "all", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(Error::Contract("pair_loss on empty tensors".into()));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.numel() as f64)
}

/// Mean of the `⌈fraction·n⌉` largest entries of a squared-difference cube on the tape.
pub fn hard_mined_loss(tape: &mut Tape, d: Var, fraction: f64) -> Result<Var> {
    tape.top_fraction_mean(d, fraction)
}

/// Per-iteration loss values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ts: f64,
    pub aes: f64,
    pub tae: f64,
    pub total: f64,
}

/// Loss log with a header and lines `iter,L_ts,L_aes,L_tae,total`, iterations from 1.
pub fn format_loss_log(log: &[LossBreakdown]) -> String {
    let mut out = String::from("iter,L_ts,L_aes,L_tae,total\n");
    for (i, l) in log.iter().enumerate() {
        writeln!(out, "{},{:.16e},{:.16e},{:.16e},{:.16e}", i + 1, l.ts, l.aes, l.tae, l.total).unwrap();
    }
    out
}

/// Draws `batch` image indices per iteration from a seeded stream.
struct Sampler {
    rng: rng::Rng64,
    n: usize,
    batch: usize,
}

impl Sampler {
    fn new(seed: u64, label: &str, n: usize, batch: usize) -> Self {
        Self {
            rng: rng::rng(rng::derive_seed(seed, label, 0)),
            n,
            batch,
        }
    }

    fn next(&mut self, images: &[Tensor]) -> Result<Tensor> {
        let picks = (0..self.batch)
            .map(|_| batched(&images[self.rng.gen_range(0..self.n)]))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack_batch(&picks.iter().collect::<Vec<_>>())
    }
}

fn check_images(images: &[Tensor]) -> Result<()> {
    match images.first() {
        None => Err(Error::Contract("training needs at least one image".into())),
        Some(f) if images.iter().any(|i| i.shape() != f.shape()) => {
            Err(Error::Contract("training images differ in shape".into()))
        }
        Some(_) => Ok(()),
    }
}

/// Fits the teacher to the frozen extractor's features; returns the per-iteration loss.
pub fn pretrain_teacher(teacher: &mut Network, extractor: &Network, images: &[Tensor], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_images(images)?;
    if !extractor.frozen {
        return Err(Error::Contract("extractor must be frozen".into()));
    }
    let s = images[0].shape();
    let input = (s[0], s[1], s[2]);
    let (eo, to) = (extractor.output_shape(input)?, teacher.output_shape(input)?);
    if eo != to {
        return Err(Error::Config {
            path: "model".into(),
            detail: format!("extractor output {eo:?} does not match teacher output {to:?}"),
        });
    }
    let mut adam = AdamState::new(cfg.lr);
    let mut sampler = Sampler::new(cfg.seed, "pretrain", images.len(), cfg.batch);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let batch = sampler.next(images)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let e = extractor.forward(&mut tape, x, ParamMode::Constant, ForwardOptions::default())?;
        let t = teacher.forward(&mut tape, x, ParamMode::Tracked, ForwardOptions::default())?;
        let loss = tape.mse_mean(e.output, t.output)?;
        let grads = tape.backward(loss)?;
        teacher.accumulate_grads(&grads, &t.params)?;
        teacher.adam_step(&mut adam)?;
        trace.push(tape.scalar(loss));
    }
    Ok(trace)
}

/// Records the three losses for one batch and returns `(breakdown, total, student fwd params, ae fwd params)`.
fn joint_losses(
    tape: &mut Tape,
    teacher: Teacher<'_>,
    student: &Network,
    ae: &Network,
    batch: Tensor,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Var, Vec<Var>, Vec<Var>)> {
    let x = tape.constant(batch);
    let opts = ForwardOptions {
        activation_quant: teacher.activation_quant,
    };
    let t = teacher.net.forward(tape, x, ParamMode::Constant, opts)?;
    let s = student.forward(tape, x, ParamMode::Tracked, ForwardOptions::default())?;
    let a = ae.forward(tape, x, ParamMode::Tracked, ForwardOptions::default())?;
    let c = tape.shape(t.output)[1];
    if tape.shape(s.output)[1] != 2 * c {
        return Err(Error::dim("joint_step", "channels (1)", "student must have twice the teacher channels"));
    }
    let s_teacher = tape.narrow_channels(s.output, 0, c)?;
    let s_ae = tape.narrow_channels(s.output, c, c)?;
    let diff = tape.sub(t.output, s_teacher)?;
    let d = tape.square(diff)?;
    let l_ts = hard_mined_loss(tape, d, cfg.hard_fraction)?;
    let l_aes = tape.mse_mean(a.output, s_ae)?;
    let l_tae = tape.mse_mean(t.output, a.output)?;
    let w_ts = tape.scale(l_ts, cfg.lambda_ts)?;
    let w_aes = tape.scale(l_aes, cfg.lambda_aes)?;
    let w_tae = tape.scale(l_tae, cfg.lambda_tae)?;
    let partial = tape.add(w_ts, w_aes)?;
    let total = tape.add(partial, w_tae)?;
    let breakdown = LossBreakdown {
        ts: tape.scalar(l_ts),
        aes: tape.scalar(l_aes),
        tae: tape.scalar(l_tae),
        total: tape.scalar(total),
    };
    Ok((breakdown, total, s.params, a.params))
}

/// The frozen teacher, optionally with activation fake-quant on its taps.
#[derive(Clone, Copy, Debug)]
pub struct Teacher<'a> {
    pub net: &'a Network,
    pub activation_quant: Option<&'a [Option<QuantScheme>]>,
}

impl<'a> From<&'a Network> for Teacher<'a> {
    fn from(net: &'a Network) -> Self {
        Self {
            net,
            activation_quant: None,
        }
    }
}

/// Adam state for the two trainable networks.
#[derive(Clone, Debug)]
pub struct JointOptimizer {
    pub student: AdamState,
    pub ae: AdamState,
}

impl JointOptimizer {
    pub fn new(lr: f64) -> Self {
        Self {
            student: AdamState::new(lr),
            ae: AdamState::new(lr),
        }
    }
}

/// One joint update of student and autoencoder on `batch` (`[B, 3, H, W]`).
pub fn joint_step<'a>(
    teacher: impl Into<Teacher<'a>>,
    student: &mut Network,
    ae: &mut Network,
    batch: Tensor,
    cfg: &TrainConfig,
    opt: &mut JointOptimizer,
) -> Result<LossBreakdown> {
    let teacher = teacher.into();
    if !teacher.net.frozen {
        return Err(Error::Contract("teacher must be frozen during joint training".into()));
    }
    let mut tape = Tape::new();
    let (breakdown, total, sp, ap) = joint_losses(&mut tape, teacher, student, ae, batch, cfg)?;
    let grads = tape.backward(total)?;
    student.accumulate_grads(&grads, &sp)?;
    ae.accumulate_grads(&grads, &ap)?;
    student.adam_step(&mut opt.student)?;
    ae.adam_step(&mut opt.ae)?;
    Ok(breakdown)
}

/// Loss breakdown on `batch` without updating anything.
pub fn evaluate_losses<'a>(
    teacher: impl Into<Teacher<'a>>,
    student: &Network,
    ae: &Network,
    batch: Tensor,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    Ok(joint_losses(&mut tape, teacher.into(), student, ae, batch, cfg)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

/// Joint training for `cfg.iterations` steps on normal images. `label` names the
/// sampling stream so training and fine-tuning draw different orders.
pub fn train<'a>(
    teacher: impl Into<Teacher<'a>>,
    student: &mut Network,
    ae: &mut Network,
    images: &[Tensor],
    labels: &[Label],
    cfg: &TrainConfig,
    label: &str,
) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    check_images(images)?;
    if labels.len() != images.len() {
        return Err(Error::DatasetContract(format!("{} labels for {} images", labels.len(), images.len())));
    }
    if let Some(i) = labels.iter().position(|l| *l != Label::Normal) {
        return Err(Error::DatasetContract(format!("training image {i} is labelled anomalous")));
    }
    let teacher = teacher.into();
    let mut opt = JointOptimizer::new(cfg.lr);
    let mut sampler = Sampler::new(cfg.seed, label, images.len(), cfg.batch);
    let mut log = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        log.push(joint_step(teacher, student, ae, sampler.next(images)?, cfg, &mut opt)?);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_autoencoder, build_extractor, build_pdn, PdnWidths};

    const W: PdnWidths = PdnWidths([4, 6, 6]);

    fn images(n: usize, size: usize) -> Vec<Tensor> {
        (0..n)
            .map(|i| Tensor::from_fn(vec![3, size, size], |j| 0.5 + 0.4 * ((j as f64 * 0.37 + i as f64 * 1.3).sin())))
            .collect()
    }

    fn nets(seed: u64) -> (Network, Network, Network) {
        let mut t = build_pdn("teacher", 4, 1, W, seed).unwrap();
        t.set_frozen(true);
        let s = build_pdn("student", 4, 2, W, seed + 1).unwrap();
        let ae = build_autoencoder(8, 4, 32, 6, 8, seed + 2).unwrap();
        (t, s, ae)
    }

    #[test]
    fn pair_loss_examples() {
        let a = Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap();
        let b = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(pair_loss(&a, &b).unwrap(), 2.5);
        assert_eq!(pair_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(pair_loss(&a.map(|v| 3.0 * v), &b.map(|v| 3.0 * v)).unwrap(), 22.5);
        assert!(matches!(pair_loss(&a, &Tensor::zeros(vec![2])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn hard_mining_examples() {
        let mut tape = Tape::new();
        let d = tape.leaf(&Tensor::new(vec![10], (1..=10).map(f64::from).collect()).unwrap().with_requires_grad(true));
        let top = hard_mined_loss(&mut tape, d, 0.1).unwrap();
        assert_eq!(tape.scalar(top), 10.0);
        let all = hard_mined_loss(&mut tape, d, 1.0).unwrap();
        assert_eq!(tape.scalar(all), 5.5);
        let g = tape.backward(top).unwrap();
        let nonzero: Vec<usize> = g.get(d).unwrap().iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(nonzero, vec![9]);
    }

    #[test]
    fn teacher_copy_of_extractor_has_zero_loss() {
        let e = build_extractor(4, W, 3).unwrap();
        let mut t = build_pdn("teacher", 4, 1, W, 11).unwrap();
        t.copy_params_from(&e).unwrap();
        let before = t.clone();
        let cfg = TrainConfig {
            iterations: 3,
            ..TrainConfig::default()
        };
        let trace = pretrain_teacher(&mut t, &e, &images(2, 32), &cfg).unwrap();
        assert!(trace.iter().all(|&l| l == 0.0));
        assert_eq!(t.named_tensors("t"), before.named_tensors("t"));
        assert!(e.params().iter().all(|(_, p)| p.grad().is_none()));
    }

    #[test]
    fn pretraining_decreases_in_windows() {
        let e = build_extractor(4, W, 3).unwrap();
        let mut t = build_pdn("teacher", 4, 1, W, 12).unwrap();
        let cfg = TrainConfig {
            iterations: 200,
            lr: 2e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let trace = pretrain_teacher(&mut t, &e, &images(4, 32), &cfg).unwrap();
        let windows: Vec<f64> = trace.chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
        for w in windows.windows(2) {
            assert!(w[1] <= w[0], "{windows:?}");
        }
    }

    #[test]
    fn pretrain_shape_mismatch_is_config_error() {
        let e = build_extractor(4, W, 3).unwrap();
        let mut t = build_pdn("teacher", 5, 1, W, 12).unwrap();
        let err = pretrain_teacher(&mut t, &e, &images(1, 32), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
    }

    #[test]
    fn total_is_weighted_sum_and_teacher_is_untouched() {
        let (t, mut s, mut ae) = nets(1);
        let t0 = t.clone();
        let cfg = TrainConfig {
            lambda_ts: 0.7,
            lambda_aes: 1.3,
            lambda_tae: 0.4,
            ..TrainConfig::default()
        };
        let mut opt = JointOptimizer::new(cfg.lr);
        let batch = batched(&images(1, 32)[0]).unwrap();
        let l = joint_step(&t, &mut s, &mut ae, batch, &cfg, &mut opt).unwrap();
        let expect = 0.7 * l.ts + 1.3 * l.aes + 0.4 * l.tae;
        assert!((l.total - expect).abs() <= 1e-12 * expect.abs());
        assert_eq!(t, t0);
        let unit = TrainConfig::default();
        let batch = batched(&images(1, 32)[0]).unwrap();
        let l = evaluate_losses(&t, &s, &ae, batch, &unit).unwrap();
        assert_eq!(l.total, l.ts + l.aes + l.tae);
    }

    #[test]
    fn autoencoder_frozen_out_without_its_losses() {
        let (t, mut s, mut ae) = nets(2);
        let ae0 = ae.clone();
        let s0 = s.clone();
        let cfg = TrainConfig {
            lambda_aes: 0.0,
            lambda_tae: 0.0,
            iterations: 3,
            ..TrainConfig::default()
        };
        let imgs = images(2, 32);
        train(&t, &mut s, &mut ae, &imgs, &[Label::Normal; 2], &cfg, "train").unwrap();
        assert_eq!(ae.named_tensors("a"), ae0.named_tensors("a"));
        assert_ne!(s.named_tensors("s"), s0.named_tensors("s"));
    }

    #[test]
    fn unfrozen_teacher_is_rejected() {
        let (mut t, mut s, mut ae) = nets(3);
        t.set_frozen(false);
        let batch = batched(&images(1, 32)[0]).unwrap();
        let err = joint_step(&t, &mut s, &mut ae, batch, &TrainConfig::default(), &mut JointOptimizer::new(1e-3));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn anomalous_train_image_is_rejected() {
        let (t, mut s, mut ae) = nets(4);
        let err = train(&t, &mut s, &mut ae, &images(2, 32), &[Label::Normal, Label::Anomalous], &TrainConfig::default(), "train");
        assert!(matches!(err, Err(Error::DatasetContract(_))));
    }

    #[test]
    fn training_is_reproducible_and_zero_iterations_is_identity() {
        let imgs = images(3, 32);
        let cfg = TrainConfig {
            iterations: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let (t, mut s, mut ae) = nets(5);
            let log = train(&t, &mut s, &mut ae, &imgs, &[Label::Normal; 3], &cfg, "train").unwrap();
            (format_loss_log(&log), s, ae)
        };
        let (a, sa, aa) = run();
        let (b, sb, ab) = run();
        assert_eq!(a, b);
        assert_eq!((sa, aa), (sb, ab));
        assert_eq!(a.lines().count(), 5);
        let (t, mut s, mut ae) = nets(5);
        let (s0, ae0) = (s.clone(), ae.clone());
        let zero = TrainConfig { iterations: 0, ..cfg };
        train(&t, &mut s, &mut ae, &imgs, &[Label::Normal; 3], &zero, "train").unwrap();
        assert_eq!((s, ae), (s0, ae0));
    }

    #[test]
    fn loss_log_uses_seventeen_digits() {
        let log = format_loss_log(&[LossBreakdown {
            ts: 0.1,
            aes: 1.0 / 3.0,
            tae: 2.0,
            total: 2.4333333333333333,
        }]);
        let line = log.lines().nth(1).unwrap();
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[0], "1");
        assert_eq!(fields[2].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert_eq!(fields[1], "1.0000000000000001e-1");
    }
}
