//! Three-stage pipeline over an output directory: data generation, teacher
//! pretraining, joint training, layer scoring, quantization, fine-tuning,
//! evaluation and heatmap export.
//!
//! Every artifact `X` is written atomically next to `X.meta.json`, which
//! records the producing stage, the seed, the config hash and the artifact's
//! SHA-256. Commands check their inputs' metadata before running.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hqs::{hqs_pipeline, BitPolicy};
use crate::inference::{bias_mass, heatmap_file_stem, heatmap_raster, overlay_raster, AnomalyMap, Detector};
use crate::io::{sha256_hex, write_atomic};
use crate::metrics::{au_pro, auroc, average_precision, EvalReport, ScoredSample};
use crate::models::{build_autoencoder, build_extractor, build_pdn, Network, PdnWidths};
use crate::quant::{activation_schemes_from, build_caches, quantize_network, QuantBlock, QuantizedNetwork};
use crate::rng;
use crate::synthdata::{generate_split, DefectSpec, Dataset, SceneSpec, Split, SplitCounts, MANIFEST};
use crate::tensor::{load_checkpoint, Tensor};
use crate::train::{format_loss_log, pretrain_teacher, train, Label, Teacher, TrainConfig};

/// JSON schema of [`PipelineConfig`].
pub const CONFIG_SCHEMA: &str = include_str!("../schema/pipeline-config.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: StageConfig,
    pub finetune: FineTuneConfig,
    pub quant: QuantConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("raad-out"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: StageConfig::default(),
            finetune: FineTuneConfig::default(),
            quant: QuantConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory; defaults to `<out>/data`.
    pub dir: Option<PathBuf>,
    pub scene: SceneSpec,
    pub defects: DefectSpec,
    pub counts: SplitCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub teacher_channels: usize,
    pub pdn_widths: [usize; 3],
    pub latent: usize,
    pub ae_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            teacher_channels: 8,
            pdn_widths: PdnWidths::default().0,
            latent: 16,
            ae_hidden: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            lr: 1e-3,
            batch: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub lambda_ts: f64,
    pub lambda_aes: f64,
    pub lambda_tae: f64,
    pub lr: f64,
    pub iterations: usize,
    pub batch: usize,
    pub hard_fraction: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lambda_ts: t.lambda_ts,
            lambda_aes: t.lambda_aes,
            lambda_tae: t.lambda_tae,
            lr: t.lr,
            iterations: t.iterations,
            batch: t.batch,
            hard_fraction: t.hard_fraction,
        }
    }
}

/// Fine-tuning settings; unset fields reuse the training stage's values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub lambda_ts: Option<f64>,
    pub lambda_aes: Option<f64>,
    pub lambda_tae: Option<f64>,
    pub hard_fraction: Option<f64>,
    pub lr: Option<f64>,
    pub iterations: usize,
    pub batch: Option<usize>,
    /// Keep the teacher's activation fake-quantizers in the loop during
    /// fine-tuning and RAAD-stage inference; otherwise the snapped teacher
    /// runs with full-precision activations.
    pub activation_quant: bool,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            lambda_ts: None,
            lambda_aes: None,
            lambda_tae: None,
            hard_fraction: None,
            lr: None,
            iterations: 1500,
            batch: None,
            activation_quant: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub calibration_size: usize,
    /// Normalized-score cut points between 2/3, 3/4 and 4/8 bits.
    pub thresholds: [f64; 3],
    pub autoencoder_bits: u32,
    pub activation_quant: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            calibration_size: 32,
            thresholds: [0.25, 0.5, 0.75],
            autoencoder_bits: 8,
            activation_quant: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fpr_limit: f64,
    /// Heatmaps exported per label and stage.
    pub heatmaps_per_label: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fpr_limit: 0.3,
            heatmaps_per_label: 4,
        }
    }
}

impl PipelineConfig {
    /// Parses a JSON document; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            detail: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Small settings for smoke runs and tests.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.data.scene.image_size = 32;
        c.data.defects.min_size = 3;
        c.data.defects.max_size = 5;
        c.data.counts = SplitCounts {
            train: 12,
            test_normal: 6,
            test_anomalous: 6,
        };
        c.model = ModelConfig {
            teacher_channels: 4,
            pdn_widths: [4, 6, 6],
            latent: 4,
            ae_hidden: 8,
        };
        c.pretrain.iterations = 20;
        c.train.iterations = 20;
        c.finetune.iterations = 10;
        c.quant.calibration_size = 4;
        c.eval.heatmaps_per_label = 2;
        c
    }

    fn field_err(path: &str, detail: impl Into<String>) -> Error {
        Error::Config {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate(&self.data.defects).map_err(|e| Self::field_err("data", e.to_string()))?;
        let m = &self.model;
        if m.teacher_channels == 0 || m.latent == 0 || m.ae_hidden < 2 || m.pdn_widths.contains(&0) {
            return Err(Self::field_err("model", "channel counts must be positive (ae_hidden ≥ 2)"));
        }
        self.stage1().validate().map_err(|e| Self::field_err("train", e.to_string()))?;
        self.stage3().validate().map_err(|e| Self::field_err("finetune", e.to_string()))?;
        if self.pretrain.batch == 0 || !(self.pretrain.lr > 0.0) {
            return Err(Self::field_err("pretrain", "batch ≥ 1 and lr > 0 required"));
        }
        let q = &self.quant;
        if q.calibration_size == 0 || q.calibration_size > self.data.counts.train {
            return Err(Self::field_err("quant.calibration_size", "must lie in 1..=data.counts.train"));
        }
        let t = q.thresholds;
        if !(0.0 < t[0] && t[0] < t[1] && t[1] < t[2] && t[2] < 1.0) {
            return Err(Self::field_err("quant.thresholds", "must be ascending inside (0, 1)"));
        }
        crate::quant::check_bits(q.autoencoder_bits).map_err(|e| Self::field_err("quant.autoencoder_bits", e.to_string()))?;
        if !(self.eval.fpr_limit > 0.0 && self.eval.fpr_limit <= 1.0) {
            return Err(Self::field_err("eval.fpr_limit", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn stage1(&self) -> TrainConfig {
        let s = &self.train;
        TrainConfig {
            lambda_ts: s.lambda_ts,
            lambda_aes: s.lambda_aes,
            lambda_tae: s.lambda_tae,
            lr: s.lr,
            iterations: s.iterations,
            batch: s.batch,
            hard_fraction: s.hard_fraction,
            seed: self.seed,
        }
    }

    pub fn stage3(&self) -> TrainConfig {
        let f = &self.finetune;
        let base = self.stage1();
        TrainConfig {
            lambda_ts: f.lambda_ts.unwrap_or(base.lambda_ts),
            lambda_aes: f.lambda_aes.unwrap_or(base.lambda_aes),
            lambda_tae: f.lambda_tae.unwrap_or(base.lambda_tae),
            hard_fraction: f.hard_fraction.unwrap_or(base.hard_fraction),
            lr: f.lr.unwrap_or(base.lr),
            iterations: f.iterations,
            batch: f.batch.unwrap_or(base.batch),
            seed: self.seed,
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Baseline,
    Quant,
    Raad,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Baseline, Stage::Quant, Stage::Raad];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Baseline => "baseline",
            Stage::Quant => "quant",
            Stage::Raad => "raad",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Stage::Baseline),
            "quant" => Ok(Stage::Quant),
            "raad" => Ok(Stage::Raad),
            other => Err(Error::Parameter(format!("unknown stage `{other}` (baseline|quant|raad)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub sha256: String,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta.json");
    PathBuf::from(p)
}

/// Command names, used in ordering errors.
pub mod commands {
    pub const GEN_DATA: &str = "gen-data";
    pub const PRETRAIN: &str = "pretrain";
    pub const TRAIN: &str = "train";
    pub const SCORE_LAYERS: &str = "score-layers";
    pub const QUANTIZE: &str = "quantize";
    pub const FINETUNE: &str = "finetune";
    pub const EVAL: &str = "eval";
    pub const HEATMAPS: &str = "heatmaps";
}
use commands as cmd;

/// Output directory layout and artifact bookkeeping for one configuration.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub out: PathBuf,
    /// Worker threads for per-image evaluation.
    pub threads: usize,
    hash: String,
}

struct Nets {
    teacher: Network,
    student: Network,
    ae: Network,
}

struct QuantArtifacts {
    nets: Nets,
    teacher_act: Vec<Option<crate::quant::QuantScheme>>,
    student_act: Vec<Option<crate::quant::QuantScheme>>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let out = config.out_dir.clone();
        let hash = config.hash();
        Ok(Self {
            config,
            out,
            threads: 1,
            hash,
        })
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn data_dir(&self) -> PathBuf {
        self.config.data.dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.out.join("checkpoints").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.out.join("reports").join(name)
    }

    pub fn heatmap_dir(&self) -> PathBuf {
        self.out.join("heatmaps")
    }

    fn write_artifact(&self, path: &Path, bytes: &[u8], stage: &str) -> Result<PathBuf> {
        write_atomic(path, bytes)?;
        let meta = ArtifactMeta {
            stage: stage.into(),
            seed: self.config.seed,
            config_hash: self.hash.clone(),
            sha256: sha256_hex(bytes),
        };
        write_atomic(&meta_path(path), serde_json::to_string_pretty(&meta).unwrap().as_bytes())?;
        self.verify(path, stage)?;
        Ok(path.to_path_buf())
    }

    fn write_checkpoint(&self, path: &Path, tensors: &[(String, Tensor)], stage: &str) -> Result<PathBuf> {
        self.write_artifact(path, &crate::tensor::encode_checkpoint(tensors), stage)
    }

    /// Checks that `path` exists, was produced by `stage` under this config, and matches its checksum.
    pub fn verify(&self, path: &Path, stage: &str) -> Result<()> {
        let missing = || Error::PipelineOrder {
            artifact: path.to_path_buf(),
            needs: stage.to_owned(),
        };
        let mp = meta_path(path);
        if !path.exists() || !mp.exists() {
            return Err(missing());
        }
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let meta: ArtifactMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: mp.clone(),
            offset: 0,
            detail: e.to_string(),
        })?;
        if meta.stage != stage || meta.config_hash != self.hash || meta.seed != self.config.seed {
            return Err(missing());
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if sha256_hex(&bytes) != meta.sha256 {
            return Err(Error::Checksum(path.to_path_buf()));
        }
        Ok(())
    }

    fn seed(&self, label: &str) -> u64 {
        rng::derive_seed(self.config.seed, label, 0)
    }

    fn widths(&self) -> PdnWidths {
        PdnWidths(self.config.model.pdn_widths)
    }

    fn feature_size(&self) -> Result<usize> {
        let n = self.config.data.scene.image_size;
        let (_, h, w) = build_pdn("probe", 1, 1, self.widths(), 0)?.output_shape((3, n, n))?;
        if h != w {
            return Err(Error::Contract("non-square feature map".into()));
        }
        Ok(h)
    }

    fn fresh_nets(&self) -> Result<Nets> {
        let m = &self.config.model;
        let n = self.config.data.scene.image_size;
        Ok(Nets {
            teacher: build_pdn("teacher", m.teacher_channels, 1, self.widths(), self.seed("teacher"))?,
            student: build_pdn("student", m.teacher_channels, 2, self.widths(), self.seed("student"))?,
            ae: build_autoencoder(m.latent, m.teacher_channels, n, self.feature_size()?, m.ae_hidden, self.seed("autoencoder"))?,
        })
    }

    fn load_nets(&self, path: &Path, stage: &str) -> Result<(Nets, Vec<(String, Tensor)>)> {
        self.verify(path, stage)?;
        let entries = load_checkpoint(path)?;
        let mut nets = self.fresh_nets()?;
        nets.teacher.load_named("teacher", &entries)?;
        nets.student.load_named("student", &entries)?;
        nets.ae.load_named("autoencoder", &entries)?;
        nets.teacher.set_frozen(true);
        Ok((nets, entries))
    }

    fn nets_tensors(nets: &Nets) -> Vec<(String, Tensor)> {
        let mut t = nets.teacher.named_tensors("teacher");
        t.extend(nets.student.named_tensors("student"));
        t.extend(nets.ae.named_tensors("autoencoder"));
        t
    }

    fn dataset(&self) -> Result<Dataset> {
        let dir = self.data_dir();
        self.verify(&dir.join(MANIFEST), cmd::GEN_DATA)?;
        Dataset::load(&dir)
    }

    fn calibration(&self, ds: &Dataset) -> Vec<Tensor> {
        let train = ds.indices(Split::Train);
        let mut r = rng::rng(self.seed("calibration"));
        let mut picked = rand::seq::index::sample(&mut r, train.len(), self.config.quant.calibration_size).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| ds.images[train[i]].clone()).collect()
    }

    pub fn gen_data(&self) -> Result<Vec<PathBuf>> {
        let d = &self.config.data;
        let dir = self.data_dir();
        generate_split(&d.scene, d.counts, &d.defects, self.seed("data"), &dir)?;
        let manifest = dir.join(MANIFEST);
        let bytes = fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?;
        self.write_artifact(&manifest, &bytes, cmd::GEN_DATA)?;
        crate::synthdata::verify_checksums(&dir)?;
        Ok(vec![manifest])
    }

    pub fn pretrain(&self) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let (images, _) = ds.split_images(Split::Train);
        let m = &self.config.model;
        let extractor = build_extractor(m.teacher_channels, self.widths(), self.seed("extractor"))?;
        let mut teacher = self.fresh_nets()?.teacher;
        let p = &self.config.pretrain;
        let cfg = TrainConfig {
            lr: p.lr,
            iterations: p.iterations,
            batch: p.batch,
            seed: self.config.seed,
            ..TrainConfig::default()
        };
        let trace = pretrain_teacher(&mut teacher, &extractor, &images, &cfg)?;
        let mut log = String::from("iter,L_pre\n");
        for (i, l) in trace.iter().enumerate() {
            writeln!(log, "{},{:.16e}", i + 1, l).unwrap();
        }
        Ok(vec![
            self.write_checkpoint(&self.checkpoint("teacher.ckpt"), &teacher.named_tensors("teacher"), cmd::PRETRAIN)?,
            self.write_artifact(&self.report("pretrain_loss.csv"), log.as_bytes(), cmd::PRETRAIN)?,
        ])
    }

    pub fn train(&self) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let tpath = self.checkpoint("teacher.ckpt");
        self.verify(&tpath, cmd::PRETRAIN)?;
        let mut nets = self.fresh_nets()?;
        nets.teacher.load_named("teacher", &load_checkpoint(&tpath)?)?;
        nets.teacher.set_frozen(true);
        let (images, labels) = ds.split_images(Split::Train);
        let log = train(&nets.teacher, &mut nets.student, &mut nets.ae, &images, &labels, &self.config.stage1(), "train")?;
        Ok(vec![
            self.write_checkpoint(&self.checkpoint("stage1.ckpt"), &Self::nets_tensors(&nets), cmd::TRAIN)?,
            self.write_artifact(&self.report("train_loss.csv"), format_loss_log(&log).as_bytes(), cmd::TRAIN)?,
        ])
    }

    fn policy(&self, layers: usize) -> BitPolicy {
        BitPolicy {
            thresholds: self.config.quant.thresholds,
            ..BitPolicy::new(layers)
        }
    }

    pub fn score_layers(&self) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let (nets, _) = self.load_nets(&self.checkpoint("stage1.ckpt"), cmd::TRAIN)?;
        let calib = self.calibration(&ds);
        let policy = self.policy(nets.teacher.conv_count());
        let result = hqs_pipeline(&nets.teacher, &nets.student, &calib, &policy)?;
        Ok(vec![self.write_artifact(&self.report("hqs.csv"), result.report().as_bytes(), cmd::SCORE_LAYERS)?])
    }

    fn read_bits(&self) -> Result<Vec<u32>> {
        let path = self.report("hqs.csv");
        self.verify(&path, cmd::SCORE_LAYERS)?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.lines()
            .skip(1)
            .enumerate()
            .map(|(i, line)| {
                line.split(',').nth(3).and_then(|b| b.parse().ok()).ok_or_else(|| Error::Parse {
                    path: path.clone(),
                    offset: i + 1,
                    detail: "expected `layer,raw_score,normalized,bits,forced`".into(),
                })
            })
            .collect()
    }

    pub fn quantize(&self) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let (nets, _) = self.load_nets(&self.checkpoint("stage1.ckpt"), cmd::TRAIN)?;
        let bits = self.read_bits()?;
        let calib = self.calibration(&ds);
        let c = self.config.model.teacher_channels;
        let outputs = |net: &Network| -> Result<Vec<Tensor>> { calib.iter().map(|im| Ok(net.forward_with_taps(im)?.0)).collect() };
        let t_out = outputs(&nets.teacher)?;
        let s_out = outputs(&nets.student)?;
        let head = |s: &Tensor, start: usize| -> Result<Tensor> {
            let plane = s.numel() / s.shape()[1];
            let mut shape = s.shape().to_vec();
            shape[1] = c;
            Tensor::new(shape, s.data()[start * plane..(start + c) * plane].to_vec())
        };
        let singles = |net: &Network| (0..net.conv_count()).map(QuantBlock::single).collect::<Vec<_>>();

        let t_caches = build_caches(&nets.teacher, &singles(&nets.teacher), &calib, |tape, f, i| {
            let target = tape.constant(head(&s_out[i], 0)?);
            tape.mse_mean(f.output, target)
        })?;
        let s_caches = build_caches(&nets.student, &singles(&nets.student), &calib, |tape, f, i| {
            let s_head = tape.narrow_channels(f.output, 0, c)?;
            let target = tape.constant(t_out[i].clone());
            tape.mse_mean(target, s_head)
        })?;
        let a_caches = build_caches(&nets.ae, &singles(&nets.ae), &calib, |tape, f, i| {
            let target = tape.constant(head(&s_out[i], c)?);
            tape.mse_mean(f.output, target)
        })?;
        let act = self.config.quant.activation_quant;
        let qt = quantize_network(&nets.teacher, &t_caches, &bits, &calib, act)?;
        let qs = quantize_network(&nets.student, &s_caches, &bits, &calib, act)?;
        let ae_bits = vec![self.config.quant.autoencoder_bits; nets.ae.conv_count()];
        let qa = quantize_network(&nets.ae, &a_caches, &ae_bits, &calib, false)?;

        let mut tensors = qt.net.named_tensors("teacher");
        tensors.extend(qs.net.named_tensors("student"));
        tensors.extend(qa.net.named_tensors("autoencoder"));
        tensors.extend(qt.activation_tensors("teacher"));
        tensors.extend(qs.activation_tensors("student"));
        let report = |q: &QuantizedNetwork| q.report();
        Ok(vec![
            self.write_checkpoint(&self.checkpoint("quant.ckpt"), &tensors, cmd::QUANTIZE)?,
            self.write_artifact(&self.report("quant_teacher.csv"), report(&qt).as_bytes(), cmd::QUANTIZE)?,
            self.write_artifact(&self.report("quant_student.csv"), report(&qs).as_bytes(), cmd::QUANTIZE)?,
            self.write_artifact(&self.report("quant_autoencoder.csv"), report(&qa).as_bytes(), cmd::QUANTIZE)?,
        ])
    }

    fn load_quant(&self) -> Result<QuantArtifacts> {
        let (nets, entries) = self.load_nets(&self.checkpoint("quant.ckpt"), cmd::QUANTIZE)?;
        let n = nets.teacher.conv_count();
        Ok(QuantArtifacts {
            teacher_act: activation_schemes_from("teacher", n, &entries)?,
            student_act: activation_schemes_from("student", n, &entries)?,
            nets,
        })
    }

    pub fn finetune(&self) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let QuantArtifacts { mut nets, teacher_act, .. } = self.load_quant()?;
        let (images, labels) = ds.split_images(Split::Train);
        let teacher = Teacher {
            net: &nets.teacher,
            activation_quant: self.config.finetune.activation_quant.then_some(teacher_act.as_slice()),
        };
        let log = train(teacher, &mut nets.student, &mut nets.ae, &images, &labels, &self.config.stage3(), "finetune")?;
        Ok(vec![
            self.write_checkpoint(&self.checkpoint("raad.ckpt"), &Self::nets_tensors(&nets), cmd::FINETUNE)?,
            self.write_artifact(&self.report("finetune_loss.csv"), format_loss_log(&log).as_bytes(), cmd::FINETUNE)?,
        ])
    }

    /// Test-time networks for a stage.
    fn detector(&self, stage: Stage) -> Result<Detector> {
        Ok(match stage {
            Stage::Baseline => {
                let (n, _) = self.load_nets(&self.checkpoint("stage1.ckpt"), cmd::TRAIN)?;
                Detector::new(n.teacher, n.student, n.ae)
            }
            Stage::Quant => {
                let q = self.load_quant()?;
                Detector {
                    teacher_act: Some(q.teacher_act),
                    student_act: Some(q.student_act),
                    ..Detector::new(q.nets.teacher, q.nets.student, q.nets.ae)
                }
            }
            Stage::Raad => {
                let q = self.load_quant()?;
                let (n, _) = self.load_nets(&self.checkpoint("raad.ckpt"), cmd::FINETUNE)?;
                Detector {
                    teacher_act: self.config.finetune.activation_quant.then_some(q.teacher_act),
                    ..Detector::new(q.nets.teacher, n.student, n.ae)
                }
            }
        })
    }

    fn test_maps(&self, detector: &Detector, ds: &Dataset) -> Result<Vec<AnomalyMap>> {
        let idx = ds.indices(Split::Test);
        let images: Vec<&Tensor> = idx.iter().map(|&i| &ds.images[i]).collect();
        parallel_map(&images, self.threads, |im| detector.map(im))
    }

    /// Metrics for one stage.
    pub fn evaluate_stage(&self, stage: Stage, ds: &Dataset) -> Result<EvalReport> {
        let detector = self.detector(stage)?;
        let maps = self.test_maps(&detector, ds)?;
        let idx = ds.indices(Split::Test);
        let mut samples = Vec::with_capacity(idx.len());
        let mut masks = Vec::with_capacity(idx.len());
        let mut normal_maps = Vec::new();
        for (k, &i) in idx.iter().enumerate() {
            let label = ds.entries[i].label;
            samples.push(ScoredSample::new(maps[k].image_score, label));
            let mask = ds.masks[i].clone().unwrap_or_else(|| vec![false; maps[k].resized.numel()]);
            masks.push(mask);
            if label == Label::Normal {
                normal_maps.push(maps[k].clone());
            }
        }
        let resized: Vec<Tensor> = maps.iter().map(|m| m.resized.clone()).collect();
        Ok(EvalReport {
            stage: stage.as_str().into(),
            auroc: auroc(&samples)?,
            ap: average_precision(&samples)?,
            aupro: au_pro(&resized, &masks, self.config.eval.fpr_limit)?,
            bias_mass: bias_mass(&normal_maps, &ds.variable_mask)?,
            n_normal: samples.iter().filter(|s| s.label == Label::Normal).count(),
            n_anom: samples.iter().filter(|s| s.label == Label::Anomalous).count(),
            seed: self.config.seed,
        })
    }

    fn eval_report_path(&self, stage: Option<Stage>) -> PathBuf {
        match stage {
            None => self.report("eval.csv"),
            Some(s) => self.report(&format!("eval_{}.csv", s.as_str())),
        }
    }

    /// Evaluates one stage, or all three in ablation order.
    pub fn eval(&self, stage: Option<Stage>) -> Result<(Vec<EvalReport>, PathBuf)> {
        let ds = self.dataset()?;
        let stages: Vec<Stage> = stage.map_or(Stage::ALL.to_vec(), |s| vec![s]);
        let reports = stages.iter().map(|&s| self.evaluate_stage(s, &ds)).collect::<Result<Vec<_>>>()?;
        let mut text = format!("{}\n", EvalReport::HEADER);
        for r in &reports {
            writeln!(text, "{r}").unwrap();
        }
        let path = self.write_artifact(&self.eval_report_path(stage), text.as_bytes(), cmd::EVAL)?;
        Ok((reports, path))
    }

    /// Reads a previously written evaluation report.
    pub fn read_eval(&self, stage: Option<Stage>) -> Result<Vec<EvalReport>> {
        let path = self.eval_report_path(stage);
        self.verify(&path, cmd::EVAL)?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.lines().skip(1).map(EvalReport::parse_line).collect()
    }

    /// Writes grayscale heatmaps and overlays for the first few normal and anomalous test images.
    pub fn heatmaps(&self, stage: Option<Stage>) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let stages: Vec<Stage> = stage.map_or(Stage::ALL.to_vec(), |s| vec![s]);
        let test = ds.indices(Split::Test);
        let k = self.config.eval.heatmaps_per_label;
        let mut chosen: Vec<(usize, usize)> = Vec::new();
        for label in [Label::Normal, Label::Anomalous] {
            chosen.extend(test.iter().copied().enumerate().filter(|&(_, i)| ds.entries[i].label == label).take(k));
        }
        let dir = self.heatmap_dir();
        let mut index = String::from("file,sha256\n");
        let mut written = Vec::new();
        for s in stages {
            let detector = self.detector(s)?;
            let images: Vec<&Tensor> = chosen.iter().map(|&(_, i)| &ds.images[i]).collect();
            let maps = parallel_map(&images, self.threads, |im| detector.map(im))?;
            for ((pos, i), map) in chosen.iter().zip(&maps) {
                let stem = heatmap_file_stem("test", *pos, s.as_str());
                let pgm = heatmap_raster(map).encode();
                let ppm = overlay_raster(&ds.images[*i], map)?.encode();
                for (name, bytes) in [(format!("{stem}.pgm"), pgm), (format!("{stem}_overlay.ppm"), ppm)] {
                    let path = dir.join(&name);
                    write_atomic(&path, &bytes)?;
                    writeln!(index, "{name},{}", sha256_hex(&bytes)).unwrap();
                    written.push(path);
                }
            }
        }
        let name = match stage {
            None => "index.csv".to_owned(),
            Some(s) => format!("index_{}.csv", s.as_str()),
        };
        written.push(self.write_artifact(&dir.join(name), index.as_bytes(), cmd::HEATMAPS)?);
        Ok(written)
    }

    /// Every command in order; returns the three-stage evaluation.
    pub fn run_all(&self) -> Result<Vec<EvalReport>> {
        self.gen_data()?;
        self.pretrain()?;
        self.train()?;
        self.score_layers()?;
        self.quantize()?;
        self.finetune()?;
        let (reports, _) = self.eval(None)?;
        self.heatmaps(None)?;
        Ok(reports)
    }
}

/// Order-preserving map over `items` on up to `threads` scoped workers.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if threads <= 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke(dir: &Path) -> Pipeline {
        let mut c = PipelineConfig::smoke();
        c.out_dir = dir.to_path_buf();
        Pipeline::new(c).unwrap()
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_field() {
        let err = PipelineConfig::from_json(r#"{"train": {"iterations": 5, "bogus": 1}}"#).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "train.bogus"),
            other => panic!("{other}"),
        }
        let err = PipelineConfig::from_json(r#"{"quant": {"calibration_size": "many"}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "quant.calibration_size"), "{err}");
        let err = PipelineConfig::from_json(r#"{"eval": {"fpr_limit": 0}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "eval.fpr_limit"), "{err}");
    }

    #[test]
    fn default_config_round_trips() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(PipelineConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn finetune_inherits_loss_weights() {
        let mut c = PipelineConfig::default();
        c.train.lambda_aes = 0.5;
        assert_eq!(c.stage3().lambda_aes, 0.5);
        c.finetune.lambda_aes = Some(2.0);
        assert_eq!(c.stage3().lambda_aes, 2.0);
        c.train.lr = 3e-4;
        assert_eq!(c.stage3().lr, 3e-4);
        c.finetune.lr = Some(1e-5);
        assert_eq!(c.stage3().lr, 1e-5);
        assert_eq!(c.stage3().seed, c.seed);
    }

    #[test]
    fn schema_matches_config_shape() {
        let schema: serde_json::Value = serde_json::from_str(CONFIG_SCHEMA).unwrap();
        let value = serde_json::to_value(PipelineConfig::default()).unwrap();
        fn walk(schema: &serde_json::Value, value: &serde_json::Value, path: &str) {
            if let Some(obj) = value.as_object() {
                assert_eq!(schema["additionalProperties"], serde_json::Value::Bool(false), "{path}");
                let props = schema["properties"].as_object().unwrap_or_else(|| panic!("{path} lacks properties"));
                let mut a: Vec<&String> = obj.keys().collect();
                let mut b: Vec<&String> = props.keys().collect();
                a.sort();
                b.sort();
                assert_eq!(a, b, "{path}");
                for (k, v) in obj {
                    walk(&props[k], v, &format!("{path}.{k}"));
                }
            }
        }
        walk(&schema, &value, "$");
    }

    #[test]
    fn commands_enforce_order() {
        let d = tempfile::tempdir().unwrap();
        let p = smoke(d.path());
        assert!(matches!(p.quantize(), Err(Error::PipelineOrder { .. })));
        p.gen_data().unwrap();
        let err = p.train().unwrap_err();
        match err {
            Error::PipelineOrder { artifact, needs } => {
                assert!(artifact.ends_with("checkpoints/teacher.ckpt"));
                assert_eq!(needs, cmd::PRETRAIN);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn stale_config_and_tampering_are_detected() {
        let d = tempfile::tempdir().unwrap();
        let p = smoke(d.path());
        p.gen_data().unwrap();
        p.pretrain().unwrap();
        let mut other = p.config.clone();
        other.seed += 1;
        let q = Pipeline::new(other).unwrap();
        assert!(matches!(q.train(), Err(Error::PipelineOrder { .. })));
        let ckpt = p.checkpoint("teacher.ckpt");
        let mut bytes = fs::read(&ckpt).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&ckpt, bytes).unwrap();
        assert!(matches!(p.train(), Err(Error::Checksum(_))));
    }

    #[test]
    fn smoke_pipeline_end_to_end_is_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = smoke(a.path()).run_all().unwrap();
        let rb = smoke(b.path()).with_threads(3).run_all().unwrap();
        assert_eq!(ra.len(), 3);
        assert_eq!(ra, rb);
        let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
        for f in ["reports/eval.csv", "reports/hqs.csv", "reports/quant_student.csv", "heatmaps/index.csv", "heatmaps/test_0_raad.pgm"] {
            assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
        }
        let p = smoke(a.path());
        let (again, _) = p.eval(None).unwrap();
        assert_eq!(again, ra);
        assert_eq!(p.read_eval(None).unwrap(), ra);
        assert_eq!(read(a.path(), "reports/eval.csv"), read(b.path(), "reports/eval.csv"));
        let (one, path) = p.eval(Some(Stage::Quant)).unwrap();
        assert_eq!(one[0], ra[1]);
        assert!(path.ends_with("eval_quant.csv"));
    }
}
