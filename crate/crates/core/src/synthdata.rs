//! Deterministic synthetic benchmark: a fixed textured disk (the invariant
//! object) on a background whose phase and brightness jitter per image.
//! Defects are painted only inside the disk.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_image, load_mask, mask_raster, sha256_file, to_byte, write_atomic, Raster};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::Label;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Disk radius as a fraction of the image size.
    pub object_radius: f64,
    /// Spacing in pixels of the grid pattern drawn on the disk.
    pub grid_period: usize,
    /// Amplitude of the background texture.
    pub texture_amplitude: f64,
    /// Half-width of the per-image uniform brightness offset of the background.
    pub brightness_jitter: f64,
    /// Standard deviation of the pixel noise on the object.
    pub object_noise: f64,
    /// Required ratio of background to object per-pixel variance across the training images.
    pub min_variance_ratio: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            object_radius: 0.3,
            grid_period: 6,
            texture_amplitude: 0.2,
            brightness_jitter: 0.15,
            object_noise: 0.01,
            min_variance_ratio: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectKind {
    PatchReplace,
    Scratch,
    Hole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefectSpec {
    pub kinds: Vec<DefectKind>,
    /// Inclusive defect extent range in pixels.
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for DefectSpec {
    fn default() -> Self {
        Self {
            kinds: vec![DefectKind::PatchReplace, DefectKind::Scratch, DefectKind::Hole],
            min_size: 4,
            max_size: 10,
        }
    }
}

impl SceneSpec {
    fn radius(&self) -> f64 {
        self.object_radius * self.image_size as f64
    }

    fn center(&self) -> f64 {
        (self.image_size as f64 - 1.0) / 2.0
    }

    /// Row-major mask of the jittered background (everything off the disk).
    pub fn variable_mask(&self) -> Vec<bool> {
        let n = self.image_size;
        let (c, r) = (self.center(), self.radius());
        (0..n * n)
            .map(|p| {
                let (y, x) = ((p / n) as f64 - c, (p % n) as f64 - c);
                x * x + y * y > r * r
            })
            .collect()
    }

    pub fn validate(&self, defects: &DefectSpec) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Spec(format!("image_size {} below 16", self.image_size)));
        }
        if !(self.object_radius > 0.0 && self.object_radius < 0.5) {
            return Err(Error::Spec("object_radius must lie in (0, 0.5)".into()));
        }
        if defects.kinds.is_empty() || defects.min_size == 0 || defects.min_size > defects.max_size {
            return Err(Error::Spec("defect spec needs kinds and 1 ≤ min_size ≤ max_size".into()));
        }
        // A defect of the largest extent must fit in the square inscribed in the disk.
        let inscribed = (self.radius() * std::f64::consts::SQRT_2).floor() as usize;
        if defects.max_size + 2 > inscribed {
            return Err(Error::Spec(format!(
                "defects up to {} px do not fit the invariant region (inscribed square {inscribed} px)",
                defects.max_size
            )));
        }
        Ok(())
    }
}

const OBJECT_COLOR: [f64; 3] = [0.85, 0.62, 0.30];

/// Renders one normal image from its sub-seed.
pub fn render_normal(spec: &SceneSpec, seed: u64) -> Raster {
    let n = spec.image_size;
    let mut r = rng::rng(seed);
    let phases: [f64; 3] = std::array::from_fn(|_| r.gen_range(0.0..std::f64::consts::TAU));
    let mut signed = || 2.0 * r.gen::<f64>() - 1.0;
    let offset = spec.brightness_jitter * signed();
    let tint: [f64; 3] = std::array::from_fn(|_| spec.brightness_jitter / 3.0 * signed());
    let variable = spec.variable_mask();
    let freq = std::f64::consts::TAU / n as f64;
    let mut pixels = vec![0u8; 3 * n * n];
    for p in 0..n * n {
        let (y, x) = ((p / n) as f64, (p % n) as f64);
        let rgb: [f64; 3] = if variable[p] {
            let t = (3.0 * freq * x + phases[0]).sin() * (2.0 * freq * y + phases[1]).cos()
                + 0.5 * (5.0 * freq * (x + y) + phases[2]).sin();
            let v = 0.45 + offset + spec.texture_amplitude * t;
            std::array::from_fn(|c| v + tint[c])
        } else {
            let line = (p / n).is_multiple_of(spec.grid_period) || (p % n).is_multiple_of(spec.grid_period);
            let base = if line { 0.55 } else { 1.0 };
            let noise: f64 = spec.object_noise * r.sample::<f64, _>(StandardNormal);
            std::array::from_fn(|c| OBJECT_COLOR[c] * base + noise)
        };
        for c in 0..3 {
            pixels[3 * p + c] = to_byte(rgb[c]);
        }
    }
    Raster::rgb(n, n, pixels)
}

/// Paints one defect inside the disk; returns the defect mask.
pub fn apply_defect(spec: &SceneSpec, defects: &DefectSpec, image: &mut Raster, seed: u64) -> Result<Vec<bool>> {
    spec.validate(defects)?;
    let n = spec.image_size;
    let variable = spec.variable_mask();
    let mut r = rng::rng(seed);
    let kind = defects.kinds[r.gen_range(0..defects.kinds.len())];
    let size = r.gen_range(defects.min_size..=defects.max_size) as f64;
    let (c, rad) = (spec.center(), spec.radius());
    // Center drawn so the defect's bounding disk stays on the object.
    let reach = (rad - size / 2.0 - 1.0).max(0.0);
    let (cy, cx) = loop {
        let (dy, dx) = (r.gen_range(-reach..=reach), r.gen_range(-reach..=reach));
        if dx * dx + dy * dy <= reach * reach {
            break (c + dy, c + dx);
        }
    };
    let angle = r.gen_range(0.0..std::f64::consts::PI);
    let (sin, cos) = angle.sin_cos();
    let color: [f64; 3] = match kind {
        DefectKind::Hole => [0.05, 0.05, 0.05],
        DefectKind::Scratch => [0.98, 0.98, 0.95],
        DefectKind::PatchReplace => [0.2, 0.45, 0.75],
    };
    let mut mask = vec![false; n * n];
    for p in 0..n * n {
        let (y, x) = ((p / n) as f64 - cy, (p % n) as f64 - cx);
        let inside = match kind {
            DefectKind::Hole => x * x + y * y <= (size / 2.0).powi(2),
            DefectKind::Scratch => {
                let along = x * cos + y * sin;
                let across = -x * sin + y * cos;
                along.abs() <= size && across.abs() <= 0.75
            }
            DefectKind::PatchReplace => x.abs() <= size / 2.0 && y.abs() <= size / 2.0,
        };
        if inside && !variable[p] {
            mask[p] = true;
        }
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Spec("defect landed outside the invariant region".into()));
    }
    for (p, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for ch in 0..3 {
            let v = if kind == DefectKind::PatchReplace {
                // Checkerboard texture in place of the grid.
                let check = ((p / n) / 2 + (p % n) / 2).is_multiple_of(2);
                color[ch] * if check { 1.0 } else { 0.6 }
            } else {
                color[ch]
            };
            image.pixels[3 * p + ch] = to_byte(v);
        }
    }
    Ok(mask)
}

/// Mean over `region` of the per-pixel intensity variance across `images`.
pub fn region_variance(images: &[Raster], region: &[bool]) -> f64 {
    let m = images.len() as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, _) in region.iter().enumerate().filter(|(_, &r)| r) {
        let vals: Vec<f64> = images
            .iter()
            .map(|im| (0..im.channels).map(|c| im.pixels[p * im.channels + c] as f64 / 255.0).sum::<f64>() / im.channels as f64)
            .collect();
        let mean = vals.iter().sum::<f64>() / m;
        total += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    /// Relative to the dataset directory.
    pub path: PathBuf,
    pub label: Label,
    pub mask_path: Option<PathBuf>,
    pub subseed: u64,
}

impl ManifestEntry {
    fn line(&self) -> String {
        let mask = self.mask_path.as_ref().map_or("-".to_owned(), |m| m.display().to_string());
        let label = match self.label {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        };
        format!("{},{},{label},{mask},{}", self.split.as_str(), self.path.display(), self.subseed)
    }

    fn parse(line: &str, path: &Path, offset: usize) -> Result<Self> {
        let err = |detail: &str| Error::Parse {
            path: path.to_path_buf(),
            offset,
            detail: format!("{detail} in `{line}`"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(err("expected 5 fields"));
        }
        Ok(Self {
            split: match f[0] {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(err("unknown split")),
            },
            path: PathBuf::from(f[1]),
            label: match f[2] {
                "normal" => Label::Normal,
                "anomalous" => Label::Anomalous,
                _ => return Err(err("unknown label")),
            },
            mask_path: (f[3] != "-").then(|| PathBuf::from(f[3])),
            subseed: f[4].parse().map_err(|_| err("bad subseed"))?,
        })
    }
}

pub const MANIFEST: &str = "manifest.csv";
pub const CHECKSUMS: &str = "checksums.sha256";
pub const VARIABLE_MASK: &str = "variable_mask.pgm";
const MANIFEST_HEADER: &str = "split,path,label,mask_path_or_dash,subseed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitCounts {
    pub train: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 200,
            test_normal: 50,
            test_anomalous: 50,
        }
    }
}

/// Seeds for the clean base image and the defect of an anomalous sample.
pub fn anomalous_seeds(subseed: u64) -> (u64, u64) {
    (rng::derive_seed(subseed, "base", 0), rng::derive_seed(subseed, "defect", 0))
}

/// Writes images, masks, the manifest, the variable-region mask and checksums under `dir`.
pub fn generate_split(
    spec: &SceneSpec,
    counts: SplitCounts,
    defects: &DefectSpec,
    seed: u64,
    dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    spec.validate(defects)?;
    if counts.train == 0 || counts.test_normal == 0 {
        return Err(Error::Spec("train and normal test counts must be ≥ 1".into()));
    }
    let mut entries = Vec::new();
    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    let mut train_rasters = Vec::with_capacity(counts.train);
    for i in 0..counts.train {
        let subseed = rng::derive_seed(seed, "train", i as u64);
        let img = render_normal(spec, subseed);
        let path = PathBuf::from(format!("train/normal_{i:03}.ppm"));
        files.push((path.clone(), img.encode()));
        train_rasters.push(img);
        entries.push(ManifestEntry {
            split: Split::Train,
            path,
            label: Label::Normal,
            mask_path: None,
            subseed,
        });
    }
    let variable = spec.variable_mask();
    let invariant: Vec<bool> = variable.iter().map(|v| !v).collect();
    let (var_bg, var_obj) = (region_variance(&train_rasters, &variable), region_variance(&train_rasters, &invariant));
    if counts.train > 1 && var_bg < spec.min_variance_ratio * var_obj {
        return Err(Error::Spec(format!(
            "background variance {var_bg:.3e} is not {}× the object variance {var_obj:.3e}",
            spec.min_variance_ratio
        )));
    }
    for i in 0..counts.test_normal {
        let subseed = rng::derive_seed(seed, "test-normal", i as u64);
        let path = PathBuf::from(format!("test/normal_{i:03}.ppm"));
        files.push((path.clone(), render_normal(spec, subseed).encode()));
        entries.push(ManifestEntry {
            split: Split::Test,
            path,
            label: Label::Normal,
            mask_path: None,
            subseed,
        });
    }
    for i in 0..counts.test_anomalous {
        let subseed = rng::derive_seed(seed, "test-anomalous", i as u64);
        let (base_seed, defect_seed) = anomalous_seeds(subseed);
        let mut img = render_normal(spec, base_seed);
        let mask = apply_defect(spec, defects, &mut img, defect_seed)?;
        let path = PathBuf::from(format!("test/anomalous_{i:03}.ppm"));
        let mask_path = PathBuf::from(format!("test/anomalous_{i:03}_mask.pgm"));
        files.push((path.clone(), img.encode()));
        files.push((mask_path.clone(), mask_raster(spec.image_size, spec.image_size, &mask).encode()));
        entries.push(ManifestEntry {
            split: Split::Test,
            path,
            label: Label::Anomalous,
            mask_path: Some(mask_path),
            subseed,
        });
    }
    files.push((
        PathBuf::from(VARIABLE_MASK),
        mask_raster(spec.image_size, spec.image_size, &variable).encode(),
    ));
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for e in &entries {
        manifest.push_str(&e.line());
        manifest.push('\n');
    }
    files.push((PathBuf::from(MANIFEST), manifest.into_bytes()));
    let mut sums = String::new();
    for (path, bytes) in &files {
        write_atomic(&dir.join(path), bytes)?;
        writeln!(sums, "{}  {}", crate::io::sha256_hex(bytes), path.display()).unwrap();
    }
    write_atomic(&dir.join(CHECKSUMS), sums.as_bytes())?;
    Ok(entries)
}

/// Loaded dataset with images as `[3, H, W]` tensors.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub images: Vec<Tensor>,
    /// Per entry, the defect mask for anomalous samples.
    pub masks: Vec<Option<Vec<bool>>>,
    pub variable_mask: Vec<bool>,
}

/// Checks every file listed in the checksum file.
pub fn verify_checksums(dir: &Path) -> Result<()> {
    let path = dir.join(CHECKSUMS);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    for (offset, line) in text.lines().enumerate() {
        let (sum, file) = line.split_once("  ").ok_or_else(|| Error::Parse {
            path: path.clone(),
            offset,
            detail: "expected `<sha256>  <path>`".into(),
        })?;
        let target = dir.join(file);
        if sha256_file(&target)? != sum {
            return Err(Error::Checksum(target));
        }
    }
    Ok(())
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        verify_checksums(dir)?;
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        let mut offset = 0;
        for (i, line) in text.lines().enumerate() {
            if !(i == 0 && line == MANIFEST_HEADER) && !line.is_empty() {
                entries.push(ManifestEntry::parse(line, &path, offset)?);
            }
            offset += line.len() + 1;
        }
        let mut images = Vec::with_capacity(entries.len());
        let mut masks = Vec::with_capacity(entries.len());
        for e in &entries {
            images.push(load_image(&dir.join(&e.path))?);
            masks.push(match &e.mask_path {
                Some(m) => Some(load_mask(&dir.join(m))?.2),
                None => None,
            });
        }
        let variable_mask = load_mask(&dir.join(VARIABLE_MASK))?.2;
        Ok(Self {
            dir: dir.to_path_buf(),
            entries,
            images,
            masks,
            variable_mask,
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].split == split).collect()
    }

    pub fn split_images(&self, split: Split) -> (Vec<Tensor>, Vec<Label>) {
        self.indices(split)
            .into_iter()
            .map(|i| (self.images[i].clone(), self.entries[i].label))
            .unzip()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_counts() -> SplitCounts {
        SplitCounts {
            train: 6,
            test_normal: 3,
            test_anomalous: 4,
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = SceneSpec::default();
        generate_split(&spec, small_counts(), &DefectSpec::default(), 3, a.path()).unwrap();
        generate_split(&spec, small_counts(), &DefectSpec::default(), 3, b.path()).unwrap();
        for f in [MANIFEST, CHECKSUMS, "train/normal_005.ppm", "test/anomalous_003_mask.pgm"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn no_anomalies_requested() {
        let d = tempfile::tempdir().unwrap();
        let counts = SplitCounts {
            test_anomalous: 0,
            ..small_counts()
        };
        let entries = generate_split(&SceneSpec::default(), counts, &DefectSpec::default(), 1, d.path()).unwrap();
        assert!(entries.iter().all(|e| e.label == Label::Normal));
        let ds = Dataset::load(d.path()).unwrap();
        assert_eq!(ds.entries, entries);
    }

    #[test]
    fn defects_stay_in_invariant_region_and_pair_with_base() {
        let d = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default();
        generate_split(&spec, small_counts(), &DefectSpec::default(), 8, d.path()).unwrap();
        let ds = Dataset::load(d.path()).unwrap();
        for (i, e) in ds.entries.iter().enumerate().filter(|(_, e)| e.label == Label::Anomalous) {
            let mask = ds.masks[i].as_ref().unwrap();
            assert!(mask.iter().any(|&m| m));
            assert!(mask.iter().zip(&ds.variable_mask).all(|(&m, &v)| !(m && v)));
            let base = render_normal(&spec, anomalous_seeds(e.subseed).0);
            let img = Raster::read(&d.path().join(&e.path)).unwrap();
            for p in 0..mask.len() {
                if !mask[p] {
                    assert_eq!(&img.pixels[3 * p..3 * p + 3], &base.pixels[3 * p..3 * p + 3]);
                }
            }
        }
    }

    #[test]
    fn tampering_fails_checksum() {
        let d = tempfile::tempdir().unwrap();
        generate_split(&SceneSpec::default(), small_counts(), &DefectSpec::default(), 2, d.path()).unwrap();
        let victim = d.path().join("test/normal_001.ppm");
        let mut bytes = std::fs::read(&victim).unwrap();
        *bytes.last_mut().unwrap() ^= 1;
        std::fs::write(&victim, bytes).unwrap();
        assert!(matches!(Dataset::load(d.path()), Err(Error::Checksum(p)) if p == victim));
    }

    #[test]
    fn background_variance_dominates() {
        let spec = SceneSpec::default();
        let imgs: Vec<Raster> = (0..20).map(|i| render_normal(&spec, i)).collect();
        let var = spec.variable_mask();
        let inv: Vec<bool> = var.iter().map(|v| !v).collect();
        assert!(region_variance(&imgs, &var) >= 10.0 * region_variance(&imgs, &inv));
    }

    #[test]
    fn oversized_defects_are_rejected() {
        let defects = DefectSpec {
            max_size: 40,
            ..DefectSpec::default()
        };
        let d = tempfile::tempdir().unwrap();
        let err = generate_split(&SceneSpec::default(), small_counts(), &defects, 1, d.path()).unwrap_err();
        assert!(matches!(err, Error::Spec(_)), "{err}");
    }

    #[test]
    fn jitterless_background_fails_variance_check() {
        let spec = SceneSpec {
            texture_amplitude: 0.0,
            brightness_jitter: 0.0,
            ..SceneSpec::default()
        };
        let d = tempfile::tempdir().unwrap();
        let err = generate_split(&spec, small_counts(), &DefectSpec::default(), 1, d.path()).unwrap_err();
        assert!(matches!(err, Error::Spec(_)), "{err}");
    }
}
