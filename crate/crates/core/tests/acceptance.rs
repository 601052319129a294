//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the summary is always printed.
//! `RAAD_ACCEPT=1,3,5` restricts the run to the listed criteria; `RAAD_THREADS`
//! sets evaluation workers for the pipeline runs.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use raad::hqs::{assign_bits, layer_scores, normalize_scores, BitPolicy, LayerScore};
use raad::metrics::oracle::{oracle_ap, oracle_au_pro, oracle_auroc};
use raad::metrics::{au_pro, auroc, average_precision, EvalReport, ScoredSample};
use raad::models::{build_pdn, LayerTaps, PdnWidths};
use raad::pipeline::{Pipeline, PipelineConfig};
use raad::quant::{build_caches, calibrate_scale, quantize_block, Granularity, QuantBlock, QuantScheme, ALLOWED_BITS};
use raad::train::{hard_mined_loss, pair_loss, Label};
use raad::{Tape, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn threads() -> usize {
    std::env::var("RAAD_THREADS").ok().and_then(|v| v.parse().ok()).unwrap_or(1).max(1)
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let checks = common::gradient_suite(0xacce);
    let elapsed = start.elapsed();
    let mut per_op: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for c in &checks {
        let e = per_op.entry(c.op).or_default();
        e.0 += 1;
        e.1 = e.1.max(c.result.max_rel_err);
    }
    let worst = per_op.values().map(|v| v.1).fold(0.0, f64::max);
    for (op, (n, err)) in &per_op {
        ensure!(*n >= common::SHAPES_PER_OP, "{op}: only {n} shapes");
        ensure!(*err <= common::GRAD_TOL, "{op}: rel err {err:e}");
    }
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "{} ops x {} shapes, worst rel err {worst:.1e}, {:.2}s",
        per_op.len(),
        common::SHAPES_PER_OP,
        elapsed.as_secs_f64()
    ))
}

fn random_samples(r: &mut SplitMix64, tie_heavy: bool) -> Vec<ScoredSample> {
    let n = r.gen_range(2..60);
    let mut s: Vec<ScoredSample> = (0..n)
        .map(|_| {
            let score = if tie_heavy { r.gen_range(0..4) as f64 } else { r.gen_range(-5.0..5.0) };
            let label = if r.gen_bool(0.4) { Label::Anomalous } else { Label::Normal };
            ScoredSample::new(score, label)
        })
        .collect();
    s[0].label = Label::Normal;
    s[1].label = Label::Anomalous;
    s
}

fn random_pro_fixture(r: &mut SplitMix64) -> (Vec<Tensor>, Vec<Vec<bool>>) {
    let images = r.gen_range(1..=3);
    let (h, w) = (r.gen_range(3..=6), r.gen_range(3..=6));
    let levels = r.gen_range(3..=12);
    let mut maps = Vec::new();
    let mut masks = Vec::new();
    for i in 0..images {
        maps.push(Tensor::from_fn(vec![h, w], |_| r.gen_range(0..levels) as f64 / levels as f64));
        let mut m: Vec<bool> = (0..h * w).map(|_| r.gen_bool(0.25)).collect();
        if i == 0 {
            m[0] = true;
            m[h * w - 1] = false;
        }
        masks.push(m);
    }
    (maps, masks)
}

fn c2_metric_oracles() -> Outcome {
    let mut r = SplitMix64::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let s = random_samples(&mut r, i % 2 == 0);
        let d1 = (auroc(&s).unwrap() - oracle_auroc(&s).unwrap()).abs();
        let d2 = (average_precision(&s).unwrap() - oracle_ap(&s).unwrap()).abs();
        ensure!(d1 <= 1e-12 && d2 <= 1e-12, "instance {i}: auroc diff {d1:e}, ap diff {d2:e}");
        worst = worst.max(d1).max(d2);
    }
    let mut worst_pro: f64 = 0.0;
    for i in 0..20 {
        let (maps, masks) = random_pro_fixture(&mut r);
        for limit in [0.3, 1.0] {
            let d = (au_pro(&maps, &masks, limit).unwrap() - oracle_au_pro(&maps, &masks, limit).unwrap()).abs();
            ensure!(d <= 1e-12, "au_pro fixture {i} at limit {limit}: diff {d:e}");
            worst_pro = worst_pro.max(d);
        }
    }
    Ok(format!(
        "100 ranking instances (50 tie-heavy) max diff {worst:.1e}; 20 au_pro fixtures max diff {worst_pro:.1e}"
    ))
}

fn c3_hand_values() -> Outcome {
    let a = Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap();
    let b = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
    let pl = pair_loss(&a, &b).unwrap();
    ensure!(pl == 2.5, "pair_loss = {pl}");
    let mut s: Vec<ScoredSample> = [1.0, 2.0, 3.0].iter().map(|&v| ScoredSample::new(v, Label::Normal)).collect();
    s.extend([2.5, 4.0].iter().map(|&v| ScoredSample::new(v, Label::Anomalous)));
    let au = auroc(&s).unwrap();
    ensure!(au == 5.0 / 6.0, "auroc = {au}");
    let t = LayerTaps(vec![Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()]);
    let st = LayerTaps(vec![Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 0.0]).unwrap()]);
    let raw = layer_scores(&[t], &[st]).unwrap()[0].raw;
    ensure!(raw == 4.0, "HQS raw score = {raw}");
    Ok("pair_loss 2.5, AUROC 5/6, HQS raw 4.0 (exact)".into())
}

fn calibration_images(seed: u64) -> Vec<Tensor> {
    let mut r = SplitMix64::seed_from_u64(seed);
    (0..4).map(|_| Tensor::from_fn(vec![3, 24, 24], |_| r.gen_range(0.0..1.0))).collect()
}

fn c4_quantization() -> Outcome {
    let mut r = SplitMix64::seed_from_u64(4);
    let mut checked = 0usize;
    for _ in 0..200 {
        let shape = vec![r.gen_range(1..5), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)];
        let spread = r.gen_range(0.01..5.0);
        let x = Tensor::from_fn(shape, |_| r.gen_range(-spread..spread));
        for &bits in &ALLOWED_BITS {
            for g in [Granularity::PerTensor, Granularity::PerOutputChannel] {
                let scales = calibrate_scale(&x, bits, g).unwrap();
                let s = QuantScheme::weights(bits, scales.clone()).unwrap();
                let y = s.quantize_dequantize(&x).unwrap();
                let (lo, hi) = s.range();
                let per = x.numel() / x.shape()[0];
                for (i, (a, b)) in x.data().iter().zip(y.data()).enumerate() {
                    let sc = if scales.len() == 1 { scales[0] } else { scales[i / per] };
                    let q = (a / sc).round();
                    if q >= lo as f64 && q <= hi as f64 {
                        ensure!((a - b).abs() <= sc / 2.0 * (1.0 + 1e-12), "bits {bits}: |{a} - {b}| > {sc}/2");
                        checked += 1;
                    }
                }
            }
        }
    }
    let mut violations = Vec::new();
    let mut blocks_checked = 0;
    for seed in 0..20u64 {
        let net = build_pdn("q", 2, 1, PdnWidths([4, 6, 6]), seed).unwrap();
        let images = calibration_images(seed);
        let blocks: Vec<QuantBlock> = (0..net.conv_count()).map(QuantBlock::single).collect();
        let caches = build_caches(&net, &blocks, &images, |tape, f, _| {
            let sq = tape.square(f.output)?;
            tape.mean(sq)
        })
        .unwrap();
        for cache in &caches {
            let errs: Vec<f64> = [2, 3, 4, 8].iter().map(|&b| quantize_block(&net, cache, &[b]).unwrap().error_after()).collect();
            if errs.windows(2).any(|w| w[1] > w[0]) {
                violations.push(format!("seed {seed} conv {}: {errs:?}", cache.block.first + 1));
            }
            blocks_checked += 1;
        }
    }
    ensure!(violations.is_empty(), "{} violations: {}", violations.len(), violations.join("; "));
    Ok(format!("{checked} unclamped round-trips within scale/2; {blocks_checked} blocks over 20 seeds monotone in 2->3->4->8"))
}

fn c5_hqs() -> Outcome {
    let mut r = SplitMix64::seed_from_u64(5);
    for case in 0..500 {
        let n = r.gen_range(2..10);
        let raws: Vec<LayerScore> = (0..n)
            .map(|layer| LayerScore {
                layer,
                raw: if r.gen_bool(0.2) { 1.0 } else { r.gen_range(0.0..10.0) },
                normalized: 0.0,
            })
            .collect();
        let norm = normalize_scores(&raws).unwrap();
        let policy = BitPolicy::new(n);
        let bits = assign_bits(&norm, &policy);
        ensure!(bits[0] == 8 && bits[n - 1] == 8, "case {case}: ends {bits:?}");
        for a in 1..n.saturating_sub(1) {
            for b in 1..n - 1 {
                ensure!(
                    !(norm[a].normalized < norm[b].normalized && bits[a] > bits[b]),
                    "case {case}: not monotone {bits:?}"
                );
            }
        }
    }
    let tap = |v: f64| Tensor::full(vec![1, 1, 2, 2], v);
    let t = LayerTaps((0..5).map(|_| tap(0.0)).collect());
    let s = LayerTaps(vec![tap(0.3), tap(0.05), tap(1.5), tap(0.4), tap(0.2)]);
    let scores = normalize_scores(&layer_scores(&[t], &[s]).unwrap()).unwrap();
    let bits = assign_bits(&scores, &BitPolicy::new(5));
    ensure!(bits[2] == 8, "injected layer 3 got {} bits ({bits:?})", bits[2]);
    ensure!(bits[1] == 2, "minimal-score layer 2 got {} bits ({bits:?})", bits[1]);
    Ok(format!("500 random score vectors monotone with pinned ends; injected fixture bits {bits:?}"))
}

fn c6_sparsity() -> Outcome {
    let mut r = SplitMix64::seed_from_u64(6);
    let mut seen = Vec::new();
    for _ in 0..10 {
        let (c, h, w) = (r.gen_range(1..9), r.gen_range(1..12), r.gen_range(1..12));
        let n = c * h * w;
        let d = Tensor::from_fn(vec![1, c, h, w], |_| r.gen_range(0.0..1.0)).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&d);
        let loss = hard_mined_loss(&mut tape, v, 0.1).unwrap();
        let g = tape.backward(loss).unwrap();
        let nonzero = g.get(v).unwrap().iter().filter(|&&x| x != 0.0).count();
        let expected = n.div_ceil(10);
        ensure!(nonzero == expected, "shape {c}x{h}x{w}: {nonzero} nonzero, expected {expected}");
        seen.push(format!("{c}x{h}x{w}:{nonzero}"));
    }
    Ok(format!("10 shapes exact [{}]", seen.join(" ")))
}

struct SeedRun {
    dir: PathBuf,
    reports: Vec<EvalReport>,
    elapsed: Duration,
}

struct Benchmark {
    _root: tempfile::TempDir,
    runs: Vec<SeedRun>,
}

fn default_run(dir: &Path, seed: u64) -> SeedRun {
    let mut cfg = PipelineConfig::default();
    cfg.seed = seed;
    cfg.out_dir = dir.to_path_buf();
    let start = Instant::now();
    let reports = Pipeline::new(cfg).unwrap().with_threads(threads()).run_all().unwrap();
    SeedRun {
        dir: dir.to_path_buf(),
        reports,
        elapsed: start.elapsed(),
    }
}

/// Default-benchmark runs for seeds 0, 1, 2, shared by criteria 7, 8 and 9.
fn benchmark() -> &'static Benchmark {
    static B: OnceLock<Benchmark> = OnceLock::new();
    B.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let runs = (0..3).map(|s| default_run(&root.path().join(format!("seed{s}")), s)).collect();
        Benchmark { _root: root, runs }
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn c7_ablation() -> Outcome {
    let b = benchmark();
    let mut lines = Vec::new();
    for run in &b.runs {
        let [base, quant, raad] = [&run.reports[0], &run.reports[1], &run.reports[2]];
        lines.push(format!(
            "seed {}: baseline {:.4} quant {:.4} raad {:.4} (raad-baseline {:+.4}, raad-quant {:+.4}, {:.0}s)",
            base.seed,
            base.auroc,
            quant.auroc,
            raad.auroc,
            raad.auroc - base.auroc,
            raad.auroc - quant.auroc,
            run.elapsed.as_secs_f64()
        ));
    }
    let col = |i: usize| median(b.runs.iter().map(|r| r.reports[i].auroc).collect());
    let (mb, mq, mr) = (col(0), col(1), col(2));
    let strict = b.runs.iter().all(|r| r.reports[2].auroc > r.reports[0].auroc);
    let summary = format!(
        "median AUROC baseline {mb:.4} quant {mq:.4} raad {mr:.4}; strict improvement over baseline in every seed: {}\n    {}",
        if strict { "observed" } else { "not observed" },
        lines.join("\n    ")
    );
    for run in &b.runs {
        ensure!(run.elapsed < Duration::from_secs(30 * 60), "seed run took {:?}\n    {summary}", run.elapsed);
    }
    ensure!(mr >= mb - 0.005 && mr >= mq, "{summary}");
    Ok(summary)
}

fn c8_bias_mass() -> Outcome {
    let b = benchmark();
    let mut lower = 0;
    let mut lines = Vec::new();
    for run in &b.runs {
        let (base, quant, raad) = (run.reports[0].bias_mass, run.reports[1].bias_mass, run.reports[2].bias_mass);
        if raad < base {
            lower += 1;
        }
        lines.push(format!(
            "seed {}: baseline {base:.4} quant {quant:.4} raad {raad:.4} ({:+.4})",
            run.reports[0].seed,
            raad - base
        ));
    }
    let summary = format!("raad below baseline in {lower}/3 seeds\n    {}", lines.join("\n    "));
    ensure!(lower >= 2, "{summary}");
    Ok(summary)
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
    }
    out
}

fn c9_determinism() -> Outcome {
    let first = &benchmark().runs[0];
    let root = tempfile::tempdir().unwrap();
    let second = default_run(&root.path().join("seed0"), 0);
    let mut compared = 0;
    for sub in ["reports", "heatmaps"] {
        let (a, b) = (files_under(&first.dir.join(sub)), files_under(&second.dir.join(sub)));
        ensure!(a.keys().eq(b.keys()), "{sub}: file sets differ");
        for (name, bytes) in &a {
            ensure!(&b[name] == bytes, "{sub}/{} differs", name.display());
            compared += 1;
        }
    }
    Ok(format!("{compared} report and heatmap files byte-identical across two seed-0 runs"))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "gradient fidelity", c1_gradients),
        (2, "metric oracle equivalence", c2_metric_oracles),
        (3, "hand values", c3_hand_values),
        (4, "quantization bound and monotonicity", c4_quantization),
        (5, "HQS contract", c5_hqs),
        (6, "hard-mining gradient sparsity", c6_sparsity),
        (7, "three-stage ablation direction", c7_ablation),
        (8, "bias-breaking proxy", c8_bias_mass),
        (9, "determinism", c9_determinism),
    ];
    let only: Option<Vec<u32>> = std::env::var("RAAD_ACCEPT")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {id} ({name}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
