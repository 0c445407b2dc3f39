//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the binary exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sandformer::cli;
use sandformer::dcp::{dark_channel, dehaze_dcp, estimate_airlight, DcpConfig};
use sandformer::gradcheck::{run_suite, TOLERANCE};
use sandformer::metrics::{psnr, ssim};
use sandformer::synth::{
    degrade, depth_map, procedural_scene, synthesize_dataset, transmission_map, DepthMode, Manifest, Severity,
    SynthConfig,
};
use sandformer::train::{
    evaluate, restore_image, run_ablation, train_on, Checkpoint, TrainConfig, TrainData, ABLATION_VARIANTS, MAGIC,
};
use sandformer::{Branches, Error, FusionKind, ImageBuffer, Model, ModelConfig, Plane};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageBuffer {
    ImageBuffer::from_fn(h, w, |_, _, _| rng.gen::<f32>())
}

/// Writes `n` procedural scenes as PNGs and synthesizes one `severity` pair each.
fn synth_dataset(root: &Path, n: u64, size: usize, severity: Severity, seed: u64) -> Manifest {
    let clean = root.join("clean");
    fs::create_dir_all(&clean).unwrap();
    for i in 0..n {
        procedural_scene(size, size, i)
            .save_png(clean.join(format!("scene{i}.png")))
            .unwrap();
    }
    let mut cfg = SynthConfig::default();
    cfg.presets = vec![severity];
    cfg.per_image = 1;
    cfg.seed = seed;
    synthesize_dataset(&clean, &root.join("data"), &cfg).unwrap()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let suite = run_suite(2024, 10).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = suite
        .iter()
        .max_by(|a, b| a.worst_rel_err.total_cmp(&b.worst_rel_err))
        .unwrap();
    for name in [
        "cnn_block",
        "mdta",
        "dswaffn",
        "transformer_block",
        "gate_fusion",
        "sk_fusion",
        "network",
    ] {
        ensure!(suite.iter().any(|e| e.name == name), "suite lacks `{name}`");
    }
    let failed: Vec<String> = suite
        .iter()
        .filter(|e| !e.passed() || e.instances < 10)
        .map(|e| format!("{} {:.2e} ({} instances)", e.name, e.worst_rel_err, e.instances))
        .collect();
    ensure!(failed.is_empty(), "at or above {TOLERANCE:e}: {}", failed.join(", "));
    ensure!(secs < 120.0, "took {secs:.1}s");
    Ok(format!(
        "{} checks x10 instances, worst {:.2e} ({}), {secs:.1}s",
        suite.len(),
        worst.worst_rel_err,
        worst.name
    ))
}

fn synthesis_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let modes = [
        DepthMode::default(),
        DepthMode::Constant(1.7),
        DepthMode::VerticalRamp { near: 0.2, far: 5.0 },
    ];
    for trial in 0..12 {
        let (h, w) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let clean = random_image(&mut rng, h, w);
        let a = [
            rng.gen_range(0.5..1.0),
            rng.gen_range(0.4..0.9),
            rng.gen_range(0.2..0.7),
        ];
        let depth = depth_map(&modes[trial % modes.len()], h, w).unwrap();

        let same = degrade(&clean, a, &transmission_map(&depth, 0.0).unwrap()).unwrap();
        ensure!(same.data() == clean.data(), "beta=0 changed pixels (trial {trial})");

        let opaque = degrade(&clean, a, &Plane::filled(h, w, 1e-7)).unwrap();
        let far = (0..h * w * 3)
            .map(|i| (opaque.data()[i] - a[i % 3]).abs())
            .fold(0.0f32, f32::max);
        ensure!(far < 1e-6, "t=1e-7 leaves |I-A| = {far:e}");

        let mut prev: Option<ImageBuffer> = None;
        for beta in [0.5, 1.0, 2.0] {
            let img = degrade(&clean, a, &transmission_map(&depth, beta).unwrap()).unwrap();
            if let Some(p) = &prev {
                for i in 0..h * w * 3 {
                    let (before, after) = ((p.data()[i] - a[i % 3]).abs(), (img.data()[i] - a[i % 3]).abs());
                    ensure!(
                        after <= before,
                        "|I-A| grew at {i} for beta {beta}: {before} -> {after}"
                    );
                }
            }
            prev = Some(img);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 5.0, "took {secs:.2}s");
    Ok(format!("12 random scenes, {secs:.2}s"))
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    // 0.1 is not representable in f32, so the 100:1 peak²/MSE ratio uses
    // exact binary values: difference 1/8 against peak 5/4.
    let a = ImageBuffer::filled(9, 7, [0.25; 3]);
    let b = ImageBuffer::filled(9, 7, [0.375; 3]);
    let uniform = psnr(&a, &b, 1.25).unwrap();
    ensure!((uniform - 20.0).abs() < 1e-9, "uniform case {uniform}");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(11..30), rng.gen_range(11..30));
        let x = random_image(&mut rng, h, w);
        let y = random_image(&mut rng, h, w);
        let mut sse = 0.0f64;
        for (p, q) in x.data().iter().zip(y.data()) {
            sse += (*p as f64 - *q as f64).powi(2);
        }
        let direct = 10.0 * (1.0 / (sse / (h * w * 3) as f64)).log10();
        worst = worst.max((psnr(&x, &y, 1.0).unwrap() - direct).abs());
        let s = ssim(&x, &x).unwrap();
        ensure!((s - 1.0).abs() < 1e-12, "SSIM(x,x) = {s}");
    }
    ensure!(worst < 1e-9, "PSNR deviates {worst:e} dB from the direct formula");

    // Flat gray images: variance terms vanish and SSIM reduces to the
    // luminance term (2ab + C1) / (a² + b² + C1).
    let flat = ssim(
        &ImageBuffer::filled(16, 16, [0.25; 3]),
        &ImageBuffer::filled(16, 16, [0.5; 3]),
    )
    .unwrap();
    let c1 = 1e-4;
    let closed = (2.0 * 0.25 * 0.5 + c1) / (0.25f64.powi(2) + 0.5f64.powi(2) + c1);
    ensure!(
        (flat - closed).abs() < 1e-12,
        "flat SSIM {flat} vs closed form {closed}"
    );
    ensure!((flat - 0.80006).abs() < 1e-5, "flat SSIM {flat} vs 0.80006");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.2}s");
    Ok(format!("20 random pairs, flat SSIM {flat:.6}, {secs:.2}s"))
}

fn identity_at_init() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (seed, cfg) in [(0, ModelConfig::toy()), (9, ModelConfig::toy())] {
        let model = Model::<f32>::build(&cfg, seed).unwrap();
        let x = random_image(&mut rng, 24, 36);
        let y = restore_image(&model, &x).unwrap();
        ensure!(y.data() == x.data(), "fresh model (seed {seed}) changed its input");
        let odd = random_image(&mut rng, 13, 7);
        ensure!(
            restore_image(&model, &odd).unwrap().data() == odd.data(),
            "padded path not identity"
        );
    }
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(dir.path(), 3, 40, Severity::Sand, 4);
    let model = Model::<f32>::build(&ModelConfig::toy(), 1).unwrap();
    let report = evaluate(&model, &manifest, None).unwrap();
    let rows = |m: &str| -> Vec<_> {
        report
            .rows
            .iter()
            .filter(|r| r.method == m)
            .map(|r| (r.id.clone(), r.status.clone()))
            .collect()
    };
    ensure!(
        rows("model") == rows("degraded"),
        "model rows differ from degraded rows"
    );
    ensure!(rows("model").len() == 3, "expected 3 rows");
    Ok("bitwise identity; model rows equal degraded rows on 3 samples".into())
}

fn overfit() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(dir.path(), 4, 64, Severity::Dust, 0);
    let data = TrainData::load(&manifest).unwrap();
    let cfg = TrainConfig {
        model: ModelConfig::toy(),
        steps: 500,
        batch: 4,
        crop: 64,
        checkpoint_every: 0,
        ..Default::default()
    };
    ensure!(
        cfg.model.base_channels == 16
            && cfg.model.stages == 2
            && cfg.model.heads == vec![1]
            && cfg.model.ffn_expansion == 2.0
            && cfg.model.fusion == FusionKind::Gate
            && cfg.adam.lr == 1e-3,
        "toy config drifted: {:?}",
        cfg.model
    );
    let start = Instant::now();
    let out = train_on(&cfg, &data, None, None).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let report = evaluate(&out.checkpoint.model, &manifest, None).unwrap();
    let (model_db, _) = report.mean("model").unwrap();
    let (degraded_db, _) = report.mean("degraded").unwrap();
    let summary = format!("model {model_db:.2} dB vs degraded {degraded_db:.2} dB, {secs:.0}s");
    ensure!(model_db >= 28.0, "{summary}");
    ensure!(model_db > degraded_db, "{summary}");
    ensure!(secs < 600.0, "{summary}");
    Ok(summary)
}

fn ablation() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(dir.path(), 2, 32, Severity::Sand, 6);
    let base = TrainConfig {
        manifest: dir.path().join("data"),
        steps: 3,
        batch: 2,
        crop: 32,
        checkpoint_every: 0,
        seed: 17,
        ..Default::default()
    };
    let table = run_ablation(&base, Some(&manifest), None).map_err(|e| e.to_string())?;
    ensure!(table.rows.len() == 5, "{} rows", table.rows.len());
    let expected = [
        (Branches::Transformer, FusionKind::None, 31.426, 0.941),
        (Branches::Cnn, FusionKind::None, 20.449, 0.826),
        (Branches::Both, FusionKind::Add, 30.986, 0.941),
        (Branches::Both, FusionKind::Sk, 31.667, 0.948),
        (Branches::Both, FusionKind::Gate, 34.150, 0.952),
    ];
    for (row, (br, fu, p, s)) in table.rows.iter().zip(expected) {
        ensure!(
            row.config.branches == br && row.config.fusion == fu,
            "{}: topology {}/{}",
            row.label,
            row.config.branches,
            row.config.fusion
        );
        ensure!(
            row.reference_psnr_db == p && row.reference_ssim == s,
            "{}: reference values",
            row.label
        );
        ensure!(
            row.data_digest == table.rows[0].data_digest,
            "{}: different data order",
            row.label
        );
        ensure!(row.psnr_db.is_finite(), "{}: no score", row.label);
    }
    ensure!(ABLATION_VARIANTS.len() == 5, "variant table size");
    ensure!(table.seed == 17 && table.steps == 3, "budget not recorded");
    let tsv = table.to_tsv();
    ensure!(
        tsv.contains("reference_psnr_db") && tsv.contains("34.150"),
        "reference column missing"
    );
    let mut distinct: Vec<usize> = table.rows.iter().map(|r| r.parameters).collect();
    distinct.sort();
    distinct.dedup();
    ensure!(distinct.len() >= 4, "topologies share parameter counts: {distinct:?}");
    Ok(format!("ordering at 3 steps: {}", table.ordering().join(" > ")))
}

fn brute_dark_channel(img: &ImageBuffer, patch: usize) -> Vec<f32> {
    let r = (patch / 2) as isize;
    let (h, w) = (img.height() as isize, img.width() as isize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut m = f32::INFINITY;
            for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                    for c in 0..3 {
                        m = m.min(img.get(yy as usize, xx as usize, c));
                    }
                }
            }
            out.push(m);
        }
    }
    out
}

fn dcp_baseline() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cases = 0;
    for h in 1..=12 {
        for w in 1..=12 {
            let img = random_image(&mut rng, h, w);
            for patch in [1, 3, 5] {
                let fast = dark_channel(&img, patch).unwrap();
                ensure!(
                    fast.data() == brute_dark_channel(&img, patch).as_slice(),
                    "{h}x{w} patch {patch}"
                );
                cases += 1;
            }
        }
    }

    let airlight = [0.8f32; 3];
    let clean = procedural_scene(96, 96, 21);
    let depth = depth_map(&DepthMode::Constant(1.0), 96, 96).unwrap();
    let hazy = degrade(&clean, airlight, &transmission_map(&depth, 1.5).unwrap()).unwrap();
    let cfg = DcpConfig::default();
    let est = estimate_airlight(&hazy, &dark_channel(&hazy, cfg.patch).unwrap(), cfg.airlight_percent).unwrap();
    let err = (0..3).map(|c| (est[c] - airlight[c]).abs()).fold(0.0f32, f32::max);
    ensure!(err <= 0.05, "airlight {est:?}, error {err}");
    let before = psnr(&hazy, &clean, 1.0).unwrap();
    let after = psnr(&dehaze_dcp(&hazy, &cfg).unwrap(), &clean, 1.0).unwrap();
    ensure!(after > before, "dehazed {after:.2} dB vs hazy {before:.2} dB");
    Ok(format!(
        "{cases} brute-force cases; airlight error {err:.4}; PSNR {before:.2} -> {after:.2} dB"
    ))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = cli::run(
        std::iter::once("sandformer").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    if code == cli::EXIT_OK {
        Ok(())
    } else {
        Err(format!(
            "`{}` exited {code}: {}",
            args.join(" "),
            String::from_utf8_lossy(&err)
        ))
    }
}

/// Every file under `root`, with the repro timestamp line dropped.
fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let mut bytes = fs::read(&p).unwrap();
            if p.file_name().unwrap() == cli::REPRO_FILE {
                let text = String::from_utf8(bytes).unwrap();
                bytes = text
                    .lines()
                    .filter(|l| !l.starts_with("timestamp"))
                    .collect::<Vec<_>>()
                    .join("\n")
                    .into_bytes();
            }
            out.insert(p.strip_prefix(root).unwrap().display().to_string(), bytes);
        }
    }
    out
}

fn end_to_end(root: &Path) -> Result<(), String> {
    let s = |p: &str| root.join(p).display().to_string();
    let clean = root.join("clean");
    fs::create_dir_all(&clean).unwrap();
    for i in 0..3 {
        procedural_scene(40, 48, 30 + i)
            .save_png(clean.join(format!("img{i}.png")))
            .unwrap();
    }
    run_cli(&[
        "synth",
        "--in",
        &s("clean"),
        "--out",
        &s("data"),
        "--seed",
        "42",
        "--presets",
        "dust,sandstorm",
    ])?;
    run_cli(&[
        "train",
        "--manifest",
        &s("data"),
        "--out",
        &s("run"),
        "--seed",
        "42",
        "--steps",
        "50",
        "--batch",
        "2",
        "--crop",
        "32",
        "--checkpoint-every",
        "25",
    ])?;
    run_cli(&[
        "eval",
        "--checkpoint",
        &s("run/final.sndf"),
        "--manifest",
        &s("data"),
        "--out",
        &s("eval"),
        "--with-dcp",
    ])
}

fn determinism_and_persistence() -> Outcome {
    // Both runs use the same path: the repro header records input paths.
    let a = tempfile::tempdir().unwrap();
    end_to_end(a.path())?;
    let ta = tree(a.path());
    let bytes = fs::read(a.path().join("run/final.sndf")).unwrap();
    fs::remove_dir_all(a.path()).unwrap();
    end_to_end(a.path())?;
    let tb = tree(a.path());
    ensure!(ta.keys().eq(tb.keys()), "file sets differ");
    for (k, v) in &ta {
        ensure!(tb[k] == *v, "{k} differs between runs");
    }
    for f in [
        "run/final.sndf",
        "run/ckpt_000025.sndf",
        "eval/report.tsv",
        "run/loss.tsv",
    ] {
        ensure!(ta.contains_key(f), "missing {f}");
    }

    let ck = Checkpoint::from_bytes(&bytes, None).map_err(|e| e.to_string())?;
    ensure!(ck.to_bytes() == bytes, "save/load is not bitwise");
    ensure!(ck.step == 50, "step {}", ck.step);

    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x10;
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    let mut bad_version = bytes.clone();
    bad_version[MAGIC.len()] = 9;
    let mut other = ck.model.config.clone();
    other.base_channels = 8;
    let checks: [(&str, Result<Checkpoint, Error>, fn(&Error) -> bool); 6] = [
        ("bit flip", Checkpoint::from_bytes(&flipped, None), |e| {
            matches!(e, Error::Checksum { .. })
        }),
        (
            "truncation",
            Checkpoint::from_bytes(&bytes[..bytes.len() - 7], None),
            |e| matches!(e, Error::Corrupt { .. }),
        ),
        (
            "trailing bytes",
            Checkpoint::from_bytes(&[&bytes[..], &[0u8; 3]].concat(), None),
            |e| matches!(e, Error::Corrupt { .. }),
        ),
        ("bad magic", Checkpoint::from_bytes(&bad_magic, None), |e| {
            matches!(e, Error::Format(_))
        }),
        ("version", Checkpoint::from_bytes(&bad_version, None), |e| {
            matches!(e, Error::UnsupportedVersion(9))
        }),
        ("config", Checkpoint::from_bytes(&bytes, Some(&other)), |e| {
            matches!(e, Error::ConfigMismatch { .. })
        }),
    ];
    for (what, result, class) in checks {
        match result {
            Ok(_) => return Err(format!("{what}: accepted")),
            Err(e) if !class(&e) => return Err(format!("{what}: wrong class {e}")),
            Err(_) => {}
        }
    }
    Ok(format!(
        "{} files identical across runs; 6 corruption classes rejected",
        ta.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("synthesis identities", synthesis_identities),
        ("metric oracles", metric_oracles),
        ("identity at init", identity_at_init),
        ("overfit", overfit),
        ("ablation harness", ablation),
        ("dcp baseline", dcp_baseline),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let only = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail}) [{secs:.1}s]", i + 1),
            Err(why) => {
                failures += 1;
                println!("criterion {} {name}: FAIL ({why}) [{secs:.1}s]", i + 1);
            }
        }
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
