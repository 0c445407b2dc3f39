//! The `sandformer` command line: synth, train, eval, restore, gradcheck, ablate.
//!
//! Settings resolve as defaults < `--config` file < `--set KEY=VALUE` <
//! explicit flags. Flags are generated from the config keys, so the
//! `--help` output and the parser cannot drift apart.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use sha2::{Digest, Sha256};

use crate::dcp::DcpConfig;
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::image::ImageBuffer;
use crate::model::{Model, ModelConfig};
use crate::synth::{list_images, synthesize_dataset, Manifest, SynthConfig};
use crate::train::{self, evaluate, load_checkpoint, restore_image, run_ablation, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const REPRO_FILE: &str = "repro.txt";
pub const REPORT_FILE: &str = "report.tsv";
pub const GRADCHECK_FILE: &str = "gradcheck.tsv";
pub const ABLATION_FILE: &str = "ablation.tsv";

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::State(_)
        | Error::Io { .. }
        | Error::Image { .. }
        | Error::Format(_)
        | Error::UnsupportedVersion(_)
        | Error::Corrupt { .. }
        | Error::Checksum { .. }
        | Error::ConfigMismatch { .. }
        | Error::Data(_) => EXIT_DATA,
    }
}

fn flag_name(key: &str) -> String {
    key.replace(['_', '.'], "-")
}

fn key_help(key: &str) -> &'static str {
    match key {
        "manifest" => "Training manifest (file or dataset directory)",
        "steps" => "Optimizer steps",
        "batch" => "Samples per step",
        "lr" => "Adam learning rate",
        "beta1" => "Adam first-moment decay",
        "beta2" => "Adam second-moment decay",
        "eps_adam" => "Adam denominator epsilon",
        "loss_eps" => "Charbonnier epsilon",
        "seed" => "Global seed",
        "crop" => "Square crop side (multiple of 2^stages)",
        "checkpoint_every" => "Checkpoint interval in steps (0 = final only)",
        "base_channels" => "Shallow feature width C0",
        "stages" => "Branch + fusion rounds",
        "heads" => "Attention heads, one value or one per stage",
        "ffn_expansion" => "Feed-forward expansion factor",
        "fusion" => "Branch fusion: gate, sk, add, none",
        "branches" => "Branches: both, cnn, transformer",
        "downsample" => "Halve resolution each stage",
        "presets" => "Severities to synthesize: dust, sand, sandstorm",
        "per_image" => "Samples per image and preset",
        "depth" => "Depth prior: constant:D, ramp:NEAR:FAR, file:NEAR:FAR:PATH",
        "dcp_patch" => "DCP dark-channel window (odd)",
        "dcp_omega" => "DCP haze retention",
        "dcp_t0" => "DCP transmission floor",
        "dcp_airlight_percent" => "DCP airlight candidate fraction",
        "instances" => "Random instances per gradient check",
        _ => "",
    }
}

/// Keys owned by each subcommand's settings, with their defaults.
fn train_keys() -> Vec<(String, String)> {
    TrainConfig::default().to_pairs()
}

fn synth_keys() -> Vec<(String, String)> {
    let mut v = vec![("seed".to_string(), "0".to_string())];
    v.extend(
        SynthConfig::default()
            .to_pairs()
            .into_iter()
            .filter(|(k, _)| !k.contains('.')),
    );
    v
}

fn dcp_keys() -> Vec<(String, String)> {
    let d = DcpConfig::default();
    vec![
        ("dcp_patch".into(), d.patch.to_string()),
        ("dcp_omega".into(), d.omega.to_string()),
        ("dcp_t0".into(), d.t0.to_string()),
        ("dcp_airlight_percent".into(), d.airlight_percent.to_string()),
    ]
}

fn model_keys() -> Vec<(String, String)> {
    let mut v = vec![("seed".to_string(), "0".to_string())];
    v.extend(
        ModelConfig::toy()
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v)),
    );
    v
}

fn set_dcp(cfg: &mut DcpConfig, key: &str, value: &str) -> Result<bool> {
    let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{key}={value}: {e}"));
    match key {
        "dcp_patch" => cfg.patch = value.trim().parse().map_err(|e| bad(&e))?,
        "dcp_omega" => cfg.omega = value.trim().parse().map_err(|e| bad(&e))?,
        "dcp_t0" => cfg.t0 = value.trim().parse().map_err(|e| bad(&e))?,
        "dcp_airlight_percent" => cfg.airlight_percent = value.trim().parse().map_err(|e| bad(&e))?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Every key any subcommand understands; config files may mix them.
fn is_known_key(key: &str) -> bool {
    let mut probe_s = SynthConfig::default();
    let mut probe_t = TrainConfig::default();
    let mut probe_d = DcpConfig::default();
    // Probing with a syntactically wrong value still tells us ownership:
    // `Ok(false)` means unknown, anything else means some setter owns it.
    !matches!(probe_t.set(key, "\u{0}"), Ok(false))
        || !matches!(probe_s.set(key, "\u{0}"), Ok(false))
        || !matches!(set_dcp(&mut probe_d, key, "\u{0}"), Ok(false))
        || key == "instances"
}

/// `key = value` lines; `#` starts a comment. Keys may use `-` or `_`.
pub fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected key = value", path.display(), n + 1)))?;
        let key = k.trim().replace('-', "_");
        if !is_known_key(&key) {
            return Err(Error::Config(format!(
                "{}:{}: unknown key `{key}`",
                path.display(),
                n + 1
            )));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn common_args(cmd: Command, out_required: bool) -> Command {
    cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .help("key = value settings file"),
    )
    .arg(
        Arg::new("set")
            .long("set")
            .value_name("KEY=VALUE")
            .action(ArgAction::Append)
            .help("Override one setting (repeatable)"),
    )
    .arg(
        Arg::new("out")
            .long("out")
            .value_name("DIR")
            .required(out_required)
            .help("Output directory"),
    )
    .arg(
        Arg::new("force")
            .long("force")
            .action(ArgAction::SetTrue)
            .help("Allow writing into a non-empty output directory"),
    )
}

fn key_args(mut cmd: Command, keys: &[(String, String)]) -> Command {
    for (k, default) in keys {
        cmd = cmd.arg(
            Arg::new(k.clone())
                .long(flag_name(k))
                .value_name("VALUE")
                .default_value(default.clone())
                .help(key_help(k)),
        );
    }
    cmd
}

pub fn command() -> Command {
    let synth = key_args(
        common_args(
            Command::new("synth").about("Synthesize sand-degraded pairs from clean images"),
            true,
        )
        .arg(
            Arg::new("in")
                .long("in")
                .value_name("DIR")
                .required(true)
                .help("Directory of clean PNG/PPM images"),
        ),
        &synth_keys(),
    );
    let train = key_args(
        common_args(
            Command::new("train").about("Train a model on a synthesized manifest"),
            true,
        )
        .arg(
            Arg::new("resume")
                .long("resume")
                .value_name("CKPT")
                .help("Continue from a checkpoint"),
        ),
        &train_keys(),
    );
    let eval = key_args(
        key_args(
            common_args(
                Command::new("eval").about("Score model, degraded input and optionally DCP"),
                true,
            )
            .arg(
                Arg::new("checkpoint")
                    .long("checkpoint")
                    .value_name("CKPT")
                    .help("Trained checkpoint; omitted means a freshly built model"),
            )
            .arg(
                Arg::new("manifest")
                    .long("manifest")
                    .value_name("PATH")
                    .required(true)
                    .help("Manifest to score (file or dataset directory)"),
            )
            .arg(
                Arg::new("with-dcp")
                    .long("with-dcp")
                    .action(ArgAction::SetTrue)
                    .help("Also score the dark-channel baseline"),
            ),
            &model_keys(),
        ),
        &dcp_keys(),
    );
    let restore = common_args(
        Command::new("restore").about("Restore every image of a directory"),
        true,
    )
    .arg(
        Arg::new("checkpoint")
            .long("checkpoint")
            .value_name("CKPT")
            .required(true)
            .help("Trained checkpoint"),
    )
    .arg(
        Arg::new("in")
            .long("in")
            .value_name("DIR")
            .required(true)
            .help("Directory of degraded PNG/PPM images"),
    )
    .arg(
        Arg::new("seed")
            .long("seed")
            .value_name("VALUE")
            .default_value("0")
            .help(key_help("seed")),
    );
    let gradcheck = common_args(
        Command::new("gradcheck").about("Finite-difference check of every op and block"),
        false,
    )
    .arg(
        Arg::new("seed")
            .long("seed")
            .value_name("VALUE")
            .default_value("0")
            .help(key_help("seed")),
    )
    .arg(
        Arg::new("instances")
            .long("instances")
            .value_name("VALUE")
            .default_value("10")
            .help(key_help("instances")),
    );
    let ablate = key_args(
        common_args(
            Command::new("ablate").about("Train and score the five fusion/branch topologies"),
            true,
        )
        .arg(
            Arg::new("eval-manifest")
                .long("eval-manifest")
                .value_name("PATH")
                .help("Score on this manifest instead of the training one"),
        ),
        &train_keys(),
    );
    Command::new("sandformer")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Sand-dust image restoration lab")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(synth)
        .subcommand(train)
        .subcommand(eval)
        .subcommand(restore)
        .subcommand(gradcheck)
        .subcommand(ablate)
}

/// Resolved `key=value` settings in precedence order.
fn resolve(m: &ArgMatches, keys: &[(String, String)]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    if let Some(p) = m.get_one::<String>("config") {
        out.extend(parse_config_file(Path::new(p))?);
    }
    if let Some(sets) = m.get_many::<String>("set") {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
            let key = k.trim().replace('-', "_");
            if !is_known_key(&key) {
                return Err(Error::Config(format!("--set: unknown key `{key}`")));
            }
            out.push((key, v.trim().to_string()));
        }
    }
    for (k, _) in keys {
        if m.value_source(k) == Some(ValueSource::CommandLine) {
            out.push((k.clone(), m.get_one::<String>(k).expect("has value").clone()));
        }
    }
    Ok(out)
}

/// Applies settings to whichever configs own each key.
fn apply(settings: &[(String, String)], mut targets: Vec<&mut dyn FnMut(&str, &str) -> Result<bool>>) -> Result<()> {
    for (k, v) in settings {
        for t in targets.iter_mut() {
            t(k, v)?;
        }
    }
    Ok(())
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::invalid(format!(
                "output directory {} is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `repro.txt`: seed, config hash and version, plus a single
/// timestamp line (the only line that differs between identical runs).
fn write_repro(dir: &Path, command: &str, seed: u64, settings: &[(String, String)]) -> Result<()> {
    let canonical: String = settings.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let hash = format!("{:x}", Sha256::digest(canonical.as_bytes()));
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut text = format!(
        "command: {command}\nversion: {}\nseed: {seed}\nconfig_hash: sha256:{hash}\ntimestamp_unix: {stamp}\n",
        env!("CARGO_PKG_VERSION")
    );
    for line in canonical.lines() {
        text.push_str(&format!("config: {line}\n"));
    }
    let path = dir.join(REPRO_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn out_dir(m: &ArgMatches) -> Option<PathBuf> {
    m.get_one::<String>("out").map(PathBuf::from)
}

fn parse_seed(m: &ArgMatches, settings: &[(String, String)]) -> Result<u64> {
    let raw = settings
        .iter()
        .rev()
        .find(|(k, _)| k == "seed")
        .map(|(_, v)| v.clone())
        .or_else(|| m.get_one::<String>("seed").cloned())
        .unwrap_or_else(|| "0".into());
    raw.trim()
        .parse()
        .map_err(|e| Error::Config(format!("seed={raw}: {e}")))
}

fn cmd_synth(m: &ArgMatches, out: &mut dyn Write) -> Result<i32> {
    let settings = resolve(m, &synth_keys())?;
    let mut cfg = SynthConfig::default();
    apply(&settings, vec![&mut |k, v| cfg.set(k, v)])?;
    let dir = out_dir(m).expect("required");
    let input = PathBuf::from(m.get_one::<String>("in").expect("required"));
    if !input.is_dir() {
        return Err(Error::Data(format!(
            "input directory {} does not exist",
            input.display()
        )));
    }
    prepare_out_dir(&dir, m.get_flag("force"))?;
    let manifest = synthesize_dataset(&input, &dir, &cfg)?;
    let mut canon: Vec<(String, String)> = vec![("seed".into(), cfg.seed.to_string())];
    canon.extend(cfg.to_pairs());
    write_repro(&dir, "synth", cfg.seed, &canon)?;
    let _ = writeln!(
        out,
        "wrote {} samples to {} ({} inputs skipped)",
        manifest.rows.len(),
        dir.display(),
        manifest.skipped
    );
    Ok(if manifest.skipped > 0 { EXIT_DATA } else { EXIT_OK })
}

fn train_config(m: &ArgMatches) -> Result<TrainConfig> {
    let settings = resolve(m, &train_keys())?;
    let mut cfg = TrainConfig::default();
    apply(&settings, vec![&mut |k, v| cfg.set(k, v)])?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(m: &ArgMatches, out: &mut dyn Write) -> Result<i32> {
    let cfg = train_config(m)?;
    let dir = out_dir(m).expect("required");
    let resume = match m.get_one::<String>("resume") {
        Some(p) => Some(load_checkpoint(p, Some(&cfg.model))?),
        None => None,
    };
    prepare_out_dir(&dir, m.get_flag("force"))?;
    write_repro(&dir, "train", cfg.seed, &cfg.to_pairs())?;
    let outcome = train::train(&cfg, Some(&dir), resume)?;
    let last = outcome.losses.last().map(|l| l.1).unwrap_or(f64::NAN);
    let _ = writeln!(
        out,
        "trained to step {} (final loss {last:.6}); checkpoint {}",
        outcome.checkpoint.step,
        dir.join(train::FINAL_CHECKPOINT).display()
    );
    Ok(EXIT_OK)
}

fn cmd_eval(m: &ArgMatches, out: &mut dyn Write) -> Result<i32> {
    let mut keys = model_keys();
    keys.extend(dcp_keys());
    let settings = resolve(m, &keys)?;
    let mut model_cfg = ModelConfig::toy();
    let mut dcp = DcpConfig::default();
    apply(
        &settings,
        vec![&mut |k, v| model_cfg.set(k, v), &mut |k, v| set_dcp(&mut dcp, k, v)],
    )?;
    let seed = parse_seed(m, &settings)?;
    let manifest = Manifest::load(m.get_one::<String>("manifest").expect("required"))?;
    let model = match m.get_one::<String>("checkpoint") {
        Some(p) => load_checkpoint(p, None)?.model,
        None => Model::<f32>::build(&model_cfg, seed)?,
    };
    let with_dcp = m.get_flag("with-dcp");
    let report = evaluate(&model, &manifest, with_dcp.then_some(&dcp))?;
    let dir = out_dir(m).expect("required");
    prepare_out_dir(&dir, m.get_flag("force"))?;
    let mut canon: Vec<(String, String)> = vec![("seed".into(), seed.to_string())];
    canon.extend(model.config.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)));
    canon.push(("with_dcp".into(), with_dcp.to_string()));
    if with_dcp {
        canon.extend(dcp_keys().into_iter().map(|(k, _)| {
            let v = match k.as_str() {
                "dcp_patch" => dcp.patch.to_string(),
                "dcp_omega" => dcp.omega.to_string(),
                "dcp_t0" => dcp.t0.to_string(),
                _ => dcp.airlight_percent.to_string(),
            };
            (k, v)
        }));
    }
    write_repro(&dir, "eval", seed, &canon)?;
    let path = dir.join(REPORT_FILE);
    fs::write(&path, report.to_tsv()).map_err(|e| Error::io(&path, e))?;
    for method in report.methods() {
        if let Some((p, s)) = report.mean(method) {
            let _ = writeln!(out, "{method:<9} psnr {p:>8.3} dB  ssim {s:.4}");
        }
    }
    let missing = report.missing();
    if missing > 0 {
        let _ = writeln!(out, "{missing} rows missing; see {}", path.display());
        return Ok(EXIT_DATA);
    }
    Ok(EXIT_OK)
}

fn cmd_restore(m: &ArgMatches, out: &mut dyn Write) -> Result<i32> {
    let settings = resolve(m, &[("seed".to_string(), "0".to_string())])?;
    let seed = parse_seed(m, &settings)?;
    let ckpt = load_checkpoint(m.get_one::<String>("checkpoint").expect("required"), None)?;
    let input = PathBuf::from(m.get_one::<String>("in").expect("required"));
    if !input.is_dir() {
        return Err(Error::Data(format!(
            "input directory {} does not exist",
            input.display()
        )));
    }
    let files = list_images(&input)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG or PPM images in {}", input.display())));
    }
    let dir = out_dir(m).expect("required");
    prepare_out_dir(&dir, m.get_flag("force"))?;
    let mut canon: Vec<(String, String)> = vec![("seed".into(), seed.to_string())];
    canon.extend(
        ckpt.model
            .config
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v)),
    );
    write_repro(&dir, "restore", seed, &canon)?;
    for f in &files {
        let img = ImageBuffer::load(f)?;
        let restored = restore_image(&ckpt.model, &img)?;
        let name = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        restored.save_png(dir.join(format!("{name}.png")))?;
    }
    let _ = writeln!(out, "restored {} images into {}", files.len(), dir.display());
    Ok(EXIT_OK)
}

fn cmd_gradcheck(m: &ArgMatches, out: &mut dyn Write) -> Result<i32> {
    let settings = resolve(
        m,
        &[
            ("seed".to_string(), "0".to_string()),
            ("instances".to_string(), "10".to_string()),
        ],
    )?;
    let seed = parse_seed(m, &settings)?;
    let instances_raw = settings
        .iter()
        .rev()
        .find(|(k, _)| k == "instances")
        .map(|(_, v)| v.clone())
        .unwrap_or_else(|| m.get_one::<String>("instances").expect("default").clone());
    let instances: usize = instances_raw
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("instances={instances_raw}: {e}")))?;
    let report = gradcheck::run_suite(seed, instances)?;
    let mut tsv = String::from("block\tworst_rel_err\tworst_at\tcoords\tinstances\tstatus\n");
    let mut failed = 0;
    for e in &report {
        let status = if e.passed() { "pass" } else { "FAIL" };
        failed += usize::from(!e.passed());
        let _ = writeln!(
            out,
            "{:<20} worst rel err {:.3e}  at {:<32} {status}",
            e.name, e.worst_rel_err, e.worst_at
        );
        tsv.push_str(&format!(
            "{}\t{:.6e}\t{}\t{}\t{}\t{status}\n",
            e.name, e.worst_rel_err, e.worst_at, e.coords, e.instances
        ));
    }
    if let Some(dir) = out_dir(m) {
        prepare_out_dir(&dir, m.get_flag("force"))?;
        write_repro(
            &dir,
            "gradcheck",
            seed,
            &[
                ("seed".into(), seed.to_string()),
                ("instances".into(), instances.to_string()),
            ],
        )?;
        let path = dir.join(GRADCHECK_FILE);
        fs::write(&path, tsv).map_err(|e| Error::io(&path, e))?;
    }
    if failed > 0 {
        let _ = writeln!(
            out,
            "{failed} blocks at or above relative error {:e}",
            gradcheck::TOLERANCE
        );
        return Ok(EXIT_NUMERIC);
    }
    Ok(EXIT_OK)
}

fn cmd_ablate(m: &ArgMatches, out: &mut dyn Write) -> Result<i32> {
    let cfg = train_config(m)?;
    let eval = match m.get_one::<String>("eval-manifest") {
        Some(p) => Some(Manifest::load(p)?),
        None => None,
    };
    let dir = out_dir(m).expect("required");
    prepare_out_dir(&dir, m.get_flag("force"))?;
    write_repro(&dir, "ablate", cfg.seed, &cfg.to_pairs())?;
    let table = run_ablation(&cfg, eval.as_ref(), Some(&dir))?;
    let path = dir.join(ABLATION_FILE);
    fs::write(&path, table.to_tsv()).map_err(|e| Error::io(&path, e))?;
    let _ = writeln!(out, "{:<28} {:>9} {:>7}   reference", "variant", "psnr", "ssim");
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{:<28} {:>9.3} {:>7.4}   {:.3} / {:.3}",
            r.label, r.psnr_db, r.ssim, r.reference_psnr_db, r.reference_ssim
        );
    }
    let _ = writeln!(out, "measured ordering: {}", table.ordering().join(" > "));
    Ok(EXIT_OK)
}

/// Runs one invocation and returns its exit status. `args[0]` is the program name.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = match name {
        "synth" => cmd_synth(sub, out),
        "train" => cmd_train(sub, out),
        "eval" => cmd_eval(sub, out),
        "restore" => cmd_restore(sub, out),
        "gradcheck" => cmd_gradcheck(sub, out),
        "ablate" => cmd_ablate(sub, out),
        _ => unreachable!("clap rejects unknown subcommands"),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
