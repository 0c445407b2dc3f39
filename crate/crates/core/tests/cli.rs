use std::fs;
use std::path::Path;

use sandformer::cli::{self, command, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use sandformer::synth::procedural_scene;

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cli::run(
        std::iter::once("sandformer").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn scenes(dir: &Path, n: u64, h: usize, w: usize) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        procedural_scene(h, w, i)
            .save_png(dir.join(format!("s{i}.png")))
            .unwrap();
    }
}

#[test]
fn help_lists_every_flag_with_its_default() {
    for sub in command().get_subcommands() {
        let mut sub = sub.clone();
        let help = sub.render_long_help().to_string();
        for arg in sub.get_arguments() {
            let Some(long) = arg.get_long() else { continue };
            assert!(
                help.contains(&format!("--{long}")),
                "{}: --{long} missing",
                sub.get_name()
            );
            if !arg.get_action().takes_values() {
                continue;
            }
            for d in arg.get_default_values() {
                let shown = format!("[default: {}]", d.to_string_lossy());
                assert!(
                    help.contains(&shown),
                    "{}: --{long} default {shown} not shown",
                    sub.get_name()
                );
            }
        }
        let (code, out, _) = run(&[sub.get_name(), "--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("Usage"));
    }
}

#[test]
fn train_flags_cover_every_config_key() {
    let train = command().find_subcommand("train").unwrap().clone();
    for (key, _) in sandformer::train::TrainConfig::default().to_pairs() {
        let flag = key.replace('_', "-");
        assert!(
            train.get_arguments().any(|a| a.get_long() == Some(flag.as_str())),
            "no --{flag}"
        );
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(&["train", "--no-such-flag"]).0, EXIT_USAGE);
    assert_eq!(run(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(run(&[]).0, EXIT_USAGE);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o").display().to_string();
    let (code, _, err) = run(&["train", "--out", &out, "--crop", "30"]);
    assert_eq!(code, EXIT_USAGE, "{err}");
    assert!(err.contains("crop"));
    let (code, _, err) = run(&["train", "--out", &out, "--set", "nonsense=1"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("nonsense"));
}

#[test]
fn missing_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    assert_eq!(run(&["synth", "--in", &p("nope"), "--out", &p("o")]).0, EXIT_DATA);
    assert_eq!(run(&["train", "--manifest", &p("nope"), "--out", &p("t")]).0, EXIT_DATA);
    assert_eq!(
        run(&[
            "restore",
            "--checkpoint",
            &p("x.sndf"),
            "--in",
            &p("."),
            "--out",
            &p("r")
        ])
        .0,
        EXIT_DATA
    );
}

#[test]
fn pipeline_with_precedence_and_force() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    scenes(&dir.path().join("clean"), 2, 24, 32);
    fs::write(
        dir.path().join("pipeline.cfg"),
        "# shared settings\nseed = 3\nsteps = 7\nbatch = 1\ncrop = 16\nper_image = 2\npresets = sand\ncheckpoint_every = 0\n",
    )
    .unwrap();

    let (code, out, err) = run(&[
        "synth",
        "--in",
        &p("clean"),
        "--out",
        &p("data"),
        "--config",
        &p("pipeline.cfg"),
        "--per-image",
        "1",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("wrote 2 samples"), "flag beats config file: {out}");
    let repro = fs::read_to_string(dir.path().join("data/repro.txt")).unwrap();
    assert!(repro.contains("seed: 3"));
    assert!(repro.contains("config_hash: sha256:"));
    assert_eq!(repro.lines().filter(|l| l.starts_with("timestamp")).count(), 1);

    let train = |force: bool| {
        let mut a = vec![
            "train",
            "--manifest",
            "",
            "--out",
            "",
            "--config",
            "",
            "--set",
            "steps=4",
            "--steps",
            "2",
        ];
        let (m, o, c) = (p("data"), p("run"), p("pipeline.cfg"));
        a[2] = &m;
        a[4] = &o;
        a[6] = &c;
        if force {
            a.push("--force");
        }
        run(&a)
    };
    let (code, out, err) = train(false);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("step 2"), "{out}");
    let loss = fs::read_to_string(dir.path().join("run/loss.tsv")).unwrap();
    assert_eq!(
        loss.lines()
            .filter(|l| !l.starts_with(|c: char| c.is_alphabetic() || c == '#'))
            .count(),
        2
    );

    let (code, _, err) = train(false);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("--force"));
    assert_eq!(train(true).0, EXIT_OK);

    let (code, out, err) = run(&[
        "eval",
        "--checkpoint",
        &p("run/final.sndf"),
        "--manifest",
        &p("data"),
        "--out",
        &p("eval"),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("model"));
    let report = fs::read_to_string(dir.path().join("eval/report.tsv")).unwrap();
    assert!(report.contains("degraded\tmean\tok"));

    let (code, _, err) = run(&[
        "restore",
        "--checkpoint",
        &p("run/final.sndf"),
        "--in",
        &p("clean"),
        "--out",
        &p("restored"),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(dir.path().join("restored/s1.png").exists());
}

#[test]
fn eval_reports_missing_files_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    scenes(&dir.path().join("clean"), 2, 16, 16);
    assert_eq!(
        run(&["synth", "--in", &p("clean"), "--out", &p("data"), "--presets", "dust"]).0,
        EXIT_OK
    );
    fs::remove_file(dir.path().join("data/s0_dust_0_degraded.png")).unwrap();
    let (code, out, _) = run(&["eval", "--manifest", &p("data"), "--out", &p("eval")]);
    assert_eq!(code, EXIT_DATA);
    assert!(out.contains("missing"));
    let report = fs::read_to_string(dir.path().join("eval/report.tsv")).unwrap();
    assert!(report.contains("model\ts0_dust_0\tmissing"), "{report}");
    assert!(report.contains("model\ts1_dust_0\tok"));
}
