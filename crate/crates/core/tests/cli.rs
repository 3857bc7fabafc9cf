use std::path::Path;
use std::process::{Command, Output};

use photonshrink::io::read_depth;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_photonshrink"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SIMULATE: &[&str] = &[
    "simulate",
    "--synth",
    "staircase",
    "--rows",
    "16",
    "--cols",
    "16",
    "--signal",
    "2",
    "--background",
    "50",
    "--seed",
    "7",
    "--out",
    "cube.spcb",
    "--gt-out",
    "gt.pfm",
];

#[test]
fn simulate_reconstruct_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, SIMULATE);
    for method in ["argmax", "lmfilter", "shrinkage"] {
        let out = format!("{method}.pfm");
        ok(
            d,
            &[
                "reconstruct",
                "--input",
                "cube.spcb",
                "--method",
                method,
                "--out",
                &out,
            ],
        );
        let csv = ok(d, &["eval", "--pred", &out, "--gt", "gt.pfm"]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("rmse,acc_1.01,acc_1.02,acc_1.03,avg_var")
        );
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 5);
        let rmse: f64 = row[0].parse().unwrap();
        assert!(rmse.is_finite() && rmse >= 0.0, "{method}: {rmse}");
    }
    let custom = ok(
        d,
        &[
            "eval",
            "--pred",
            "argmax.pfm",
            "--gt",
            "gt.pfm",
            "--delta",
            "1.25,2",
        ],
    );
    assert!(custom.starts_with("rmse,acc_1.25,acc_2,avg_var"));
}

#[test]
fn patch_reconstruction_and_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, SIMULATE);
    ok(
        d,
        &["reconstruct", "--input", "cube.spcb", "--out", "whole.pfm"],
    );
    ok(
        d,
        &[
            "reconstruct",
            "--input",
            "cube.spcb",
            "--patch",
            "8",
            "--out",
            "tiled.pfm",
        ],
    );
    assert_eq!(
        read_depth(&d.join("whole.pfm")).unwrap(),
        read_depth(&d.join("tiled.pfm")).unwrap()
    );

    std::fs::write(
        d.join("train.toml"),
        "samples = 2\nrows = 8\ncols = 8\nencoder_stages = 1\nbase_channels = 2\nprs_blocks = 1\nepochs = 1\nbatch_size = 2\n",
    )
    .unwrap();
    let log = ok(
        d,
        &[
            "train",
            "--config",
            "train.toml",
            "--seed",
            "3",
            "--out-model",
            "m.prsm",
        ],
    );
    assert!(log.starts_with("epoch 0"));
    ok(
        d,
        &[
            "reconstruct",
            "--input",
            "cube.spcb",
            "--method",
            "prsnet",
            "--model",
            "m.prsm",
            "--patch",
            "8",
            "--stride",
            "4",
            "--out",
            "net.pfm",
        ],
    );
    assert_eq!(read_depth(&d.join("net.pfm")).unwrap().rows(), 16);
}

#[test]
fn invalid_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, SIMULATE);
    let bad = run(
        d,
        &[
            "reconstruct",
            "--input",
            "cube.spcb",
            "--method",
            "median",
            "--out",
            "x.pfm",
        ],
    );
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("median"));
    let missing = run(
        d,
        &["reconstruct", "--input", "nope.spcb", "--out", "x.pfm"],
    );
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
    let no_model = run(
        d,
        &[
            "reconstruct",
            "--input",
            "cube.spcb",
            "--method",
            "prsnet",
            "--out",
            "x.pfm",
        ],
    );
    assert!(!no_model.status.success());
    assert!(!run(d, &["simulate", "--synth", "cone", "--out", "c.spcb"])
        .status
        .success());
    assert!(!d.join("x.pfm").exists());
}

#[test]
fn repeated_commands_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("t.toml"),
        "samples = 2\nrows = 4\ncols = 4\nbins = 16\nfwhm_ps = 80\nencoder_stages = 1\nbase_channels = 2\nepochs = 2\n",
    )
    .unwrap();
    let mut outputs = Vec::new();
    for _ in 0..2 {
        ok(d, SIMULATE);
        ok(
            d,
            &[
                "reconstruct",
                "--input",
                "cube.spcb",
                "--method",
                "shrinkage",
                "--out",
                "z.pfm",
            ],
        );
        let log = ok(
            d,
            &[
                "train",
                "--config",
                "t.toml",
                "--seed",
                "5",
                "--out-model",
                "m.prsm",
            ],
        );
        let files =
            ["cube.spcb", "gt.pfm", "z.pfm", "m.prsm"].map(|f| std::fs::read(d.join(f)).unwrap());
        outputs.push((files, log));
    }
    assert_eq!(outputs[0], outputs[1]);
}
