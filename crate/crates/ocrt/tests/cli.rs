//! End-to-end tests of the `ocrt` binary: exit codes, dataset
//! determinism, config precedence, and artifact layout.

use std::path::Path;
use std::process::{Command, Output};

fn ocrt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ocrt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).expect("readable file")
}

const TINY: &[&str] = &[
    "--k", "3", "--k_tilde", "3", "--d_o", "8", "--d_z", "8", "--d_r", "8", "--n_r", "2",
    "--t", "2", "--size", "16", "--count", "3", "--seed", "9",
];

fn gen_tiny(dir: &Path) {
    let out = dir.to_str().unwrap();
    let mut args = vec!["gen", "--out", out];
    args.extend_from_slice(TINY);
    let r = ocrt(&args);
    assert!(r.status.success(), "gen failed: {}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn gen_is_deterministic_in_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_tiny(&a);
    gen_tiny(&b);
    assert_eq!(read(&a.join("manifest.txt")), read(&b.join("manifest.txt")));
    assert_eq!(read(&a.join("scenes/0000.tns")), read(&b.join("scenes/0000.tns")));
    assert_eq!(read(&a.join("masks/0000.tns")), read(&b.join("masks/0000.tns")));
}

#[test]
fn gen_manifest_has_one_record_per_scene() {
    let tmp = tempfile::tempdir().unwrap();
    gen_tiny(tmp.path());
    let manifest = String::from_utf8(read(&tmp.path().join("manifest.txt"))).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    for line in manifest.lines() {
        assert!(line.contains("idx="), "manifest line lacks idx: {line}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.cfg");
    std::fs::write(&cfg_path, "k = 3\nk_tilde = 2\nsize = 16\ncount = 2\nseed = 1\n").unwrap();
    let out = tmp.path().join("data");
    let r = ocrt(&[
        "gen",
        "--out",
        out.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--k",
        "4",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let written = String::from_utf8(read(&out.join("config.txt"))).unwrap();
    assert!(written.lines().any(|l| l == "k=4"), "flag did not win: {written}");
    assert!(written.lines().any(|l| l == "size=16"), "config file ignored: {written}");
}

#[test]
fn invalid_config_value_exits_with_code_1() {
    let tmp = tempfile::tempdir().unwrap();
    let r = ocrt(&["gen", "--out", tmp.path().join("d").to_str().unwrap(), "--k", "0"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&r.stderr).is_empty());
}

#[test]
fn eval_on_a_missing_checkpoint_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    gen_tiny(&tmp.path().join("data"));
    let r = ocrt(&[
        "eval",
        "--checkpoint",
        tmp.path().join("nope").to_str().unwrap(),
        "--data",
        tmp.path().join("data").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn training_a_later_phase_first_is_an_ordering_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data);
    let run = tmp.path().join("run");
    let mut args = vec![
        "train",
        "--phase",
        "relation",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    let r = ocrt(&args);
    assert_eq!(r.status.code(), Some(1));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("ocl"), "error should name the missing phase: {err}");
}

#[test]
fn full_pipeline_runs_and_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data);
    let run = tmp.path().join("run");
    let schedule: &[&str] = &[
        "--epochs_ocl", "1", "--epochs_relation", "1", "--steps_sam", "2", "--steps_clip", "1",
        "--pgd_steps", "2",
    ];
    for phase in ["ocl", "relation", "sam", "clip"] {
        let mut args = vec![
            "train",
            "--phase",
            phase,
            "--data",
            data.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
        ];
        args.extend_from_slice(TINY);
        args.extend_from_slice(schedule);
        let r = ocrt(&args);
        assert!(
            r.status.success(),
            "{phase} failed: {}",
            String::from_utf8_lossy(&r.stderr)
        );
        assert!(run.join(phase).join("meta.txt").exists());
        let log = String::from_utf8_lossy(&r.stdout);
        assert!(log.contains("step=0 "), "{phase} printed no step lines: {log}");
    }

    let metrics = tmp.path().join("metrics.json");
    let r = ocrt(&[
        "eval",
        "--checkpoint",
        run.join("clip").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        metrics.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let json = String::from_utf8(read(&metrics)).unwrap();
    for key in ["count", "slot_iou", "seg_iou_box", "embed_clean", "embed_adv"] {
        assert!(json.contains(key), "metrics missing {key}: {json}");
    }

    let art = tmp.path().join("art");
    let r = ocrt(&[
        "inspect",
        "--checkpoint",
        run.join("ocl").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--scene",
        "0",
        "--out",
        art.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["mask_0.pgm", "attn_0.pgm", "omega.txt", "adjacency.txt", "t_rel.tns"] {
        assert!(art.join(f).exists(), "inspect did not write {f}");
    }
}
