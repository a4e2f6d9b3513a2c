use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wavemae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wavemae")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = wavemae(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = "preset = tiny\nmax_steps = 2\nft_epochs = 1\nprobe_epochs = 2\nf64_mode = true\n";

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    ok(dir.path(), &["synth", "--out", "a.wmc", "--per-class", "4", "--seed", "3"]);
    dir
}

#[test]
fn synth_is_byte_identical_and_counts_windows() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["synth", "--out", "b.wmc", "--per-class", "4", "--seed", "3"]);
    assert_eq!(fs::read(d.join("a.wmc")).unwrap(), fs::read(d.join("b.wmc")).unwrap());
    let labels = fs::read_to_string(d.join("a.wmc.labels")).unwrap();
    assert!(labels.starts_with("# classes = 3\n"));
    assert_eq!(labels.lines().count(), 13);

    let out = ok(d, &["synth", "--out", "e.wmc", "--modality", "emg", "--classes", "3", "--per-class", "200"]);
    assert!(out.contains("600 windows of 16x1024 at 2000 Hz"), "{out}");
}

#[test]
fn config_errors_exit_2_and_list_every_key() {
    let dir = workspace();
    let d = dir.path();
    fs::write(d.join("bad.cfg"), "dimm = 3\nlayers = x\nheads = 5\n").unwrap();
    let out = wavemae(d, &["--config", "bad.cfg", "pretrain", "--data", "a.wmc", "--out", "p.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dimm") && err.contains("layers"), "{err}");
    let out = wavemae(d, &["--set", "nope=1", "synth", "--out", "x.wmc"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = workspace();
    let d = dir.path();
    let out = wavemae(d, &["--config", "tiny.cfg", "pretrain", "--data", "missing.wmc", "--out", "p.ckpt"]);
    assert_eq!(out.status.code(), Some(3));
    let out = wavemae(d, &["--config", "tiny.cfg", "finetune", "--data", "a.wmc", "--out", "f.ckpt"]);
    assert_eq!(out.status.code(), Some(3), "missing checkpoint");
    // The default config expects 16x1024 windows.
    let out = wavemae(d, &["pretrain", "--data", "a.wmc", "--out", "p.ckpt"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn pipeline_end_to_end() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "tiny.cfg", "pretrain", "--data", "a.wmc", "--out", "p.ckpt", "--metrics", "m.csv"]);
    let m = fs::read_to_string(d.join("m.csv")).unwrap();
    assert!(m.contains("# preset") || m.contains("# dim = 64"), "config echo missing");
    assert!(m.lines().any(|l| l == "step,epoch,lr,loss"));
    assert_eq!(m.lines().filter(|l| !l.starts_with('#')).count(), 3);

    // Same seed, single thread, 64-bit: identical metrics.
    ok(d, &["--config", "tiny.cfg", "pretrain", "--data", "a.wmc", "--out", "p2.ckpt", "--metrics", "m2.csv"]);
    assert_eq!(m, fs::read_to_string(d.join("m2.csv")).unwrap());
    assert_eq!(fs::read(d.join("p.ckpt")).unwrap(), fs::read(d.join("p2.ckpt")).unwrap());

    ok(d, &["--config", "tiny.cfg", "pretrain", "--data", "a.wmc", "--out", "abl.ckpt", "--ablate-fgm"]);

    let out = ok(d, &["--config", "tiny.cfg", "finetune", "--data", "a.wmc", "--from", "p.ckpt", "--out", "f.ckpt", "--metrics", "fm.csv", "--test", "a.wmc"]);
    assert!(out.contains("test loss"), "{out}");
    assert!(fs::read_to_string(d.join("fm.csv")).unwrap().lines().any(|l| l == "step,epoch,lr,loss,val_acc"));
    ok(d, &["--config", "tiny.cfg", "finetune", "--data", "a.wmc", "--from", "p.ckpt", "--no-pretrain", "--out", "r.ckpt"]);

    fs::write(d.join("ext.csv"), (0..12).map(|i| format!("s{i},0.1,0.2,{}\n", i % 3)).collect::<String>()).unwrap();
    let out = ok(d, &["--config", "tiny.cfg", "fuse", "--modalities", "syn,ext:ext.csv", "--ckpt", "syn=p.ckpt", "--data", "syn=a.wmc", "--out", "probe.ckpt"]);
    assert!(out.contains("alpha syn") && out.contains("alpha ext"), "{out}");

    ok(d, &["inspect", "--ckpt", "probe.ckpt", "--out", "insp"]);
    let alpha = fs::read_to_string(d.join("insp/alpha.csv")).unwrap();
    let total: f64 = alpha.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-6);

    ok(d, &["inspect", "--ckpt", "p.ckpt", "--data", "a.wmc", "--index", "2", "--out", "insp"]);
    // Tiny geometry: 12 rows of 8 patches of width 32, 2 kept per row.
    let recon = fs::read_to_string(d.join("insp/recon.csv")).unwrap();
    assert_eq!(recon.lines().count() - 1, 12 * 6 * 32);
    let mask = fs::read_to_string(d.join("insp/mask.csv")).unwrap();
    let masked = mask.lines().skip(1).filter(|l| l.ends_with(",1")).count();
    assert!((masked as f64 / 96.0 - 0.7).abs() <= 1.0 / 8.0);
    let asm = fs::read_to_string(d.join("insp/assembled.csv")).unwrap();
    for l in asm.lines().skip(1) {
        let f: Vec<&str> = l.split(',').collect();
        if f[2] == "0" {
            assert_eq!(f[3], f[4], "unmasked sample changed: {l}");
        }
    }
    assert_eq!(fs::read_to_string(d.join("insp/spec.csv")).unwrap().lines().count() - 1, 12 * 256);
}

#[test]
fn preprocess_csv_record() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let fs_hz = 2000.0;
    let mut s = format!("fs={fs_hz}\n");
    for t in 0..4096 {
        let v = (std::f64::consts::TAU * 100.0 * t as f64 / fs_hz).sin();
        s.push_str(&format!("{v},{}\n", -v));
    }
    fs::write(d.join("rec.csv"), s).unwrap();
    let out = ok(d, &["preprocess", "--input", "rec.csv", "--out", "rec.wmc", "--modality", "emg"]);
    assert!(out.contains("7 windows of 16x1024 at 2000 Hz"), "{out}");
    let out = wavemae(d, &["preprocess", "--input", "nope.csv", "--out", "x.wmc", "--modality", "emg"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn numeric_blow_up_exits_4() {
    let dir = workspace();
    let out = wavemae(
        dir.path(),
        &["--config", "tiny.cfg", "--set", "lr_start=1e200", "--set", "lr_peak=1e200", "--set", "lr_floor=1e200", "--set", "max_steps=3", "pretrain", "--data", "a.wmc", "--out", "p.ckpt"],
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
