use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stereosig::costvol::CostVolume;
use stereosig::imageio::{decode_disp16, encode_ppm, RawImage};

fn stereosig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stereosig")).args(args).output().unwrap()
}

fn run(args: &[&str]) -> String {
    let out = stereosig(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, count: usize, dims: &str, seed: u64) -> PathBuf {
    let out = dir.join(format!("data{seed}"));
    run(&["synth", "--count", &count.to_string(), "--dims", dims, "--seed", &seed.to_string(), "--out", s(&out)]);
    out
}

const TINY: &str = "iterations = 4\nlr = 1e-3\nbatch_size = 2\ndisparities = 8\nlevels = 3\nbase_channels = 4\n\
                    channel_increment = 4\nsignature_dims = 8,4\nstem_channels = 4\nnorm_samples = 3\ncheckpoint_interval = 2\n";

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(stereosig(&[]).status.code(), Some(2));
    assert_eq!(stereosig(&["bogus"]).status.code(), Some(2));
    assert_eq!(stereosig(&["infer", "--left", "x.ppm"]).status.code(), Some(2));
    assert_eq!(stereosig(&["--help"]).status.code(), Some(0));
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), 3, "64x48", 4);
    let b = dir.path().join("again");
    run(&["synth", "--count", "3", "--dims", "64x48", "--seed", "4", "--out", s(&b)]);
    for sub in ["left", "right", "disp_left", "disp_right"] {
        for i in 0..3 {
            let ext = if sub.starts_with("disp") { "pgm" } else { "ppm" };
            let name = format!("{i:04}.{ext}");
            assert_eq!(std::fs::read(a.join(sub).join(&name)).unwrap(), std::fs::read(b.join(sub).join(&name)).unwrap());
        }
    }
    assert_eq!(stereosig(&["synth", "--count", "1", "--dims", "64", "--out", s(&b)]).status.code(), Some(2));
}

#[test]
fn train_resume_infer_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth(d, 3, "96x96", 1);
    std::fs::write(d.join("train.cfg"), TINY).unwrap();
    let full = d.join("full.fdsc");
    let ckpt = d.join("ckpt");
    run(&["train", "--config", s(&d.join("train.cfg")), "--data", s(&data), "--out-weights", s(&full), "--checkpoint-dir", s(&ckpt)]);
    let log = std::fs::read_to_string(d.join("full.fdsc.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);

    let resumed = d.join("resumed.fdsc");
    let mid = ckpt.join("checkpoint_000002.fdsc");
    let out = run(&["train", "--config", s(&d.join("train.cfg")), "--data", s(&data), "--out-weights", s(&resumed), "--resume", s(&mid), "--checkpoint-dir", s(&d.join("ckpt2"))]);
    assert!(out.contains("iterations 3..4"), "{out}");
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&resumed).unwrap());

    let pred_dir = d.join("pred");
    std::fs::create_dir(&pred_dir).unwrap();
    let left = data.join("left/0000.ppm");
    let right = data.join("right/0000.ppm");
    for mode in ["train", "test"] {
        let out = pred_dir.join("0000.pgm");
        let vis = d.join("vis.ppm");
        run(&["infer", "--left", s(&left), "--right", s(&right), "--weights", s(&full), "--out", s(&out), "--vis", s(&vis), "--mode", mode]);
        let map = decode_disp16(&std::fs::read(&out).unwrap()).unwrap();
        assert_eq!((map.width(), map.height()), (96, 96));
        assert!(std::fs::metadata(&vis).unwrap().len() > 96 * 96 * 3);
    }

    let gt_dir = d.join("gt");
    std::fs::create_dir(&gt_dir).unwrap();
    std::fs::copy(data.join("disp_left/0000.pgm"), gt_dir.join("0000.pgm")).unwrap();
    let csv = d.join("metrics.csv");
    let printed = run(&["eval", "--pred-dir", s(&pred_dir), "--gt-dir", s(&gt_dir), "--csv", s(&csv)]);
    assert!(printed.contains("all: avg"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("image,avg_err,out2,out3,out4,out5,d1,valid_px\n"));
    assert!(text.contains("\n0000,") && text.contains("\naggregate,"));

    let small = d.join("small.ppm");
    std::fs::write(&small, encode_ppm(&RawImage::filled(64, 96, [9, 9, 9]).unwrap())).unwrap();
    let bad = stereosig(&["infer", "--left", s(&left), "--right", s(&small), "--weights", s(&full), "--out", s(&d.join("x.pgm"))]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error:"));
    let missing = stereosig(&["infer", "--left", s(&left), "--right", s(&right), "--weights", s(&d.join("none.fdsc")), "--out", s(&d.join("x.pgm"))]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn costvol_writes_one_record_per_cost() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 1, "40x20", 2);
    let (l, r) = (data.join("left/0000.ppm"), data.join("right/0000.ppm"));
    for (flag, count) in [(None, 3), (Some("--census-only"), 1)] {
        let out = dir.path().join("vol.fvol");
        let mut args = vec!["costvol", "--left", s(&l), "--right", s(&r), "--out", s(&out), "--disparities", "6"];
        args.extend(flag);
        run(&args);
        let bytes = std::fs::read(&out).unwrap();
        assert_eq!(bytes.len(), count * (16 + 20 * 10 * 6 * 4));
        let mut rest = bytes.as_slice();
        let first = CostVolume::read_fvol(&mut rest).unwrap();
        assert_eq!((first.width, first.height, first.disparities), (20, 10, 6));
        assert!(first.costs.iter().all(|&c| (0.0..=24.0).contains(&c)));
    }
}

#[test]
fn gradcheck_passes() {
    let out = run(&["gradcheck", "--seeds", "1"]);
    assert!(out.lines().any(|l| l.starts_with("full_network") && l.ends_with("ok")), "{out}");
    assert!(!out.contains("FAIL"));
}

#[test]
fn bench_reports_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 1, "128x64", 3);
    let out = run(&[
        "bench",
        "--left",
        s(&data.join("left/0000.ppm")),
        "--right",
        s(&data.join("right/0000.ppm")),
        "--reps",
        "2",
        "--threads",
        "2",
    ]);
    for stage in ["cost_volumes", "signature", "spatial", "upsampling", "total"] {
        assert!(out.lines().any(|l| l.starts_with(stage)), "{out}");
    }
    assert!(out.contains("2 threads"));
}
