use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mrc::io::{read_mask, read_multires, read_tensor, write_tensor};
use mrc::{DenseTensor, DownsampleMask};
use tempfile::TempDir;

fn mrc(args: &[&str]) -> Output {
    mrc_env(args, &[])
}

fn mrc_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mrc"));
    cmd.args(args).env_remove("MRC_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Toy {
    dir: TempDir,
}

impl Toy {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let out = mrc(&["toy", "--out-dir", dir.path().to_str().unwrap(), "--seed", "5"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        Self { dir }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_string()
    }

    fn net_args(&self) -> Vec<String> {
        vec![
            "--spec".into(),
            self.path("toy.net"),
            "--weights".into(),
            self.path("toy.mrw"),
            "--input".into(),
            self.path("input.mrt"),
        ]
    }

    fn run(&self, head: &[&str], tail: &[&str]) -> Output {
        let net = self.net_args();
        let mut args: Vec<&str> = head.to_vec();
        args.extend(net.iter().map(String::as_str));
        args.extend_from_slice(tail);
        mrc(&args)
    }
}

fn total_for(text: &str, variant: &str) -> u64 {
    text.lines()
        .find(|l| l.starts_with(&format!("variant {variant} ")))
        .and_then(|l| l.split_whitespace().find_map(|t| t.strip_prefix("total_ma=")))
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("no total for {variant} in:\n{text}"))
}

#[test]
fn run_regular_happy_path() {
    let toy = Toy::new();
    let o = toy.path("o.mrt");
    let out = toy.run(&["run"], &["--variant", "regular", "--out", &o]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_tensor(&o).unwrap().dims(), (16, 16, 8));
    assert_eq!(total_for(&stdout(&out), "regular"), (1024 + 256) * 576);
}

#[test]
fn run_dilated_and_adaptive_outputs() {
    let toy = Toy::new();
    let dil = toy.path("d.mrt");
    assert_eq!(code(&toy.run(&["run"], &["--variant", "dilated", "--out", &dil])), 0);
    assert_eq!(read_tensor(&dil).unwrap().dims(), (32, 32, 8));
    let mrm = toy.path("a.mrm");
    let out = toy.run(&["run"], &["--variant", "adaptive", "--mask", &toy.path("half.msk"), "--out", &mrm]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mr = read_multires(&mrm).unwrap();
    assert_eq!(mr.active_count(), 640);
    let regular = toy.path("r.mrt");
    assert_eq!(code(&toy.run(&["run"], &["--variant", "regular", "--out", &regular])), 0);
    assert_eq!(mr.lattice_values(), read_tensor(&regular).unwrap());
}

#[test]
fn adaptive_without_mask_is_exit_3() {
    let toy = Toy::new();
    let out = toy.run(&["run"], &["--variant", "adaptive", "--out", &toy.path("x.mrm")]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn truncated_weights_is_exit_2_with_offset() {
    let toy = Toy::new();
    let bytes = std::fs::read(toy.path("toy.mrw")).unwrap();
    std::fs::write(toy.path("toy.mrw"), &bytes[..100]).unwrap();
    let out = toy.run(&["run"], &["--variant", "regular", "--out", &toy.path("o.mrt")]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("toy.mrw") && err.contains("byte 16"), "{err}");
}

#[test]
fn malformed_spec_is_exit_2() {
    let toy = Toy::new();
    std::fs::write(toy.path("toy.net"), "name: bad\nconv 3 8\n").unwrap();
    let out = toy.run(&["run"], &["--variant", "regular", "--out", &toy.path("o.mrt")]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("byte 10"), "{}", stderr(&out));
}

#[test]
fn verify_toy_passes() {
    let toy = Toy::new();
    let report = toy.path("report.json");
    let out = toy.run(&["verify"], &["--trials", "100", "--seed", "3", "--rf-masks", "2", "--report", &report]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    assert!(text.lines().all(|l| l.starts_with("CHECK ") && l.contains(" pass ")), "{text}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(json["all_passed"], true);
    assert_eq!(json["failed"], 0);
}

#[test]
fn verify_detects_perturbed_coarse_weights() {
    let toy = Toy::new();
    let out = toy.run(&["verify"], &["--trials", "3", "--rf-masks", "0", "--perturb-coarse"]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("CHECK guarantee2_random fail"), "{}", stdout(&out));
}

#[test]
fn verify_zero_trials_is_exit_3() {
    let toy = Toy::new();
    assert_eq!(code(&toy.run(&["verify"], &["--trials", "0"])), 3);
}

#[test]
fn cost_endpoints_and_half_mask() {
    let toy = Toy::new();
    let spec = toy.path("toy.net");
    let json = toy.path("cost.json");
    let ones = mrc(&["cost", "--spec", &spec, "--mask", &toy.path("ones.msk")]);
    assert_eq!(code(&ones), 0, "{}", stderr(&ones));
    let text = stdout(&ones);
    assert_eq!(total_for(&text, "adaptive"), total_for(&text, "regular"));
    let zeros = mrc(&["cost", "--spec", &spec, "--mask", &toy.path("zeros.msk")]);
    let text = stdout(&zeros);
    assert_eq!(total_for(&text, "adaptive"), total_for(&text, "dilated"));

    let half = mrc(&["cost", "--spec", &spec, "--weights", &toy.path("toy.mrw"), "--mask", &toy.path("half.msk"), "--out", &json]);
    assert_eq!(code(&half), 0);
    // 128 retained patches × 4 + 128 downsampled × 1 = 640 active elements after the stage.
    assert_eq!(total_for(&stdout(&half), "adaptive"), 1024 * 576 + 640 * 576);
    assert!(stdout(&half).contains("active_fraction=0.625000"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(v["adaptive"]["items"][2]["mult_adds"], 368640);
    assert_eq!(v["regular"]["total_mult_adds"], 1280 * 576);
}

fn write_pgm(path: &Path, w: usize, h: usize, f: impl Fn(usize, usize) -> u8) {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            bytes.push(f(y, x));
        }
    }
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn edge_mask_on_constant_and_step_images() {
    let dir = TempDir::new().unwrap();
    let flat = dir.path().join("flat.mrt");
    write_tensor(&flat, &DenseTensor::filled(16, 16, 1, 0.0)).unwrap();
    let out_path = dir.path().join("m.msk");
    let out = mrc(&[
        "mask", "edge", "--input", flat.to_str().unwrap(), "--threshold", "0.5", "--dilate", "3", "--d", "2",
        "--out", out_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_mask(&out_path).unwrap(), DownsampleMask::ones(8, 8));
    let pgm = std::fs::read(dir.path().join("m.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n") && pgm[pgm.len() - 64..].iter().all(|&b| b == 255));

    let step = dir.path().join("step.pgm");
    write_pgm(&step, 16, 16, |_, x| if x >= 8 { 255 } else { 0 });
    let out = mrc(&[
        "mask", "edge", "--input", step.to_str().unwrap(), "--threshold", "0.5", "--dilate", "1", "--d", "2",
        "--out", out_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = read_mask(&out_path).unwrap();
    assert!((0..8).all(|i| !m.get(i, 3) && !m.get(i, 4) && m.get(i, 1)));

    for (t, k) in [("1.5", "3"), ("0.5", "4")] {
        let out = mrc(&[
            "mask", "edge", "--input", flat.to_str().unwrap(), "--threshold", t, "--dilate", k, "--d", "2",
            "--out", out_path.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 3, "threshold {t} dilate {k}");
    }
}

#[test]
fn keypoint_masks() {
    let dir = TempDir::new().unwrap();
    let kps = dir.path().join("k.txt");
    std::fs::write(&kps, "8 8\n").unwrap();
    let out_path = dir.path().join("k.msk");
    let run = |dilate: &str| {
        mrc(&[
            "mask", "keypoints", "--kps", kps.to_str().unwrap(), "--height", "16", "--width", "16", "--dilate",
            dilate, "--d", "2", "--out", out_path.to_str().unwrap(),
        ])
    };
    assert_eq!(code(&run("0")), 0);
    assert_eq!(read_mask(&out_path).unwrap(), DownsampleMask::ones(8, 8));
    assert_eq!(code(&run("inf")), 0);
    assert_eq!(read_mask(&out_path).unwrap(), DownsampleMask::zeros(8, 8));
    assert_eq!(code(&run("3")), 0);
    let m = read_mask(&out_path).unwrap();
    let retained: Vec<_> = (0..8).flat_map(|i| (0..8).map(move |j| (i, j))).filter(|&(i, j)| !m.get(i, j)).collect();
    assert_eq!(retained, vec![(3, 3), (3, 4), (4, 3), (4, 4)]);
    assert_eq!(code(&run("2")), 3);
    std::fs::write(&kps, "8 8\n20 1\n").unwrap();
    assert_eq!(code(&run("3")), 3);
}

#[test]
fn oracle_mask_with_identical_maps_downsamples_everything() {
    let dir = TempDir::new().unwrap();
    let labels = dir.path().join("labels.pgm");
    write_pgm(&labels, 8, 8, |y, x| ((y / 4) * 2 + x / 4) as u8);
    let high = dir.path().join("high.pgm");
    write_pgm(&high, 8, 8, |_, _| 9);
    let out_path = dir.path().join("o.msk");
    let l = labels.to_str().unwrap();
    let out = mrc(&[
        "mask", "oracle", "--low", l, "--high", high.to_str().unwrap(), "--labels", l, "--dilate", "3", "--d", "2",
        "--out", out_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_mask(&out_path).unwrap(), DownsampleMask::ones(4, 4));
}

#[test]
fn outputs_are_byte_identical_across_runs_and_threads() {
    let toy = Toy::new();
    let outputs: Vec<(Vec<u8>, Vec<u8>)> = [("1", "a"), ("1", "b"), ("3", "c")]
        .iter()
        .map(|(threads, tag)| {
            let mrm = toy.path(&format!("{tag}.mrm"));
            let report = toy.path(&format!("{tag}.json"));
            let mut args = vec!["run".to_string()];
            args.extend(toy.net_args());
            args.extend(["--variant", "adaptive", "--mask", &toy.path("half.msk"), "--out", &mrm].map(String::from));
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            assert_eq!(code(&mrc_env(&args, &[("MRC_THREADS", threads)])), 0);
            let mut vargs = vec!["verify".to_string()];
            vargs.extend(toy.net_args());
            vargs.extend(["--trials", "5", "--seed", "9", "--rf-masks", "1", "--report", &report].map(String::from));
            let vargs: Vec<&str> = vargs.iter().map(String::as_str).collect();
            assert_eq!(code(&mrc_env(&vargs, &[("MRC_THREADS", threads)])), 0);
            (std::fs::read(mrm).unwrap(), std::fs::read(report).unwrap())
        })
        .collect();
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn bad_thread_count_is_exit_3() {
    let toy = Toy::new();
    let net = toy.net_args();
    let mut args = vec!["cost"];
    args.extend(net[..2].iter().map(String::as_str));
    assert_eq!(code(&mrc_env(&args, &[("MRC_THREADS", "zero")])), 3);
}

#[test]
fn toy_files_are_deterministic() {
    let a = Toy::new();
    let b = Toy::new();
    for f in ["toy.net", "toy.mrw", "input.mrt", "half.msk"] {
        let pa: PathBuf = a.path(f).into();
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(b.path(f)).unwrap(), "{f}");
    }
}
