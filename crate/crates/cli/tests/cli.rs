use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

/// A small network so every command finishes in well under a second.
const TINY: [&str; 12] = [
    "--widths", "8,12", "--k", "6", "--atoms", "4", "--atom-dim", "6", "--head-width", "8", "--epochs", "2",
];

fn stpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stpc")).args(args).output().unwrap()
}

/// Runs with the tiny network; flags given in `args` take precedence.
fn stpc_tiny(args: &[&str]) -> Output {
    let mut all = args.to_vec();
    for pair in TINY.chunks(2) {
        if !args.contains(&pair[0]) {
            all.extend_from_slice(pair);
        }
    }
    stpc(&all)
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates a small labelled dataset and returns its directory.
fn dataset(tmp: &TempDir, name: &str, clouds: &str, points: &str, seed: &str) -> PathBuf {
    let dir = tmp.path().join(name);
    ok(&stpc(&["gen", "--out-dir", s(&dir), "--clouds", clouds, "--points", points, "--seed", seed]));
    dir
}

fn csv_rows(path: &Path) -> (String, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    (header, lines.map(|l| l.split(',').map(str::to_string).collect()).collect())
}

#[test]
fn gen_is_byte_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = dataset(&tmp, "a", "3", "60", "5");
    let b = dataset(&tmp, "b", "3", "60", "5");
    let c = dataset(&tmp, "c", "3", "60", "6");
    for name in ["manifest.txt", "cloud_0000.xyz", "cloud_0001.xyz", "cloud_0002.xyz"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert_ne!(fs::read(a.join("cloud_0000.xyz")).unwrap(), fs::read(c.join("cloud_0000.xyz")).unwrap());
    let config = fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(config.contains("seed = 5"));
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let r = stpc(&["gen", "--kind", "spirals", "--out-dir", s(&out)]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("kind"), "{}", stderr(&r));

    let r = stpc(&["gen", "--classes", "20", "--out-dir", s(&out)]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("classes"));

    let r = stpc(&["train", "--lr-decay", "0", "--data-dir", s(&out)]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("lr_decay"));

    assert_eq!(code(&stpc(&["train", "--no-such-flag", "1"])), 2);
    assert_eq!(code(&stpc(&["train", "--epochs", "many"])), 2);
}

#[test]
fn config_file_is_applied_before_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.txt");
    let out = tmp.path().join("o");
    fs::write(&cfg, format!("# run\nclouds = 2\npoints = 40\nseed = 9\nout_dir = {}\n", s(&out))).unwrap();
    ok(&stpc(&["gen", "--config", s(&cfg), "--points", "30"]));
    let text = fs::read_to_string(out.join("cloud_0001.xyz")).unwrap();
    assert_eq!(text.lines().count(), 31);
    let resolved = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(resolved.contains("points = 30") && resolved.contains("seed = 9"));

    fs::write(&cfg, "colour = red\n").unwrap();
    let r = stpc(&["gen", "--config", s(&cfg)]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("colour"));
}

#[test]
fn missing_and_empty_datasets_are_configuration_errors() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nowhere");
    let r = stpc_tiny(&["train", "--data-dir", s(&missing), "--out-dir", s(&tmp.path().join("o"))]);
    assert_eq!(code(&r), 2);

    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    fs::write(empty.join("manifest.txt"), "").unwrap();
    let r = stpc_tiny(&["train", "--data-dir", s(&empty), "--out-dir", s(&tmp.path().join("o"))]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("empty"));

    let data = dataset(&tmp, "d", "2", "40", "1");
    let r = stpc_tiny(&["train", "--data-dir", s(&data), "--classes", "2", "--out-dir", s(&tmp.path().join("o"))]);
    assert_eq!(code(&r), 2, "labels beyond the class count");
}

#[test]
fn train_logs_each_epoch_and_eval_scores_the_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp, "d", "3", "80", "2");
    let run = tmp.path().join("run");
    let r = stpc_tiny(&["train", "--data-dir", s(&data), "--out-dir", s(&run), "--epochs", "3"]);
    ok(&r);
    let log = fs::read_to_string(run.join("train_log.txt")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3);
    for (e, line) in lines.iter().enumerate() {
        assert!(line.starts_with(&format!("epoch={e} lr=")), "{line}");
        assert!(line.contains(" miou="));
    }

    let ev = tmp.path().join("eval");
    ok(&stpc(&["eval", "--checkpoint", s(&run.join("model.stpc")), "--data-dir", s(&data), "--out-dir", s(&ev)]));
    let (header, rows) = csv_rows(&ev.join("metrics.csv"));
    assert_eq!(header, "oa,macc,miou,iou_0,iou_1,iou_2");
    assert_eq!(rows.len(), 1);
    let oa: f64 = rows[0][0].parse().unwrap();
    assert!((0.0..=1.0).contains(&oa));
    let pred = fs::read_to_string(ev.join("pred_0002.txt")).unwrap();
    assert_eq!(pred.lines().count(), 80);

    let r = stpc(&["eval", "--checkpoint", s(&run.join("model.stpc")), "--data-dir", s(&data), "--classes", "4"]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("classes"));
    let r = stpc(&["eval", "--checkpoint", s(&tmp.path().join("none.stpc")), "--data-dir", s(&data)]);
    assert_eq!(code(&r), 2);
}

#[test]
fn resumed_training_equals_an_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp, "d", "3", "64", "4");
    let full = tmp.path().join("full");
    ok(&stpc_tiny(&["train", "--data-dir", s(&data), "--out-dir", s(&full), "--epochs", "3"]));

    let part = tmp.path().join("part");
    ok(&stpc_tiny(&["train", "--data-dir", s(&data), "--out-dir", s(&part), "--epochs", "1"]));
    let ckpt = part.join("model.stpc");
    ok(&stpc_tiny(&[
        "train", "--data-dir", s(&data), "--out-dir", s(&part), "--epochs", "3", "--resume", s(&ckpt),
    ]));
    assert_eq!(fs::read(full.join("model.stpc")).unwrap(), fs::read(&ckpt).unwrap());
    assert_eq!(
        fs::read_to_string(full.join("train_log.txt")).unwrap(),
        fs::read_to_string(part.join("train_log.txt")).unwrap()
    );

    let r = stpc_tiny(&[
        "train", "--data-dir", s(&data), "--out-dir", s(&part), "--epochs", "4", "--atoms", "5", "--resume", s(&ckpt),
    ]);
    assert_eq!(code(&r), 2);
}

#[test]
fn ablate_writes_one_row_per_variant_and_seed() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp, "d", "3", "64", "3");
    let one = tmp.path().join("one");
    ok(&stpc_tiny(&["ablate", "--data-dir", s(&data), "--out-dir", s(&one), "--epochs", "1", "--atoms", "1"]));
    let (header, rows) = csv_rows(&one.join("ablation.csv"));
    assert_eq!(header, "variant,seed,miou,oa,macc");
    let variants: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(variants, ["none", "max", "mean", "sum", "anisotropic"]);
    let miou = |v: &str| -> f64 { rows.iter().find(|r| r[0] == v).unwrap()[2].parse().unwrap() };
    assert!((miou("anisotropic") - miou("sum")).abs() < 1e-9);

    let five = tmp.path().join("five");
    ok(&stpc_tiny(&["ablate", "--data-dir", s(&data), "--out-dir", s(&five), "--epochs", "1", "--seeds", "5"]));
    let (_, rows) = csv_rows(&five.join("ablation.csv"));
    assert_eq!(rows.len(), 25);
    let seeds: std::collections::BTreeSet<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(seeds.len(), 5);

    assert_eq!(code(&stpc_tiny(&["ablate", "--data-dir", s(&data), "--seeds", "0"])), 2);
}

#[test]
fn sweep_writes_one_row_per_dictionary_size() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp, "d", "2", "64", "3");
    let out = tmp.path().join("sweep");
    ok(&stpc_tiny(&["sweep-atoms", "--data-dir", s(&data), "--out-dir", s(&out), "--epochs", "1"]));
    let (header, rows) = csv_rows(&out.join("sweep.csv"));
    assert_eq!(header, "atoms,seed,miou,oa,macc");
    let atoms: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(atoms, ["1", "4", "9", "16", "25", "36"]);

    ok(&stpc_tiny(&["sweep-atoms", "--data-dir", s(&data), "--out-dir", s(&out), "--epochs", "1", "--atom-grid", "7"]));
    let (_, rows) = csv_rows(&out.join("sweep.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "7");

    for bad in ["0", "4,-1", "4,x"] {
        let r = stpc_tiny(&["sweep-atoms", "--data-dir", s(&data), "--out-dir", s(&out), "--atom-grid", bad]);
        assert_eq!(code(&r), 2, "atom_grid {bad}");
    }
}

#[test]
fn inspect_coeffs_dumps_one_neighborhood() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp, "d", "2", "50", "3");
    let run = tmp.path().join("run");
    ok(&stpc_tiny(&["train", "--data-dir", s(&data), "--out-dir", s(&run), "--epochs", "1"]));
    let ckpt = run.join("model.stpc");
    let cloud = data.join("cloud_0000.xyz");
    let args = |mode: &'static str, point: &'static str, out: &Path| -> Vec<String> {
        ["inspect-coeffs", "--checkpoint", s(&ckpt), "--cloud", s(&cloud), "--out-dir", s(out)]
            .iter()
            .map(|a| a.to_string())
            .chain(["--coeff-mode".into(), mode.into(), "--point-index".into(), point.into()])
            .collect()
    };
    let run_args = |a: Vec<String>| stpc(&a.iter().map(String::as_str).collect::<Vec<_>>());

    for (mode, exact) in [("post", false), ("pre", true)] {
        let out = tmp.path().join(mode);
        ok(&run_args(args(mode, "7", &out)));
        let (header, rows) = csv_rows(&out.join("coeffs.csv"));
        assert_eq!(header, "k,neighbor_index,m1,m2,m3,m4");
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0][1], "7", "first neighbor is the point itself");
        for row in &rows {
            let sum: f64 = row[2..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
            if exact {
                assert!((sum - 1.0).abs() < 1e-9);
            } else {
                assert!(sum <= 1.0 + 1e-12);
                for v in &row[2..] {
                    let v: f64 = v.parse().unwrap();
                    assert!(v == 0.0 || v >= 0.01);
                }
            }
        }
    }
    let out = tmp.path().join("bad");
    assert_eq!(code(&run_args(args("post", "50", &out))), 2);
    assert_eq!(code(&run_args(args("sideways", "0", &out))), 2);
}

#[test]
fn gradcheck_passes_and_catches_a_broken_backward_rule() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("gc");
    let base = ["gradcheck", "--out-dir", s(&out), "--gc-points", "32", "--gc-samples", "6", "--k", "8"];
    let r = stpc_tiny(&base);
    ok(&r);
    let report = fs::read_to_string(out.join("gradcheck.txt")).unwrap();
    assert!(report.lines().filter(|l| l.starts_with("PASS ")).count() > 10);
    let last = report.lines().last().unwrap();
    assert!(last.starts_with("0 of ") && last.ends_with(" blocks failed"), "{report}");

    let mut broken = base.to_vec();
    broken.extend(["--corrupt-backward", "true"]);
    let r = stpc_tiny(&broken);
    assert_eq!(code(&r), 1);
    let report = fs::read_to_string(out.join("gradcheck.txt")).unwrap();
    assert!(report.contains("FAIL "));
}
