use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mambamim::checkpoint::read_entries;
use mambamim::metrics::{read_metrics, HEADER};
use mambamim::volume;

const SMALL: &str = "volume_shape = 8
model_dim = 16
depth = 1
state_dim = 4
cnn_width = 4
decoder_width = 8
batch_size = 1
steps = 2
lr = 1e-3
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mambamim")).args(args).output().expect("spawn mambamim")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.txt");
    fs::write(&cfg, SMALL).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn zero_steps_write_checkpoint_and_empty_metrics() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&out), "--steps", "0"]);
    assert_eq!(fs::read_to_string(out.join("metrics.tsv")).unwrap(), format!("{HEADER}\n"));
    assert!(!read_entries(fs::File::open(out.join("checkpoint.mmim")).unwrap()).unwrap().is_empty());
    assert!(out.join("config.txt").exists());
}

#[test]
fn same_config_gives_identical_metrics() {
    let (dir, cfg) = setup();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for o in [&a, &b] {
        ok(&["pretrain", "--config", s(&cfg), "--out", s(o), "--precision", "64", "--steps", "3"]);
    }
    let ma = fs::read(a.join("metrics.tsv")).unwrap();
    assert_eq!(ma, fs::read(b.join("metrics.tsv")).unwrap());
    assert_eq!(read_metrics(&a.join("metrics.tsv")).unwrap().len(), 3);
    assert_eq!(fs::read(a.join("checkpoint.mmim")).unwrap(), fs::read(b.join("checkpoint.mmim")).unwrap());
}

#[test]
fn reconstruct_masks_exactly_the_hidden_voxels() {
    let (dir, cfg) = setup();
    let train = dir.path().join("train");
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&train), "--precision", "64"]);
    let ckpt = train.join("checkpoint.mmim");
    for ratio in ["0.25", "0.5", "0.75"] {
        let out = dir.path().join(format!("rec{ratio}"));
        ok(&["reconstruct", "--checkpoint", s(&ckpt), "--config", s(&cfg), "--out", s(&out), "--precision", "64", "--mask.ratio", ratio]);
        let (g, input) = volume::load(&out.join("input.mvol")).unwrap();
        let (gm, masked) = volume::load(&out.join("masked_input.mvol")).unwrap();
        let (gr, recon) = volume::load(&out.join("reconstruction.mvol")).unwrap();
        assert_eq!((g.x, g.y, g.z), (8, 8, 8));
        assert_eq!(g, gm);
        assert_eq!(g, gr);
        assert!(recon.iter().all(|v| v.is_finite()));
        let hidden = input.iter().zip(&masked).filter(|(i, m)| i != m).count();
        let zeroed = masked.iter().zip(&input).filter(|(m, i)| **m == 0.0 && **i != 0.0).count();
        assert_eq!(hidden, zeroed);
        // the finest mask hides whole coarse cells, so the count is a multiple of 4^3 voxels
        let expected = (ratio.parse::<f64>().unwrap() * 8.0).floor() as usize * 64;
        assert_eq!(hidden, expected, "ratio {ratio}");
    }
}

#[test]
fn checkpoint_reload_is_bit_exact() {
    let (dir, cfg) = setup();
    let train = dir.path().join("train");
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&train), "--precision", "64"]);
    let ckpt = train.join("checkpoint.mmim");
    let r1 = dir.path().join("r1");
    let r2 = dir.path().join("r2");
    for o in [&r1, &r2] {
        ok(&["reconstruct", "--checkpoint", s(&ckpt), "--config", s(&cfg), "--out", s(o), "--precision", "64"]);
    }
    assert_eq!(fs::read(r1.join("reconstruction.mvol")).unwrap(), fs::read(r2.join("reconstruction.mvol")).unwrap());
}

#[test]
fn gradcheck_reports_every_group_and_catches_corruption() {
    let (dir, cfg) = setup();
    let out = dir.path().join("gc");
    let o = ok(&["gradcheck", "--config", s(&cfg), "--out", s(&out)]);
    let report = String::from_utf8(o.stdout).unwrap();
    let groups: Vec<&str> = report.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert!(report.lines().skip(1).all(|l| l.ends_with("\tok")));
    let train = dir.path().join("train");
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&train), "--steps", "0", "--precision", "64"]);
    let names: Vec<String> = read_entries(fs::File::open(train.join("checkpoint.mmim")).unwrap())
        .unwrap()
        .into_iter()
        .map(|e| e.name)
        .collect();
    assert_eq!(groups, names);

    let bad = run(&["gradcheck", "--config", s(&cfg), "--corrupt-grad", "decoder.head.weight"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("decoder.head.weight"));
}

#[test]
fn ablations_share_every_other_setting() {
    let (dir, cfg) = setup();
    let out = dir.path().join("abl");
    for (axis, rows) in [("mask_ratio", 5), ("scan_order", 4), ("fill", 2)] {
        ok(&["ablate", "--axis", axis, "--config", s(&cfg), "--out", s(&out), "--steps", "1"]);
        let text = fs::read_to_string(out.join(format!("ablate_{axis}.tsv"))).unwrap();
        assert_eq!(text.lines().count(), rows + 1, "{axis}");
        let strip = |p: PathBuf| -> Vec<String> {
            fs::read_to_string(p)
                .unwrap()
                .lines()
                .filter(|l| !l.starts_with(key_of(axis)) && !l.starts_with("out_dir"))
                .map(String::from)
                .collect()
        };
        let dirs: Vec<PathBuf> = fs::read_dir(out.join(axis)).unwrap().map(|e| e.unwrap().path()).collect();
        assert_eq!(dirs.len(), rows);
        let first = strip(dirs[0].join("config.txt"));
        assert!(first.iter().any(|l| l.starts_with("mask.seed")));
        for d in &dirs[1..] {
            assert_eq!(strip(d.join("config.txt")), first, "{}", d.display());
        }
    }
}

fn key_of(axis: &str) -> &'static str {
    match axis {
        "mask_ratio" => "mask.ratio",
        "scan_order" => "scan.order",
        _ => "decoder.mask_fill",
    }
}

#[test]
fn bad_configuration_exits_2() {
    let (dir, cfg) = setup();
    let o = run(&["pretrain", "--config", s(&cfg), "--out", s(&dir.path().join("x")), "--bogus_key", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus_key"));
    let o = run(&["pretrain", "--config", s(&cfg), "--volume_shape", "12"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["pretrain", "--config", s(&dir.path().join("missing.txt"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["gradcheck", "--config", s(&cfg), "--precision", "32"]);
    assert_eq!(o.status.code(), Some(2));
}
