use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const TINY: &str = r#"
seed = 1

[prior]
map_size = 16
enc_widths = [3, 4, 4]
dec_widths = [4, 4, 3]
n_id = 4
n_expr = 3
codebook_size = 8
feature_dim = 4
regressor_width = 3
face_grid = [2, 1]
hair_grid = [2, 1]
grid_inset = 3.0

[train]
iterations = 4
batch_size = 2
views_per_sample = 2
milestones = [2]
checkpoint_every = 2
exclude_cameras = [3]

[inversion]
max_steps = 4
warmup = 0
check_every = 2

[dataset]
identities = 2
expressions = 3
cameras = 4
image_size = 32
map_size = 16

[dataset.model]
lat_rows = 10
lon_cols = 16
face_rows = 6
id_dim = 4
expr_dim = 3
"#;

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("sprt-cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn sprt(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sprt"))
        .arg("--threads")
        .arg("1")
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Dataset, trained prior and one inversion shared by the tests.
struct Fixture {
    config: PathBuf,
    data: PathBuf,
    train: PathBuf,
    invert: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = scratch("fixture");
        let config = write_config(&dir, "");
        let data = dir.join("data");
        let train = dir.join("train");
        let invert = dir.join("invert");
        ok(sprt(&config, &["gen-data", "--out", s(&data)]));
        ok(sprt(&config, &["train-prior", "--data", s(&data), "--out", s(&train)]));
        let manifest = data.join("manifests/id_000.json");
        ok(sprt(
            &config,
            &["invert", "--checkpoint", s(&train.join("prior.bin")), "--inputs", s(&manifest), "--out", s(&invert)],
        ));
        Fixture {
            config,
            data,
            train,
            invert,
        }
    })
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_writes_index_and_is_reproducible() {
    let f = fixture();
    assert!(f.data.join("index.json").is_file());
    assert!(f.data.join("cameras.json").is_file());
    assert!(f.data.join("manifests/id_001.json").is_file());
    let again = scratch("gen-again");
    ok(sprt(&f.config, &["gen-data", "--out", s(&again)]));
    assert_eq!(tree(&f.data), tree(&again));
}

#[test]
fn gen_data_reports_unwritable_output() {
    let dir = scratch("unwritable");
    let config = write_config(&dir, "");
    let blocker = dir.join("file");
    fs::write(&blocker, b"x").unwrap();
    let out = sprt(&config, &["gen-data", "--out", s(&blocker.join("data"))]);
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn training_checkpoints_at_cadence() {
    let f = fixture();
    for step in [2, 4] {
        assert!(f.train.join(format!("checkpoints/step_{step:06}.bin")).is_file());
    }
    let log = fs::read_to_string(f.train.join("log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("step,lr,total"));
}

#[test]
fn resumed_training_continues_the_schedule() {
    let f = fixture();
    let dir = scratch("resume");
    let short = dir.join("short");
    fs::create_dir_all(&short).unwrap();
    let half = short.join("config.toml");
    fs::write(&half, TINY.replace("iterations = 4", "iterations = 2")).unwrap();
    let out = dir.join("train");
    ok(sprt(&half, &["train-prior", "--data", s(&f.data), "--out", s(&out)]));
    ok(sprt(&f.config, &["train-prior", "--data", s(&f.data), "--out", s(&out), "--resume"]));
    let resumed = fs::read_to_string(out.join("log.csv")).unwrap();
    let straight = fs::read_to_string(f.train.join("log.csv")).unwrap();
    assert_eq!(resumed, straight);
    let lrs: Vec<f64> = resumed.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3 * 0.66, 1e-3 * 0.66]);
    assert_eq!(fs::read(out.join("prior.bin")).unwrap(), fs::read(f.train.join("prior.bin")).unwrap());

    let other = dir.join("other.toml");
    fs::write(&other, TINY.replace("milestones = [2]", "milestones = [3]")).unwrap();
    let r = sprt(&other, &["train-prior", "--data", s(&f.data), "--out", s(&out), "--resume"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn training_rejects_resolution_mismatch() {
    let f = fixture();
    let dir = scratch("mismatch");
    let config = dir.join("config.toml");
    fs::write(&config, TINY.replacen("map_size = 16", "map_size = 32", 1)).unwrap();
    let out = sprt(&config, &["train-prior", "--data", s(&f.data), "--out", s(&dir.join("t"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn inversion_defaults_to_three_views_and_writes_curves() {
    let f = fixture();
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.invert.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["views"], 3);
    assert!(f.invert.join("personalized.bin").is_file());
    for k in 0..3 {
        assert!(f.invert.join(format!("preview/stage2_{k:02}.png")).is_file());
    }
    assert!(!f.invert.join("preview/stage2_03.png").exists());
    let curves = fs::read_to_string(f.invert.join("curves.csv")).unwrap();
    let mut lines = curves.lines();
    assert_eq!(lines.next(), Some("stage,step,loss,ema"));
    let stages: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert!(stages.contains(&"1") && stages.contains(&"2"));
}

#[test]
fn inversion_rejects_too_many_views() {
    let f = fixture();
    let dir = scratch("views");
    let manifest = f.data.join("manifests/id_000.json");
    let out = sprt(
        &f.config,
        &[
            "invert",
            "--checkpoint",
            s(&f.train.join("prior.bin")),
            "--inputs",
            s(&manifest),
            "--views",
            "13",
            "--out",
            s(&dir),
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--views"));
}

#[test]
fn reenactment_renders_one_frame_per_driving_entry() {
    let f = fixture();
    let dir = scratch("reenact");
    let driving = f.data.join("driving/id_001.json");
    let n = serde_json::from_str::<Vec<serde_json::Value>>(&fs::read_to_string(&driving).unwrap()).unwrap().len();
    let mut trees = Vec::new();
    for (run, cams) in [("a", "orbit.json"), ("b", "orbit.json"), ("c", "cameras.json")] {
        let out = dir.join(run);
        ok(sprt(
            &f.config,
            &[
                "reenact",
                "--personalized",
                s(&f.invert.join("personalized.bin")),
                "--driving",
                s(&driving),
                "--camera-path",
                s(&f.data.join(cams)),
                "--out",
                s(&out),
            ],
        ));
        trees.push(tree(&out));
    }
    assert_eq!(trees[0].len(), n);
    assert_eq!(trees[0], trees[1]);
    assert_eq!(trees[2].len(), n);
}

#[test]
fn eval_writes_fixed_schema_and_summary() {
    let f = fixture();
    let dir = scratch("eval");
    let csv = dir.join("metrics.csv");
    let out = ok(sprt(
        &f.config,
        &["eval", "--personalized", s(&f.invert.join("personalized.bin")), "--data", s(&f.data), "--out", s(&csv)],
    ));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "frame,L1,PSNR,SSIM,perceptual");
    // Last of 3 expressions, 4 cameras.
    assert_eq!(lines.len() - 1, 4);
    assert!(dir.join("metrics_summary.csv").is_file());
    assert!(String::from_utf8_lossy(&out.stdout).contains('±'));

    let all = dir.join("all.csv");
    ok(sprt(
        &f.config,
        &["eval", "--personalized", s(&f.invert.join("personalized.bin")), "--data", s(&f.data), "--split", "all", "--out", s(&all)],
    ));
    assert_eq!(fs::read_to_string(&all).unwrap().lines().count() - 1, 12);
}

#[test]
fn eval_rejects_empty_split() {
    let f = fixture();
    let dir = scratch("eval-empty");
    let config = write_config(&dir, "\n[eval]\nholdout_fraction = 0.0\n");
    let out = sprt(
        &config,
        &[
            "eval",
            "--personalized",
            s(&f.invert.join("personalized.bin")),
            "--data",
            s(&f.data),
            "--out",
            s(&dir.join("m.csv")),
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn bad_config_and_usage_exit_with_two() {
    let dir = scratch("bad-config");
    let config = write_config(&dir, "\n[eval]\nlearning_rate = 1.0\n");
    assert_eq!(sprt(&config, &["show-config"]).status.code(), Some(2));
    let good = write_config(&scratch("good-config"), "");
    assert_eq!(sprt(&good, &["no-such-command"]).status.code(), Some(2));
    let shown = ok(sprt(&good, &["show-config"]));
    assert!(String::from_utf8_lossy(&shown.stdout).contains("[inversion]"));
}
