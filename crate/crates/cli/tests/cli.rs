use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn p2b(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_p2b"))
        .args(args)
        .output()
        .expect("spawn p2b")
}

fn ok(args: &[&str]) -> String {
    let out = p2b(args);
    assert!(
        out.status.success(),
        "p2b {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let fx = Fixture { _dir: dir, root };
        ok(&[
            "synth",
            "--out",
            s(&fx.path("gt.json")),
            "--seed",
            "3",
            "--num-images",
            "6",
        ]);
        fx
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn synth_writes_annotations_grid_and_config() {
    let fx = Fixture::new();
    assert!(fx.path("gt.json").exists());
    assert!(fx.path("gt.json.grid").exists());
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.path("gt.json.config.json")).unwrap())
            .unwrap();
    assert_eq!(cfg["scene"]["num_images"], 6);
    assert_eq!(cfg["scene"]["seed"], 3);
}

#[test]
fn gen_points_is_deterministic() {
    let fx = Fixture::new();
    let gt = fx.path("gt.json");
    let (a, b, c) = (fx.path("a.json"), fx.path("b.json"), fx.path("c.json"));
    ok(&["gen-points", "--ann", s(&gt), "--out", s(&a), "--seed", "7"]);
    ok(&["gen-points", "--ann", s(&gt), "--out", s(&b), "--seed", "7"]);
    ok(&["gen-points", "--ann", s(&gt), "--out", s(&c), "--seed", "8"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let fx = Fixture::new();
    let gt = fx.path("gt.json");
    let hist = fx.path("hist.csv");
    let stdout = ok(&[
        "eval",
        "--pred",
        s(&gt),
        "--gt",
        s(&gt),
        "--dump-hist",
        s(&hist),
    ]);
    assert!(stdout.contains("mIoU_pred 1.0000"), "{stdout}");
    assert!(stdout.contains("recall@0.9  1.0000"), "{stdout}");
    let csv = std::fs::read_to_string(hist).unwrap();
    assert_eq!(csv.lines().count(), 51);
}

#[test]
fn train_cbp_only_then_predict_and_stats() {
    let fx = Fixture::new();
    let pts = fx.path("pts.json");
    ok(&[
        "gen-points",
        "--ann",
        s(&fx.path("gt.json")),
        "--out",
        s(&pts),
        "--seed",
        "7",
    ]);
    let (ckpt, pseudo) = (fx.path("model.ckpt"), fx.path("pseudo.json"));
    let grid = fx.path("gt.json.grid");
    let stdout = ok(&[
        "train",
        "--ann",
        s(&pts),
        "--scenes",
        s(&grid),
        "--stages",
        "0",
        "--epochs",
        "2",
        "--hidden",
        "8",
        "--seed",
        "1",
        "--out-checkpoint",
        s(&ckpt),
        "--out-pseudo",
        s(&pseudo),
    ]);
    assert!(stdout.contains("cbp: mIoU_pred"), "{stdout}");
    assert!(!stdout.contains("pbr1"), "{stdout}");
    let metrics = std::fs::read_to_string(fx.path("pseudo.json.metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("epoch,lr,L_cbp,L_total,mIoU_cbp"));
    assert_eq!(lines.count(), 2);

    let again = fx.path("again.json");
    ok(&[
        "predict",
        "--ann",
        s(&pts),
        "--scenes",
        s(&grid),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&again),
    ]);
    assert_eq!(
        std::fs::read(&pseudo).unwrap(),
        std::fs::read(&again).unwrap()
    );

    let stats = fx.path("stats.csv");
    ok(&[
        "stats",
        "--ann",
        s(&pts),
        "--pred",
        s(&pseudo),
        "--out",
        s(&stats),
    ]);
    let csv = std::fs::read_to_string(stats).unwrap();
    assert!(csv.starts_with("image_id,object_id,stage,proposal_index,iou\n"));
    assert!(csv.lines().any(|l| l.contains(",cbp,")) && csv.lines().any(|l| l.contains(",pbr1,")));
}

#[test]
fn errors_name_the_offending_flag() {
    let fx = Fixture::new();
    let out = p2b(&[
        "eval",
        "--pred",
        s(&fx.path("missing.json")),
        "--gt",
        s(&fx.path("gt.json")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--pred"));

    let out = p2b(&[
        "train",
        "--ann",
        s(&fx.path("gt.json")),
        "--scenes",
        s(&fx.path("gt.json.grid")),
        "--seed",
        "1",
        "--out-checkpoint",
        s(&fx.path("m.ckpt")),
        "--out-pseudo",
        s(&fx.path("p.json")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no point annotation"));

    let out = p2b(&[
        "gen-points",
        "--ann",
        s(&fx.path("gt.json")),
        "--out",
        s(&fx.path("x.json")),
    ]);
    assert!(!out.status.success(), "seed is mandatory");
}

#[test]
fn config_file_is_overridden_by_flags() {
    let fx = Fixture::new();
    let cfg = fx.path("run.json");
    std::fs::write(
        &cfg,
        r#"{"scene": {"num_images": 2, "noise_std": 0.0, "seed": 99}}"#,
    )
    .unwrap();
    let out = fx.path("small.json");
    ok(&[
        "synth",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--seed",
        "4",
    ]);
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.path("small.json.config.json")).unwrap())
            .unwrap();
    assert_eq!(echoed["scene"]["num_images"], 2);
    assert_eq!(echoed["scene"]["noise_std"], 0.0);
    assert_eq!(echoed["scene"]["seed"], 4);
}
