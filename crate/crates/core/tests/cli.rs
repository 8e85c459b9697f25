use std::path::Path;
use std::process::{Command, Output};

fn sunetkit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sunetkit"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SUNETKIT_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn param_count_pb() {
    let dir = tempfile::tempdir().unwrap();
    let o = sunetkit(&["param-count", "--component", "pb", "--stages", "res3,res4"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().any(|l| l == "8202 (+0.008M)"), "{}", stdout(&o));

    let o = sunetkit(&["param-count", "--stages", "res3,res4,res5"], dir.path());
    assert!(stdout(&o).contains("14349 (+0.014M)"));
    let o = sunetkit(&["param-count", "--stages", "res3"], dir.path());
    assert!(stdout(&o).contains("2052 (+0.002M)"));
}

#[test]
fn param_count_cn() {
    let dir = tempfile::tempdir().unwrap();
    let o = sunetkit(&["param-count", "--component", "cn"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("attention increment 8464 (+0.008M)"), "{}", stdout(&o));
}

#[test]
fn derive_and_grad_checks() {
    let dir = tempfile::tempdir().unwrap();
    let o = sunetkit(&["derive-check", "--seed", "7"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let diffs: Vec<f64> = stdout(&o)
        .lines()
        .filter(|l| l.contains(" vs "))
        .filter_map(|l| l.split_whitespace().last()?.parse().ok())
        .collect();
    assert_eq!(diffs.len(), 4, "{}", stdout(&o));
    assert!(diffs.iter().all(|&d| d < 1e-10));

    let o = sunetkit(&["grad-check", "--seed", "1"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("max relative error"));
}

#[test]
fn synth_eval_forward_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = sunetkit(&["synth", "--seed", "4", "--out", "scene", "--height", "64", "--width", "64"], d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let o = sunetkit(&["eval", "scene/gt.pano", "scene/gt.pano"], d);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().next().unwrap().contains("PQ 1.000"));

    let forward = |out: &str| {
        sunetkit(
            &[
                "forward",
                "--seed",
                "4",
                "--image",
                "scene/image.sunt",
                "--instances",
                "scene/instances.json",
                "--gt",
                "scene/gt.pano",
                "--oracle",
                "--out",
                out,
            ],
            d,
        )
    };
    let o = forward("run1");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("PQ 1.000  SQ 1.000  RQ 1.000  mIoU 1.000"));
    assert_eq!(forward("run2").status.code(), Some(0));
    for f in ["pred.pano", "pred.pano.json", "report.json"] {
        let a = std::fs::read(d.join("run1").join(f)).unwrap();
        let b = std::fs::read(d.join("run2").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    let o = sunetkit(&["eval", "run1/pred.pano", "scene/gt.pano", "--out", "ev"], d);
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("ev/eval.json")).unwrap()).unwrap();
    assert_eq!(report["all"]["pq"], 1.0);

    // directory mode pairs files by name
    std::fs::create_dir(d.join("preds")).unwrap();
    std::fs::copy(d.join("run1/pred.pano"), d.join("preds/a.pano")).unwrap();
    std::fs::copy(d.join("run1/pred.pano.json"), d.join("preds/a.pano.json")).unwrap();
    std::fs::create_dir(d.join("gts")).unwrap();
    std::fs::copy(d.join("scene/gt.pano"), d.join("gts/a.pano")).unwrap();
    std::fs::copy(d.join("scene/gt.pano.json"), d.join("gts/a.pano.json")).unwrap();
    let o = sunetkit(&["eval", "preds", "gts"], d);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("\"images\": 1"));
}

#[test]
fn fuse_reads_logits_and_instances() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(sunetkit(&["synth", "--seed", "2", "--out", "s", "--height", "64", "--width", "64"], d).status.code(), Some(0));
    // semantic logits that favour class 0 everywhere
    let mut logits = sunetkit::Tensor::<f32>::zeros([1, 19, 64, 64]);
    logits.plane_mut(0, 0).iter_mut().for_each(|v| *v = 5.0);
    sunetkit::io::write_tensor(&d.join("sem.sunt"), &logits).unwrap();
    let o = sunetkit(&["fuse", "--semantic", "sem.sunt", "--instances", "s/instances.json", "--out", "f"], d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let map = sunetkit::io::read_map(&d.join("f/fused.pano")).unwrap();
    assert_eq!(map.label(0, 0).0, 0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = sunetkit(&["frobnicate"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(sunetkit(&["param-count", "--bogus"], d).status.code(), Some(1));
    assert_eq!(sunetkit(&["param-count", "--stages", "res2"], d).status.code(), Some(1));
    assert_eq!(sunetkit(&["eval", "missing.pano", "missing.pano"], d).status.code(), Some(2));
    assert_eq!(sunetkit(&["--help"], d).status.code(), Some(0));

    std::fs::write(d.join("bad.json"), r#"{"pyramid_width": 64, "colour": 1}"#).unwrap();
    let o = sunetkit(&["forward", "--config", "bad.json"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));

    std::fs::write(d.join("neg.json"), r#"{"loss_weights": {"lambda_s": -1, "lambda_i": 1, "lambda_p": 0.5}}"#).unwrap();
    let o = sunetkit(&["forward", "--config", "neg.json"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("loss_weights.lambda_s"));

    std::fs::write(d.join("junk.sunt"), b"JUNKJUNKJUNK").unwrap();
    let o = sunetkit(&["forward", "--image", "junk.sunt"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("\"SUNT\""));

    let o = Command::new(env!("CARGO_BIN_EXE_sunetkit"))
        .args(["param-count"])
        .env("SUNETKIT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
