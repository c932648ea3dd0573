use std::path::Path;
use std::process::{Command, Output};

fn dsinpaint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsinpaint"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let o = dsinpaint(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn texture_without_codec_names_vqvae() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("tx");
    let o = dsinpaint(&["train", "texture", "--preset", "smoke", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("vqvae"), "{}", stderr(&o));
    assert!(!out.join("checkpoint.archive").exists());
}

#[test]
fn unknown_override_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dsinpaint(&["train", "vqvae", "--preset", "smoke", "--set", "train.vqvae.bogus=3", "--out", p(&tmp.path().join("vq"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
    let o = dsinpaint(&["train", "nonsense"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    assert_eq!(dsinpaint(&["--help"]).status.code(), Some(0));
}

#[test]
fn synth_writes_pngs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("shapes");
    ok(&["synth", "--count", "3", "--size", "16", "--out", p(&out)]);
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 3);
}

fn smoke_models(root: &Path) {
    let (vq, st, tx) = (root.join("vq"), root.join("st"), root.join("tx"));
    ok(&["train", "vqvae", "--preset", "smoke", "--out", p(&vq)]);
    ok(&["train", "structure", "--preset", "smoke", "--codec", p(&vq), "--stop-at", "2", "--out", p(&st)]);
    ok(&["train", "structure", "--codec", p(&vq), "--resume", p(&st)]);
    ok(&["train", "texture", "--preset", "smoke", "--codec", p(&vq), "--out", p(&tx)]);
}

#[test]
fn smoke_train_sample_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    smoke_models(root);
    let models = |rest: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = ["--preset", "smoke", "--codec", p(&root.join("vq")), "--structure", p(&root.join("st")), "--texture", p(&root.join("tx"))]
            .iter()
            .map(|s| s.to_string())
            .collect();
        v.extend(rest.iter().map(|s| s.to_string()));
        v
    };
    for run in ["s1", "s2"] {
        let mut args = vec!["sample".to_string()];
        args.extend(models(&["--k", "4", "--entropy-map", "--out", p(&root.join(run))]));
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    }
    for i in 0..4 {
        for kind in ["composite", "structure", "entropy"] {
            assert!(root.join("s1").join(format!("sample_{i:02}_{kind}.png")).is_file());
        }
    }
    let s1 = std::fs::read(root.join("s1/structures.txt")).unwrap();
    assert_eq!(s1, std::fs::read(root.join("s2/structures.txt")).unwrap());
    assert_eq!(String::from_utf8(s1).unwrap().lines().count(), 4);
    assert_eq!(
        std::fs::read(root.join("s1/sample_03_composite.png")).unwrap(),
        std::fs::read(root.join("s2/sample_03_composite.png")).unwrap()
    );

    let mut args = vec!["eval".to_string()];
    args.extend(models(&["--out", p(&root.join("eval"))]));
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let csv = std::fs::read_to_string(root.join("eval/eval.csv")).unwrap();
    assert!(csv.lines().count() >= 2, "{csv}");
    assert!(root.join("eval/summary.txt").is_file());

    let vis = root.join("vis");
    ok(&["visualize", "--preset", "smoke", "--codec", p(&root.join("vq")), "--out", p(&vis)]);
    assert!(vis.join("reconstruction.png").is_file());
}
