use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mlh_core::format::save_descriptor;
use mlh_core::{MlhDescriptor, ViewDirection};

fn mlh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlh"))
        .args(args)
        .output()
        .expect("run mlh")
}

fn ok(args: &[&str]) -> Output {
    let out = mlh(args);
    assert!(
        out.status.success(),
        "mlh {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn cube() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cube.off")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn check_passes_on_cube() {
    let out = ok(&["check", s(&cube()), "--n", "32", "--k", "5"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
    for view in report["views"].as_array().unwrap() {
        assert_eq!(view["violations"], 0);
    }
}

#[test]
fn compute_writes_three_views_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cube.mlhd");
    ok(&["compute", s(&cube()), "--n", "16", "--k", "2", "-o", s(&out)]);
    let names = ["cube_x.mlhd", "cube_y.mlhd", "cube_z.mlhd"];
    let first: Vec<Vec<u8>> = names.iter().map(|n| std::fs::read(dir.path().join(n)).unwrap()).collect();
    assert!(first.iter().all(|b| b.len() == 17 + 16 * 16 * 2 * 4));
    ok(&["compute", s(&cube()), "--n", "16", "--k", "2", "-o", s(&out)]);
    for (name, bytes) in names.iter().zip(&first) {
        assert_eq!(&std::fs::read(dir.path().join(name)).unwrap(), bytes);
    }

    let single = dir.path().join("top.mlhd");
    ok(&["compute", s(&cube()), "--view", "z", "--n", "16", "--k", "2", "-o", s(&single)]);
    assert_eq!(std::fs::read(&single).unwrap(), first[2]);
}

#[test]
fn render_of_empty_descriptor_is_white() {
    let dir = tempfile::tempdir().unwrap();
    let desc = dir.path().join("empty.mlhd");
    save_descriptor(&desc, &MlhDescriptor::empty(4, 2, ViewDirection::PosZ)).unwrap();
    let img = dir.path().join("empty.pgm");
    ok(&["render", s(&desc), "--layer", "2", "-o", s(&img)]);
    let bytes = std::fs::read(&img).unwrap();
    let header = b"P5\n4 4\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert!(bytes[header.len()..].iter().all(|&b| b == 255));
    assert_eq!(bytes.len(), header.len() + 16);

    let out = mlh(&["render", s(&desc), "--layer", "3", "-o", s(&img)]);
    assert!(!out.status.success());
}

#[test]
fn train_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let gen = ["gen-synthetic", "--per-class", "5", "--n", "16", "--k", "2", "--seed", "3"];
    ok(&[&gen[..], &["-o", s(&p("a.mlhs"))]].concat());
    ok(&[&gen[..], &["-o", s(&p("b.mlhs"))]].concat());
    assert_eq!(std::fs::read(p("a.mlhs")).unwrap(), std::fs::read(p("b.mlhs")).unwrap());

    let train = |lr: &str, tag: &str| {
        let ckpt = p(&format!("{tag}.mlhw"));
        let report = p(&format!("{tag}.json"));
        ok(&[
            "train", s(&p("a.mlhs")), "--epochs", "3", "--width", "4", "--hidden", "8", "--lr", lr,
            "--seed", "1", "-o", s(&ckpt), "--report", s(&report),
        ]);
        (ckpt, report)
    };

    let (_, flat) = train("0", "flat");
    let epochs = json(&flat)["epochs"].as_array().unwrap().clone();
    assert_eq!(epochs.len(), 3);
    assert!(epochs.iter().all(|e| e["train_loss"] == epochs[0]["train_loss"]));

    let (c1, r1) = train("0.01", "one");
    let (c2, r2) = train("0.01", "two");
    assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());

    let eval = p("eval.json");
    ok(&["eval", s(&c1), s(&p("a.mlhs")), "--report", s(&eval)]);
    let (trained, evaluated) = (json(&r1), json(&eval));
    assert_eq!(evaluated["accuracy"], trained["final_test_accuracy"]);
    assert_eq!(evaluated["confusion"], trained["confusion"]);
    assert_eq!(evaluated["count"], 4);
}

#[test]
fn failures_exit_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.off");
    let out = mlh(&["check", s(&missing)]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:") && stderr.contains("missing.off"), "{stderr}");

    let out = mlh(&["train", s(&missing), "-o", "x", "--report", "y", "--merge", "bogus"]);
    assert!(!out.status.success());
}

#[test]
fn batch_reads_directory_tree() {
    let dir = tempfile::tempdir().unwrap();
    for (class, split) in [("b", "train"), ("b", "test"), ("a", "train"), ("a", "test")] {
        let d = dir.path().join("tree").join(class).join(split);
        std::fs::create_dir_all(&d).unwrap();
        std::fs::copy(cube(), d.join("m.off")).unwrap();
    }
    let out_path = dir.path().join("tree.mlhs");
    let out = ok(&["batch", s(&dir.path().join("tree")), "--n", "8", "--k", "2", "-o", s(&out_path)]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("4 records") && stdout.contains(r#"["a", "b"]"#), "{stdout}");
}
