use std::path::Path;
use std::process::{Command, Output};

fn curvprop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curvprop"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.cfg");
    std::fs::write(
        &path,
        "# tiny net for a quick run\nsizes = 8,5,5,3\ncases = 40\nsamples = 1,10,100\ninit_variance = 0.2\n",
    )
    .unwrap();
    path
}

#[test]
fn experiment_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let o = curvprop(&[
        "experiment",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
        "--threads",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "estimator,noise,samples,metric,seconds,seed");
    assert_eq!(lines.len(), 17);
    assert!(lines[1..].iter().all(|l| l.ends_with(",0,3")), "{csv}");
    assert!(lines[16].starts_with("BeckerLeCun,none,1,"));
    assert!(out.join("accuracy.svg").exists());
    assert!(out.join("cache").is_dir());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("sq_rel_l2"), "{stdout}");
}

#[test]
fn overrides_apply_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let o = curvprop(&[
        "experiment",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--set",
        "estimators=S-binary",
        "--set",
        "samples=2,4",
        "--set",
        "cache=none",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains("\nS,binary,4,"));
    assert!(!out.join("cache").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "seed = 1\nsamples = ten\n").unwrap();
    let o = curvprop(&["experiment", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("config line 2"), "{err}");

    let o = curvprop(&["experiment", "--set", "nonsense=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key 'nonsense'"));

    let o = curvprop(&["experiment", "--set", "novalue"]);
    assert_eq!(o.status.code(), Some(2));

    let o = curvprop(&["experiment", "--config", "/nonexistent/x.cfg"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn hessian_and_estimate_on_a_graph_file() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.txt");
    std::fs::write(
        &g,
        "y input dim=2\na affine parents=y rows=1 cols=2 weight=1,2\ns elementwise parents=a fn=square\n",
    )
    .unwrap();
    // f = (y0 + 2 y1)^2, H = 2 [1 2; 2 4].
    let o = curvprop(&["hessian", "--graph", g.to_str().unwrap(), "--at", "0.5,-1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8_lossy(&o.stdout), "2,4\n4,8\n");

    let o = curvprop(&[
        "estimate", "--graph", g.to_str().unwrap(), "--at", "0.5,-1", "--estimator", "TU", "--samples", "10",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "i,j,estimate,variance");
    // A rank-one positive curvature with binary noise is estimated exactly.
    assert_eq!(lines[1], "0,0,2,0");
    assert_eq!(lines[2], "1,1,8,0");

    let o = curvprop(&["estimate", "--graph", g.to_str().unwrap(), "--at", "1", "--estimator", "S"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn checkpoint_feeds_the_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("net.ckpt");
    let o = curvprop(&[
        "init-net", "--sizes", "6,4,3", "--epochs", "2", "--cases", "30", "--out", ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let o = curvprop(&[
        "experiment",
        "--out",
        out.to_str().unwrap(),
        "--set",
        &format!("checkpoint={}", ckpt.display()),
        "--set",
        "cases=30",
        "--set",
        "samples=1,3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("parameters: 43"));
}
