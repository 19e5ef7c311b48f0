use std::path::Path;
use std::process::{Command, Output};

fn snerf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snerf")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    let out = snerf(&["train", "--data", "x.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
    assert_eq!(snerf(&["gen-scene", "--scene", "sphere", "--out", "d", "--bogus"]).status.code(), Some(1));
    assert_eq!(snerf(&["bound-check", "--random", "3", "--ckpt", "a", "--data", "b", "--out", "c"]).status.code(), Some(1));
    assert_eq!(snerf(&["--help"]).status.code(), Some(0));
    assert_eq!(snerf(&["eval", "--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = snerf(&["gen-scene", "--scene", "no-such-scene", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = snerf(&["gen-scene", "--scene", "sphere", "--res", "64by64", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn random_bound_check_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let out = snerf(&["bound-check", "--random", "200", "--seed", "3", "--out", s(p)]);
        assert!(out.status.success());
        let echoed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(echoed["random"], 200);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 201);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",0")));
    assert!(dir.path().join("a.csv.config.json").exists());
}

#[test]
fn generate_train_render_eval_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = snerf(&["gen-scene", "--scene", "sphere", "--views", "2", "--res", "8x6", "--n-fine", "1024", "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["manifest.json", "scene.json", "view_000.ppm", "view_001_depth.pfm", "gen-scene.config.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let manifest = data.join("manifest.json");

    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{"field": {"pos_freqs": 2, "dir_freqs": 1, "hidden_width": 8, "depth_layers": 1,
             "include_raw_input": true, "density_activation": {"v_th": 0.0, "k": 1.0, "r": 100.0,
             "lambda_sg": 1.0, "kind": "bfif", "hard_bound_b": 100.0}, "seed": 1},
            "train": {"rays_per_batch": 16, "samples_per_ray": 16, "log_every": 2, "checkpoint_every": 3}}"#,
    )
    .unwrap();

    // Zero iterations writes the initialization checkpoint only.
    let run0 = dir.path().join("run0");
    let out = snerf(&["train", "--data", s(&manifest), "--config", s(&config), "--out", s(&run0), "--iterations", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run0.join("ckpt_0000000.snrf").exists());
    assert!(run0.join("final.snrf").exists());
    assert_eq!(std::fs::read_to_string(run0.join("metrics.csv")).unwrap().lines().count(), 1);

    let run = dir.path().join("run");
    let out = snerf(&["train", "--data", s(&manifest), "--config", s(&config), "--out", s(&run), "--iterations", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echoed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(echoed["run"]["train"]["iterations"], 5);
    assert_eq!(echoed["run"]["field"]["hidden_width"], 8);
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("iter,l_rgb,l_v,l_g,v_th,k,r,depth_err,abs_bound"));
    assert_eq!(metrics.lines().count(), 1 + 3);
    for f in ["ckpt_0000000.snrf", "ckpt_0000003.snrf", "ckpt_0000005.snrf", "final.snrf", "train.config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ckpt = run.join("final.snrf");

    let ds = snerf::dataset::Dataset::load(&manifest).unwrap();
    let camera = dir.path().join("camera.json");
    std::fs::write(&camera, serde_json::to_string(&ds.manifest.cameras[0]).unwrap()).unwrap();
    let render = dir.path().join("render");
    let out = snerf(&["render", "--ckpt", s(&ckpt), "--camera", s(&camera), "--out", s(&render), "--samples", "16"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["rgb.ppm", "depth_extracted.pfm", "depth_integrated.pfm", "bounds.csv"] {
        assert!(render.join(f).exists(), "{f}");
    }

    let eval = dir.path().join("eval");
    let out = snerf(&["eval", "--ckpt", s(&ckpt), "--data", s(&manifest), "--out", s(&eval), "--sweep", "0.1:10:5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval_csv = std::fs::read_to_string(eval.join("eval.csv")).unwrap();
    assert_eq!(eval_csv.lines().count(), 3);
    // A B-FIF field has no threshold: one row per view.
    assert_eq!(std::fs::read_to_string(eval.join("sweep.csv")).unwrap().lines().count(), 3);
    let out = snerf(&["eval", "--ckpt", s(&ckpt), "--data", s(&manifest), "--out", s(&eval), "--baseline", "relu"]);
    assert_eq!(out.status.code(), Some(2));

    let views = dir.path().join("views.json");
    std::fs::write(&views, serde_json::to_string(&ds.manifest.cameras).unwrap()).unwrap();
    let ply = dir.path().join("pts.ply");
    let out = snerf(&["export", "--ckpt", s(&ckpt), "--views", s(&views), "--ply", s(&ply)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_to_string(&ply).unwrap().starts_with("ply"));

    let bounds = dir.path().join("field_bounds.csv");
    let out = snerf(&["bound-check", "--ckpt", s(&ckpt), "--data", s(&manifest), "--out", s(&bounds)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_to_string(&bounds).unwrap().starts_with("ray_id,"));
}

#[test]
fn relu_baseline_sweep_writes_per_view_curves() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(snerf(&["gen-scene", "--scene", "slanted-slab", "--views", "2", "--res", "6x6", "--n-fine", "1024", "--out", s(&data)])
        .status
        .success());
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{"field": {"pos_freqs": 2, "dir_freqs": 1, "hidden_width": 8, "depth_layers": 1,
             "include_raw_input": true, "density_activation": {"v_th": 0.0, "k": 1.0, "r": 100.0,
             "lambda_sg": 1.0, "kind": "relu", "hard_bound_b": 100.0}, "seed": 2},
            "train": {"rays_per_batch": 8, "samples_per_ray": 16}}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    let manifest = data.join("manifest.json");
    assert!(snerf(&["train", "--data", s(&manifest), "--config", s(&config), "--out", s(&run), "--iterations", "3"])
        .status
        .success());
    let eval = dir.path().join("eval");
    let out = snerf(&[
        "eval", "--ckpt", s(&run.join("final.snrf")), "--data", s(&manifest), "--out", s(&eval), "--sweep", "0.01:100:9",
        "--baseline", "relu",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(eval.join("sweep.csv")).unwrap().lines().count(), 1 + 2 * 9);
    let summary = std::fs::read_to_string(eval.join("sweep_summary.csv")).unwrap();
    assert!(summary.contains("global,") && summary.contains("spread,"));
}
