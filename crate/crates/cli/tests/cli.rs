use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use yolocam_core::fixtures::{square_detector, square_image, SQUARE_DETECTOR_CFG};
use yolocam_core::model::{parse_network_config, serialize_weights, zero_params};
use yolocam_core::NetworkSpec;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(spec: &NetworkSpec) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("net.cfg"), SQUARE_DETECTOR_CFG).unwrap();
        fs::write(dir.path().join("net.weights"), serialize_weights(spec).unwrap()).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn image(&self, rel: &str, squares: &[(u32, u32, f32)]) -> PathBuf {
        let p = self.path(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        square_image(squares).save(&p).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_yolocam"))
            .current_dir(self.dir.path())
            .env_remove("YOLOCAM_WORKERS")
            .env_remove("RUST_LOG")
            .args(args)
            .output()
            .unwrap()
    }
}

const MODEL: [&str; 4] = ["--model", "net.cfg", "--weights", "net.weights"];

fn with_model(cmd: &str, rest: &[&str]) -> Vec<String> {
    let mut v = vec![cmd.to_string()];
    v.extend(MODEL.iter().map(|s| s.to_string()));
    v.extend(rest.iter().map(|s| s.to_string()));
    v
}

fn run_model(ws: &Workspace, cmd: &str, rest: &[&str]) -> Output {
    let args = with_model(cmd, rest);
    ws.run(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn pngs(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok()?.file_name().into_string().ok()).filter(|n| n.ends_with(".png")).collect())
        .unwrap_or_default();
    v.sort();
    v
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn zero_model_explains_nothing() {
    let spec = zero_params(parse_network_config(SQUARE_DETECTOR_CFG).unwrap());
    let ws = Workspace::new(&spec);
    ws.image("scene.png", &[(2, 2, 1.0)]);
    let out = run_model(&ws, "explain", &["--image", "scene.png", "--out", "out"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(pngs(&ws.path("out")).is_empty());
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(ws.path("out/detections.json")).unwrap()).unwrap();
    assert_eq!(doc["detections"], serde_json::json!([]));
}

#[test]
fn one_detection_gives_two_overlays() {
    let ws = Workspace::new(&square_detector(3));
    ws.image("scene.png", &[(3, 6, 1.0)]);
    let out = run_model(&ws, "explain", &["--image", "scene.png", "--out", "out", "--class-names", "person,car"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(pngs(&ws.path("out")), ["scene.png_d000_cls0_detection.png", "scene.png_d000_obj_detection.png"]);
    assert!(stdout(&out).contains("d000 person"), "{}", stdout(&out));
}

#[test]
fn unknown_scope_is_a_usage_error() {
    let ws = Workspace::new(&square_detector(3));
    ws.image("scene.png", &[(3, 6, 1.0)]);
    let out = run_model(&ws, "explain", &["--image", "scene.png", "--out", "out", "--scope", "galaxy"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("galaxy"));
    assert!(!ws.path("out").exists());
}

#[test]
fn runtime_failures_exit_with_one() {
    let ws = Workspace::new(&square_detector(3));
    fs::create_dir_all(ws.path("empty")).unwrap();
    let out = run_model(&ws, "batch", &["--images", "empty", "--out", "run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error:"), "{}", stderr(&out));

    let out = run_model(&ws, "explain", &["--image", "missing.png", "--out", "out"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn batch_then_renormalize() {
    let ws = Workspace::new(&square_detector(3));
    ws.image("images/a.png", &[(1, 1, 1.0), (5, 2, 0.7)]);
    ws.image("images/b.png", &[(6, 6, 0.6)]);
    let out = run_model(&ws, "batch", &["--images", "images", "--out", "run", "--workers", "2", "--scope", "detection,dataset"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("2 images (0 failed), 6 records"), "{text}");
    assert_eq!(pngs(&ws.path("run/png")).len(), 12);

    let out = ws.run(&["renormalize", "--manifest", "run", "--scope", "image", "--out", "image"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(pngs(&ws.path("image")).len(), 6);
    assert!(pngs(&ws.path("image")).iter().all(|n| n.ends_with("_image.png")));
}

#[test]
fn workers_from_the_environment_are_validated() {
    let ws = Workspace::new(&square_detector(3));
    ws.image("images/a.png", &[(1, 1, 1.0)]);
    let args = with_model("batch", &["--images", "images", "--out", "run"]);
    let out = Command::new(env!("CARGO_BIN_EXE_yolocam"))
        .current_dir(ws.dir.path())
        .env("YOLOCAM_WORKERS", "0")
        .args(&args)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn config_file_supplies_options() {
    let ws = Workspace::new(&square_detector(3));
    ws.image("scene.png", &[(3, 6, 1.0)]);
    fs::write(
        ws.path("yolocam.toml"),
        "model = \"net.cfg\"\nweights = \"net.weights\"\n\n[explain]\ntargets = \"objectness\"\nscope = [\"image\"]\n",
    )
    .unwrap();
    let out = ws.run(&["--config", "yolocam.toml", "explain", "--image", "scene.png", "--out", "out"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(pngs(&ws.path("out")), ["scene.png_d000_obj_image.png"]);

    // The command line wins over the file.
    let out = ws.run(&["--config", "yolocam.toml", "explain", "--image", "scene.png", "--out", "out2", "--targets", "class"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(pngs(&ws.path("out2")), ["scene.png_d000_cls0_image.png"]);

    fs::write(ws.path("bad.toml"), "[explain]\nspeed = 3\n").unwrap();
    let out = ws.run(&["--config", "bad.toml", "explain", "--image", "scene.png", "--out", "out3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("speed"));
}

#[test]
fn help_lists_defaults() {
    let ws = Workspace::new(&square_detector(3));
    let out = ws.run(&["explain", "--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for needle in [
        "[default: 0.5]",
        "[default: 0.45]",
        "[default: both]",
        "[default: detection]",
        "[default: classic]",
        "[default: sigmoid]",
        "[default: 2]",
    ] {
        assert!(text.contains(needle), "missing {needle} in\n{text}");
    }
    let out = ws.run(&["batch", "--help"]);
    assert!(stdout(&out).contains("YOLOCAM_WORKERS"));
}
