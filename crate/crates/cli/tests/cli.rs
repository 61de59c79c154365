use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use attrib_core::netzoo::{build_network, NetworkSpec};
use attrib_core::{Checkpoint, InputShape, Tensor};
use serde_json::Value;
use tempfile::TempDir;

fn attrib(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attrib"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Writes `toml` next to a fresh run parent inside `dir` and runs `command`.
fn run_with(dir: &Path, command: &str, toml: &str, extra: &[&str]) -> Output {
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    let k = COUNTER.fetch_add(1, Ordering::SeqCst);
    let cfg = dir.join(format!("{command}-{k}.toml"));
    fs::write(&cfg, toml).unwrap();
    let out = dir.join("runs");
    let mut args = vec![command, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    attrib(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

/// The folder `attrib` printed as its run folder.
fn run_folder(o: &Output) -> PathBuf {
    let out = String::from_utf8_lossy(&o.stdout);
    let line = out
        .lines()
        .find_map(|l| l.strip_prefix("run folder "))
        .unwrap_or_else(|| panic!("no run folder in {out}"));
    PathBuf::from(line.trim())
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn output_sha(dir: &Path, rel: &str) -> String {
    manifest(dir)["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .find(|o| o["path"] == rel)
        .unwrap_or_else(|| panic!("{rel} not in manifest"))["sha256"]
        .as_str()
        .unwrap()
        .to_string()
}

fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines
        .map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(str::to_string)).collect())
        .collect()
}

const PATCH: &str = "[data.patch]\nsize = 16\nclasses = 4\ntrain = 600\ntest = 40\nseed = 1\n";

/// A VGG-mini trained once per test binary, with and without biases.
struct Trained {
    dir: TempDir,
    biased: PathBuf,
    bias_free: PathBuf,
    biased_metrics: Value,
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let train = |bias: bool| {
            let toml = format!(
                "out = \"runs\"\n{PATCH}[model]\narch = \"vgg-mini\"\nbias = {bias}\n[train]\nepochs = 3\nlr = 0.002\n"
            );
            let o = run_with(dir.path(), "train", &toml, &["--seed", "2"]);
            assert_ok(&o);
            run_folder(&o)
        };
        let biased = train(true);
        let bias_free = train(false);
        let biased_metrics = serde_json::from_str(&fs::read_to_string(biased.join("metrics.json")).unwrap()).unwrap();
        Trained {
            biased: biased.join("checkpoint.bin"),
            bias_free: bias_free.join("checkpoint.bin"),
            biased_metrics,
            dir,
        }
    })
}

fn with_checkpoint(section: &str, ck: &Path, body: &str) -> String {
    format!("{PATCH}[{section}]\ncheckpoint = \"{}\"\n{body}", ck.display())
}

#[test]
fn patch_recipe_reaches_its_accuracy_floor() {
    let t = trained();
    assert!(t.biased_metrics["test_top1"].as_f64().unwrap() >= 0.95, "{}", t.biased_metrics);
}

#[test]
fn missing_dataset_path_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_with(dir.path(), "train", "[model]\narch = \"linear\"\n", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.manifest"), "{}", stderr(&o));

    let o = run_with(dir.path(), "train", "[data]\nmanifest = \"nope.toml\"\n[model]\narch = \"linear\"\n", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.manifest"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_with(dir.path(), "train", &format!("{PATCH}[train]\nepoch = 3\n"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
}

#[test]
fn missing_config_flag_exits_2() {
    assert_eq!(attrib(&["train"]).status.code(), Some(2));
}

#[test]
fn unknown_method_exits_2_listing_valid_names() {
    let t = trained();
    let o = run_with(
        t.dir.path(),
        "explain",
        &with_checkpoint("explain", &t.biased, "methods = [\"saliency\"]\n"),
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for name in ["gradient", "gxi", "activity:<l>", "bias:<l>", "fullgrad:per-feature", "agg:<l0>", "gradcam:<l>"] {
        assert!(err.contains(name), "{name} missing from {err}");
    }
}

#[test]
fn layer_outside_the_network_exits_2() {
    let t = trained();
    let o = run_with(
        t.dir.path(),
        "explain",
        &with_checkpoint("explain", &t.biased, "methods = [\"bias:9\"]\n"),
        &[],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn too_few_images_exits_3() {
    let t = trained();
    let o = run_with(
        t.dir.path(),
        "evaluate",
        &with_checkpoint("evaluate", &t.biased, "methods = [\"gradient\", \"oracle\"]\nimages = 4\n"),
        &[],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn noise_pool_smaller_than_the_draws_exits_3() {
    let t = trained();
    let o = run_with(
        t.dir.path(),
        "evaluate",
        &with_checkpoint(
            "evaluate",
            &t.biased,
            "methods = [\"gradient\", \"oracle\"]\nimages = 6\nnoise_draws = 10\n",
        ),
        &[],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn single_method_evaluation_exits_2() {
    let t = trained();
    let o = run_with(
        t.dir.path(),
        "evaluate",
        &with_checkpoint("evaluate", &t.biased, "methods = [\"gradient\"]\n"),
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let toml = format!("out = \"runs\"\n{PATCH}[model]\narch = \"mlp\"\nhidden = [8]\n[train]\nepochs = 1\n");
    let a = run_with(dir.path(), "train", &toml, &["--seed", "5"]);
    let b = run_with(dir.path(), "train", &toml, &["--seed", "5", "--workers", "1"]);
    let c = run_with(dir.path(), "train", &toml, &["--seed", "6"]);
    for o in [&a, &b, &c] {
        assert_ok(o);
    }
    let (fa, fb, fc) = (run_folder(&a), run_folder(&b), run_folder(&c));
    assert_ne!(fa, fb, "run folders are never reused");
    assert_eq!(output_sha(&fa, "checkpoint.bin"), output_sha(&fb, "checkpoint.bin"));
    assert_ne!(output_sha(&fa, "checkpoint.bin"), output_sha(&fc, "checkpoint.bin"));
    assert_eq!(manifest(&fb)["workers"], 1);
}

#[test]
fn manifest_lists_every_artifact_with_its_checksum() {
    let t = trained();
    let run = t.biased.parent().unwrap();
    let m = manifest(run);
    let outputs: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|o| o["path"].as_str().unwrap()).collect();
    assert_eq!(outputs, ["checkpoint.bin", "losses.csv", "metrics.json"]);
    for rel in outputs {
        let bytes = fs::read(run.join(rel)).unwrap();
        use sha2::Digest;
        assert_eq!(hex::encode(sha2::Sha256::digest(&bytes)), output_sha(run, rel));
    }
    assert_eq!(m["command"], "train");
    assert_eq!(m["seed"], 2);
}

#[test]
fn replay_reproduces_checksums_and_detects_tampering() {
    let t = trained();
    let o = run_with(
        t.dir.path(),
        "robustness",
        &format!("out = \"runs\"\n{}", with_checkpoint("robustness", &t.biased, "")),
        &[],
    );
    assert_ok(&o);
    let folder = run_folder(&o);
    let path = folder.join("manifest.json");
    let replay = attrib(&["replay", path.to_str().unwrap()]);
    assert_ok(&replay);
    assert_ne!(run_folder(&replay), folder);

    let mut m = manifest(&folder);
    m["outputs"][0]["sha256"] = Value::from("0".repeat(64));
    let forged = t.dir.path().join("forged.json");
    fs::write(&forged, serde_json::to_string(&m).unwrap()).unwrap();
    let replay = attrib(&["replay", forged.to_str().unwrap()]);
    assert_eq!(replay.status.code(), Some(1));
    assert!(stderr(&replay).contains("accuracy.csv differs"), "{}", stderr(&replay));
}

#[test]
fn duplicate_method_is_degenerate_and_rows_match() {
    let t = trained();
    let methods = "methods = [\"gradient\", \"gradient\", \"random:3\"]\nimages = 12\nnoise_draws = 4\n";
    let o = run_with(t.dir.path(), "evaluate", &with_checkpoint("evaluate", &t.biased, methods), &[]);
    assert_ok(&o);
    let folder = run_folder(&o);
    let records = csv_rows(&folder.join("records.csv"));
    assert_eq!(records.len(), 12 * 3);
    let comparisons = csv_rows(&folder.join("comparisons.csv"));
    // three pairs, three default metrics
    assert_eq!(comparisons.len(), 9);
    for c in &comparisons {
        let same = c["method_a"] == c["method_b"];
        assert_eq!(c["p"] == "degenerate", same, "{c:?}");
    }
    for r in &records {
        let (em, ep, ed) = (
            r["e_minus"].parse::<f64>().unwrap(),
            r["e_plus"].parse::<f64>().unwrap(),
            r["e_delta"].parse::<f64>().unwrap(),
        );
        assert_eq!(ed, em - ep);
    }
}

#[test]
fn oracle_beats_random_on_patches() {
    let t = trained();
    let body = "methods = [\"oracle\", \"random:1\"]\nimages = 30\nmetrics = [\"de_minus\"]\n";
    let o = run_with(t.dir.path(), "evaluate", &with_checkpoint("evaluate", &t.biased, body), &[]);
    assert_ok(&o);
    let rows = csv_rows(&run_folder(&o).join("comparisons.csv"));
    assert_eq!(rows.len(), 1);
    let p: f64 = rows[0]["p"].parse().unwrap();
    let median: f64 = rows[0]["median_diff"].parse().unwrap();
    assert!(p < 0.01 && median > 0.0, "{:?}", rows[0]);
}

fn explain(ck: &Path, methods: &str, images: &str) -> (PathBuf, Output) {
    let t = trained();
    let body = format!("methods = {methods}\nimages = {images}\n");
    let o = run_with(t.dir.path(), "explain", &with_checkpoint("explain", ck, &body), &[]);
    assert_ok(&o);
    (run_folder(&o), o)
}

fn dump(folder: &Path, id: usize) -> Value {
    serde_json::from_str(&fs::read_to_string(folder.join(format!("attributions/img{id:04}.json"))).unwrap()).unwrap()
}

#[test]
fn zero_bias_checkpoint_gives_warned_all_zero_bias_maps() {
    let t = trained();
    let (folder, o) = explain(&t.bias_free, "[\"bias:2\"]", "[0, 1]");
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
    for id in [0, 1] {
        let d = dump(&folder, id);
        let map = &d["maps"][0];
        assert!(map["warning"].is_string());
        for row in map["values"].as_array().unwrap() {
            assert!(row.as_array().unwrap().iter().all(|v| v.as_f64() == Some(0.0)));
        }
        let img = image::open(folder.join(format!("heatmaps/img{id:04}_bias-2.png"))).unwrap().to_rgb8();
        assert!(img.pixels().all(|p| p.0 == [255, 255, 255]));
    }
}

#[test]
fn top_layer_aggregate_equals_single_layer_activity() {
    let t = trained();
    let (folder, _) = explain(&t.biased, "[\"agg:4\", \"activity:4\"]", "[2]");
    let d = dump(&folder, 2);
    assert_eq!(d["maps"][0]["values"], d["maps"][1]["values"]);
    let a = fs::read(folder.join("heatmaps/img0002_agg-4.png")).unwrap();
    let b = fs::read(folder.join("heatmaps/img0002_activity-4.png")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn explain_dumps_a_complete_decomposition() {
    let t = trained();
    let (folder, _) = explain(&t.biased, "[\"fullgrad:per-layer\", \"gradcam:3\"]", "[0]");
    let d = dump(&folder, 0);
    let report = &d["decomposition"];
    let logit = report["logit"].as_f64().unwrap();
    for r in report["residuals"].as_array().unwrap() {
        assert!(r.as_f64().unwrap() <= 1e-6 * logit.abs().max(1.0));
    }
    assert_eq!(report["residuals"].as_array().unwrap().len(), 5);
}

/// 4x4 single-channel pipeline: IDX files, a hand-set bias-free linear
/// checkpoint, the `gxi` method and the PNG colour map, all recomputed here.
#[test]
fn four_by_four_fixture_matches_the_golden_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..16).map(|i| (i * 16 + 8) as u8).collect();
    let mut idx = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 4, 0, 0, 0, 4];
    idx.extend(&pixels);
    fs::write(dir.path().join("img.idx"), &idx).unwrap();
    fs::write(dir.path().join("lab.idx"), [0, 0, 8, 1, 0, 0, 0, 1, 1]).unwrap();
    fs::write(
        dir.path().join("data.toml"),
        "classes = 2\n[train]\nimages = \"img.idx\"\nlabels = \"lab.idx\"\n[test]\nimages = \"img.idx\"\nlabels = \"lab.idx\"\n",
    )
    .unwrap();

    let spec = NetworkSpec::linear(InputShape::new(4, 4, 1), 2, false);
    let w: Vec<f64> = (0..32).map(|k| ((k * 7 % 11) as f64 - 5.0) / 4.0).collect();
    let mut ck = build_network(&spec, 0).unwrap();
    ck.set_param("1.weight", Tensor::new(vec![2, 16], w.clone()).unwrap()).unwrap();
    let ck_path = dir.path().join("ck.bin");
    ck.save(&ck_path).unwrap();
    assert_eq!(Checkpoint::load(&ck_path).unwrap().params().len(), 1);

    fs::write(
        dir.path().join("explain.toml"),
        "out = \"runs\"\n[data]\nmanifest = \"data.toml\"\n[explain]\ncheckpoint = \"ck.bin\"\nmethods = [\"gxi\"]\nimages = [0]\n",
    )
    .unwrap();
    let o = attrib(&["explain", "--config", dir.path().join("explain.toml").to_str().unwrap()]);
    assert_ok(&o);
    let folder = run_folder(&o);

    let x: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let logit = |c: usize| (0..16).map(|i| w[c * 16 + i] * x[i]).sum::<f64>();
    let class = usize::from(logit(1) > logit(0));
    let contrib: Vec<f64> = (0..16).map(|i| (w[class * 16 + i] * x[i]).abs()).collect();
    let lo = contrib.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = contrib.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let expected: Vec<[u8; 3]> = contrib
        .iter()
        .map(|v| {
            let t = (v - lo) / (hi - lo);
            let fade = ((1.0 - t) * 255.0).round() as u8;
            [255, fade, fade]
        })
        .collect();

    let img = image::open(folder.join("heatmaps/img0000_gxi.png")).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (4, 4));
    let got: Vec<[u8; 3]> = img.pixels().map(|p| p.0).collect();
    assert_eq!(got, expected);
    assert_eq!(dump(&folder, 0)["class"], class);
}

#[test]
fn bias_free_robustness_is_flat_across_scales() {
    let t = trained();
    let o = run_with(t.dir.path(), "robustness", &with_checkpoint("robustness", &t.bias_free, ""), &[]);
    assert_ok(&o);
    let folder = run_folder(&o);
    let rows = csv_rows(&folder.join("accuracy.csv"));
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r["top1"] == rows[0]["top1"]), "{rows:?}");
    let report: Value = serde_json::from_str(&fs::read_to_string(folder.join("regression.json")).unwrap()).unwrap();
    assert_eq!(report["vanilla_top1"], report["zero_bias_top1"]);
}

#[test]
fn bias_free_decay_is_flat() {
    let t = trained();
    let body = "eval_images = 20\n[decay.schedule]\ndecay_steps = 3\ntrain_steps = 4\n";
    let o = run_with(t.dir.path(), "decay", &with_checkpoint("decay", &t.bias_free, body), &[]);
    assert_ok(&o);
    let folder = run_folder(&o);
    let rows = csv_rows(&folder.join("trajectory.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r["top1"] == rows[0]["top1"] && r["loss"] == rows[0]["loss"]));
    assert_eq!(fs::read(folder.join("checkpoint.bin")).unwrap(), fs::read(&t.bias_free).unwrap());
}

#[test]
fn help_documents_every_section_and_default() {
    let o = attrib(&["--help"]);
    assert_ok(&o);
    let text = String::from_utf8_lossy(&o.stdout);
    for needle in [
        "[data.patch]",
        "[model]",
        "[train]",
        "[explain]",
        "[evaluate]",
        "noise_draws = 10",
        "[decay.schedule]",
        "temperature = 100.0",
        "[robustness]",
        "scales = [0.001, 0.1, 1.0, 10.0, 1000.0]",
        "3 insufficient data",
    ] {
        assert!(text.contains(needle), "--help lacks {needle}");
    }
}
