//! End-to-end runs of the `zsfuse` binary against the mock backends.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use serde_json::{json, Value};
use zsfuse_core::pipeline::encode_png;
use zsfuse_core::{prompts, ClassifierModel};

const LABELS: [&str; 3] = ["cat", "dog", "bird"];

fn zsfuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsfuse"))
        .current_dir(dir)
        .env_remove("ZSFUSE_ENCODER_URL")
        .env_remove("ZSFUSE_LLM_URL")
        .env_remove("ZSFUSE_CACHE_DIR")
        .env_remove("ZSFUSE_API_KEY")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[track_caller]
fn assert_exit(o: &Output, code: i32) {
    assert_eq!(
        o.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(o),
        stderr(o)
    );
}

fn basis(dim: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

fn indexed_png(index: u32) -> Vec<u8> {
    encode_png(&RgbImage::from_fn(224, 224, |x, y| {
        Rgb([
            (index % 251) as u8,
            (index / 251) as u8,
            ((x * 7 + y * 3) % 256) as u8,
        ])
    }))
}

fn marker_png(background: [u8; 3], marker: [u8; 3], x: u32, y: u32, side: u32) -> Vec<u8> {
    encode_png(&RgbImage::from_fn(224, 224, |px, py| {
        if (x..x + side).contains(&px) && (y..y + side).contains(&py) {
            Rgb(marker)
        } else {
            Rgb(background)
        }
    }))
}

/// Truth is `i % 3`; images below 20 are predicted correctly, the rest as
/// the next class.
fn intended(i: usize) -> (usize, usize) {
    let truth = i % 3;
    (truth, if i < 20 { truth } else { (truth + 1) % 3 })
}

/// Thirty images whose every feature points at the intended prediction,
/// plus the manifest and fixture table describing them.
fn dataset(dir: &Path) -> (PathBuf, PathBuf) {
    std::fs::create_dir_all(dir.join("images")).unwrap();
    let classification = prompts::render_classification_prompt(&LABELS).unwrap();
    let mut texts = serde_json::Map::new();
    for (i, l) in LABELS.iter().enumerate() {
        texts.insert(l.to_string(), json!(basis(3, i)));
    }
    let (mut images, mut llm, mut records) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..30 {
        let (truth, predicted) = intended(i);
        let name = format!("images/{i:02}.png");
        std::fs::write(dir.join(&name), indexed_png(i as u32)).unwrap();
        let (d, p) = (
            format!("picture number {i}"),
            format!("this is a {}", LABELS[predicted]),
        );
        texts.insert(d.clone(), json!(basis(3, predicted)));
        texts.insert(p.clone(), json!(basis(3, predicted)));
        images.push(json!({"image": name, "vector": basis(3, predicted)}));
        llm.push(json!({"prompt": "@description", "image": name, "responses": [d]}));
        llm.push(json!({"prompt": classification, "image": name, "responses": [p]}));
        records.push(json!({"image": name, "label_index": truth}));
    }
    let fixtures = dir.join("fixtures.json");
    let manifest = dir.join("manifest.json");
    let f = json!({"dim": 3, "text_vectors": texts, "image_vectors": images, "llm": llm});
    std::fs::write(&fixtures, serde_json::to_vec_pretty(&f).unwrap()).unwrap();
    let m = json!({"name": "synthetic", "labels": LABELS, "records": records});
    std::fs::write(&manifest, serde_json::to_vec_pretty(&m).unwrap()).unwrap();
    (manifest, fixtures)
}

fn write_labels(dir: &Path, labels: &[&str]) -> PathBuf {
    let p = dir.join("labels.txt");
    std::fs::write(&p, labels.join("\n") + "\n").unwrap();
    p
}

fn build_labels_model(dir: &Path, fixtures: &Path) -> PathBuf {
    write_labels(dir, &LABELS);
    let f = fixtures.to_str().unwrap();
    let o = zsfuse(
        dir,
        &[
            "build",
            "--labels",
            "labels.txt",
            "--mode",
            "labels",
            "--backend",
            "mock",
            "--mock-fixtures",
            f,
            "--out",
            "model.zsf",
        ],
    );
    assert_exit(&o, 0);
    dir.join("model.zsf")
}

#[test]
fn build_writes_a_model_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    write_labels(dir.path(), &LABELS);
    let o = zsfuse(
        dir.path(),
        &[
            "build",
            "--labels",
            "labels.txt",
            "--mode",
            "combined",
            "--k",
            "5",
            "--backend",
            "mock",
            "--out",
            "model.zsf",
        ],
    );
    assert_exit(&o, 0);
    let out = stdout(&o);
    assert!(
        out.contains("built 3 classes x 64 dims, mode combined"),
        "{out}"
    );
    assert!(out.contains("mock-encoder:dim=64:seed=0"), "{out}");
    let model = ClassifierModel::load(&dir.path().join("model.zsf")).unwrap();
    assert_eq!(model.labels(), LABELS);
    assert_eq!(model.dim(), 64);
}

#[test]
fn rebuild_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_labels(dir.path(), &LABELS);
    let run = |out: &str| {
        let o = zsfuse(
            dir.path(),
            &[
                "build",
                "--labels",
                "labels.txt",
                "--mode",
                "combined",
                "--k",
                "10",
                "--backend",
                "mock",
                "--seed",
                "7",
                "--out",
                out,
            ],
        );
        assert_exit(&o, 0);
        std::fs::read(dir.path().join(out)).unwrap()
    };
    assert_eq!(run("a.zsf"), run("b.zsf"));
}

#[test]
fn duplicate_label_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    write_labels(dir.path(), &["cat", "dog", "cat"]);
    let o = zsfuse(
        dir.path(),
        &[
            "build",
            "--labels",
            "labels.txt",
            "--mode",
            "labels",
            "--backend",
            "mock",
            "--out",
            "m.zsf",
        ],
    );
    assert_exit(&o, 2);
    assert!(stderr(&o).contains("\"cat\""), "{}", stderr(&o));
    assert!(!dir.path().join("m.zsf").exists());

    write_labels(dir.path(), &["cat", "dog"]);
    let o = zsfuse(
        dir.path(),
        &[
            "build",
            "--labels",
            "labels.txt",
            "--k",
            "7",
            "--backend",
            "mock",
            "--out",
            "m.zsf",
        ],
    );
    assert_exit(&o, 2);
}

#[test]
fn classify_prints_the_fixture_label() {
    let dir = tempfile::tempdir().unwrap();
    let (_, fixtures) = dataset(dir.path());
    build_labels_model(dir.path(), &fixtures);
    let f = fixtures.to_str().unwrap();
    // Image 4 is a dog (4 % 3 == 1) and predicted as one.
    let o = zsfuse(
        dir.path(),
        &[
            "classify",
            "images/04.png",
            "--model",
            "model.zsf",
            "--backend",
            "mock",
            "--mock-fixtures",
            f,
        ],
    );
    assert_exit(&o, 0);
    let out = stdout(&o);
    assert_eq!(out.lines().next(), Some("dog"));
    assert!(out.contains("  1. dog 1.000000"), "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("  ")).count(), 3);

    let o = zsfuse(
        dir.path(),
        &[
            "classify",
            "images/04.png",
            "--model",
            "model.zsf",
            "--backend",
            "mock",
            "--mock-fixtures",
            f,
            "--json",
        ],
    );
    assert_exit(&o, 0);
    let p: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(p["class_index"], 1);
    assert_eq!(p["class_label"], "dog");
    assert_eq!(p["features"]["description_text"], "picture number 4");
}

#[test]
fn classify_feature_subsets_all_run() {
    let dir = tempfile::tempdir().unwrap();
    let model = {
        write_labels(dir.path(), &LABELS);
        let o = zsfuse(
            dir.path(),
            &[
                "build",
                "--labels",
                "labels.txt",
                "--mode",
                "labels",
                "--backend",
                "mock",
                "--out",
                "m.zsf",
            ],
        );
        assert_exit(&o, 0);
        "m.zsf"
    };
    std::fs::write(dir.path().join("x.png"), indexed_png(3)).unwrap();
    for features in ["if", "df", "pf", "if,df,pf"] {
        for strategy in ["avg-feature", "avg-similarity", "max-similarity"] {
            let o = zsfuse(
                dir.path(),
                &[
                    "classify",
                    "x.png",
                    "--model",
                    model,
                    "--backend",
                    "mock",
                    "--features",
                    features,
                    "--strategy",
                    strategy,
                    "--json",
                ],
            );
            assert_exit(&o, 0);
            let p: Value = serde_json::from_str(&stdout(&o)).unwrap();
            let present = ["image_feature", "description_feature", "prediction_feature"]
                .iter()
                .filter(|k| !p["features"][**k].is_null())
                .count();
            assert_eq!(present, features.split(',').count(), "{features}");
        }
    }
    let o = zsfuse(
        dir.path(),
        &[
            "classify",
            "x.png",
            "--model",
            model,
            "--backend",
            "mock",
            "--features",
            "xx",
        ],
    );
    assert_exit(&o, 2);
}

#[test]
fn classify_without_model_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.png"), indexed_png(0)).unwrap();
    let o = zsfuse(
        dir.path(),
        &[
            "classify",
            "x.png",
            "--model",
            "missing.zsf",
            "--backend",
            "mock",
        ],
    );
    assert_exit(&o, 2);
    assert!(stderr(&o).contains("missing.zsf"), "{}", stderr(&o));

    let o = zsfuse(dir.path(), &["classify", "x.png"]);
    assert_exit(&o, 2);
}

#[test]
fn http_backend_without_endpoints_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    write_labels(dir.path(), &LABELS);
    let o = zsfuse(
        dir.path(),
        &[
            "build",
            "--labels",
            "labels.txt",
            "--mode",
            "labels",
            "--out",
            "m.zsf",
        ],
    );
    assert_exit(&o, 2);
    assert!(stderr(&o).contains("ZSFUSE_ENCODER_URL"), "{}", stderr(&o));
}

#[test]
fn evaluate_matches_hand_computed_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (_, fixtures) = dataset(dir.path());
    build_labels_model(dir.path(), &fixtures);
    let f = fixtures.to_str().unwrap();
    let o = zsfuse(
        dir.path(),
        &[
            "evaluate",
            "--manifest",
            "manifest.json",
            "--model",
            "model.zsf",
            "--backend",
            "mock",
            "--mock-fixtures",
            f,
            "--out-dir",
            "out",
        ],
    );
    assert_exit(&o, 0);
    // p_o = 2/3, p_e = 1/3, so kappa = 1/2.
    assert_eq!(
        stdout(&o).trim(),
        "fusion[if,df,pf; avg-feature]: top1=0.6667 top5=1.0000 kappa=0.5000 evaluated=30 failed=0 degraded=0"
    );
    let report: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["top1"].as_f64(), Some(20.0 / 30.0));
    assert_eq!(
        report["confusion"]["counts"],
        json!([[7, 3, 0], [0, 7, 3], [4, 0, 6]])
    );
    assert_eq!(report["config"]["run"]["backend"], "mock");
    assert_eq!(report["config"]["run"]["mode"]["kind"], "labels");
    let csv = std::fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert!(csv.contains("images/20.png,2,0,0,1,bird,cat,\n"), "{csv}");
}

#[test]
fn baseline_reports_are_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let (_, fixtures) = dataset(dir.path());
    let f = fixtures.to_str().unwrap();
    let o = zsfuse(
        dir.path(),
        &[
            "evaluate",
            "--manifest",
            "manifest.json",
            "--baseline",
            "rouge1",
            "--backend",
            "mock",
            "--mock-fixtures",
            f,
            "--out-dir",
            "out",
            "--json",
        ],
    );
    assert_exit(&o, 0);
    let summary: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["method"], "baseline[rouge1]");
    assert_eq!(summary["top1"].as_f64(), Some(20.0 / 30.0));
    let csv = std::fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert!(csv.contains("#method,baseline[rouge1]\n"));

    let o = zsfuse(
        dir.path(),
        &[
            "evaluate",
            "--manifest",
            "manifest.json",
            "--backend",
            "mock",
            "--out-dir",
            "out",
        ],
    );
    assert_exit(&o, 2);
    let o = zsfuse(
        dir.path(),
        &[
            "evaluate",
            "--manifest",
            "manifest.json",
            "--baseline",
            "bleu",
            "--backend",
            "mock",
            "--out-dir",
            "out",
        ],
    );
    assert_exit(&o, 2);
}

#[test]
fn warm_cache_makes_no_backend_calls() {
    let dir = tempfile::tempdir().unwrap();
    let (_, fixtures) = dataset(dir.path());
    build_labels_model(dir.path(), &fixtures);
    let f = fixtures.to_str().unwrap();
    let run = |out: &str| {
        let o = zsfuse(
            dir.path(),
            &[
                "evaluate",
                "--manifest",
                "manifest.json",
                "--model",
                "model.zsf",
                "--backend",
                "mock",
                "--mock-fixtures",
                f,
                "--cache-dir",
                "cache",
                "--out-dir",
                out,
                "--json",
            ],
        );
        assert_exit(&o, 0);
        serde_json::from_str::<Value>(&stdout(&o)).unwrap()
    };
    let cold = run("cold");
    // Per image: one image encode, two generations, two text encodes. Only
    // three prediction texts are distinct, so repeats may already hit the
    // cache during the cold run, depending on thread timing.
    assert_eq!(cold["counters"]["encode_image_calls"], 30);
    assert_eq!(cold["counters"]["generate_calls"], 60);
    let texts = cold["counters"]["encode_text_calls"].as_u64().unwrap();
    assert!((33..=60).contains(&texts), "{texts}");
    assert_eq!(cold["counters"]["cache_hits"].as_u64().unwrap(), 60 - texts);
    let warm = run("warm");
    for k in ["encode_text_calls", "encode_image_calls", "generate_calls"] {
        assert_eq!(warm["counters"][k], 0, "{k}");
    }
    assert_eq!(warm["counters"]["cache_hits"], 150);
    assert_eq!(warm["top1"], cold["top1"]);
    assert_eq!(warm["kappa"], cold["kappa"]);
}

#[test]
fn too_many_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let (_, fixtures) = dataset(dir.path());
    build_labels_model(dir.path(), &fixtures);
    let f = fixtures.to_str().unwrap();
    std::fs::remove_file(dir.path().join("images/05.png")).unwrap();
    let args = [
        "evaluate",
        "--manifest",
        "manifest.json",
        "--model",
        "model.zsf",
        "--backend",
        "mock",
        "--mock-fixtures",
        f,
        "--out-dir",
        "out",
    ];
    // The fixture table itself references the deleted image.
    let o = zsfuse(dir.path(), &args);
    assert_exit(&o, 2);

    let o = zsfuse(
        dir.path(),
        &[
            "evaluate",
            "--manifest",
            "manifest.json",
            "--model",
            "model.zsf",
            "--backend",
            "mock",
            "--dim",
            "3",
            "--out-dir",
            "out",
        ],
    );
    assert_exit(&o, 1);
    assert!(stderr(&o).contains("1 of 30"), "{}", stderr(&o));

    let config = dir.path().join("zsfuse.toml");
    std::fs::write(&config, "max_failure_fraction = 0.05\n").unwrap();
    let o = zsfuse(
        dir.path(),
        &[
            "evaluate",
            "--manifest",
            "manifest.json",
            "--model",
            "model.zsf",
            "--backend",
            "mock",
            "--dim",
            "3",
            "--config",
            "zsfuse.toml",
            "--out-dir",
            "out",
        ],
    );
    assert_exit(&o, 0);
    assert!(
        stdout(&o).contains("evaluated=29 failed=1"),
        "{}",
        stdout(&o)
    );
}

const RED: [u8; 3] = [250, 10, 10];
const BG: [u8; 3] = [30, 30, 30];

fn marker_fixtures(dir: &Path) -> PathBuf {
    let p = dir.join("markers.json");
    let f = json!({
        "dim": 4,
        "text_vectors": {"cat": basis(4, 0), "dog": basis(4, 1)},
        "keyword_vectors": {"zzz": basis(4, 2)},
        "image_markers": [{"rgb": RED, "vector": basis(4, 0)}],
        "image_background": basis(4, 3),
    });
    std::fs::write(&p, serde_json::to_vec(&f).unwrap()).unwrap();
    p
}

#[test]
fn attribute_writes_heatmap_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = marker_fixtures(dir.path());
    let f = fixtures.to_str().unwrap();
    write_labels(dir.path(), &["cat", "dog"]);
    let o = zsfuse(
        dir.path(),
        &[
            "build",
            "--labels",
            "labels.txt",
            "--mode",
            "labels",
            "--backend",
            "mock",
            "--mock-fixtures",
            f,
            "--out",
            "m.zsf",
        ],
    );
    assert_exit(&o, 0);
    std::fs::write(
        dir.path().join("marker.png"),
        marker_png(BG, RED, 100, 100, 50),
    )
    .unwrap();
    let o = zsfuse(
        dir.path(),
        &[
            "attribute",
            "marker.png",
            "--model",
            "m.zsf",
            "--backend",
            "mock",
            "--mock-fixtures",
            f,
            "--out",
            "heat.png",
        ],
    );
    assert_exit(&o, 0);
    let out = stdout(&o);
    assert!(out.starts_with("cat "), "{out}");
    assert!(out.contains("kernel_used: 50\n"), "{out}");
    assert!(!out.contains("image: no highlights"), "{out}");
    let heat = image::open(dir.path().join("heat.png")).unwrap();
    assert_eq!((heat.width(), heat.height()), (224, 224));
    let map: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("heat.json")).unwrap()).unwrap();
    assert_eq!(map["kernel_used"], 50);
    assert_eq!(map["grid"].as_array().unwrap().len(), 23);
    assert_eq!(
        map["settings"]["image"],
        json!({"kernel": 50, "stride": 10, "growth": 50, "max_kernel": 200})
    );
    assert_eq!(
        map["settings"]["text"],
        json!({"start_width": 3, "min_width": 1})
    );
    assert_eq!(map["settings"]["threshold"].as_f64(), Some(0.01));

    std::fs::write(dir.path().join("flat.png"), marker_png(BG, BG, 0, 0, 0)).unwrap();
    let o = zsfuse(
        dir.path(),
        &[
            "attribute",
            "flat.png",
            "--model",
            "m.zsf",
            "--backend",
            "mock",
            "--mock-fixtures",
            f,
            "--out",
            "flat-heat.png",
        ],
    );
    assert_exit(&o, 0);
    let out = stdout(&o);
    assert!(out.contains("kernel_used: 200\n"), "{out}");
    assert!(out.contains("image: no highlights above 0.01"), "{out}");

    let o = zsfuse(
        dir.path(),
        &[
            "attribute",
            "flat.png",
            "--model",
            "m.zsf",
            "--backend",
            "mock",
            "--out",
            "x.png",
            "--kernel",
            "300",
        ],
    );
    assert_exit(&o, 2);
}

fn cache_entries(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for shard in std::fs::read_dir(root).unwrap() {
        let shard = shard.unwrap().path();
        if shard.is_dir() {
            for e in std::fs::read_dir(&shard).unwrap() {
                let p = e.unwrap().path();
                if p.extension().is_some_and(|x| x == "bin") {
                    out.push(p);
                }
            }
        }
    }
    out.sort();
    out
}

#[test]
fn cache_stats_verify_and_clear() {
    let dir = tempfile::tempdir().unwrap();
    let o = zsfuse(
        dir.path(),
        &["cache", "stats", "--cache-dir", "cache", "--json"],
    );
    assert_exit(&o, 0);
    let stats: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(stats["entries"], 0);
    assert_eq!(stats["bytes"], 0);

    write_labels(dir.path(), &LABELS);
    let o = zsfuse(
        dir.path(),
        &[
            "build",
            "--labels",
            "labels.txt",
            "--mode",
            "labels",
            "--backend",
            "mock",
            "--cache-dir",
            "cache",
            "--out",
            "m.zsf",
        ],
    );
    assert_exit(&o, 0);
    let o = zsfuse(dir.path(), &["cache", "stats", "--cache-dir", "cache"]);
    assert_exit(&o, 0);
    assert!(stdout(&o).starts_with("entries: 3\n"), "{}", stdout(&o));
    assert!(
        stdout(&o).contains("mock-encoder:dim=64:seed=0: 3 entries"),
        "{}",
        stdout(&o)
    );

    let o = zsfuse(dir.path(), &["cache", "verify", "--cache-dir", "cache"]);
    assert_exit(&o, 0);
    let entries = cache_entries(&dir.path().join("cache"));
    assert_eq!(entries.len(), 3);
    let mut bytes = std::fs::read(&entries[1]).unwrap();
    bytes[0] ^= 0x55;
    std::fs::write(&entries[1], bytes).unwrap();
    let o = zsfuse(
        dir.path(),
        &["cache", "verify", "--cache-dir", "cache", "--json"],
    );
    assert_exit(&o, 1);
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["checked"], 3);
    let key = entries[1].file_stem().unwrap().to_str().unwrap();
    assert_eq!(report["corrupt"], json!([key]));

    let o = zsfuse(dir.path(), &["cache", "clear", "--cache-dir", "cache"]);
    assert_exit(&o, 2);
    assert_eq!(cache_entries(&dir.path().join("cache")).len(), 3);
    let o = zsfuse(
        dir.path(),
        &["cache", "clear", "--cache-dir", "cache", "--yes"],
    );
    assert_exit(&o, 0);
    assert!(cache_entries(&dir.path().join("cache")).is_empty());

    let o = zsfuse(dir.path(), &["cache", "stats"]);
    assert_exit(&o, 2);
}

#[test]
fn verbose_reports_setting_sources() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_zsfuse"))
        .current_dir(dir.path())
        .env("ZSFUSE_CACHE_DIR", dir.path().join("env-cache"))
        .env_remove("ZSFUSE_ENCODER_URL")
        .env_remove("ZSFUSE_LLM_URL")
        .env_remove("ZSFUSE_API_KEY")
        .args(["cache", "stats", "--backend", "mock", "--verbose"])
        .output()
        .unwrap();
    assert_exit(&o, 0);
    let err = stderr(&o);
    assert!(err.contains("config: backend = \"mock\" (flag)"), "{err}");
    assert!(err.contains("env-cache\" (env)"), "{err}");
    assert!(err.contains("config: seed = 0 (default)"), "{err}");
    assert!(dir.path().join("env-cache").is_dir());
}
