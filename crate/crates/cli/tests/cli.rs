use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use medmerge::nn::Activation;
use medmerge::params::names;
use medmerge::zoo::BlockSpec;
use medmerge::{Checkpoint, LabeledDataset, Manifest, MergeWeights, ModelSpec, ParamTree, Stage, Tensor};

fn medmerge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medmerge"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = medmerge(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = medmerge(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

struct Sources {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

/// Two briefly trained sources and a small mixed target.
fn sources() -> Sources {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    for (family, seed, file) in [
        ("frequency", "1", "a.mmds"),
        ("blob", "2", "b.mmds"),
        ("mixed", "3", "t.mmds"),
    ] {
        ok(&[
            "dataset",
            "gen",
            "--family",
            family,
            "--train",
            "64",
            "--val",
            "16",
            "--test",
            "32",
            "--seed",
            seed,
            "--out",
            s(&root.join(file)),
        ]);
    }
    for (data, out) in [("a.mmds", "src-c"), ("b.mmds", "src-b")] {
        ok(&[
            "train-source",
            "--data",
            s(&root.join(data)),
            "--epochs",
            "2",
            "--lr",
            "5e-3",
            "--batch-size",
            "16",
            "--out",
            s(&root.join(out)),
        ]);
    }
    Sources { _dir: dir, root }
}

fn medmerge_args<'a>(root: &'a Path, out: &'a str, extra: &[&'a str]) -> Vec<String> {
    let (b, c, t, o) = (
        root.join("src-b/model.mmck"),
        root.join("src-c/model.mmck"),
        root.join("t.mmds"),
        root.join(out),
    );
    let base = [
        "medmerge",
        "--pair",
        s(&b),
        s(&c),
        "--data",
        s(&t),
        "--seed",
        "1",
        "--lp-epochs",
        "2",
        "--ft-epochs",
        "1",
        "--lp-lr",
        "1e-2",
        "--ft-lr",
        "1e-4",
        "--batch-size",
        "16",
        "--out",
        s(&o),
    ];
    base.iter().chain(extra).map(|x| x.to_string()).collect()
}

fn run(args: Vec<String>) -> String {
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn medmerge_runs_are_reproducible_and_replayable() {
    let src = sources();
    let root = &src.root;
    run(medmerge_args(root, "r1", &[]));
    run(medmerge_args(root, "r2", &[]));
    for f in [
        "summary.json",
        "record.jsonl",
        "model.mmck",
        "baked.mmck",
        "merge_weights.mmw",
        "heatmap.csv",
    ] {
        assert_eq!(
            fs::read(root.join("r1").join(f)).unwrap(),
            fs::read(root.join("r2").join(f)).unwrap(),
            "{f}"
        );
    }
    ok(&["replay", s(&root.join("r1/config.json")), "--out", s(&root.join("r3"))]);
    assert_eq!(
        fs::read(root.join("r1/summary.json")).unwrap(),
        fs::read(root.join("r3/summary.json")).unwrap()
    );

    let summary = json(root.join("r1/summary.json"));
    assert_eq!(summary["checkpoint"], "model.mmck");
    assert_eq!(summary["stages"][0]["stage"], "merge-lp");
    assert_eq!(summary["stages"][0]["trainable"]["merge_logits"], 56);
    assert!(summary["test"]["macro_f1"].as_f64().is_some());
    let config = json(root.join("r1/config.json"));
    assert_eq!(config["command"]["medmerge"]["run"]["seed"], 1);
    assert_eq!(config["stages"][0]["optimizer"]["lr"], 1e-2);
    let record = fs::read_to_string(root.join("r1/record.jsonl")).unwrap();
    assert_eq!(record.lines().count(), 3 + 2 + 1);

    let eval = ok(&[
        "eval",
        "--checkpoint",
        s(&root.join("r1/model.mmck")),
        "--data",
        s(&root.join("t.mmds")),
    ]);
    let eval: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert_eq!(eval["report"], summary["test"]);

    let csv = ok(&["heatmap", "--weights", s(&root.join("r1/merge_weights.mmw"))]);
    assert_eq!(csv, fs::read_to_string(root.join("r1/heatmap.csv")).unwrap());
}

#[test]
fn ablations_and_baseline() {
    let src = sources();
    let root = &src.root;
    run(medmerge_args(root, "zero", &["--zero-source", "c", "--lp-only"]));
    let summary = json(root.join("zero/summary.json"));
    assert!(summary["mean_w"].as_f64().unwrap() > 0.0);
    assert_eq!(summary["stages"].as_array().unwrap().len(), 1);
    assert!(!root.join("zero/model.mmck").exists());
    assert_eq!(
        fs::read_to_string(root.join("zero/heatmap.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    run(medmerge_args(root, "frozen", &["--ablate-frozen-bn", "--lp-only"]));
    assert_eq!(
        json(root.join("frozen/summary.json"))["stages"][0]["trainable"]["bn"],
        0
    );

    run(medmerge_args(root, "avg", &["--baseline", "simple-average"]));
    let summary = json(root.join("avg/summary.json"));
    assert_eq!(summary["stages"][0]["stage"], "lp");
    assert!(summary.get("merge_weights").is_none());

    let bad = medmerge_args(root, "bad", &["--baseline", "simple-average", "--lp-only"]);
    let err = fails(&bad.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(err.contains("cannot be used with"), "{err}");

    ok(&[
        "lpft",
        "--init",
        s(&root.join("src-b/model.mmck")),
        "--data",
        s(&root.join("t.mmds")),
        "--lp-epochs",
        "1",
        "--ft-epochs",
        "1",
        "--out",
        s(&root.join("lpft")),
    ]);
    ok(&[
        "ft",
        "--init",
        s(&root.join("lpft/model.mmck")),
        "--data",
        s(&root.join("t.mmds")),
        "--epochs",
        "1",
        "--out",
        s(&root.join("ft")),
    ]);
    assert_eq!(json(root.join("ft/summary.json"))["stages"][0]["stage"], "ft");

    let listing = ok(&[
        "dump-activations",
        "--checkpoint",
        s(&root.join("ft/model.mmck")),
        "--data",
        s(&root.join("t.mmds")),
        "--count",
        "3",
        "--layers",
        "block0.conv,logits",
        "--out",
        s(&root.join("act.mmck")),
    ]);
    assert_eq!(
        listing.lines().collect::<Vec<_>>(),
        ["block0.conv [3, 8, 16, 16]", "logits [3, 4]"]
    );
    let (meta, tree) = medmerge::checkpoint::load_tensors(&root.join("act.mmck")).unwrap();
    assert_eq!(meta["kind"], "activations");
    assert_eq!(tree.len(), 2);
    let err = fails(&[
        "dump-activations",
        "--checkpoint",
        s(&root.join("ft/model.mmck")),
        "--data",
        s(&root.join("t.mmds")),
        "--layers",
        "block7.conv",
        "--out",
        s(&root.join("x.mmck")),
    ]);
    assert!(err.contains("block7.conv") && err.contains("block0.bn"), "{err}");
}

#[test]
fn heatmap_of_initial_weights_is_one_half() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("init.mmw");
    MergeWeights::init(&ModelSpec::smallnet(4)).unwrap().save(&w).unwrap();
    let out = dir.path().join("h.csv");
    ok(&["heatmap", "--weights", s(&w), "--spec", "smallnet", "--out", s(&out)]);
    let csv = fs::read_to_string(&out).unwrap();
    let rows: Vec<_> = csv.lines().collect();
    assert_eq!(rows[0], "layer_name,depth_index,kernel_count,mean_w,std_w,min_w,max_w");
    assert_eq!(
        &rows[1..],
        [
            "block0.conv,0,8,0.5,0.0,0.5,0.5",
            "block1.conv,1,16,0.5,0.0,0.5,0.5",
            "block2.conv,2,32,0.5,0.0,0.5,0.5"
        ]
    );

    let spec_path = dir.path().join("two.toml");
    fs::write(&spec_path, ok(&["spec", "smallnet2"])).unwrap();
    let err = fails(&["heatmap", "--weights", s(&w), "--spec", s(&spec_path)]);
    assert!(err.contains("Error"), "{err}");
}

/// One 1×1 conv with unit weight feeding a head that compares brightness.
#[test]
fn eval_of_a_perfect_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ModelSpec {
        name: "fixture".into(),
        input_shape: [1, 2, 2],
        classes: 2,
        blocks: vec![BlockSpec {
            use_bn: false,
            activation: Activation::None,
            ..BlockSpec::conv_bn_relu(1, 1)
        }],
    };
    let mut tree = ParamTree::new();
    tree.insert(names::conv_weight(0), Tensor::<f32>::full(&[1, 1, 1, 1], 1.0));
    tree.insert(
        names::HEAD_WEIGHT,
        Tensor::<f32>::from_f64(&[2, 4], &[-1., -1., -1., -1., 1., 1., 1., 1.]).unwrap(),
    );
    tree.insert(names::HEAD_BIAS, Tensor::<f32>::zeros(&[2]));
    let ck = Checkpoint::new(tree, Manifest::new(&spec, "fixture", 0, Stage::Finetuned));
    ck.save(&dir.path().join("p.mmck")).unwrap();

    let labels = vec![0, 1, 1, 0, 1, 0];
    let pixels: Vec<f64> = labels
        .iter()
        .flat_map(|&l| [if l == 1 { 0.5 } else { -0.5 }; 4])
        .collect();
    let images = Tensor::<f32>::from_f64(&[6, 1, 2, 2], &pixels).unwrap();
    let splits = BTreeMap::from([("test".to_string(), (0..6).collect())]);
    let ds = LabeledDataset::new(
        "fixture",
        vec!["dark".into(), "light".into()],
        images.into(),
        labels,
        splits,
    )
    .unwrap();
    ds.save_packed(&dir.path().join("p.mmds")).unwrap();

    let report_path = dir.path().join("r.json");
    ok(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("p.mmck")),
        "--data",
        s(&dir.path().join("p.mmds")),
        "--out",
        s(&report_path),
    ]);
    let r = json(report_path);
    assert_eq!(r["report"]["macro_f1"], 1.0);
    assert_eq!(r["report"]["accuracy"], 1.0);
    assert_eq!(r["report"]["confusion"], serde_json::json!([[3, 0], [0, 3]]));
}

#[test]
fn errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(&[
        "eval",
        "--checkpoint",
        "/nonexistent/x.mmck",
        "--data",
        "/nonexistent/t.mmds",
    ]);
    assert!(err.contains("/nonexistent"), "{err}");
    let err = fails(&["dataset", "gen", "--family", "mixed", "--bogus", "--out", "x"]);
    assert!(err.contains("--bogus"), "{err}");
    let err = fails(&[
        "dataset",
        "gen",
        "--family",
        "mixed",
        "--class-weights",
        "1,2",
        "--out",
        s(&dir.path().join("x.mmds")),
    ]);
    assert!(err.contains("class weights"), "{err}");
    let bogus = dir.path().join("bogus.json");
    fs::write(&bogus, r#"{"command": {"eval": {}}}"#).unwrap();
    fails(&["replay", s(&bogus), "--out", s(&dir.path().join("o"))]);
}

#[test]
fn dataset_pack_from_raw_arrays() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pixels: Vec<u8> = (0..4 * 4).flat_map(|i| (i as f32 / 8.0).to_le_bytes()).collect();
    fs::write(d.join("images.bin"), pixels).unwrap();
    let labels: Vec<u8> = [0u32, 1, 1, 0].iter().flat_map(|l| l.to_le_bytes()).collect();
    fs::write(d.join("labels.bin"), labels).unwrap();
    fs::write(
        d.join("m.toml"),
        r#"
name = "raw"
class_names = ["x", "y"]
dtype = "f32"
shape = [4, 1, 2, 2]
images = "images.bin"
labels = "labels.bin"

[splits]
train = { start = 0, end = 3 }
test = [3]
"#,
    )
    .unwrap();
    let info = ok(&[
        "dataset",
        "pack",
        "--manifest",
        s(&d.join("m.toml")),
        "--out",
        s(&d.join("raw.mmds")),
    ]);
    assert!(info.contains("train: 3 [1, 2]"), "{info}");
    let ds = LabeledDataset::load_packed(&d.join("raw.mmds")).unwrap();
    assert_eq!(ds.labels, [0, 1, 1, 0]);
    assert_eq!(ok(&["dataset", "info", s(&d.join("raw.mmds"))]), info);
}
