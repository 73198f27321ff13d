use std::path::Path;
use std::process::{Command, Output};

use ordstab::filterbank::read_feature_manifest;
use ordstab::pipeline::read_table;
use ordstab::{FeatureNetwork, ModelFile, OrdinalModel, Variant};
use tempfile::TempDir;

fn ordstab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ordstab"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).expect("stderr is one JSON object")
}

const EVENTS: &str = "patient_id,event_time,channel,code,value
p1,900,diagnosis,F31,1
p1,950,diagnosis,F32,1
p2,980,diagnosis,F31,1
p3,800,diagnosis,F20,1
p4,990,diagnosis,F32,1
p5,700,diagnosis,F20,1
";

const LABELS: &str = "patient_id,anchor_time,label
p1,1000,3
p2,1000,2
p3,1000,1
p4,1000,2
p5,1000,1
";

fn extract(tmp: &Path) -> std::path::PathBuf {
    std::fs::write(tmp.join("events.csv"), EVENTS).unwrap();
    std::fs::write(tmp.join("labels.csv"), LABELS).unwrap();
    let out = tmp.join("ex");
    let r = ordstab(&[
        "extract",
        "--events",
        s(&tmp.join("events.csv")),
        "--labels",
        s(&tmp.join("labels.csv")),
        "--out",
        s(&out),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    out
}

#[test]
fn extract_then_network_links_related_codes() {
    let tmp = TempDir::new().unwrap();
    let ex = extract(tmp.path());
    for f in ["dataset.csv", "features.csv", "normalizer.json", "manifest.json"] {
        assert!(ex.join(f).exists(), "missing {f}");
    }
    let net_dir = tmp.path().join("net");
    let r = ordstab(&["network", "--features", s(&ex.join("features.csv")), "--out", s(&net_dir)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    let features = read_feature_manifest(&ex.join("features.csv")).unwrap();
    let net = FeatureNetwork::read_edges(&features, &net_dir.join("edges.csv")).unwrap();
    let id = |j: usize| features[j].id.as_str();
    // F31 and F32 share the F3 branch in every period; F20 stays apart from both
    let cross: Vec<(&str, &str)> = net
        .edges()
        .iter()
        .map(|e| (id(e.a), id(e.b)))
        .filter(|(a, b)| a.split('@').next() != b.split('@').next())
        .collect();
    assert!(!cross.is_empty());
    for (a, b) in &cross {
        assert!(!a.contains("F20") && !b.contains("F20"), "{a} -- {b}");
        assert_eq!(a.split('@').nth(1), b.split('@').nth(1));
    }

    // the edge list survives a write/read cycle
    let again = tmp.path().join("again.csv");
    net.write_edges(&features, &again).unwrap();
    assert_eq!(FeatureNetwork::read_edges(&features, &again).unwrap(), net);
}

#[test]
fn empty_feature_manifest_gives_empty_network() {
    let tmp = TempDir::new().unwrap();
    let manifest = tmp.path().join("features.csv");
    std::fs::write(&manifest, "feature_id,channel,code,sigma,delay,statistic\n").unwrap();
    let out = tmp.path().join("net");
    let r = ordstab(&["network", "--features", s(&manifest), "--out", s(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let edges = std::fs::read_to_string(out.join("edges.csv")).unwrap();
    assert_eq!(edges.lines().count(), 1, "header only: {edges:?}");
}

#[test]
fn empty_label_file_fails_without_outputs() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(tmp.path().join("events.csv"), EVENTS).unwrap();
    std::fs::write(tmp.path().join("labels.csv"), "patient_id,anchor_time,label\n").unwrap();
    let out = tmp.path().join("ex");
    let r = ordstab(&[
        "extract",
        "--events",
        s(&tmp.path().join("events.csv")),
        "--labels",
        s(&tmp.path().join("labels.csv")),
        "--out",
        s(&out),
    ]);
    assert!(!r.status.success());
    assert!(error_json(&r)["message"].is_string());
    assert!(!out.exists());
}

#[test]
fn errors_are_categorized_on_stderr() {
    let r = ordstab(&["train", "--data", "/nonexistent", "--out", "/tmp/x", "--alpha", "abc"]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(error_json(&r)["error"], "argument");

    let tmp = TempDir::new().unwrap();
    let r = ordstab(&[
        "network",
        "--features",
        s(&tmp.path().join("missing.csv")),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert_eq!(error_json(&r)["error"], "io");

    let bad = tmp.path().join("bad.csv");
    std::fs::write(&bad, "a,b\n1,2\n").unwrap();
    let r = ordstab(&["network", "--features", s(&bad), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(r.status.code(), Some(1));
    assert_eq!(error_json(&r)["error"], "format");
}

fn write_model(path: &Path, model: &OrdinalModel<f64>, ids: &[String]) {
    let file = ModelFile::from_model(model, ids, "test").unwrap();
    std::fs::write(path, serde_json::to_string_pretty(&file).unwrap()).unwrap();
}

#[test]
fn predict_matches_library_probabilities() {
    let tmp = TempDir::new().unwrap();
    let ex = extract(tmp.path());
    let table = read_table(&ex.join("dataset.csv"), None).unwrap();
    let ids = table.feature_ids.clone();
    let d = ids.len();
    let w: Vec<f64> = (0..d).map(|j| if j % 2 == 0 { 1.5 } else { -0.7 }).collect();
    let cases = [
        OrdinalModel::new(Variant::Cumulative, vec![w.clone()], vec![-0.2, 0.9]).unwrap(),
        OrdinalModel::new(Variant::StagewiseMulti, vec![w.clone(), w.iter().map(|v| -v).collect()], vec![0.3, -0.4]).unwrap(),
        OrdinalModel::new(Variant::Cumulative, vec![w.clone()], vec![0.1]).unwrap(),
    ];
    for (k, model) in cases.iter().enumerate() {
        let mpath = tmp.path().join(format!("model{k}.json"));
        write_model(&mpath, model, &ids);
        let out = tmp.path().join(format!("pred{k}"));
        let r = ordstab(&["predict", "--model", s(&mpath), "--data", s(&ex), "--out", s(&out)]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        let mut rdr = csv::Reader::from_path(out.join("predictions.csv")).unwrap();
        let header = rdr.headers().unwrap().clone();
        assert_eq!(header.len(), 3 + model.n_classes());
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.unwrap();
            let x = table.values.row(i).to_vec();
            let p = model.probs(&x).unwrap();
            for (l, pl) in p.iter().enumerate() {
                let got: f64 = rec[2 + l].parse().unwrap();
                assert!((got - pl).abs() <= 1e-12);
            }
            let predicted: usize = rec[2 + p.len()].parse().unwrap();
            assert_eq!(predicted, model.predict_class(&x).unwrap());
        }
    }
}

#[test]
fn predict_rejects_missing_weighted_feature() {
    let tmp = TempDir::new().unwrap();
    let ex = extract(tmp.path());
    let table = read_table(&ex.join("dataset.csv"), None).unwrap();
    let mut ids = table.feature_ids.clone();
    ids.push("diagnosis:Z99@u3+0".into());
    let mut w = vec![0.0; ids.len()];
    *w.last_mut().unwrap() = 1.0;
    let model = OrdinalModel::new(Variant::Cumulative, vec![w], vec![0.0, 1.0]).unwrap();
    let mpath = tmp.path().join("model.json");
    write_model(&mpath, &model, &ids);
    let out = tmp.path().join("pred");
    let r = ordstab(&["predict", "--model", s(&mpath), "--data", s(&ex), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(error_json(&r)["error"], "argument");
}
