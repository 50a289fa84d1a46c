mod common;

use std::fs;
use std::net::TcpListener;
use std::path::Path;

use common::{call, gatsy, ok, path_str, Fixture};
use gatsy::eval::EvalReport;
use gatsy::graph::{compute_stats, split_dataset};
use gatsy::model::load_checkpoint;
use gatsy::{evaluate_model, Dataset, EmbeddingStore, HeldOut, Recommendation};
use serde_json::{json, Value};

fn train_args<'a>(data: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "train", "--data", data, "--out", out, "--hidden-dim", "16", "--epochs", "3", "--batch-size", "16", "--seed",
        "4",
    ];
    args.extend_from_slice(extra);
    args
}

#[test]
fn synth_stats_train_eval_recommend_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("gatsy.ckpt");
    ok(&gatsy([
        "synth",
        "--out",
        path_str(&data),
        "--blocks",
        "3",
        "--nodes-per-block",
        "20",
        "--feature-dim",
        "8",
        "--seed",
        "2",
    ]));
    let dataset = Dataset::load_dir(&data).unwrap();
    assert_eq!(dataset.graph.node_count(), 60);

    let stats = compute_stats(&dataset.graph).unwrap();
    let printed = ok(&gatsy(["stats", "--data", path_str(&data)]));
    assert!(printed.contains(&format!("connections (undirected)     {}", stats.total_connections)));
    assert!(printed.contains(&format!("connections (directed)       {}", stats.directed_connections)));
    assert!(printed.contains(&format!("{} / {} / {}", stats.q1, stats.q2, stats.q3)));

    ok(&gatsy(train_args(path_str(&data), path_str(&ckpt), &[])));
    let log = fs::read_to_string(tmp.path().join("gatsy.ckpt.log.jsonl")).unwrap();
    let entries: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(entries.len(), 3);
    for (e, entry) in entries.iter().enumerate() {
        assert_eq!(entry["epoch"], e);
        assert!(entry["lr"].is_f64() && entry["mean_loss"].is_f64() && entry["val_ndcg"].is_f64());
    }

    let again = tmp.path().join("again.ckpt");
    ok(&gatsy(train_args(path_str(&data), path_str(&again), &[])));
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());

    let report_path = tmp.path().join("report.json");
    ok(&gatsy([
        "eval",
        "--ckpt",
        path_str(&ckpt),
        "--data",
        path_str(&data),
        "--k",
        "20",
        "--report",
        path_str(&report_path),
    ]));
    let first = fs::read(&report_path).unwrap();
    let report: EvalReport = serde_json::from_slice(&first).unwrap();
    let (params, meta) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(meta.train_seed, 4);
    let split = split_dataset(60, meta.split_seed).unwrap();
    let direct = evaluate_model(&params, &dataset, &split, HeldOut::Test, 20).unwrap();
    assert_eq!(report.ndcg_mean, direct.ranking.mean);
    assert_eq!(report.model, "gatsy");
    ok(&gatsy([
        "eval",
        "--ckpt",
        path_str(&ckpt),
        "--edges",
        path_str(&data.join("edges.tsv")),
        "--ids",
        path_str(&data.join("ids.tsv")),
        "--features",
        path_str(&data.join("features.txt")),
        "--k",
        "20",
        "--report",
        path_str(&report_path),
    ]));
    assert_eq!(fs::read(&report_path).unwrap(), first);

    let store = EmbeddingStore::build(&fs::read(&ckpt).unwrap(), &dataset).unwrap();
    let out = ok(&gatsy([
        "recommend",
        "--ckpt",
        path_str(&ckpt),
        "--data",
        path_str(&data),
        "--query",
        "artist 4 of block 1",
        "--k",
        "5",
        "--json",
    ]));
    let rec: Recommendation = serde_json::from_str(&out).unwrap();
    assert_eq!(rec, store.recommend("syn00024", 5).unwrap());

    let text = ok(&gatsy([
        "recommend",
        "--ckpt",
        path_str(&ckpt),
        "--data",
        path_str(&data),
        "--query",
        "syn00024",
    ]));
    assert_eq!(text.lines().count(), 6);
    assert!(text.contains(&rec.items[0].name));
}

#[tokio::test]
async fn inject_cli_matches_the_service() {
    let fx = Fixture::new();
    let g = &fx.dataset.graph;
    let members = format!("{},{}", g.id(3), g.id(25));
    let out = ok(&gatsy([
        "inject",
        "--ckpt",
        path_str(&fx.ckpt()),
        "--data",
        path_str(&fx.data()),
        "--members",
        &members,
        "--name",
        "Blend",
        "--k",
        "5",
        "--json",
    ]));
    let cli: Recommendation = serde_json::from_str(&out).unwrap();
    let body = json!({"name": "Blend", "members": [3, 25], "k": 5}).to_string();
    let (_, resp) = call(&fx.app(), "POST", "/api/fictitious", None, Some(&body)).await;
    let api: Recommendation = serde_json::from_value(resp["recommendation"].clone()).unwrap();
    assert_eq!(cli, api);
    assert_eq!(cli.items.len(), 5);
}

#[test]
fn random_feature_checkpoints_remember_their_features() {
    let fx = Fixture::new();
    let ckpt = fx.dir.path().join("random.ckpt");
    ok(&gatsy(train_args(
        path_str(&fx.data()),
        path_str(&ckpt),
        &["--model", "fc", "--random-features", "--feature-seed", "77", "--no-validate"],
    )));
    let (_, meta) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(meta.feature_seed, Some(77));
    let out = ok(&gatsy([
        "recommend",
        "--ckpt",
        path_str(&ckpt),
        "--data",
        path_str(&fx.data()),
        "--query",
        "syn00000",
        "--json",
    ]));
    let rec: Recommendation = serde_json::from_str(&out).unwrap();
    let random = fx
        .dataset
        .with_features(gatsy::data::random_features(36, 6, 77))
        .unwrap();
    let store = EmbeddingStore::build(&fs::read(&ckpt).unwrap(), &random).unwrap();
    assert_eq!(rec, store.recommend("syn00000", 5).unwrap());
}

#[test]
fn supervised_training_and_compare() {
    let fx = Fixture::new();
    let ckpt = fx.dir.path().join("sup.ckpt");
    ok(&gatsy(train_args(path_str(&fx.data()), path_str(&ckpt), &["--supervised"])));
    let (params, meta) = load_checkpoint(&ckpt).unwrap();
    assert!(params.config.genre_head);
    assert_eq!(meta.classes, vec!["genre-0", "genre-1", "genre-2"]);
    let log = fs::read_to_string(fx.dir.path().join("sup.ckpt.log.jsonl")).unwrap();
    assert!(log.lines().all(|l| l.contains("val_f1")));

    let report = fx.dir.path().join("compare.json");
    let out = ok(&gatsy([
        "compare",
        "--data",
        path_str(&fx.data()),
        "--models",
        "fc,gatsy",
        "--seeds",
        "2",
        "--k",
        "10",
        "--hidden-dim",
        "8",
        "--epochs",
        "2",
        "--batch-size",
        "16",
        "--no-validate",
        "--report",
        path_str(&report),
    ]));
    let reports: Vec<EvalReport> = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(reports.iter().map(|r| r.model.as_str()).collect::<Vec<_>>(), vec!["fc", "gatsy"]);
    assert!(reports.iter().all(|r| r.seeds == 2 && r.per_seed.len() == 2));
    assert!(out.contains("gatsy"));
}

#[test]
fn label_reproduces_the_golden_fixture() {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/genre");
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("labels.tsv");
    let printed = ok(&gatsy([
        "label",
        "--edges",
        path_str(&fixtures.join("edges.tsv")),
        "--ids",
        path_str(&fixtures.join("ids.tsv")),
        "--cache",
        path_str(&fixtures.join("cache")),
        "--out",
        path_str(&out),
        "--offline",
        "--provider",
        "stub",
    ]));
    assert_eq!(
        fs::read_to_string(&out).unwrap(),
        fs::read_to_string(fixtures.join("golden_labels.tsv")).unwrap()
    );
    assert!(printed.contains("pruned 1"));

    let bad = gatsy([
        "label",
        "--edges",
        path_str(&fixtures.join("edges.tsv")),
        "--ids",
        path_str(&fixtures.join("ids.tsv")),
        "--cache",
        path_str(&fixtures.join("cache")),
        "--out",
        path_str(&out),
        "--offline",
        "--provider",
        "sentence-bert",
    ]);
    assert!(!bad.status.success());
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let fx = Fixture::new();
    let unknown = gatsy([
        "recommend",
        "--ckpt",
        path_str(&fx.ckpt()),
        "--data",
        path_str(&fx.data()),
        "--query",
        "Artist 3 of blok 1",
    ]);
    assert!(!unknown.status.success());
    let stderr = String::from_utf8_lossy(&unknown.stderr);
    assert!(stderr.contains("Artist 3 of block 1 (syn00015)"), "{stderr}");

    let busy = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = busy.local_addr().unwrap().to_string();
    let serve = gatsy([
        "serve",
        "--ckpt",
        path_str(&fx.ckpt()),
        "--data",
        path_str(&fx.data()),
        "--bind",
        &addr,
    ]);
    assert!(!serve.status.success());
    assert!(String::from_utf8_lossy(&serve.stderr).contains("binding"));

    let mismatch = tempfile::tempdir().unwrap();
    common::small_dataset()
        .with_features(gatsy::data::random_features(36, 4, 0))
        .unwrap()
        .save_dir(mismatch.path())
        .unwrap();
    let out = gatsy([
        "recommend",
        "--ckpt",
        path_str(&fx.ckpt()),
        "--data",
        path_str(mismatch.path()),
        "--query",
        "syn00001",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("features"));

    let neither = gatsy(["stats"]);
    assert!(!neither.status.success());
}
