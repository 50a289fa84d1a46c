#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use gatsy::data::{generate_synthetic, SyntheticConfig};
use gatsy::model::{build_model, save_checkpoint, CheckpointMeta};
use gatsy::{Dataset, ModelConfig};
use gatsy_cli::service::{router, AppState};
use tower::ServiceExt;

pub fn small_dataset() -> Dataset {
    generate_synthetic(&SyntheticConfig {
        blocks: 3,
        nodes_per_block: 12,
        p_in: 0.3,
        p_out: 0.02,
        feature_dim: 6,
        seed: 11,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

/// A dataset directory and an (untrained) checkpoint for it.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub dataset: Dataset,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let dataset = small_dataset();
        dataset.save_dir(&dir.path().join("data")).unwrap();
        let cfg = ModelConfig {
            hidden_dim: 16,
            ..ModelConfig::gatsy(6)
        };
        let params = build_model(&cfg, 3).unwrap();
        save_checkpoint(&dir.path().join("model.ckpt"), &params, &CheckpointMeta::default()).unwrap();
        Fixture { dir, dataset }
    }

    pub fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    pub fn ckpt(&self) -> PathBuf {
        self.dir.path().join("model.ckpt")
    }

    /// The service state exactly as `gatsy serve` would build it.
    pub fn app(&self) -> Router {
        let bytes = std::fs::read(self.ckpt()).unwrap();
        let (params, _) = gatsy::model::decode_checkpoint(&bytes).unwrap();
        let dataset = Dataset::load_dir(&self.data()).unwrap();
        router(Arc::new(AppState::new(&bytes, params, dataset).unwrap()))
    }
}

pub async fn call(app: &Router, method: &str, uri: &str, session: Option<&str>, body: Option<&str>) -> (StatusCode, serde_json::Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(s) = session {
        req = req.header("x-session", s);
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let json = serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null);
    (status, json)
}

pub fn gatsy<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_gatsy"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

pub fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}
