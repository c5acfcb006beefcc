//! Record/replay fixture store.
//!
//! One JSON file per request key under the fixtures directory. The key is the
//! SHA-256 of the full request (model, system instruction, user content and
//! generation parameters); the stored response carries its own checksum.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{Backend, CompletionRequest, CompletionResponse, GatewayError};

pub fn fixture_key(req: &CompletionRequest) -> String {
    // struct field order is fixed, so this serialization is stable
    let material = serde_json::to_string(req).expect("request serializes");
    hex::encode(Sha256::digest(material.as_bytes()))
}

fn checksum(response: &Value) -> String {
    hex::encode(Sha256::digest(response.to_string().as_bytes()))
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureFile {
    key: String,
    request: CompletionRequest,
    response: Value,
    checksum: String,
}

#[derive(Debug, Clone)]
pub struct FixtureStore {
    dir: PathBuf,
}

impl FixtureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn contains(&self, req: &CompletionRequest) -> bool {
        self.path_for(&fixture_key(req)).exists()
    }

    pub fn record(&self, req: &CompletionRequest, resp: &CompletionResponse) -> Result<String, GatewayError> {
        let key = fixture_key(req);
        let response = serde_json::to_value(resp).map_err(|e| GatewayError::Io(e.to_string()))?;
        let file = FixtureFile {
            key: key.clone(),
            request: req.clone(),
            checksum: checksum(&response),
            response,
        };
        std::fs::create_dir_all(&self.dir).map_err(|e| GatewayError::Io(e.to_string()))?;
        let path = self.path_for(&key);
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(&file).map_err(|e| GatewayError::Io(e.to_string()))?;
        std::fs::write(&tmp, text).map_err(|e| GatewayError::Io(e.to_string()))?;
        std::fs::rename(&tmp, &path).map_err(|e| GatewayError::Io(e.to_string()))?;
        Ok(key)
    }

    pub fn replay(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let key = fixture_key(req);
        let path = self.path_for(&key);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(GatewayError::MissingFixture { key }),
            Err(e) => return Err(GatewayError::Io(e.to_string())),
        };
        let corrupt = |reason: String| GatewayError::FixtureCorrupt {
            path: path.clone(),
            reason,
        };
        let file: FixtureFile = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
        if file.key != key {
            return Err(corrupt(format!("stored key {} does not match", file.key)));
        }
        if checksum(&file.response) != file.checksum {
            return Err(corrupt("checksum mismatch".into()));
        }
        serde_json::from_value(file.response).map_err(|e| corrupt(e.to_string()))
    }
}

/// Serves responses from a fixture store only; never touches the network.
pub struct ReplayBackend {
    id: String,
    store: FixtureStore,
}

impl ReplayBackend {
    pub fn new(store: FixtureStore) -> Self {
        ReplayBackend {
            id: format!("replay:{}", store.dir().display()),
            store,
        }
    }
}

#[async_trait]
impl Backend for ReplayBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        self.store.replay(req)
    }
}

/// Forwards to an inner backend and records every successful response.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    store: FixtureStore,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn Backend>, store: FixtureStore) -> Self {
        RecordingBackend { inner, store }
    }
}

#[async_trait]
impl Backend for RecordingBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    async fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let resp = self.inner.complete(req).await?;
        self.store.record(req, &resp)?;
        Ok(resp)
    }
}
