use delaysync::plant::Tolerances;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to every command's outputs.
#[derive(Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<InputDigest>,
    pub seed: Option<u64>,
    pub tolerances: Tolerances,
    pub parameters: serde_json::Value,
    pub started_at: String,
    pub finished_at: String,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn digest(path: &Path, bytes: &[u8]) -> InputDigest {
    InputDigest { path: path.display().to_string(), sha256: hex::encode(Sha256::digest(bytes)) }
}
