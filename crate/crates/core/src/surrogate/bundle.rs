use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PipelineConfig, Surrogate, SurrogateWeights};
use crate::error::{input_err, Result};
use crate::numerics::DenseNet;

pub const BUNDLE_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

/// Index of a frozen-weight bundle directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub frozen: bool,
    pub config: PipelineConfig,
    pub encoder: String,
    pub blocks: Vec<String>,
    pub head: String,
    pub readout: String,
    /// Hex SHA-256 over every weight file, in manifest order.
    pub content_hash: String,
}

impl BundleManifest {
    fn files(&self) -> impl Iterator<Item = &String> {
        std::iter::once(&self.encoder)
            .chain(&self.blocks)
            .chain([&self.head, &self.readout])
    }
}

fn hash_blobs<'a>(blobs: impl Iterator<Item = (&'a str, &'a str)>) -> String {
    let mut h = Sha256::new();
    for (name, body) in blobs {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((body.len() as u64).to_le_bytes());
        h.update(body.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes one JSON file per network plus `manifest.json` into `dir`.
pub fn save_bundle(model: &Surrogate, dir: &Path) -> Result<BundleManifest> {
    fs::create_dir_all(dir)?;
    let w = model.weights();
    let mut named: Vec<(String, String)> = vec![("encoder.json".into(), w.encoder.to_json()?)];
    for (l, b) in w.blocks.iter().enumerate() {
        named.push((format!("block_{l}.json"), b.to_json()?));
    }
    named.push(("head.json".into(), w.head.to_json()?));
    named.push(("readout.json".into(), w.readout.to_json()?));
    for (name, body) in &named {
        fs::write(dir.join(name), body)?;
    }
    let depth = w.blocks.len();
    let manifest = BundleManifest {
        format_version: BUNDLE_FORMAT_VERSION,
        frozen: true,
        config: model.config().clone(),
        encoder: named[0].0.clone(),
        blocks: named[1..=depth].iter().map(|(n, _)| n.clone()).collect(),
        head: named[depth + 1].0.clone(),
        readout: named[depth + 2].0.clone(),
        content_hash: hash_blobs(named.iter().map(|(n, b)| (n.as_str(), b.as_str()))),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a bundle back, refusing it if any weight file changed.
pub fn load_bundle(dir: &Path) -> Result<(Surrogate, BundleManifest)> {
    let manifest: BundleManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.format_version != BUNDLE_FORMAT_VERSION {
        return input_err(format!("unsupported bundle format_version {}", manifest.format_version));
    }
    if !manifest.frozen {
        return input_err("bundle is not marked frozen");
    }
    let mut bodies = Vec::new();
    for name in manifest.files() {
        if name.contains('/') || name.contains('\\') || name.contains("..") {
            return input_err(format!("weight file name {name:?} escapes the bundle"));
        }
        bodies.push((name.clone(), fs::read_to_string(dir.join(name))?));
    }
    let hash = hash_blobs(bodies.iter().map(|(n, b)| (n.as_str(), b.as_str())));
    if hash != manifest.content_hash {
        return input_err("bundle content hash mismatch");
    }
    let nets = bodies
        .iter()
        .map(|(_, b)| DenseNet::from_json(b))
        .collect::<Result<Vec<_>>>()?;
    let depth = manifest.blocks.len();
    let weights = SurrogateWeights {
        encoder: nets[0].clone(),
        blocks: nets[1..=depth].to_vec(),
        head: nets[depth + 1].clone(),
        readout: nets[depth + 2].clone(),
    };
    let model = Surrogate::new(manifest.config.clone(), weights)?;
    Ok((model, manifest))
}
