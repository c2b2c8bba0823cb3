//! Checkpoint directories: `manifest.json` plus one little-endian `f32`
//! blob per parameter, named `<parameter>.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::editor::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Float;
use crate::text::Vocabulary;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub crate_version: String,
    pub config: ModelConfig,
    pub vocabulary: BTreeMap<String, usize>,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance (training step, pretrained source, ...).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Parameter names are dotted lowercase identifiers, which also keeps blob
/// files inside the checkpoint directory.
pub fn valid_tensor_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 128
        && !name.starts_with('.')
        && !name.contains("..")
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'.' || b == b'_')
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(text).map_err(|e| Error::json("checkpoint manifest", e))?;
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.config.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tensors {
            if !valid_tensor_name(&t.name) {
                return Err(Error::Checkpoint(format!("invalid tensor name {:?}", t.name)));
            }
            if t.file != format!("{}.bin", t.name) {
                return Err(Error::Checkpoint(format!("tensor {} must be stored in {}.bin", t.name, t.name)));
            }
            if !seen.insert(&t.name) {
                return Err(Error::Checkpoint(format!("tensor {} listed twice", t.name)));
            }
            element_count(&t.shape)?;
        }
        Ok(())
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= (1 << 28))
        .ok_or_else(|| Error::Checkpoint(format!("tensor shape {shape:?} is too large")))
}

pub fn encode_tensor<T: Float>(a: &ArrayD<T>) -> Vec<u8> {
    a.iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect()
}

/// Decodes a raw little-endian `f32` blob into an array of `shape`.
pub fn decode_tensor(bytes: &[u8], shape: &[usize]) -> Result<ArrayD<f32>> {
    let n = element_count(shape)?;
    if n.checked_mul(4) != Some(bytes.len()) {
        return Err(Error::Checkpoint(format!(
            "blob of {} bytes does not hold a tensor of shape {shape:?}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(shape), data).expect("length checked"))
}

/// Writes `model` into `dir`, creating it if needed. Existing blobs of the
/// same names are overwritten.
pub fn save<T: Float>(model: &Model<T>, dir: &Path, metadata: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (name, value) in model.params.iter() {
        let file = format!("{name}.bin");
        let path = dir.join(&file);
        fs::write(&path, encode_tensor(value)).map_err(|e| Error::io(&path, e))?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            file,
        });
    }
    let vocabulary = serde_json::from_str(&model.vocab.to_json()).expect("vocabulary json is a map");
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config: model.config.clone(),
        vocabulary,
        tensors,
        metadata,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("checkpoint manifest", e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::parse(&text)
}

pub fn load<T: Float>(dir: &Path) -> Result<Model<T>> {
    let manifest = read_manifest(dir)?;
    let vocab_json = serde_json::to_string(&manifest.vocabulary).map_err(|e| Error::json("vocabulary", e))?;
    let vocab = Vocabulary::from_json(&vocab_json)?;
    let mut params = ParamStore::new();
    for t in &manifest.tensors {
        let path = dir.join(&t.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let value = decode_tensor(&bytes, &t.shape).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        params.insert(t.name.clone(), value.mapv(|v| T::of(v as f64)));
    }
    let model = Model {
        config: manifest.config,
        vocab,
        params,
    };
    check_layout(&model)?;
    Ok(model)
}

/// Every parameter expected by the configuration must be present with the
/// expected shape, and nothing else.
fn check_layout<T: Float>(model: &Model<T>) -> Result<()> {
    let reference = Model::<f32>::new(model.config.clone(), 0)?;
    if reference.vocab.len() != model.vocab.len() {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} tokens, the model expects {}",
            model.vocab.len(),
            reference.vocab.len()
        )));
    }
    for (name, value) in reference.params.iter() {
        match model.params.get(name) {
            None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            Some(v) if v.shape() != value.shape() => {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    v.shape(),
                    value.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = model.params.names().find(|n| reference.params.get(n).is_none()) {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(())
}
