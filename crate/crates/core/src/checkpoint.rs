//! Binary checkpoint and latent-blob files.
//!
//! Layout: a magic line, a `header <n>` line giving the byte length of a TOML
//! header, the header itself, then the raw blobs back to back as
//! little-endian `f32`. The header lists each blob's name, shape, element
//! count and a checksum (first 8 bytes of its SHA-256, hex).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inn::{ModelConfig, RescaleModel};
use crate::tensor::{DType, Shape, Tensor};
use crate::trainer::{AdamState, RngState, TrainConfig};

const MAGIC: &str = "rescale-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Model,
    Latent,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BlobMeta {
    name: String,
    shape: [usize; 4],
    len: usize,
    checksum: String,
}

/// TOML cannot hold `u64` above `i64::MAX` or any `u128`, so RNG positions
/// travel as decimal strings.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RngHeader {
    seed: String,
    data_word_pos: String,
    latent_word_pos: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: Kind,
    dtype: DType,
    #[serde(default)]
    iteration: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    adam_step: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rng: Option<RngHeader>,
    blob: Vec<BlobMeta>,
}

fn checksum(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn blob_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn encode(header: &mut Header, blobs: &[(&str, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    header.blob = blobs
        .iter()
        .map(|(name, t)| {
            let bytes = blob_bytes(t);
            let meta = BlobMeta {
                name: name.to_string(),
                shape: t.shape().dims(),
                len: t.len(),
                checksum: checksum(&bytes),
            };
            payload.extend_from_slice(&bytes);
            meta
        })
        .collect();
    let text = toml::to_string(header).map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
    let mut out = format!("{MAGIC}\nheader {}\n", text.len()).into_bytes();
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("truncated preamble".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::Checkpoint("preamble is not text".into()))
}

fn decode(bytes: &[u8]) -> Result<(Header, Vec<(String, Tensor<f32>)>)> {
    let mut pos = 0;
    if take_line(bytes, &mut pos)? != MAGIC {
        return Err(Error::Checkpoint("not a rescale checkpoint (bad magic line)".into()));
    }
    let len_line = take_line(bytes, &mut pos)?;
    let header_len: usize = len_line
        .strip_prefix("header ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("malformed header length line {len_line:?}")))?;
    let header_bytes = bytes
        .get(pos..pos + header_len)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    pos += header_len;
    let text = std::str::from_utf8(header_bytes).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    // Peek at the version before full decoding so a future layout gets a
    // clear message instead of a field error.
    let version = toml::from_str::<toml::Table>(text)
        .map_err(|e| Error::Checkpoint(format!("header parse: {e}")))?
        .get("version")
        .and_then(|v| v.as_integer());
    if version != Some(FORMAT_VERSION as i64) {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version:?}, expected {FORMAT_VERSION}"
        )));
    }
    let header: Header = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("header parse: {e}")))?;
    if header.dtype != DType::F32 {
        return Err(Error::Checkpoint(format!("unsupported blob dtype {:?}", header.dtype)));
    }

    let expected: usize = header.blob.iter().map(|b| b.len * 4).sum();
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::Checkpoint(format!(
            "truncated blob data: header lists {} blobs totalling {expected} bytes, file has {}",
            header.blob.len(),
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the {} listed blobs",
            payload.len() - expected,
            header.blob.len()
        )));
    }
    let mut blobs = Vec::with_capacity(header.blob.len());
    let mut off = 0;
    for meta in &header.blob {
        let raw = &payload[off..off + meta.len * 4];
        off += meta.len * 4;
        if checksum(raw) != meta.checksum {
            return Err(Error::Checkpoint(format!("checksum mismatch in blob {:?}", meta.name)));
        }
        let shape = Shape::from_dims(meta.shape)?;
        if shape.numel() != meta.len {
            return Err(Error::Checkpoint(format!(
                "blob {:?}: shape {shape} disagrees with length {}",
                meta.name, meta.len
            )));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blobs.push((meta.name.clone(), Tensor::new(shape, data)?));
    }
    Ok((header, blobs))
}

/// Model weights plus, for training checkpoints, everything needed to resume
/// bit-exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub iteration: usize,
    pub train: Option<TrainConfig>,
    pub rng: Option<RngState>,
    /// Parameters in registration order.
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn from_model(model: &RescaleModel<f32>) -> Checkpoint {
        Checkpoint {
            model: *model.config(),
            iteration: 0,
            train: None,
            rng: None,
            params: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            optimizer: None,
        }
    }

    /// Rebuilds the model described by this checkpoint.
    pub fn to_model(&self) -> Result<RescaleModel<f32>> {
        // Every weight is overwritten below, so the init stream is irrelevant.
        let mut model = RescaleModel::new(self.model, &mut ChaCha8Rng::seed_from_u64(0))?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copies the weights into an existing model, which must have exactly the
    /// stored architecture.
    pub fn load_into(&self, model: &mut RescaleModel<f32>) -> Result<()> {
        if *model.config() != self.model {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint has {:?}, model has {:?}",
                self.model,
                model.config()
            )));
        }
        if model.params().len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.params().len()
            )));
        }
        for (p, (name, value)) in model.params_mut().iter_mut().zip(&self.params) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} {} does not match model parameter {:?} {}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Header {
            version: FORMAT_VERSION,
            kind: Kind::Model,
            dtype: DType::F32,
            iteration: self.iteration,
            adam_step: self.optimizer.as_ref().map(|o| o.step),
            model: Some(self.model),
            train: self.train.clone(),
            rng: self.rng.map(|r| RngHeader {
                seed: r.seed.to_string(),
                data_word_pos: r.data_word_pos.to_string(),
                latent_word_pos: r.latent_word_pos.to_string(),
            }),
            blob: Vec::new(),
        };
        let mut names: Vec<String> = self.params.iter().map(|(n, _)| n.clone()).collect();
        let mut tensors: Vec<&Tensor<f32>> = self.params.iter().map(|(_, t)| t).collect();
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != self.params.len() || opt.v.len() != self.params.len() {
                return Err(Error::Checkpoint(
                    "optimizer state does not cover every parameter".into(),
                ));
            }
            for (prefix, moments) in [("adam.m.", &opt.m), ("adam.v.", &opt.v)] {
                for ((name, _), t) in self.params.iter().zip(moments) {
                    names.push(format!("{prefix}{name}"));
                    tensors.push(t);
                }
            }
        }
        let blobs: Vec<(&str, &Tensor<f32>)> = names.iter().map(String::as_str).zip(tensors).collect();
        encode(&mut header, &blobs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let (header, mut blobs) = decode(bytes)?;
        if header.kind != Kind::Model {
            return Err(Error::Checkpoint(
                "file holds a latent blob, not a model checkpoint".into(),
            ));
        }
        let model = header
            .model
            .ok_or_else(|| Error::Checkpoint("header has no [model] table".into()))?;
        let rng = header
            .rng
            .map(|r| -> Result<RngState> {
                let bad = |what: &str| Error::Checkpoint(format!("malformed rng {what}"));
                Ok(RngState {
                    seed: r.seed.parse().map_err(|_| bad("seed"))?,
                    data_word_pos: r.data_word_pos.parse().map_err(|_| bad("data_word_pos"))?,
                    latent_word_pos: r.latent_word_pos.parse().map_err(|_| bad("latent_word_pos"))?,
                })
            })
            .transpose()?;
        let optimizer = match header.adam_step {
            None => None,
            Some(step) => {
                if blobs.len() % 3 != 0 {
                    return Err(Error::Checkpoint(format!(
                        "{} blobs cannot split into parameters and two moment sets",
                        blobs.len()
                    )));
                }
                let n = blobs.len() / 3;
                let v: Vec<(String, Tensor<f32>)> = blobs.split_off(2 * n);
                let m: Vec<(String, Tensor<f32>)> = blobs.split_off(n);
                for (i, (name, t)) in blobs.iter().enumerate() {
                    for (prefix, set) in [("adam.m.", &m), ("adam.v.", &v)] {
                        if set[i].0 != format!("{prefix}{name}") || set[i].1.shape() != t.shape() {
                            return Err(Error::Checkpoint(format!(
                                "moment blob {:?} does not match parameter {name:?}",
                                set[i].0
                            )));
                        }
                    }
                }
                Some(AdamState {
                    step,
                    m: m.into_iter().map(|b| b.1).collect(),
                    v: v.into_iter().map(|b| b.1).collect(),
                })
            }
        };
        Ok(Checkpoint {
            model,
            iteration: header.iteration,
            train: header.train,
            rng,
            params: blobs,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Contents of a latent blob file: the upscaling latent `z` and, when the
/// LR image was kept unquantized, the exact LR in display units.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFile {
    pub z: Tensor<f32>,
    pub exact_lr: Option<Tensor<f32>>,
}

impl LatentFile {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut header = Header {
            version: FORMAT_VERSION,
            kind: Kind::Latent,
            dtype: DType::F32,
            iteration: 0,
            adam_step: None,
            model: None,
            train: None,
            rng: None,
            blob: Vec::new(),
        };
        let mut blobs = vec![("z", &self.z)];
        if let Some(y) = &self.exact_lr {
            blobs.push(("y", y));
        }
        let bytes = encode(&mut header, &blobs)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<LatentFile> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (header, blobs) = decode(&bytes)?;
        let bad = || Error::Checkpoint(format!("{}: not a latent blob file", path.display()));
        if header.kind != Kind::Latent {
            return Err(bad());
        }
        let mut z = None;
        let mut exact_lr = None;
        for (name, t) in blobs {
            match name.as_str() {
                "z" if z.is_none() => z = Some(t),
                "y" if exact_lr.is_none() => exact_lr = Some(t),
                _ => return Err(bad()),
            }
        }
        Ok(LatentFile {
            z: z.ok_or_else(bad)?,
            exact_lr,
        })
    }
}

/// Writes a lone upscaling latent `z` in the checkpoint format.
pub fn save_latent(path: impl AsRef<Path>, z: &Tensor<f32>) -> Result<()> {
    LatentFile {
        z: z.clone(),
        exact_lr: None,
    }
    .save(path)
}

/// Reads the `z` of a latent blob file.
pub fn load_latent(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    LatentFile::load(path).map(|f| f.z)
}
