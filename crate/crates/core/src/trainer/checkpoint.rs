//! Checkpoint file: magic, format version, CRC-32 of the remainder, a JSON
//! metadata block, then named tensors as little-endian `f32`.
//!
//! ```text
//! "MPCK" | u32 version | u32 crc32(payload)
//! payload = u64 meta_len | meta JSON | u32 count | count × tensor
//! tensor  = u32 name_len | name | u32 rows | u32 cols | rows·cols × f32
//! ```
//!
//! Optimizer moments are stored as tensors named `adam.m.<param>` and
//! `adam.v.<param>`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, Stage, Trainer, TrainingConfig};
use crate::autograd::Matrix;
use crate::binio::ByteReader;
use crate::codebook::{InitStrategy, PersonaCodebook};
use crate::corpus::Vocab;
use crate::error::{MorpheusError, Result};
use crate::model::MorpheusModel;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MPCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, Serialize, Deserialize)]
struct RngMeta {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CodebookMeta {
    strategy: InitStrategy,
    seed: u64,
    usage_counts: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: TrainingConfig,
    stage: Option<Stage>,
    step: u64,
    optimizer_steps: u64,
    vocab: Vec<String>,
    frozen: Vec<String>,
    rng: RngMeta,
    codebook: Option<CodebookMeta>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || MorpheusError::Format("bad random-state seed".into());
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

fn push_tensor(out: &mut Vec<u8>, name: &str, m: &Matrix) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub(super) fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    let model = &trainer.model;
    let store = &model.store;
    let meta = Metadata {
        config: trainer.config.clone(),
        stage: trainer.stage,
        step: trainer.step,
        optimizer_steps: trainer.optimizer.steps,
        vocab: model.vocab.tokens().to_vec(),
        frozen: store
            .ids()
            .filter(|&id| !store.is_trainable(id))
            .map(|id| store.name(id).to_string())
            .collect(),
        rng: RngMeta {
            seed: hex(&trainer.rng.get_seed()),
            stream: trainer.rng.get_stream(),
            word_pos: trainer.rng.get_word_pos().to_string(),
        },
        codebook: model.codebook().map(|cb| CodebookMeta {
            strategy: cb.strategy,
            seed: cb.seed,
            usage_counts: cb.usage_counts().to_vec(),
        }),
    };
    let meta_json = serde_json::to_vec(&meta).expect("metadata serializes");

    let mut tensors: Vec<(String, &Matrix)> = store
        .ids()
        .map(|id| (store.name(id).to_string(), store.get(id)))
        .collect();
    for id in store.ids() {
        if let Some((m, v)) = trainer.optimizer.moments(id) {
            tensors.push((format!("adam.m.{}", store.name(id)), m));
            tensors.push((format!("adam.v.{}", store.name(id)), v));
        }
    }

    let mut payload = Vec::new();
    payload.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    payload.extend_from_slice(&meta_json);
    payload.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in &tensors {
        push_tensor(&mut payload, name, m);
    }

    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    fs::write(path, out).map_err(|e| MorpheusError::io(path, e))
}

pub(super) fn load(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| MorpheusError::io(path, e))?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(MorpheusError::Format(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(MorpheusError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let stored = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let payload = &bytes[HEADER_LEN..];
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(MorpheusError::Checksum { stored, computed });
    }

    let mut r = ByteReader::new(payload);
    let meta_len = usize::try_from(r.u64()?)
        .map_err(|_| MorpheusError::Format("metadata length overflows".into()))?;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| MorpheusError::Format(format!("checkpoint metadata: {e}")))?;
    meta.config.validate()?;

    let vocab = Vocab::from_tokens(meta.vocab.iter().cloned());
    let mut model = MorpheusModel::new(
        meta.config.model_config(vocab.len()),
        vocab,
        meta.config.segments,
        meta.config.seed,
    )?;
    let mut seen = vec![false; model.store.len()];
    let mut moments: Vec<(String, Matrix)> = Vec::new();
    let count = r.u32()?;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| MorpheusError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f32()? as f64);
        }
        let m = Matrix::from_shape_vec((rows, cols), data)
            .map_err(|e| MorpheusError::Format(e.to_string()))?;
        if name.starts_with("adam.") {
            moments.push((name, m));
            continue;
        }
        match model.store.find(&name) {
            Some(id) => {
                if model.store.get(id).dim() != m.dim() {
                    return Err(MorpheusError::Format(format!(
                        "tensor {name} has shape {:?}, the configuration implies {:?}",
                        m.dim(),
                        model.store.get(id).dim()
                    )));
                }
                model.store.set(id, m);
                seen[id.0] = true;
            }
            None => {
                model.store.add(name, m);
            }
        }
    }
    r.finish()?;
    if let Some(i) = seen.iter().position(|&s| !s) {
        return Err(MorpheusError::MissingComponent(format!(
            "tensor {}",
            model.store.name(crate::autograd::ParamId(i))
        )));
    }
    for name in &meta.frozen {
        let id = model
            .store
            .find(name)
            .ok_or_else(|| MorpheusError::Format(format!("frozen tensor {name} is absent")))?;
        model.store.set_trainable(id, false);
    }

    let codebook = match &meta.codebook {
        Some(cm) => {
            let id = model
                .store
                .find(crate::model::CODEBOOK_PARAM)
                .ok_or_else(|| MorpheusError::MissingComponent("codebook tensor".into()))?;
            let mut cb = PersonaCodebook::from_vectors(model.store.get(id).clone(), cm.strategy, cm.seed)?;
            cb.set_usage_counts(cm.usage_counts.clone())?;
            Some(cb)
        }
        None => None,
    };
    model.attach_from_store(codebook)?;

    let mut optimizer = Adam::new(meta.config.learning_rate, meta.config.warmup_steps);
    optimizer.steps = meta.optimizer_steps;
    let mut pending: std::collections::BTreeMap<String, (Option<Matrix>, Option<Matrix>)> = Default::default();
    for (name, m) in moments {
        let (kind, param) = name["adam.".len()..]
            .split_once('.')
            .ok_or_else(|| MorpheusError::Format(format!("bad optimizer tensor {name}")))?;
        let entry = pending.entry(param.to_string()).or_default();
        match kind {
            "m" => entry.0 = Some(m),
            "v" => entry.1 = Some(m),
            _ => return Err(MorpheusError::Format(format!("bad optimizer tensor {name}"))),
        }
    }
    for (param, pair) in pending {
        let id = model
            .store
            .find(&param)
            .ok_or_else(|| MorpheusError::Format(format!("optimizer state for unknown tensor {param}")))?;
        match pair {
            (Some(m), Some(v)) => optimizer.set_moments(id, m, v),
            _ => {
                return Err(MorpheusError::Format(format!(
                    "incomplete optimizer state for {param}"
                )))
            }
        }
    }

    let mut rng = ChaCha8Rng::from_seed(unhex(&meta.rng.seed)?);
    rng.set_stream(meta.rng.stream);
    rng.set_word_pos(
        meta.rng
            .word_pos
            .parse()
            .map_err(|_| MorpheusError::Format("bad random-state position".into()))?,
    );

    Ok(Trainer {
        model,
        config: meta.config,
        optimizer,
        rng,
        stage: meta.stage,
        step: meta.step,
        log: None,
    })
}
