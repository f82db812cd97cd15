//! Checkpoint serialization: model identity, training config echo and
//! all parameters in one self-describing binary file.
//!
//! Layout: 8-byte magic, length-prefixed JSON metadata, then one record
//! per parameter (name, optimizer group, tensor blob) in registration
//! order. Save → load → save is byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::tensor_io::{tensor_bytes, tensor_from_bytes};
use crate::error::{EngineError, Result};
use crate::model::{ChannelConfig, Model, StreamChannelConfig, TextChannelConfig};
use crate::params::{ParamGroup, ParamSet};
use crate::text::Vocab;
use crate::train::TrainConfig;

pub const CKPT_MAGIC: &[u8; 8] = b"STQACKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub engine_version: String,
    pub seed: u64,
    pub model: ChannelConfig,
    pub train: Option<TrainConfig>,
}

fn group_byte(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Extractor => 0,
        ParamGroup::Head => 1,
    }
}

fn group_from_byte(b: u8) -> Result<ParamGroup> {
    match b {
        0 => Ok(ParamGroup::Extractor),
        1 => Ok(ParamGroup::Head),
        other => Err(EngineError::Validation(format!(
            "checkpoint: unknown parameter group tag {other}"
        ))),
    }
}

/// Serialize a model (plus provenance) to checkpoint bytes.
pub fn checkpoint_bytes(model: &Model, seed: u64, train: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        model: model.config().clone(),
        train: train.cloned(),
    };
    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| EngineError::Validation(format!("serializing checkpoint meta: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for e in model.params().iter() {
        let name = e.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(group_byte(e.group));
        let blob = tensor_bytes(&e.tensor);
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(EngineError::Validation(format!(
                "{}: truncated reading {what}",
                self.origin
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Parse checkpoint bytes into metadata and a reconstructed model.
pub fn checkpoint_from_bytes(bytes: &[u8], origin: &str) -> Result<(Model, CheckpointMeta)> {
    let mut r = Reader {
        bytes,
        at: 0,
        origin,
    };
    if r.take(8, "magic")? != CKPT_MAGIC {
        return Err(EngineError::Validation(format!(
            "{origin}: not a checkpoint file"
        )));
    }
    let meta_len = r.u32("meta length")?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| EngineError::Validation(format!("{origin}: bad metadata: {e}")))?;
    let count = r.u32("parameter count")?;
    let mut params = ParamSet::new();
    for i in 0..count {
        let name_len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| {
                EngineError::Validation(format!("{origin}: parameter {i} name is not UTF-8"))
            })?
            .to_string();
        let group = group_from_byte(r.u8("group tag")?)?;
        let blob_len = r.u32("tensor length")?;
        let blob = r.take(blob_len, "tensor payload")?;
        let tensor = tensor_from_bytes(blob, &format!("{origin}:{name}"))?;
        params.register(name, group, tensor)?;
    }
    if r.at != bytes.len() {
        return Err(EngineError::Validation(format!(
            "{origin}: {} trailing bytes after the last parameter",
            bytes.len() - r.at
        )));
    }
    verify_layout(&meta.model, &params)?;
    Ok((Model::from_parts(meta.model.clone(), params), meta))
}

/// Check the restored parameters against the layout the config implies:
/// same names, groups and shapes in the same order.
fn verify_layout(config: &ChannelConfig, params: &ParamSet) -> Result<()> {
    let reference = reference_model(config)?;
    if reference.params().len() != params.len() {
        return Err(EngineError::Validation(format!(
            "checkpoint holds {} parameters, config implies {}",
            params.len(),
            reference.params().len()
        )));
    }
    for (have, want) in params.iter().zip(reference.params().iter()) {
        if have.name != want.name || have.group != want.group {
            return Err(EngineError::Validation(format!(
                "checkpoint parameter {} ({:?}) where config implies {} ({:?})",
                have.name, have.group, want.name, want.group
            )));
        }
        if have.tensor.shape() != want.tensor.shape() {
            return Err(EngineError::Validation(format!(
                "parameter {} has shape {:?}, config implies {:?}",
                have.name,
                have.tensor.shape(),
                want.tensor.shape()
            )));
        }
    }
    Ok(())
}

/// Freshly initialized model with the layout the config describes; used
/// only for structural comparison.
fn reference_model(config: &ChannelConfig) -> Result<Model> {
    let vocab_size = config.vocab_size();
    if vocab_size < 2 {
        return Err(EngineError::Validation(format!(
            "config names a vocabulary of {vocab_size} tokens"
        )));
    }
    let dim = match config {
        ChannelConfig::Text { cfg, .. } => cfg.embed_dim,
        ChannelConfig::Stream { cfg, .. } => cfg.embed_dim,
    };
    let vocab = Vocab::from_tokens((2..vocab_size).map(|i| format!("t{i}")), dim)?;
    match config {
        ChannelConfig::Text { cfg, .. } => {
            Model::init_text(TextChannelConfig { ..cfg.clone() }, &vocab, 0)
        }
        ChannelConfig::Stream { cfg, .. } => {
            Model::init_stream(StreamChannelConfig { ..cfg.clone() }, &vocab, 0)
        }
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    seed: u64,
    train: Option<&TrainConfig>,
) -> Result<()> {
    let bytes = checkpoint_bytes(model, seed, train)?;
    fs::write(path, bytes).map_err(|e| EngineError::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes =
        fs::read(path).map_err(|e| EngineError::io(format!("reading {}", path.display()), e))?;
    checkpoint_from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ExampleInput;
    use crate::scoring::Channel;
    use crate::tape::Tape;
    use crate::video::StreamKind;

    fn text_model() -> (Vocab, Model) {
        let vocab = Vocab::from_tokens(["alpha", "beta", "gamma", "delta"], 6).unwrap();
        let cfg = TextChannelConfig {
            candidates: 3,
            embed_dim: 6,
            hidden: 4,
            score_hidden: 3,
        };
        let model = Model::init_text(cfg, &vocab, 42).unwrap();
        (vocab, model)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (_, model) = text_model();
        let train = TrainConfig::text();
        let bytes = checkpoint_bytes(&model, 7, Some(&train)).unwrap();
        let (back, meta) = checkpoint_from_bytes(&bytes, "mem").unwrap();
        assert_eq!(meta.seed, 7);
        assert_eq!(meta.train.as_ref(), Some(&train));
        assert_eq!(meta.engine_version, env!("CARGO_PKG_VERSION"));
        assert_eq!(&meta.model, model.config());
        let again = checkpoint_bytes(&back, 7, Some(&train)).unwrap();
        assert_eq!(bytes, again);
        for (a, b) in model.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.group, b.group);
            let bits = |t: &crate::tensor::Tensor| {
                t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            };
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
    }

    #[test]
    fn restored_model_forwards_identically() {
        let (vocab, model) = text_model();
        let bytes = checkpoint_bytes(&model, 1, None).unwrap();
        let (back, _) = checkpoint_from_bytes(&bytes, "mem").unwrap();
        let sub = vocab.encode("alpha beta").unwrap();
        let pack = crate::text::QueryPack::new(
            vocab.encode("gamma").unwrap(),
            vec![
                vocab.encode("alpha").unwrap(),
                vocab.encode("beta").unwrap(),
                vocab.encode("delta").unwrap(),
            ],
            0,
        )
        .unwrap();
        let run = |m: &Model| {
            let mut tape = Tape::new();
            let bound = m.params().bind(&mut tape);
            let s = m
                .forward_scores(
                    &mut tape,
                    &bound,
                    ExampleInput {
                        clip: None,
                        subtitle: Some(&sub),
                        pack: &pack,
                    },
                )
                .unwrap();
            tape.value(s).to_vec()
        };
        assert_eq!(run(&model), run(&back));
    }

    #[test]
    fn stream_checkpoint_round_trips() {
        let vocab = Vocab::from_tokens(["a", "b", "c"], 5).unwrap();
        let cfg = StreamChannelConfig {
            candidates: 4,
            kind: StreamKind::Flow,
            stream: crate::video::StreamConfig {
                in_channels: 2,
                spatial: 8,
                stem_channels: 4,
                temporal_kernel: 3,
                blocks: vec![crate::video::InceptionSpec {
                    b1: 2,
                    b2_reduce: 2,
                    b2: 4,
                    b3_reduce: 2,
                    b3: 4,
                    pool_proj: 2,
                }],
                use_se: true,
                se_ratio: 4,
                feature_dim: 8,
            },
            embed_dim: 5,
            query_hidden: 4,
            alpha: 0.01,
        };
        let model = Model::init_stream(cfg, &vocab, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flow.ckpt");
        save_checkpoint(&path, &model, 3, Some(&TrainConfig::visual())).unwrap();
        let (back, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(back.channel(), Channel::Tpr);
        assert_eq!(meta.model.vocab_size(), vocab.len());
        assert_eq!(back.params().len(), model.params().len());
    }

    #[test]
    fn corrupted_files_are_rejected_with_context() {
        let (_, model) = text_model();
        let bytes = checkpoint_bytes(&model, 0, None).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        let err = checkpoint_from_bytes(&bad_magic, "x.ckpt").unwrap_err();
        assert!(err.to_string().contains("x.ckpt"), "{err}");

        let truncated = &bytes[..bytes.len() - 3];
        assert!(checkpoint_from_bytes(truncated, "t.ckpt").is_err());

        let mut trailing = bytes.clone();
        trailing.push(0);
        let err = checkpoint_from_bytes(&trailing, "z.ckpt").unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn layout_mismatch_is_detected() {
        let (_, model) = text_model();
        // Meta claims a different vocabulary size than the stored table.
        let mut meta_lied = CheckpointMeta {
            engine_version: "0".into(),
            seed: 0,
            model: model.config().clone(),
            train: None,
        };
        if let ChannelConfig::Text { vocab_size, .. } = &mut meta_lied.model {
            *vocab_size += 1;
        }
        let meta_json = serde_json::to_vec(&meta_lied).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta_json);
        out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
        for e in model.params().iter() {
            let name = e.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.push(1);
            let blob = tensor_bytes(&e.tensor);
            out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        let err = checkpoint_from_bytes(&out, "lied.ckpt").unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }
}
