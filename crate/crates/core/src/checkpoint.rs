//! On-disk checkpoints: tensors go into a bundle of weight containers,
//! configuration and bookkeeping into a JSON sidecar.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{decoder_digest, xc_digest};
use crate::decoder::{DecoderConfig, DecoderWeights};
use crate::encoders::BidirEncoderConfig;
use crate::error::{Error, Result};
use crate::store::{self, CacheFileHeader, ContainerKind, Dtype};
use crate::tensor::Tensor;
use crate::trainer::{AdamW, TrainConfig, Trainer};
use crate::xc::{Encoder, XCConfig, XCModel};

pub const WEIGHTS_FILE: &str = "weights.xcc";
pub const META_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub decoder: DecoderConfig,
    pub xc: Option<XCConfig>,
    pub bidir: Option<BidirEncoderConfig>,
    pub names: Vec<String>,
    pub train: Option<TrainState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub step: usize,
    pub adam_t: u64,
}

fn header(kind: ContainerKind, t: &Tensor, digest: [u8; 8]) -> Result<CacheFileHeader> {
    CacheFileHeader::new(kind, Dtype::F32, t.shape(), digest)
}

fn write(dir: &Path, meta: &CheckpointMeta, parts: Vec<(CacheFileHeader, &[f32])>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    store::save_bundle(&dir.join(WEIGHTS_FILE), &parts)?;
    let json = serde_json::to_vec_pretty(meta).map_err(|e| Error::Format(e.to_string()))?;
    store::write_atomic(&dir.join(META_FILE), &json)
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let bytes = store::read_file(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Saves a bare decoder.
pub fn save_decoder(dir: &Path, cfg: &DecoderConfig, weights: &DecoderWeights) -> Result<()> {
    let digest = decoder_digest(cfg);
    let named = weights.named_tensors();
    let parts = named
        .iter()
        .map(|(_, t)| Ok((header(ContainerKind::Weights, t, digest)?, t.data())))
        .collect::<Result<Vec<_>>>()?;
    let meta = CheckpointMeta {
        decoder: cfg.clone(),
        xc: None,
        bidir: None,
        names: named.into_iter().map(|(n, _)| n).collect(),
        train: None,
    };
    write(dir, &meta, parts)
}

fn load_tensors(dir: &Path, meta: &CheckpointMeta) -> Result<Vec<(Tensor, [u8; 8])>> {
    tensors_from_bytes(&store::read_file(&dir.join(WEIGHTS_FILE))?, meta)
}

fn tensors_from_bytes(bytes: &[u8], meta: &CheckpointMeta) -> Result<Vec<(Tensor, [u8; 8])>> {
    let parts = store::decode_bundle(bytes)?;
    let mut out = Vec::with_capacity(parts.len());
    for c in parts {
        if c.header.kind != ContainerKind::Weights {
            return Err(Error::Format(format!("unexpected {} container in checkpoint", c.header.kind.label())));
        }
        let shape = c.header.dims.iter().map(|d| *d as usize).collect();
        out.push((Tensor::new(shape, c.data)?, c.header.digest));
    }
    if out.len() < meta.names.len() {
        return Err(Error::Corrupt(format!(
            "checkpoint holds {} tensors, metadata lists {}",
            out.len(),
            meta.names.len()
        )));
    }
    Ok(out)
}

fn take_decoder(cfg: &DecoderConfig, tensors: &mut Vec<(Tensor, [u8; 8])>) -> Result<DecoderWeights> {
    let n = DecoderWeights::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))?.named_tensors().len();
    if tensors.len() < n {
        return Err(Error::Corrupt("checkpoint is missing decoder tensors".into()));
    }
    let digest = decoder_digest(cfg);
    let rest = tensors.split_off(n);
    let dec: Vec<(Tensor, [u8; 8])> = std::mem::replace(tensors, rest);
    if dec.iter().any(|(_, d)| *d != digest) {
        return Err(Error::Cache("decoder tensors were saved for another geometry".into()));
    }
    let mut w = DecoderWeights::from_tensors(cfg, dec.into_iter().map(|(t, _)| t).collect())?;
    w.frozen = true;
    Ok(w)
}

pub fn load_decoder(dir: &Path) -> Result<(DecoderConfig, DecoderWeights)> {
    let meta = read_meta(dir)?;
    let weights = store::read_file(&dir.join(WEIGHTS_FILE))?;
    decoder_from_parts(meta, &weights)
}

/// A bare decoder from the contents of its two checkpoint files.
pub fn decoder_from_bytes(meta_json: &[u8], weights: &[u8]) -> Result<(DecoderConfig, DecoderWeights)> {
    let meta = serde_json::from_slice(meta_json).map_err(|e| Error::Format(e.to_string()))?;
    decoder_from_parts(meta, weights)
}

fn decoder_from_parts(meta: CheckpointMeta, weights: &[u8]) -> Result<(DecoderConfig, DecoderWeights)> {
    meta.decoder.validate()?;
    let mut tensors = tensors_from_bytes(weights, &meta)?;
    let w = take_decoder(&meta.decoder, &mut tensors)?;
    if !tensors.is_empty() {
        return Err(Error::Format("trailing tensors after decoder".into()));
    }
    Ok((meta.decoder, w))
}

/// Saves the whole model and, when given, the optimizer state.
pub fn save_checkpoint(dir: &Path, model: &XCModel, trainer: Option<&Trainer>) -> Result<()> {
    let dd = decoder_digest(&model.decoder_cfg);
    let xd = xc_digest(model);
    let mut names = Vec::new();
    let mut parts = Vec::new();
    for (n, t) in model.decoder.named_tensors() {
        parts.push((header(ContainerKind::Weights, t, dd)?, t.data()));
        names.push(format!("decoder.{n}"));
    }
    for (n, t) in model.trainable_parameters() {
        parts.push((header(ContainerKind::Weights, t, xd)?, t.data()));
        names.push(n);
    }
    let sizes: Vec<Vec<usize>> = model.trainable_parameters().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut train = None;
    if let Some(tr) = trainer {
        for (moment, vecs) in [("m", &tr.opt.m), ("v", &tr.opt.v)] {
            for (i, v) in vecs.iter().enumerate() {
                let h = CacheFileHeader::new(ContainerKind::Weights, Dtype::F32, &sizes[i], xd)?;
                parts.push((h, v.as_slice()));
                names.push(format!("adam.{moment}.{i}"));
            }
        }
        train = Some(TrainState {
            cfg: tr.cfg.clone(),
            step: tr.step,
            adam_t: tr.opt.t,
        });
    }
    let bidir = match &model.encoder {
        Encoder::Bidirectional { cfg, .. } => Some(cfg.clone()),
        Encoder::Decoder => None,
    };
    let meta = CheckpointMeta {
        decoder: model.decoder_cfg.clone(),
        xc: Some(model.cfg.clone()),
        bidir,
        names,
        train,
    };
    write(dir, &meta, parts)
}

pub struct Checkpoint {
    pub model: XCModel,
    pub trainer: Option<Trainer>,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta = read_meta(dir)?;
    let xcfg = meta
        .xc
        .clone()
        .ok_or_else(|| Error::Format(format!("{} holds a bare decoder", dir.display())))?;
    let mut tensors = load_tensors(dir, &meta)?;
    let decoder = take_decoder(&meta.decoder, &mut tensors)?;
    let mut model = XCModel::new(
        meta.decoder.clone(),
        decoder,
        xcfg,
        meta.bidir.clone(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    let xd = xc_digest(&model);
    let mut rest = tensors.into_iter();
    for slot in model.trainable_tensors_mut() {
        let (t, d) = rest
            .next()
            .ok_or_else(|| Error::Corrupt("checkpoint is missing trainable tensors".into()))?;
        if d != xd || t.shape() != slot.shape() {
            return Err(Error::Cache("trainable tensor does not match the model geometry".into()));
        }
        *slot = t;
    }
    let trainer = match meta.train {
        Some(st) => {
            let n = model.trainable_parameters().len();
            let mut take = |what: &str| -> Result<Vec<Vec<f32>>> {
                (0..n)
                    .map(|_| {
                        rest.next()
                            .map(|(t, _)| t.into_data())
                            .ok_or_else(|| Error::Corrupt(format!("checkpoint is missing optimizer {what}")))
                    })
                    .collect()
            };
            let m = take("first moments")?;
            let v = take("second moments")?;
            Some(Trainer {
                cfg: st.cfg,
                opt: AdamW { m, v, t: st.adam_t },
                step: st.step,
            })
        }
        None => None,
    };
    if rest.next().is_some() {
        return Err(Error::Format("trailing tensors in checkpoint".into()));
    }
    Ok(Checkpoint { model, trainer })
}

/// The weight and metadata files of a checkpoint directory.
pub fn checkpoint_files(dir: &Path) -> [PathBuf; 2] {
    [dir.join(WEIGHTS_FILE), dir.join(META_FILE)]
}
