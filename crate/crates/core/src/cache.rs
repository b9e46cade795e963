//! KV, JIT-KV and XC context caches.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::{self, DecoderConfig, DecoderWeights, KVPair};
use crate::error::{Error, Result};
use crate::store::{self, CacheFileHeader, Container, ContainerKind, Dtype};
use crate::tensor::{Tape, Tensor};
use crate::xc::{Encoder, XCModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CacheStrategy {
    Kv,
    JitKv,
    Xc,
}

impl CacheStrategy {
    pub const ALL: [CacheStrategy; 3] = [CacheStrategy::Kv, CacheStrategy::JitKv, CacheStrategy::Xc];

    pub fn kind(self) -> ContainerKind {
        match self {
            Self::Kv => ContainerKind::Kv,
            Self::JitKv => ContainerKind::JitKv,
            Self::Xc => ContainerKind::Xc,
        }
    }
}

impl fmt::Display for CacheStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind().label())
    }
}

impl FromStr for CacheStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace(['-', '_'], "").as_str() {
            "KV" => Ok(Self::Kv),
            "JITKV" => Ok(Self::JitKv),
            "XC" => Ok(Self::Xc),
            _ => Err(Error::Config(format!("unknown cache strategy {s:?}"))),
        }
    }
}

/// The dimensions that determine cache size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheGeometry {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_model: usize,
    pub d_enc: usize,
}

impl CacheGeometry {
    pub fn of_decoder(cfg: &DecoderConfig) -> Self {
        Self {
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim,
            d_model: cfg.d_model,
            d_enc: cfg.d_model,
        }
    }

    pub fn of_xc(model: &XCModel) -> Self {
        Self {
            d_enc: model.d_enc(),
            ..Self::of_decoder(&model.decoder_cfg)
        }
    }
}

/// Container dims of a `t`-token cache of `strategy` at geometry `g`.
pub fn container_dims(g: &CacheGeometry, strategy: CacheStrategy, t: usize) -> Vec<usize> {
    match strategy {
        CacheStrategy::Kv => vec![g.n_layers, 2, t, g.n_heads * g.head_dim],
        CacheStrategy::JitKv => vec![g.n_layers, t, g.d_model],
        CacheStrategy::Xc => vec![t, g.d_enc],
    }
}

pub fn bytes_per_token(g: &CacheGeometry, strategy: CacheStrategy, bytes_per_scalar: usize) -> u64 {
    let scalars = match strategy {
        CacheStrategy::Kv => g.n_layers * 2 * g.n_heads * g.head_dim,
        CacheStrategy::JitKv => g.n_layers * g.d_model,
        CacheStrategy::Xc => g.d_enc,
    };
    (scalars * bytes_per_scalar) as u64
}

pub fn decoder_digest(cfg: &DecoderConfig) -> [u8; 8] {
    store::geometry_digest(&cfg.canonical_bytes())
}

/// Digest of everything an XC cache depends on geometrically: the decoder
/// plus the encoder that produced the rows.
pub fn xc_digest(model: &XCModel) -> [u8; 8] {
    let mut bytes = model.decoder_cfg.canonical_bytes();
    bytes.extend_from_slice(b"xc");
    bytes.extend_from_slice(&(model.d_enc() as u64).to_le_bytes());
    match &model.encoder {
        Encoder::Decoder => bytes.push(0),
        Encoder::Bidirectional { cfg, .. } => {
            bytes.push(1);
            bytes.extend(cfg.canonical_bytes());
        }
    }
    store::geometry_digest(&bytes)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheMeta {
    pub strategy: CacheStrategy,
    pub digest: [u8; 8],
    /// Context tokens covered. Positions are `0..len`.
    pub len: usize,
    /// How the scalars were last stored; in-memory data is always f32.
    pub dtype: Dtype,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KVCacheBlob {
    pub meta: CacheMeta,
    pub kv: KVPair,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JITCacheBlob {
    pub meta: CacheMeta,
    /// Residual stream entering each layer, `L` tensors of `T × d_model`.
    pub hidden: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct XCCacheBlob {
    pub meta: CacheMeta,
    /// `T × d_enc`
    pub states: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CacheBlob {
    Kv(KVCacheBlob),
    JitKv(JITCacheBlob),
    Xc(XCCacheBlob),
}

/// A model able to consume a cache.
#[derive(Clone, Copy)]
pub enum CacheModel<'a> {
    Decoder(&'a DecoderWeights, &'a DecoderConfig),
    Xc(&'a XCModel),
}

impl<'a> CacheModel<'a> {
    fn decoder(self, strategy: CacheStrategy) -> Result<(&'a DecoderWeights, &'a DecoderConfig)> {
        match self {
            CacheModel::Decoder(w, c) => Ok((w, c)),
            CacheModel::Xc(_) => Err(Error::Config(format!("{strategy} caching needs a plain decoder"))),
        }
    }

    fn xc(self) -> Result<&'a XCModel> {
        match self {
            CacheModel::Xc(m) => Ok(m),
            CacheModel::Decoder(..) => Err(Error::Config("XC caching needs an XC model".into())),
        }
    }

    pub fn geometry(self) -> CacheGeometry {
        match self {
            CacheModel::Decoder(_, c) => CacheGeometry::of_decoder(c),
            CacheModel::Xc(m) => CacheGeometry::of_xc(m),
        }
    }
}

impl CacheBlob {
    pub fn meta(&self) -> &CacheMeta {
        match self {
            CacheBlob::Kv(b) => &b.meta,
            CacheBlob::JitKv(b) => &b.meta,
            CacheBlob::Xc(b) => &b.meta,
        }
    }

    pub fn strategy(&self) -> CacheStrategy {
        self.meta().strategy
    }

    pub fn scalar_count(&self) -> usize {
        match self {
            CacheBlob::Kv(b) => b.kv.keys.iter().chain(&b.kv.values).map(Vec::len).sum(),
            CacheBlob::JitKv(b) => b.hidden.iter().map(Tensor::numel).sum(),
            CacheBlob::Xc(b) => b.states.numel(),
        }
    }

    /// Container dims: KV `[L, 2, T, H·d_h]`, JITKV `[L, T, d_model]`,
    /// XC `[T, d_enc]`.
    pub fn dims(&self) -> Vec<usize> {
        let t = self.meta().len;
        match self {
            CacheBlob::Kv(b) => vec![b.kv.n_layers(), 2, t, b.kv.width],
            CacheBlob::JitKv(b) => vec![b.hidden.len(), t, b.hidden.first().map_or(0, Tensor::cols)],
            CacheBlob::Xc(b) => vec![t, b.states.cols()],
        }
    }

    fn flat(&self) -> Vec<f32> {
        match self {
            CacheBlob::Kv(b) => {
                let mut out = Vec::with_capacity(self.scalar_count());
                for (k, v) in b.kv.keys.iter().zip(&b.kv.values) {
                    out.extend_from_slice(k);
                    out.extend_from_slice(v);
                }
                out
            }
            CacheBlob::JitKv(b) => b.hidden.iter().flat_map(|h| h.data().iter().copied()).collect(),
            CacheBlob::Xc(b) => b.states.data().to_vec(),
        }
    }

    pub fn header(&self, dtype: Dtype) -> Result<CacheFileHeader> {
        CacheFileHeader::new(self.strategy().kind(), dtype, &self.dims(), self.meta().digest)
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        store::encode_container(&self.header(dtype)?, &self.flat())
    }

    /// Returns the number of bytes written.
    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<u64> {
        store::save_container(path, &self.header(dtype)?, &self.flat())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(store::load_container(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (c, used) = store::decode_container(bytes)?;
        if used != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - used)));
        }
        Self::from_container(c)
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let h = &c.header;
        let dims: Vec<usize> = h.dims.iter().map(|d| *d as usize).collect();
        let bad = || Error::Format(format!("{} container with dims {:?}", h.kind.label(), dims));
        let meta = |strategy, len| CacheMeta {
            strategy,
            digest: h.digest,
            len,
            dtype: h.dtype,
        };
        match h.kind {
            ContainerKind::Kv => {
                let [l, two, t, w] = dims[..] else { return Err(bad()) };
                if two != 2 || w == 0 {
                    return Err(bad());
                }
                let mut keys = Vec::with_capacity(l);
                let mut values = Vec::with_capacity(l);
                for layer in c.data.chunks_exact((2 * t * w).max(1)).take(l) {
                    keys.push(layer[..t * w].to_vec());
                    values.push(layer[t * w..].to_vec());
                }
                keys.resize(l, Vec::new());
                values.resize(l, Vec::new());
                Ok(CacheBlob::Kv(KVCacheBlob {
                    meta: meta(CacheStrategy::Kv, t),
                    kv: KVPair::from_parts(keys, values, w)?,
                }))
            }
            ContainerKind::JitKv => {
                let [l, t, d] = dims[..] else { return Err(bad()) };
                let hidden = (0..l)
                    .map(|i| Tensor::new(vec![t, d], c.data[i * t * d..(i + 1) * t * d].to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                Ok(CacheBlob::JitKv(JITCacheBlob {
                    meta: meta(CacheStrategy::JitKv, t),
                    hidden,
                }))
            }
            ContainerKind::Xc => {
                let [t, d] = dims[..] else { return Err(bad()) };
                Ok(CacheBlob::Xc(XCCacheBlob {
                    meta: meta(CacheStrategy::Xc, t),
                    states: Tensor::new(vec![t, d], c.data)?,
                }))
            }
            ContainerKind::Weights => Err(Error::Format("weights container is not a cache".into())),
        }
    }
}

/// XC cache of a record with several contexts, each encoded on its own.
pub fn build_xc_cache(model: &XCModel, contexts: &[Vec<usize>]) -> Result<CacheBlob> {
    let enc = model.encode_contexts(contexts)?;
    if enc.is_empty() {
        return Err(Error::Contract("context must be nonempty".into()));
    }
    Ok(CacheBlob::Xc(XCCacheBlob {
        meta: CacheMeta {
            strategy: CacheStrategy::Xc,
            digest: xc_digest(model),
            len: enc.len(),
            dtype: Dtype::F32,
        },
        states: enc.states,
    }))
}

pub fn build_cache(model: CacheModel<'_>, context: &[usize], strategy: CacheStrategy) -> Result<CacheBlob> {
    if context.is_empty() {
        return Err(Error::Contract("context must be nonempty".into()));
    }
    let meta = |digest| CacheMeta {
        strategy,
        digest,
        len: context.len(),
        dtype: Dtype::F32,
    };
    match strategy {
        CacheStrategy::Kv | CacheStrategy::JitKv => {
            let (w, cfg) = model.decoder(strategy)?;
            let out = decoder::forward_full(w, cfg, context)?;
            let meta = meta(decoder_digest(cfg));
            Ok(match strategy {
                CacheStrategy::Kv => CacheBlob::Kv(KVCacheBlob { meta, kv: out.kv }),
                _ => CacheBlob::JitKv(JITCacheBlob {
                    meta,
                    hidden: out.hidden_per_layer,
                }),
            })
        }
        CacheStrategy::Xc => {
            let m = model.xc()?;
            let enc = m.encode(context)?;
            Ok(CacheBlob::Xc(XCCacheBlob {
                meta: meta(xc_digest(m)),
                states: enc.states,
            }))
        }
    }
}

fn check_digest(meta: &CacheMeta, expected: [u8; 8]) -> Result<()> {
    if meta.digest != expected {
        return Err(Error::Cache(format!(
            "geometry digest {:016x} does not match model {:016x}",
            u64::from_le_bytes(meta.digest),
            u64::from_le_bytes(expected)
        )));
    }
    Ok(())
}

/// Recomputes each layer's keys and values from the stored layer inputs.
pub fn jit_materialize(jit: &JITCacheBlob, weights: &DecoderWeights, cfg: &DecoderConfig) -> Result<KVPair> {
    check_digest(&jit.meta, decoder_digest(cfg))?;
    if jit.hidden.len() != cfg.n_layers {
        return Err(Error::Cache(format!(
            "{} stored layers for a {}-layer decoder",
            jit.hidden.len(),
            cfg.n_layers
        )));
    }
    let positions: Vec<usize> = (0..jit.meta.len).collect();
    let mut keys = Vec::with_capacity(cfg.n_layers);
    let mut values = Vec::with_capacity(cfg.n_layers);
    for (h, b) in jit.hidden.iter().zip(&weights.blocks) {
        let mut tape = Tape::inference();
        let x = tape.frozen(h);
        let nw = tape.frozen(&b.attn_norm);
        let n = tape.rms_norm(x, nw, cfg.norm_eps)?;
        let (wk, wv) = (tape.frozen(&b.wk), tape.frozen(&b.wv));
        let k = tape.matmul(n, wk)?;
        let v = tape.matmul(n, wv)?;
        let k = tape.rope(k, &positions, cfg.n_heads, cfg.head_dim, cfg.rope_theta)?;
        keys.push(tape.value(k).data().to_vec());
        values.push(tape.value(v).data().to_vec());
    }
    KVPair::from_parts(keys, values, cfg.n_heads * cfg.head_dim)
}

/// Greedy generation of up to `max_new` tokens after `query`, reading the
/// context from `blob`. `stop` ends generation early and is included.
pub fn generate_with_cache(
    model: CacheModel<'_>,
    blob: &CacheBlob,
    query: &[usize],
    max_new: usize,
    stop: Option<usize>,
) -> Result<Vec<usize>> {
    if query.is_empty() {
        return Err(Error::Contract("query must be nonempty".into()));
    }
    let stop = stop.unwrap_or(usize::MAX);
    let compat = |e: Error| match e {
        Error::Config(m) => Error::Cache(m),
        e => e,
    };
    let mut kv = match blob {
        CacheBlob::Kv(b) => {
            let (_, cfg) = model.decoder(CacheStrategy::Kv).map_err(compat)?;
            check_digest(&b.meta, decoder_digest(cfg))?;
            b.kv.clone()
        }
        CacheBlob::JitKv(b) => {
            let (w, cfg) = model.decoder(CacheStrategy::JitKv).map_err(compat)?;
            jit_materialize(b, w, cfg)?
        }
        CacheBlob::Xc(b) => {
            let m = model.xc().map_err(compat)?;
            check_digest(&b.meta, xc_digest(m))?;
            let enc = crate::encoders::EncoderOutput {
                states: b.states.clone(),
                kind: m.encoder_kind(),
            };
            return m.generate(query, &enc, max_new, stop);
        }
    };
    let (w, cfg) = model.decoder(blob.strategy()).map_err(compat)?;
    if max_new == 0 {
        return Ok(Vec::new());
    }
    let mut logits = Vec::new();
    for &t in query {
        logits = decoder::decode_step(w, cfg, t, &mut kv)?;
    }
    decoder::greedy_continue(logits, max_new, stop, |tok| decoder::decode_step(w, cfg, tok, &mut kv))
}

/// Closed-form attention multiply-accumulates for the decoder's self-attention
/// when `n_new` tokens are decoded against `t_ctx` cached rows.
pub fn cached_attention_macs(cfg: &DecoderConfig, t_ctx: usize, n_new: usize) -> u64 {
    let w = (cfg.n_heads * cfg.head_dim) as u64;
    let rows: u64 = (1..=n_new as u64).map(|i| t_ctx as u64 + i).sum();
    cfg.n_layers as u64 * 2 * w * rows
}

/// Closed-form attention multiply-accumulates when the whole sequence of
/// `t_total` tokens is processed without a context cache.
pub fn uncached_attention_macs(cfg: &DecoderConfig, t_total: usize) -> u64 {
    let w = (cfg.n_heads * cfg.head_dim) as u64;
    let t = t_total as u64;
    cfg.n_layers as u64 * 2 * w * (t * (t + 1) / 2)
}
