//! Context encoders: the frozen decoder reused causally, or a small
//! trainable bidirectional transformer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{block_tape, forward_full, BlockWeights, DecoderConfig, DecoderWeights};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    DecoderAsEncoder,
    SmallBidirectional,
}

/// Token-level context representations, `T × d_enc`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub states: Tensor,
    pub kind: EncoderKind,
}

impl EncoderOutput {
    pub fn d_enc(&self) -> usize {
        self.states.cols()
    }

    pub fn len(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Zero-row encoding, used when no context is given.
    pub fn empty(d_enc: usize, kind: EncoderKind) -> Self {
        Self {
            states: Tensor::zeros(&[0, d_enc]),
            kind,
        }
    }

    /// Row-wise concatenation of per-context encodings.
    pub fn concat(parts: &[EncoderOutput]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("no encodings to concatenate".into()))?;
        let d = first.d_enc();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.d_enc() != d || p.kind != first.kind {
                return Err(Error::Config("encodings differ in width or kind".into()));
            }
            rows += p.len();
            data.extend_from_slice(p.states.data());
        }
        Ok(Self {
            states: Tensor::new(vec![rows, d], data)?,
            kind: first.kind,
        })
    }
}

pub fn encode_with_decoder(decoder: &DecoderWeights, cfg: &DecoderConfig, context: &[usize]) -> Result<EncoderOutput> {
    let out = forward_full(decoder, cfg, context)?;
    Ok(EncoderOutput {
        states: out.last_hidden,
        kind: EncoderKind::DecoderAsEncoder,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BidirEncoderConfig {
    pub n_layers: usize,
    pub d_enc: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// Rows of the learned position table.
    pub base_max_positions: usize,
    /// Longest context accepted after position extension.
    pub max_positions: usize,
    pub mlp_hidden: usize,
    pub rope_theta: f32,
    pub norm_eps: f32,
}

impl BidirEncoderConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            d_enc: 32,
            n_heads: 4,
            vocab_size,
            base_max_positions: 64,
            max_positions: 128,
            mlp_hidden: 64,
            rope_theta: 10000.0,
            norm_eps: 1e-5,
        }
    }

    /// Base-size encoder with a 4096-token window.
    pub fn reference(vocab_size: usize) -> Self {
        Self {
            n_layers: 12,
            d_enc: 768,
            n_heads: 12,
            vocab_size,
            base_max_positions: 4096,
            max_positions: 4096,
            mlp_hidden: 3072,
            rope_theta: 10000.0,
            norm_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_enc / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_layers,
            self.d_enc,
            self.n_heads,
            self.vocab_size,
            self.base_max_positions,
            self.mlp_hidden,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("encoder fields must be positive".into()));
        }
        if !self.d_enc.is_multiple_of(self.n_heads) || !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_enc ({}) must split into {} heads of even width",
                self.d_enc, self.n_heads
            )));
        }
        if self.max_positions < self.base_max_positions {
            return Err(Error::Config("max_positions below base_max_positions".into()));
        }
        Ok(())
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = b"bidir".to_vec();
        for v in [
            self.n_layers,
            self.d_enc,
            self.n_heads,
            self.vocab_size,
            self.base_max_positions,
            self.max_positions,
            self.mlp_hidden,
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.rope_theta.to_le_bytes());
        out.extend_from_slice(&self.norm_eps.to_le_bytes());
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BidirEncoderWeights {
    pub embed: Tensor,
    pub positions: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: Tensor,
}

impl BidirEncoderWeights {
    pub fn init(cfg: &BidirEncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_enc;
        let f = cfg.mlp_hidden;
        let proj = 1.0 / (d as f32).sqrt();
        let out_scale = proj / (2.0 * cfg.n_layers as f32).sqrt();
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockWeights {
                attn_norm: Tensor::ones(&[d]),
                wq: Tensor::randn(&[d, d], proj, rng),
                wk: Tensor::randn(&[d, d], proj, rng),
                wv: Tensor::randn(&[d, d], proj, rng),
                wo: Tensor::randn(&[d, d], out_scale, rng),
                mlp_norm: Tensor::ones(&[d]),
                w_gate: Tensor::randn(&[d, f], proj, rng),
                w_up: Tensor::randn(&[d, f], proj, rng),
                w_down: Tensor::randn(&[f, d], out_scale, rng),
            })
            .collect();
        Ok(Self {
            embed: Tensor::randn(&[cfg.vocab_size, d], 1.0, rng),
            positions: Tensor::randn(&[cfg.base_max_positions, d], 0.5, rng),
            blocks,
            final_norm: Tensor::ones(&[d]),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("enc.embed".to_string(), &self.embed), ("enc.positions".to_string(), &self.positions)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in [
                ("attn_norm", &b.attn_norm),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("mlp_norm", &b.mlp_norm),
                ("w_gate", &b.w_gate),
                ("w_up", &b.w_up),
                ("w_down", &b.w_down),
            ] {
                out.push((format!("enc.blocks.{i}.{n}"), t));
            }
        }
        out.push(("enc.final_norm".into(), &self.final_norm));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed, &mut self.positions];
        for b in &mut self.blocks {
            out.extend([
                &mut b.attn_norm,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.mlp_norm,
                &mut b.w_gate,
                &mut b.w_up,
                &mut b.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Grows a learned position table to `needed` rows by repeating its
/// starting rows: the extra `needed − P` leading rows cycle through
/// `p0, p1, …`, and the original table fills the last `P` rows.
pub fn extend_positions(table: &Tensor, needed: usize) -> Result<Tensor> {
    let p = table.shape()[0];
    if p == 0 || table.shape().len() != 2 {
        return Err(Error::Contract("position table must be a nonempty matrix".into()));
    }
    if needed <= p {
        return Ok(table.clone());
    }
    let d = table.cols();
    let mut data = Vec::with_capacity(needed * d);
    for r in 0..needed - p {
        data.extend_from_slice(table.row(r % p));
    }
    data.extend_from_slice(table.data());
    Tensor::new(vec![needed, d], data)
}

/// Row indices into the native table used for a context of length `t`,
/// consistent with [`extend_positions`].
fn position_rows(p: usize, t: usize) -> Vec<usize> {
    if t <= p {
        (0..t).collect()
    } else {
        let extra = t - p;
        (0..extra).map(|r| r % p).chain(0..p).collect()
    }
}

/// Bidirectional encoding on a tape. The encoder weights enter as trainable
/// leaves when `trainable` is set.
pub fn encode_bidirectional_tape<'a>(
    tape: &mut Tape<'a>,
    weights: &'a BidirEncoderWeights,
    cfg: &BidirEncoderConfig,
    context: &[usize],
    trainable: bool,
) -> Result<Var> {
    if context.is_empty() {
        return Err(Error::Contract("empty context".into()));
    }
    if context.len() > cfg.max_positions {
        return Err(Error::Length {
            len: context.len(),
            max: cfg.max_positions,
        });
    }
    if let Some(bad) = context.iter().find(|t| **t >= cfg.vocab_size) {
        return Err(Error::Range(format!("token {bad} outside vocabulary")));
    }
    let embed = tape.input(&weights.embed, trainable);
    let pos_table = tape.input(&weights.positions, trainable);
    let tok = tape.embedding(embed, context)?;
    let rows = position_rows(cfg.base_max_positions, context.len());
    let pos = tape.embedding(pos_table, &rows)?;
    let mut h = tape.add(tok, pos)?;
    let positions: Vec<usize> = (0..context.len()).collect();
    for b in &weights.blocks {
        let (out, _, _) = block_tape(
            tape,
            b,
            trainable,
            h,
            &positions,
            cfg.n_heads,
            cfg.head_dim(),
            cfg.rope_theta,
            cfg.norm_eps,
            false,
        )?;
        h = out;
    }
    let fnorm = tape.input(&weights.final_norm, trainable);
    tape.rms_norm(h, fnorm, cfg.norm_eps)
}

pub fn encode_bidirectional(
    weights: &BidirEncoderWeights,
    cfg: &BidirEncoderConfig,
    context: &[usize],
) -> Result<EncoderOutput> {
    let mut tape = Tape::inference();
    let v = encode_bidirectional_tape(&mut tape, weights, cfg, context, false)?;
    Ok(EncoderOutput {
        states: tape.value(v).clone(),
        kind: EncoderKind::SmallBidirectional,
    })
}
