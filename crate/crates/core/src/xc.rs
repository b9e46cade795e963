//! XC architecture: a frozen decoder with gated cross-attention layers
//! interleaved between its self-attention blocks, conditioned on
//! pre-computed context encodings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{
    self, decode_step_with, forward_tape, BlockHooks, DecoderConfig, DecoderWeights, ForwardVars, KVPair, RowHooks,
};
use crate::encoders::{
    encode_bidirectional, encode_bidirectional_tape, encode_with_decoder, BidirEncoderConfig, BidirEncoderWeights,
    EncoderKind, EncoderOutput,
};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, AttnShape};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XCConfig {
    pub n_cross_layers: usize,
    pub skip: usize,
    pub final_layer: bool,
    pub cross_hidden: usize,
    pub cross_n_heads: usize,
    pub cross_n_kv_heads: usize,
    pub dropout_p: f32,
    pub use_bias: bool,
    pub encoder: EncoderKind,
}

impl XCConfig {
    /// Hyperparameters of the 7B reference model.
    pub fn reference(encoder: EncoderKind) -> Self {
        Self {
            n_cross_layers: 5,
            skip: 6,
            final_layer: true,
            cross_hidden: 2048,
            cross_n_heads: 32,
            cross_n_kv_heads: 32,
            dropout_p: 0.2,
            use_bias: false,
            encoder,
        }
    }

    /// Desk-scale layout for the four-layer toy decoder: one cross layer in
    /// front of block 0 plus the final layer.
    pub fn toy(encoder: EncoderKind) -> Self {
        Self {
            n_cross_layers: 1,
            skip: 3,
            final_layer: true,
            cross_hidden: 32,
            cross_n_heads: 4,
            cross_n_kv_heads: 4,
            dropout_p: 0.0,
            use_bias: false,
            encoder,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        placement_indices(n_layers, self.skip, self.n_cross_layers)?;
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        if self.cross_n_heads == 0 || !self.cross_hidden.is_multiple_of(self.cross_n_heads) {
            return Err(Error::Config(format!(
                "cross_hidden ({}) must be divisible by cross_n_heads ({})",
                self.cross_hidden, self.cross_n_heads
            )));
        }
        if self.cross_n_kv_heads != self.cross_n_heads {
            return Err(Error::Config("grouped key/value heads are not supported".into()));
        }
        if self.use_bias {
            return Err(Error::Config("cross-attention bias is not supported".into()));
        }
        Ok(())
    }
}

/// Indices of the decoder blocks that receive a cross layer in front of
/// them: every `(skip + 1)`-th block starting at 0, `count` of them.
pub fn placement_indices(n_layers: usize, skip: usize, count: usize) -> Result<Vec<usize>> {
    let stride = skip + 1;
    if count * stride > n_layers + skip {
        return Err(Error::Config(format!(
            "{count} cross layers with skip {skip} do not fit in {n_layers} decoder layers"
        )));
    }
    Ok((0..count).map(|i| i * stride).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionLayer {
    pub norm: Tensor,
    /// `d_model × cross_hidden`
    pub wq: Tensor,
    /// `d_enc × cross_hidden`
    pub wk: Tensor,
    pub wv: Tensor,
    /// `cross_hidden × d_model`
    pub wo: Tensor,
    /// Scalar output gate, zero at initialization.
    pub gate: Tensor,
}

impl CrossAttentionLayer {
    pub fn init(d_model: usize, d_enc: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm: Tensor::ones(&[d_model]),
            wq: Tensor::randn(&[d_model, hidden], 1.0 / (d_model as f32).sqrt(), rng),
            wk: Tensor::randn(&[d_enc, hidden], 1.0 / (d_enc as f32).sqrt(), rng),
            wv: Tensor::randn(&[d_enc, hidden], 1.0 / (d_enc as f32).sqrt(), rng),
            wo: Tensor::randn(&[hidden, d_model], 1.0 / (hidden as f32).sqrt(), rng),
            gate: Tensor::scalar(0.0),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("norm", &self.norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("gate", &self.gate),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.gate,
        ]
    }

    /// Gated cross-attention residual update on a tape.
    #[allow(clippy::too_many_arguments)]
    pub fn apply_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        h: Var,
        encoding: Var,
        n_heads: usize,
        eps: f32,
        dropout: Option<Vec<f32>>,
    ) -> Result<Var> {
        let norm = tape.param(&self.norm);
        let (wq, wk, wv, wo, gate) = (
            tape.param(&self.wq),
            tape.param(&self.wk),
            tape.param(&self.wv),
            tape.param(&self.wo),
            tape.param(&self.gate),
        );
        let n = tape.rms_norm(h, norm, eps)?;
        let q = tape.matmul(n, wq)?;
        let k = tape.matmul(encoding, wk)?;
        let v = tape.matmul(encoding, wv)?;
        let a = tape.attention(q, k, v, n_heads, None, dropout)?;
        let o = tape.matmul(a, wo)?;
        let o = tape.gate(o, gate)?;
        tape.add(h, o)
    }
}

/// Context encoder owned by an XC model.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    /// Reuses the frozen decoder; adds no parameters.
    Decoder,
    Bidirectional {
        cfg: BidirEncoderConfig,
        weights: BidirEncoderWeights,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct XCModel {
    pub decoder_cfg: DecoderConfig,
    pub decoder: DecoderWeights,
    pub cfg: XCConfig,
    pub placement: Vec<usize>,
    /// One per placement index, then the final layer when configured.
    pub cross: Vec<CrossAttentionLayer>,
    pub encoder: Encoder,
}

impl XCModel {
    /// Wraps `decoder` (frozen from here on) with freshly initialized cross
    /// layers. `bidir` is required for the bidirectional encoder kind.
    pub fn new(
        decoder_cfg: DecoderConfig,
        mut decoder: DecoderWeights,
        cfg: XCConfig,
        bidir: Option<BidirEncoderConfig>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        decoder_cfg.validate()?;
        decoder.check_geometry(&decoder_cfg)?;
        cfg.validate(decoder_cfg.n_layers)?;
        let placement = placement_indices(decoder_cfg.n_layers, cfg.skip, cfg.n_cross_layers)?;
        let encoder = match (cfg.encoder, bidir) {
            (EncoderKind::DecoderAsEncoder, _) => Encoder::Decoder,
            (EncoderKind::SmallBidirectional, Some(bcfg)) => {
                bcfg.validate()?;
                if bcfg.vocab_size != decoder_cfg.vocab_size {
                    return Err(Error::Config("encoder and decoder vocabularies differ".into()));
                }
                let weights = BidirEncoderWeights::init(&bcfg, rng)?;
                Encoder::Bidirectional { cfg: bcfg, weights }
            }
            (EncoderKind::SmallBidirectional, None) => {
                return Err(Error::Config("bidirectional encoder requires its configuration".into()))
            }
        };
        let d_enc = match &encoder {
            Encoder::Decoder => decoder_cfg.d_model,
            Encoder::Bidirectional { cfg, .. } => cfg.d_enc,
        };
        let n_cross = placement.len() + usize::from(cfg.final_layer);
        let cross = (0..n_cross)
            .map(|_| CrossAttentionLayer::init(decoder_cfg.d_model, d_enc, cfg.cross_hidden, rng))
            .collect();
        decoder.frozen = true;
        Ok(Self {
            decoder_cfg,
            decoder,
            cfg,
            placement,
            cross,
            encoder,
        })
    }

    pub fn d_enc(&self) -> usize {
        match &self.encoder {
            Encoder::Decoder => self.decoder_cfg.d_model,
            Encoder::Bidirectional { cfg, .. } => cfg.d_enc,
        }
    }

    pub fn encoder_kind(&self) -> EncoderKind {
        self.cfg.encoder
    }

    /// Trainable tensors: cross layers, then the bidirectional encoder.
    pub fn trainable_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.cross.iter().enumerate() {
            for (n, t) in layer.named() {
                out.push((format!("cross.{i}.{n}"), t));
            }
        }
        if let Encoder::Bidirectional { weights, .. } = &self.encoder {
            out.extend(weights.named_tensors());
        }
        out
    }

    /// Same order as [`Self::trainable_parameters`].
    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.cross {
            out.extend(layer.tensors_mut());
        }
        if let Encoder::Bidirectional { weights, .. } = &mut self.encoder {
            out.extend(weights.tensors_mut());
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn encode(&self, context: &[usize]) -> Result<EncoderOutput> {
        match &self.encoder {
            Encoder::Decoder => encode_with_decoder(&self.decoder, &self.decoder_cfg, context),
            Encoder::Bidirectional { cfg, weights } => encode_bidirectional(weights, cfg, context),
        }
    }

    /// Encodes each context separately and stacks the rows.
    pub fn encode_contexts(&self, contexts: &[Vec<usize>]) -> Result<EncoderOutput> {
        if contexts.is_empty() {
            return Ok(EncoderOutput::empty(self.d_enc(), self.encoder_kind()));
        }
        let parts = contexts.iter().map(|c| self.encode(c)).collect::<Result<Vec<_>>>()?;
        EncoderOutput::concat(&parts)
    }

    /// Encoding as a tape value: differentiable for the bidirectional
    /// encoder, a constant otherwise.
    pub fn encode_contexts_tape<'a>(&'a self, tape: &mut Tape<'a>, contexts: &[Vec<usize>]) -> Result<Var> {
        match &self.encoder {
            Encoder::Bidirectional { cfg, weights } if tape.is_recording() && !contexts.is_empty() => {
                let parts = contexts
                    .iter()
                    .map(|c| encode_bidirectional_tape(tape, weights, cfg, c, true))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat_rows(&parts)
            }
            _ => {
                let enc = self.encode_contexts(contexts)?;
                Ok(tape.leaf(enc.states, false))
            }
        }
    }

    fn check_encoding(&self, enc: &Tensor) -> Result<()> {
        if enc.shape().len() != 2 || enc.cols() != self.d_enc() {
            return Err(Error::Config(format!(
                "encoding width {:?} does not match the model's key/value input width {}",
                enc.shape(),
                self.d_enc()
            )));
        }
        Ok(())
    }

    /// Decoder pass with cross layers interleaved, recorded on a tape.
    /// Dropout masks are drawn from `dropout_rng` when one is given.
    pub fn forward_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        query: &[usize],
        encoding: Var,
        dropout_rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<ForwardVars> {
        self.check_encoding(tape.value(encoding))?;
        let mut hooks = CrossHooks {
            model: self,
            encoding,
            dropout_rng,
        };
        forward_tape(tape, &self.decoder, &self.decoder_cfg, query, &mut hooks)
    }

    /// Inference-mode logits `T × V`.
    pub fn forward(&self, query: &[usize], encoding: &EncoderOutput) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let enc = tape.frozen(&encoding.states);
        let vars = self.forward_tape(&mut tape, query, enc, None)?;
        Ok(tape.value(vars.logits).clone())
    }

    /// Per-layer keys/values of an encoding, computed once for incremental
    /// decoding.
    pub fn cross_states(&self, encoding: &EncoderOutput) -> Result<CrossStates> {
        self.check_encoding(&encoding.states)?;
        let s = encoding.len();
        let d = encoding.d_enc();
        let hdim = self.cfg.cross_hidden;
        let layers = self
            .cross
            .iter()
            .map(|l| {
                (
                    kernels::matmul(encoding.states.data(), l.wk.data(), s, d, hdim),
                    kernels::matmul(encoding.states.data(), l.wv.data(), s, d, hdim),
                )
            })
            .collect();
        Ok(CrossStates { layers, rows: s })
    }

    /// Greedy generation from `prompt` conditioned on `encoding`, decoding
    /// incrementally with a self-attention KV cache.
    pub fn generate(&self, prompt: &[usize], encoding: &EncoderOutput, max_new: usize, stop: usize) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::Contract("prompt must be nonempty".into()));
        }
        if max_new == 0 {
            return Ok(Vec::new());
        }
        let states = self.cross_states(encoding)?;
        let mut session = XCSession::new(self, &states);
        let mut logits = Vec::new();
        for &t in prompt {
            logits = session.step(t)?;
        }
        decoder::greedy_continue(logits, max_new, stop, |tok| session.step(tok))
    }
}

/// Removes the cross layers and the encoder, returning the original decoder.
pub fn strip_cross_layers(model: &XCModel) -> DecoderWeights {
    let mut d = model.decoder.clone();
    d.frozen = false;
    d
}

struct CrossHooks<'m, 'r> {
    model: &'m XCModel,
    encoding: Var,
    dropout_rng: Option<&'r mut dyn rand::RngCore>,
}

impl<'m, 'r> CrossHooks<'m, 'r> {
    fn apply<'a>(&mut self, tape: &mut Tape<'a>, idx: usize, h: Var) -> Result<Var>
    where
        'm: 'a,
    {
        let heads = self.model.cfg.cross_n_heads;
        let p = self.model.cfg.dropout_p;
        let dropout = match self.dropout_rng.as_deref_mut() {
            Some(rng) if p > 0.0 && tape.is_recording() => {
                let t = tape.value(h).shape()[0];
                let s = tape.value(self.encoding).shape()[0];
                let keep = 1.0 / (1.0 - p);
                Some(
                    (0..heads * t * s)
                        .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
                        .collect(),
                )
            }
            _ => None,
        };
        self.model.cross[idx].apply_tape(tape, h, self.encoding, heads, self.model.decoder_cfg.norm_eps, dropout)
    }
}

impl<'a, 'm: 'a, 'r> BlockHooks<'a> for CrossHooks<'m, 'r> {
    fn before_block(&mut self, tape: &mut Tape<'a>, layer: usize, h: Var) -> Result<Var> {
        match self.model.placement.iter().position(|p| *p == layer) {
            Some(idx) => self.apply(tape, idx, h),
            None => Ok(h),
        }
    }

    fn after_blocks(&mut self, tape: &mut Tape<'a>, h: Var) -> Result<Var> {
        if self.model.cfg.final_layer {
            let idx = self.model.placement.len();
            self.apply(tape, idx, h)
        } else {
            Ok(h)
        }
    }
}

/// Cross-attention keys and values of one encoding, per cross layer.
#[derive(Clone, Debug)]
pub struct CrossStates {
    layers: Vec<(Vec<f32>, Vec<f32>)>,
    rows: usize,
}

struct XCRowHooks<'m> {
    model: &'m XCModel,
    states: &'m CrossStates,
}

impl XCRowHooks<'_> {
    fn apply(&self, idx: usize, row: &mut [f32]) {
        let layer = &self.model.cross[idx];
        let d = self.model.decoder_cfg.d_model;
        let hdim = self.model.cfg.cross_hidden;
        let heads = self.model.cfg.cross_n_heads;
        let (n, _) = kernels::rms_norm(row, layer.norm.data(), self.model.decoder_cfg.norm_eps);
        let q = kernels::matmul(&n, layer.wq.data(), 1, d, hdim);
        let (k, v) = &self.states.layers[idx];
        let shape = AttnShape {
            q_rows: 1,
            kv_rows: self.states.rows,
            n_heads: heads,
            head_dim: hdim / heads,
            causal_offset: None,
        };
        let (a, _) = kernels::attention(&q, k, v, shape, None);
        let o = kernels::matmul(&a, layer.wo.data(), 1, hdim, d);
        let g = layer.gate.data()[0];
        for (x, oi) in row.iter_mut().zip(&o) {
            *x += g * oi;
        }
    }
}

impl RowHooks for XCRowHooks<'_> {
    fn before_block(&mut self, layer: usize, row: &mut [f32]) -> Result<()> {
        if let Some(idx) = self.model.placement.iter().position(|p| *p == layer) {
            self.apply(idx, row);
        }
        Ok(())
    }

    fn after_blocks(&mut self, row: &mut [f32]) -> Result<()> {
        if self.model.cfg.final_layer {
            self.apply(self.model.placement.len(), row);
        }
        Ok(())
    }
}

/// Incremental XC decoding state: a self-attention KV cache plus the fixed
/// cross-attention states of the context.
pub struct XCSession<'m> {
    hooks: XCRowHooks<'m>,
    cache: KVPair,
}

impl<'m> XCSession<'m> {
    pub fn new(model: &'m XCModel, states: &'m CrossStates) -> Self {
        Self {
            hooks: XCRowHooks { model, states },
            cache: KVPair::empty(&model.decoder_cfg),
        }
    }

    pub fn step(&mut self, token: usize) -> Result<Vec<f32>> {
        let model = self.hooks.model;
        decode_step_with(&model.decoder, &model.decoder_cfg, token, &mut self.cache, &mut self.hooks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::forward_full;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn placement_examples() {
        assert_eq!(placement_indices(32, 6, 5).unwrap(), vec![0, 7, 14, 21, 28]);
        assert_eq!(placement_indices(8, 3, 2).unwrap(), vec![0, 4]);
        assert_eq!(placement_indices(4, 0, 4).unwrap(), vec![0, 1, 2, 3]);
        assert!(matches!(placement_indices(8, 3, 3), Err(Error::Config(_))));
        assert!(placement_indices(5, 0, 6).is_err());
    }

    fn tiny(kind: EncoderKind) -> XCModel {
        let dcfg = DecoderConfig {
            n_layers: 4,
            d_model: 16,
            n_heads: 2,
            head_dim: 8,
            vocab_size: 24,
            max_seq: 32,
            rope_theta: 10000.0,
            mlp_hidden: 24,
            norm_eps: 1e-5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dec = DecoderWeights::init(&dcfg, &mut rng).unwrap();
        let cfg = XCConfig {
            n_cross_layers: 2,
            skip: 1,
            final_layer: true,
            cross_hidden: 8,
            cross_n_heads: 2,
            cross_n_kv_heads: 2,
            dropout_p: 0.0,
            use_bias: false,
            encoder: kind,
        };
        let mut b = BidirEncoderConfig::toy(24);
        b.d_enc = 8;
        b.n_heads = 2;
        b.mlp_hidden = 16;
        b.base_max_positions = 16;
        b.max_positions = 32;
        XCModel::new(dcfg, dec, cfg, Some(b), &mut rng).unwrap()
    }

    #[test]
    fn gate_zero_is_identity() {
        for kind in [EncoderKind::DecoderAsEncoder, EncoderKind::SmallBidirectional] {
            let m = tiny(kind);
            let enc = m.encode(&[3, 4, 5, 6]).unwrap();
            let q = [1, 2, 9];
            let xc = m.forward(&q, &enc).unwrap();
            let base = forward_full(&m.decoder, &m.decoder_cfg, &q).unwrap().logits;
            assert!(xc.bit_eq(&base));
        }
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let m = tiny(EncoderKind::SmallBidirectional);
        let bad = EncoderOutput::empty(5, EncoderKind::SmallBidirectional);
        assert!(matches!(m.forward(&[1], &bad), Err(Error::Config(_))));
    }

    #[test]
    fn trainable_sets() {
        let m = tiny(EncoderKind::DecoderAsEncoder);
        assert!(m.trainable_parameters().iter().all(|(n, _)| n.starts_with("cross.")));
        assert_eq!(m.cross.len(), 3);
        let m = tiny(EncoderKind::SmallBidirectional);
        assert!(m.trainable_parameters().iter().any(|(n, _)| n.starts_with("enc.")));
    }

    #[test]
    fn incremental_matches_full_with_open_gates() {
        let mut m = tiny(EncoderKind::DecoderAsEncoder);
        for l in &mut m.cross {
            l.gate = Tensor::scalar(0.7);
        }
        let enc = m.encode(&[3, 4, 5, 6, 7]).unwrap();
        let q = [1, 2, 9, 11];
        let full = m.forward(&q, &enc).unwrap();
        let states = m.cross_states(&enc).unwrap();
        let mut s = XCSession::new(&m, &states);
        for (i, &t) in q.iter().enumerate() {
            let row = s.step(t).unwrap();
            for (a, b) in row.iter().zip(full.row(i)) {
                assert!((a - b).abs() / (1.0 + b.abs()) < 1e-4);
            }
        }
    }

    #[test]
    fn empty_encoding_is_identity_residual() {
        let mut m = tiny(EncoderKind::DecoderAsEncoder);
        for l in &mut m.cross {
            l.gate = Tensor::scalar(1.0);
        }
        let q = [1, 2, 3];
        let xc = m.forward(&q, &EncoderOutput::empty(16, EncoderKind::DecoderAsEncoder)).unwrap();
        let base = forward_full(&m.decoder, &m.decoder_cfg, &q).unwrap().logits;
        assert!(xc.bit_eq(&base));
    }
}
