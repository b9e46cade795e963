//! Llama-style decoder-only transformer: RMSNorm, rotary attention, gated
//! SiLU MLP. Full-sequence forward runs on a [`Tape`]; incremental decoding
//! runs on plain kernels against a [`KVPair`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, AttnShape};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rope_theta: f32,
    pub mlp_hidden: usize,
    pub norm_eps: f32,
}

impl DecoderConfig {
    /// Llama 2-7B geometry, used for size accounting only.
    pub fn llama2_7b() -> Self {
        Self {
            n_layers: 32,
            d_model: 4096,
            n_heads: 32,
            head_dim: 128,
            vocab_size: 32000,
            max_seq: 4096,
            rope_theta: 10000.0,
            mlp_hidden: 11008,
            norm_eps: 1e-5,
        }
    }

    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            head_dim: 8,
            vocab_size,
            max_seq: 160,
            rope_theta: 10000.0,
            mlp_hidden: 64,
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.head_dim,
            self.vocab_size,
            self.mlp_hidden,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("decoder geometry fields must be positive".into()));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(Error::Config(format!(
                "n_heads ({}) × head_dim ({}) must equal d_model ({})",
                self.n_heads, self.head_dim, self.d_model
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config("head_dim must be even for rotary encoding".into()));
        }
        if self.max_seq < 2 {
            return Err(Error::Config("max_seq must be at least 2".into()));
        }
        if !(self.rope_theta > 0.0) {
            return Err(Error::Config("rope_theta must be positive".into()));
        }
        Ok(())
    }

    /// Canonical little-endian encoding, the input of geometry digests.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = b"decoder".to_vec();
        for v in [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.head_dim,
            self.vocab_size,
            self.max_seq,
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
pub struct BlockWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights {
    pub embed: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: Tensor,
    /// `V × d_model`
    pub lm_head: Tensor,
    /// Set when the decoder is the base of an XC model; no optimizer step
    /// may touch a frozen decoder.
    pub frozen: bool,
}

impl DecoderWeights {
    pub fn init(cfg: &DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
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
                w_down: Tensor::randn(&[f, d], 1.0 / (f as f32).sqrt() / (2.0 * cfg.n_layers as f32).sqrt(), rng),
            })
            .collect();
        Ok(Self {
            embed: Tensor::randn(&[cfg.vocab_size, d], 1.0, rng),
            blocks,
            final_norm: Tensor::ones(&[d]),
            lm_head: Tensor::randn(&[cfg.vocab_size, d], proj, rng),
            frozen: false,
        })
    }

    /// Stable, named view of every tensor.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
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
                out.push((format!("blocks.{i}.{n}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
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
        out.push(&mut self.lm_head);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuilds weights from tensors in [`Self::named_tensors`] order.
    pub fn from_tensors(cfg: &DecoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let expected = 3 + 9 * cfg.n_layers;
        if tensors.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} decoder tensors, found {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let embed = next();
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockWeights {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                mlp_norm: next(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            })
            .collect();
        let w = Self {
            embed,
            blocks,
            final_norm: next(),
            lm_head: next(),
            frozen: false,
        };
        w.check_geometry(cfg)?;
        Ok(w)
    }

    pub fn check_geometry(&self, cfg: &DecoderConfig) -> Result<()> {
        let template = DecoderWeights::shapes(cfg);
        let actual: Vec<Vec<usize>> = self.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        if template != actual {
            return Err(Error::Config("decoder weights do not match the configured geometry".into()));
        }
        Ok(())
    }

    fn shapes(cfg: &DecoderConfig) -> Vec<Vec<usize>> {
        let (d, f, v) = (cfg.d_model, cfg.mlp_hidden, cfg.vocab_size);
        let mut s = vec![vec![v, d]];
        for _ in 0..cfg.n_layers {
            s.extend([
                vec![d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d],
                vec![d, f],
                vec![d, f],
                vec![f, d],
            ]);
        }
        s.push(vec![d]);
        s.push(vec![v, d]);
        s
    }
}

/// Per-layer attention keys and values (post-rotary) of processed tokens,
/// each layer laid out `T × (H·d_h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KVPair {
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
    pub width: usize,
    len: usize,
}

impl KVPair {
    pub fn empty(cfg: &DecoderConfig) -> Self {
        Self {
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            width: cfg.n_heads * cfg.head_dim,
            len: 0,
        }
    }

    pub fn from_parts(keys: Vec<Vec<f32>>, values: Vec<Vec<f32>>, width: usize) -> Result<Self> {
        if keys.len() != values.len() || width == 0 {
            return Err(Error::Cache("key/value layer counts differ".into()));
        }
        let len = keys.first().map_or(0, |k| k.len() / width);
        for (k, v) in keys.iter().zip(&values) {
            if k.len() != len * width || v.len() != len * width {
                return Err(Error::Cache("key/value token counts differ".into()));
            }
        }
        Ok(Self {
            keys,
            values,
            width,
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    fn check(&self, cfg: &DecoderConfig) -> Result<()> {
        if self.keys.len() != cfg.n_layers || self.width != cfg.n_heads * cfg.head_dim {
            return Err(Error::Cache(format!(
                "cache geometry ({} layers, width {}) does not match decoder ({} layers, width {})",
                self.keys.len(),
                self.width,
                cfg.n_layers,
                cfg.n_heads * cfg.head_dim
            )));
        }
        Ok(())
    }
}

/// Insertion points for modules interleaved with the decoder blocks.
pub trait BlockHooks<'a> {
    /// Runs before self-attention block `layer`.
    fn before_block(&mut self, tape: &mut Tape<'a>, layer: usize, h: Var) -> Result<Var>;
    /// Runs after the last block, before the final norm.
    fn after_blocks(&mut self, tape: &mut Tape<'a>, h: Var) -> Result<Var>;
}

pub struct NoHooks;

impl<'a> BlockHooks<'a> for NoHooks {
    fn before_block(&mut self, _: &mut Tape<'a>, _: usize, h: Var) -> Result<Var> {
        Ok(h)
    }
    fn after_blocks(&mut self, _: &mut Tape<'a>, h: Var) -> Result<Var> {
        Ok(h)
    }
}

/// Handles to the values recorded by [`forward_tape`].
pub struct ForwardVars {
    pub logits: Var,
    /// Final-norm output, the representation fed to the LM head.
    pub last_hidden: Var,
    /// Residual stream entering each block (after any hook ran).
    pub layer_inputs: Vec<Var>,
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

fn check_tokens(cfg: &DecoderConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Contract("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::Length {
            len: tokens.len(),
            max: cfg.max_seq,
        });
    }
    if let Some(bad) = tokens.iter().find(|t| **t >= cfg.vocab_size) {
        return Err(Error::Range(format!("token {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    Ok(())
}

/// One pre-norm transformer block on a tape. Returns `(output, k, v)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_tape<'a>(
    tape: &mut Tape<'a>,
    b: &'a BlockWeights,
    trainable: bool,
    h: Var,
    positions: &[usize],
    n_heads: usize,
    head_dim: usize,
    theta: f32,
    eps: f32,
    causal: bool,
) -> Result<(Var, Var, Var)> {
    let w = |tape: &mut Tape<'a>, t: &'a Tensor| tape.input(t, trainable);
    let norm_w = w(tape, &b.attn_norm);
    let n = tape.rms_norm(h, norm_w, eps)?;
    let (wq, wk, wv, wo) = (w(tape, &b.wq), w(tape, &b.wk), w(tape, &b.wv), w(tape, &b.wo));
    let q = tape.matmul(n, wq)?;
    let k = tape.matmul(n, wk)?;
    let v = tape.matmul(n, wv)?;
    let q = tape.rope(q, positions, n_heads, head_dim, theta)?;
    let k = tape.rope(k, positions, n_heads, head_dim, theta)?;
    let a = tape.attention(q, k, v, n_heads, causal.then_some(0), None)?;
    let o = tape.matmul(a, wo)?;
    let h = tape.add(h, o)?;

    let mlp_norm = w(tape, &b.mlp_norm);
    let n = tape.rms_norm(h, mlp_norm, eps)?;
    let (wg, wu, wd) = (w(tape, &b.w_gate), w(tape, &b.w_up), w(tape, &b.w_down));
    let gate = tape.matmul(n, wg)?;
    let gate = tape.silu(gate);
    let up = tape.matmul(n, wu)?;
    let m = tape.mul(gate, up)?;
    let m = tape.matmul(m, wd)?;
    let h = tape.add(h, m)?;
    Ok((h, k, v))
}

/// Full causal forward pass recorded on `tape`. Weights enter as trainable
/// leaves unless the decoder is frozen.
pub fn forward_tape<'a>(
    tape: &mut Tape<'a>,
    weights: &'a DecoderWeights,
    cfg: &DecoderConfig,
    tokens: &[usize],
    hooks: &mut dyn BlockHooks<'a>,
) -> Result<ForwardVars> {
    check_tokens(cfg, tokens)?;
    let trainable = !weights.frozen;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let embed = tape.input(&weights.embed, trainable);
    let mut h = tape.embedding(embed, tokens)?;
    let mut layer_inputs = Vec::with_capacity(cfg.n_layers);
    let mut keys = Vec::with_capacity(cfg.n_layers);
    let mut values = Vec::with_capacity(cfg.n_layers);
    for (l, b) in weights.blocks.iter().enumerate() {
        h = hooks.before_block(tape, l, h)?;
        layer_inputs.push(h);
        let (out, k, v) = block_tape(
            tape,
            b,
            trainable,
            h,
            &positions,
            cfg.n_heads,
            cfg.head_dim,
            cfg.rope_theta,
            cfg.norm_eps,
            true,
        )?;
        h = out;
        keys.push(k);
        values.push(v);
    }
    h = hooks.after_blocks(tape, h)?;
    let fnorm = tape.input(&weights.final_norm, trainable);
    let last_hidden = tape.rms_norm(h, fnorm, cfg.norm_eps)?;
    let head = tape.input(&weights.lm_head, trainable);
    let logits = tape.matmul_bt(last_hidden, head)?;
    Ok(ForwardVars {
        logits,
        last_hidden,
        layer_inputs,
        keys,
        values,
    })
}

/// Materialized result of an inference-mode full forward pass.
#[derive(Clone, Debug)]
pub struct FullOutput {
    /// `T × V`
    pub logits: Tensor,
    /// Residual stream entering each block, `L` tensors of `T × d_model`.
    pub hidden_per_layer: Vec<Tensor>,
    /// `T × d_model`, final-norm output before the LM head.
    pub last_hidden: Tensor,
    pub kv: KVPair,
}

pub fn forward_full(weights: &DecoderWeights, cfg: &DecoderConfig, tokens: &[usize]) -> Result<FullOutput> {
    let mut tape = Tape::inference();
    let vars = forward_tape(&mut tape, weights, cfg, tokens, &mut NoHooks)?;
    let take = |v: Var| tape.value(v).clone();
    let keys = vars.keys.iter().map(|k| take(*k).into_data()).collect();
    let values = vars.values.iter().map(|v| take(*v).into_data()).collect();
    Ok(FullOutput {
        logits: take(vars.logits),
        hidden_per_layer: vars.layer_inputs.iter().map(|v| take(*v)).collect(),
        last_hidden: take(vars.last_hidden),
        kv: KVPair::from_parts(keys, values, cfg.n_heads * cfg.head_dim)?,
    })
}

/// Row-level hook for incremental decoding.
pub trait RowHooks {
    fn before_block(&mut self, layer: usize, row: &mut [f32]) -> Result<()>;
    fn after_blocks(&mut self, row: &mut [f32]) -> Result<()>;
}

impl RowHooks for NoHooks {
    fn before_block(&mut self, _: usize, _: &mut [f32]) -> Result<()> {
        Ok(())
    }
    fn after_blocks(&mut self, _: &mut [f32]) -> Result<()> {
        Ok(())
    }
}

fn row_matmul(x: &[f32], w: &Tensor) -> Vec<f32> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    kernels::matmul(x, w.data(), 1, k, n)
}

/// Appends one token to `cache` and returns its logits (length `V`).
pub fn decode_step_with(
    weights: &DecoderWeights,
    cfg: &DecoderConfig,
    token: usize,
    cache: &mut KVPair,
    hooks: &mut dyn RowHooks,
) -> Result<Vec<f32>> {
    cache.check(cfg)?;
    if cache.len() >= cfg.max_seq {
        return Err(Error::Length {
            len: cache.len() + 1,
            max: cfg.max_seq,
        });
    }
    if token >= cfg.vocab_size {
        return Err(Error::Range(format!("token {token} outside vocabulary of {}", cfg.vocab_size)));
    }
    let pos = cache.len();
    let (d, eps) = (cfg.d_model, cfg.norm_eps);
    let mut x = weights.embed.row(token).to_vec();
    for (l, b) in weights.blocks.iter().enumerate() {
        hooks.before_block(l, &mut x)?;
        let (n, _) = kernels::rms_norm(&x, b.attn_norm.data(), eps);
        let mut q = row_matmul(&n, &b.wq);
        let mut k = row_matmul(&n, &b.wk);
        let v = row_matmul(&n, &b.wv);
        kernels::rope_apply(&mut q, &[pos], cfg.n_heads, cfg.head_dim, cfg.rope_theta, false);
        kernels::rope_apply(&mut k, &[pos], cfg.n_heads, cfg.head_dim, cfg.rope_theta, false);
        cache.keys[l].extend_from_slice(&k);
        cache.values[l].extend_from_slice(&v);
        let shape = AttnShape {
            q_rows: 1,
            kv_rows: pos + 1,
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim,
            causal_offset: None,
        };
        let (a, _) = kernels::attention(&q, &cache.keys[l], &cache.values[l], shape, None);
        let o = row_matmul(&a, &b.wo);
        for (xi, oi) in x.iter_mut().zip(&o) {
            *xi += oi;
        }
        let (n, _) = kernels::rms_norm(&x, b.mlp_norm.data(), eps);
        let gate = row_matmul(&n, &b.w_gate);
        let up = row_matmul(&n, &b.w_up);
        let m: Vec<f32> = gate.iter().zip(&up).map(|(g, u)| kernels::silu(*g) * u).collect();
        let m = row_matmul(&m, &b.w_down);
        for (xi, mi) in x.iter_mut().zip(&m) {
            *xi += mi;
        }
    }
    cache.len += 1;
    hooks.after_blocks(&mut x)?;
    let (n, _) = kernels::rms_norm(&x, weights.final_norm.data(), eps);
    debug_assert_eq!(n.len(), d);
    Ok(kernels::matmul_bt(&n, weights.lm_head.data(), 1, d, cfg.vocab_size))
}

pub fn decode_step(weights: &DecoderWeights, cfg: &DecoderConfig, token: usize, cache: &mut KVPair) -> Result<Vec<f32>> {
    decode_step_with(weights, cfg, token, cache, &mut NoHooks)
}

/// Index of the largest logit; ties go to the smallest index.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation from `first_logits` (the prediction after the last
/// consumed token), stepping the cache with each emitted token.
pub(crate) fn greedy_continue(
    first_logits: Vec<f32>,
    max_new: usize,
    stop: usize,
    mut step: impl FnMut(usize) -> Result<Vec<f32>>,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    let mut logits = first_logits;
    for i in 0..max_new {
        let tok = argmax(&logits);
        out.push(tok);
        if tok == stop || i + 1 == max_new {
            break;
        }
        logits = step(tok)?;
    }
    Ok(out)
}

/// Argmax decoding. The stop token is included in the output when emitted.
pub fn greedy_generate(
    weights: &DecoderWeights,
    cfg: &DecoderConfig,
    prompt: &[usize],
    max_new: usize,
    stop: usize,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Contract("prompt must be nonempty".into()));
    }
    if max_new == 0 {
        return Ok(Vec::new());
    }
    let full = forward_full(weights, cfg, prompt)?;
    let mut cache = full.kv;
    let last = full.logits.row(prompt.len() - 1).to_vec();
    greedy_continue(last, max_new, stop, |tok| decode_step(weights, cfg, tok, &mut cache))
}
