//! Preparation of a base decoder: a short causal-LM run in which every
//! task sees its context in the prompt. The result plays the part of a
//! pretrained language model that is then frozen.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::decoder::{greedy_generate, DecoderConfig, DecoderWeights};
use crate::error::{Error, Result};
use crate::synth::{generate_one, GenConfig, NeedlePosition, QARecord};
use crate::trainer::{decoder_train_step, make_example, step_rng, AdamW, StepStats, TaskKind, TrainConfig, TrainExample};
use crate::vocab::{ReservedTokens, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f32,
    pub warmup_steps: usize,
    pub min_context: usize,
    pub max_context: usize,
    pub n_distractor_facts: usize,
    pub max_middle: usize,
    /// Leading steps that train only the repeat task.
    pub repeat_only_steps: usize,
    /// Longest context during the repeat-only steps.
    pub repeat_max_context: usize,
    /// Seeds the initial decoder weights.
    pub init_seed: u64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 12000,
            batch_size: 16,
            base_lr: 3e-3,
            warmup_steps: 100,
            min_context: 8,
            max_context: 64,
            n_distractor_facts: 7,
            max_middle: 16,
            repeat_only_steps: 3000,
            repeat_max_context: 32,
            init_seed: 1,
            seed: 7,
        }
    }
}

impl PretrainConfig {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            batch_size: self.batch_size,
            weight_decay: 0.0,
            max_middle: self.max_middle,
            seed: self.seed,
            ..TrainConfig::reference()
        }
    }

    pub fn validate(&self, cfg: &DecoderConfig) -> Result<()> {
        self.train_config().validate()?;
        if self.min_context > self.max_context
            || self.min_context > self.repeat_max_context
            || 2 * self.max_context.max(self.repeat_max_context) + 4 > cfg.max_seq
        {
            return Err(Error::Config(format!(
                "context lengths {}..={} do not fit a {}-token window",
                self.min_context, self.max_context, cfg.max_seq
            )));
        }
        Ok(())
    }
}

/// A random in-prompt task over a fresh context.
pub fn sample_example(pc: &PretrainConfig, vocab: &Vocab, rng: &mut impl Rng, step: usize) -> Result<TrainExample> {
    let warm = step < pc.repeat_only_steps;
    let max_context = if warm { pc.repeat_max_context } else { pc.max_context };
    let record = sample_record(pc, vocab, max_context, rng)?;
    let task = if warm {
        TaskKind::RepeatAsIs
    } else {
        TaskKind::ALL[rng.gen_range(0..4)]
    };
    Ok(make_example(&record, task, &ReservedTokens::standard(), pc.max_middle, rng)?.in_context())
}

fn sample_record(pc: &PretrainConfig, vocab: &Vocab, max_context: usize, rng: &mut impl Rng) -> Result<QARecord> {
    let len = rng.gen_range(pc.min_context..=max_context);
    let gen = GenConfig {
        n_records: 1,
        context_len: len,
        n_distractor_facts: pc.n_distractor_facts.min(len / 6),
        needle_position: NeedlePosition::Random,
        vocab: *vocab,
        ..GenConfig::default()
    };
    gen.validate()?;
    generate_one(&gen, rng)
}

/// The decoder `pretrain_decoder` produces from `PretrainConfig::default()`
/// on the toy geometry, bundled so training does not have to wait for it.
pub fn toy_base() -> Result<(DecoderConfig, DecoderWeights)> {
    crate::checkpoint::decoder_from_bytes(
        include_bytes!("../assets/base/checkpoint.json"),
        include_bytes!("../assets/base/weights.xcc"),
    )
}

/// Fresh weights drawn from `pc.init_seed`.
pub fn init_decoder(cfg: &DecoderConfig, pc: &PretrainConfig) -> Result<DecoderWeights> {
    DecoderWeights::init(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(pc.init_seed))
}

/// Trains every decoder tensor, then marks the decoder frozen.
pub fn pretrain_decoder(
    weights: &mut DecoderWeights,
    cfg: &DecoderConfig,
    vocab: &Vocab,
    pc: &PretrainConfig,
    mut log: impl FnMut(&StepStats),
) -> Result<()> {
    pc.validate(cfg)?;
    let tcfg = pc.train_config();
    weights.frozen = false;
    let mut opt = AdamW::new(weights.named_tensors().iter().map(|(_, t)| t.numel()));
    for step in 0..pc.steps {
        let mut rng = step_rng(pc.seed, step);
        let batch = (0..pc.batch_size)
            .map(|_| sample_example(pc, vocab, &mut rng, step))
            .collect::<Result<Vec<_>>>()?;
        let stats = decoder_train_step(weights, cfg, &batch, &mut opt, &tcfg, step)?;
        log(&stats);
    }
    weights.frozen = true;
    Ok(())
}

/// Fraction of in-prompt examples of `task` whose target the decoder
/// reproduces exactly under greedy decoding.
pub fn in_context_accuracy(
    weights: &DecoderWeights,
    cfg: &DecoderConfig,
    vocab: &Vocab,
    pc: &PretrainConfig,
    task: TaskKind,
    n: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let reserved = ReservedTokens::standard();
    let mut hits = 0;
    for _ in 0..n {
        let rec = sample_record(pc, vocab, pc.max_context, rng)?;
        let ex = make_example(&rec, task, &reserved, pc.max_middle, rng)?.in_context();
        let out = greedy_generate(weights, cfg, ex.prompt(), ex.target().len(), reserved.eos)?;
        hits += usize::from(out == ex.target());
    }
    Ok(hits as f64 / n as f64)
}
