//! Multitask fine-tuning of the cross layers (and the small encoder when
//! present): answering, context repetition and fill-in-the-middle, with
//! AdamW and a linear warmup/decay schedule.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{forward_tape, DecoderConfig, DecoderWeights, NoHooks};
use crate::error::{Error, Result};
use crate::synth::QARecord;
use crate::tensor::{Tape, Tensor};
pub use crate::vocab::ReservedTokens;
use crate::xc::XCModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f32,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub weight_decay: f32,
    pub max_grad_norm: f32,
    /// Longest infilled middle drawn for the FIM tasks.
    pub max_middle: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn reference() -> Self {
        Self {
            base_lr: 2e-4,
            warmup_steps: 2500,
            total_steps: 40000,
            batch_size: 256,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-6,
            weight_decay: 0.001,
            max_grad_norm: 1.0,
            max_middle: 16,
            seed: 0,
        }
    }

    pub fn toy() -> Self {
        Self {
            base_lr: 3e-3,
            warmup_steps: 200,
            total_steps: 6000,
            batch_size: 32,
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup_steps >= self.total_steps {
            return bad(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 || self.max_middle == 0 {
            return bad("batch_size and max_middle must be positive".into());
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("adam_eps", self.adam_eps),
            ("max_grad_norm", self.max_grad_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1)"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} is negative", self.weight_decay));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f32 {
    let (s, w, t) = (step as f64, cfg.warmup_steps as f64, cfg.total_steps as f64);
    let base = cfg.base_lr as f64;
    let lr = if s <= w {
        if w == 0.0 {
            base
        } else {
            base * s / w
        }
    } else {
        base * ((t - s) / (t - w)).max(0.0)
    };
    lr as f32
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    Answer,
    RepeatAsIs,
    InfillPsm,
    InfillSpm,
}

impl TaskKind {
    pub const AUXILIARY: [TaskKind; 3] = [TaskKind::RepeatAsIs, TaskKind::InfillPsm, TaskKind::InfillSpm];
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Answer,
        TaskKind::RepeatAsIs,
        TaskKind::InfillPsm,
        TaskKind::InfillSpm,
    ];
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Answer => "answer",
            TaskKind::RepeatAsIs => "repeat",
            TaskKind::InfillPsm => "psm",
            TaskKind::InfillSpm => "spm",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FimOrder {
    Psm,
    Spm,
}

/// Full FIM token layout. The prompt runs through `FIM_MID`; everything
/// after it is the target.
pub fn build_fim_sequence(
    context: &[usize],
    split: (usize, usize),
    order: FimOrder,
    reserved: &ReservedTokens,
) -> Result<Vec<usize>> {
    let (i, j) = split;
    if i > j || j > context.len() {
        return Err(Error::Range(format!(
            "split ({i}, {j}) invalid for a context of {} tokens",
            context.len()
        )));
    }
    let (pre, mid, suf) = (&context[..i], &context[i..j], &context[j..]);
    let mut out = Vec::with_capacity(context.len() + 4);
    match order {
        FimOrder::Psm => {
            out.push(reserved.fim_pre);
            out.extend_from_slice(pre);
            out.push(reserved.fim_suf);
            out.extend_from_slice(suf);
        }
        FimOrder::Spm => {
            out.push(reserved.fim_suf);
            out.extend_from_slice(suf);
            out.push(reserved.fim_pre);
            out.extend_from_slice(pre);
        }
    }
    out.push(reserved.fim_mid);
    out.extend_from_slice(mid);
    out.push(reserved.eos);
    Ok(out)
}

/// One teacher-forced sequence. Tokens from `loss_start` on are targets;
/// the model reads `tokens[..n-1]` and predicts `tokens[1..]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub task: TaskKind,
    pub contexts: Vec<Vec<usize>>,
    /// Precomputed context encoding, used instead of `contexts` when set.
    pub encoded: Option<Tensor>,
    pub tokens: Vec<usize>,
    pub loss_start: usize,
}

impl TrainExample {
    pub fn input(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn targets(&self) -> &[usize] {
        &self.tokens[1..]
    }

    pub fn include(&self) -> Vec<bool> {
        (1..self.tokens.len()).map(|p| p >= self.loss_start).collect()
    }

    /// The prompt: everything before the first target token.
    pub fn prompt(&self) -> &[usize] {
        &self.tokens[..self.loss_start]
    }

    pub fn target(&self) -> &[usize] {
        &self.tokens[self.loss_start..]
    }

    /// The same task with the context placed in the decoder prompt instead
    /// of behind cross-attention.
    pub fn in_context(&self) -> TrainExample {
        let ctx = self.contexts.concat();
        let mut tokens = ctx.clone();
        tokens.extend_from_slice(&self.tokens);
        TrainExample {
            task: self.task,
            contexts: Vec::new(),
            encoded: None,
            tokens,
            loss_start: self.loss_start + ctx.len(),
        }
    }
}

/// Random FIM split with a middle of at most `max_middle` tokens.
pub fn sample_split(n: usize, max_middle: usize, rng: &mut impl Rng) -> (usize, usize) {
    let m = rng.gen_range(0..=max_middle.min(n));
    let i = rng.gen_range(0..=n - m);
    (i, i + m)
}

pub fn make_example(
    record: &QARecord,
    task: TaskKind,
    reserved: &ReservedTokens,
    max_middle: usize,
    rng: &mut impl Rng,
) -> Result<TrainExample> {
    let ctx = record.joined_context();
    let (tokens, loss_start) = match task {
        TaskKind::Answer => {
            let mut t = record.query.clone();
            t.push(reserved.answer);
            let start = t.len();
            t.extend_from_slice(&record.answers[0]);
            t.push(reserved.eos);
            (t, start)
        }
        TaskKind::RepeatAsIs => {
            let mut t = vec![reserved.repeat];
            t.extend_from_slice(&ctx);
            t.push(reserved.eos);
            (t, 1)
        }
        TaskKind::InfillPsm | TaskKind::InfillSpm => {
            let order = if task == TaskKind::InfillPsm { FimOrder::Psm } else { FimOrder::Spm };
            let split = sample_split(ctx.len(), max_middle, rng);
            let t = build_fim_sequence(&ctx, split, order, reserved)?;
            let start = t.len() - (split.1 - split.0) - 1;
            (t, start)
        }
    };
    Ok(TrainExample {
        task,
        contexts: record.contexts.clone(),
        encoded: None,
        tokens,
        loss_start,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScheduledBatch {
    /// 1 for the answering pass, 2 for the auxiliary pass.
    pub pass: u8,
    pub items: Vec<(usize, TaskKind)>,
}

fn epoch_rng(seed: u64, epoch: usize, pass: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 2) | pass);
    rng
}

/// Two passes over the dataset: answering batches over one shuffle, then
/// auxiliary batches over an independent shuffle with a uniformly drawn
/// task per example.
pub fn epoch_schedule(n: usize, batch_size: usize, epoch: usize, seed: u64) -> Result<Vec<ScheduledBatch>> {
    if n == 0 || batch_size == 0 {
        return Err(Error::Contract("empty dataset or batch size".into()));
    }
    let mut out = Vec::new();
    let mut rng = epoch_rng(seed, epoch, 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for chunk in order.chunks(batch_size) {
        out.push(ScheduledBatch {
            pass: 1,
            items: chunk.iter().map(|i| (*i, TaskKind::Answer)).collect(),
        });
    }
    let mut rng = epoch_rng(seed, epoch, 2);
    order.shuffle(&mut rng);
    let tasks: Vec<TaskKind> = order
        .iter()
        .map(|_| TaskKind::AUXILIARY[rng.gen_range(0..3)])
        .collect();
    for (chunk, tk) in order.chunks(batch_size).zip(tasks.chunks(batch_size)) {
        out.push(ScheduledBatch {
            pass: 2,
            items: chunk.iter().copied().zip(tk.iter().copied()).collect(),
        });
    }
    Ok(out)
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| (*x as f64).powi(2))
        .sum::<f64>()
        .sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

/// AdamW moments for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { m, v, t: 0 }
    }

    /// One update with decoupled weight decay.
    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f32>], lr: f32, cfg: &TrainConfig) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w -= lr * (mh / (vh.sqrt() + cfg.adam_eps) + cfg.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Loss of one example and its gradients for every trainable tensor of the
/// model, in `trainable_parameters` order.
pub fn example_grads(model: &XCModel, ex: &TrainExample, dropout: Option<&mut dyn rand::RngCore>) -> Result<(f32, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let enc = match &ex.encoded {
        Some(t) => tape.frozen(t),
        None => model.encode_contexts_tape(&mut tape, &ex.contexts)?,
    };
    let vars = model.forward_tape(&mut tape, ex.input(), enc, dropout)?;
    let loss = tape.cross_entropy(vars.logits, ex.targets(), &ex.include())?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let out = model
        .trainable_parameters()
        .into_iter()
        .map(|(_, t)| grads.wrt(t).map_or_else(|| vec![0.0; t.numel()], <[f32]>::to_vec))
        .collect();
    Ok((value, out))
}

/// Loss and gradients of a plain decoder language-model example, in
/// `named_tensors` order. The decoder must not be frozen.
pub fn decoder_example_grads(
    weights: &DecoderWeights,
    cfg: &DecoderConfig,
    ex: &TrainExample,
) -> Result<(f32, Vec<Vec<f32>>)> {
    if weights.frozen {
        return Err(Error::Contract("cannot train a frozen decoder".into()));
    }
    let mut tape = Tape::new();
    let vars = forward_tape(&mut tape, weights, cfg, ex.input(), &mut NoHooks)?;
    let loss = tape.cross_entropy(vars.logits, ex.targets(), &ex.include())?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let out = weights
        .named_tensors()
        .into_iter()
        .map(|(_, t)| grads.wrt(t).map_or_else(|| vec![0.0; t.numel()], <[f32]>::to_vec))
        .collect();
    Ok((value, out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub task: String,
    pub loss: f32,
    pub lr: f32,
    pub grad_norm: f32,
}

impl StepStats {
    pub const CSV_HEADER: &'static str = "step,task,loss,lr,grad_norm";

    pub fn csv_row(&self) -> String {
        format!("{},{},{:.6},{:.6e},{:.6}", self.step, self.task, self.loss, self.lr, self.grad_norm)
    }
}

fn batch_label(batch: &[TrainExample]) -> String {
    let mut tasks: Vec<String> = Vec::new();
    for ex in batch {
        let s = ex.task.to_string();
        if !tasks.contains(&s) {
            tasks.push(s);
        }
    }
    tasks.join("+")
}

fn mean_grads(batch_len: usize, total: &mut Option<Vec<Vec<f32>>>, g: Vec<Vec<f32>>) {
    let s = 1.0 / batch_len as f32;
    match total {
        None => {
            *total = Some(
                g.into_iter()
                    .map(|mut v| {
                        v.iter_mut().for_each(|x| *x *= s);
                        v
                    })
                    .collect(),
            )
        }
        Some(t) => {
            for (a, b) in t.iter_mut().zip(g) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y * s;
                }
            }
        }
    }
}

fn check_finite(loss: f32, step: usize, label: &str, grad_norm: f32) -> Result<()> {
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::Numeric(format!(
            "step {step} ({label}): loss {loss}, grad norm {grad_norm}"
        )));
    }
    Ok(())
}

/// One optimizer step over `batch` (per-example mean losses, averaged).
/// Only the model's trainable tensors change.
pub fn train_step(
    model: &mut XCModel,
    batch: &[TrainExample],
    opt: &mut AdamW,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let label = batch_label(batch);
    let mut total = None;
    let mut loss = 0.0f64;
    for ex in batch {
        let (l, g) = example_grads(model, ex, Some(&mut *rng))?;
        check_finite(l, step, &label, 0.0)?;
        loss += l as f64;
        mean_grads(batch.len(), &mut total, g);
    }
    let loss = (loss / batch.len() as f64) as f32;
    let mut grads = total.expect("nonempty batch");
    let grad_norm = clip_grad_norm(&mut grads, cfg.max_grad_norm);
    check_finite(loss, step, &label, grad_norm)?;
    let lr = lr_at(step, cfg);
    opt.update(model.trainable_tensors_mut(), &grads, lr, cfg)?;
    Ok(StepStats {
        step,
        task: label,
        loss,
        lr,
        grad_norm,
    })
}

/// One optimizer step on all decoder weights.
pub fn decoder_train_step(
    weights: &mut DecoderWeights,
    cfg: &DecoderConfig,
    batch: &[TrainExample],
    opt: &mut AdamW,
    tcfg: &TrainConfig,
    step: usize,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let label = batch_label(batch);
    let mut total = None;
    let mut loss = 0.0f64;
    for ex in batch {
        let (l, g) = decoder_example_grads(weights, cfg, ex)?;
        check_finite(l, step, &label, 0.0)?;
        loss += l as f64;
        mean_grads(batch.len(), &mut total, g);
    }
    let loss = (loss / batch.len() as f64) as f32;
    let mut grads = total.expect("nonempty batch");
    let grad_norm = clip_grad_norm(&mut grads, tcfg.max_grad_norm);
    check_finite(loss, step, &label, grad_norm)?;
    let lr = lr_at(step, tcfg);
    opt.update(weights.tensors_mut(), &grads, lr, tcfg)?;
    Ok(StepStats {
        step,
        task: label,
        loss,
        lr,
        grad_norm,
    })
}

/// Randomness for one step, independent of how the run was split up.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    rng.set_stream(step as u64);
    rng
}

/// Fine-tuning state that survives checkpoints: the optimizer and the
/// number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub opt: AdamW,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: &XCModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(model.trainable_parameters().iter().map(|(_, t)| t.numel()));
        Ok(Self { cfg, opt, step: 0 })
    }

    /// The examples of global step `step`. Epochs are laid end to end.
    pub fn batch_at(&self, records: &[QARecord], reserved: &ReservedTokens, step: usize) -> Result<Vec<TrainExample>> {
        let per_epoch = records.len().div_ceil(self.cfg.batch_size) * 2;
        let sched = epoch_schedule(records.len(), self.cfg.batch_size, step / per_epoch, self.cfg.seed)?;
        let batch = &sched[step % per_epoch];
        let mut rng = step_rng(self.cfg.seed, step);
        batch
            .items
            .iter()
            .map(|(i, task)| make_example(&records[*i], *task, reserved, self.cfg.max_middle, &mut rng))
            .collect()
    }

    /// Runs until `until` steps have been taken (capped at `total_steps`).
    /// `encodings`, when given, holds one precomputed encoding per record.
    pub fn run(
        &mut self,
        model: &mut XCModel,
        records: &[QARecord],
        encodings: Option<&[Tensor]>,
        until: usize,
        mut log: impl FnMut(&StepStats) -> Result<()>,
    ) -> Result<()> {
        let reserved = ReservedTokens::standard();
        let until = until.min(self.cfg.total_steps);
        let per_epoch = records.len().div_ceil(self.cfg.batch_size) * 2;
        while self.step < until {
            let mut batch = self.batch_at(records, &reserved, self.step)?;
            if let Some(enc) = encodings {
                let sched = epoch_schedule(records.len(), self.cfg.batch_size, self.step / per_epoch, self.cfg.seed)?;
                for (ex, (i, _)) in batch.iter_mut().zip(&sched[self.step % per_epoch].items) {
                    ex.encoded = Some(enc[*i].clone());
                }
            }
            let mut rng = step_rng(self.cfg.seed ^ 1, self.step);
            let stats = train_step(model, &batch, &mut self.opt, &self.cfg, self.step, &mut rng)?;
            log(&stats)?;
            self.step += 1;
        }
        Ok(())
    }
}

/// Writes training-log rows as CSV.
pub fn write_log(rows: &[StepStats], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{}", StepStats::CSV_HEADER)?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}
