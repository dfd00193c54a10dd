//! Training: the variational-bound objective specialised to the absorbing
//! chain, masked-LM pretraining, AdamW, and the step loop.
//!
//! With the denoiser predicting `x0` and the reverse kernel defined as
//! `p(x_{t-1} | x_t) = sum_x0 q(x_{t-1} | x_t, x0) p(x0 | x_t)`, the KL term
//! at a masked position collapses to `reveal * -ln p(x0_i | x_t)` where
//! `reveal = (a_{t-1} - a_t) / (1 - a_t)`. Unmasked positions contribute
//! nothing. One step `t ~ U{1..T}` is drawn per example and the sampled term
//! is weighted by `T`.

use std::time::Instant;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{SurprisalTable, TokenSeq, MASK_ID, NUM_SPECIALS};
use crate::denoiser::{Denoiser, DenoiserParams, Logits, Scalar, SeqInput, Tensor, TimeMode};
use crate::diffusion::{forward_sample, ScheduleParams, SequenceSchedule};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;

pub const WARMUP_START_LR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    /// Diffusion steps, excluding masked-LM pretraining.
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub mlm_pretrain_steps: u64,
    pub mlm_mask_rate: f64,
    pub seed: u64,
    /// Examples packed into one forward pass; also the unit of parallelism.
    pub chunk_size: usize,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            warmup_steps: 100,
            batch_size: 32,
            total_steps: 10_000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            mlm_pretrain_steps: 0,
            mlm_mask_rate: 0.15,
            seed: 0,
            chunk_size: 8,
            exec: Exec::Parallel,
        }
    }
}

impl TrainConfig {
    /// Full-scale reference settings (lr 3e-6, 10k warmup steps from 1e-8,
    /// batch 32).
    pub fn full_scale_preset() -> Self {
        TrainConfig {
            learning_rate: 3e-6,
            warmup_steps: 10_000,
            batch_size: 32,
            total_steps: 1_900_000,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_owned()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.chunk_size == 0 {
            return bad("batch_size and chunk_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if !(self.mlm_mask_rate > 0.0 && self.mlm_mask_rate <= 1.0) {
            return bad("mlm_mask_rate must be in (0, 1]");
        }
        Ok(())
    }

    /// Linear warmup from 1e-8 to the target, then constant. `step` is
    /// 1-based within the phase.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            return self.learning_rate;
        }
        WARMUP_START_LR + (self.learning_rate - WARMUP_START_LR) * step as f64 / self.warmup_steps as f64
    }
}

/// One sample of the bound for one sequence, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Sampled middle KL term (zero when `t = 1`), unweighted.
    pub l_t_kl: f64,
    /// Reconstruction term `-ln p(x0 | x1)` (zero unless `t = 1`).
    pub l0: f64,
    /// Prior term `KL(q(x_T | x0) || p(x_T))`, analytic.
    #[serde(rename = "lT")]
    pub l_prior: f64,
    /// `(T * (l_t_kl + l0) + lT) / n`: single-sample bound estimate per token.
    pub total: f64,
}

impl LossBreakdown {
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.l_t_kl += b.l_t_kl / n;
            m.l0 += b.l0 / n;
            m.l_prior += b.l_prior / n;
            m.total += b.total / n;
        }
        m
    }
}

/// The collapsed masked-position KL term.
pub fn masked_position_kl(reveal: f64, p_x0: f64) -> f64 {
    if reveal == 0.0 {
        0.0
    } else {
        -reveal * p_x0.ln()
    }
}

fn log_softmax_row<F: Scalar>(row: &[F]) -> Vec<f64> {
    let vals: Vec<f64> = row.iter().map(|v| v.f64()).collect();
    let max = vals[NUM_SPECIALS..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + vals[NUM_SPECIALS..].iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    vals.iter().map(|v| v - lse).collect()
}

/// Prior term for a clean sequence: zero iff every position is fully
/// masked at `T`.
pub fn prior_term(sched: &SequenceSchedule) -> f64 {
    let t = sched.steps();
    if sched.row(t).iter().all(|&a| a == 0.0) {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Bound terms for a given `(x0, x_t, t)` and the gradient of `total` with
/// respect to the logits.
pub fn diffusion_terms<F: Scalar>(
    logits: &Logits<F>,
    x0: &[u32],
    xt: &[u32],
    t: usize,
    sched: &SequenceSchedule,
) -> Result<(LossBreakdown, Vec<F>)> {
    let n = x0.len();
    if xt.len() != n || logits.n != n || sched.len() != n {
        return Err(Error::LengthMismatch(xt.len(), n));
    }
    if t == 0 || t > sched.steps() {
        return Err(Error::StepOutOfRange { t, max: sched.steps() });
    }
    TokenSeq::check_clean_slice(x0)?;
    let steps = sched.steps() as f64;
    let k = logits.k;
    let mut grad = vec![F::zero(); n * k];
    let mut sum = 0.0;
    for i in 0..n {
        if xt[i] != MASK_ID {
            if xt[i] != x0[i] {
                return Err(Error::InconsistentPair {
                    pos: i,
                    xt: xt[i],
                    x0: x0[i],
                });
            }
            continue;
        }
        let reveal = sched.reveal_probability(t, t - 1, i)?;
        if reveal == 0.0 {
            continue;
        }
        let logp = log_softmax_row(logits.row(i));
        sum += -reveal * logp[x0[i] as usize];
        let w = steps * reveal / n as f64;
        let g = &mut grad[i * k..(i + 1) * k];
        for v in NUM_SPECIALS..k {
            let mut d = logp[v].exp();
            if v == x0[i] as usize {
                d -= 1.0;
            }
            g[v] = F::of(w * d);
        }
    }
    let l_prior = prior_term(sched);
    let (l_t_kl, l0) = if t == 1 { (0.0, sum) } else { (sum, 0.0) };
    let total = (steps * sum + l_prior) / n as f64;
    Ok((
        LossBreakdown {
            l_t_kl,
            l0,
            l_prior,
            total,
        },
        grad,
    ))
}

impl TokenSeq {
    pub(crate) fn check_clean_slice(ids: &[u32]) -> Result<()> {
        match ids.iter().position(|&id| id == MASK_ID) {
            Some(pos) => Err(Error::MaskInCleanSequence(pos)),
            None => Ok(()),
        }
    }
}

/// Builds the forward schedule of a clean training sequence.
pub fn schedule_for(x0: &[u32], surprisal: &SurprisalTable, params: &ScheduleParams) -> Result<SequenceSchedule> {
    SequenceSchedule::for_sequence(&surprisal.sequence(x0), params)
}

fn time_arg(mode: TimeMode, t: usize) -> Option<usize> {
    mode.uses_time().then_some(t)
}

/// A prepared training item: clean sequence, its noised version and step.
#[derive(Debug, Clone)]
pub struct NoisedExample {
    pub x0: TokenSeq,
    pub xt: TokenSeq,
    pub t: usize,
    pub sched: SequenceSchedule,
}

impl NoisedExample {
    /// Draws `t ~ U{1..T}` and `x_t ~ q(x_t | x0)`.
    pub fn draw<R: Rng>(
        x0: &TokenSeq,
        surprisal: &SurprisalTable,
        params: &ScheduleParams,
        rng: &mut R,
    ) -> Result<NoisedExample> {
        x0.check_clean()?;
        let sched = schedule_for(x0, surprisal, params)?;
        let t = rng.random_range(1..=params.steps);
        let xt = forward_sample(x0, t, &sched, rng)?;
        Ok(NoisedExample {
            x0: x0.clone(),
            xt,
            t,
            sched,
        })
    }
}

/// Bound terms and parameter gradients for a packed batch of noised
/// examples. Gradients are summed over the batch (not averaged).
pub fn diffusion_loss_packed<F: Scalar>(
    model: &Denoiser<F>,
    items: &[NoisedExample],
    dropout_rng: Option<&mut rng::Rng>,
    with_grad: bool,
) -> Result<(Vec<LossBreakdown>, Option<DenoiserParams<F>>)> {
    let mode = model.config.time_mode;
    let inputs: Vec<SeqInput> = items
        .iter()
        .map(|e| SeqInput::new(&e.xt, time_arg(mode, e.t)))
        .collect();
    let (logits, cache) = model.forward(&inputs, dropout_rng)?;
    let lens: Vec<usize> = items.iter().map(|e| e.x0.len()).collect();
    let mut upstream = Vec::with_capacity(logits.data.len());
    let mut losses = Vec::with_capacity(items.len());
    for (e, block) in items.iter().zip(logits.split(&lens)) {
        let (b, g) = diffusion_terms(&block, &e.x0, &e.xt, e.t, &e.sched)?;
        losses.push(b);
        upstream.extend(g);
    }
    let grads = if with_grad {
        Some(model.backward(&cache, &upstream)?)
    } else {
        None
    };
    Ok((losses, grads))
}

/// Single-example objective: draws `t` and `x_t`, returns the bound sample
/// and the gradient of its `total`.
pub fn diffusion_loss<F: Scalar, R: Rng>(
    model: &Denoiser<F>,
    x0: &TokenSeq,
    surprisal: &SurprisalTable,
    params: &ScheduleParams,
    rng: &mut R,
) -> Result<(LossBreakdown, DenoiserParams<F>)> {
    let item = NoisedExample::draw(x0, surprisal, params, rng)?;
    let (losses, grads) = diffusion_loss_packed(model, std::slice::from_ref(&item), None, true)?;
    Ok((losses[0], grads.expect("requested")))
}

/// Masks each position independently with `mask_rate`, redrawing once if
/// nothing was masked. `None` means the item is skipped.
pub fn mlm_mask<R: Rng>(x0: &[u32], mask_rate: f64, rng: &mut R) -> Option<TokenSeq> {
    for _ in 0..2 {
        let xt: Vec<u32> = x0
            .iter()
            .map(|&id| if rng.random::<f64>() < mask_rate { MASK_ID } else { id })
            .collect();
        if xt.contains(&MASK_ID) {
            return Some(TokenSeq(xt));
        }
    }
    None
}

/// Masked-LM cross-entropy on a packed batch: mean over masked positions
/// per item, summed over items. Returns per-item losses and summed grads.
pub fn mlm_loss_packed<F: Scalar>(
    model: &Denoiser<F>,
    items: &[(TokenSeq, TokenSeq)],
    dropout_rng: Option<&mut rng::Rng>,
) -> Result<(Vec<f64>, DenoiserParams<F>)> {
    let mode = model.config.time_mode;
    // Step 0 never occurs in diffusion training; it marks pretraining.
    let inputs: Vec<SeqInput> = items
        .iter()
        .map(|(_, xt)| SeqInput::new(xt, time_arg(mode, 0)))
        .collect();
    let (logits, cache) = model.forward(&inputs, dropout_rng)?;
    let lens: Vec<usize> = items.iter().map(|(x0, _)| x0.len()).collect();
    let k = logits.k;
    let mut upstream = Vec::with_capacity(logits.data.len());
    let mut losses = Vec::with_capacity(items.len());
    for ((x0, xt), block) in items.iter().zip(logits.split(&lens)) {
        let masked = xt.num_masked().max(1) as f64;
        let mut loss = 0.0;
        let mut g = vec![F::zero(); block.data.len()];
        for i in 0..x0.len() {
            if xt[i] != MASK_ID {
                continue;
            }
            let logp = log_softmax_row(block.row(i));
            loss -= logp[x0[i] as usize] / masked;
            for v in NUM_SPECIALS..k {
                let mut d = logp[v].exp();
                if v == x0[i] as usize {
                    d -= 1.0;
                }
                g[i * k + v] = F::of(d / masked);
            }
        }
        losses.push(loss);
        upstream.extend(g);
    }
    Ok((losses, model.backward(&cache, &upstream)?))
}

/// Masked-LM objective for one sequence; `None` when no position could be
/// masked after one redraw.
pub fn mlm_pretrain_step<F: Scalar, R: Rng>(
    model: &Denoiser<F>,
    x0: &TokenSeq,
    mask_rate: f64,
    rng: &mut R,
) -> Result<Option<(f64, DenoiserParams<F>)>> {
    x0.check_clean()?;
    let Some(xt) = mlm_mask(x0, mask_rate, rng) else {
        return Ok(None);
    };
    let (losses, grads) = mlm_loss_packed(model, &[(x0.clone(), xt)], None)?;
    Ok(Some((losses[0], grads)))
}

/// AdamW first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: DenoiserParams<f32>,
    pub v: DenoiserParams<f32>,
    /// Updates applied in the current phase.
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &DenoiserParams<f32>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn to_records(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (prefix, p) in [("opt.m.", &self.m), ("opt.v.", &self.v)] {
            for (name, t) in p.tensors() {
                out.push((format!("{prefix}{name}"), t.clone()));
            }
        }
        out
    }

    pub fn from_records(template: &DenoiserParams<f32>, records: &[(String, Tensor<f32>)], step: u64) -> Result<Self> {
        let mut state = AdamState::new(template);
        state.step = step;
        let mut it = records.iter();
        for (prefix, p) in [("opt.m.", &mut state.m), ("opt.v.", &mut state.v)] {
            let mut missing = None;
            p.for_each_mut(|name, slot| match it.next() {
                Some((found, t)) if *found == format!("{prefix}{name}") && t.shape == slot.shape => *slot = t.clone(),
                _ => {
                    missing.get_or_insert_with(|| format!("{prefix}{name}"));
                }
            });
            if let Some(name) = missing {
                return Err(Error::Checkpoint(format!(
                    "optimizer record {name} missing or malformed"
                )));
            }
        }
        Ok(state)
    }
}

/// One AdamW update with decoupled weight decay on matrices. Returns
/// `false` (and leaves everything untouched) if any gradient is non-finite.
pub fn adam_step(
    params: &mut DenoiserParams<f32>,
    grads: &DenoiserParams<f32>,
    state: &mut AdamState,
    config: &TrainConfig,
) -> bool {
    if !grads.all_finite() {
        warn!("non-finite gradient at phase step {}; update skipped", state.step + 1);
        return false;
    }
    state.step += 1;
    let step = state.step;
    let lr = config.lr_at(step);
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let gs = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, (_, g)), m), v) in params.tensors_mut().into_iter().zip(gs).zip(ms).zip(vs) {
        let decay = if p.shape.len() >= 2 { config.weight_decay } else { 0.0 };
        for i in 0..p.data.len() {
            let gi = f64::from(g.data[i]);
            let mi = b1 * f64::from(m.data[i]) + (1.0 - b1) * gi;
            let vi = b2 * f64::from(v.data[i]) + (1.0 - b2) * gi * gi;
            m.data[i] = mi as f32;
            v.data[i] = vi as f32;
            let update = (mi / c1) / ((vi / c2).sqrt() + config.adam_eps);
            let w = f64::from(p.data[i]);
            p.data[i] = (w - lr * (update + decay * w)) as f32;
        }
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Mlm,
    Diffusion,
}

/// One metrics record, serialized as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub phase: Phase,
    pub loss_total: f64,
    pub l_t_kl: f64,
    pub l0: f64,
    #[serde(rename = "lT")]
    pub l_prior: f64,
    pub lr: f64,
    pub elapsed_s: f64,
    pub skipped: bool,
}

/// Stateful training loop over an in-memory dataset.
pub struct Trainer {
    pub model: Denoiser<f32>,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub schedule: ScheduleParams,
    pub surprisal: SurprisalTable,
    data: Vec<TokenSeq>,
    /// Global steps taken, pretraining included.
    step: u64,
    started: Instant,
}

impl Trainer {
    pub fn new(
        model: Denoiser<f32>,
        config: TrainConfig,
        schedule: ScheduleParams,
        surprisal: SurprisalTable,
        data: Vec<TokenSeq>,
    ) -> Result<Trainer> {
        config.validate()?;
        schedule.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if schedule.steps != model.config.steps {
            return Err(Error::Config(format!(
                "schedule has {} steps but the model was built for {}",
                schedule.steps, model.config.steps
            )));
        }
        for (i, seq) in data.iter().enumerate() {
            seq.check_clean()?;
            if seq.is_empty() || seq.len() > model.config.n_max {
                return Err(Error::Config(format!(
                    "training sequence {i} has length {} (allowed 1..={})",
                    seq.len(),
                    model.config.n_max
                )));
            }
        }
        let adam = AdamState::new(&model.params);
        Ok(Trainer {
            model,
            adam,
            config,
            schedule,
            surprisal,
            data,
            step: 0,
            started: Instant::now(),
        })
    }

    /// Restores position and optimizer state (for resuming).
    pub fn resume(&mut self, step: u64, adam: AdamState) {
        self.step = step;
        self.adam = adam;
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.config.mlm_pretrain_steps + self.config.total_steps
    }

    pub fn phase(&self) -> Phase {
        if self.step < self.config.mlm_pretrain_steps {
            Phase::Mlm
        } else {
            Phase::Diffusion
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn batch_indices(&self) -> Vec<usize> {
        let mut r = rng::stream(self.config.seed, "data", self.step);
        (0..self.config.batch_size)
            .map(|_| r.random_range(0..self.data.len()))
            .collect()
    }

    /// Runs one optimizer step and reports its metrics.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let phase = self.phase();
        if phase == Phase::Diffusion && self.step == self.config.mlm_pretrain_steps && self.adam.step != 0 {
            // Fresh optimizer and warmup for the diffusion phase.
            self.adam = AdamState::new(&self.model.params);
        }
        let idx = self.batch_indices();
        let seed = self.config.seed;
        let step = self.step;
        let chunk = self.config.chunk_size;
        let chunks: Vec<&[usize]> = idx.chunks(chunk).collect();
        let model = &self.model;
        let sur = &self.surprisal;
        let sp = &self.schedule;
        let data = &self.data;
        let mask_rate = self.config.mlm_mask_rate;
        let batch = self.config.batch_size;

        let results = self.config.exec.try_map(
            chunks.len(),
            |c| -> Result<(Vec<LossBreakdown>, usize, DenoiserParams<f32>)> {
                let mut drop_rng = rng::stream(seed, "dropout", step * batch as u64 + c as u64);
                match phase {
                    Phase::Diffusion => {
                        let items = chunks[c]
                            .iter()
                            .enumerate()
                            .map(|(j, &i)| {
                                let mut r = rng::stream(seed, "noise", step * batch as u64 + (c * chunk + j) as u64);
                                NoisedExample::draw(&data[i], sur, sp, &mut r)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let (losses, g) = diffusion_loss_packed(model, &items, Some(&mut drop_rng), true)?;
                        let n = losses.len();
                        Ok((losses, n, g.expect("requested")))
                    }
                    Phase::Mlm => {
                        let items: Vec<(TokenSeq, TokenSeq)> = chunks[c]
                            .iter()
                            .enumerate()
                            .filter_map(|(j, &i)| {
                                let mut r = rng::stream(seed, "mlm", step * batch as u64 + (c * chunk + j) as u64);
                                mlm_mask(&data[i], mask_rate, &mut r).map(|xt| (data[i].clone(), xt))
                            })
                            .collect();
                        if items.is_empty() {
                            return Ok((Vec::new(), 0, model.params.zeros_like()));
                        }
                        let (losses, g) = mlm_loss_packed(model, &items, Some(&mut drop_rng))?;
                        let n = losses.len();
                        let as_breakdown = losses
                            .into_iter()
                            .map(|l| LossBreakdown {
                                total: l,
                                ..Default::default()
                            })
                            .collect();
                        Ok((as_breakdown, n, g))
                    }
                }
            },
        )?;

        let mut grads = self.model.params.zeros_like();
        let mut losses = Vec::new();
        let mut used = 0usize;
        for (l, n, g) in results {
            grads.add_assign(&g);
            losses.extend(l);
            used += n;
        }
        let mut skipped = used == 0;
        if !skipped {
            grads.scale(1.0 / used as f32);
            skipped = !adam_step(&mut self.model.params, &grads, &mut self.adam, &self.config);
        }
        self.step += 1;
        let mean = LossBreakdown::mean(&losses);
        Ok(StepMetrics {
            step: self.step,
            phase,
            loss_total: mean.total,
            l_t_kl: mean.l_t_kl,
            l0: mean.l0,
            l_prior: mean.l_prior,
            lr: self.config.lr_at(self.adam.step.max(1)),
            elapsed_s: self.started.elapsed().as_secs_f64(),
            skipped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{InfoUnit, TokenizerKind, Vocab};
    use crate::denoiser::DenoiserConfig;

    fn tiny_model(mode: TimeMode, vocab: usize) -> Denoiser<f32> {
        let mut c = DenoiserConfig::new(vocab, mode, 8).with_size(1, 16, 2);
        c.n_max = 8;
        c.dropout = 0.0;
        Denoiser::new(c, 1).unwrap()
    }

    #[test]
    fn warmup_schedule() {
        let c = TrainConfig {
            learning_rate: 1e-3,
            warmup_steps: 10,
            ..Default::default()
        };
        assert!((c.lr_at(5) - (1e-8 + (1e-3 - 1e-8) * 0.5)).abs() < 1e-18);
        assert_eq!(c.lr_at(10), 1e-3);
        assert_eq!(c.lr_at(500), 1e-3);
    }

    #[test]
    fn uniform_model_kl_term() {
        // Content vocab of 10, one masked position with reveal 0.5.
        let vocab = 13;
        let logits = Logits {
            n: 1,
            k: vocab,
            data: (0..vocab)
                .map(|v| if v < 3 { f32::NEG_INFINITY } else { 0.0 })
                .collect(),
        };
        let sched = SequenceSchedule::from_alpha_bar(&[vec![1.0], vec![0.8], vec![0.6], vec![0.0]]).unwrap();
        let (b, _) = diffusion_terms(&logits, &[4], &[MASK_ID], 2, &sched).unwrap();
        assert!((b.l_t_kl - 0.5 * 10f64.ln()).abs() < 1e-6);
        assert_eq!(b.l0, 0.0);
        assert_eq!(b.l_prior, 0.0);
        assert!((b.total - 3.0 * 0.5 * 10f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn perfect_model_has_zero_loss() {
        let logits = Logits {
            n: 2,
            k: 6,
            data: vec![
                f64::NEG_INFINITY,
                f64::NEG_INFINITY,
                f64::NEG_INFINITY,
                800.0,
                0.0,
                0.0,
                f64::NEG_INFINITY,
                f64::NEG_INFINITY,
                f64::NEG_INFINITY,
                0.0,
                0.0,
                800.0,
            ],
        };
        let sched = SequenceSchedule::linear(2, 4);
        for t in 1..=4 {
            let (b, _) = diffusion_terms(&logits, &[3, 5], &[MASK_ID, MASK_ID], t, &sched).unwrap();
            assert!(b.total.abs() < 1e-12 && b.l0.abs() < 1e-12 && b.l_t_kl.abs() < 1e-12);
        }
    }

    #[test]
    fn prior_term_is_zero_when_fully_masked() {
        assert_eq!(prior_term(&SequenceSchedule::linear(3, 5)), 0.0);
        let partial = SequenceSchedule::from_alpha_bar(&[vec![1.0], vec![0.2]]).unwrap();
        assert!(prior_term(&partial).is_infinite());
    }

    #[test]
    fn rejects_masked_clean_sequence() {
        let m = tiny_model(TimeMode::Tad, 7);
        let v = Vocab::from_lines(["a b c d"], 7, TokenizerKind::Word).unwrap();
        let s = SurprisalTable::from_vocab(&v, 1.0, InfoUnit::Nats).unwrap();
        let mut r = rng::stream(0, "x", 0);
        let res = diffusion_loss(
            &m,
            &TokenSeq(vec![3, MASK_ID]),
            &s,
            &ScheduleParams::new(8, 0.3),
            &mut r,
        );
        assert!(matches!(res, Err(Error::MaskInCleanSequence(1))));
    }

    #[test]
    fn full_mask_rate_matches_final_step_input() {
        let mut r = rng::stream(0, "m", 0);
        let xt = mlm_mask(&[3, 4, 5], 1.0, &mut r).unwrap();
        assert_eq!(xt.num_masked(), 3);
    }

    #[test]
    fn untrained_mlm_loss_is_log_vocab() {
        let m = tiny_model(TimeMode::Lte, 9);
        let mut r = rng::stream(3, "m", 0);
        let (loss, _) = mlm_pretrain_step(&m, &TokenSeq(vec![3, 4, 5, 6]), 0.5, &mut r)
            .unwrap()
            .unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn mlm_skips_unmaskable_draws() {
        let mut r = rng::stream(0, "m", 0);
        assert!(mlm_mask(&[3], 1e-12, &mut r).is_none());
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let m = tiny_model(TimeMode::Tad, 7);
        let mut p = m.params.clone();
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        assert!(adam_step(&mut p, &m.params.zeros_like(), &mut st, &cfg));
        assert_eq!(p, m.params);
    }

    #[test]
    fn non_finite_gradient_skips_update() {
        let m = tiny_model(TimeMode::Tad, 7);
        let mut p = m.params.clone();
        let mut st = AdamState::new(&p);
        let mut g = m.params.zeros_like();
        g.b_out.data[3] = f32::NAN;
        assert!(!adam_step(&mut p, &g, &mut st, &TrainConfig::default()));
        assert_eq!(st.step, 0);
        assert_eq!(p, m.params);
    }

    #[test]
    fn adam_minimises_quadratic() {
        // Minimise (w - 3)^2 on one bias entry; closed-form minimum at 3.
        let m = tiny_model(TimeMode::Tad, 7);
        let mut p = m.params.clone();
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            warmup_steps: 0,
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..500 {
            let mut g = p.zeros_like();
            g.b_out.data[4] = 2.0 * (p.b_out.data[4] - 3.0);
            adam_step(&mut p, &g, &mut st, &cfg);
        }
        assert!((p.b_out.data[4] - 3.0).abs() < 1e-3, "{}", p.b_out.data[4]);
    }
}
