//! Reverse-process generation with x0-parameterisation and step skipping.
//!
//! Each iteration predicts `x0` at the masked positions, draws a candidate
//! `x0~` through a top-K filter, rebuilds the per-position schedule from the
//! surprisal of `x0~` and moves from `t` to `t - stride` with the skip
//! posterior. The last iteration lands on `t = 0`, where every remaining
//! mask is revealed with probability one.

use serde::{Deserialize, Serialize};

use crate::corpus::{SurprisalTable, TokenSeq, MASK_ID};
use crate::denoiser::{Denoiser, Scalar, SeqInput};
use crate::diffusion::{sample_row, skip_posterior, ScheduleParams, SequenceSchedule};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub length: usize,
    pub iterations: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Re-predict already revealed positions every iteration. Revealed
    /// positions are never masked again either way.
    pub remask: bool,
    /// Chains packed into one forward pass.
    pub chunk_size: usize,
    pub exec: Exec,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            length: 64,
            iterations: 64,
            top_k: 30,
            temperature: 1.0,
            seed: 0,
            remask: false,
            chunk_size: 16,
            exec: Exec::Parallel,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self, steps: usize, n_max: usize) -> Result<()> {
        if self.iterations == 0 || !steps.is_multiple_of(self.iterations) {
            return Err(Error::Config(format!(
                "iterations ({}) must divide the number of diffusion steps ({steps})",
                self.iterations
            )));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.length == 0 || self.length > n_max {
            return Err(Error::Config(format!(
                "length must be in 1..={n_max}, got {}",
                self.length
            )));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be positive".into()));
        }
        Ok(())
    }

    pub fn stride(&self, steps: usize) -> usize {
        steps / self.iterations
    }
}

/// Keeps the `k` largest finite logits (ties to the lower id) and returns
/// the tempered softmax over them.
pub fn top_k_filter(logits: &[f64], k: usize, temperature: f64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let mut order: Vec<usize> = (0..logits.len()).filter(|&v| logits[v].is_finite()).collect();
    if order.is_empty() {
        return Err(Error::Internal("no finite logits to sample from".into()));
    }
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    let max = logits[order[0]];
    let mut probs = vec![0.0; logits.len()];
    let mut total = 0.0;
    for &v in &order {
        let p = ((logits[v] - max) / temperature).exp();
        probs[v] = p;
        total += p;
    }
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(probs)
}

/// `x_t` after one reverse iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub iteration: usize,
    pub t: usize,
    pub tokens: TokenSeq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: TokenSeq,
    /// Starts with the all-mask state at `t = T`.
    pub trajectory: Vec<TrajectoryStep>,
    /// Iteration (1-based) at which each position was revealed.
    pub reveal_iteration: Vec<usize>,
}

fn inference_schedule(x0: &[u32], surprisal: &SurprisalTable, params: &ScheduleParams) -> Result<SequenceSchedule> {
    if params.lambda == 0.0 {
        Ok(SequenceSchedule::linear(x0.len(), params.steps))
    } else {
        SequenceSchedule::spindle(&surprisal.sequence(x0), params)
    }
}

/// Runs chains in lockstep, sharing packed forward passes.
fn generate_group<F: Scalar>(
    model: &Denoiser<F>,
    surprisal: &SurprisalTable,
    params: &ScheduleParams,
    cfg: &SampleConfig,
    rngs: &mut [rng::Rng],
) -> Result<Vec<Generation>> {
    let steps = params.steps;
    let stride = cfg.stride(steps);
    let n = cfg.length;
    let k_total = model.config.vocab_size;
    let uses_time = model.config.time_mode.uses_time();
    let mut states: Vec<Generation> = rngs
        .iter()
        .map(|_| Generation {
            tokens: TokenSeq::all_masked(n),
            trajectory: vec![TrajectoryStep {
                iteration: 0,
                t: steps,
                tokens: TokenSeq::all_masked(n),
            }],
            reveal_iteration: vec![0; n],
        })
        .collect();
    for iteration in 1..=cfg.iterations {
        let t = steps - (iteration - 1) * stride;
        let s = t - stride;
        let inputs: Vec<SeqInput> = states
            .iter()
            .map(|g| SeqInput::new(&g.tokens, uses_time.then_some(t)))
            .collect();
        let (logits, _) = model.forward(&inputs, None)?;
        let blocks = logits.split(&vec![n; states.len()]);
        for ((g, block), r) in states.iter_mut().zip(blocks).zip(rngs.iter_mut()) {
            let mut x0 = g.tokens.0.clone();
            for i in 0..n {
                if g.tokens[i] == MASK_ID || cfg.remask {
                    let row: Vec<f64> = block.row(i).iter().map(|v| v.f64()).collect();
                    let probs = top_k_filter(&row, cfg.top_k, cfg.temperature)?;
                    x0[i] = sample_row(&probs, r) as u32;
                }
            }
            if cfg.remask {
                // Revealed positions take their re-predicted values.
                for i in 0..n {
                    if g.tokens[i] != MASK_ID {
                        g.tokens.0[i] = x0[i];
                    }
                }
            }
            let sched = inference_schedule(&x0, surprisal, params)?;
            let post = skip_posterior(&g.tokens, &x0, t, s, &sched, k_total)?;
            for i in 0..n {
                if g.tokens[i] == MASK_ID {
                    let v = sample_row(post.row(i), r) as u32;
                    if v != MASK_ID {
                        g.tokens.0[i] = v;
                        g.reveal_iteration[i] = iteration;
                    }
                }
            }
            g.trajectory.push(TrajectoryStep {
                iteration,
                t: s,
                tokens: g.tokens.clone(),
            });
        }
    }
    for g in &states {
        if let Some(pos) = g.tokens.iter().position(|&v| v == MASK_ID) {
            return Err(Error::Internal(format!(
                "mask left at position {pos} after the final iteration"
            )));
        }
        if let Some(pos) = g
            .tokens
            .iter()
            .position(|&v| (v as usize) < crate::corpus::NUM_SPECIALS)
        {
            return Err(Error::Internal(format!("special token generated at position {pos}")));
        }
    }
    Ok(states)
}

/// One chain driven by the given RNG.
pub fn generate<F: Scalar>(
    model: &Denoiser<F>,
    surprisal: &SurprisalTable,
    params: &ScheduleParams,
    cfg: &SampleConfig,
    rng: &mut rng::Rng,
) -> Result<Generation> {
    check(model, params, cfg)?;
    let mut rngs = [rng.clone()];
    let out = generate_group(model, surprisal, params, cfg, &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(out.into_iter().next().expect("one chain"))
}

fn check<F: Scalar>(model: &Denoiser<F>, params: &ScheduleParams, cfg: &SampleConfig) -> Result<()> {
    params.validate()?;
    if params.steps != model.config.steps {
        return Err(Error::Config(format!(
            "schedule has {} steps but the model was built for {}",
            params.steps, model.config.steps
        )));
    }
    cfg.validate(params.steps, model.config.n_max)
}

/// `num` independent chains; chain `j` draws from the `("sample", j)`
/// stream of `cfg.seed`, so results do not depend on the execution policy.
pub fn generate_many<F: Scalar>(
    model: &Denoiser<F>,
    surprisal: &SurprisalTable,
    params: &ScheduleParams,
    cfg: &SampleConfig,
    num: usize,
) -> Result<Vec<Generation>> {
    check(model, params, cfg)?;
    let groups = num.div_ceil(cfg.chunk_size);
    let out = cfg.exec.try_map(groups, |g| {
        let lo = g * cfg.chunk_size;
        let hi = (lo + cfg.chunk_size).min(num);
        let mut rngs: Vec<rng::Rng> = (lo..hi).map(|j| rng::stream(cfg.seed, "sample", j as u64)).collect();
        generate_group(model, surprisal, params, cfg, &mut rngs)
    })?;
    Ok(out.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_keeps_two_largest() {
        let p = top_k_filter(&[2.0, 1.0, 0.5], 2, 1.0).unwrap();
        assert_eq!(p[2], 0.0);
        assert!((p[0] / p[1] - 1f64.exp()).abs() < 1e-12);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn top_one_is_argmax() {
        assert_eq!(top_k_filter(&[0.1, 3.0, 0.5], 1, 0.7).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn full_k_is_plain_softmax() {
        let l = [0.3, -1.0, 2.0, 0.0];
        let p = top_k_filter(&l, 4, 1.0).unwrap();
        let z: f64 = l.iter().map(|v| v.exp()).sum();
        for (a, b) in p.iter().zip(l) {
            assert!((a - b.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_prefer_lower_id() {
        let p = top_k_filter(&[1.0, 1.0, 1.0], 2, 1.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn oversized_k_keeps_all_finite() {
        let p = top_k_filter(&[f64::NEG_INFINITY, 0.0, 0.0], 10, 1.0).unwrap();
        assert_eq!(p, vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn temperature_sharpens() {
        let hot = top_k_filter(&[1.0, 0.0], 2, 2.0).unwrap();
        let cold = top_k_filter(&[1.0, 0.0], 2, 0.5).unwrap();
        assert!(cold[0] > hot[0]);
        assert!(top_k_filter(&[1.0], 1, 0.0).is_err());
    }

    #[test]
    fn iterations_must_divide_steps() {
        let cfg = SampleConfig {
            iterations: 5,
            length: 4,
            ..Default::default()
        };
        assert!(cfg.validate(64, 8).is_err());
        assert!(SampleConfig { iterations: 16, ..cfg }.validate(64, 8).is_ok());
    }
}
