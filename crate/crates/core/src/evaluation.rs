//! Likelihood-bound evaluation, BLEU-4 and self-BLEU-4, and the
//! quality/diversity sweep.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::{SurprisalTable, TokenSeq};
use crate::denoiser::{Denoiser, Scalar};
use crate::diffusion::{forward_sample, ScheduleParams, SequenceSchedule};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;
use crate::sampling::{generate_many, SampleConfig};
use crate::training::{diffusion_loss_packed, schedule_for, NoisedExample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Monte Carlo draws of `(t, x_t)` per sequence.
    pub t_samples: usize,
    pub seed: u64,
    pub chunk_size: usize,
    pub exec: Exec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            t_samples: 4,
            seed: 0,
            chunk_size: 16,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub nats_per_token: f64,
    /// NaN when only one draw per sequence (or per step) was taken.
    pub std_error: f64,
    pub num_tokens: usize,
    pub num_sequences: usize,
}

impl ElboEstimate {
    pub fn ppl_proxy(&self) -> f64 {
        self.nats_per_token.exp()
    }
}

struct Job {
    example: usize,
    t: Option<usize>,
    draw: u64,
}

/// Bound values (nats per sequence, not yet weighted) for every job.
fn run_jobs<F: Scalar>(
    model: &Denoiser<F>,
    data: &[TokenSeq],
    schedules: &[SequenceSchedule],
    jobs: &[Job],
    params: &ScheduleParams,
    cfg: &EvalConfig,
) -> Result<Vec<(f64, f64)>> {
    let chunks: Vec<&[Job]> = jobs.chunks(cfg.chunk_size).collect();
    let out = cfg.exec.try_map(chunks.len(), |c| -> Result<Vec<(f64, f64)>> {
        let items = chunks[c]
            .iter()
            .map(|job| {
                let seed = rng::derive_seed(cfg.seed, "eval", job.example as u64);
                let mut r = rng::stream(seed, "draw", job.draw);
                let t = match job.t {
                    Some(t) => t,
                    None => rand::Rng::random_range(&mut r, 1..=params.steps),
                };
                let x0 = &data[job.example];
                let sched = schedules[job.example].clone();
                let xt = forward_sample(x0, t, &sched, &mut r)?;
                Ok(NoisedExample {
                    x0: x0.clone(),
                    xt,
                    t,
                    sched,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (losses, _) = diffusion_loss_packed(model, &items, None, false)?;
        Ok(losses.iter().map(|b| (b.l_t_kl + b.l0, b.l_prior)).collect())
    })?;
    Ok(out.into_iter().flatten().collect())
}

fn prepare(
    data: &[TokenSeq],
    surprisal: &SurprisalTable,
    params: &ScheduleParams,
    cfg: &EvalConfig,
) -> Result<Vec<SequenceSchedule>> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.chunk_size == 0 {
        return Err(Error::Config("chunk_size must be positive".into()));
    }
    params.validate()?;
    data.iter()
        .map(|x0| {
            x0.check_clean()?;
            schedule_for(x0, surprisal, params)
        })
        .collect()
}

fn summarise(per_seq: Vec<(f64, f64)>, data: &[TokenSeq]) -> ElboEstimate {
    // per_seq holds (mean, variance of that mean) per sequence.
    let num_tokens: usize = data.iter().map(|s| s.len()).sum();
    let total: f64 = per_seq.iter().map(|p| p.0).sum();
    let var: f64 = per_seq.iter().map(|p| p.1).sum();
    ElboEstimate {
        nats_per_token: total / num_tokens as f64,
        std_error: var.sqrt() / num_tokens as f64,
        num_tokens,
        num_sequences: data.len(),
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    if xs.len() < 2 {
        // One draw says nothing about spread; NaN propagates to std_error.
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, var / k)
}

/// Monte Carlo bound per content token with `t ~ U{1..T}` and weight `T`.
/// Draw `k` of sequence `e` is fixed by `(seed, e, k)`, so a larger
/// `t_samples` extends rather than replaces the draws.
pub fn elbo_eval<F: Scalar>(
    model: &Denoiser<F>,
    data: &[TokenSeq],
    surprisal: &SurprisalTable,
    params: &ScheduleParams,
    cfg: &EvalConfig,
) -> Result<ElboEstimate> {
    if cfg.t_samples == 0 {
        return Err(Error::Config("t_samples must be positive".into()));
    }
    let schedules = prepare(data, surprisal, params, cfg)?;
    let jobs: Vec<Job> = (0..data.len())
        .flat_map(|e| {
            (0..cfg.t_samples).map(move |k| Job {
                example: e,
                t: None,
                draw: k as u64,
            })
        })
        .collect();
    let vals = run_jobs(model, data, &schedules, &jobs, params, cfg)?;
    let steps = params.steps as f64;
    let per_seq = vals
        .chunks(cfg.t_samples)
        .map(|c| {
            let xs: Vec<f64> = c.iter().map(|(kl, prior)| steps * kl + prior).collect();
            mean_var(&xs)
        })
        .collect();
    Ok(summarise(per_seq, data))
}

/// Bound per content token summing every `t` exactly, with `repeats`
/// draws of `x_t` per step.
pub fn elbo_eval_all_steps<F: Scalar>(
    model: &Denoiser<F>,
    data: &[TokenSeq],
    surprisal: &SurprisalTable,
    params: &ScheduleParams,
    repeats: usize,
    cfg: &EvalConfig,
) -> Result<ElboEstimate> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    let schedules = prepare(data, surprisal, params, cfg)?;
    let steps = params.steps;
    let jobs: Vec<Job> = (0..data.len())
        .flat_map(|e| {
            (1..=steps).flat_map(move |t| {
                (0..repeats).map(move |k| Job {
                    example: e,
                    t: Some(t),
                    draw: ((t - 1) * repeats + k) as u64,
                })
            })
        })
        .collect();
    let vals = run_jobs(model, data, &schedules, &jobs, params, cfg)?;
    let per_seq = vals
        .chunks(steps * repeats)
        .map(|c| {
            let prior = c[0].1;
            c.chunks(repeats).fold((prior, 0.0), |(m, v), r| {
                let xs: Vec<f64> = r.iter().map(|p| p.0).collect();
                let (mt, vt) = mean_var(&xs);
                (m + mt, v + vt)
            })
        })
        .collect();
    Ok(summarise(per_seq, data))
}

pub const BLEU_ORDER: usize = 4;

/// Highest clipped count per n-gram over a reference set, keeping the two
/// best references so one of them can be excluded (self-BLEU).
struct RefIndex<T> {
    best: HashMap<Vec<T>, [(usize, usize); 2]>,
    lengths: BTreeMap<usize, usize>,
}

fn ngram_counts<T: Hash + Eq + Clone>(seq: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

impl<T: Hash + Eq + Clone> RefIndex<T> {
    fn new(refs: &[Vec<T>]) -> Self {
        let mut best: HashMap<Vec<T>, [(usize, usize); 2]> = HashMap::new();
        let mut lengths = BTreeMap::new();
        for (r, seq) in refs.iter().enumerate() {
            *lengths.entry(seq.len()).or_insert(0) += 1;
            for n in 1..=BLEU_ORDER {
                for (g, c) in ngram_counts(seq, n) {
                    let e = best.entry(g).or_insert([(0, usize::MAX); 2]);
                    if c > e[0].0 {
                        e[1] = e[0];
                        e[0] = (c, r);
                    } else if c > e[1].0 {
                        e[1] = (c, r);
                    }
                }
            }
        }
        RefIndex { best, lengths }
    }

    fn max_count(&self, g: &[T], exclude: Option<usize>) -> usize {
        match self.best.get(g) {
            None => 0,
            Some(e) if Some(e[0].1) == exclude => e[1].0,
            Some(e) => e[0].0,
        }
    }

    /// Closest reference length, ties to the shorter one.
    fn closest_length(&self, c: usize, exclude_len: Option<usize>) -> Option<usize> {
        let available = |l: usize| {
            let have = self.lengths.get(&l).copied().unwrap_or(0);
            have > usize::from(exclude_len == Some(l))
        };
        let below = self.lengths.range(..=c).rev().map(|(&l, _)| l).find(|&l| available(l));
        let above = self.lengths.range(c + 1..).map(|(&l, _)| l).find(|&l| available(l));
        match (below, above) {
            (Some(b), Some(a)) => Some(if c - b <= a - c { b } else { a }),
            (b, a) => b.or(a),
        }
    }

    fn sentence_bleu(&self, cand: &[T], exclude: Option<(usize, usize)>) -> f64 {
        let c = cand.len();
        if c == 0 {
            return 0.0;
        }
        let Some(r) = self.closest_length(c, exclude.map(|e| e.1)) else {
            return 0.0;
        };
        let mut log_p = 0.0;
        for n in 1..=BLEU_ORDER {
            let counts = ngram_counts(cand, n);
            let total: usize = counts.values().sum();
            let matched: usize = counts
                .iter()
                .map(|(g, &k)| k.min(self.max_count(g, exclude.map(|e| e.0))))
                .sum();
            let p = if matched == 0 {
                1.0 / (total + 1) as f64
            } else {
                matched as f64 / total as f64
            };
            log_p += p.ln() / BLEU_ORDER as f64;
        }
        let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
        bp * log_p.exp()
    }
}

/// Mean sentence BLEU-4 of each candidate against the whole reference set.
pub fn bleu4<T: Hash + Eq + Clone>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if candidates.is_empty() || references.is_empty() {
        return Err(Error::Config(
            "BLEU needs at least one candidate and one reference".into(),
        ));
    }
    let idx = RefIndex::new(references);
    Ok(candidates.iter().map(|c| idx.sentence_bleu(c, None)).sum::<f64>() / candidates.len() as f64)
}

/// Mean BLEU-4 of each candidate against all the other candidates.
pub fn self_bleu4<T: Hash + Eq + Clone>(candidates: &[Vec<T>]) -> Result<f64> {
    if candidates.len() < 2 {
        return Err(Error::Config("self-BLEU needs at least two candidates".into()));
    }
    let idx = RefIndex::new(candidates);
    Ok(candidates
        .iter()
        .enumerate()
        .map(|(i, c)| idx.sentence_bleu(c, Some((i, c.len()))))
        .sum::<f64>()
        / candidates.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub elbo_nats_per_token: f64,
    pub elbo_std_error: f64,
    pub ppl_proxy: f64,
    pub bleu4: Option<f64>,
    pub self_bleu4: Option<f64>,
    pub num_samples: usize,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub temperature: f64,
    pub bleu4: f64,
    pub self_bleu4: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,temperature,bleu4,self_bleu4\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.k, r.temperature, r.bleu4, r.self_bleu4));
    }
    out
}

/// Generates `num` samples per `(k, temperature)` grid point and scores
/// them against `references`.
pub fn quality_diversity_sweep<F: Scalar>(
    model: &Denoiser<F>,
    surprisal: &SurprisalTable,
    params: &ScheduleParams,
    base: &SampleConfig,
    grid: &[(usize, f64)],
    num: usize,
    references: &[TokenSeq],
) -> Result<Vec<SweepRow>> {
    let refs: Vec<Vec<u32>> = references.iter().map(|r| r.0.clone()).collect();
    grid.iter()
        .map(|&(k, temperature)| {
            let cfg = SampleConfig {
                top_k: k,
                temperature,
                ..base.clone()
            };
            let gens = generate_many(model, surprisal, params, &cfg, num)?;
            let cands: Vec<Vec<u32>> = gens.into_iter().map(|g| g.tokens.0).collect();
            Ok(SweepRow {
                k,
                temperature,
                bleu4: bleu4(&cands, &refs)?,
                self_bleu4: self_bleu4(&cands)?,
            })
        })
        .collect()
}

/// Adjacent pairs, ordered by decreasing self-BLEU, where BLEU goes up.
pub fn frontier_inversions(rows: &[SweepRow]) -> usize {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| b.self_bleu4.total_cmp(&a.self_bleu4));
    sorted.windows(2).filter(|w| w[1].bleu4 > w[0].bleu4).count()
}
