//! Oracle-backed verification suite: each check compares the main
//! implementation against a reference and reports pass/fail.

use std::fmt;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{
    brute_posterior, brute_skip_posterior, exact_nll, generic_kl, mc_marginal, reverse_kernel_row, TinyInstance,
};
use crate::corpus::{InfoUnit, SurprisalTable, TokenSeq, TokenizerKind, Vocab, MASK_ID, NUM_SPECIALS};
use crate::denoiser::{Denoiser, DenoiserConfig, Logits, SeqInput, TimeMode};
use crate::diffusion::{
    forward_marginal, forward_sample, posterior, raw_spindle, skip_posterior, ScheduleParams, SequenceSchedule,
};
use crate::error::{Error, Result};
use crate::evaluation::{bleu4, self_bleu4};
use crate::exec::Exec;
use crate::rng;
use crate::sampling::{generate_many, SampleConfig};
use crate::training::{diffusion_loss_packed, diffusion_terms, NoisedExample};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub criterion: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] criterion {:>2} {}: {} ({:.2} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.criterion,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn timed(criterion: u32, name: &'static str, budget_s: f64, f: impl FnOnce() -> Result<(bool, String)>) -> CheckReport {
    let start = Instant::now();
    let out = f();
    let seconds = start.elapsed().as_secs_f64();
    let (passed, detail) = match out {
        Ok((ok, d)) if seconds <= budget_s => (ok, d),
        Ok((_, d)) => (false, format!("{d}; exceeded {budget_s} s budget")),
        Err(e) => (false, format!("error: {e}")),
    };
    CheckReport {
        criterion,
        name,
        passed,
        detail,
        seconds,
    }
}

fn random_h<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.01..10.0)).collect()
}

/// Pre-clamp retention weighted by information equals `1 - t/T`.
pub fn spindle_identity(seed: u64, instances: usize) -> CheckReport {
    timed(1, "spindle identity", 5.0, || {
        let mut r = rng::stream(seed, "check-spindle", 0);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let n = r.random_range(1..=64);
            let h = random_h(&mut r, n);
            let params = ScheduleParams::new(r.random_range(4..=256), r.random_range(0.0..=1.0));
            let raw = raw_spindle(&h, &params)?;
            let hs: f64 = h.iter().sum();
            for t in 0..=params.steps {
                let row = &raw[t * n..(t + 1) * n];
                let weighted: f64 = row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() / hs;
                worst = worst.max((weighted - (1.0 - t as f64 / params.steps as f64)).abs());
            }
        }
        Ok((worst <= 1e-9, format!("{instances} instances, max |error| {worst:.2e}")))
    })
}

/// With `lambda = 0` the per-step rate is `1 / (T - t + 1)`.
pub fn degenerate_schedule(seed: u64) -> CheckReport {
    timed(2, "degenerate schedule", 30.0, || {
        let mut r = rng::stream(seed, "check-linear", 0);
        let mut worst = 0.0f64;
        let mut sizes: Vec<usize> = (1..=16).collect();
        sizes.extend([31, 64, 100, 256, 511, 1000, 1024, 2048]);
        for &steps in &sizes {
            let h = random_h(&mut r, 5);
            let s = SequenceSchedule::for_sequence(&h, &ScheduleParams::new(steps, 0.0))?;
            for t in 1..=steps {
                for i in 0..h.len() {
                    worst = worst.max((s.beta(t, i) - 1.0 / (steps - t + 1) as f64).abs());
                }
            }
        }
        Ok((worst <= 1e-12, format!("T up to 2048, max |error| {worst:.2e}")))
    })
}

fn random_clean<R: Rng>(rng: &mut R, tiny: &TinyInstance) -> Vec<u32> {
    (0..tiny.n).map(|_| rng.random_range(tiny.content_ids())).collect()
}

fn grid_diff(a: &crate::diffusion::CategoricalGrid, b: &crate::diffusion::CategoricalGrid) -> f64 {
    (0..a.len())
        .flat_map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Closed-form posteriors against Bayes over full transition matrices.
pub fn posterior_correctness(seed: u64, instances: usize) -> CheckReport {
    timed(3, "posterior correctness", 30.0, || {
        let mut r = rng::stream(seed, "check-posterior", 0);
        let mut worst = 0.0f64;
        let mut compared = 0;
        for _ in 0..instances {
            let absorb = r.random_bool(0.5);
            let tiny = TinyInstance::random(&mut r, absorb);
            let sched = SequenceSchedule::from_alpha_bar(&tiny.alpha_bar_rows())?;
            let x0 = random_clean(&mut r, &tiny);
            let t = r.random_range(1..=tiny.steps);
            // Evidence drawn from the oracle's own marginal is always possible.
            let xt: Vec<u32> = x0
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let keep = tiny.q_product(0, t, i)[v as usize][v as usize];
                    if r.random::<f64>() < keep {
                        v
                    } else {
                        MASK_ID
                    }
                })
                .collect();
            let s = r.random_range(0..t);
            let k = tiny.k_total();
            for (main, brute) in [
                (posterior(&xt, &x0, t, &sched, k), brute_posterior(&tiny, &xt, &x0, t)),
                (
                    skip_posterior(&xt, &x0, t, s, &sched, k),
                    brute_skip_posterior(&tiny, &xt, &x0, t, s),
                ),
            ] {
                match (main, brute) {
                    (Ok(a), Ok(b)) => {
                        worst = worst.max(grid_diff(&a, &b));
                        compared += 1;
                    }
                    (Err(_), Err(Error::ImpossibleEvidence { .. })) => {}
                    (a, b) => {
                        return Ok((
                            false,
                            format!("disagreement on validity: main {:?}, brute {:?}", a.err(), b.err()),
                        ));
                    }
                }
            }
        }
        Ok((
            worst <= 1e-9,
            format!("{compared} posteriors compared, max |error| {worst:.2e}"),
        ))
    })
}

/// Simulated chain frequencies against the closed-form marginal.
pub fn marginal_correctness(seed: u64, instances: usize, draws: usize) -> CheckReport {
    timed(4, "marginal correctness", 60.0, || {
        let mut r = rng::stream(seed, "check-marginal", 0);
        let mut worst = 0.0f64;
        for j in 0..instances {
            let n = r.random_range(1..=8);
            let params = ScheduleParams::new(r.random_range(1..=16), r.random_range(0.0..=1.0));
            let sched = SequenceSchedule::for_sequence(&random_h(&mut r, n), &params)?;
            let content = r.random_range(1..=10);
            let tiny = TinyInstance::from_alpha_bar(
                content,
                &(0..=params.steps).map(|t| sched.row(t).to_vec()).collect::<Vec<_>>(),
            )?;
            let x0 = random_clean(&mut r, &tiny);
            let t = r.random_range(0..=params.steps);
            let closed = forward_marginal(&x0, t, &sched, tiny.k_total())?;
            let mc = mc_marginal(&tiny, &x0, t, draws, rng::derive_seed(seed, "mc", j as u64))?;
            worst = worst.max(grid_diff(&closed, &mc));
        }
        Ok((
            worst <= 0.01,
            format!("{instances} instances x {draws} draws, max |deviation| {worst:.4}"),
        ))
    })
}

fn perturbed_model(config: DenoiserConfig, seed: u64, std: f64) -> Result<Denoiser<f64>> {
    let mut model = Denoiser::<f64>::new(config, seed)?;
    let mut r = rng::stream(seed, "perturb", 0);
    let normal = Normal::new(0.0, std).map_err(|e| Error::Internal(e.to_string()))?;
    model
        .params
        .for_each_mut(|_, t| t.data.iter_mut().for_each(|v| *v += normal.sample(&mut r)));
    Ok(model)
}

fn param_count(p: &crate::denoiser::DenoiserParams<f64>) -> Vec<usize> {
    p.tensors().iter().map(|(_, t)| t.data.len()).collect()
}

/// Analytic gradients of the bound against central differences on an
/// `L = 2, d = 32` denoiser in every time-conditioning mode.
pub fn gradient_check(seed: u64, coords_per_mode: usize) -> CheckReport {
    timed(5, "gradient check", 60.0, || {
        let mut r = rng::stream(seed, "check-grad", 0);
        let steps = 8;
        let vocab = NUM_SPECIALS + 9;
        let mut worst = 0.0f64;
        let mut checked = 0;
        for (m, mode) in [TimeMode::Lte, TimeMode::Pte, TimeMode::Tad].into_iter().enumerate() {
            let mut config = DenoiserConfig::new(vocab, mode, steps).with_size(2, 32, 4);
            config.n_max = 12;
            config.dropout = 0.0;
            let model = perturbed_model(config, seed + m as u64, 0.05)?;
            let items = (0..3)
                .map(|_| {
                    let n = r.random_range(3..=10);
                    let x0 = TokenSeq(
                        (0..n)
                            .map(|_| r.random_range(NUM_SPECIALS as u32..vocab as u32))
                            .collect(),
                    );
                    let sched = SequenceSchedule::for_sequence(&random_h(&mut r, n), &ScheduleParams::new(steps, 0.3))?;
                    let t = r.random_range(1..=steps);
                    let mut xt = forward_sample(&x0, t, &sched, &mut r)?;
                    xt.0[0] = MASK_ID;
                    Ok(NoisedExample { x0, xt, t, sched })
                })
                .collect::<Result<Vec<_>>>()?;
            let loss = |model: &Denoiser<f64>| -> Result<f64> {
                let (l, _) = diffusion_loss_packed(model, &items, None, false)?;
                Ok(l.iter().map(|b| b.total).sum())
            };
            let (_, grads) = diffusion_loss_packed(&model, &items, None, true)?;
            let grads = grads.expect("requested");
            let sizes = param_count(&grads);
            let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, t)| t.data.clone()).collect();
            let eps = 1e-5;
            for _ in 0..coords_per_mode {
                let ti = r.random_range(0..sizes.len());
                let ei = r.random_range(0..sizes[ti]);
                let mut plus = model.clone();
                plus.params.tensors_mut()[ti].data[ei] += eps;
                let mut minus = model.clone();
                minus.params.tensors_mut()[ti].data[ei] -= eps;
                let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * eps);
                let a = analytic[ti][ei];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
                checked += 1;
            }
        }
        Ok((
            worst <= 1e-4,
            format!("{checked} coordinates, max relative error {worst:.2e}"),
        ))
    })
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// The collapsed masked-position term against KL over full distributions.
pub fn kl_simplification(seed: u64, instances: usize) -> CheckReport {
    timed(6, "KL simplification", 30.0, || {
        let mut r = rng::stream(seed, "check-kl", 0);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let content = r.random_range(1..=20);
            let k = NUM_SPECIALS + content;
            let steps = r.random_range(1..=8);
            let sched = SequenceSchedule::for_sequence(&random_h(&mut r, 1), &ScheduleParams::new(steps, 0.0))?;
            let sched = if r.random_bool(0.5) {
                sched
            } else {
                let tiny = TinyInstance {
                    content,
                    n: 1,
                    steps,
                    beta: (1..=steps)
                        .map(|t| vec![if t == steps { 1.0 } else { r.random_range(0.05..0.95) }])
                        .collect(),
                };
                SequenceSchedule::from_alpha_bar(&tiny.alpha_bar_rows())?
            };
            let tiny =
                TinyInstance::from_alpha_bar(content, &(0..=steps).map(|t| sched.row(t).to_vec()).collect::<Vec<_>>())?;
            let t = r.random_range(1..=steps);
            let x0 = r.random_range(NUM_SPECIALS as u32..k as u32);
            let logits: Vec<f64> = (0..k)
                .map(|v| {
                    if v < NUM_SPECIALS {
                        f64::NEG_INFINITY
                    } else {
                        r.random_range(-4.0..4.0)
                    }
                })
                .collect();
            let block = Logits {
                n: 1,
                k,
                data: logits.clone(),
            };
            let (b, _) = diffusion_terms(&block, &[x0], &[MASK_ID], t, &sched)?;
            let main = b.l_t_kl + b.l0;
            let mut probs = vec![0.0; k];
            probs[NUM_SPECIALS..].copy_from_slice(&softmax(&logits[NUM_SPECIALS..]));
            let q = brute_posterior(&tiny, &[MASK_ID], &[x0], t)?;
            let p = reverse_kernel_row(&tiny, MASK_ID, &probs, t, 0)?;
            worst = worst.max((generic_kl(q.row(0), &p) - main).abs());
        }
        Ok((worst <= 1e-9, format!("{instances} instances, max |error| {worst:.2e}")))
    })
}

fn model_probs(model: &Denoiser<f64>, xt: &[u32], t: usize) -> Result<Vec<Vec<f64>>> {
    let time = model.config.time_mode.uses_time().then_some(t);
    let (logits, _) = model.forward(&[SeqInput::new(xt, time)], None)?;
    Ok(logits.probabilities())
}

/// Bound for `x0` with every `t` and every `x_t` weighted exactly.
fn exhaustive_bound(model: &Denoiser<f64>, sched: &SequenceSchedule, x0: &[u32]) -> Result<f64> {
    let n = x0.len();
    let mut total = crate::training::prior_term(sched);
    for t in 1..=sched.steps() {
        for pattern in 0..1usize << n {
            let mut q = 1.0;
            let xt: Vec<u32> = (0..n)
                .map(|i| {
                    let a = sched.alpha_bar(t, i);
                    if pattern >> i & 1 == 1 {
                        q *= 1.0 - a;
                        MASK_ID
                    } else {
                        q *= a;
                        x0[i]
                    }
                })
                .collect();
            if q == 0.0 {
                continue;
            }
            let time = model.config.time_mode.uses_time().then_some(t);
            let (logits, _) = model.forward(&[SeqInput::new(&xt, time)], None)?;
            let (b, _) = diffusion_terms(&logits, x0, &xt, t, sched)?;
            total += q * (b.l_t_kl + b.l0);
        }
    }
    Ok(total)
}

/// The exactly averaged bound never undercuts the enumerated likelihood.
pub fn elbo_bound(seed: u64, instances: usize) -> CheckReport {
    timed(7, "ELBO bound", 60.0, || {
        let mut r = rng::stream(seed, "check-elbo", 0);
        let mut min_gap = f64::INFINITY;
        let modes = [TimeMode::Lte, TimeMode::Pte, TimeMode::Tad];
        for j in 0..instances {
            let tiny = TinyInstance::random(&mut r, true);
            let sched = SequenceSchedule::from_alpha_bar(&tiny.alpha_bar_rows())?;
            let mut config = DenoiserConfig::new(tiny.k_total(), modes[j % 3], tiny.steps).with_size(1, 16, 2);
            config.n_max = tiny.n;
            config.dropout = 0.0;
            let model = perturbed_model(config, rng::derive_seed(seed, "elbo-model", j as u64), 0.5)?;
            let x0 = random_clean(&mut r, &tiny);
            let bound = exhaustive_bound(&model, &sched, &x0)?;
            let nll = exact_nll(&tiny, &mut |xt: &[u32], t: usize| model_probs(&model, xt, t), &x0)?;
            min_gap = min_gap.min(bound - nll);
        }
        Ok((
            min_gap >= -1e-6,
            format!("{instances} instances, min (bound - nll) {min_gap:.3e}"),
        ))
    })
}

fn toy_vocab(content: usize) -> Result<Vocab> {
    let line: Vec<String> = (0..content - 1).map(|i| format!("w{i}")).collect();
    Vocab::from_lines([line.join(" ").as_str()], content + NUM_SPECIALS, TokenizerKind::Word)
}

/// Untrained uniform model with the linear schedule: the mean masked count
/// after reaching step `t` is `n t / T`.
pub fn sampler_sanity(seed: u64, chains: usize, exec: Exec) -> CheckReport {
    timed(11, "sampler sanity", 120.0, || {
        let (n, steps) = (8usize, 8usize);
        let vocab = toy_vocab(10)?;
        let surprisal = SurprisalTable::from_vocab(&vocab, 1.0, InfoUnit::Nats)?;
        let mut config = DenoiserConfig::new(vocab.len(), TimeMode::Lte, steps).with_size(1, 16, 2);
        config.n_max = n;
        let model = Denoiser::<f32>::new(config, seed)?;
        let cfg = SampleConfig {
            length: n,
            iterations: steps,
            seed,
            chunk_size: 64,
            exec,
            ..Default::default()
        };
        let gens = generate_many(&model, &surprisal, &ScheduleParams::new(steps, 0.0), &cfg, chains)?;
        let mut worst_sigma = 0.0f64;
        for step in &gens[0].trajectory {
            let t = step.t;
            let p = t as f64 / steps as f64;
            let mean = gens
                .iter()
                .map(|g| g.trajectory[step.iteration].tokens.num_masked() as f64)
                .sum::<f64>()
                / chains as f64;
            let sd = (n as f64 * p * (1.0 - p) / chains as f64).sqrt();
            let dev = (mean - n as f64 * p).abs();
            if sd > 0.0 {
                worst_sigma = worst_sigma.max(dev / sd);
            } else if dev > 0.0 {
                worst_sigma = f64::INFINITY;
            }
        }
        let clean = gens
            .iter()
            .all(|g| g.tokens.iter().all(|&v| v as usize >= NUM_SPECIALS));
        Ok((
            clean && worst_sigma <= 3.0,
            format!("{chains} chains, all mask-free: {clean}, worst deviation {worst_sigma:.2} sigma"),
        ))
    })
}

/// Hand-checked BLEU values.
pub fn bleu_examples() -> CheckReport {
    timed(12, "BLEU examples", 5.0, || {
        let w = |s: &str| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>();
        let same = vec![w("the quick brown fox jumps")];
        let identity = bleu4(&same, &same)?;
        let short = bleu4(&[w("the cat sat")], &[w("the cat sat down")])?;
        // Clipped precisions 3/3, 2/2, 1/1; the empty 4-gram order is
        // smoothed to (0 + 1) / (0 + 1); brevity penalty exp(1 - 4/3).
        let expected = (1.0f64 - 4.0 / 3.0).exp();
        let selfb = self_bleu4(&vec![w("a b c d e f"); 3])?;
        let ok = identity == 1.0 && (short - expected).abs() <= 1e-15 && selfb == 1.0;
        Ok((
            ok,
            format!("identity {identity}, short example {short:.15} (expected {expected:.15}), self-BLEU {selfb}"),
        ))
    })
}

/// Every oracle-backed check at its acceptance size.
pub fn run_all(seed: u64, exec: Exec) -> Vec<CheckReport> {
    vec![
        spindle_identity(seed, 1000),
        degenerate_schedule(seed),
        posterior_correctness(seed, 1000),
        marginal_correctness(seed, 20, 100_000),
        gradient_check(seed, 40),
        kl_simplification(seed, 1000),
        elbo_bound(seed, 50),
        sampler_sanity(seed, 10_000, exec),
        bleu_examples(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        for report in [
            spindle_identity(1, 20),
            degenerate_schedule(1),
            posterior_correctness(1, 50),
            marginal_correctness(1, 3, 20_000),
            gradient_check(1, 5),
            kl_simplification(1, 50),
            elbo_bound(1, 5),
            sampler_sanity(1, 300, Exec::Sequential),
            bleu_examples(),
        ] {
            assert!(report.passed, "{report}");
        }
    }
}
