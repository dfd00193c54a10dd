//! Deliberately naive reference implementations for cross-checking.
//!
//! Everything here is derived from the transition matrices directly:
//! posteriors by Bayes over full `Q_t` products, marginals by simulating the
//! stepwise chain, likelihoods by enumerating trajectories. None of it calls
//! into the schedule, posterior or loss code it is used to check.

pub mod checks;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{MASK_ID, NUM_SPECIALS};
use crate::diffusion::CategoricalGrid;
use crate::error::{Error, Result};

pub const MAX_CONTENT: usize = 4;
pub const MAX_LEN: usize = 2;
pub const MAX_STEPS: usize = 4;

/// Per-step, per-position masking probabilities `beta[t-1][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyInstance {
    pub content: usize,
    pub n: usize,
    pub steps: usize,
    pub beta: Vec<Vec<f64>>,
}

type Matrix = Vec<Vec<f64>>;

impl TinyInstance {
    pub fn new(content: usize, beta: Vec<Vec<f64>>) -> Result<Self> {
        let steps = beta.len();
        let n = beta.first().map_or(0, Vec::len);
        if content == 0 || steps == 0 || n == 0 || beta.iter().any(|r| r.len() != n) {
            return Err(Error::Config("tiny instance needs content, steps and positions".into()));
        }
        if beta.iter().flatten().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::Config("beta entries must lie in [0, 1]".into()));
        }
        Ok(TinyInstance {
            content,
            n,
            steps,
            beta,
        })
    }

    /// Random instance within the enumeration bounds. With `absorb_at_end`
    /// the last step masks everything.
    pub fn random<R: Rng>(rng: &mut R, absorb_at_end: bool) -> Self {
        let content = rng.random_range(1..=MAX_CONTENT);
        let n = rng.random_range(1..=MAX_LEN);
        let steps = rng.random_range(1..=MAX_STEPS);
        let beta = (1..=steps)
            .map(|t| {
                (0..n)
                    .map(|_| {
                        if absorb_at_end && t == steps {
                            1.0
                        } else {
                            rng.random_range(0.05..0.95)
                        }
                    })
                    .collect()
            })
            .collect();
        TinyInstance {
            content,
            n,
            steps,
            beta,
        }
    }

    /// Instance reproducing given retention rows (row 0 all ones).
    pub fn from_alpha_bar(content: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let beta = rows
            .windows(2)
            .map(|w| {
                w[0].iter()
                    .zip(&w[1])
                    .map(|(&prev, &cur)| {
                        if prev == 0.0 {
                            1.0
                        } else {
                            (1.0 - cur / prev).clamp(0.0, 1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        TinyInstance::new(content, beta)
    }

    pub fn k_total(&self) -> usize {
        NUM_SPECIALS + self.content
    }

    pub fn content_ids(&self) -> std::ops::Range<u32> {
        NUM_SPECIALS as u32..self.k_total() as u32
    }

    /// Retention rows `prod_{s<=t} (1 - beta_s)` for building the schedule
    /// under test.
    pub fn alpha_bar_rows(&self) -> Vec<Vec<f64>> {
        let mut rows = vec![vec![1.0; self.n]];
        for t in 0..self.steps {
            let prev = rows[t].clone();
            rows.push(prev.iter().zip(&self.beta[t]).map(|(a, b)| a * (1.0 - b)).collect());
        }
        rows
    }

    /// One-step transition matrix `Q_t` at position `i` over all ids.
    pub fn q_matrix(&self, t: usize, i: usize) -> Matrix {
        let k = self.k_total();
        let b = self.beta[t - 1][i];
        let mask = MASK_ID as usize;
        let mut q = vec![vec![0.0; k]; k];
        for (a, row) in q.iter_mut().enumerate() {
            if a == mask {
                row[mask] = 1.0;
            } else {
                row[a] = 1.0 - b;
                row[mask] += b;
            }
        }
        q
    }

    /// `Q_{from+1} ... Q_to` at position `i` (identity when `from == to`).
    pub fn q_product(&self, from: usize, to: usize, i: usize) -> Matrix {
        let k = self.k_total();
        let mut acc: Matrix = (0..k)
            .map(|a| (0..k).map(|b| f64::from(u8::from(a == b))).collect())
            .collect();
        for t in from + 1..=to {
            let q = self.q_matrix(t, i);
            acc = (0..k)
                .map(|a| (0..k).map(|c| (0..k).map(|b| acc[a][b] * q[b][c]).sum()).collect())
                .collect();
        }
        acc
    }
}

/// Posterior row at one position: `q(x_s | x_t, x_0)` over all ids.
fn position_posterior(tiny: &TinyInstance, i: usize, xt_i: u32, x0_i: u32, t: usize, s: usize) -> Result<Vec<f64>> {
    let (a, c) = (x0_i as usize, xt_i as usize);
    let to_t = tiny.q_product(s, t, i);
    let to_s = tiny.q_product(0, s, i);
    let evidence = tiny.q_product(0, t, i)[a][c];
    if evidence == 0.0 {
        return Err(Error::ImpossibleEvidence { pos: i });
    }
    Ok((0..tiny.k_total())
        .map(|v| to_t[v][c] * to_s[a][v] / evidence)
        .collect())
}

/// `q(x_s | x_t, x_0)` by Bayes over matrix products.
pub fn brute_skip_posterior(
    tiny: &TinyInstance,
    xt: &[u32],
    x0: &[u32],
    t: usize,
    s: usize,
) -> Result<CategoricalGrid> {
    if s >= t || t > tiny.steps {
        return Err(Error::InvalidStepPair { s, t });
    }
    if xt.len() != tiny.n || x0.len() != tiny.n {
        return Err(Error::LengthMismatch(xt.len(), tiny.n));
    }
    let rows = (0..tiny.n)
        .map(|i| position_posterior(tiny, i, xt[i], x0[i], t, s))
        .collect::<Result<Vec<_>>>()?;
    CategoricalGrid::from_rows(rows)
}

/// `q(x_{t-1} | x_t, x_0)`.
pub fn brute_posterior(tiny: &TinyInstance, xt: &[u32], x0: &[u32], t: usize) -> Result<CategoricalGrid> {
    if t == 0 {
        return Err(Error::StepOutOfRange { t, max: tiny.steps });
    }
    brute_skip_posterior(tiny, xt, x0, t, t - 1)
}

/// Empirical `q(x_t | x_0)` from simulating the chain step by step.
pub fn mc_marginal(tiny: &TinyInstance, x0: &[u32], t: usize, draws: usize, seed: u64) -> Result<CategoricalGrid> {
    if t > tiny.steps {
        return Err(Error::StepOutOfRange { t, max: tiny.steps });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = tiny.k_total();
    let mut counts = vec![vec![0u64; k]; tiny.n];
    let mut x = vec![0u32; tiny.n];
    for _ in 0..draws {
        x.copy_from_slice(x0);
        for step in 0..t {
            for (i, v) in x.iter_mut().enumerate() {
                if *v != MASK_ID && rng.random::<f64>() < tiny.beta[step][i] {
                    *v = MASK_ID;
                }
            }
        }
        for (i, &v) in x.iter().enumerate() {
            counts[i][v as usize] += 1;
        }
    }
    CategoricalGrid::from_rows(
        counts
            .into_iter()
            .map(|r| r.into_iter().map(|c| c as f64 / draws.max(1) as f64).collect())
            .collect(),
    )
}

/// `KL(q || p)` with `0 ln 0 = 0`; `+inf` when `q` puts mass where `p` has none.
pub fn generic_kl(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .map(|(&a, &b)| {
            if a == 0.0 {
                0.0
            } else if b == 0.0 {
                f64::INFINITY
            } else {
                a * (a / b).ln()
            }
        })
        .sum()
}

/// Model interface for [`exact_nll`]: per-position probabilities over all
/// ids given `(x_t, t)`.
pub type X0Model<'a> = dyn FnMut(&[u32], usize) -> Result<Vec<Vec<f64>>> + 'a;

/// Reverse kernel `p(x_{t-1} | x_t) = sum_v q(x_{t-1} | x_t, v) p(v | x_t)`
/// for one position. Unmasked positions keep their token.
pub fn reverse_kernel_row(tiny: &TinyInstance, xt_i: u32, probs_i: &[f64], t: usize, i: usize) -> Result<Vec<f64>> {
    let k = tiny.k_total();
    if xt_i != MASK_ID {
        let mut row = vec![0.0; k];
        row[xt_i as usize] = 1.0;
        return Ok(row);
    }
    let mut row = vec![0.0; k];
    for v in tiny.content_ids() {
        let post = match position_posterior(tiny, i, MASK_ID, v, t, t - 1) {
            Ok(p) => p,
            Err(Error::ImpossibleEvidence { .. }) => continue,
            Err(e) => return Err(e),
        };
        for (r, &q) in row.iter_mut().zip(&post) {
            *r += q * probs_i[v as usize];
        }
    }
    Ok(row)
}

/// `-ln p(x0)` by summing over every latent trajectory `x_T ... x_1` that
/// starts from the all-mask prior.
pub fn exact_nll(tiny: &TinyInstance, model: &mut X0Model<'_>, x0: &[u32]) -> Result<f64> {
    if tiny.content > MAX_CONTENT || tiny.n > MAX_LEN || tiny.steps > MAX_STEPS {
        return Err(Error::TooLarge(format!(
            "enumeration limited to content <= {MAX_CONTENT}, n <= {MAX_LEN}, T <= {MAX_STEPS}"
        )));
    }
    if x0.len() != tiny.n {
        return Err(Error::LengthMismatch(x0.len(), tiny.n));
    }
    let k = tiny.k_total();
    let states: Vec<Vec<u32>> = (0..k.pow(tiny.n as u32))
        .map(|mut code| {
            (0..tiny.n)
                .map(|_| {
                    let v = code % k;
                    code /= k;
                    v as u32
                })
                .collect()
        })
        .collect();
    let mut cache: HashMap<(Vec<u32>, usize), Vec<Vec<f64>>> = HashMap::new();
    let mut total = 0.0;
    // Depth-first over trajectories; `stack` holds (x_t, t, path probability).
    let mut stack = vec![(vec![MASK_ID; tiny.n], tiny.steps, 1.0)];
    while let Some((xt, t, prob)) = stack.pop() {
        if t == 0 {
            if xt == x0 {
                total += prob;
            }
            continue;
        }
        let key = (xt.clone(), t);
        if !cache.contains_key(&key) {
            let probs = if xt.contains(&MASK_ID) {
                let p = model(&xt, t)?;
                (0..tiny.n)
                    .map(|i| reverse_kernel_row(tiny, xt[i], &p[i], t, i))
                    .collect::<Result<Vec<_>>>()?
            } else {
                (0..tiny.n)
                    .map(|i| reverse_kernel_row(tiny, xt[i], &[], t, i))
                    .collect::<Result<Vec<_>>>()?
            };
            cache.insert(key.clone(), probs);
        }
        let kernel = &cache[&key];
        for next in &states {
            let p: f64 = next.iter().enumerate().map(|(i, &v)| kernel[i][v as usize]).product();
            if p > 0.0 {
                stack.push((next.clone(), t - 1, prob * p));
            }
        }
    }
    Ok(-total.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(tiny: &TinyInstance) -> impl FnMut(&[u32], usize) -> Result<Vec<Vec<f64>>> + '_ {
        move |xt, _| {
            let c = tiny.content as f64;
            Ok(xt
                .iter()
                .map(|_| {
                    (0..tiny.k_total())
                        .map(|v| if v < NUM_SPECIALS { 0.0 } else { 1.0 / c })
                        .collect()
                })
                .collect())
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(generic_kl(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!((generic_kl(&[1.0, 0.0], &[0.5, 0.5]) - 2f64.ln()).abs() < 1e-15);
        assert!(generic_kl(&[0.5, 0.5], &[1.0, 0.0]).is_infinite());
    }

    #[test]
    fn deterministic_chain_posterior_is_point_mass() {
        let tiny = TinyInstance::new(3, vec![vec![0.0, 0.0]; 3]).unwrap();
        let x = [3, 5];
        let post = brute_posterior(&tiny, &x, &x, 2).unwrap();
        assert_eq!(post.get(0, 3), 1.0);
        assert_eq!(post.get(1, 5), 1.0);
    }

    #[test]
    fn full_beta_masks_everything() {
        let tiny = TinyInstance::new(2, vec![vec![0.3], vec![1.0]]).unwrap();
        let q = tiny.q_product(0, 2, 0);
        assert_eq!(q[3][MASK_ID as usize], 1.0);
        let m = mc_marginal(&tiny, &[4], 2, 100, 1).unwrap();
        assert_eq!(m.get(0, MASK_ID), 1.0);
    }

    #[test]
    fn impossible_evidence_is_reported() {
        let tiny = TinyInstance::new(2, vec![vec![0.0]]).unwrap();
        assert!(matches!(
            brute_posterior(&tiny, &[MASK_ID], &[3], 1),
            Err(Error::ImpossibleEvidence { pos: 0 })
        ));
    }

    #[test]
    fn marginal_at_zero_is_exact_and_seeded() {
        let tiny = TinyInstance::new(2, vec![vec![0.5, 0.5]; 2]).unwrap();
        let m = mc_marginal(&tiny, &[3, 4], 0, 50, 9).unwrap();
        assert_eq!(m.get(0, 3), 1.0);
        assert_eq!(m.get(1, 4), 1.0);
        assert_eq!(
            mc_marginal(&tiny, &[3, 4], 2, 500, 9).unwrap(),
            mc_marginal(&tiny, &[3, 4], 2, 500, 9).unwrap()
        );
    }

    #[test]
    fn uniform_single_step_nll_is_log_content() {
        let tiny = TinyInstance::new(3, vec![vec![1.0]]).unwrap();
        let nll = exact_nll(&tiny, &mut uniform(&tiny), &[4]).unwrap();
        assert!((nll - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_model_nll_is_zero() {
        let tiny = TinyInstance::new(4, vec![vec![0.4, 0.6], vec![0.5, 0.2], vec![1.0, 1.0]]).unwrap();
        let x0 = [5u32, 3];
        let mut perfect = |_: &[u32], _: usize| -> Result<Vec<Vec<f64>>> {
            Ok(x0
                .iter()
                .map(|&v| {
                    (0..tiny.k_total())
                        .map(|u| f64::from(u8::from(u == v as usize)))
                        .collect()
                })
                .collect())
        };
        assert!(exact_nll(&tiny, &mut perfect, &x0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn uniform_nll_is_log_content_per_position() {
        // A uniform predictor reveals each position with the correct token
        // with probability 1/C regardless of timing.
        let tiny = TinyInstance::new(4, vec![vec![0.4, 0.6], vec![0.5, 0.2], vec![1.0, 1.0]]).unwrap();
        let nll = exact_nll(&tiny, &mut uniform(&tiny), &[5, 3]).unwrap();
        assert!((nll - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn refuses_large_instances() {
        let tiny = TinyInstance::new(2, vec![vec![0.5]; 5]).unwrap();
        assert!(matches!(
            exact_nll(&tiny, &mut uniform(&tiny), &[3]),
            Err(Error::TooLarge(_))
        ));
    }
}
