//! Closed-form mathematics of the absorbing-state forward process.
//!
//! Each position follows a two-state chain: it either still holds its clean
//! token or has been absorbed into `[MASK]`. A [`SequenceSchedule`] stores
//! the retention probability `alpha_bar[t][i]` of every position at every
//! step; per-step masking rates, marginals and posteriors all follow from it.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSeq, MASK_ID};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    /// Number of diffusion steps `T`.
    pub steps: usize,
    /// Spindle amplitude; zero gives the linear `1 - t/T` retention.
    pub lambda: f64,
    /// Interior retentions are clamped to at most `1 - clamp_eps` so a
    /// masked position is never impossible for `t >= 1`.
    pub clamp_eps: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            steps: 64,
            lambda: 0.3,
            clamp_eps: 1e-6,
        }
    }
}

impl ScheduleParams {
    pub fn new(steps: usize, lambda: f64) -> Self {
        ScheduleParams {
            steps,
            lambda,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("diffusion steps must be >= 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..0.5).contains(&self.clamp_eps) {
            return Err(Error::Config(format!(
                "clamp_eps must be in [0, 0.5), got {}",
                self.clamp_eps
            )));
        }
        Ok(())
    }
}

/// `S(t) = lambda * sin(t pi / T)`.
pub fn spindle_amplitude(t: usize, params: &ScheduleParams) -> f64 {
    params.lambda * (t as f64 * std::f64::consts::PI / params.steps as f64).sin()
}

/// Relative informativeness `1 - mean(h) / h_i` of every position.
pub fn relative_information(h_seq: &[f64]) -> Result<Vec<f64>> {
    if h_seq.is_empty() {
        return Err(Error::Config("surprisal sequence is empty".into()));
    }
    for (i, &h) in h_seq.iter().enumerate() {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::BadSurprisal { id: i, value: h });
        }
    }
    let mean = h_seq.iter().sum::<f64>() / h_seq.len() as f64;
    Ok(h_seq.iter().map(|&h| 1.0 - mean / h).collect())
}

/// Unclamped spindle retentions, `(T+1) x n` row-major.
pub fn raw_spindle(h_seq: &[f64], params: &ScheduleParams) -> Result<Vec<f64>> {
    params.validate()?;
    let rel = relative_information(h_seq)?;
    let steps = params.steps;
    let mut out = Vec::with_capacity((steps + 1) * rel.len());
    for t in 0..=steps {
        let base = (steps - t) as f64 / steps as f64;
        let amp = spindle_amplitude(t, params);
        out.extend(rel.iter().map(|&r| base - amp * r));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSchedule {
    steps: usize,
    n: usize,
    alpha_bar: Vec<f64>,
    h_seq: Vec<f64>,
    clamp_events: usize,
}

impl SequenceSchedule {
    /// Spindle schedule for one sequence from its per-position surprisal.
    ///
    /// Raw retentions are clamped into `[0, 1 - clamp_eps]`, made
    /// nonincreasing in `t` by a running minimum, and the boundary rows are
    /// set to exactly 1 and 0.
    pub fn spindle(h_seq: &[f64], params: &ScheduleParams) -> Result<SequenceSchedule> {
        let raw = raw_spindle(h_seq, params)?;
        let n = h_seq.len();
        let steps = params.steps;
        let upper = 1.0 - params.clamp_eps;
        let mut alpha_bar = raw.clone();
        let mut clamp_events = 0;
        alpha_bar[..n].fill(1.0);
        alpha_bar[steps * n..].fill(0.0);
        for t in 1..steps {
            for i in 0..n {
                let prev = alpha_bar[(t - 1) * n + i];
                let v = raw[t * n + i].clamp(0.0, upper).min(prev);
                if v != raw[t * n + i] {
                    clamp_events += 1;
                }
                alpha_bar[t * n + i] = v;
            }
        }
        Ok(SequenceSchedule {
            steps,
            n,
            alpha_bar,
            h_seq: h_seq.to_vec(),
            clamp_events,
        })
    }

    /// The `lambda = 0` schedule `1 - t/T`, independent of the tokens.
    pub fn linear(n: usize, steps: usize) -> SequenceSchedule {
        let mut alpha_bar = Vec::with_capacity((steps + 1) * n);
        for t in 0..=steps {
            let a = (steps - t) as f64 / steps as f64;
            alpha_bar.extend(std::iter::repeat_n(a, n));
        }
        SequenceSchedule {
            steps,
            n,
            alpha_bar,
            h_seq: Vec::new(),
            clamp_events: 0,
        }
    }

    /// Builds the schedule the parameters call for: linear when `lambda` is
    /// zero (surprisal ignored), spindle otherwise.
    pub fn for_sequence(h_seq: &[f64], params: &ScheduleParams) -> Result<SequenceSchedule> {
        if params.lambda == 0.0 {
            params.validate()?;
            Ok(SequenceSchedule::linear(h_seq.len(), params.steps))
        } else {
            SequenceSchedule::spindle(h_seq, params)
        }
    }

    /// Schedule from explicit retentions, `rows[t][i]`. Rows must start at 1,
    /// stay in `[0, 1]` and be nonincreasing in `t`.
    pub fn from_alpha_bar(rows: &[Vec<f64>]) -> Result<SequenceSchedule> {
        if rows.len() < 2 {
            return Err(Error::Config("need at least steps 0 and 1".into()));
        }
        let n = rows[0].len();
        let mut alpha_bar = Vec::with_capacity(rows.len() * n);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::LengthMismatch(row.len(), n));
            }
            for (i, &a) in row.iter().enumerate() {
                let ok = (0.0..=1.0).contains(&a) && (t > 0 || a == 1.0) && (t == 0 || a <= rows[t - 1][i]);
                if !ok {
                    return Err(Error::Config(format!("invalid retention {a} at t={t}, position {i}")));
                }
            }
            alpha_bar.extend_from_slice(row);
        }
        Ok(SequenceSchedule {
            steps: rows.len() - 1,
            n,
            alpha_bar,
            h_seq: Vec::new(),
            clamp_events: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn h_seq(&self) -> &[f64] {
        &self.h_seq
    }

    /// Number of interior entries changed by clamping or monotonization.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    pub fn alpha_bar(&self, t: usize, i: usize) -> f64 {
        self.alpha_bar[t * self.n + i]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.alpha_bar[t * self.n..(t + 1) * self.n]
    }

    /// Per-step masking rate `beta_t^i = 1 - alpha_bar_t / alpha_bar_{t-1}`.
    /// A position already absorbed (`alpha_bar_{t-1} = 0`) reports 1.
    pub fn beta(&self, t: usize, i: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps);
        let prev = self.alpha_bar(t - 1, i);
        if prev == 0.0 {
            1.0
        } else {
            1.0 - self.alpha_bar(t, i) / prev
        }
    }

    /// Probability that a position still unmasked at `s` survives to `t`.
    pub fn skip_retention(&self, s: usize, t: usize, i: usize) -> f64 {
        let from = self.alpha_bar(s, i);
        if from == 0.0 {
            0.0
        } else {
            self.alpha_bar(t, i) / from
        }
    }

    /// Probability that a position masked at `t` is revealed by `s < t`,
    /// `(alpha_bar_s - alpha_bar_t) / (1 - alpha_bar_t)`.
    pub fn reveal_probability(&self, t: usize, s: usize, i: usize) -> Result<f64> {
        let at = self.alpha_bar(t, i);
        if at >= 1.0 {
            return Err(Error::ImpossibleState { pos: i, t });
        }
        Ok(((self.alpha_bar(s, i) - at) / (1.0 - at)).clamp(0.0, 1.0))
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps {
            Err(Error::StepOutOfRange { t, max: self.steps })
        } else {
            Ok(())
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n {
            Err(Error::LengthMismatch(len, self.n))
        } else {
            Ok(())
        }
    }

    /// CSV dump `t,position,alpha_bar`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,position,alpha_bar\n");
        for t in 0..=self.steps {
            for i in 0..self.n {
                let _ = writeln!(out, "{t},{i},{}", self.alpha_bar(t, i));
            }
        }
        out
    }
}

/// One categorical distribution per sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalGrid {
    n: usize,
    k: usize,
    probs: Vec<f64>,
}

impl CategoricalGrid {
    pub fn zeros(n: usize, k: usize) -> Self {
        CategoricalGrid {
            n,
            k,
            probs: vec![0.0; n * k],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        let mut probs = Vec::with_capacity(n * k);
        for row in rows {
            if row.len() != k {
                return Err(Error::LengthMismatch(row.len(), k));
            }
            probs.extend(row);
        }
        Ok(CategoricalGrid { n, k, probs })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_categories(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.probs[i * self.k..(i + 1) * self.k]
    }

    pub fn get(&self, i: usize, v: u32) -> f64 {
        self.probs[i * self.k + v as usize]
    }

    /// Largest deviation of a row sum from 1, or `None` if an entry is
    /// negative or non-finite.
    pub fn max_row_error(&self) -> Option<f64> {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            let row = self.row(i);
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return None;
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        Some(worst)
    }

    /// Draws one category per row by inverse CDF.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenSeq {
        TokenSeq((0..self.n).map(|i| sample_row(self.row(i), rng) as u32).collect())
    }
}

pub(crate) fn sample_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let total: f64 = row.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (v, &p) in row.iter().enumerate() {
        if p > 0.0 {
            if u < p {
                return v;
            }
            u -= p;
            last = v;
        }
    }
    last
}

/// `q(x_t | x_0)`: mass `alpha_bar_t^i` on the clean token, the rest on
/// `[MASK]`.
pub fn forward_marginal(x0: &[u32], t: usize, sched: &SequenceSchedule, k_total: usize) -> Result<CategoricalGrid> {
    sched.check_step(t)?;
    sched.check_len(x0.len())?;
    let mut grid = CategoricalGrid::zeros(x0.len(), k_total);
    for (i, &tok) in x0.iter().enumerate() {
        let a = sched.alpha_bar(t, i);
        let row = grid.row_mut(i);
        row[tok as usize] += a;
        row[MASK_ID as usize] += 1.0 - a;
    }
    Ok(grid)
}

/// Samples `x_t ~ q(x_t | x_0)` position by position.
pub fn forward_sample<R: Rng + ?Sized>(
    x0: &[u32],
    t: usize,
    sched: &SequenceSchedule,
    rng: &mut R,
) -> Result<TokenSeq> {
    sched.check_step(t)?;
    sched.check_len(x0.len())?;
    Ok(TokenSeq(
        x0.iter()
            .enumerate()
            .map(|(i, &tok)| {
                let keep = rng.random::<f64>() < sched.alpha_bar(t, i);
                if keep {
                    tok
                } else {
                    MASK_ID
                }
            })
            .collect(),
    ))
}

/// `q(x_s | x_t, x_0)` for any `s < t`, reveal/stay form.
pub fn skip_posterior(
    xt: &[u32],
    x0: &[u32],
    t: usize,
    s: usize,
    sched: &SequenceSchedule,
    k_total: usize,
) -> Result<CategoricalGrid> {
    if s >= t {
        return Err(Error::InvalidStepPair { s, t });
    }
    sched.check_step(t)?;
    sched.check_len(xt.len())?;
    sched.check_len(x0.len())?;
    let mut grid = CategoricalGrid::zeros(xt.len(), k_total);
    for (i, (&a, &b)) in xt.iter().zip(x0).enumerate() {
        if b == MASK_ID {
            return Err(Error::MaskInCleanSequence(i));
        }
        let row = grid.row_mut(i);
        if a == MASK_ID {
            let reveal = sched.reveal_probability(t, s, i)?;
            row[b as usize] = reveal;
            row[MASK_ID as usize] = 1.0 - reveal;
        } else if a == b {
            row[b as usize] = 1.0;
        } else {
            return Err(Error::InconsistentPair { pos: i, xt: a, x0: b });
        }
    }
    Ok(grid)
}

/// `q(x_{t-1} | x_t, x_0)`.
pub fn posterior(
    xt: &[u32],
    x0: &[u32],
    t: usize,
    sched: &SequenceSchedule,
    k_total: usize,
) -> Result<CategoricalGrid> {
    if t == 0 {
        return Err(Error::StepOutOfRange { t, max: sched.steps() });
    }
    skip_posterior(xt, x0, t, t - 1, sched, k_total)
}
