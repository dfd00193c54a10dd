use rand::Rng;

use super::ops::{
    self, gelu, gelu_grad, gemm_view, layer_norm, layer_norm_backward, linear, linear_backward, LayerNormOut, Scalar,
    View,
};
use super::params::{DenoiserConfig, DenoiserParams, TimeMode};
use crate::corpus::{CLS_ID, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::rng;

/// One sequence to denoise and its (optional) diffusion step.
#[derive(Debug, Clone, Copy)]
pub struct SeqInput<'a> {
    pub tokens: &'a [u32],
    pub t: Option<usize>,
}

impl<'a> SeqInput<'a> {
    pub fn new(tokens: &'a [u32], t: Option<usize>) -> Self {
        SeqInput { tokens, t }
    }
}

/// Logits for the sequence positions only (prefix rows dropped), `n x K`.
/// Special-token columns hold `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<F> {
    pub n: usize,
    pub k: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Logits<F> {
    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    /// Softmax of every row (over content tokens), in `f64`.
    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| {
                let mut row: Vec<f64> = self.row(i).iter().map(|v| v.f64()).collect();
                ops::softmax_in_place(&mut row);
                row
            })
            .collect()
    }

    /// Splits a packed batch result into per-sequence blocks.
    pub fn split(&self, lens: &[usize]) -> Vec<Logits<F>> {
        let mut off = 0;
        lens.iter()
            .map(|&n| {
                let block = Logits {
                    n,
                    k: self.k,
                    data: self.data[off * self.k..(off + n) * self.k].to_vec(),
                };
                off += n;
                block
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Segment {
    start: usize,
    len: usize,
    t: Option<usize>,
}

struct LayerCache<F> {
    ln1: LayerNormOut<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    attn: Vec<F>,
    drop1: Option<Vec<F>>,
    ln2: LayerNormOut<F>,
    ff_pre: Vec<F>,
    ff_act: Vec<F>,
    drop2: Option<Vec<F>>,
}

struct TimeCache<F> {
    sin: Vec<F>,
    pre: Vec<F>,
    act: Vec<F>,
}

/// Activations recorded by a forward pass, consumed by
/// [`Denoiser::backward`].
pub struct ForwardCache<F> {
    segs: Vec<Segment>,
    rows: usize,
    row_token: Vec<Option<u32>>,
    emb_drop: Option<Vec<F>>,
    time: Option<TimeCache<F>>,
    layers: Vec<LayerCache<F>>,
    lnf: LayerNormOut<F>,
    out_rows: Vec<usize>,
    out_in: Vec<F>,
}

impl<F> ForwardCache<F> {
    pub fn num_outputs(&self) -> usize {
        self.out_rows.len()
    }
}

/// The attention denoiser: configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<F> {
    pub config: DenoiserConfig,
    pub params: DenoiserParams<F>,
}

fn dropout_mask<F: Scalar, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<F> {
    let keep = F::of(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
        .collect()
}

fn mul_in_place<F: Scalar>(x: &mut [F], m: &[F]) {
    for (a, &b) in x.iter_mut().zip(m) {
        *a = *a * b;
    }
}

fn add_in_place<F: Scalar>(x: &mut [F], y: &[F]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a = *a + b;
    }
}

impl<F: Scalar> Denoiser<F> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let params = DenoiserParams::init(&config, seed)?;
        Ok(Denoiser { config, params })
    }

    pub fn from_parts(config: DenoiserConfig, params: DenoiserParams<F>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Denoiser { config, params })
    }

    pub fn cast<G: Scalar>(&self) -> Denoiser<G> {
        Denoiser {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, input: &SeqInput<'_>) -> Result<()> {
        let cfg = &self.config;
        match (cfg.time_mode.uses_time(), input.t) {
            (true, None) => {
                return Err(Error::TimeConditioning(format!(
                    "required by {:?} mode but not supplied",
                    cfg.time_mode
                )))
            }
            (false, Some(_)) => return Err(Error::TimeConditioning("supplied to a time-agnostic model".into())),
            (_, Some(t)) if t > cfg.steps => return Err(Error::StepOutOfRange { t, max: cfg.steps }),
            _ => {}
        }
        if input.tokens.len() > cfg.n_max {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds n_max {}",
                input.tokens.len(),
                cfg.n_max
            )));
        }
        if let Some(&bad) = input.tokens.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {bad} outside vocab of {}",
                cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// `p(x0 | x_t)` logits for one sequence. Deterministic (no dropout).
    pub fn predict_x0_logits(&self, xt: &[u32], t: Option<usize>) -> Result<Logits<F>> {
        Ok(self.forward(&[SeqInput::new(xt, t)], None)?.0)
    }

    /// Packed forward pass over a batch. Dropout applies iff `dropout_rng`
    /// is given and the configured rate is positive.
    pub fn forward(
        &self,
        batch: &[SeqInput<'_>],
        mut dropout_rng: Option<&mut rng::Rng>,
    ) -> Result<(Logits<F>, ForwardCache<F>)> {
        let cfg = &self.config;
        let p = &self.params;
        let (d, v, ff) = (cfg.d_model, cfg.vocab_size, cfg.d_ff);
        let prefix = cfg.time_mode.prefix_len();
        let rate = cfg.dropout;
        let mut drop = |len: usize| -> Option<Vec<F>> {
            match dropout_rng.as_deref_mut() {
                Some(r) if rate > 0.0 => Some(dropout_mask(len, rate, r)),
                _ => None,
            }
        };

        let mut segs = Vec::with_capacity(batch.len());
        let mut row_token = Vec::new();
        let mut out_rows = Vec::new();
        for input in batch {
            self.check_input(input)?;
            let start = row_token.len();
            row_token.push(Some(CLS_ID));
            if cfg.time_mode == TimeMode::Pte {
                row_token.push(None);
            }
            for (j, &tok) in input.tokens.iter().enumerate() {
                out_rows.push(start + prefix + j);
                row_token.push(Some(tok));
            }
            segs.push(Segment {
                start,
                len: prefix + input.tokens.len(),
                t: input.t,
            });
        }
        let rows = row_token.len();

        // Embeddings.
        let mut x = vec![F::zero(); rows * d];
        for seg in &segs {
            for r in 0..seg.len {
                let dst = &mut x[(seg.start + r) * d..(seg.start + r + 1) * d];
                let emb = match row_token[seg.start + r] {
                    Some(tok) => &p.token_embedding.data[tok as usize * d..(tok as usize + 1) * d],
                    None => {
                        let t = seg.t.expect("checked");
                        let table = p.time_token_embeddings.as_ref().expect("pte table");
                        &table.data[t * d..(t + 1) * d]
                    }
                };
                let pos = &p.positional_embedding.data[r * d..(r + 1) * d];
                for ((o, &a), &b) in dst.iter_mut().zip(emb).zip(pos) {
                    *o = a + b;
                }
            }
        }
        let emb_drop = drop(rows * d);
        if let Some(m) = &emb_drop {
            mul_in_place(&mut x, m);
        }

        // Layer-wise time embedding, one vector per sequence.
        let time = match &p.time_mlp {
            Some(mlp) => {
                let mut sin = Vec::with_capacity(segs.len() * d);
                for seg in &segs {
                    sin.extend(ops::sinusoid::<F>(seg.t.expect("checked") as f64, d));
                }
                let pre = linear(&sin, &mlp.w1.data, &mlp.b1.data, segs.len(), d, d);
                let act: Vec<F> = pre.iter().map(|&u| gelu(u)).collect();
                Some(TimeCache { sin, pre, act })
            }
            None => None,
        };
        let time_vec = match (&p.time_mlp, &time) {
            (Some(mlp), Some(tc)) => Some(linear(&tc.act, &mlp.w2.data, &mlp.b2.data, segs.len(), d, d)),
            _ => None,
        };

        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let probs_len: usize = segs.iter().map(|s| heads * s.len * s.len).sum();
        let mut layers = Vec::with_capacity(cfg.layers);
        for lp in &p.layers {
            if let Some(e) = &time_vec {
                for (b, seg) in segs.iter().enumerate() {
                    for r in seg.start..seg.start + seg.len {
                        add_in_place(&mut x[r * d..(r + 1) * d], &e[b * d..(b + 1) * d]);
                    }
                }
            }
            let ln1 = layer_norm(&x, &lp.ln1_g.data, &lp.ln1_b.data, d);
            let qkv = linear(&ln1.y, &lp.w_qkv.data, &lp.b_qkv.data, rows, d, 3 * d);
            let mut probs = vec![F::zero(); probs_len];
            let mut attn = vec![F::zero(); rows * d];
            let mut poff = 0;
            for seg in &segs {
                let s = seg.len;
                let base = seg.start * 3 * d;
                for h in 0..heads {
                    let q = View {
                        off: base + h * dh,
                        rows: s,
                        cols: dh,
                        rs: 3 * d,
                        cs: 1,
                    };
                    let k = View { off: q.off + d, ..q };
                    let vv = View {
                        off: q.off + 2 * d,
                        ..q
                    };
                    let pv = View::dense(poff, s, s);
                    gemm_view(scale, &qkv, q, &qkv, k.t(), &mut probs, pv, false);
                    for row in probs[poff..poff + s * s].chunks_exact_mut(s) {
                        ops::softmax_in_place(row);
                    }
                    let o = View {
                        off: seg.start * d + h * dh,
                        rows: s,
                        cols: dh,
                        rs: d,
                        cs: 1,
                    };
                    gemm_view(F::one(), &probs, pv, &qkv, vv, &mut attn, o, false);
                    poff += s * s;
                }
            }
            let mut y = linear(&attn, &lp.w_o.data, &lp.b_o.data, rows, d, d);
            let drop1 = drop(rows * d);
            if let Some(m) = &drop1 {
                mul_in_place(&mut y, m);
            }
            add_in_place(&mut x, &y);

            let ln2 = layer_norm(&x, &lp.ln2_g.data, &lp.ln2_b.data, d);
            let ff_pre = linear(&ln2.y, &lp.w_ff1.data, &lp.b_ff1.data, rows, d, ff);
            let ff_act: Vec<F> = ff_pre.iter().map(|&u| gelu(u)).collect();
            let mut y2 = linear(&ff_act, &lp.w_ff2.data, &lp.b_ff2.data, rows, ff, d);
            let drop2 = drop(rows * d);
            if let Some(m) = &drop2 {
                mul_in_place(&mut y2, m);
            }
            add_in_place(&mut x, &y2);
            layers.push(LayerCache {
                ln1,
                qkv,
                probs,
                attn,
                drop1,
                ln2,
                ff_pre,
                ff_act,
                drop2,
            });
        }

        let lnf = layer_norm(&x, &p.lnf_g.data, &p.lnf_b.data, d);
        let mut out_in = Vec::with_capacity(out_rows.len() * d);
        for &r in &out_rows {
            out_in.extend_from_slice(&lnf.y[r * d..(r + 1) * d]);
        }
        let mut logits = linear(&out_in, &p.w_out.data, &p.b_out.data, out_rows.len(), d, v);
        for row in logits.chunks_exact_mut(v) {
            row[..NUM_SPECIALS].fill(F::neg_infinity());
        }
        let out = Logits {
            n: out_rows.len(),
            k: v,
            data: logits,
        };
        let cache = ForwardCache {
            segs,
            rows,
            row_token,
            emb_drop,
            time,
            layers,
            lnf,
            out_rows,
            out_in,
        };
        Ok((out, cache))
    }

    /// Reverse-mode gradient of `sum(upstream * logits)` with respect to
    /// every parameter. Special-token columns of `upstream` are ignored.
    pub fn backward(&self, cache: &ForwardCache<F>, upstream: &[F]) -> Result<DenoiserParams<F>> {
        let cfg = &self.config;
        let p = &self.params;
        let (d, v, ff) = (cfg.d_model, cfg.vocab_size, cfg.d_ff);
        let n_out = cache.out_rows.len();
        if upstream.len() != n_out * v {
            return Err(Error::Shape(format!(
                "upstream gradient has {} entries, expected {}x{}",
                upstream.len(),
                n_out,
                v
            )));
        }
        let mut g = p.zeros_like();
        let rows = cache.rows;

        let mut dlogits = upstream.to_vec();
        for row in dlogits.chunks_exact_mut(v) {
            row[..NUM_SPECIALS].fill(F::zero());
        }
        let dout_in = linear_backward(
            &cache.out_in,
            &p.w_out.data,
            &dlogits,
            n_out,
            d,
            v,
            &mut g.w_out.data,
            &mut g.b_out.data,
        );
        let mut dlnf = vec![F::zero(); rows * d];
        for (k, &r) in cache.out_rows.iter().enumerate() {
            dlnf[r * d..(r + 1) * d].copy_from_slice(&dout_in[k * d..(k + 1) * d]);
        }
        let mut dx = layer_norm_backward(
            &dlnf,
            &cache.lnf,
            &p.lnf_g.data,
            d,
            &mut g.lnf_g.data,
            &mut g.lnf_b.data,
        );

        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let nseg = cache.segs.len();
        let mut dtime = cache.time.as_ref().map(|_| vec![F::zero(); nseg * d]);

        for (l, lc) in cache.layers.iter().enumerate().rev() {
            let lp = &p.layers[l];
            let gl = &mut g.layers[l];

            // Feed-forward block.
            let mut dy2 = dx.clone();
            if let Some(m) = &lc.drop2 {
                mul_in_place(&mut dy2, m);
            }
            let mut dact = linear_backward(
                &lc.ff_act,
                &lp.w_ff2.data,
                &dy2,
                rows,
                ff,
                d,
                &mut gl.w_ff2.data,
                &mut gl.b_ff2.data,
            );
            for (da, &u) in dact.iter_mut().zip(&lc.ff_pre) {
                *da = *da * gelu_grad(u);
            }
            let dln2 = linear_backward(
                &lc.ln2.y,
                &lp.w_ff1.data,
                &dact,
                rows,
                d,
                ff,
                &mut gl.w_ff1.data,
                &mut gl.b_ff1.data,
            );
            let dres = layer_norm_backward(
                &dln2,
                &lc.ln2,
                &lp.ln2_g.data,
                d,
                &mut gl.ln2_g.data,
                &mut gl.ln2_b.data,
            );
            add_in_place(&mut dx, &dres);

            // Attention block.
            let mut dy1 = dx.clone();
            if let Some(m) = &lc.drop1 {
                mul_in_place(&mut dy1, m);
            }
            let dattn = linear_backward(
                &lc.attn,
                &lp.w_o.data,
                &dy1,
                rows,
                d,
                d,
                &mut gl.w_o.data,
                &mut gl.b_o.data,
            );
            let mut dqkv = vec![F::zero(); rows * 3 * d];
            let mut poff = 0;
            let mut dp = Vec::new();
            for seg in &cache.segs {
                let s = seg.len;
                let base = seg.start * 3 * d;
                dp.resize(s * s, F::zero());
                let dv_s = View::dense(0, s, s);
                for h in 0..heads {
                    let q = View {
                        off: base + h * dh,
                        rows: s,
                        cols: dh,
                        rs: 3 * d,
                        cs: 1,
                    };
                    let k = View { off: q.off + d, ..q };
                    let vv = View {
                        off: q.off + 2 * d,
                        ..q
                    };
                    let o = View {
                        off: seg.start * d + h * dh,
                        rows: s,
                        cols: dh,
                        rs: d,
                        cs: 1,
                    };
                    let pv = View::dense(poff, s, s);
                    let pm = &lc.probs[poff..poff + s * s];
                    // dP = dO V^T, then the softmax Jacobian row by row.
                    gemm_view(F::one(), &dattn, o, &lc.qkv, vv.t(), &mut dp, dv_s, false);
                    for (drow, prow) in dp.chunks_exact_mut(s).zip(pm.chunks_exact(s)) {
                        let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<F>();
                        for (g, &pij) in drow.iter_mut().zip(prow) {
                            *g = pij * (*g - dot) * scale;
                        }
                    }
                    gemm_view(F::one(), &dp, dv_s, &lc.qkv, k, &mut dqkv, q, true);
                    gemm_view(F::one(), &dp, dv_s.t(), &lc.qkv, q, &mut dqkv, k, true);
                    gemm_view(F::one(), &lc.probs, pv.t(), &dattn, o, &mut dqkv, vv, true);
                    poff += s * s;
                }
            }
            let dln1 = linear_backward(
                &lc.ln1.y,
                &lp.w_qkv.data,
                &dqkv,
                rows,
                d,
                3 * d,
                &mut gl.w_qkv.data,
                &mut gl.b_qkv.data,
            );
            let dres = layer_norm_backward(
                &dln1,
                &lc.ln1,
                &lp.ln1_g.data,
                d,
                &mut gl.ln1_g.data,
                &mut gl.ln1_b.data,
            );
            add_in_place(&mut dx, &dres);

            if let Some(dt) = &mut dtime {
                for (b, seg) in cache.segs.iter().enumerate() {
                    for r in seg.start..seg.start + seg.len {
                        add_in_place(&mut dt[b * d..(b + 1) * d], &dx[r * d..(r + 1) * d]);
                    }
                }
            }
        }

        if let (Some(dt), Some(tc), Some(mlp), Some(gm)) = (&dtime, &cache.time, &p.time_mlp, &mut g.time_mlp) {
            let mut dact = linear_backward(&tc.act, &mlp.w2.data, dt, nseg, d, d, &mut gm.w2.data, &mut gm.b2.data);
            for (da, &u) in dact.iter_mut().zip(&tc.pre) {
                *da = *da * gelu_grad(u);
            }
            linear_backward(
                &tc.sin,
                &mlp.w1.data,
                &dact,
                nseg,
                d,
                d,
                &mut gm.w1.data,
                &mut gm.b1.data,
            );
        }

        if let Some(m) = &cache.emb_drop {
            mul_in_place(&mut dx, m);
        }
        for (b, seg) in cache.segs.iter().enumerate() {
            for r in 0..seg.len {
                let row = seg.start + r;
                let src = &dx[row * d..(row + 1) * d];
                add_in_place(&mut g.positional_embedding.data[r * d..(r + 1) * d], src);
                match cache.row_token[row] {
                    Some(tok) => {
                        let tok = tok as usize;
                        add_in_place(&mut g.token_embedding.data[tok * d..(tok + 1) * d], src);
                    }
                    None => {
                        let t = cache.segs[b].t.expect("pte step");
                        let table = g.time_token_embeddings.as_mut().expect("pte table");
                        add_in_place(&mut table.data[t * d..(t + 1) * d], src);
                    }
                }
            }
        }
        Ok(g)
    }

    /// Forward then backward for one sequence; convenience for checks.
    pub fn gradient(&self, xt: &[u32], t: Option<usize>, upstream: &[F]) -> Result<DenoiserParams<F>> {
        let (_, cache) = self.forward(&[SeqInput::new(xt, t)], None)?;
        self.backward(&cache, upstream)
    }
}
