use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::Scalar;
use crate::error::{Error, Result};
use crate::rng;

/// How the diffusion step reaches the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeMode {
    /// Sinusoidal step embedding through a two-layer MLP, added to the
    /// hidden state before every layer.
    Lte,
    /// A learned step token placed between `[CLS]` and the sequence.
    Pte,
    /// No step input; the mask count carries it implicitly.
    Tad,
}

impl TimeMode {
    pub fn uses_time(self) -> bool {
        self != TimeMode::Tad
    }

    /// Number of input rows in front of the sequence.
    pub fn prefix_len(self) -> usize {
        match self {
            TimeMode::Pte => 2,
            _ => 1,
        }
    }
}

impl std::str::FromStr for TimeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lte" => Ok(TimeMode::Lte),
            "pte" => Ok(TimeMode::Pte),
            "tad" => Ok(TimeMode::Tad),
            other => Err(Error::Config(format!("unknown time mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Longest sequence the positional table covers (excluding prefix rows).
    pub n_max: usize,
    /// Diffusion steps; sizes the prefix time-token table.
    pub steps: usize,
    pub time_mode: TimeMode,
    pub dropout: f64,
}

impl DenoiserConfig {
    pub fn new(vocab_size: usize, time_mode: TimeMode, steps: usize) -> Self {
        DenoiserConfig {
            vocab_size,
            d_model: 128,
            layers: 4,
            heads: 4,
            d_ff: 512,
            n_max: 64,
            steps,
            time_mode,
            dropout: 0.1,
        }
    }

    pub fn with_size(mut self, layers: usize, d_model: usize, heads: usize) -> Self {
        self.layers = layers;
        self.d_model = d_model;
        self.heads = heads;
        self.d_ff = 4 * d_model;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size < 4 || self.d_model < 2 || self.layers == 0 || self.d_ff == 0 || self.n_max == 0 {
            return Err(Error::Config(format!("degenerate denoiser config {self:?}")));
        }
        if self.steps == 0 {
            return Err(Error::Config("diffusion steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn positions(&self) -> usize {
        self.n_max + self.time_mode.prefix_len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| loop {
                // Truncated at two standard deviations.
                let v: f64 = dist.sample(rng);
                if v.abs() <= 2.0 * std {
                    break F::of(v);
                }
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_g: Tensor<F>,
    pub ln1_b: Tensor<F>,
    pub w_qkv: Tensor<F>,
    pub b_qkv: Tensor<F>,
    pub w_o: Tensor<F>,
    pub b_o: Tensor<F>,
    pub ln2_g: Tensor<F>,
    pub ln2_b: Tensor<F>,
    pub w_ff1: Tensor<F>,
    pub b_ff1: Tensor<F>,
    pub w_ff2: Tensor<F>,
    pub b_ff2: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeMlp<F> {
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

/// Every learnable tensor of the denoiser. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<F> {
    pub token_embedding: Tensor<F>,
    pub positional_embedding: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub lnf_g: Tensor<F>,
    pub lnf_b: Tensor<F>,
    pub w_out: Tensor<F>,
    pub b_out: Tensor<F>,
    pub time_mlp: Option<TimeMlp<F>>,
    pub time_token_embeddings: Option<Tensor<F>>,
}

pub const INIT_STD: f64 = 0.02;

impl<F: Scalar> DenoiserParams<F> {
    /// Truncated-normal weights (std 0.02), unit layer-norm gains, zero
    /// biases and a zero output projection.
    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "init", 0);
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let normal = |shape: &[usize], r: &mut rng::Rng| Tensor::normal(shape, INIT_STD, r);
        let token_embedding = normal(&[v, d], &mut r);
        let positional_embedding = normal(&[config.positions(), d], &mut r);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_g: Tensor::filled(&[d], F::one()),
                ln1_b: Tensor::zeros(&[d]),
                w_qkv: normal(&[d, 3 * d], &mut r),
                b_qkv: Tensor::zeros(&[3 * d]),
                w_o: normal(&[d, d], &mut r),
                b_o: Tensor::zeros(&[d]),
                ln2_g: Tensor::filled(&[d], F::one()),
                ln2_b: Tensor::zeros(&[d]),
                w_ff1: normal(&[d, f], &mut r),
                b_ff1: Tensor::zeros(&[f]),
                w_ff2: normal(&[f, d], &mut r),
                b_ff2: Tensor::zeros(&[d]),
            })
            .collect();
        let time_mlp = (config.time_mode == TimeMode::Lte).then(|| TimeMlp {
            w1: normal(&[d, d], &mut r),
            b1: Tensor::zeros(&[d]),
            w2: normal(&[d, d], &mut r),
            b2: Tensor::zeros(&[d]),
        });
        let time_token_embeddings = (config.time_mode == TimeMode::Pte).then(|| normal(&[config.steps + 1, d], &mut r));
        Ok(DenoiserParams {
            token_embedding,
            positional_embedding,
            layers,
            lnf_g: Tensor::filled(&[d], F::one()),
            lnf_b: Tensor::zeros(&[d]),
            w_out: Tensor::zeros(&[d, v]),
            b_out: Tensor::zeros(&[v]),
            time_mlp,
            time_token_embeddings,
        })
    }

    /// Same structure with every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_mut(|_, t| t.data.iter_mut().for_each(|v| *v = F::zero()));
        out
    }

    /// Visits every tensor in checkpoint order with its name.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&str, &'a Tensor<F>)) {
        f("token_embedding", &self.token_embedding);
        f("positional_embedding", &self.positional_embedding);
        for (l, lp) in self.layers.iter().enumerate() {
            for (name, t) in lp.named() {
                f(&format!("layer{l}.{name}"), t);
            }
        }
        f("lnf_g", &self.lnf_g);
        f("lnf_b", &self.lnf_b);
        f("w_out", &self.w_out);
        f("b_out", &self.b_out);
        if let Some(m) = &self.time_mlp {
            f("time_mlp.w1", &m.w1);
            f("time_mlp.b1", &m.b1);
            f("time_mlp.w2", &m.w2);
            f("time_mlp.b2", &m.b2);
        }
        if let Some(t) = &self.time_token_embeddings {
            f("time_token_embeddings", t);
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<F>)) {
        f("token_embedding", &mut self.token_embedding);
        f("positional_embedding", &mut self.positional_embedding);
        for (l, lp) in self.layers.iter_mut().enumerate() {
            for (name, t) in lp.named_mut() {
                f(&format!("layer{l}.{name}"), t);
            }
        }
        f("lnf_g", &mut self.lnf_g);
        f("lnf_b", &mut self.lnf_b);
        f("w_out", &mut self.w_out);
        f("b_out", &mut self.b_out);
        if let Some(m) = &mut self.time_mlp {
            f("time_mlp.w1", &mut m.w1);
            f("time_mlp.b1", &mut m.b1);
            f("time_mlp.w2", &mut m.w2);
            f("time_mlp.b2", &mut m.b2);
        }
        if let Some(t) = &mut self.time_token_embeddings {
            f("time_token_embeddings", t);
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        self.for_each(|name, t| out.push((name.to_owned(), t)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<*mut Tensor<F>> = Vec::new();
        self.for_each_mut(|_, t| out.push(t as *mut _));
        // SAFETY: each pointer refers to a distinct field of `self`, which
        // stays mutably borrowed for the lifetime of the returned references.
        out.into_iter().map(|p| unsafe { &mut *p }).collect()
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.data.len());
        n
    }

    pub fn cast<G: Scalar>(&self) -> DenoiserParams<G> {
        let c = |t: &Tensor<F>| t.cast::<G>();
        DenoiserParams {
            token_embedding: c(&self.token_embedding),
            positional_embedding: c(&self.positional_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: c(&l.ln1_g),
                    ln1_b: c(&l.ln1_b),
                    w_qkv: c(&l.w_qkv),
                    b_qkv: c(&l.b_qkv),
                    w_o: c(&l.w_o),
                    b_o: c(&l.b_o),
                    ln2_g: c(&l.ln2_g),
                    ln2_b: c(&l.ln2_b),
                    w_ff1: c(&l.w_ff1),
                    b_ff1: c(&l.b_ff1),
                    w_ff2: c(&l.w_ff2),
                    b_ff2: c(&l.b_ff2),
                })
                .collect(),
            lnf_g: c(&self.lnf_g),
            lnf_b: c(&self.lnf_b),
            w_out: c(&self.w_out),
            b_out: c(&self.b_out),
            time_mlp: self.time_mlp.as_ref().map(|m| TimeMlp {
                w1: c(&m.w1),
                b1: c(&m.b1),
                w2: c(&m.w2),
                b2: c(&m.b2),
            }),
            time_token_embeddings: self.time_token_embeddings.as_ref().map(c),
        }
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        let others = other.tensors();
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(others) {
            for (a, &b) in dst.data.iter_mut().zip(&src.data) {
                *a = *a + b;
            }
        }
    }

    pub fn scale(&mut self, k: F) {
        self.for_each_mut(|_, t| t.data.iter_mut().for_each(|v| *v = *v * k));
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t| ok &= t.data.iter().all(|v| v.is_finite()));
        ok
    }

    /// Checks every tensor shape against `config`.
    pub fn check_shapes(&self, config: &DenoiserConfig) -> Result<()> {
        let reference = DenoiserParams::<F>::skeleton(config)?;
        let mine = self.tensors();
        let theirs = reference.tensors();
        if mine.len() != theirs.len() {
            return Err(Error::Shape(format!(
                "{} tensors, expected {}",
                mine.len(),
                theirs.len()
            )));
        }
        for ((name, a), (_, b)) in mine.iter().zip(&theirs) {
            if a.shape != b.shape || a.data.len() != b.data.len() {
                return Err(Error::Shape(format!("{name}: {:?} vs expected {:?}", a.shape, b.shape)));
            }
        }
        Ok(())
    }

    fn skeleton(config: &DenoiserConfig) -> Result<Self> {
        // Zero-filled tensors of the right shapes; cheap compared to init.
        let mut p = DenoiserParams::<F>::init(config, 0)?;
        p.for_each_mut(|_, t| t.data.iter_mut().for_each(|v| *v = F::zero()));
        Ok(p)
    }
}

impl<F> LayerParams<F> {
    fn named(&self) -> [(&'static str, &Tensor<F>); 12] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("w_qkv", &self.w_qkv),
            ("b_qkv", &self.b_qkv),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w_ff1", &self.w_ff1),
            ("b_ff1", &self.b_ff1),
            ("w_ff2", &self.w_ff2),
            ("b_ff2", &self.b_ff2),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor<F>); 12] {
        [
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("w_qkv", &mut self.w_qkv),
            ("b_qkv", &mut self.b_qkv),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("w_ff1", &mut self.w_ff1),
            ("b_ff1", &mut self.b_ff1),
            ("w_ff2", &mut self.w_ff2),
            ("b_ff2", &mut self.b_ff2),
        ]
    }
}
