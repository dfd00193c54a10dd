//! Subcommand implementations.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use spindle_core::corpus::{
    count_tokens, detokenize, read_lines, tokenize, InfoUnit, SurprisalTable, TokenSeq, TokenizerKind, Vocab,
};
use spindle_core::denoiser::{Checkpoint, CheckpointMeta, Denoiser, FORMAT_VERSION};
use spindle_core::diffusion::{ScheduleParams, SequenceSchedule};
use spindle_core::evaluation::{bleu4, elbo_eval, quality_diversity_sweep, self_bleu4, sweep_csv, MetricsReport};
use spindle_core::oracle::checks::run_all;
use spindle_core::rng::derive_seed;
use spindle_core::sampling::{generate_many, Generation, SampleConfig};
use spindle_core::training::{AdamState, StepMetrics, Trainer};
use spindle_core::Error as CoreError;

use crate::config::{sidecar_path, write_sidecar, RunConfig, OUTPUT_FORMAT_VERSION};
use crate::{EvalArgs, GenerationArgs, PrepareArgs, SampleArgs, ScheduleArgs, TrainArgs, VerifyArgs};

/// Invalid invocation or input; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Config(_)
                | CoreError::EmptyCorpus
                | CoreError::VocabTooSmall(_)
                | CoreError::VocabFormat { .. }
                | CoreError::VocabMismatch { .. }
                | CoreError::BadSurprisal { .. }
                | CoreError::StepOutOfRange { .. }
                | CoreError::InvalidStepPair { .. }
                | CoreError::TimeConditioning(_) => 2,
                _ => 3,
            };
        }
    }
    3
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

const VOCAB_FILE: &str = "vocab.tsv";
const SURPRISAL_FILE: &str = "surprisal.tsv";
const STATS_FILE: &str = "stats.json";
const LATEST_CHECKPOINT: &str = "checkpoint-latest.spnd";
const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PrepareSettings {
    corpus: PathBuf,
    vocab_size: usize,
    tokenizer: TokenizerKind,
    smoothing: f64,
    unit: InfoUnit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusStats {
    format_version: u32,
    config: PrepareSettings,
    lines: usize,
    tokens: u64,
    unk_tokens: u64,
    vocab_len: usize,
    vocab_hash: String,
}

pub fn prepare(a: PrepareArgs) -> Result<()> {
    require_file(&a.corpus, "corpus")?;
    let kind = TokenizerKind::from(a.tokenizer);
    let unit = InfoUnit::from(a.unit);
    let lines = read_lines(&a.corpus)?;
    let vocab = Vocab::from_lines(lines.iter().map(String::as_str), a.vocab_size, kind)?;
    let counts = count_tokens(lines.iter().map(String::as_str), &vocab, kind);
    let table = SurprisalTable::from_counts(&counts, &vocab, a.smoothing, unit)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    vocab.save(a.out.join(VOCAB_FILE))?;
    let mut surprisal = String::from("id\ttoken\tsurprisal\n");
    for id in 0..vocab.len() as u32 {
        surprisal.push_str(&format!("{id}\t{}\t{}\n", vocab.token(id), table.get(id)));
    }
    fs::write(a.out.join(SURPRISAL_FILE), surprisal)?;
    let stats = CorpusStats {
        format_version: OUTPUT_FORMAT_VERSION,
        config: PrepareSettings {
            corpus: a.corpus.clone(),
            vocab_size: a.vocab_size,
            tokenizer: kind,
            smoothing: a.smoothing,
            unit,
        },
        lines: lines.iter().filter(|l| !l.trim().is_empty()).count(),
        tokens: counts.iter().sum(),
        unk_tokens: counts[vocab.unk_id() as usize],
        vocab_len: vocab.len(),
        vocab_hash: vocab.hash(),
    };
    fs::write(a.out.join(STATS_FILE), serde_json::to_string_pretty(&stats)? + "\n")?;
    info!("vocabulary of {} entries written to {}", vocab.len(), a.out.display());
    Ok(())
}

struct Prepared {
    vocab: Vocab,
    kind: TokenizerKind,
    smoothing: f64,
    unit: InfoUnit,
}

fn load_prepared(dir: &Path) -> Result<Prepared> {
    let vocab_path = dir.join(VOCAB_FILE);
    require_file(&vocab_path, "vocabulary")?;
    let stats_path = dir.join(STATS_FILE);
    require_file(&stats_path, "corpus statistics")?;
    let stats: CorpusStats = serde_json::from_str(&fs::read_to_string(&stats_path)?)
        .with_context(|| format!("parsing {}", stats_path.display()))?;
    Ok(Prepared {
        vocab: Vocab::load(&vocab_path)?,
        kind: stats.config.tokenizer,
        smoothing: stats.config.smoothing,
        unit: stats.config.unit,
    })
}

/// Tokenized non-empty lines, truncated to `n_max`.
fn load_sequences(path: &Path, vocab: &Vocab, kind: TokenizerKind, n_max: usize) -> Result<Vec<TokenSeq>> {
    let mut truncated = 0;
    let data: Vec<TokenSeq> = read_lines(path)?
        .iter()
        .map(|l| tokenize(l, vocab, kind))
        .filter(|s| !s.is_empty())
        .map(|mut s| {
            if s.len() > n_max {
                s.0.truncate(n_max);
                truncated += 1;
            }
            s
        })
        .collect();
    if truncated > 0 {
        warn!(
            "{truncated} sequences in {} truncated to {n_max} tokens",
            path.display()
        );
    }
    if data.is_empty() {
        return Err(CoreError::EmptyCorpus.into());
    }
    Ok(data)
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    if let Some(p) = &a.config {
        require_file(p, "config")?;
    }
    let mut c = RunConfig::load_or_default(a.config.as_deref())?;
    macro_rules! set {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value {
                $field = v.into();
            }
        };
    }
    set!(c.corpus.train, a.corpus.clone().map(Some));
    set!(c.corpus.prepared, a.prepared.clone().map(Some));
    set!(c.model.time_mode, a.time_mode);
    set!(c.schedule.lambda, a.lambda);
    set!(c.schedule.steps, a.steps_t);
    set!(c.train.mlm_pretrain_steps, a.mlm_pretrain_steps);
    set!(c.train.total_steps, a.steps);
    set!(c.output_dir, a.out.clone());
    set!(c.seed, a.seed);
    set!(c.train.learning_rate, a.lr);
    set!(c.train.warmup_steps, a.warmup_steps);
    set!(c.train.batch_size, a.batch_size);
    set!(c.model.layers, a.layers);
    set!(c.model.d_model, a.d_model);
    set!(c.model.heads, a.heads);
    set!(c.model.n_max, a.n_max);
    set!(c.model.dropout, a.dropout);
    set!(c.checkpoint_every, a.checkpoint_every);
    set!(c.log_every, a.log_every);
    set!(c.train.exec, a.exec);
    if a.d_model.is_some() {
        c.model.d_ff = 4 * c.model.d_model;
    }
    c.derive_seeds();
    if c.checkpoint_every == 0 || c.log_every == 0 {
        return Err(usage("checkpoint_every and log_every must be positive"));
    }
    c.schedule.validate()?;
    c.train.validate()?;
    Ok(c)
}

fn checkpoint_meta(
    c: &RunConfig,
    model: &Denoiser<f32>,
    p: &Prepared,
    step: u64,
    optimizer_step: u64,
) -> CheckpointMeta {
    CheckpointMeta {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        schedule: c.schedule,
        vocab_hash: p.vocab.hash(),
        tokenizer: p.kind,
        smoothing_count: p.smoothing,
        vocab_tsv: Some(p.vocab.to_tsv()),
        step,
        optimizer_step,
        run: c.to_json(),
    }
}

fn save_checkpoint(c: &RunConfig, trainer: &Trainer, p: &Prepared) -> Result<()> {
    let ck = Checkpoint {
        meta: checkpoint_meta(c, &trainer.model, p, trainer.step(), trainer.adam.step),
        params: trainer.model.params.clone(),
        extra: trainer.adam.to_records(),
    };
    let named = c.output_dir.join(format!("checkpoint-{:08}.spnd", trainer.step()));
    ck.save(&named)?;
    ck.save(c.output_dir.join(LATEST_CHECKPOINT))?;
    info!("checkpoint written to {}", named.display());
    Ok(())
}

/// Keeps metrics records up to `step` (for resuming) and returns them.
fn metrics_up_to(path: &Path, step: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut kept = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let m: StepMetrics = serde_json::from_str(&line).with_context(|| format!("parsing {}", path.display()))?;
        if m.step <= step {
            kept.push(line);
        }
    }
    Ok(kept)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let c = resolve_train_config(&a)?;
    let prepared = match (&c.corpus.prepared, &c.corpus.train) {
        (Some(dir), _) => load_prepared(dir)?,
        (None, Some(train)) => {
            require_file(train, "corpus")?;
            let lines = read_lines(train)?;
            Prepared {
                vocab: Vocab::from_lines(
                    lines.iter().map(String::as_str),
                    c.corpus.vocab_size,
                    c.corpus.tokenizer,
                )?,
                kind: c.corpus.tokenizer,
                smoothing: c.corpus.smoothing,
                unit: c.corpus.unit,
            }
        }
        (None, None) => return Err(usage("no training corpus: pass --corpus or --prepared")),
    };
    let train_path = match (&c.corpus.train, &c.corpus.prepared) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => {
            let stats: CorpusStats = serde_json::from_str(&fs::read_to_string(dir.join(STATS_FILE))?)?;
            stats.config.corpus
        }
        (None, None) => unreachable!("checked above"),
    };
    require_file(&train_path, "corpus")?;
    let surprisal = SurprisalTable::from_vocab(&prepared.vocab, prepared.smoothing, prepared.unit)?;
    let data = load_sequences(&train_path, &prepared.vocab, prepared.kind, c.model.n_max)?;
    let model_config = c.model.denoiser_config(prepared.vocab.len(), c.schedule.steps);
    fs::create_dir_all(&c.output_dir).with_context(|| format!("creating {}", c.output_dir.display()))?;
    let metrics_path = c.output_dir.join(METRICS_FILE);

    let mut trainer;
    let mut previous = Vec::new();
    if a.resume {
        let path = c.output_dir.join(LATEST_CHECKPOINT);
        require_file(&path, "checkpoint")?;
        let ck = Checkpoint::load(&path)?;
        ck.check_vocab(&prepared.vocab.hash())?;
        if ck.meta.model != model_config || ck.meta.schedule != c.schedule {
            return Err(usage(
                "checkpoint model or schedule differs from the requested configuration",
            ));
        }
        let model = Denoiser::from_parts(model_config, ck.params.clone())?;
        let steps_before = ck.meta.step;
        let adam = AdamState::from_records(&model.params, &ck.extra, ck.meta.optimizer_step)?;
        trainer = Trainer::new(model, c.train.clone(), c.schedule, surprisal, data)?;
        trainer.resume(steps_before, adam);
        previous = metrics_up_to(&metrics_path, steps_before)?;
        info!("resumed from step {steps_before}");
    } else {
        let model = Denoiser::new(model_config, c.init_seed())?;
        trainer = Trainer::new(model, c.train.clone(), c.schedule, surprisal, data)?;
    }
    write_sidecar(&c.output_dir.join("config.json"), "train", &c.to_json())?;

    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    for line in &previous {
        writeln!(metrics, "{line}")?;
    }
    while !trainer.is_done() {
        let m = trainer.train_step()?;
        let last = trainer.is_done();
        if m.step % c.log_every == 0 || last {
            writeln!(metrics, "{}", serde_json::to_string(&m)?)?;
            info!("step {} loss {:.4} lr {:.2e}", m.step, m.loss_total, m.lr);
        }
        if m.step % c.checkpoint_every == 0 || last {
            metrics.flush()?;
            save_checkpoint(&c, &trainer, &prepared)?;
        }
    }
    metrics.flush()?;
    Ok(())
}

struct Loaded {
    model: Denoiser<f32>,
    meta: CheckpointMeta,
    vocab: Vocab,
    surprisal: SurprisalTable,
}

fn load_checkpoint(path: &Path) -> Result<Loaded> {
    require_file(path, "checkpoint")?;
    let ck = Checkpoint::load(path)?;
    let tsv = ck
        .meta
        .vocab_tsv
        .as_deref()
        .ok_or_else(|| usage("checkpoint carries no vocabulary"))?;
    let vocab = Vocab::from_tsv(tsv)?;
    ck.check_vocab(&vocab.hash())?;
    let surprisal = SurprisalTable::from_vocab(&vocab, ck.meta.smoothing_count, InfoUnit::Nats)?;
    let model = Denoiser::from_parts(ck.meta.model.clone(), ck.params)?;
    Ok(Loaded {
        model,
        meta: ck.meta,
        vocab,
        surprisal,
    })
}

fn sample_config(g: &GenerationArgs, l: &Loaded) -> Result<SampleConfig> {
    let steps = l.meta.schedule.steps;
    let cfg = SampleConfig {
        length: g.length.unwrap_or(l.model.config.n_max.min(64)),
        iterations: g.iterations.unwrap_or(steps),
        top_k: g.top_k.unwrap_or(SampleConfig::default().top_k),
        temperature: g.temperature.unwrap_or(1.0),
        seed: derive_seed(g.seed, "sample", 0),
        remask: g.remask,
        exec: g.exec.map_or(SampleConfig::default().exec, Into::into),
        ..Default::default()
    };
    cfg.validate(steps, l.model.config.n_max)?;
    Ok(cfg)
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TrajectoryRecord<'a> {
    sample: usize,
    iteration: usize,
    t: usize,
    text_with_masks: &'a str,
}

fn write_trajectories(path: &Path, gens: &[Generation], l: &Loaded) -> Result<()> {
    let mut lines = Vec::new();
    for (sample, g) in gens.iter().enumerate() {
        for step in &g.trajectory {
            let text = detokenize(&step.tokens, &l.vocab, l.meta.tokenizer);
            lines.push(serde_json::to_string(&TrajectoryRecord {
                sample,
                iteration: step.iteration,
                t: step.t,
                text_with_masks: &text,
            })?);
        }
    }
    write_lines(path, lines)
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let l = load_checkpoint(&a.checkpoint)?;
    let cfg = sample_config(&a.gen, &l)?;
    let gens = generate_many(&l.model, &l.surprisal, &l.meta.schedule, &cfg, a.num)?;
    write_lines(
        &a.out,
        gens.iter().map(|g| detokenize(&g.tokens, &l.vocab, l.meta.tokenizer)),
    )?;
    let echo = serde_json::json!({
        "checkpoint": a.checkpoint,
        "checkpoint_step": l.meta.step,
        "num": a.num,
        "root_seed": a.gen.seed,
        "sample": cfg,
        "schedule": l.meta.schedule,
    });
    write_sidecar(&sidecar_path(&a.out), "sample", &echo)?;
    if let Some(path) = &a.trajectory {
        write_trajectories(path, &gens, &l)?;
        write_sidecar(&sidecar_path(path), "sample", &echo)?;
    }
    Ok(())
}

fn parse_grid(items: &[String]) -> Result<Vec<(usize, f64)>> {
    items
        .iter()
        .map(|item| {
            let (k, t) = item
                .split_once(':')
                .ok_or_else(|| usage(format!("grid entry {item:?} is not k:temperature")))?;
            let k = k.trim().parse().map_err(|_| usage(format!("bad k in {item:?}")))?;
            let t = t
                .trim()
                .parse()
                .map_err(|_| usage(format!("bad temperature in {item:?}")))?;
            Ok((k, t))
        })
        .collect()
}

pub fn eval(a: EvalArgs) -> Result<()> {
    require_file(&a.test, "test file")?;
    let l = load_checkpoint(&a.checkpoint)?;
    let test = load_sequences(&a.test, &l.vocab, l.meta.tokenizer, l.model.config.n_max)?;
    let grid = parse_grid(&a.grid)?;
    let gen_cfg = sample_config(&a.gen, &l)?;
    let mut eval_cfg = spindle_core::evaluation::EvalConfig {
        t_samples: a.t_samples,
        seed: derive_seed(a.gen.seed, "eval", 0),
        ..Default::default()
    };
    if let Some(e) = a.gen.exec {
        eval_cfg.exec = e.into();
    }
    let elbo = elbo_eval(&l.model, &test, &l.surprisal, &l.meta.schedule, &eval_cfg)?;
    let refs: Vec<Vec<u32>> = test.iter().map(|s| s.0.clone()).collect();
    let (bleu, self_bleu) = if a.num_gen > 0 {
        let gens = generate_many(&l.model, &l.surprisal, &l.meta.schedule, &gen_cfg, 2 * a.num_gen)?;
        let cands: Vec<Vec<u32>> = gens.into_iter().map(|g| g.tokens.0).collect();
        let (for_bleu, for_self) = cands.split_at(a.num_gen);
        let self_bleu = if a.num_gen >= 2 {
            Some(self_bleu4(for_self)?)
        } else {
            None
        };
        (Some(bleu4(for_bleu, &refs)?), self_bleu)
    } else {
        (None, None)
    };
    let config = serde_json::json!({
        "format_version": OUTPUT_FORMAT_VERSION,
        "checkpoint": a.checkpoint,
        "checkpoint_step": l.meta.step,
        "test": a.test,
        "num_gen": a.num_gen,
        "root_seed": a.gen.seed,
        "eval": eval_cfg,
        "sample": gen_cfg,
        "schedule": l.meta.schedule,
    });
    let report = MetricsReport {
        elbo_nats_per_token: elbo.nats_per_token,
        elbo_std_error: elbo.std_error,
        ppl_proxy: elbo.ppl_proxy(),
        bleu4: bleu,
        self_bleu4: self_bleu,
        num_samples: a.num_gen,
        config: config.clone(),
    };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &a.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    if let Some(path) = &a.sweep {
        let num = a.num_gen.max(2);
        let rows = quality_diversity_sweep(&l.model, &l.surprisal, &l.meta.schedule, &gen_cfg, &grid, num, &test)?;
        fs::write(path, sweep_csv(&rows)).with_context(|| format!("writing {}", path.display()))?;
        write_sidecar(&sidecar_path(path), "eval", &config)?;
    }
    Ok(())
}

pub fn verify(a: VerifyArgs) -> Result<()> {
    let reports = run_all(a.seed, a.exec.into());
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed", reports.len() - failed, reports.len());
    if failed > 0 {
        anyhow::bail!("{failed} verification checks failed");
    }
    Ok(())
}

pub fn schedule(a: ScheduleArgs) -> Result<()> {
    let (vocab, kind, surprisal, mut params) = match (&a.prepared, &a.checkpoint) {
        (Some(dir), _) => {
            let p = load_prepared(dir)?;
            let s = SurprisalTable::from_vocab(&p.vocab, p.smoothing, p.unit)?;
            (p.vocab, p.kind, s, ScheduleParams::default())
        }
        (None, Some(path)) => {
            let l = load_checkpoint(path)?;
            (l.vocab, l.meta.tokenizer, l.surprisal, l.meta.schedule)
        }
        (None, None) => return Err(usage("pass --prepared or --checkpoint")),
    };
    if let Some(t) = a.steps_t {
        params.steps = t;
    }
    if let Some(lambda) = a.lambda {
        params.lambda = lambda;
    }
    let seq = tokenize(&a.text, &vocab, kind);
    if seq.is_empty() {
        return Err(usage("text has no tokens"));
    }
    let h = surprisal.sequence(&seq);
    let sched = SequenceSchedule::for_sequence(&h, &params)?;
    let mut csv = String::from("t,position,token,surprisal,alpha_bar\n");
    for t in 0..=params.steps {
        for (i, &id) in seq.iter().enumerate() {
            let token = vocab.token(id).replace('"', "\"\"");
            csv.push_str(&format!("{t},{i},\"{token}\",{},{}\n", h[i], sched.alpha_bar(t, i)));
        }
    }
    match &a.out {
        Some(p) => {
            fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?;
            let echo = serde_json::json!({ "text": a.text, "schedule": params, "tokenizer": kind });
            write_sidecar(&sidecar_path(p), "schedule", &echo)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}
