//! Deterministic toy corpora shared by the integration tests.
#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::Rng;

use spindle_core::corpus::{tokenize, InfoUnit, SurprisalTable, TokenSeq, TokenizerKind, Vocab};
use spindle_core::denoiser::{Denoiser, DenoiserConfig, TimeMode};
use spindle_core::diffusion::ScheduleParams;
use spindle_core::rng;
use spindle_core::training::{TrainConfig, Trainer};

const DETS: &[&str] = &["the", "a", "one", "my", "our"];
const ADJS: &[&str] = &["red", "big", "old", "shy", "calm", "wild", "tiny", "pale"];
const NOUNS: &[&str] = &["cat", "dog", "fox", "owl", "bee", "cow", "hen", "ram", "yak", "elk"];
const VERBS: &[&str] = &["runs", "sits", "naps", "hums", "hops", "eats", "digs", "sings"];
const ADVS: &[&str] = &["fast", "late", "here", "now", "alone", "again", "today", "softly"];
const PREPS: &[&str] = &["near", "under", "behind", "with"];

/// Uniform choice, or Zipf-weighted (`1 / rank`) when `zipf` is set.
fn pick<R: Rng>(r: &mut R, words: &[&'static str], zipf: bool) -> &'static str {
    if !zipf {
        return words.choose(r).unwrap();
    }
    let ranks: Vec<usize> = (0..words.len()).collect();
    words[*ranks.choose_weighted(r, |&i| 1.0 / (i + 1) as f64).unwrap()]
}

fn phrase<R: Rng>(r: &mut R, long: bool, zipf: bool) -> String {
    let mut words = vec![
        pick(r, DETS, zipf),
        pick(r, ADJS, zipf),
        pick(r, NOUNS, zipf),
        pick(r, VERBS, zipf),
        pick(r, ADVS, zipf),
    ];
    if long {
        words.push(pick(r, PREPS, zipf));
        words.push(pick(r, DETS, zipf));
        words.push(pick(r, NOUNS, zipf));
    }
    words.join(" ")
}

/// `count` distinct sentences of exactly `chars` characters.
pub fn fixed_length_sentences(count: usize, chars: usize, seed: u64) -> Vec<String> {
    let mut r = rng::stream(seed, "toy-fixed", 0);
    let mut out: Vec<String> = Vec::new();
    while out.len() < count {
        let s = phrase(&mut r, false, false);
        if s.len() == chars && !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Word-level sentences of five or eight words with Zipf-distributed word
/// choice, so token surprisal varies as it does in natural text.
pub fn grammar_sentences(count: usize, seed: u64, stream: &str) -> Vec<String> {
    let mut r = rng::stream(seed, stream, 0);
    (0..count)
        .map(|_| {
            let long = r.random_bool(0.5);
            phrase(&mut r, long, true)
        })
        .collect()
}

pub struct Prepared {
    pub vocab: Vocab,
    pub surprisal: SurprisalTable,
    pub kind: TokenizerKind,
    pub data: Vec<TokenSeq>,
}

pub fn prepare(lines: &[String], kind: TokenizerKind, max_vocab: usize) -> Prepared {
    let vocab = Vocab::from_lines(lines.iter().map(String::as_str), max_vocab, kind).unwrap();
    let surprisal = SurprisalTable::from_vocab(&vocab, 1.0, InfoUnit::Nats).unwrap();
    let data = lines.iter().map(|l| tokenize(l, &vocab, kind)).collect();
    Prepared {
        vocab,
        surprisal,
        kind,
        data,
    }
}

pub const MEMO_SENTENCE: &str = "the shy owl sings softly near my hen";
pub const MEMO_STEPS: usize = 16;
pub const MEMO_LAMBDA: f64 = 0.5;

/// A small TAD denoiser trained on one sentence until it has memorised it.
/// The vocabulary comes from a wider corpus so the sentence has varied
/// surprisal.
pub fn memorizer(train_steps: u64) -> (Denoiser<f32>, Prepared, ScheduleParams) {
    let mut lines = grammar_sentences(300, 3, "memo-vocab");
    lines.push(MEMO_SENTENCE.to_owned());
    let mut p = prepare(&lines, TokenizerKind::Word, 128);
    p.data = vec![tokenize(MEMO_SENTENCE, &p.vocab, TokenizerKind::Word)];
    let params = ScheduleParams::new(MEMO_STEPS, MEMO_LAMBDA);
    let mut config = DenoiserConfig::new(p.vocab.len(), TimeMode::Tad, MEMO_STEPS).with_size(1, 32, 2);
    config.d_ff = 64;
    config.n_max = 8;
    config.dropout = 0.0;
    let model = Denoiser::new(config, 5).unwrap();
    let train = TrainConfig {
        learning_rate: 3e-3,
        warmup_steps: 20,
        batch_size: 8,
        total_steps: train_steps,
        weight_decay: 0.0,
        seed: 11,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, train, params, p.surprisal.clone(), p.data.clone()).unwrap();
    while !trainer.is_done() {
        trainer.train_step().unwrap();
    }
    (trainer.model, p, params)
}
