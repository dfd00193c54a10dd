//! Corpus ingestion: normalization, vocabulary, tokenization and unigram
//! surprisal.
//!
//! Ids `0..3` are reserved for `[PAD]`, `[MASK]` and `[CLS]`. Corpus tokens
//! follow in descending-count order (ties lexicographic), and `[UNK]` takes
//! the last id. Everything from id 3 onwards is a *content* token: the
//! denoiser may predict it and the schedule assigns it a surprisal.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[MASK]";
pub const CLS: &str = "[CLS]";
pub const UNK: &str = "[UNK]";

pub const PAD_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const NUM_SPECIALS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    #[default]
    Word,
    Char,
}

impl std::str::FromStr for TokenizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(TokenizerKind::Word),
            "char" => Ok(TokenizerKind::Char),
            other => Err(Error::Config(format!("unknown tokenizer {other:?}"))),
        }
    }
}

/// Lowercases, trims and collapses internal whitespace runs to one space.
pub fn normalize(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    for word in line.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

fn pieces(normalized: &str, kind: TokenizerKind) -> Vec<String> {
    match kind {
        TokenizerKind::Word => normalized
            .split(' ')
            .filter(|w| !w.is_empty())
            .map(str::to_owned)
            .collect(),
        TokenizerKind::Char => normalized.chars().map(String::from).collect(),
    }
}

/// A token id sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq(ids)
    }

    pub fn all_masked(n: usize) -> Self {
        TokenSeq(vec![MASK_ID; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn num_masked(&self) -> usize {
        self.0.iter().filter(|&&id| id == MASK_ID).count()
    }

    /// Errors if the sequence holds a `[MASK]` anywhere.
    pub fn check_clean(&self) -> Result<()> {
        match self.0.iter().position(|&id| id == MASK_ID) {
            Some(pos) => Err(Error::MaskInCleanSequence(pos)),
            None => Ok(()),
        }
    }
}

impl std::ops::Deref for TokenSeq {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(ids: Vec<u32>) -> Self {
        TokenSeq(ids)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    pub fn mask_id(&self) -> u32 {
        MASK_ID
    }

    pub fn pad_id(&self) -> u32 {
        PAD_ID
    }

    pub fn cls_id(&self) -> u32 {
        CLS_ID
    }

    pub fn unk_id(&self) -> u32 {
        (self.tokens.len() - 1) as u32
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_content(&self) -> usize {
        self.tokens.len() - NUM_SPECIALS
    }

    pub fn is_content(&self, id: u32) -> bool {
        (id as usize) >= NUM_SPECIALS && (id as usize) < self.tokens.len()
    }

    pub fn content_ids(&self) -> std::ops::Range<u32> {
        NUM_SPECIALS as u32..self.tokens.len() as u32
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts[id as usize]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    /// Builds a vocabulary from raw (un-normalized) lines.
    pub fn from_lines<'a, I>(lines: I, max_vocab: usize, kind: TokenizerKind) -> Result<Vocab>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_vocab < NUM_SPECIALS + 1 {
            return Err(Error::VocabTooSmall(max_vocab));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut total = 0u64;
        for line in lines {
            for piece in pieces(&normalize(line), kind) {
                *counts.entry(piece).or_default() += 1;
                total += 1;
            }
        }
        if total == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = max_vocab - NUM_SPECIALS;
        let oov: u64 = ranked.iter().skip(keep).map(|(_, c)| c).sum();
        ranked.truncate(keep);
        // A corpus token spelled like a special cannot be told apart in the
        // TSV; it is folded into [UNK].
        let (kept, clashing): (Vec<_>, Vec<_>) = ranked
            .into_iter()
            .partition(|(tok, _)| ![PAD, MASK, CLS, UNK].contains(&tok.as_str()));
        let oov = oov + clashing.iter().map(|(_, c)| c).sum::<u64>();

        let mut tokens = vec![PAD.to_owned(), MASK.to_owned(), CLS.to_owned()];
        let mut tok_counts = vec![0; NUM_SPECIALS];
        for (tok, c) in kept {
            tokens.push(tok);
            tok_counts.push(c);
        }
        tokens.push(UNK.to_owned());
        tok_counts.push(oov);
        Ok(Vocab::from_parts(tokens, tok_counts))
    }

    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Vocab {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, counts, ids }
    }

    /// Serializes as `token<TAB>count` lines, specials first.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (tok, c) in self.tokens.iter().zip(&self.counts) {
            let _ = writeln!(out, "{tok}\t{c}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Vocab> {
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |reason: &str| Error::VocabFormat {
                line: i + 1,
                reason: reason.to_owned(),
            };
            let (tok, count) = line.rsplit_once('\t').ok_or_else(|| bad("missing tab"))?;
            let count: u64 = count.parse().map_err(|_| bad("count is not an integer"))?;
            if tok.is_empty() {
                return Err(bad("empty token"));
            }
            tokens.push(tok.to_owned());
            counts.push(count);
        }
        if tokens.len() < NUM_SPECIALS + 1 {
            return Err(Error::VocabTooSmall(tokens.len()));
        }
        if tokens[..NUM_SPECIALS] != [PAD, MASK, CLS] || tokens.last().map(String::as_str) != Some(UNK) {
            return Err(Error::VocabFormat {
                line: 1,
                reason: "specials must come first and [UNK] last".into(),
            });
        }
        let vocab = Vocab::from_parts(tokens, counts);
        if vocab.ids.len() != vocab.tokens.len() {
            return Err(Error::VocabFormat {
                line: 0,
                reason: "duplicate tokens".into(),
            });
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocab> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_tsv(&text)
    }

    /// Short content hash of the TSV form, recorded in checkpoints.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_tsv().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

pub fn build_vocab(corpus_path: impl AsRef<Path>, max_vocab: usize, kind: TokenizerKind) -> Result<Vocab> {
    let lines = read_lines(corpus_path)?;
    Vocab::from_lines(lines.iter().map(String::as_str), max_vocab, kind)
}

pub fn tokenize(line: &str, vocab: &Vocab, kind: TokenizerKind) -> TokenSeq {
    let unk = vocab.unk_id();
    TokenSeq(
        pieces(&normalize(line), kind)
            .iter()
            .map(|p| match vocab.id(p) {
                Some(id) if vocab.is_content(id) => id,
                _ => unk,
            })
            .collect(),
    )
}

pub fn detokenize(seq: &[u32], vocab: &Vocab, kind: TokenizerKind) -> String {
    let sep = match kind {
        TokenizerKind::Word => " ",
        TokenizerKind::Char => "",
    };
    seq.iter().map(|&id| vocab.token(id)).collect::<Vec<_>>().join(sep)
}

/// Unit for information content. The schedule only uses ratios of
/// surprisals, so the choice does not change it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfoUnit {
    #[default]
    Nats,
    Bits,
}

/// Per-token unigram surprisal with additive smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct SurprisalTable {
    h: Vec<f64>,
    smoothing_count: f64,
    unit: InfoUnit,
}

impl SurprisalTable {
    /// `counts[id]` are occurrence counts indexed by token id. Specials get
    /// `h = 0`. A content token with zero smoothed probability gets `+inf`.
    pub fn from_counts(counts: &[u64], vocab: &Vocab, smoothing_count: f64, unit: InfoUnit) -> Result<SurprisalTable> {
        if counts.len() != vocab.len() {
            return Err(Error::LengthMismatch(counts.len(), vocab.len()));
        }
        if !(smoothing_count >= 0.0 && smoothing_count.is_finite()) {
            return Err(Error::Config(format!(
                "smoothing count must be >= 0, got {smoothing_count}"
            )));
        }
        let content = vocab.content_ids();
        let total: f64 = content.clone().map(|id| counts[id as usize] as f64).sum();
        let denom = total + smoothing_count * vocab.num_content() as f64;
        let scale = match unit {
            InfoUnit::Nats => 1.0,
            InfoUnit::Bits => std::f64::consts::LOG2_E,
        };
        let mut h = vec![0.0; vocab.len()];
        for id in content {
            let p = (counts[id as usize] as f64 + smoothing_count) / denom;
            let v = -p.ln() * scale;
            if v.is_nan() {
                return Err(Error::Internal(format!("surprisal of token {id} is NaN")));
            }
            h[id as usize] = v;
        }
        Ok(SurprisalTable {
            h,
            smoothing_count,
            unit,
        })
    }

    /// Uses the counts stored in the vocabulary.
    pub fn from_vocab(vocab: &Vocab, smoothing_count: f64, unit: InfoUnit) -> Result<SurprisalTable> {
        SurprisalTable::from_counts(vocab.counts(), vocab, smoothing_count, unit)
    }

    pub fn get(&self, id: u32) -> f64 {
        self.h[id as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.h
    }

    pub fn smoothing_count(&self) -> f64 {
        self.smoothing_count
    }

    pub fn unit(&self) -> InfoUnit {
        self.unit
    }

    /// Surprisal of every position of `seq`.
    pub fn sequence(&self, seq: &[u32]) -> Vec<f64> {
        seq.iter().map(|&id| self.h[id as usize]).collect()
    }
}

/// Counts token occurrences of tokenized lines, folding OOV into `[UNK]`.
pub fn count_tokens<'a, I>(lines: I, vocab: &Vocab, kind: TokenizerKind) -> Vec<u64>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts = vec![0u64; vocab.len()];
    for line in lines {
        for id in tokenize(line, vocab, kind).0 {
            counts[id as usize] += 1;
        }
    }
    counts
}

pub fn surprisal_table(
    corpus_path: impl AsRef<Path>,
    vocab: &Vocab,
    kind: TokenizerKind,
    smoothing_count: f64,
) -> Result<SurprisalTable> {
    let lines = read_lines(corpus_path)?;
    let counts = count_tokens(lines.iter().map(String::as_str), vocab, kind);
    SurprisalTable::from_counts(&counts, vocab, smoothing_count, InfoUnit::Nats)
}
