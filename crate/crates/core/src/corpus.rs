//! Documents, vocabularies, sliding windows and the synthetic
//! context-dependent corpus used for desk-scale experiments.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite::ContrastiveExample;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
/// Number of reserved ids at the bottom of every vocabulary.
pub const N_RESERVED: usize = 4;

const RESERVED: [&str; N_RESERVED] = ["<pad>", "<s>", "</s>", "<sep>"];

/// Bijective token/id mapping with the four reserved ids fixed at 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new()).expect("reserved tokens are distinct")
    }
}

impl Vocab {
    /// Builds a vocabulary from non-reserved tokens, in the given order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for tok in RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(Into::into))
        {
            if vocab.index.contains_key(&tok) {
                return Err(Error::Malformed(format!("duplicate vocabulary entry {tok:?}")));
            }
            vocab.index.insert(tok.clone(), vocab.tokens.len() as TokenId);
            vocab.tokens.push(tok);
        }
        Ok(vocab)
    }

    /// Joint vocabulary over raw documents, most frequent first, ties broken
    /// lexicographically so the result does not depend on hash order.
    pub fn build<'a, I>(docs: I) -> Self
    where
        I: IntoIterator<Item = &'a RawDocument>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for doc in docs {
            for tok in doc.sentences.iter().flatten() {
                if !RESERVED.contains(&tok.as_str()) {
                    *counts.entry(tok.as_str()).or_default() += 1;
                }
            }
        }
        let mut entries: Vec<(&str, usize)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(entries.into_iter().map(|(t, _)| t.to_string())).expect("counts keys are unique")
    }

    /// The closed vocabulary of the synthetic task: `w4 .. w{size-1}`, so
    /// that `w{n}` has id `n`.
    pub fn synthetic(size: usize) -> Self {
        Self::from_tokens((N_RESERVED..size).map(|i| format!("w{i}"))).expect("names are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode_sentence(&self, words: &[String]) -> Result<Vec<TokenId>> {
        words
            .iter()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownToken(w.clone())))
            .collect()
    }

    pub fn encode_str(&self, sentence: &str) -> Result<Vec<TokenId>> {
        sentence
            .split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownToken(w.to_string())))
            .collect()
    }

    pub fn encode(&self, doc: &RawDocument) -> Result<Document> {
        let sentences = doc
            .sentences
            .iter()
            .map(|s| self.encode_sentence(s))
            .collect::<Result<_>>()?;
        Ok(Document {
            doc_id: doc.doc_id.clone(),
            sentences,
        })
    }

    /// Space-joined surface form; special tokens are kept verbatim.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens[N_RESERVED..].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Vocab::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}

/// A document as read from disk, before vocabulary lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub doc_id: String,
    pub sentences: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Vec<TokenId>>,
}

impl Document {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for (i, s) in self.sentences.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Malformed(format!(
                    "{}: sentence {} is empty",
                    self.doc_id,
                    i + 1
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::TokenOutOfRange {
                    id: bad as usize,
                    size: vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// Sentence-aligned source and target documents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelDocument {
    pub source: Document,
    pub target: Document,
}

impl ParallelDocument {
    pub fn new(source: Document, target: Document) -> Result<Self> {
        if source.sentences.len() != target.sentences.len() {
            return Err(Error::Malformed(format!(
                "{}: {} source sentences but {} target sentences",
                source.doc_id,
                source.sentences.len(),
                target.sentences.len()
            )));
        }
        Ok(Self { source, target })
    }

    pub fn len(&self) -> usize {
        self.source.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.sentences.is_empty()
    }
}

/// Parses the corpus text format: one sentence per line, documents separated
/// by blank lines.
pub fn parse_documents(text: &str, id_prefix: &str) -> Vec<RawDocument> {
    let mut docs = Vec::new();
    let mut current: Vec<Vec<String>> = Vec::new();
    let flush = |current: &mut Vec<Vec<String>>, docs: &mut Vec<RawDocument>| {
        if !current.is_empty() {
            docs.push(RawDocument {
                doc_id: format!("{id_prefix}{}", docs.len()),
                sentences: std::mem::take(current),
            });
        }
    };
    for line in text.lines() {
        let words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            flush(&mut current, &mut docs);
        } else {
            current.push(words);
        }
    }
    flush(&mut current, &mut docs);
    docs
}

pub fn load_documents(path: impl AsRef<Path>) -> Result<Vec<RawDocument>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Encoding { path: path.into() })?;
    let stem = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(parse_documents(&text, &format!("{stem}#")))
}

/// Renders sentences back into the corpus text format.
pub fn format_documents<'a, I>(docs: I, vocab: &Vocab) -> String
where
    I: IntoIterator<Item = &'a Document>,
{
    let mut out = String::new();
    for (i, doc) in docs.into_iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for s in &doc.sentences {
            out.push_str(&vocab.decode(s));
            out.push('\n');
        }
    }
    out
}

/// Loads aligned `.src`/`.tgt` corpus files.
pub fn load_parallel(src: impl AsRef<Path>, tgt: impl AsRef<Path>) -> Result<Vec<(RawDocument, RawDocument)>> {
    let s = load_documents(src)?;
    let t = load_documents(tgt)?;
    if s.len() != t.len() {
        return Err(Error::Malformed(format!(
            "{} source documents but {} target documents",
            s.len(),
            t.len()
        )));
    }
    Ok(s.into_iter().zip(t).collect())
}

pub fn encode_parallel(raw: &[(RawDocument, RawDocument)], vocab: &Vocab) -> Result<Vec<ParallelDocument>> {
    raw.iter()
        .map(|(s, t)| ParallelDocument::new(vocab.encode(s)?, vocab.encode(t)?))
        .collect()
}

/// `K_eff` consecutive sentences ending at the current sentence `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub src_sentences: Vec<Vec<TokenId>>,
    /// Empty when translating, which needs no references.
    pub tgt_sentences: Vec<Vec<TokenId>>,
    /// 1-based index of the current sentence in its document.
    pub j: usize,
    pub k: usize,
    pub k_eff: usize,
}

impl Window {
    /// The current sentence is always last.
    pub fn current_index(&self) -> usize {
        self.k_eff - 1
    }
}

fn window_bounds(n: usize, k: usize) -> Result<impl Iterator<Item = (usize, usize)>> {
    if k == 0 {
        return Err(Error::Config("window size K must be at least 1".into()));
    }
    Ok((1..=n).map(move |j| {
        let k_eff = k.min(j);
        (j, k_eff)
    }))
}

/// One window per sentence, past context only, truncated at document start.
pub fn make_windows(doc: &ParallelDocument, k: usize) -> Result<Vec<Window>> {
    Ok(window_bounds(doc.len(), k)?
        .map(|(j, k_eff)| Window {
            src_sentences: doc.source.sentences[j - k_eff..j].to_vec(),
            tgt_sentences: doc.target.sentences[j - k_eff..j].to_vec(),
            j,
            k,
            k_eff,
        })
        .collect())
}

/// Source-only windows for translation.
pub fn source_windows(doc: &Document, k: usize) -> Result<Vec<Window>> {
    Ok(window_bounds(doc.sentences.len(), k)?
        .map(|(j, k_eff)| Window {
            src_sentences: doc.sentences[j - k_eff..j].to_vec(),
            tgt_sentences: Vec::new(),
            j,
            k,
            k_eff,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Target,
}

/// A concatenated window side together with per-sentence token counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flattened {
    pub tokens: Vec<TokenId>,
    /// Each sentence owns the `SEP` that terminates it; on the target side
    /// `BOS` is counted with the first sentence and `EOS` with the last.
    pub sentence_lengths: Vec<usize>,
}

pub fn flatten_sentences(sentences: &[Vec<TokenId>], side: Side) -> Flattened {
    let n = sentences.len();
    let mut tokens = Vec::with_capacity(sentences.iter().map(Vec::len).sum::<usize>() + n + 1);
    let mut sentence_lengths = Vec::with_capacity(n);
    if side == Side::Target {
        tokens.push(BOS);
    }
    for (i, s) in sentences.iter().enumerate() {
        let start = if i == 0 { 0 } else { tokens.len() };
        tokens.extend_from_slice(s);
        if i + 1 < n {
            tokens.push(SEP);
        } else if side == Side::Target {
            tokens.push(EOS);
        }
        sentence_lengths.push(tokens.len() - start);
    }
    Flattened {
        tokens,
        sentence_lengths,
    }
}

pub fn flatten_window(w: &Window, side: Side) -> Flattened {
    match side {
        Side::Source => flatten_sentences(&w.src_sentences, side),
        Side::Target => flatten_sentences(&w.tgt_sentences, side),
    }
}

/// Splits a flattened sequence back into sentences, dropping `BOS`/`EOS`.
pub fn split_on_sep(tokens: &[TokenId]) -> Vec<Vec<TokenId>> {
    let body: Vec<TokenId> = tokens.iter().copied().filter(|&t| t != BOS && t != EOS).collect();
    body.split(|&t| t == SEP).map(<[TokenId]>::to_vec).collect()
}

/// Parameters of the synthetic context-dependent translation task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Total vocabulary size including the reserved ids.
    pub vocab_size: usize,
    pub sentences_per_doc: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_docs: usize,
    pub dev_docs: usize,
    pub test_docs: usize,
    pub contrastive_examples: usize,
    pub candidates: usize,
    /// Context sentences included in each contrastive example.
    pub context_sentences: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            sentences_per_doc: 4,
            min_len: 3,
            max_len: 6,
            train_docs: 2000,
            dev_docs: 100,
            test_docs: 50,
            contrastive_examples: 500,
            candidates: 4,
            context_sentences: 3,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let content = self.vocab_size.saturating_sub(N_RESERVED);
        if self.vocab_size < 8 {
            return Err(Error::Config(format!("vocab_size {} < 8", self.vocab_size)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "sentence length range {}..={} is empty or starts at 0",
                self.min_len, self.max_len
            )));
        }
        if self.sentences_per_doc < 2 {
            return Err(Error::Config("documents need at least 2 sentences".into()));
        }
        if self.candidates < 2 || self.candidates > content {
            return Err(Error::Config(format!(
                "{} candidates impossible with {content} content tokens",
                self.candidates
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub vocab: Vocab,
    /// `permutation[t]` is the image of content token `t`; reserved ids map
    /// to themselves.
    pub permutation: Vec<TokenId>,
    pub train: Vec<ParallelDocument>,
    pub dev: Vec<ParallelDocument>,
    pub test: Vec<ParallelDocument>,
    pub contrastive: Vec<ContrastiveExample>,
}

struct SyntheticGen<'a> {
    cfg: &'a SyntheticConfig,
    perm: Vec<TokenId>,
    rng: ChaCha8Rng,
}

impl SyntheticGen<'_> {
    fn content_token(&mut self) -> TokenId {
        self.rng
            .random_range(N_RESERVED as TokenId..self.cfg.vocab_size as TokenId)
    }

    fn document(&mut self, doc_id: String) -> ParallelDocument {
        let mut src = Vec::with_capacity(self.cfg.sentences_per_doc);
        let mut tgt: Vec<Vec<TokenId>> = Vec::with_capacity(self.cfg.sentences_per_doc);
        for i in 0..self.cfg.sentences_per_doc {
            let len = self.rng.random_range(self.cfg.min_len..=self.cfg.max_len);
            let s: Vec<TokenId> = (0..len).map(|_| self.content_token()).collect();
            let mut t = s.clone();
            if i > 0 {
                let prev: &Vec<TokenId> = &src[i - 1];
                t[0] = self.perm[*prev.last().expect("non-empty") as usize];
            }
            src.push(s);
            tgt.push(t);
        }
        ParallelDocument {
            source: Document {
                doc_id: doc_id.clone(),
                sentences: src,
            },
            target: Document { doc_id, sentences: tgt },
        }
    }

    fn contrastive(&mut self, doc: &ParallelDocument, vocab: &Vocab) -> ContrastiveExample {
        let n = doc.len();
        let j = self.rng.random_range(1..n);
        let lo = j.saturating_sub(self.cfg.context_sentences);
        let truth = doc.target.sentences[j][0];
        let mut wrong: Vec<TokenId> = (N_RESERVED as TokenId..self.cfg.vocab_size as TokenId)
            .filter(|&t| t != truth)
            .collect();
        wrong.shuffle(&mut self.rng);
        wrong.truncate(self.cfg.candidates - 1);
        let correct_index = self.rng.random_range(0..self.cfg.candidates);
        wrong.insert(correct_index, truth);
        let candidates = wrong
            .into_iter()
            .map(|first| {
                let mut c = doc.target.sentences[j].clone();
                c[0] = first;
                vocab.decode(&c)
            })
            .collect();
        ContrastiveExample {
            src_context: doc.source.sentences[lo..j].iter().map(|s| vocab.decode(s)).collect(),
            src_current: vocab.decode(&doc.source.sentences[j]),
            tgt_context: doc.target.sentences[lo..j].iter().map(|s| vocab.decode(s)).collect(),
            candidates,
            correct_index,
            label: "d=1".to_string(),
        }
    }
}

/// Generates the synthetic task: each target sentence copies its source,
/// except that the first token of every non-first sentence is replaced by
/// `permutation[last token of the previous source sentence]`.
pub fn gen_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut content: Vec<TokenId> = (N_RESERVED as TokenId..cfg.vocab_size as TokenId).collect();
    content.shuffle(&mut rng);
    let perm: Vec<TokenId> = (0..N_RESERVED as TokenId).chain(content).collect();
    let vocab = Vocab::synthetic(cfg.vocab_size);
    let mut g = SyntheticGen { cfg, perm, rng };

    let docs = |n: usize, name: &str, g: &mut SyntheticGen| -> Vec<ParallelDocument> {
        (0..n).map(|i| g.document(format!("{name}-{i}"))).collect()
    };
    let train = docs(cfg.train_docs, "train", &mut g);
    let dev = docs(cfg.dev_docs, "dev", &mut g);
    let test = docs(cfg.test_docs, "test", &mut g);
    let contrastive_docs = docs(cfg.contrastive_examples, "contrastive", &mut g);
    let contrastive = contrastive_docs.iter().map(|d| g.contrastive(d, &vocab)).collect();

    Ok(SyntheticCorpus {
        vocab,
        permutation: g.perm,
        train,
        dev,
        test,
        contrastive,
    })
}
