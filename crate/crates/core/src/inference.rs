//! Beam search over whole target windows and sliding-window translation.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::corpus::{source_windows, Document, TokenId, Window, BOS, EOS, PAD, SEP};
use crate::error::{Error, Result};
use crate::model::{source_input, target_input, Model, SeqInput};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Length penalty exponent: hypotheses rank by `score / |y|^alpha`.
    pub alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam: 4, alpha: 0.6 }
    }
}

/// A decoded sequence without `BOS`, ending in `EOS` unless truncated.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    /// Sum of token log-probabilities.
    pub score: f64,
    pub truncated: bool,
}

impl Hypothesis {
    pub fn penalized(&self, alpha: f64) -> f64 {
        penalized(self.score, self.tokens.len(), alpha)
    }
}

pub fn penalized(score: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        score
    } else {
        score / (len.max(1) as f64).powf(alpha)
    }
}

/// Best-first order: higher penalized score, then lower token ids, then
/// the shorter sequence.
pub fn rank(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    b.penalized(alpha)
        .total_cmp(&a.penalized(alpha))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

pub fn default_max_len(src_len: usize) -> usize {
    2 * src_len + 8
}

fn generable(v: usize) -> bool {
    v != PAD as usize && v != BOS as usize
}

fn with_bos(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut p = Vec::with_capacity(tokens.len() + 1);
    p.push(BOS);
    p.extend_from_slice(tokens);
    p
}

/// Whether one more token after `prefix` still has an encodable position.
fn extendable(model: &Model, prefix: &SeqInput) -> bool {
    let enc = &model.position_encoder(crate::corpus::Side::Target).cfg;
    let shift = if enc.scheme == crate::encodings::Scheme::Shift {
        enc.shift
    } else {
        0
    };
    let seps = prefix.tokens.iter().filter(|&&t| t == SEP).count();
    prefix.len() + shift * seps < model.cfg.max_positions
}

/// Beam search for a window expected to hold `k_eff` target sentences.
pub fn beam_search(
    model: &Model,
    src: &SeqInput,
    k_eff: usize,
    cfg: DecodeConfig,
    max_len: usize,
) -> Result<Hypothesis> {
    if cfg.beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    let state = model.encode(src)?;
    let mut active = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        truncated: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let prefixes: Vec<SeqInput> = active
            .iter()
            .map(|h| target_input(&with_bos(&h.tokens), k_eff, &model.enc_cfg))
            .collect();
        let (live, stalled): (Vec<usize>, Vec<usize>) =
            (0..active.len()).partition(|&i| extendable(model, &prefixes[i]));
        if live.is_empty() {
            break;
        }
        let refs: Vec<&SeqInput> = live.iter().map(|&i| &prefixes[i]).collect();
        let lps = model.decode(&state, &refs)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (&h, lp) in live.iter().zip(&lps) {
            let last = lp.row(lp.nrows() - 1);
            for (v, &l) in last.iter().enumerate() {
                if generable(v) {
                    cands.push((active[h].score + l, h, v));
                }
            }
        }
        // all live hypotheses have equal length, so ties fall to token ids
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| active[a.1].tokens.cmp(&active[b.1].tokens))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(cfg.beam);
        for (rank, &(score, h, v)) in cands.iter().take(2 * cfg.beam).enumerate() {
            let mut tokens = active[h].tokens.clone();
            tokens.push(v as TokenId);
            let hyp = Hypothesis {
                tokens,
                score,
                truncated: false,
            };
            if v == EOS as usize {
                if rank < cfg.beam {
                    finished.push(hyp);
                }
            } else if next.len() < cfg.beam {
                next.push(hyp);
            }
        }
        // hypotheses that ran out of positions compete as truncated
        for i in stalled {
            let mut h = active[i].clone();
            h.truncated = true;
            finished.push(h);
        }
        active = next;
        if finished.iter().filter(|h| !h.truncated).count() >= cfg.beam || active.is_empty() {
            break;
        }
    }
    let complete: Vec<&Hypothesis> = finished.iter().filter(|h| !h.truncated).collect();
    if let Some(best) = complete.into_iter().min_by(|a, b| rank(a, b, cfg.alpha)) {
        return Ok(best.clone());
    }
    finished.extend(active.into_iter().map(|mut h| {
        h.truncated = true;
        h
    }));
    finished
        .into_iter()
        .min_by(|a, b| rank(a, b, cfg.alpha))
        .ok_or_else(|| Error::Malformed("beam search produced no hypothesis".into()))
}

/// Argmax decoding; ties go to the lower token id.
pub fn greedy(model: &Model, src: &SeqInput, k_eff: usize, max_len: usize) -> Result<Hypothesis> {
    let state = model.encode(src)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        truncated: true,
    };
    for _ in 0..max_len {
        let prefix = target_input(&with_bos(&hyp.tokens), k_eff, &model.enc_cfg);
        if !extendable(model, &prefix) {
            break;
        }
        let lp = model.decode(&state, &[&prefix])?.remove(0);
        let last = lp.row(lp.nrows() - 1);
        let (v, l) = last.iter().enumerate().filter(|(v, _)| generable(*v)).fold(
            (usize::MAX, f64::NEG_INFINITY),
            |best, (v, &l)| if l > best.1 { (v, l) } else { best },
        );
        hyp.tokens.push(v as TokenId);
        hyp.score += l;
        if v == EOS as usize {
            hyp.truncated = false;
            break;
        }
    }
    Ok(hyp)
}

/// The current (last) sentence of a decoded window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extracted {
    pub tokens: Vec<TokenId>,
    /// The window did not contain exactly `k_eff - 1` separators.
    pub degraded: bool,
}

/// Tokens after the `(k_eff-1)`-th `SEP`, without `BOS`/`EOS`. With fewer
/// separators the suffix after the last one is returned, with more the
/// extraction stops at the next one; both set `degraded`.
pub fn extract_current(decoded: &[TokenId], k_eff: usize) -> Extracted {
    let body: Vec<TokenId> = decoded
        .iter()
        .copied()
        .skip_while(|&t| t == BOS)
        .take_while(|&t| t != EOS)
        .collect();
    let seps: Vec<usize> = body
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == SEP)
        .map(|(i, _)| i)
        .collect();
    let want = k_eff.saturating_sub(1);
    let start = match want {
        0 => 0,
        w if w <= seps.len() => seps[w - 1] + 1,
        _ => seps.last().map_or(0, |&i| i + 1),
    };
    let end = seps.iter().copied().find(|&i| i >= start).unwrap_or(body.len());
    Extracted {
        tokens: body[start..end].to_vec(),
        degraded: seps.len() != want,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceTranslation {
    pub tokens: Vec<TokenId>,
    pub degraded: bool,
    pub truncated: bool,
}

pub fn translate_window(model: &Model, w: &Window, cfg: DecodeConfig) -> Result<SentenceTranslation> {
    let src = source_input(w, &model.enc_cfg);
    let hyp = beam_search(model, &src, w.k_eff, cfg, default_max_len(src.len()))?;
    let ex = extract_current(&hyp.tokens, w.k_eff);
    Ok(SentenceTranslation {
        tokens: ex.tokens,
        degraded: ex.degraded,
        truncated: hyp.truncated,
    })
}

/// One translated current sentence per source sentence. Windows decode
/// independently, so they run on the ambient rayon pool in order.
pub fn translate_document(
    model: &Model,
    doc: &Document,
    k: usize,
    cfg: DecodeConfig,
) -> Result<Vec<SentenceTranslation>> {
    source_windows(doc, k)?
        .par_iter()
        .map(|w| translate_window(model, w, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{flatten_sentences, Side};
    use crate::encodings::{EncodingConfig, Scheme, Sides};
    use crate::model::ModelConfig;

    fn model(seed: u64, scheme: Scheme) -> Model {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            src_vocab: 9,
            tgt_vocab: 9,
            dropout: 0.0,
            max_positions: 64,
        };
        let enc = EncodingConfig {
            scheme,
            persistent: false,
            pse: false,
            d_model: 8,
            d_se: 4,
            shift: 2,
            k_max: 4,
            sides: Sides::Both,
        };
        Model::new(cfg, enc, seed).unwrap()
    }

    #[test]
    fn extract_examples() {
        assert_eq!(
            extract_current(&[7, 8, EOS], 1),
            Extracted {
                tokens: vec![7, 8],
                degraded: false
            }
        );
        assert_eq!(extract_current(&[5, SEP, 7, 8, EOS], 2).tokens, vec![7, 8]);
        let e = extract_current(&[BOS, 5, SEP, 7, EOS], 3);
        assert_eq!(
            e,
            Extracted {
                tokens: vec![7],
                degraded: true
            }
        );
        let e = extract_current(&[5, 6, EOS], 2);
        assert_eq!(
            e,
            Extracted {
                tokens: vec![5, 6],
                degraded: true
            }
        );
        let e = extract_current(&[5, SEP, 6, SEP, 7], 2);
        assert_eq!(
            e,
            Extracted {
                tokens: vec![6],
                degraded: true
            }
        );
    }

    #[test]
    fn extract_inverts_flatten() {
        let sents = [vec![4, 5], vec![6], vec![7, 8, 4]];
        for k in 1..=3 {
            let f = flatten_sentences(&sents[3 - k..], Side::Target);
            let e = extract_current(&f.tokens, k);
            assert_eq!(e.tokens, sents[2]);
            assert!(!e.degraded);
        }
    }

    #[test]
    fn length_penalty_ranking() {
        let a = Hypothesis {
            tokens: vec![4, 5, EOS],
            score: -1.0,
            truncated: false,
        };
        let b = Hypothesis {
            tokens: vec![4, 5, 6, 7, EOS],
            score: -0.9,
            truncated: false,
        };
        assert_eq!(rank(&a, &b, 0.0), Ordering::Greater);
        assert_eq!(rank(&a, &b, 1.0), Ordering::Greater);
        assert!((a.penalized(1.0) + 1.0 / 3.0).abs() < 1e-12);
        let c = Hypothesis {
            tokens: vec![4, 6, EOS],
            score: -1.0,
            truncated: false,
        };
        assert_eq!(rank(&a, &c, 0.6), Ordering::Less);
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..5 {
            let m = model(seed, Scheme::Sin);
            let src = SeqInput {
                tokens: vec![4, 5, SEP, 6],
                plan: crate::encodings::PositionPlan::from_lengths(&[3, 1], &m.enc_cfg),
            };
            let g = greedy(&m, &src, 2, 12).unwrap();
            let b = beam_search(&m, &src, 2, DecodeConfig { beam: 1, alpha: 0.0 }, 12).unwrap();
            assert_eq!(g.tokens, b.tokens);
            assert!((g.score - b.score).abs() < 1e-12);
            assert_eq!(g.truncated, b.truncated);
        }
    }

    #[test]
    fn translate_counts_and_rejects_zero_beam() {
        let m = model(3, Scheme::Shift);
        let doc = Document {
            doc_id: "d".into(),
            sentences: vec![vec![4, 5], vec![6], vec![7, 8]],
        };
        let out = translate_document(&m, &doc, 4, DecodeConfig::default()).unwrap();
        assert_eq!(out.len(), 3);
        let w = &source_windows(&doc, 1).unwrap()[0];
        let src = source_input(w, &m.enc_cfg);
        assert!(beam_search(&m, &src, 1, DecodeConfig { beam: 0, alpha: 0.6 }, 5).is_err());
        let h = beam_search(&m, &src, 1, DecodeConfig::default(), 2).unwrap();
        assert!(h.tokens.len() <= 2);
    }
}
