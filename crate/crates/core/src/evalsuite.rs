//! Contrastive scoring and the weighted aggregate metrics.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Vocab, Window};
use crate::error::{Error, Result};
use crate::model::{prepare_window, Model};

/// One ranking problem: a correct current-sentence translation among
/// minimally different candidates, with source and target context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveExample {
    pub src_context: Vec<String>,
    pub src_current: String,
    pub tgt_context: Vec<String>,
    pub candidates: Vec<String>,
    pub correct_index: usize,
    pub label: String,
}

impl ContrastiveExample {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() < 2 {
            return Err(Error::Malformed(format!(
                "{} candidates, need at least 2",
                self.candidates.len()
            )));
        }
        if self.correct_index >= self.candidates.len() {
            return Err(Error::Malformed(format!(
                "correct_index {} with {} candidates",
                self.correct_index,
                self.candidates.len()
            )));
        }
        if self.src_context.len() != self.tgt_context.len() {
            return Err(Error::Malformed("source and target context lengths differ".into()));
        }
        Ok(())
    }
}

pub fn load_contrastive(path: impl AsRef<Path>) -> Result<Vec<ContrastiveExample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: ContrastiveExample =
            serde_json::from_str(&line).map_err(|e| Error::Malformed(format!("{}:{}: {e}", path.display(), n + 1)))?;
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_contrastive(path: impl AsRef<Path>, examples: &[ContrastiveExample]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for ex in examples {
        serde_json::to_writer(&mut f, ex)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Anything that assigns a score to a candidate of an example.
pub trait Scorer {
    fn score(&self, example: &ContrastiveExample, candidate: usize) -> Result<f64>;
}

impl<F> Scorer for F
where
    F: Fn(&ContrastiveExample, usize) -> Result<f64>,
{
    fn score(&self, example: &ContrastiveExample, candidate: usize) -> Result<f64> {
        self(example, candidate)
    }
}

/// Forced-decoding scorer for a trained window model.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocab,
    /// Window size the model was trained with; older context is dropped.
    pub k: usize,
    /// Divide by the number of scored target tokens.
    pub length_normalize: bool,
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, example: &ContrastiveExample, candidate: usize) -> Result<f64> {
        score_candidate(
            self.model,
            self.vocab,
            self.k,
            example,
            candidate,
            self.length_normalize,
        )
    }
}

/// Total target log-probability of the window built from the last `k - 1`
/// context sentences and the candidate as current sentence.
pub fn score_candidate(
    model: &Model,
    vocab: &Vocab,
    k: usize,
    example: &ContrastiveExample,
    candidate: usize,
    length_normalize: bool,
) -> Result<f64> {
    example.validate()?;
    let cand = example
        .candidates
        .get(candidate)
        .ok_or_else(|| Error::Malformed(format!("candidate {candidate} out of range")))?;
    if k == 0 {
        return Err(Error::Config("window size K must be at least 1".into()));
    }
    let n_ctx = example.src_context.len().min(k - 1);
    let skip = example.src_context.len() - n_ctx;
    let enc = |s: &String| vocab.encode_str(s);
    let mut src_sentences = example.src_context[skip..]
        .iter()
        .map(enc)
        .collect::<Result<Vec<_>>>()?;
    src_sentences.push(enc(&example.src_current)?);
    let mut tgt_sentences = example.tgt_context[skip..]
        .iter()
        .map(enc)
        .collect::<Result<Vec<_>>>()?;
    tgt_sentences.push(enc(cand)?);
    let window = Window {
        src_sentences,
        tgt_sentences,
        j: n_ctx + 1,
        k,
        k_eff: n_ctx + 1,
    };
    let tw = prepare_window(&window, &model.enc_cfg)?;
    let lp = model.forward(&tw.src, &tw.tgt_in)?;
    let total: f64 = tw.tgt_out.iter().enumerate().map(|(i, &t)| lp[[i, t as usize]]).sum();
    Ok(if length_normalize {
        total / tw.tgt_out.len() as f64
    } else {
        total
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelAccuracy {
    pub acc: f64,
    pub n: usize,
}

/// Per-label accuracies (percent) and whichever aggregates apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_label: BTreeMap<String, LabelAccuracy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voita: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voita_avg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cp_d_gt_0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cp_avg: Option<f64>,
}

impl EvalReport {
    pub fn from_counts(counts: &BTreeMap<String, (usize, usize)>) -> Self {
        let per_label: BTreeMap<String, LabelAccuracy> = counts
            .iter()
            .filter(|(_, &(_, n))| n > 0)
            .map(|(l, &(c, n))| {
                (
                    l.clone(),
                    LabelAccuracy {
                        acc: 100.0 * c as f64 / n as f64,
                        n,
                    },
                )
            })
            .collect();
        let acc = |l: &str| per_label.get(l).map(|a| a.acc);
        let voita = match (acc("deixis"), acc("lex"), acc("ell_inf"), acc("ell_vp")) {
            (Some(a), Some(b), Some(c), Some(d)) => Some(weighted_voita(a, b, c, d)),
            _ => None,
        };
        let cp = match (acc("d=0"), acc("d=1"), acc("d=2"), acc("d=3"), acc("d>3")) {
            (Some(a), Some(b), Some(c), Some(d), Some(e)) => Some(weighted_cp(a, b, c, d, e)),
            _ => None,
        };
        Self {
            per_label,
            voita: voita.map(|v| v.0),
            voita_avg: voita.map(|v| v.1),
            cp: cp.map(|v| v.cp),
            cp_d_gt_0: cp.map(|v| v.cp_d_gt_0),
            cp_avg: cp.map(|v| v.cp_avg),
        }
    }

    /// Example-weighted accuracy over all labels.
    pub fn overall(&self) -> f64 {
        let n: usize = self.per_label.values().map(|a| a.n).sum();
        let c: f64 = self.per_label.values().map(|a| a.acc * a.n as f64).sum();
        if n == 0 {
            0.0
        } else {
            c / n as f64
        }
    }
}

/// Correct iff the reference candidate scores strictly above every other.
pub fn is_correct(scores: &[f64], correct_index: usize) -> bool {
    let best = scores[correct_index];
    scores.iter().enumerate().all(|(i, &s)| i == correct_index || s < best)
}

pub fn contrastive_accuracy<S: Scorer + ?Sized>(scorer: &S, set: &[ContrastiveExample]) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::Malformed("empty contrastive set".into()));
    }
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for ex in set {
        ex.validate()?;
        let scores = (0..ex.candidates.len())
            .map(|c| scorer.score(ex, c))
            .collect::<Result<Vec<_>>>()?;
        let e = counts.entry(ex.label.clone()).or_default();
        e.0 += usize::from(is_correct(&scores, ex.correct_index));
        e.1 += 1;
    }
    Ok(EvalReport::from_counts(&counts))
}

/// `(Voita, Voita_avg)` from the four phenomenon accuracies.
pub fn weighted_voita(deixis: f64, lex: f64, ell_inf: f64, ell_vp: f64) -> (f64, f64) {
    let weighted = (2500.0 * deixis + 1500.0 * lex + 500.0 * ell_inf + 500.0 * ell_vp) / 5000.0;
    (weighted, (deixis + lex + ell_inf + ell_vp) / 4.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpScores {
    pub cp: f64,
    pub cp_d_gt_0: f64,
    pub cp_avg: f64,
}

/// Antecedent-distance aggregates from the five distance buckets.
pub fn weighted_cp(d0: f64, d1: f64, d2: f64, d3: f64, d4plus: f64) -> CpScores {
    let far = 7075.0 * d1 + 1510.0 * d2 + 573.0 * d3 + 442.0 * d4plus;
    CpScores {
        cp: (2400.0 * d0 + far) / 12000.0,
        cp_d_gt_0: far / 9600.0,
        cp_avg: (d1 + d2 + d3 + d4plus) / 4.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example(label: &str, correct: usize) -> ContrastiveExample {
        ContrastiveExample {
            src_context: vec!["w4 w5".into()],
            src_current: "w6".into(),
            tgt_context: vec!["w4 w5".into()],
            candidates: vec!["w7".into(), "w8".into(), "w9".into(), "w10".into()],
            correct_index: correct,
            label: label.into(),
        }
    }

    #[test]
    fn published_rows() {
        let (v, va) = weighted_voita(50.00, 45.87, 51.80, 27.00);
        assert_abs_diff_eq!(v, 46.64, epsilon = 0.01);
        assert_abs_diff_eq!(va, 43.67, epsilon = 0.01);
        assert_abs_diff_eq!(weighted_voita(88.76, 52.13, 83.00, 76.20).0, 75.94, epsilon = 0.01);
        assert_eq!(weighted_voita(100.0, 100.0, 100.0, 100.0), (100.0, 100.0));
        let cp = weighted_cp(68.75, 32.89, 43.97, 47.99, 70.58);
        assert_abs_diff_eq!(cp.cp, 43.57, epsilon = 0.01);
        assert_abs_diff_eq!(cp.cp_d_gt_0, 37.27, epsilon = 0.01);
        assert_abs_diff_eq!(cp.cp_avg, 48.86, epsilon = 0.01);
        let cp = weighted_cp(76.66, 72.86, 75.96, 80.10, 84.38);
        assert_abs_diff_eq!(cp.cp, 74.78, epsilon = 0.01);
        assert_abs_diff_eq!(cp.cp_d_gt_0, 74.31, epsilon = 0.01);
        assert_abs_diff_eq!(cp.cp_avg, 78.33, epsilon = 0.01);
        let z = weighted_cp(0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!((z.cp, z.cp_d_gt_0, z.cp_avg), (0.0, 0.0, 0.0));
    }

    #[test]
    fn accuracy_counting() {
        let by_index = |ex: &ContrastiveExample, c: usize| -> Result<f64> {
            Ok(if c == 1 { 1.0 } else { 0.0 } + ex.correct_index as f64 * 0.0)
        };
        let r = contrastive_accuracy(&by_index, &[example("deixis", 1)]).unwrap();
        assert_eq!(r.per_label["deixis"].acc, 100.0);
        let r = contrastive_accuracy(&by_index, &[example("lex", 1), example("lex", 2)]).unwrap();
        assert_eq!(r.per_label["lex"], LabelAccuracy { acc: 50.0, n: 2 });
        assert!(r.voita.is_none() && r.cp.is_none());
        let ties = |_: &ContrastiveExample, _: usize| -> Result<f64> { Ok(0.0) };
        assert_eq!(
            contrastive_accuracy(&ties, &[example("x", 0)]).unwrap().per_label["x"].acc,
            0.0
        );
        assert!(contrastive_accuracy(&ties, &[]).is_err());
    }

    #[test]
    fn random_scorer_near_chance() {
        let set: Vec<_> = (0..10_000).map(|i| example("d=1", i % 4)).collect();
        let rng = std::cell::RefCell::new(ChaCha8Rng::seed_from_u64(11));
        let random = |_: &ContrastiveExample, _: usize| -> Result<f64> { Ok(rng.borrow_mut().random()) };
        let acc = contrastive_accuracy(&random, &set).unwrap().per_label["d=1"].acc;
        assert!((acc - 25.0).abs() < 1.5, "{acc}");
    }

    #[test]
    fn report_json_keys() {
        let mut counts = BTreeMap::new();
        for (l, c) in [("deixis", 5), ("lex", 4), ("ell_inf", 3), ("ell_vp", 2)] {
            counts.insert(l.to_string(), (c, 10));
        }
        let r = EvalReport::from_counts(&counts);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("voita").is_some() && json.get("cp").is_none());
        assert_abs_diff_eq!(
            r.voita.unwrap(),
            (2500.0 * 50.0 + 1500.0 * 40.0 + 500.0 * 50.0) / 5000.0
        );
        assert_eq!(json["per_label"]["lex"]["n"], 10);
    }

    #[test]
    fn jsonl_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let set = vec![example("d=1", 2), example("d=0", 0)];
        write_contrastive(&path, &set).unwrap();
        assert_eq!(load_contrastive(&path).unwrap(), set);
        let mut bad = example("d=1", 4);
        assert!(bad.validate().is_err());
        bad.correct_index = 0;
        bad.candidates.truncate(1);
        assert!(bad.validate().is_err());
    }
}
