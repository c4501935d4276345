use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use segpos::analysis::pca_cumulative_variance;
use segpos::checkpoint::Checkpoint;
use segpos::corpus::{
    encode_parallel, format_documents, gen_synthetic, load_parallel, make_windows, parse_documents, Document,
    ParallelDocument, SyntheticConfig, Vocab, EOS,
};
use segpos::encodings::{sinusoidal_pe, EncodingConfig};
use segpos::evalsuite::{
    contrastive_accuracy, load_contrastive, weighted_cp, weighted_voita, write_contrastive, ModelScorer,
};
use segpos::inference::{translate_document, DecodeConfig};
use segpos::model::{prepare_window, Model, TrainWindow};
use segpos::trainer::{self, average_checkpoints, read_log, select_checkpoints, Output};
use serde::Serialize;

use crate::opts::{load_config, Resolved, RunOpts};
use crate::{
    AnalyzePeArgs, AverageArgs, EvalContrastiveArgs, EvalMetricsArgs, GenArgs, SweepArgs, TrainArgs, TranslateArgs,
    Usage,
};

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes to `path`, or standard output when it is `None`.
fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, text),
        None => {
            std::io::stdout().lock().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn write_split(dir: &Path, name: &str, docs: &[ParallelDocument], vocab: &Vocab) -> Result<()> {
    write_file(
        &dir.join(format!("{name}.src")),
        &format_documents(docs.iter().map(|d| &d.source), vocab),
    )?;
    write_file(
        &dir.join(format!("{name}.tgt")),
        &format_documents(docs.iter().map(|d| &d.target), vocab),
    )
}

#[derive(Serialize)]
struct SyntheticInfo<'a> {
    seed: u64,
    config: &'a SyntheticConfig,
    permutation: &'a [u32],
}

pub fn gen(a: GenArgs) -> Result<()> {
    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        vocab_size: a.vocab_size.unwrap_or(d.vocab_size),
        sentences_per_doc: a.sentences_per_doc.unwrap_or(d.sentences_per_doc),
        min_len: a.min_len.unwrap_or(d.min_len),
        max_len: a.max_len.unwrap_or(d.max_len),
        train_docs: a.train_docs.unwrap_or(d.train_docs),
        dev_docs: a.dev_docs.unwrap_or(d.dev_docs),
        test_docs: a.test_docs.unwrap_or(d.test_docs),
        contrastive_examples: a.contrastive.unwrap_or(d.contrastive_examples),
        candidates: a.candidates.unwrap_or(d.candidates),
        ..d
    };
    let corpus = gen_synthetic(&cfg, a.seed).map_err(config_as_usage)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_split(&a.out, "train", &corpus.train, &corpus.vocab)?;
    write_split(&a.out, "dev", &corpus.dev, &corpus.vocab)?;
    write_split(&a.out, "test", &corpus.test, &corpus.vocab)?;
    write_contrastive(a.out.join("contrastive.jsonl"), &corpus.contrastive)?;
    let info = SyntheticInfo {
        seed: a.seed,
        config: &cfg,
        permutation: &corpus.permutation,
    };
    write_file(
        &a.out.join("synthetic.json"),
        &(serde_json::to_string_pretty(&info)? + "\n"),
    )?;
    eprintln!(
        "wrote {} train, {} dev, {} test documents and {} contrastive examples to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        corpus.contrastive.len(),
        a.out.display()
    );
    Ok(())
}

/// Invalid configuration values are usage errors rather than runtime failures.
fn config_as_usage(e: segpos::error::Error) -> anyhow::Error {
    match e {
        segpos::error::Error::Config(msg) => Usage(msg).into(),
        other => other.into(),
    }
}

fn merged(config: Option<&Path>, flags: RunOpts) -> Result<RunOpts> {
    Ok(match config {
        Some(p) => flags.or(load_config(p)?),
        None => flags,
    })
}

fn windows(docs: &[ParallelDocument], k: usize, enc: &EncodingConfig) -> Result<Vec<TrainWindow>> {
    let mut out = Vec::new();
    for d in docs {
        for w in make_windows(d, k)? {
            out.push(prepare_window(&w, enc)?);
        }
    }
    Ok(out)
}

struct Data {
    vocab: Vocab,
    train: Vec<ParallelDocument>,
    dev: Vec<ParallelDocument>,
}

/// Loads both splits with a joint vocabulary over all four files.
fn load_data(opts: &RunOpts) -> Result<Data> {
    let need = |p: &Option<PathBuf>, flag: &str| -> Result<PathBuf> {
        p.clone().ok_or_else(|| Usage(format!("--{flag} is required")).into())
    };
    let train_raw = load_parallel(need(&opts.train_src, "train-src")?, need(&opts.train_tgt, "train-tgt")?)?;
    let dev_raw = load_parallel(need(&opts.dev_src, "dev-src")?, need(&opts.dev_tgt, "dev-tgt")?)?;
    let vocab = Vocab::build(train_raw.iter().chain(&dev_raw).flat_map(|(s, t)| [s, t]));
    Ok(Data {
        train: encode_parallel(&train_raw, &vocab)?,
        dev: encode_parallel(&dev_raw, &vocab)?,
        vocab,
    })
}

#[derive(Serialize)]
struct TrainSummary {
    max_lr: f64,
    steps: usize,
    best_step: usize,
    best_valid_loss: f64,
    averaged: PathBuf,
    seconds: f64,
}

fn train_one(r: &Resolved, data: &Data) -> Result<TrainSummary> {
    let train_set = windows(&data.train, r.k, &r.encoding)?;
    let dev_set = windows(&data.dev, r.k, &r.encoding)?;
    fs::create_dir_all(&r.out).with_context(|| format!("creating {}", r.out.display()))?;
    write_file(&r.out.join("config.json"), &(serde_json::to_string_pretty(r)? + "\n"))?;
    let t = Instant::now();
    let model = Model::new(r.model.clone(), r.encoding.clone(), r.train.seed)?;
    let out = Output {
        dir: &r.out,
        vocab: Some(&data.vocab),
        k: r.k,
    };
    let outcome = trainer::train(model, &train_set, &dev_set, &r.train, Some(out))?;
    let best = &outcome.log[outcome.best_validation];
    let meta = |step| Checkpoint {
        meta: segpos::checkpoint::CheckpointMeta {
            model: r.model.clone(),
            encoding: r.encoding.clone(),
            k: r.k,
            step,
            vocab: Some(data.vocab.clone()),
        },
        params: Default::default(),
    };
    let averaged = r.out.join("averaged.ckpt");
    Checkpoint {
        params: outcome.averaged,
        ..meta(best.step)
    }
    .save(&averaged)?;
    Checkpoint {
        params: outcome.last,
        ..meta(outcome.steps)
    }
    .save(r.out.join("last.ckpt"))?;
    Ok(TrainSummary {
        max_lr: r.train.max_lr,
        steps: outcome.steps,
        best_step: best.step,
        best_valid_loss: best.valid_loss,
        averaged,
        seconds: t.elapsed().as_secs_f64(),
    })
}

fn resolve(opts: RunOpts, vocab_size: usize) -> Result<Resolved> {
    opts.resolve(vocab_size)
        .map_err(|e| match e.downcast::<segpos::error::Error>() {
            Ok(core) => config_as_usage(core),
            Err(other) => other,
        })
}

pub fn train(a: TrainArgs) -> Result<()> {
    let opts = merged(a.config.as_deref(), a.opts)?;
    let data = load_data(&opts)?;
    let r = resolve(opts, data.vocab.len())?;
    let summary = train_one(&r, &data)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn sweep_lr(a: SweepArgs) -> Result<()> {
    if a.lrs.is_empty() {
        bail!(Usage("--lrs needs at least one value".into()));
    }
    let opts = merged(a.config.as_deref(), a.opts)?;
    let base = opts.out.clone().ok_or_else(|| Usage("--out is required".into()))?;
    let data = load_data(&opts)?;
    let mut best: Option<TrainSummary> = None;
    for &lr in &a.lrs {
        let run = RunOpts {
            max_lr: Some(lr),
            out: Some(base.join(format!("lr_{lr:e}"))),
            ..opts.clone()
        };
        let r = resolve(run, data.vocab.len())?;
        let s = train_one(&r, &data)?;
        println!("{}", serde_json::to_string(&s)?);
        if best.as_ref().is_none_or(|b| s.best_valid_loss < b.best_valid_loss) {
            best = Some(s);
        }
    }
    let best = best.expect("at least one learning rate");
    eprintln!(
        "lowest dev loss {:.6} at max_lr {:e}",
        best.best_valid_loss, best.max_lr
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model, Vocab, usize)> {
    let ck = Checkpoint::load(path)?;
    let vocab = ck
        .meta
        .vocab
        .clone()
        .with_context(|| format!("{} carries no vocabulary", path.display()))?;
    Ok((ck.to_model()?, vocab, ck.meta.k))
}

fn read_input(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            Ok(s)
        }
    }
}

pub fn translate(a: TranslateArgs) -> Result<()> {
    let (model, vocab, trained_k) = load_model(&a.checkpoint)?;
    let k = a.k.unwrap_or(trained_k);
    let text = read_input(a.input.as_deref())?;
    let cfg = DecodeConfig {
        beam: a.beam,
        alpha: a.alpha,
    };
    let mut out_docs = Vec::new();
    let (mut degraded, mut truncated) = (0, 0);
    for raw in parse_documents(&text, "input#") {
        let doc = vocab.encode(&raw)?;
        let translated = translate_document(&model, &doc, k, cfg).map_err(config_as_usage)?;
        degraded += translated.iter().filter(|t| t.degraded).count();
        truncated += translated.iter().filter(|t| t.truncated).count();
        out_docs.push(Document {
            doc_id: raw.doc_id,
            // a lone end marker keeps empty outputs apart from document breaks
            sentences: translated
                .into_iter()
                .map(|t| if t.tokens.is_empty() { vec![EOS] } else { t.tokens })
                .collect(),
        });
    }
    emit(a.out.as_deref(), &format_documents(&out_docs, &vocab))?;
    if degraded + truncated > 0 {
        eprintln!("{degraded} sentences had too few separators, {truncated} hit the length limit");
    }
    Ok(())
}

pub fn eval_contrastive(a: EvalContrastiveArgs) -> Result<()> {
    let (model, vocab, trained_k) = load_model(&a.checkpoint)?;
    let set = load_contrastive(&a.set)?;
    let scorer = ModelScorer {
        model: &model,
        vocab: &vocab,
        k: a.k.unwrap_or(trained_k),
        length_normalize: a.length_normalize,
    };
    let report = contrastive_accuracy(&scorer, &set)?;
    emit(a.out.as_deref(), &(serde_json::to_string(&report)? + "\n"))?;
    eprintln!("overall accuracy {:.2}% on {} examples", report.overall(), set.len());
    Ok(())
}

pub fn eval_metrics(a: EvalMetricsArgs) -> Result<()> {
    let voita = [a.deixis, a.lex, a.ellinf, a.ellvp];
    let cp = [a.d0, a.d1, a.d2, a.d3, a.d_gt_3];
    let complete = |g: &[Option<f64>]| -> Result<Option<Vec<f64>>> {
        match g.iter().filter(|v| v.is_some()).count() {
            0 => Ok(None),
            n if n == g.len() => Ok(Some(g.iter().flatten().copied().collect())),
            _ => Err(Usage("give all values of a metric group".into()).into()),
        }
    };
    let (v, c) = (complete(&voita)?, complete(&cp)?);
    if v.is_none() && c.is_none() {
        bail!(Usage(
            "give --deixis --lex --ellinf --ellvp and/or --d0 --d1 --d2 --d3 --d-gt-3".into()
        ));
    }
    if let Some(v) = v {
        let (w, avg) = weighted_voita(v[0], v[1], v[2], v[3]);
        println!("voita={w:.2}");
        println!("voita_avg={avg:.2}");
    }
    if let Some(c) = c {
        let s = weighted_cp(c[0], c[1], c[2], c[3], c[4]);
        println!("cp={:.2}", s.cp);
        println!("cp_d_gt_0={:.2}", s.cp_d_gt_0);
        println!("cp_avg={:.2}", s.cp_avg);
    }
    Ok(())
}

pub fn analyze_pe(a: AnalyzePeArgs) -> Result<()> {
    let pe = sinusoidal_pe(a.positions, a.dims).map_err(config_as_usage)?;
    let pca = pca_cumulative_variance(pe.as_array().view()).map_err(config_as_usage)?;
    emit(a.out.as_deref(), &pca.to_csv())?;
    match pca.components_for(a.threshold) {
        Some(m) => eprintln!("{m} of {} components reach cumulative ratio {}", a.dims, a.threshold),
        None => eprintln!("no component count reaches {}", a.threshold),
    }
    Ok(())
}

pub fn average(a: AverageArgs) -> Result<()> {
    let paths = match &a.log {
        Some(log) => {
            let dir = log.parent().unwrap_or(Path::new("."));
            select_checkpoints(&read_log(log)?, a.n, dir)?
        }
        None if a.inputs.is_empty() => bail!(Usage("give checkpoint files or --log".into())),
        None => a.inputs.clone(),
    };
    average_checkpoints(&paths)?.save(&a.out)?;
    eprintln!("averaged {} checkpoints into {}", paths.len(), a.out.display());
    Ok(())
}
