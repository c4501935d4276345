//! Post-norm Transformer encoder-decoder with sentence-position encodings.
//!
//! Sequences of a batch are stacked row-wise without padding; attention is
//! block-diagonal over the stacked sequences. The encoding term computed
//! for the first block is re-added to the input of every later block of a
//! side when persistence is enabled on that side.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{flatten_window, Side, TokenId, Window, PAD};
use crate::encodings::{EncodingConfig, PositionEncoder, PositionPlan, Scheme, SegmentTable};
use crate::error::{Error, Result};
use crate::objective::{cd_loss, cd_loss_grad, LossConfig};
use crate::tape::{AttnLayout, AttnSegment, Gradients, Mat, ParamId, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub dropout: f64,
    pub max_positions: usize,
}

impl ModelConfig {
    /// Transformer-base: 6 layers, 512 wide, 8 heads, 2048 feed-forward.
    pub fn transformer_base(vocab: usize) -> Self {
        Self {
            d_model: 512,
            n_layers: 6,
            n_heads: 8,
            d_ff: 2048,
            src_vocab: vocab,
            tgt_vocab: vocab,
            dropout: 0.3,
            max_positions: 1024,
        }
    }

    pub fn desk(vocab: usize) -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            src_vocab: vocab,
            tgt_vocab: vocab,
            dropout: 0.1,
            max_positions: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config(
                "need at least one layer and a non-empty feed-forward".into(),
            ));
        }
        if self.src_vocab < 5 || self.tgt_vocab < 5 {
            return Err(Error::Config(
                "vocabularies must hold more than the reserved ids".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Named parameter matrices in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.values[id.0] = value;
            return id;
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.id(name).map(|id| &self.values[id.0])
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Mat::zeros(v.dim())).collect(),
            index: self.index.clone(),
        }
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a.dim() == b.dim())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Flat `{name: [[row], ...]}` export.
    pub fn to_json(&self) -> serde_json::Value {
        let map = self
            .iter()
            .map(|(_, name, v)| {
                let rows: Vec<Vec<f64>> = v.outer_iter().map(|r| r.to_vec()).collect();
                (name.to_string(), serde_json::json!(rows))
            })
            .collect::<serde_json::Map<_, _>>();
        serde_json::Value::Object(map)
    }

    /// Inverse of [`ParamStore::to_json`]; names are taken in sorted order.
    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Malformed("weight export must be a JSON object".into()))?;
        let mut store = ParamStore::new();
        for (name, rows) in obj {
            let rows: Vec<Vec<f64>> = serde_json::from_value(rows.clone())?;
            let cols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != cols) {
                return Err(Error::Malformed(format!("{name}: ragged rows")));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let m = Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| Error::Shape(e.to_string()))?;
            store.insert(name.clone(), m);
        }
        Ok(store)
    }
}

#[derive(Debug, Clone)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct EncLayer {
    attn: AttnIds,
    norm1: NormIds,
    ffn: FfnIds,
    norm2: NormIds,
}

#[derive(Debug, Clone)]
struct DecLayer {
    self_attn: AttnIds,
    norm1: NormIds,
    cross: AttnIds,
    norm2: NormIds,
    ffn: FfnIds,
    norm3: NormIds,
}

#[derive(Debug, Clone)]
struct Layout {
    src_embed: ParamId,
    tgt_embed: ParamId,
    segment: Option<ParamId>,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
}

/// Name and shape of every parameter, in registration order.
fn param_shapes(cfg: &ModelConfig, enc: &EncodingConfig) -> Vec<(String, (usize, usize))> {
    let d = cfg.d_model;
    let mut out = vec![
        ("src_embed".to_string(), (cfg.src_vocab, d)),
        ("tgt_embed".to_string(), (cfg.tgt_vocab, d)),
    ];
    if enc.scheme == Scheme::Learned {
        out.push(("segment_embed".into(), (enc.k_max, enc.segment_width())));
    }
    let attn = |out: &mut Vec<_>, p: &str| {
        for m in ["q", "k", "v", "o"] {
            out.push((format!("{p}.{m}.weight"), (d, d)));
            out.push((format!("{p}.{m}.bias"), (1, d)));
        }
    };
    let ffn = |out: &mut Vec<_>, p: &str| {
        out.push((format!("{p}.fc1.weight"), (d, cfg.d_ff)));
        out.push((format!("{p}.fc1.bias"), (1, cfg.d_ff)));
        out.push((format!("{p}.fc2.weight"), (cfg.d_ff, d)));
        out.push((format!("{p}.fc2.bias"), (1, d)));
    };
    let norm = |out: &mut Vec<_>, p: &str| {
        out.push((format!("{p}.gain"), (1, d)));
        out.push((format!("{p}.bias"), (1, d)));
    };
    for l in 0..cfg.n_layers {
        attn(&mut out, &format!("enc.{l}.self_attn"));
        norm(&mut out, &format!("enc.{l}.norm1"));
        ffn(&mut out, &format!("enc.{l}.ffn"));
        norm(&mut out, &format!("enc.{l}.norm2"));
    }
    for l in 0..cfg.n_layers {
        attn(&mut out, &format!("dec.{l}.self_attn"));
        norm(&mut out, &format!("dec.{l}.norm1"));
        attn(&mut out, &format!("dec.{l}.cross_attn"));
        norm(&mut out, &format!("dec.{l}.norm2"));
        ffn(&mut out, &format!("dec.{l}.ffn"));
        norm(&mut out, &format!("dec.{l}.norm3"));
    }
    out
}

fn resolve_layout(store: &ParamStore, cfg: &ModelConfig, enc: &EncodingConfig) -> Result<Layout> {
    for (name, shape) in param_shapes(cfg, enc) {
        match store.get(&name) {
            Some(m) if m.dim() == shape => {}
            Some(m) => {
                return Err(Error::Shape(format!(
                    "parameter {name} is {:?}, expected {shape:?}",
                    m.dim()
                )))
            }
            None => return Err(Error::Shape(format!("missing parameter {name}"))),
        }
    }
    let id = |n: &str| store.id(n).expect("checked above");
    let attn = |p: &str| AttnIds {
        wq: id(&format!("{p}.q.weight")),
        bq: id(&format!("{p}.q.bias")),
        wk: id(&format!("{p}.k.weight")),
        bk: id(&format!("{p}.k.bias")),
        wv: id(&format!("{p}.v.weight")),
        bv: id(&format!("{p}.v.bias")),
        wo: id(&format!("{p}.o.weight")),
        bo: id(&format!("{p}.o.bias")),
    };
    let ffn = |p: &str| FfnIds {
        w1: id(&format!("{p}.fc1.weight")),
        b1: id(&format!("{p}.fc1.bias")),
        w2: id(&format!("{p}.fc2.weight")),
        b2: id(&format!("{p}.fc2.bias")),
    };
    let norm = |p: &str| NormIds {
        gain: id(&format!("{p}.gain")),
        bias: id(&format!("{p}.bias")),
    };
    Ok(Layout {
        src_embed: id("src_embed"),
        tgt_embed: id("tgt_embed"),
        segment: store.id("segment_embed").filter(|_| enc.scheme == Scheme::Learned),
        enc: (0..cfg.n_layers)
            .map(|l| EncLayer {
                attn: attn(&format!("enc.{l}.self_attn")),
                norm1: norm(&format!("enc.{l}.norm1")),
                ffn: ffn(&format!("enc.{l}.ffn")),
                norm2: norm(&format!("enc.{l}.norm2")),
            })
            .collect(),
        dec: (0..cfg.n_layers)
            .map(|l| DecLayer {
                self_attn: attn(&format!("dec.{l}.self_attn")),
                norm1: norm(&format!("dec.{l}.norm1")),
                cross: attn(&format!("dec.{l}.cross_attn")),
                norm2: norm(&format!("dec.{l}.norm2")),
                ffn: ffn(&format!("dec.{l}.ffn")),
                norm3: norm(&format!("dec.{l}.norm3")),
            })
            .collect(),
    })
}

/// Fresh parameters: normal(0, d^-1/2) embeddings (learned segment table
/// included), Xavier-uniform projections, zero biases, unit gains.
pub fn init_params(cfg: &ModelConfig, enc: &EncodingConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emb = Normal::new(0.0, (cfg.d_model as f64).powf(-0.5)).expect("positive std");
    let mut store = ParamStore::new();
    for (name, (r, c)) in param_shapes(cfg, enc) {
        let m = if name.ends_with("_embed") {
            Mat::from_shape_fn((r, c), |_| emb.sample(&mut rng))
        } else if name.ends_with(".weight") {
            let a = (6.0 / (r + c) as f64).sqrt();
            Mat::from_shape_fn((r, c), |_| rng.random_range(-a..a))
        } else if name.ends_with(".gain") {
            Mat::ones((r, c))
        } else {
            Mat::zeros((r, c))
        };
        store.insert(name, m);
    }
    store
}

/// A token sequence with its position plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqInput {
    pub tokens: Vec<TokenId>,
    pub plan: PositionPlan,
}

impl SeqInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A flattened training window: teacher-forced decoder input, shifted
/// targets and the first target index belonging to the current sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainWindow {
    pub src: SeqInput,
    pub tgt_in: SeqInput,
    pub tgt_out: Vec<TokenId>,
    pub current_start: usize,
    pub k_eff: usize,
}

impl TrainWindow {
    pub fn num_tokens(&self) -> usize {
        self.src.len() + self.tgt_out.len()
    }
}

/// Source input for a window under the encoder-side configuration.
pub fn source_input(w: &Window, enc: &EncodingConfig) -> SeqInput {
    let f = flatten_window(w, Side::Source);
    let cfg = enc.for_side(Side::Source);
    SeqInput {
        plan: PositionPlan::from_lengths(&f.sentence_lengths, &cfg),
        tokens: f.tokens,
    }
}

/// Decoder input for a (possibly partial) target prefix starting at `BOS`.
pub fn target_input(prefix: &[TokenId], k_eff: usize, enc: &EncodingConfig) -> SeqInput {
    let cfg = enc.for_side(Side::Target);
    SeqInput {
        plan: PositionPlan::incremental(prefix, k_eff, &cfg),
        tokens: prefix.to_vec(),
    }
}

pub fn prepare_window(w: &Window, enc: &EncodingConfig) -> Result<TrainWindow> {
    if w.tgt_sentences.len() != w.k_eff {
        return Err(Error::Malformed(format!(
            "window {} has {} target sentences for K_eff {}",
            w.j,
            w.tgt_sentences.len(),
            w.k_eff
        )));
    }
    let f = flatten_window(w, Side::Target);
    let n = f.tokens.len();
    let context_len: usize = f.sentence_lengths[..w.k_eff - 1].iter().sum();
    // output i predicts flattened token i + 1
    let current_start = context_len.saturating_sub(1);
    let mut lengths = f.sentence_lengths.clone();
    *lengths.last_mut().expect("at least one sentence") -= 1;
    let tcfg = enc.for_side(Side::Target);
    Ok(TrainWindow {
        src: source_input(w, enc),
        tgt_in: SeqInput {
            tokens: f.tokens[..n - 1].to_vec(),
            plan: PositionPlan::from_lengths(&lengths, &tcfg),
        },
        tgt_out: f.tokens[1..].to_vec(),
        current_start,
        k_eff: w.k_eff,
    })
}

/// Whether block `block_index` (0-based) receives the encoding again.
fn injects_at(block_index: usize, cfg: &EncodingConfig) -> bool {
    cfg.persistent && block_index >= 1
}

/// Persistent injection on plain matrices: `block_input + enc_vectors` for
/// blocks after the first when persistence is on, identity otherwise.
pub fn inject_persistent(
    block_index: usize,
    block_input: ArrayView2<'_, f64>,
    enc_vectors: ArrayView2<'_, f64>,
    cfg: &EncodingConfig,
) -> Result<Mat> {
    if block_input.dim() != enc_vectors.dim() {
        return Err(Error::Shape(format!(
            "block input {:?} vs encoding {:?}",
            block_input.dim(),
            enc_vectors.dim()
        )));
    }
    Ok(if injects_at(block_index, cfg) {
        &block_input + &enc_vectors
    } else {
        block_input.to_owned()
    })
}

/// Evaluation (deterministic) or training (dropout drawn from `rng`).
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Encoder output kept for repeated decoder calls.
#[derive(Debug, Clone)]
pub struct EncoderState {
    memory: Mat,
    key_mask: Vec<bool>,
}

/// Loss and gradients of one batch; losses are token sums.
#[derive(Debug, Clone)]
pub struct GradOutput {
    pub grads: Gradients,
    pub loss: f64,
    pub context_loss: f64,
    pub current_loss: f64,
    pub target_tokens: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub enc_cfg: EncodingConfig,
    pub params: ParamStore,
    layout: Layout,
    src_pos: PositionEncoder,
    tgt_pos: PositionEncoder,
}

struct Stacked {
    tokens: Vec<usize>,
    segments: Vec<AttnSegment>,
    key_mask: Vec<bool>,
    has_pad: bool,
    ranges: Vec<Range<usize>>,
}

fn stack(seqs: &[&SeqInput]) -> Stacked {
    let mut tokens = Vec::new();
    let mut segments = Vec::with_capacity(seqs.len());
    let mut ranges = Vec::with_capacity(seqs.len());
    for s in seqs {
        let start = tokens.len();
        tokens.extend(s.tokens.iter().map(|&t| t as usize));
        segments.push(AttnSegment {
            q_start: start,
            q_len: s.len(),
            k_start: start,
            k_len: s.len(),
        });
        ranges.push(start..tokens.len());
    }
    let key_mask: Vec<bool> = tokens.iter().map(|&t| t != PAD as usize).collect();
    let has_pad = key_mask.iter().any(|&v| !v);
    Stacked {
        tokens,
        segments,
        key_mask,
        has_pad,
        ranges,
    }
}

fn term_const(ctx: &mut Ctx<'_, '_>, m: Mat, rows: usize, d: usize) -> Result<Var> {
    if m.dim() != (rows, d) {
        return Err(Error::Shape(format!(
            "encoding term {:?}, expected {:?}",
            m.dim(),
            (rows, d)
        )));
    }
    Ok(ctx.tape.constant(m))
}

struct Ctx<'a, 'r> {
    tape: Tape,
    vars: Vec<Option<Var>>,
    mode: Mode<'r>,
    dropout: f64,
    store: &'a ParamStore,
    /// Replacements for the computed source and target encoding terms.
    terms: (Option<Mat>, Option<Mat>),
}

impl Ctx<'_, '_> {
    fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = self.tape.param(id, self.store.value(id).clone());
        self.vars[id.0] = Some(v);
        v
    }

    fn dropout(&mut self, x: Var) -> Var {
        let p = self.dropout;
        match &mut self.mode {
            Mode::Train(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let dim = self.tape.value(x).dim();
                let mask = Mat::from_shape_fn(dim, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
                self.tape.mask_mul(x, mask)
            }
            _ => x,
        }
    }

    fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.p(w);
        let b = self.p(b);
        let h = self.tape.matmul(x, w);
        self.tape.add_row(h, b)
    }

    fn attention(&mut self, ids: &AttnIds, xq: Var, xkv: Var, layout: Arc<AttnLayout>) -> Var {
        let q = self.linear(xq, ids.wq, ids.bq);
        let k = self.linear(xkv, ids.wk, ids.bk);
        let v = self.linear(xkv, ids.wv, ids.bv);
        let a = self.tape.attention(q, k, v, layout);
        self.linear(a, ids.wo, ids.bo)
    }

    fn ffn(&mut self, ids: &FfnIds, x: Var) -> Var {
        let h = self.linear(x, ids.w1, ids.b1);
        let h = self.tape.relu(h);
        self.linear(h, ids.w2, ids.b2)
    }

    fn residual_norm(&mut self, x: Var, sub: Var, norm: &NormIds) -> Var {
        let sub = self.dropout(sub);
        let s = self.tape.add(x, sub);
        let g = self.p(norm.gain);
        let b = self.p(norm.bias);
        self.tape.layer_norm(s, g, b)
    }
}

impl Model {
    pub fn new(cfg: ModelConfig, enc_cfg: EncodingConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, &enc_cfg, seed);
        Self::from_params(cfg, enc_cfg, params)
    }

    pub fn from_params(cfg: ModelConfig, enc_cfg: EncodingConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        if enc_cfg.d_model != cfg.d_model {
            return Err(Error::Config(format!(
                "encoding width {} differs from d_model {}",
                enc_cfg.d_model, cfg.d_model
            )));
        }
        enc_cfg.validate()?;
        let layout = resolve_layout(&params, &cfg, &enc_cfg)?;
        let src_pos = PositionEncoder::new(enc_cfg.for_side(Side::Source), cfg.max_positions)?;
        let tgt_pos = PositionEncoder::new(enc_cfg.for_side(Side::Target), cfg.max_positions)?;
        Ok(Self {
            cfg,
            enc_cfg,
            params,
            layout,
            src_pos,
            tgt_pos,
        })
    }

    pub fn position_encoder(&self, side: Side) -> &PositionEncoder {
        match side {
            Side::Source => &self.src_pos,
            Side::Target => &self.tgt_pos,
        }
    }

    /// The learned segment table, when the scheme has one.
    pub fn learned_segments(&self) -> Option<SegmentTable> {
        self.layout
            .segment
            .map(|id| SegmentTable::learned(self.params.value(id).clone()))
    }

    fn ctx<'r>(&self, mode: Mode<'r>) -> Ctx<'_, 'r> {
        Ctx {
            tape: Tape::new(),
            vars: vec![None; self.params.len()],
            mode,
            dropout: self.cfg.dropout,
            store: &self.params,
            terms: (None, None),
        }
    }

    fn check_tokens(&self, seqs: &[&SeqInput], vocab: usize) -> Result<()> {
        for s in seqs {
            if s.plan.len() != s.len() {
                return Err(Error::Shape(format!("plan of {} for {} tokens", s.plan.len(), s.len())));
            }
            if let Some(&t) = s.tokens.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::TokenOutOfRange {
                    id: t as usize,
                    size: vocab,
                });
            }
        }
        Ok(())
    }

    /// The encoding term (PE/SE/shifted PE, or PSE) of stacked sequences.
    fn encoding_var(&self, ctx: &mut Ctx<'_, '_>, pos: &PositionEncoder, seqs: &[&SeqInput]) -> Result<Var> {
        let mut parts = Vec::with_capacity(seqs.len());
        for s in seqs {
            let mut part = pos.position_part(&s.plan)?;
            if let Some(table) = pos.table() {
                part += &pos.segment_part_with(&s.plan, table.rows())?;
            }
            parts.push(part);
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let fixed = ctx
            .tape
            .constant(concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?);
        if pos.cfg.scheme != Scheme::Learned {
            return Ok(fixed);
        }
        let seg_id = self
            .layout
            .segment
            .ok_or_else(|| Error::Config("learned scheme without segment parameters".into()))?;
        let ks: Vec<usize> = seqs
            .iter()
            .flat_map(|s| s.plan.segments.iter().map(|&k| k - 1))
            .collect();
        let table = ctx.p(seg_id);
        let mut learned = ctx.tape.gather(table, ks);
        let d_pe = pos.cfg.d_pe();
        if pos.cfg.pse {
            let n = ctx.tape.value(learned).nrows();
            let zeros = ctx.tape.constant(Mat::zeros((n, d_pe)));
            learned = ctx.tape.concat_cols(zeros, learned);
        }
        Ok(ctx.tape.add(fixed, learned))
    }

    fn embed(&self, ctx: &mut Ctx<'_, '_>, table: ParamId, tokens: Vec<usize>, enc: Var) -> Var {
        let t = ctx.p(table);
        let te = ctx.tape.gather(t, tokens);
        let te = ctx.tape.scale(te, (self.cfg.d_model as f64).sqrt());
        let x = ctx.tape.add(te, enc);
        ctx.dropout(x)
    }

    fn run_encoder(&self, ctx: &mut Ctx<'_, '_>, srcs: &[&SeqInput]) -> Result<(Var, Stacked)> {
        self.check_tokens(srcs, self.cfg.src_vocab)?;
        let st = stack(srcs);
        let enc = match ctx.terms.0.take() {
            Some(m) => term_const(ctx, m, st.tokens.len(), self.cfg.d_model)?,
            None => self.encoding_var(ctx, &self.src_pos, srcs)?,
        };
        let layout = Arc::new(AttnLayout {
            segments: st.segments.clone(),
            causal: false,
            key_mask: st.has_pad.then(|| st.key_mask.clone()),
            n_heads: self.cfg.n_heads,
        });
        let mut x = self.embed(ctx, self.layout.src_embed, st.tokens.clone(), enc);
        for (l, layer) in self.layout.enc.iter().enumerate() {
            if injects_at(l, &self.src_pos.cfg) {
                x = ctx.tape.add(x, enc);
            }
            let a = ctx.attention(&layer.attn, x, x, layout.clone());
            x = ctx.residual_norm(x, a, &layer.norm1);
            let f = ctx.ffn(&layer.ffn, x);
            x = ctx.residual_norm(x, f, &layer.norm2);
        }
        Ok((x, st))
    }

    /// `memory_segments[i]` is the key block of memory rows target `i`
    /// attends to.
    fn run_decoder(
        &self,
        ctx: &mut Ctx<'_, '_>,
        tgts: &[&SeqInput],
        memory: Var,
        memory_segments: &[(usize, usize)],
        memory_mask: Option<Vec<bool>>,
    ) -> Result<(Var, Stacked)> {
        self.check_tokens(tgts, self.cfg.tgt_vocab)?;
        let st = stack(tgts);
        let enc = match ctx.terms.1.take() {
            Some(m) => term_const(ctx, m, st.tokens.len(), self.cfg.d_model)?,
            None => self.encoding_var(ctx, &self.tgt_pos, tgts)?,
        };
        let self_layout = Arc::new(AttnLayout {
            segments: st.segments.clone(),
            causal: true,
            key_mask: st.has_pad.then(|| st.key_mask.clone()),
            n_heads: self.cfg.n_heads,
        });
        let cross_layout = Arc::new(AttnLayout {
            segments: st
                .segments
                .iter()
                .zip(memory_segments)
                .map(|(s, &(k_start, k_len))| AttnSegment {
                    q_start: s.q_start,
                    q_len: s.q_len,
                    k_start,
                    k_len,
                })
                .collect(),
            causal: false,
            key_mask: memory_mask,
            n_heads: self.cfg.n_heads,
        });
        let mut x = self.embed(ctx, self.layout.tgt_embed, st.tokens.clone(), enc);
        for (l, layer) in self.layout.dec.iter().enumerate() {
            if injects_at(l, &self.tgt_pos.cfg) {
                x = ctx.tape.add(x, enc);
            }
            let a = ctx.attention(&layer.self_attn, x, x, self_layout.clone());
            x = ctx.residual_norm(x, a, &layer.norm1);
            let c = ctx.attention(&layer.cross, x, memory, cross_layout.clone());
            x = ctx.residual_norm(x, c, &layer.norm2);
            let f = ctx.ffn(&layer.ffn, x);
            x = ctx.residual_norm(x, f, &layer.norm3);
        }
        let emb = ctx.p(self.layout.tgt_embed);
        let logits = ctx.tape.matmul_nt(x, emb);
        Ok((ctx.tape.log_softmax(logits), st))
    }

    fn forward_pairs(&self, ctx: &mut Ctx<'_, '_>, srcs: &[&SeqInput], tgts: &[&SeqInput]) -> Result<(Var, Stacked)> {
        if srcs.len() != tgts.len() {
            return Err(Error::Shape(format!(
                "{} sources for {} targets",
                srcs.len(),
                tgts.len()
            )));
        }
        let (memory, sst) = self.run_encoder(ctx, srcs)?;
        let mem_segments: Vec<(usize, usize)> = sst.segments.iter().map(|s| (s.k_start, s.k_len)).collect();
        let mask = sst.has_pad.then_some(sst.key_mask);
        self.run_decoder(ctx, tgts, memory, &mem_segments, mask)
    }

    /// Per-position log-probabilities over the target vocabulary.
    pub fn forward(&self, src: &SeqInput, tgt_in: &SeqInput) -> Result<Mat> {
        let mut ctx = self.ctx(Mode::Eval);
        let (lp, _) = self.forward_pairs(&mut ctx, &[src], &[tgt_in])?;
        Ok(ctx.tape.value(lp).clone())
    }

    /// As [`Model::forward`] with the encoding terms of both sides given
    /// explicitly instead of computed from the plans.
    pub fn forward_with_terms(&self, src: &SeqInput, tgt_in: &SeqInput, src_term: Mat, tgt_term: Mat) -> Result<Mat> {
        let mut ctx = self.ctx(Mode::Eval);
        ctx.terms = (Some(src_term), Some(tgt_term));
        let (lp, _) = self.forward_pairs(&mut ctx, &[src], &[tgt_in])?;
        Ok(ctx.tape.value(lp).clone())
    }

    /// Log-probabilities for several (source, target-prefix) pairs at once.
    pub fn forward_batch(&self, srcs: &[&SeqInput], tgts: &[&SeqInput]) -> Result<Vec<Mat>> {
        let mut ctx = self.ctx(Mode::Eval);
        let (lp, st) = self.forward_pairs(&mut ctx, srcs, tgts)?;
        let all = ctx.tape.value(lp);
        Ok(st
            .ranges
            .iter()
            .map(|r| all.slice(ndarray::s![r.clone(), ..]).to_owned())
            .collect())
    }

    pub fn encode(&self, src: &SeqInput) -> Result<EncoderState> {
        let mut ctx = self.ctx(Mode::Eval);
        let (memory, st) = self.run_encoder(&mut ctx, &[src])?;
        Ok(EncoderState {
            memory: ctx.tape.value(memory).clone(),
            key_mask: st.key_mask,
        })
    }

    /// Decodes several target prefixes against one encoded source.
    pub fn decode(&self, state: &EncoderState, prefixes: &[&SeqInput]) -> Result<Vec<Mat>> {
        let mut ctx = self.ctx(Mode::Eval);
        let memory = ctx.tape.constant(state.memory.clone());
        let n = state.memory.nrows();
        let segs = vec![(0, n); prefixes.len()];
        let mask = state.key_mask.iter().any(|&v| !v).then(|| state.key_mask.clone());
        let (lp, st) = self.run_decoder(&mut ctx, prefixes, memory, &segs, mask)?;
        let all = ctx.tape.value(lp);
        Ok(st
            .ranges
            .iter()
            .map(|r| all.slice(ndarray::s![r.clone(), ..]).to_owned())
            .collect())
    }

    /// Configured loss over a batch and its gradient for every parameter.
    pub fn grad(&self, batch: &[TrainWindow], loss_cfg: &LossConfig, mode: Mode<'_>) -> Result<GradOutput> {
        self.grad_scaled(batch, loss_cfg, mode, 1.0)
    }

    /// As [`Model::grad`] for the loss multiplied by `scale`.
    pub fn grad_scaled(
        &self,
        batch: &[TrainWindow],
        loss_cfg: &LossConfig,
        mode: Mode<'_>,
        scale: f64,
    ) -> Result<GradOutput> {
        loss_cfg.validate()?;
        let mut ctx = self.ctx(mode);
        let srcs: Vec<&SeqInput> = batch.iter().map(|w| &w.src).collect();
        let tgts: Vec<&SeqInput> = batch.iter().map(|w| &w.tgt_in).collect();
        let (lp, st) = self.forward_pairs(&mut ctx, &srcs, &tgts)?;
        let all = ctx.tape.value(lp);
        let mut seed = Mat::zeros(all.dim());
        let (mut total, mut context, mut current) = (0.0, 0.0, 0.0);
        let mut tokens = 0;
        for (w, r) in batch.iter().zip(&st.ranges) {
            let rows = all.slice(ndarray::s![r.clone(), ..]);
            let pad: Vec<bool> = w.tgt_out.iter().map(|&t| t == PAD).collect();
            let l = cd_loss(rows, &w.tgt_out, loss_cfg, w.current_start, Some(&pad))?;
            total += l.total;
            context += l.context;
            current += l.current;
            tokens += pad.iter().filter(|&&p| !p).count();
            let g = cd_loss_grad(rows, &w.tgt_out, loss_cfg, w.current_start, Some(&pad))?;
            seed.slice_mut(ndarray::s![r.clone(), ..]).assign(&(g * scale));
        }
        if !total.is_finite() {
            return Err(Error::NonFinite {
                step: 0,
                detail: format!("batch loss {total} (context {context}, current {current})"),
            });
        }
        let grads = ctx.tape.backward(lp, seed);
        Ok(GradOutput {
            grads,
            loss: total * scale,
            context_loss: context * scale,
            current_loss: current * scale,
            target_tokens: tokens,
        })
    }

    /// Distance of the nearest ReLU input to the kink for an evaluation
    /// forward pass over `batch`.
    pub fn relu_margin(&self, batch: &[TrainWindow]) -> Result<f64> {
        let mut ctx = self.ctx(Mode::Eval);
        let srcs: Vec<&SeqInput> = batch.iter().map(|w| &w.src).collect();
        let tgts: Vec<&SeqInput> = batch.iter().map(|w| &w.tgt_in).collect();
        self.forward_pairs(&mut ctx, &srcs, &tgts)?;
        Ok(ctx.tape.relu_margin())
    }

    /// Loss only, in evaluation mode.
    pub fn loss(&self, batch: &[TrainWindow], loss_cfg: &LossConfig) -> Result<f64> {
        let srcs: Vec<&SeqInput> = batch.iter().map(|w| &w.src).collect();
        let tgts: Vec<&SeqInput> = batch.iter().map(|w| &w.tgt_in).collect();
        let lps = self.forward_batch(&srcs, &tgts)?;
        let mut total = 0.0;
        for (w, lp) in batch.iter().zip(&lps) {
            total += cd_loss(lp.view(), &w.tgt_out, loss_cfg, w.current_start, None)?.total;
        }
        Ok(total)
    }
}
