//! Token- and sentence-level position representations.
//!
//! Two independent axes are computed per token of a concatenated window:
//!
//! * the token position `t`, window-global and optionally shifted by a
//!   constant every time a new sentence starts (counted left to right so
//!   positions stay monotone);
//! * the segment id `k`, counted right to left so the current sentence is
//!   always `k = 1`.
//!
//! They are turned into vectors either by addition (`TE·√d + PE_t + SE_k`)
//! or, in PSE mode, by concatenating a `d_PE`-wide sinusoid of `t` with a
//! `d_SE`-wide segment vector of `k`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::corpus::{Side, TokenId, SEP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Plain token positions.
    None,
    /// Segment-shifted token positions.
    Shift,
    Onehot,
    Sin,
    Learned,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::None,
        Scheme::Shift,
        Scheme::Onehot,
        Scheme::Sin,
        Scheme::Learned,
    ];

    pub fn segment_kind(self) -> Option<SegmentKind> {
        match self {
            Scheme::Onehot => Some(SegmentKind::Onehot),
            Scheme::Sin => Some(SegmentKind::Sin),
            Scheme::Learned => Some(SegmentKind::Learned),
            Scheme::None | Scheme::Shift => None,
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Scheme::None),
            "shift" => Ok(Scheme::Shift),
            "onehot" | "1hot" => Ok(Scheme::Onehot),
            "sin" => Ok(Scheme::Sin),
            "learned" | "lrn" => Ok(Scheme::Learned),
            other => Err(Error::Config(format!("unknown encoding scheme {other:?}"))),
        }
    }
}

/// Which sides of the encoder-decoder receive the sentence-position encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sides {
    Encoder,
    Decoder,
    Both,
}

impl std::str::FromStr for Sides {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Sides::Encoder),
            "decoder" => Ok(Sides::Decoder),
            "both" => Ok(Sides::Both),
            other => Err(Error::Config(format!("unknown side selection {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Onehot,
    Sin,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub scheme: Scheme,
    pub persistent: bool,
    pub pse: bool,
    pub d_model: usize,
    /// Width of the segment block in PSE mode.
    pub d_se: usize,
    /// Added to token positions once per sentence boundary (shift scheme).
    pub shift: usize,
    pub k_max: usize,
    pub sides: Sides,
}

impl EncodingConfig {
    /// Standard Transformer positions, nothing sentence-aware.
    pub fn plain(d_model: usize, k_max: usize) -> Self {
        Self {
            scheme: Scheme::None,
            persistent: false,
            pse: false,
            d_model,
            d_se: 4,
            shift: 8,
            k_max,
            sides: Sides::Both,
        }
    }

    pub fn d_pe(&self) -> usize {
        if self.pse {
            self.d_model - self.d_se
        } else {
            self.d_model
        }
    }

    /// Width of segment-table rows.
    pub fn segment_width(&self) -> usize {
        if self.pse {
            self.d_se
        } else {
            self.d_model
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_model {} must be even and positive",
                self.d_model
            )));
        }
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        if self.pse {
            if self.scheme.segment_kind().is_none() {
                return Err(Error::Config(format!(
                    "PSE needs a segment embedding scheme, got {:?}",
                    self.scheme
                )));
            }
            if self.d_se == 0 || self.d_se >= self.d_model {
                return Err(Error::Config(format!(
                    "d_SE {} must lie in 1..{}",
                    self.d_se, self.d_model
                )));
            }
            if !self.d_pe().is_multiple_of(2) {
                return Err(Error::Config(format!("d_PE {} must be even", self.d_pe())));
            }
            if self.scheme == Scheme::Sin && !self.d_se.is_multiple_of(2) {
                return Err(Error::Config(format!("sinusoidal d_SE {} must be even", self.d_se)));
            }
        }
        if self.scheme == Scheme::Onehot && self.segment_width() < self.k_max {
            return Err(Error::Config(format!(
                "one-hot segments need width {} >= k_max {}",
                self.segment_width(),
                self.k_max
            )));
        }
        Ok(())
    }

    pub fn applies_to(&self, side: Side) -> bool {
        matches!(
            (self.sides, side),
            (Sides::Both, _) | (Sides::Encoder, Side::Source) | (Sides::Decoder, Side::Target)
        )
    }

    /// The configuration in effect on one side: sides not selected fall
    /// back to plain positions without persistence.
    pub fn for_side(&self, side: Side) -> EncodingConfig {
        if self.applies_to(side) {
            self.clone()
        } else {
            EncodingConfig {
                scheme: Scheme::None,
                persistent: false,
                pse: false,
                ..self.clone()
            }
        }
    }
}

/// Per-token position `t` and segment id `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionPlan {
    pub positions: Vec<usize>,
    pub segments: Vec<usize>,
}

impl PositionPlan {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn from_lengths(lengths: &[usize], cfg: &EncodingConfig) -> Self {
        let shift = if cfg.scheme == Scheme::Shift { cfg.shift } else { 0 };
        Self {
            positions: shifted_positions(lengths, shift),
            segments: segment_ids(lengths),
        }
    }

    /// Plan for a possibly incomplete sequence that will eventually hold
    /// `k_eff` sentences: the sentence opened after the `s`-th `SEP` gets
    /// `k = k_eff - s` (clamped at 1). For a complete sequence this agrees
    /// with [`PositionPlan::from_lengths`].
    pub fn incremental(tokens: &[TokenId], k_eff: usize, cfg: &EncodingConfig) -> Self {
        let shift = if cfg.scheme == Scheme::Shift { cfg.shift } else { 0 };
        let mut positions = Vec::with_capacity(tokens.len());
        let mut segments = Vec::with_capacity(tokens.len());
        let mut seps = 0usize;
        for (t, &tok) in tokens.iter().enumerate() {
            positions.push(t + shift * seps);
            segments.push(k_eff.saturating_sub(seps).max(1));
            if tok == SEP {
                seps += 1;
            }
        }
        Self { positions, segments }
    }
}

/// Right-to-left sentence index of every token; the last sentence is 1.
pub fn segment_ids(sentence_lengths: &[usize]) -> Vec<usize> {
    let n = sentence_lengths.len();
    sentence_lengths
        .iter()
        .enumerate()
        .flat_map(|(s, &len)| std::iter::repeat_n(n - s, len))
        .collect()
}

/// Window-global token index plus `shift` for every sentence boundary
/// passed, counting sentences from the window start.
pub fn shifted_positions(sentence_lengths: &[usize], shift: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(sentence_lengths.iter().sum());
    let mut t = 0;
    for (s, &len) in sentence_lengths.iter().enumerate() {
        for _ in 0..len {
            out.push(t + shift * s);
            t += 1;
        }
    }
    out
}

/// The sinusoidal position matrix: `rows × dim`, with
/// `[pos, 2i] = sin(pos / 10000^(2i/dim))` and `[pos, 2i+1] = cos(..)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeMatrix(Array2<f64>);

impl PeMatrix {
    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, pos: usize) -> ArrayView1<'_, f64> {
        self.0.row(pos)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }
}

pub fn sinusoidal_pe(max_pos: usize, dim: usize) -> Result<PeMatrix> {
    if !dim.is_multiple_of(2) || dim == 0 {
        return Err(Error::Config(format!(
            "sinusoidal dimension {dim} must be even and positive"
        )));
    }
    if max_pos == 0 {
        return Err(Error::Config("need at least one position".into()));
    }
    let mut m = Array2::zeros((max_pos, dim));
    for i in 0..dim / 2 {
        let denom = 10000f64.powf((2 * i) as f64 / dim as f64);
        for pos in 0..max_pos {
            let angle = pos as f64 / denom;
            m[[pos, 2 * i]] = angle.sin();
            m[[pos, 2 * i + 1]] = angle.cos();
        }
    }
    Ok(PeMatrix(m))
}

/// Segment vectors for `k = 1..=k_max`, stored at row `k - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTable {
    pub kind: SegmentKind,
    rows: Array2<f64>,
}

impl SegmentTable {
    pub fn onehot(k_max: usize, dim: usize) -> Result<Self> {
        if dim < k_max {
            return Err(Error::Config(format!("one-hot width {dim} < k_max {k_max}")));
        }
        let mut rows = Array2::zeros((k_max, dim));
        for k in 0..k_max {
            rows[[k, k]] = 1.0;
        }
        Ok(Self {
            kind: SegmentKind::Onehot,
            rows,
        })
    }

    /// Row `k` equals sinusoidal position `k`.
    pub fn sinusoidal(k_max: usize, dim: usize) -> Result<Self> {
        let pe = sinusoidal_pe(k_max + 1, dim)?;
        Ok(Self {
            kind: SegmentKind::Sin,
            rows: pe.0.slice(s![1.., ..]).to_owned(),
        })
    }

    pub fn learned(rows: Array2<f64>) -> Self {
        Self {
            kind: SegmentKind::Learned,
            rows,
        }
    }

    /// Fixed tables for one-hot and sinusoidal kinds; `None` for learned
    /// tables, which live in the model parameters.
    pub fn fixed(kind: SegmentKind, k_max: usize, dim: usize) -> Result<Option<Self>> {
        match kind {
            SegmentKind::Onehot => Self::onehot(k_max, dim).map(Some),
            SegmentKind::Sin => Self::sinusoidal(k_max, dim).map(Some),
            SegmentKind::Learned => Ok(None),
        }
    }

    pub fn k_max(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    /// The vector for an index outside `1..=k_max`, where the kind defines
    /// one: sinusoids extend to any position, one-hot vectors to any index
    /// below the width (`k = 0` is the zero vector). Learned tables do not
    /// extend.
    pub fn extended_row(&self, k: usize) -> Option<Array1<f64>> {
        if (1..=self.k_max()).contains(&k) {
            return Some(self.rows.row(k - 1).to_owned());
        }
        match self.kind {
            SegmentKind::Sin => sinusoidal_pe(k + 1, self.dim()).ok().map(|pe| pe.0.row(k).to_owned()),
            SegmentKind::Onehot => {
                let mut v = Array1::zeros(self.dim());
                if k >= 1 {
                    *v.get_mut(k - 1)? = 1.0;
                }
                Some(v)
            }
            SegmentKind::Learned => None,
        }
    }
}

pub fn segment_embedding(k: usize, table: &SegmentTable) -> Result<ArrayView1<'_, f64>> {
    if k == 0 || k > table.k_max() {
        return Err(Error::SegmentOutOfRange {
            k,
            k_max: table.k_max(),
        });
    }
    Ok(table.rows.row(k - 1))
}

/// Precomputed sinusoids and fixed segment table for one configuration.
#[derive(Debug, Clone)]
pub struct PositionEncoder {
    pub cfg: EncodingConfig,
    pe: PeMatrix,
    table: Option<SegmentTable>,
}

impl PositionEncoder {
    pub fn new(cfg: EncodingConfig, max_positions: usize) -> Result<Self> {
        cfg.validate()?;
        let pe = sinusoidal_pe(max_positions, cfg.d_pe())?;
        let table = match cfg.scheme.segment_kind() {
            Some(kind) => SegmentTable::fixed(kind, cfg.k_max, cfg.segment_width())?,
            None => None,
        };
        Ok(Self { cfg, pe, table })
    }

    pub fn pe(&self) -> &PeMatrix {
        &self.pe
    }

    pub fn table(&self) -> Option<&SegmentTable> {
        self.table.as_ref()
    }

    pub fn has_segments(&self) -> bool {
        self.cfg.scheme.segment_kind().is_some()
    }

    pub fn check_plan(&self, plan: &PositionPlan) -> Result<()> {
        if let Some(&p) = plan.positions.iter().find(|&&p| p >= self.pe.rows()) {
            return Err(Error::PositionOutOfRange {
                position: p,
                max: self.pe.rows(),
            });
        }
        if self.has_segments() {
            if let Some(&k) = plan.segments.iter().find(|&&k| k == 0 || k > self.cfg.k_max) {
                return Err(Error::SegmentOutOfRange {
                    k,
                    k_max: self.cfg.k_max,
                });
            }
        }
        Ok(())
    }

    /// Token-position part, `n × d_model`; in PSE mode the segment block
    /// is left zero.
    pub fn position_part(&self, plan: &PositionPlan) -> Result<Array2<f64>> {
        self.check_plan(plan)?;
        let mut out = Array2::zeros((plan.len(), self.cfg.d_model));
        let d_pe = self.cfg.d_pe();
        for (i, &p) in plan.positions.iter().enumerate() {
            out.slice_mut(s![i, ..d_pe]).assign(&self.pe.row(p));
        }
        Ok(out)
    }

    /// Segment part, `n × d_model`, computed from explicit table rows (the
    /// fixed table, or the learned parameter). Zero when the scheme has no
    /// segment embedding.
    pub fn segment_part_with(&self, plan: &PositionPlan, rows: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_plan(plan)?;
        let mut out = Array2::zeros((plan.len(), self.cfg.d_model));
        if !self.has_segments() {
            return Ok(out);
        }
        let width = self.cfg.segment_width();
        if rows.ncols() != width || rows.nrows() < self.cfg.k_max {
            return Err(Error::Shape(format!(
                "segment table is {}x{}, expected {}x{width}",
                rows.nrows(),
                rows.ncols(),
                self.cfg.k_max
            )));
        }
        let offset = self.cfg.d_model - width;
        for (i, &k) in plan.segments.iter().enumerate() {
            out.slice_mut(s![i, offset..]).assign(&rows.row(k - 1));
        }
        Ok(out)
    }

    /// The full non-token encoding term `PE + SE` (or `[PE', SE']`).
    pub fn encoding_term(&self, plan: &PositionPlan, learned: Option<&SegmentTable>) -> Result<Array2<f64>> {
        let mut out = self.position_part(plan)?;
        if self.has_segments() {
            let table = match (self.table.as_ref(), learned) {
                (Some(t), _) => t,
                (None, Some(t)) => t,
                (None, None) => return Err(Error::Config("learned segment scheme needs a segment table".into())),
            };
            out += &self.segment_part_with(plan, table.rows())?;
        }
        Ok(out)
    }
}

/// Model input: `TE·√d_model` plus the encoding term.
pub fn compose_input(
    token_embs: ArrayView2<'_, f64>,
    plan: &PositionPlan,
    encoder: &PositionEncoder,
    learned: Option<&SegmentTable>,
) -> Result<Array2<f64>> {
    let d = encoder.cfg.d_model;
    if token_embs.ncols() != d || token_embs.nrows() != plan.len() {
        return Err(Error::Shape(format!(
            "token embeddings {}x{} for a plan of {} tokens at d_model {d}",
            token_embs.nrows(),
            token_embs.ncols(),
            plan.len()
        )));
    }
    let term = encoder.encoding_term(plan, learned)?;
    Ok(&token_embs * (d as f64).sqrt() + term)
}
