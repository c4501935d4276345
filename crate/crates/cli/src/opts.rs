use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use segpos::encodings::{EncodingConfig, Scheme, Sides};
use segpos::model::ModelConfig;
use segpos::objective::LossConfig;
use segpos::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Declares an all-optional option struct usable both as clap flags and as
/// a flat JSON config, plus `or` to fill unset fields from another source.
macro_rules! options {
    ($(#[$m:meta])* $name:ident { $($(#[$fm:meta])* $field:ident : $ty:ty,)* }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Default, clap::Args, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct $name {
            $($(#[$fm])* #[arg(long)] pub $field: Option<$ty>,)*
        }

        impl $name {
            pub fn or(self, other: Self) -> Self {
                Self { $($field: self.$field.or(other.$field),)* }
            }
        }
    };
}

options! {
    /// Model, encoding, loss and optimization settings shared by `train`
    /// and `sweep-lr`.
    RunOpts {
        /// Training source file (one sentence per line, blank line between documents).
        train_src: PathBuf,
        train_tgt: PathBuf,
        dev_src: PathBuf,
        dev_tgt: PathBuf,
        /// Output directory for checkpoints and the training log.
        out: PathBuf,
        /// Window size: the current sentence plus K-1 preceding ones.
        k: usize,
        /// none, shift, onehot, sin or learned.
        scheme: Scheme,
        #[arg(num_args = 0..=1, default_missing_value = "true")]
        persistent: bool,
        #[arg(num_args = 0..=1, default_missing_value = "true")]
        pse: bool,
        d_se: usize,
        shift: usize,
        /// encoder, decoder or both.
        sides: Sides,
        /// Weight of context-sentence target tokens in the loss.
        cd: f64,
        label_smoothing: f64,
        d_model: usize,
        layers: usize,
        heads: usize,
        d_ff: usize,
        dropout: f64,
        max_positions: usize,
        max_lr: f64,
        warmup: usize,
        batch_tokens: usize,
        patience: usize,
        validate_every: usize,
        average_n: usize,
        max_steps: usize,
        /// Global gradient-norm clip; 0 disables clipping.
        clip_norm: f64,
        grad_chunk: usize,
        seed: u64,
    }
}

/// Reads a flat JSON config file.
pub fn load_config(path: &Path) -> Result<RunOpts> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| crate::Usage(format!("config {}: {e}", path.display())).into())
}

/// Everything `train` needs, defaults filled in.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    pub dev_src: PathBuf,
    pub dev_tgt: PathBuf,
    pub out: PathBuf,
    pub k: usize,
    pub encoding: EncodingConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn required<T>(v: Option<T>, name: &str) -> Result<T> {
    v.ok_or_else(|| {
        crate::Usage(format!(
            "--{} is required (flag or config key {name})",
            name.replace('_', "-")
        ))
        .into()
    })
}

impl RunOpts {
    /// Fills defaults; `vocab_size` comes from the data.
    pub fn resolve(self, vocab_size: usize) -> Result<Resolved> {
        let k = self.k.unwrap_or(4);
        let d_model = self.d_model.unwrap_or(32);
        let base = ModelConfig::desk(vocab_size);
        let model = ModelConfig {
            d_model,
            n_layers: self.layers.unwrap_or(base.n_layers),
            n_heads: self.heads.unwrap_or(base.n_heads),
            d_ff: self.d_ff.unwrap_or(base.d_ff),
            dropout: self.dropout.unwrap_or(base.dropout),
            max_positions: self.max_positions.unwrap_or(base.max_positions),
            ..base
        };
        let plain = EncodingConfig::plain(d_model, k);
        let encoding = EncodingConfig {
            scheme: self.scheme.unwrap_or(plain.scheme),
            persistent: self.persistent.unwrap_or(false),
            pse: self.pse.unwrap_or(false),
            d_se: self.d_se.unwrap_or(plain.d_se),
            shift: self.shift.unwrap_or(plain.shift),
            sides: self.sides.unwrap_or(plain.sides),
            ..plain
        };
        let defaults = TrainConfig::default();
        let train = TrainConfig {
            max_lr: self.max_lr.unwrap_or(defaults.max_lr),
            warmup_steps: self.warmup.unwrap_or(defaults.warmup_steps),
            batch_tokens: self.batch_tokens.unwrap_or(defaults.batch_tokens),
            patience: self.patience.unwrap_or(defaults.patience),
            validate_every: self.validate_every.unwrap_or(defaults.validate_every),
            average_n: self.average_n.unwrap_or(defaults.average_n),
            seed: self.seed.unwrap_or(defaults.seed),
            max_steps: self.max_steps.unwrap_or(defaults.max_steps),
            clip_norm: match self.clip_norm {
                Some(0.0) => None,
                Some(c) => Some(c),
                None => defaults.clip_norm,
            },
            loss: LossConfig {
                cd: self.cd.unwrap_or(defaults.loss.cd),
                label_smoothing: self.label_smoothing.unwrap_or(defaults.loss.label_smoothing),
            },
            grad_chunk: self.grad_chunk.unwrap_or(defaults.grad_chunk),
        };
        model.validate()?;
        encoding.validate()?;
        train.validate()?;
        Ok(Resolved {
            train_src: required(self.train_src, "train_src")?,
            train_tgt: required(self.train_tgt, "train_tgt")?,
            dev_src: required(self.dev_src, "dev_src")?,
            dev_tgt: required(self.dev_tgt, "dev_tgt")?,
            out: required(self.out, "out")?,
            k,
            encoding,
            model,
            train,
        })
    }
}
