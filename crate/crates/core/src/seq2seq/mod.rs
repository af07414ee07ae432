//! A small shared transformer encoder-decoder with a hand-written
//! backward pass.
//!
//! One model serves both translation directions: token, positional, and
//! language embeddings are summed at the input, the output projection is
//! tied to the token embeddings, and the language embedding tells the
//! decoder which language to produce. All math is `f64`; parameters live
//! in one flat vector ([`params::ParamLayout`]) so the optimizer,
//! finite-difference checks, and checkpoints stay simple.

mod decode;
mod model;
pub mod params;

pub use decode::{beam_search_core, BeamParams};
pub use model::{DecodeLossOutput, Encoded};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Sentence, TokenId};
use params::ParamLayout;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("language id {got} out of range (num_languages = {num})")]
    LanguageOutOfRange { got: usize, num: usize },
    #[error("sentence of {got} tokens exceeds max_len {max}")]
    TooLong { got: usize, max: usize },
    #[error("empty sentence")]
    EmptySentence,
    #[error("token id {0} outside vocabulary")]
    TokenOutOfRange(TokenId),
    #[error("token weights: expected {expected} entries (target length + end step), got {got}")]
    WeightLength { expected: usize, got: usize },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("encoder output carries no gradient cache (encode with record = true)")]
    MissingCache,
    #[error(
        "embedding dim {emb} does not match model dim {model} and no projection seed was given"
    )]
    EmbeddingDimMismatch { emb: usize, model: usize },
    #[error("gradient accumulator has wrong length: expected {expected}, got {got}")]
    GradLength { expected: usize, got: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder layers (the decoder uses the same count).
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    /// Dropout rate used whenever a pass runs with dropout on.
    pub dropout: f64,
    /// Longest sentence accepted by the encoder and the loss.
    pub max_len: usize,
    pub vocab_size: usize,
    pub num_languages: usize,
    /// Parameter init seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ffn_dim: 256,
            dropout: 0.1,
            max_len: 100,
            vocab_size: 0,
            num_languages: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "model_dim {} must be divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig(format!(
                "dropout {} must be in [0, 1)",
                self.dropout
            )));
        }
        if self.layers == 0 || self.ffn_dim == 0 || self.max_len == 0 {
            return Err(ModelError::BadConfig(
                "layers, ffn_dim, and max_len must be positive".into(),
            ));
        }
        if self.vocab_size <= crate::corpus::NUM_SPECIALS {
            return Err(ModelError::BadConfig(format!(
                "vocab_size {} too small",
                self.vocab_size
            )));
        }
        if self.num_languages == 0 {
            return Err(ModelError::BadConfig("num_languages must be positive".into()));
        }
        Ok(())
    }

    /// Positional embedding rows: decoder inputs are one longer than the
    /// target (start symbol), plus one spare.
    pub fn positions(&self) -> usize {
        self.max_len + 2
    }
}

/// Whether a forward pass applies dropout, and with which stream.
#[derive(Debug, Clone, Copy)]
pub enum DropoutMode {
    Off,
    On { seed: u64 },
}

/// Denoising configuration for the auto-encoding objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Per-token deletion probability.
    pub drop_prob: f64,
    /// Per-token probability of being replaced by the blank symbol.
    pub blank_prob: f64,
    /// Local shuffle bound: a token moves at most `shuffle_window - 1`
    /// positions; 1 means no shuffling.
    pub shuffle_window: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            drop_prob: 0.1,
            blank_prob: 0.1,
            shuffle_window: 3,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..1.0).contains(&self.drop_prob) || !(0.0..1.0).contains(&self.blank_prob) {
            return Err(ModelError::BadConfig(
                "noise probabilities must be in [0, 1)".into(),
            ));
        }
        if self.shuffle_window < 1 {
            return Err(ModelError::BadConfig("shuffle_window must be >= 1".into()));
        }
        Ok(())
    }
}

/// Applies word dropout, blanking, and bounded local shuffling. The
/// result is never empty: if every token would be dropped, one survives.
pub fn corrupt(sentence: &[TokenId], noise: &NoiseConfig, seed: u64) -> Sentence {
    assert!(!sentence.is_empty(), "cannot corrupt an empty sentence");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // deletion
    let kept: Vec<TokenId> = sentence
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() >= noise.drop_prob)
        .collect();
    let mut out = if kept.is_empty() {
        vec![sentence[rng.random_range(0..sentence.len())]]
    } else {
        kept
    };

    // blanking
    for t in out.iter_mut() {
        if rng.random::<f64>() < noise.blank_prob {
            *t = crate::corpus::BLANK;
        }
    }

    // bounded local shuffle: sort by i + U[0, window-1]; a stable sort
    // keeps every token within window-1 of its origin
    if noise.shuffle_window > 1 {
        let span = (noise.shuffle_window - 1) as f64;
        let mut keyed: Vec<(f64, TokenId)> = out
            .iter()
            .enumerate()
            .map(|(i, &t)| (i as f64 + rng.random::<f64>() * span, t))
            .collect();
        keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        out = keyed.into_iter().map(|(_, t)| t).collect();
    }
    out
}

/// The transformer: config, parameter layout, and the flat parameter
/// vector.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let params = layout.init_params(config.seed);
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.layout.total]
    }

    /// Overwrites token-embedding rows from aligned cross-lingual
    /// embeddings. Tokens found in the source-side vocabulary take the
    /// mapped source vector, tokens in the target-side vocabulary take
    /// the target vector, everything else keeps its seeded init.
    ///
    /// If the embedding dimension differs from the model dimension, a
    /// fixed random orthonormal projection (from `projection_seed`) maps
    /// the vectors into model space; without a seed that is an error.
    pub fn init_token_embeddings(
        &mut self,
        vocab: &crate::corpus::Vocabulary,
        aligned: &crate::xlembed::AlignedEmbeddings,
        projection_seed: Option<u64>,
    ) -> Result<usize, ModelError> {
        let d = self.config.model_dim;
        let e = aligned.source.dim;
        assert_eq!(vocab.len(), self.config.vocab_size, "vocabulary mismatch");
        let projection: Option<Vec<f64>> = if e == d {
            None
        } else {
            let seed = projection_seed
                .ok_or(ModelError::EmbeddingDimMismatch { emb: e, model: d })?;
            // rows of a random orthogonal matrix: inner products survive
            let side = e.max(d);
            let normal = rand_distr::Normal::new(0.0f64, 1.0).expect("unit normal");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = nalgebra::DMatrix::from_fn(side, side, |_, _| normal.sample(&mut rng));
            let q = g.qr().q();
            let mut p = vec![0.0f64; e * d];
            for r in 0..e {
                for c in 0..d {
                    p[r * d + c] = q[(r, c)];
                }
            }
            Some(p)
        };
        let project = |v: &[f64]| -> Vec<f64> {
            match &projection {
                None => v.to_vec(),
                Some(p) => (0..d)
                    .map(|c| (0..e).map(|r| v[r] * p[r * d + c]).sum())
                    .collect(),
            }
        };
        let mut copied = 0usize;
        for id in 0..vocab.len() {
            let token = vocab.token(id).unwrap();
            let row = if let Some(sid) = aligned.source.vocab().id(token) {
                Some(project(aligned.source.row(sid)))
            } else {
                aligned
                    .target
                    .vocab()
                    .id(token)
                    .map(|tid| project(aligned.target.row(tid)))
            };
            if let Some(row) = row {
                let base = self.layout.tok_emb + id * d;
                self.params[base..base + d].copy_from_slice(&row);
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        params::save_checkpoint(path, &cfg, &self.params, &[]).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let ck = params::load_checkpoint(path)?;
        let config: ModelConfig =
            serde_json::from_str(&ck.config_json).map_err(|e| ModelError::BadCheckpoint {
                path: path.display().to_string(),
                reason: format!("config: {e}"),
            })?;
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let params = ck
            .section("params")
            .ok_or_else(|| ModelError::BadCheckpoint {
                path: path.display().to_string(),
                reason: "missing params section".into(),
            })?
            .to_vec();
        if params.len() != layout.total {
            return Err(ModelError::BadCheckpoint {
                path: path.display().to_string(),
                reason: format!(
                    "params length {} does not match layout {}",
                    params.len(),
                    layout.total
                ),
            });
        }
        Ok(Model {
            config,
            layout,
            params,
        })
    }
}
