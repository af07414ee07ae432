//! Desk-scale unsupervised neural machine translation (UNMT) with
//! multi-granularity curriculum learning.
//!
//! The crate trains a small shared transformer on two monolingual corpora
//! (no parallel data) via denoising auto-encoding and on-the-fly
//! back-translation, and speeds up convergence with two curriculum
//! mechanisms:
//!
//! * **Batch level** — sentences are scored by a cross-lingual embedding
//!   difficulty criterion ([`difficulty`]) and released to the dataloader
//!   easy-to-hard by a competence schedule ([`scheduler`]).
//! * **Sentence/token level** — the model estimates the quality of the
//!   pseudo bi-text it trains on ([`quality`]) and reweights the loss so
//!   that cleaner sentences and tokens contribute more.
//!
//! A synthetic language pair with a known gold translator ([`corpus`])
//! makes the whole pipeline verifiable on a laptop: BLEU against gold
//! references is exact, and curriculum/baseline arms can be compared in
//! minutes.
//!
//! Data-parallel inner loops (difficulty tables, nearest-neighbour search,
//! batched forward/backward, BLEU) run on rayon when the default
//! `parallel` feature is enabled and fall back to sequential execution
//! otherwise; results are bit-identical either way.

pub mod analysis;
pub mod bleu;
pub mod corpus;
pub mod difficulty;
pub mod exec;
pub mod quality;
pub mod scheduler;
pub mod seq2seq;
pub mod trainer;
pub mod xlembed;

pub use corpus::{MonoCorpus, Sentence, SyntheticPair, SyntheticPairSpec, TokenId, Vocabulary};
pub use difficulty::{DifficultyCriterion, DifficultyTable, TfidfModel};
pub use quality::{Estimator, EstimatorConfig, QualityWeights};
pub use scheduler::{CompetenceSchedule, CurriculumLoader, Phase};
pub use seq2seq::{Model, ModelConfig, NoiseConfig};
pub use trainer::{TrainConfig, TrainOutput, Trainer};
pub use xlembed::{AlignedEmbeddings, EmbeddingMatrix};
