//! Corpus ingestion, vocabulary construction, and synthetic language
//! pairs.
//!
//! Tokenization is whitespace-only: corpus files are UTF-8, one sentence
//! per line. The synthetic pair generator builds two *non-parallel*
//! monolingual corpora that are nevertheless exactly translatable — a
//! bijective lexicon plus an adjacent-swap reordering — so translation
//! quality against gold references is measurable without real data.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into a [`Vocabulary`].
pub type TokenId = usize;
/// An id-encoded sentence.
pub type Sentence = Vec<TokenId>;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const BLANK: TokenId = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<s>", "</s>", "<blank>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corpus {path} is empty after filtering")]
    EmptyCorpus { path: String },
    #[error("no tokens survive min_count={min_count}")]
    EmptyVocab { min_count: usize },
    #[error("invalid synthetic pair spec: {0}")]
    BadSpec(String),
    #[error("vocabulary file {path} contains duplicate token {token:?}")]
    DuplicateToken { path: String, token: String },
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Token/id bijection with reserved special ids at the bottom of the
/// range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from non-special tokens in the given order.
    /// Ids are assigned as `NUM_SPECIALS + position`.
    pub fn new<I, S>(corpus_tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for t in corpus_tokens {
            tokens.push(t.into());
        }
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Non-special tokens in id order.
    pub fn corpus_tokens(&self) -> &[String] {
        &self.tokens[NUM_SPECIALS..]
    }

    /// Encodes one token, mapping out-of-vocabulary tokens to `<unk>`.
    pub fn encode_token(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK)
    }

    /// Encodes a whitespace-tokenized line.
    pub fn encode_line(&self, line: &str) -> Sentence {
        line.split_whitespace()
            .map(|t| self.encode_token(t))
            .collect()
    }

    /// Decodes ids back to a space-joined string. Ids out of range decode
    /// to `<unk>`.
    pub fn decode(&self, sentence: &[TokenId]) -> String {
        let mut out = String::new();
        for (i, &id) in sentence.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.token(id).unwrap_or(SPECIAL_TOKENS[UNK]));
        }
        out
    }

    /// Writes the vocabulary file: one non-special token per line, line
    /// order = id order after specials.
    pub fn write_file(&self, path: &Path) -> Result<(), CorpusError> {
        let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
        for t in self.corpus_tokens() {
            writeln!(f, "{t}").map_err(|e| io_err(path, e))?;
        }
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, CorpusError> {
        let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut tokens = Vec::new();
        let mut seen = HashMap::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| io_err(path, e))?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if seen.insert(t.to_string(), ()).is_some() {
                return Err(CorpusError::DuplicateToken {
                    path: path.display().to_string(),
                    token: t.to_string(),
                });
            }
            tokens.push(t.to_string());
        }
        Ok(Vocabulary::new(tokens))
    }
}

/// An id-encoded monolingual sentence set.
#[derive(Debug, Clone)]
pub struct MonoCorpus {
    pub language: String,
    pub sentences: Vec<Sentence>,
}

impl MonoCorpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.len()).sum()
    }

    /// Per-sentence token counts, used by the batch scheduler.
    pub fn lengths(&self) -> Vec<usize> {
        self.sentences.iter().map(|s| s.len()).collect()
    }
}

/// Builds a frequency-sorted vocabulary over one or more corpus files.
///
/// Counts are summed across files; tokens below `min_count` are dropped;
/// surviving tokens are ordered by descending frequency, ties broken
/// lexicographically.
pub fn build_vocab<P: AsRef<Path>>(paths: &[P], min_count: usize) -> Result<Vocabulary, CorpusError> {
    assert!(min_count >= 1, "min_count must be >= 1");
    let mut counts: HashMap<String, usize> = HashMap::new();
    for p in paths {
        let path = p.as_ref();
        let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| io_err(path, e))?;
            for tok in line.split_whitespace() {
                *counts.entry(tok.to_string()).or_insert(0) += 1;
            }
        }
    }
    let mut survivors: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    if survivors.is_empty() {
        return Err(CorpusError::EmptyVocab { min_count });
    }
    survivors.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Vocabulary::new(survivors.into_iter().map(|(t, _)| t)))
}

/// Loads a one-sentence-per-line corpus, encoding under `vocab`.
///
/// Empty lines and sentences longer than `max_len` are dropped; the
/// number of dropped lines is returned alongside the corpus.
pub fn load_corpus(
    path: &Path,
    vocab: &Vocabulary,
    language: &str,
    max_len: usize,
) -> Result<(MonoCorpus, usize), CorpusError> {
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut sentences = Vec::new();
    let mut dropped = 0usize;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        let sent = vocab.encode_line(&line);
        if sent.is_empty() || sent.len() > max_len {
            dropped += 1;
            continue;
        }
        sentences.push(sent);
    }
    if sentences.is_empty() {
        return Err(CorpusError::EmptyCorpus {
            path: path.display().to_string(),
        });
    }
    if dropped > 0 {
        log::info!("{}: dropped {dropped} line(s) (empty or > {max_len} tokens)", path.display());
    }
    Ok((
        MonoCorpus {
            language: language.to_string(),
            sentences,
        },
        dropped,
    ))
}

/// Swaps adjacent tokens pairwise: positions (0,1), (2,3), … A trailing
/// unpaired token stays in place. Applying it twice restores the input.
pub fn reorder_adjacent_swap(sentence: &[TokenId]) -> Sentence {
    let mut out = sentence.to_vec();
    let mut i = 0;
    while i + 1 < out.len() {
        out.swap(i, i + 1);
        i += 2;
    }
    out
}

/// Recipe for a deterministic synthetic language pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticPairSpec {
    /// Content-token count per language side.
    pub vocab_size: usize,
    /// Zipf exponent for token frequencies (rank-1 : rank-2 frequency
    /// ratio is 2^exponent).
    pub zipf_exponent: f64,
    /// Explicit lexicon as a permutation of `0..vocab_size` (source rank
    /// -> target index). `None` draws a seeded random bijection.
    pub lexicon: Option<Vec<usize>>,
    /// Inclusive sentence length bounds.
    pub sentence_length_range: (usize, usize),
    /// Training sentences per side.
    pub sentences_per_side: usize,
    /// Held-out evaluation sentences with gold references.
    pub eval_size: usize,
    /// Dimension of the synthetic word embeddings.
    pub embed_dim: usize,
    /// Noise level of the target-side embeddings relative to the rotated
    /// source embeddings; drives the spread of the difficulty criterion.
    pub embed_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticPairSpec {
    fn default() -> Self {
        SyntheticPairSpec {
            vocab_size: 200,
            zipf_exponent: 1.0,
            lexicon: None,
            sentence_length_range: (4, 12),
            sentences_per_side: 5000,
            eval_size: 500,
            embed_dim: 64,
            embed_noise: 0.25,
            seed: 1,
        }
    }
}

/// A generated pair: joint vocabulary, two non-parallel corpora, a gold
/// evaluation split, the true lexicon, and synthetic embeddings for both
/// sides.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub vocab: Vocabulary,
    pub source: MonoCorpus,
    pub target: MonoCorpus,
    pub eval_sources: Vec<Sentence>,
    pub eval_references: Vec<Sentence>,
    /// Joint-id pairs (source token, target token).
    pub lexicon: Vec<(TokenId, TokenId)>,
    /// (token, vector) rows for the source-side `.vec` file.
    pub src_embeddings: Vec<(String, Vec<f64>)>,
    pub tgt_embeddings: Vec<(String, Vec<f64>)>,
    pub spec: SyntheticPairSpec,
}

impl SyntheticPair {
    fn lexicon_map(&self) -> HashMap<TokenId, TokenId> {
        self.lexicon.iter().copied().collect()
    }

    fn inverse_lexicon_map(&self) -> HashMap<TokenId, TokenId> {
        self.lexicon.iter().map(|&(s, t)| (t, s)).collect()
    }

    /// Gold source->target translation: lexicon substitution then the
    /// adjacent-swap reordering.
    pub fn gold_translate(&self, sentence: &[TokenId]) -> Sentence {
        let lex = self.lexicon_map();
        let mapped: Sentence = sentence.iter().map(|t| lex[t]).collect();
        reorder_adjacent_swap(&mapped)
    }

    /// Gold target->source translation (exact inverse of
    /// [`SyntheticPair::gold_translate`]).
    pub fn gold_translate_back(&self, sentence: &[TokenId]) -> Sentence {
        let inv = self.inverse_lexicon_map();
        let swapped = reorder_adjacent_swap(sentence);
        swapped.iter().map(|t| inv[t]).collect()
    }

    /// Writes every artifact the CLI pipeline consumes into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let write_corpus = |name: &str, sents: &[Sentence]| -> Result<(), CorpusError> {
            let path = dir.join(name);
            let mut f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
            for s in sents {
                writeln!(f, "{}", self.vocab.decode(s)).map_err(|e| io_err(&path, e))?;
            }
            Ok(())
        };
        write_corpus("src.txt", &self.source.sentences)?;
        write_corpus("tgt.txt", &self.target.sentences)?;
        write_corpus("eval.src.txt", &self.eval_sources)?;
        write_corpus("eval.ref.txt", &self.eval_references)?;
        self.vocab.write_file(&dir.join("vocab.txt"))?;
        write_vec_file(&dir.join("src.vec"), &self.src_embeddings)?;
        write_vec_file(&dir.join("tgt.vec"), &self.tgt_embeddings)?;

        let dict_path = dir.join("seed_dict.tsv");
        let mut f = fs::File::create(&dict_path).map_err(|e| io_err(&dict_path, e))?;
        for &(s, t) in &self.lexicon {
            writeln!(
                f,
                "{}\t{}",
                self.vocab.token(s).unwrap(),
                self.vocab.token(t).unwrap()
            )
            .map_err(|e| io_err(&dict_path, e))?;
        }

        let spec_path = dir.join("pair.json");
        let json = serde_json::to_string_pretty(&self.spec).expect("spec serializes");
        fs::write(&spec_path, json).map_err(|e| io_err(&spec_path, e))?;
        Ok(())
    }
}

/// Writes a fastText-convention text embedding file.
pub fn write_vec_file(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<(), CorpusError> {
    let dim = rows.first().map(|(_, v)| v.len()).unwrap_or(0);
    let mut buf = String::new();
    let _ = writeln!(buf, "{} {}", rows.len(), dim);
    for (tok, v) in rows {
        buf.push_str(tok);
        for x in v {
            let _ = write!(buf, " {x:.8}");
        }
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Generates the synthetic pair. Pure function of the spec: the same
/// spec yields byte-identical corpora, embeddings, and splits.
pub fn generate_synthetic_pair(spec: &SyntheticPairSpec) -> Result<SyntheticPair, CorpusError> {
    let v = spec.vocab_size;
    if v < 20 {
        return Err(CorpusError::BadSpec(format!(
            "vocab_size must be >= 20, got {v}"
        )));
    }
    let (lo, hi) = spec.sentence_length_range;
    if lo < 1 || lo > hi {
        return Err(CorpusError::BadSpec(format!(
            "bad sentence_length_range ({lo}, {hi})"
        )));
    }
    if spec.zipf_exponent <= 0.0 {
        return Err(CorpusError::BadSpec("zipf_exponent must be positive".into()));
    }
    if spec.embed_dim == 0 {
        return Err(CorpusError::BadSpec("embed_dim must be positive".into()));
    }
    let lexicon: Vec<usize> = match &spec.lexicon {
        Some(l) => {
            let mut seen = vec![false; v];
            if l.len() != v || l.iter().any(|&t| t >= v || std::mem::replace(&mut seen[t], true)) {
                return Err(CorpusError::BadSpec(
                    "lexicon must be a permutation of 0..vocab_size".into(),
                ));
            }
            l.clone()
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x4c45_5849)); // "LEXI"
            let mut perm: Vec<usize> = (0..v).collect();
            perm.shuffle(&mut rng);
            perm
        }
    };

    let width = format!("{}", v - 1).len().max(3);
    let src_tokens: Vec<String> = (0..v).map(|i| format!("s{i:0width$}")).collect();
    let tgt_tokens: Vec<String> = (0..v).map(|i| format!("t{i:0width$}")).collect();
    let vocab = Vocabulary::new(src_tokens.iter().chain(tgt_tokens.iter()).cloned());
    let src_id = |rank: usize| NUM_SPECIALS + rank;
    let tgt_id = |idx: usize| NUM_SPECIALS + v + idx;
    let lexicon_ids: Vec<(TokenId, TokenId)> =
        (0..v).map(|r| (src_id(r), tgt_id(lexicon[r]))).collect();
    let lex_map: HashMap<TokenId, TokenId> = lexicon_ids.iter().copied().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let zipf = Zipf::new(v as f64, spec.zipf_exponent)
        .map_err(|e| CorpusError::BadSpec(format!("zipf: {e}")))?;
    let sample_src_sentence = |rng: &mut ChaCha8Rng| -> Sentence {
        let len = rng.random_range(lo..=hi);
        (0..len)
            .map(|_| src_id(zipf.sample(rng) as usize - 1))
            .collect()
    };
    let translate = |s: &Sentence| -> Sentence {
        let mapped: Sentence = s.iter().map(|t| lex_map[t]).collect();
        reorder_adjacent_swap(&mapped)
    };

    let source_sents: Vec<Sentence> = (0..spec.sentences_per_side)
        .map(|_| sample_src_sentence(&mut rng))
        .collect();
    // Independent sample: the two sides are monolingual, not parallel.
    let target_sents: Vec<Sentence> = (0..spec.sentences_per_side)
        .map(|_| translate(&sample_src_sentence(&mut rng)))
        .collect();
    let eval_sources: Vec<Sentence> = (0..spec.eval_size)
        .map(|_| sample_src_sentence(&mut rng))
        .collect();
    let eval_references: Vec<Sentence> = eval_sources.iter().map(translate).collect();

    // Source embeddings are random unit vectors; target embeddings are the
    // source vectors pushed through a random rotation plus rank-scaled
    // noise, so rare words are harder under the cosine criterion.
    let dim = spec.embed_dim;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut x: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let n = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        x.iter_mut().for_each(|a| *a /= n);
        x
    };
    let src_vecs: Vec<Vec<f64>> = (0..v).map(|_| unit(&mut rng)).collect();
    let rotation = {
        let g = nalgebra::DMatrix::from_fn(dim, dim, |_, _| normal.sample(&mut rng));
        g.qr().q()
    };
    let mut tgt_vecs: Vec<Vec<f64>> = vec![Vec::new(); v];
    for (r, sv) in src_vecs.iter().enumerate() {
        let rotated = &rotation * nalgebra::DVector::from_column_slice(sv);
        let sigma = spec.embed_noise * (0.5 + r as f64 / (v - 1).max(1) as f64);
        let mut w: Vec<f64> = rotated
            .iter()
            .map(|&x| x + sigma * normal.sample(&mut rng))
            .collect();
        let n = w.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        w.iter_mut().for_each(|a| *a /= n);
        tgt_vecs[lexicon[r]] = w;
    }

    let src_embeddings: Vec<(String, Vec<f64>)> = src_tokens
        .iter()
        .cloned()
        .zip(src_vecs)
        .collect();
    let tgt_embeddings: Vec<(String, Vec<f64>)> = tgt_tokens
        .iter()
        .cloned()
        .zip(tgt_vecs)
        .collect();

    Ok(SyntheticPair {
        vocab,
        source: MonoCorpus {
            language: "src".to_string(),
            sentences: source_sents,
        },
        target: MonoCorpus {
            language: "tgt".to_string(),
            sentences: target_sents,
        },
        eval_sources,
        eval_references,
        lexicon: lexicon_ids,
        src_embeddings,
        tgt_embeddings,
        spec: spec.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;


    fn tmp_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn specials_occupy_lowest_ids() {
        let v = Vocabulary::new(["a", "b"]);
        for (i, t) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id(t), Some(i));
        }
        assert_eq!(v.id("a"), Some(NUM_SPECIALS));
        assert_eq!(v.len(), NUM_SPECIALS + 2);
    }

    #[test]
    fn build_vocab_orders_by_frequency_then_lexicographic() {
        let f = tmp_file("a a b\nb c a\n");
        let v = build_vocab(&[f.path()], 1).unwrap();
        // a:3, b:2, c:1
        assert_eq!(v.corpus_tokens(), &["a", "b", "c"]);
        let v2 = build_vocab(&[f.path()], 2).unwrap();
        assert_eq!(v2.corpus_tokens(), &["a", "b"]);
    }

    #[test]
    fn build_vocab_counts_across_files() {
        let f1 = tmp_file("x y\n");
        let f2 = tmp_file("y z\n");
        let v = build_vocab(&[f1.path(), f2.path()], 2).unwrap();
        assert_eq!(v.corpus_tokens(), &["y"]);
    }

    #[test]
    fn build_vocab_empty_threshold_errors() {
        let f = tmp_file("a b\n");
        assert!(matches!(
            build_vocab(&[f.path()], 5),
            Err(CorpusError::EmptyVocab { .. })
        ));
    }

    #[test]
    fn load_corpus_encodes_and_filters() {
        let v = Vocabulary::new(["a", "b", "c"]);
        let f = tmp_file("a b\nc\n");
        let (c, dropped) = load_corpus(f.path(), &v, "l1", 100).unwrap();
        assert_eq!(c.sentences.len(), 2);
        assert_eq!(dropped, 0);
        assert_eq!(c.sentences[0], vec![NUM_SPECIALS, NUM_SPECIALS + 1]);
    }

    #[test]
    fn load_corpus_drops_overlong_and_errors_when_empty() {
        let v = Vocabulary::new(["a"]);
        let long_line = vec!["a"; 150].join(" ");
        let f = tmp_file(&format!("{long_line}\n"));
        assert!(matches!(
            load_corpus(f.path(), &v, "l1", 100),
            Err(CorpusError::EmptyCorpus { .. })
        ));
    }

    #[test]
    fn load_corpus_maps_unknown_tokens_to_unk() {
        let v = Vocabulary::new(["a"]);
        let f = tmp_file("a zzz\n");
        let (c, _) = load_corpus(f.path(), &v, "l1", 100).unwrap();
        assert_eq!(c.sentences[0], vec![NUM_SPECIALS, UNK]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::new(["way", "zeta", "alpha"]);
        v.write_file(&path).unwrap();
        let back = Vocabulary::read_file(&path).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn reorder_matches_spec_example() {
        // lexicon(s_i) = t_i', then adjacent pairs swapped:
        // [s3, s7, s4, s8] -> [t7', t3', t8', t4']
        let spec = SyntheticPairSpec {
            vocab_size: 20,
            sentences_per_side: 10,
            eval_size: 2,
            embed_dim: 8,
            ..Default::default()
        };
        let pair = generate_synthetic_pair(&spec).unwrap();
        let lex: HashMap<_, _> = pair.lexicon.iter().copied().collect();
        let s: Sentence = vec![
            NUM_SPECIALS + 3,
            NUM_SPECIALS + 7,
            NUM_SPECIALS + 4,
            NUM_SPECIALS + 8,
        ];
        let gold = pair.gold_translate(&s);
        assert_eq!(
            gold,
            vec![
                lex[&(NUM_SPECIALS + 7)],
                lex[&(NUM_SPECIALS + 3)],
                lex[&(NUM_SPECIALS + 8)],
                lex[&(NUM_SPECIALS + 4)],
            ]
        );
        assert_eq!(pair.gold_translate_back(&gold), s);
    }

    #[test]
    fn synthetic_pair_is_deterministic() {
        let spec = SyntheticPairSpec {
            vocab_size: 30,
            sentences_per_side: 50,
            eval_size: 10,
            embed_dim: 8,
            ..Default::default()
        };
        let a = generate_synthetic_pair(&spec).unwrap();
        let b = generate_synthetic_pair(&spec).unwrap();
        assert_eq!(a.source.sentences, b.source.sentences);
        assert_eq!(a.target.sentences, b.target.sentences);
        assert_eq!(a.lexicon, b.lexicon);
        let bits = |e: &[(String, Vec<f64>)]| -> Vec<u64> {
            e.iter()
                .flat_map(|(_, v)| v.iter().map(|x| x.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a.src_embeddings), bits(&b.src_embeddings));
        assert_eq!(bits(&a.tgt_embeddings), bits(&b.tgt_embeddings));
    }

    #[test]
    fn zipf_rank_ratio_tracks_exponent() {
        let spec = SyntheticPairSpec {
            vocab_size: 50,
            zipf_exponent: 1.5,
            sentences_per_side: 10_000,
            eval_size: 1,
            embed_dim: 8,
            sentence_length_range: (6, 6),
            ..Default::default()
        };
        let pair = generate_synthetic_pair(&spec).unwrap();
        let mut counts = vec![0usize; pair.vocab.len()];
        for s in &pair.source.sentences {
            for &t in s {
                counts[t] += 1;
            }
        }
        let r1 = counts[NUM_SPECIALS] as f64;
        let r2 = counts[NUM_SPECIALS + 1] as f64;
        let expected = 2f64.powf(spec.zipf_exponent);
        let ratio = r1 / r2;
        assert!(
            (ratio / expected - 1.0).abs() < 0.10,
            "rank1/rank2 = {ratio}, expected ~{expected}"
        );
    }

    #[test]
    fn rejects_undersized_vocab() {
        let spec = SyntheticPairSpec {
            vocab_size: 10,
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic_pair(&spec),
            Err(CorpusError::BadSpec(_))
        ));
    }

    #[test]
    fn write_to_dir_emits_all_pipeline_files() {
        let spec = SyntheticPairSpec {
            vocab_size: 20,
            sentences_per_side: 20,
            eval_size: 5,
            embed_dim: 8,
            ..Default::default()
        };
        let pair = generate_synthetic_pair(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        pair.write_to_dir(dir.path()).unwrap();
        for name in [
            "src.txt",
            "tgt.txt",
            "eval.src.txt",
            "eval.ref.txt",
            "vocab.txt",
            "src.vec",
            "tgt.vec",
            "seed_dict.tsv",
            "pair.json",
        ] {
            assert!(dir.path().join(name).exists(), "missing {name}");
        }
        // Written corpus re-encodes to the in-memory ids.
        let vocab = Vocabulary::read_file(&dir.path().join("vocab.txt")).unwrap();
        let (src, _) = load_corpus(&dir.path().join("src.txt"), &vocab, "src", 100).unwrap();
        assert_eq!(src.sentences, pair.source.sentences);
    }

    proptest! {
        #[test]
        fn encode_decode_identity(tokens in proptest::collection::vec("[a-z]{1,6}", 1..20)) {
            let mut uniq: Vec<String> = tokens.clone();
            uniq.sort();
            uniq.dedup();
            let v = Vocabulary::new(uniq);
            let line = tokens.join(" ");
            let ids = v.encode_line(&line);
            prop_assert_eq!(v.decode(&ids), line);
        }

        #[test]
        fn reorder_is_an_involution(s in proptest::collection::vec(0usize..100, 0..25)) {
            let once = reorder_adjacent_swap(&s);
            let twice = reorder_adjacent_swap(&once);
            prop_assert_eq!(twice, s);
        }
    }
}
