//! Flat parameter storage for the transformer.
//!
//! Every tensor lives in one contiguous `Vec<f64>` described by a
//! [`ParamLayout`]: named groups (one per weight matrix / bias / norm
//! vector) plus resolved numeric offsets for the hot paths. Flat storage
//! makes the optimizer, finite-difference checking, and bit-exact
//! checkpointing trivial.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};

/// One named parameter group.
#[derive(Debug, Clone)]
pub struct GroupSpec {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub kind: GroupKind,
    /// Fan-in/fan-out for matrix groups, used by the initializer.
    pub shape: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    /// Token embeddings: small init so a fresh model is near-uniform.
    Embedding,
    /// Positional and language embeddings: unit-scale init
    /// (std = dim^-1/2) so position and language are visible to
    /// attention from the first step, on par with unit-norm token rows
    /// loaded from aligned embeddings.
    StructuralEmbedding,
    Weight,
    Bias,
    NormGain,
    NormBias,
}

/// Offsets of one attention block (its pre-norm plus q/k/v/o
/// projections).
#[derive(Debug, Clone, Copy)]
pub struct AttnOffsets {
    pub ln_gamma: usize,
    pub ln_beta: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

/// Offsets of one feed-forward block (its pre-norm plus both linears).
#[derive(Debug, Clone, Copy)]
pub struct FfnOffsets {
    pub ln_gamma: usize,
    pub ln_beta: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EncLayerOffsets {
    pub attn: AttnOffsets,
    pub ffn: FfnOffsets,
}

#[derive(Debug, Clone, Copy)]
pub struct DecLayerOffsets {
    pub self_attn: AttnOffsets,
    pub cross_attn: AttnOffsets,
    pub ffn: FfnOffsets,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub groups: Vec<GroupSpec>,
    pub total: usize,
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub lang_emb: usize,
    pub enc: Vec<EncLayerOffsets>,
    pub dec: Vec<DecLayerOffsets>,
    pub enc_ln_gamma: usize,
    pub enc_ln_beta: usize,
    pub dec_ln_gamma: usize,
    pub dec_ln_beta: usize,
}

struct LayoutBuilder {
    groups: Vec<GroupSpec>,
    cursor: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, len: usize, kind: GroupKind, shape: (usize, usize)) -> usize {
        let offset = self.cursor;
        self.groups.push(GroupSpec {
            name,
            offset,
            len,
            kind,
            shape,
        });
        self.cursor += len;
        offset
    }

    fn attn(&mut self, prefix: &str, dim: usize) -> AttnOffsets {
        AttnOffsets {
            ln_gamma: self.push(format!("{prefix}.ln.gamma"), dim, GroupKind::NormGain, (1, dim)),
            ln_beta: self.push(format!("{prefix}.ln.beta"), dim, GroupKind::NormBias, (1, dim)),
            wq: self.push(format!("{prefix}.wq"), dim * dim, GroupKind::Weight, (dim, dim)),
            bq: self.push(format!("{prefix}.bq"), dim, GroupKind::Bias, (1, dim)),
            wk: self.push(format!("{prefix}.wk"), dim * dim, GroupKind::Weight, (dim, dim)),
            bk: self.push(format!("{prefix}.bk"), dim, GroupKind::Bias, (1, dim)),
            wv: self.push(format!("{prefix}.wv"), dim * dim, GroupKind::Weight, (dim, dim)),
            bv: self.push(format!("{prefix}.bv"), dim, GroupKind::Bias, (1, dim)),
            wo: self.push(format!("{prefix}.wo"), dim * dim, GroupKind::Weight, (dim, dim)),
            bo: self.push(format!("{prefix}.bo"), dim, GroupKind::Bias, (1, dim)),
        }
    }

    fn ffn(&mut self, prefix: &str, dim: usize, ffn_dim: usize) -> FfnOffsets {
        FfnOffsets {
            ln_gamma: self.push(format!("{prefix}.ln.gamma"), dim, GroupKind::NormGain, (1, dim)),
            ln_beta: self.push(format!("{prefix}.ln.beta"), dim, GroupKind::NormBias, (1, dim)),
            w1: self.push(
                format!("{prefix}.w1"),
                dim * ffn_dim,
                GroupKind::Weight,
                (dim, ffn_dim),
            ),
            b1: self.push(format!("{prefix}.b1"), ffn_dim, GroupKind::Bias, (1, ffn_dim)),
            w2: self.push(
                format!("{prefix}.w2"),
                ffn_dim * dim,
                GroupKind::Weight,
                (ffn_dim, dim),
            ),
            b2: self.push(format!("{prefix}.b2"), dim, GroupKind::Bias, (1, dim)),
        }
    }
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let d = config.model_dim;
        let mut b = LayoutBuilder {
            groups: Vec::new(),
            cursor: 0,
        };
        let tok_emb = b.push(
            "tok_emb".into(),
            config.vocab_size * d,
            GroupKind::Embedding,
            (config.vocab_size, d),
        );
        let pos_emb = b.push(
            "pos_emb".into(),
            config.positions() * d,
            GroupKind::StructuralEmbedding,
            (config.positions(), d),
        );
        let lang_emb = b.push(
            "lang_emb".into(),
            config.num_languages * d,
            GroupKind::StructuralEmbedding,
            (config.num_languages, d),
        );
        let enc = (0..config.layers)
            .map(|i| EncLayerOffsets {
                attn: b.attn(&format!("enc{i}.attn"), d),
                ffn: b.ffn(&format!("enc{i}.ffn"), d, config.ffn_dim),
            })
            .collect();
        let dec = (0..config.layers)
            .map(|i| DecLayerOffsets {
                self_attn: b.attn(&format!("dec{i}.self"), d),
                cross_attn: b.attn(&format!("dec{i}.cross"), d),
                ffn: b.ffn(&format!("dec{i}.ffn"), d, config.ffn_dim),
            })
            .collect();
        let enc_ln_gamma = b.push("enc_ln.gamma".into(), d, GroupKind::NormGain, (1, d));
        let enc_ln_beta = b.push("enc_ln.beta".into(), d, GroupKind::NormBias, (1, d));
        let dec_ln_gamma = b.push("dec_ln.gamma".into(), d, GroupKind::NormGain, (1, d));
        let dec_ln_beta = b.push("dec_ln.beta".into(), d, GroupKind::NormBias, (1, d));
        ParamLayout {
            total: b.cursor,
            groups: b.groups,
            tok_emb,
            pos_emb,
            lang_emb,
            enc,
            dec,
            enc_ln_gamma,
            enc_ln_beta,
            dec_ln_gamma,
            dec_ln_beta,
        }
    }

    /// Fresh parameter vector: normal embeddings, Xavier-uniform weights,
    /// zero biases, unit norm gains. Deterministic given the seed.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut params = vec![0.0f64; self.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("init normal");
        for g in &self.groups {
            let slice = &mut params[g.offset..g.offset + g.len];
            match g.kind {
                GroupKind::Embedding => {
                    for x in slice.iter_mut() {
                        *x = normal.sample(&mut rng);
                    }
                }
                GroupKind::StructuralEmbedding => {
                    let (_, dim) = g.shape;
                    let structural = Normal::new(0.0, (dim as f64).powf(-0.5))
                        .expect("init normal");
                    for x in slice.iter_mut() {
                        *x = structural.sample(&mut rng);
                    }
                }
                GroupKind::Weight => {
                    let (fan_in, fan_out) = g.shape;
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for x in slice.iter_mut() {
                        *x = rng.random_range(-bound..bound);
                    }
                }
                GroupKind::Bias | GroupKind::NormBias => {}
                GroupKind::NormGain => slice.fill(1.0),
            }
        }
        params
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"UMTMODEL";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes `config + params` (and optional extra named f64 sections, e.g.
/// optimizer moments) as a versioned binary file. Round-trips bit-exactly.
pub fn save_checkpoint(
    path: &Path,
    config_json: &str,
    params: &[f64],
    extra: &[(&str, &[f64])],
) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = config_json.as_bytes();
    f.write_all(&(cfg.len() as u64).to_le_bytes())?;
    f.write_all(cfg)?;
    let write_section = |f: &mut fs::File, name: &str, data: &[f64]| -> std::io::Result<()> {
        let nb = name.as_bytes();
        f.write_all(&(nb.len() as u64).to_le_bytes())?;
        f.write_all(nb)?;
        f.write_all(&(data.len() as u64).to_le_bytes())?;
        let mut bytes = Vec::with_capacity(data.len() * 8);
        for x in data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        f.write_all(&bytes)
    };
    f.write_all(&(1 + extra.len() as u64).to_le_bytes())?;
    write_section(&mut f, "params", params)?;
    for (name, data) in extra {
        write_section(&mut f, name, data)?;
    }
    Ok(())
}

/// Parsed checkpoint: the config JSON plus named f64 sections.
pub struct Checkpoint {
    pub config_json: String,
    pub sections: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&[f64]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bad = |msg: &str| ModelError::BadCheckpoint {
        path: path.display().to_string(),
        reason: msg.to_string(),
    };
    let mut f = fs::File::open(path).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("wrong magic"));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf).map_err(|_| bad("truncated version"))?;
    if u32::from_le_bytes(u32buf) != CHECKPOINT_VERSION {
        return Err(bad("unsupported version"));
    }
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |f: &mut fs::File| -> Result<u64, ModelError> {
        f.read_exact(&mut u64buf).map_err(|_| bad("truncated length"))?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let cfg_len = read_u64(&mut f)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    f.read_exact(&mut cfg).map_err(|_| bad("truncated config"))?;
    let config_json = String::from_utf8(cfg).map_err(|_| bad("config not utf-8"))?;
    let n_sections = read_u64(&mut f)? as usize;
    let mut sections = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let name_len = read_u64(&mut f)? as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name).map_err(|_| bad("truncated section name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("section name not utf-8"))?;
        let data_len = read_u64(&mut f)? as usize;
        let mut bytes = vec![0u8; data_len * 8];
        f.read_exact(&mut bytes).map_err(|_| bad("truncated section data"))?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        sections.push((name, data));
    }
    Ok(Checkpoint {
        config_json,
        sections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            model_dim: 16,
            ffn_dim: 32,
            dropout: 0.1,
            max_len: 10,
            vocab_size: 23,
            num_languages: 2,
            seed: 7,
        }
    }

    #[test]
    fn layout_is_contiguous_and_complete() {
        let cfg = tiny_config();
        let layout = ParamLayout::new(&cfg);
        let mut cursor = 0;
        for g in &layout.groups {
            assert_eq!(g.offset, cursor, "group {} not contiguous", g.name);
            cursor += g.len;
        }
        assert_eq!(cursor, layout.total);
        assert_eq!(layout.enc.len(), cfg.layers);
        assert_eq!(layout.dec.len(), cfg.layers);
    }

    #[test]
    fn init_is_deterministic() {
        let layout = ParamLayout::new(&tiny_config());
        let a = layout.init_params(3);
        let b = layout.init_params(3);
        let c = layout.init_params(4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        // norm gains start at one
        let gain = &a[layout.enc_ln_gamma..layout.enc_ln_gamma + 16];
        assert!(gain.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let layout = ParamLayout::new(&tiny_config());
        let params = layout.init_params(11);
        let moments: Vec<f64> = params.iter().map(|x| x * 0.5 + 1e-17).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, "{\"v\":1}", &params, &[("adam_m", &moments)]).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.config_json, "{\"v\":1}");
        let bits = |v: &[f64]| -> Vec<u64> { v.iter().map(|x| x.to_bits()).collect() };
        assert_eq!(bits(ck.section("params").unwrap()), bits(&params));
        assert_eq!(bits(ck.section("adam_m").unwrap()), bits(&moments));
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::BadCheckpoint { .. })
        ));
    }
}
