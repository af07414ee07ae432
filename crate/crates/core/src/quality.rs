//! Fine-grained pseudo-bitext quality estimation and loss-weight
//! assembly.
//!
//! Three estimator families produce raw per-token and per-sentence
//! scores, all oriented so that higher means better:
//!
//! * **CP** — encoder hidden-state cosines between the training target
//!   and its on-the-fly translation: greedy token matching ([`ttq`]) and
//!   mean-state cosine ([`stq`]).
//! * **JS** — agreement of two dropout-perturbed force-decoding passes,
//!   converted to a confidence `1 - JS/ln 2` ([`js_scores`]).
//! * **VAR** — variance of the gold-token probability across several
//!   dropout passes, inverted into a confidence ([`var_scores`]).
//!
//! Raw scores are raised to the `k`-th power and softmax-normalized into
//! per-token weights `alpha` (summing to 1 within a sentence) and
//! per-sentence weights `beta` (summing to 1 over the batch).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::fmt;

#[derive(Debug, Error)]
pub enum QualityError {
    #[error("distribution pass lengths differ: {a} vs {b}")]
    PassLengthMismatch { a: usize, b: usize },
    #[error("need at least 2 passes, got {0}")]
    TooFewPasses(usize),
    #[error("weight/loss length mismatch: {weights} weights, {losses} losses")]
    WeightLengthMismatch { weights: usize, losses: usize },
}

/// Which quality estimator feeds the loss weights of a training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// Uniform weights: reproduces the unweighted objective exactly.
    None,
    /// Encoder hidden-state cosines (TTQ + STQ). Needs a hypothesis, so
    /// it only applies to back-translation steps.
    Cp,
    /// Two-pass dropout agreement.
    Js,
    /// Multi-pass gold-probability variance.
    Var,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Estimator::None => "none",
            Estimator::Cp => "cp",
            Estimator::Js => "js",
            Estimator::Var => "var",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Estimator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Estimator::None),
            "cp" => Ok(Estimator::Cp),
            "js" => Ok(Estimator::Js),
            "var" => Ok(Estimator::Var),
            other => Err(format!("unknown estimator {other:?}")),
        }
    }
}

/// Estimator hyper-parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Power applied to raw quality scores before softmax.
    pub k: u32,
    /// Forward passes for the VAR estimator.
    pub q_passes: usize,
    /// Token-level weighting on/off (off: uniform alpha).
    pub use_ttq: bool,
    /// Sentence-level weighting on/off (off: uniform beta).
    pub use_stq: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            k: 2,
            q_passes: 5,
            use_ttq: true,
            use_stq: true,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k < 1 {
            return Err("k must be >= 1".into());
        }
        if self.q_passes < 2 {
            return Err("q_passes must be >= 2".into());
        }
        Ok(())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

/// Clamp to [0, 1] then raise to the k-th power. Negative cosines clamp
/// to zero so that even powers cannot invert the quality ordering.
fn powered(w: f64, k: u32) -> f64 {
    w.clamp(0.0, 1.0).powi(k as i32)
}

/// Token-level translation quality: each source token greedily matches
/// its most similar hypothesis token by hidden-state cosine; the score is
/// the clamped cosine to the k-th power. Zero-norm vectors count as
/// cosine 0.
pub fn ttq(src_hidden: &[Vec<f64>], hyp_hidden: &[Vec<f64>], k: u32) -> Vec<f64> {
    assert!(!src_hidden.is_empty() && !hyp_hidden.is_empty());
    src_hidden
        .iter()
        .map(|h| {
            let best = hyp_hidden
                .iter()
                .map(|g| cosine(h, g).unwrap_or(0.0))
                .fold(f64::NEG_INFINITY, f64::max);
            powered(best, k)
        })
        .collect()
}

/// Sentence-level translation quality: cosine of the token-mean hidden
/// states, clamped and raised to the k-th power.
pub fn stq(src_hidden: &[Vec<f64>], hyp_hidden: &[Vec<f64>], k: u32) -> f64 {
    assert!(!src_hidden.is_empty() && !hyp_hidden.is_empty());
    let mean = |hs: &[Vec<f64>]| -> Vec<f64> {
        let dim = hs[0].len();
        let mut m = vec![0.0; dim];
        for h in hs {
            for (a, b) in m.iter_mut().zip(h) {
                *a += b;
            }
        }
        let n = hs.len() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    };
    let u = cosine(&mean(src_hidden), &mean(hyp_hidden)).unwrap_or(0.0);
    powered(u, k)
}

/// Jensen-Shannon divergence with natural logarithms:
/// `JS(p||q) = KL(p||r)/2 + KL(q||r)/2` with `r = (p+q)/2`.
/// Bounded by `ln 2` for probability distributions.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let r = 0.5 * (a + b);
        if a > 0.0 {
            kl_p += a * (a / r).ln();
        }
        if b > 0.0 {
            kl_q += b * (b / r).ln();
        }
    }
    0.5 * kl_p + 0.5 * kl_q
}

/// Two-pass JS confidence scores.
///
/// Per step, the JS divergence of the two dropout passes is mapped to a
/// confidence `1 - JS/ln 2` in `[0, 1]` (agreement earns weight, not
/// divergence), then raised to the k-th power. The sentence score is the
/// mean confidence to the k-th power.
pub fn js_scores(
    pass1: &[Vec<f64>],
    pass2: &[Vec<f64>],
    k: u32,
) -> Result<(Vec<f64>, f64), QualityError> {
    if pass1.len() != pass2.len() {
        return Err(QualityError::PassLengthMismatch {
            a: pass1.len(),
            b: pass2.len(),
        });
    }
    let ln2 = std::f64::consts::LN_2;
    let confs: Vec<f64> = pass1
        .iter()
        .zip(pass2)
        .map(|(p, q)| (1.0 - js_divergence(p, q) / ln2).clamp(0.0, 1.0))
        .collect();
    let token_scores: Vec<f64> = confs.iter().map(|&c| powered(c, k)).collect();
    let mean_conf = confs.iter().sum::<f64>() / confs.len().max(1) as f64;
    Ok((token_scores, powered(mean_conf, k)))
}

/// Multi-pass variance confidence scores.
///
/// Per step, the population variance of the gold-token probability
/// across passes is normalized by the largest variance in the sentence
/// and inverted (`1 - var/max_var`); an all-zero-variance sentence gets
/// confidence 1 everywhere. Scores are raised to the k-th power;
/// sentence score is mean-then-power.
pub fn var_scores(
    passes: &[Vec<Vec<f64>>],
    gold: &[usize],
    k: u32,
) -> Result<(Vec<f64>, f64), QualityError> {
    if passes.len() < 2 {
        return Err(QualityError::TooFewPasses(passes.len()));
    }
    for p in passes {
        if p.len() != gold.len() {
            return Err(QualityError::PassLengthMismatch {
                a: p.len(),
                b: gold.len(),
            });
        }
    }
    let q = passes.len() as f64;
    let variances: Vec<f64> = (0..gold.len())
        .map(|j| {
            let probs: Vec<f64> = passes.iter().map(|pass| pass[j][gold[j]]).collect();
            let mean = probs.iter().sum::<f64>() / q;
            probs.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / q
        })
        .collect();
    let max_var = variances.iter().cloned().fold(0.0f64, f64::max);
    let confs: Vec<f64> = if max_var == 0.0 {
        vec![1.0; gold.len()]
    } else {
        variances.iter().map(|v| 1.0 - v / max_var).collect()
    };
    let token_scores: Vec<f64> = confs.iter().map(|&c| powered(c, k)).collect();
    let mean_conf = confs.iter().sum::<f64>() / confs.len().max(1) as f64;
    Ok((token_scores, powered(mean_conf, k)))
}

/// Shift-invariant softmax.
pub fn softmax(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|r| (r - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Per-token weights `alpha` and per-sentence weights `beta` for one
/// batch, softmax-normalized and strictly positive.
#[derive(Debug, Clone)]
pub struct QualityWeights {
    /// One weight vector per sentence; each sums to 1.
    pub alpha: Vec<Vec<f64>>,
    /// One weight per sentence; sums to 1 over the batch.
    pub beta: Vec<f64>,
    pub estimator: Estimator,
    pub k: u32,
}

impl QualityWeights {
    /// Uniform weights: `alpha = 1/n` per token, `beta = 1/M` per
    /// sentence. This is the unweighted objective.
    pub fn uniform(token_counts: &[usize], estimator: Estimator, k: u32) -> Self {
        let m = token_counts.len();
        QualityWeights {
            alpha: token_counts
                .iter()
                .map(|&n| vec![1.0 / n as f64; n])
                .collect(),
            beta: vec![1.0 / m as f64; m],
            estimator,
            k,
        }
    }

    /// Builds weights from raw scores. `None` on either side means that
    /// side is disabled and stays uniform (the w/o-TTQ and w/o-STQ
    /// ablations).
    pub fn from_raw(
        raw_alpha: Option<&[Vec<f64>]>,
        raw_beta: Option<&[f64]>,
        token_counts: &[usize],
        estimator: Estimator,
        k: u32,
    ) -> Self {
        let m = token_counts.len();
        let alpha: Vec<Vec<f64>> = match raw_alpha {
            Some(raws) => {
                assert_eq!(raws.len(), m);
                raws.iter()
                    .zip(token_counts)
                    .map(|(r, &n)| {
                        assert_eq!(r.len(), n);
                        softmax(r)
                    })
                    .collect()
            }
            None => token_counts
                .iter()
                .map(|&n| vec![1.0 / n as f64; n])
                .collect(),
        };
        let beta: Vec<f64> = match raw_beta {
            Some(r) => {
                assert_eq!(r.len(), m);
                softmax(r)
            }
            None => vec![1.0 / m as f64; m],
        };
        QualityWeights {
            alpha,
            beta,
            estimator,
            k,
        }
    }

    /// Checks the normalization invariants: each alpha row and the beta
    /// vector sum to 1 within `tol` and every weight is positive.
    pub fn check_invariants(&self, tol: f64) -> bool {
        let row_ok = |w: &[f64]| {
            let s: f64 = w.iter().sum();
            (s - 1.0).abs() <= tol && w.iter().all(|&x| x > 0.0)
        };
        self.alpha.iter().all(|a| row_ok(a)) && row_ok(&self.beta)
    }
}

/// Batch loss: the beta-weighted sum of per-sentence losses.
pub fn weighted_batch_loss(losses: &[f64], beta: &[f64]) -> Result<f64, QualityError> {
    if losses.len() != beta.len() {
        return Err(QualityError::WeightLengthMismatch {
            weights: beta.len(),
            losses: losses.len(),
        });
    }
    Ok(losses.iter().zip(beta).map(|(l, b)| b * l).sum())
}
