//! Post-hoc analyses over runs: difficulty-bucket BLEU comparisons and
//! convergence-acceleration ratios.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bleu::{self, BleuError};
use crate::corpus::TokenId;
use crate::exec::Parallelism;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("difficulty table covers {table} sentences, test set has {test}")]
    TableMismatch { table: usize, test: usize },
    #[error("system output length mismatch: {a} vs {b}")]
    SystemMismatch { a: usize, b: usize },
    #[error("num_buckets must be >= 1")]
    NoBuckets,
    #[error(transparent)]
    Bleu(#[from] BleuError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One difficulty bucket with per-system BLEU.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bucket {
    /// Lowest normalized difficulty in the bucket.
    pub lo: f64,
    /// Highest normalized difficulty in the bucket.
    pub hi: f64,
    pub count: usize,
    pub bleu_a: f64,
    pub bleu_b: f64,
    pub delta: f64,
}

/// Difficulty-percentile bucket comparison of two systems.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketReport {
    pub buckets: Vec<Bucket>,
    /// Requested buckets that were empty and merged into a neighbour.
    pub merged_empty: usize,
}

impl BucketReport {
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "bucket,lo,hi,count,bleu_a,bleu_b,delta")?;
        for (i, b) in self.buckets.iter().enumerate() {
            writeln!(
                f,
                "{i},{},{},{},{:.4},{:.4},{:.4}",
                b.lo, b.hi, b.count, b.bleu_a, b.bleu_b, b.delta
            )?;
        }
        Ok(())
    }
}

/// Splits the test set into difficulty-percentile buckets and scores two
/// systems per bucket with corpus BLEU.
///
/// Buckets partition the test set. When the test set is smaller than the
/// requested bucket count, the surplus buckets are dropped and counted in
/// `merged_empty`.
pub fn bucket_analysis(
    difficulties: &[f64],
    references: &[Vec<TokenId>],
    system_a: &[Vec<TokenId>],
    system_b: &[Vec<TokenId>],
    num_buckets: usize,
    mode: Parallelism,
) -> Result<BucketReport, AnalysisError> {
    if num_buckets == 0 {
        return Err(AnalysisError::NoBuckets);
    }
    if difficulties.len() != references.len() {
        return Err(AnalysisError::TableMismatch {
            table: difficulties.len(),
            test: references.len(),
        });
    }
    if system_a.len() != references.len() || system_b.len() != references.len() {
        return Err(AnalysisError::SystemMismatch {
            a: system_a.len(),
            b: system_b.len(),
        });
    }

    let mut order: Vec<usize> = (0..difficulties.len()).collect();
    order.sort_by(|&a, &b| {
        difficulties[a]
            .partial_cmp(&difficulties[b])
            .unwrap()
            .then(a.cmp(&b))
    });

    let n = order.len();
    let requested = num_buckets;
    let mut buckets = Vec::new();
    let mut merged_empty = 0usize;
    for b in 0..requested {
        let start = b * n / requested;
        let end = (b + 1) * n / requested;
        if start == end {
            merged_empty += 1;
            continue;
        }
        let idx = &order[start..end];
        let refs: Vec<Vec<TokenId>> = idx.iter().map(|&i| references[i].clone()).collect();
        let hyp_a: Vec<Vec<TokenId>> = idx.iter().map(|&i| system_a[i].clone()).collect();
        let hyp_b: Vec<Vec<TokenId>> = idx.iter().map(|&i| system_b[i].clone()).collect();
        let bleu_a = bleu::corpus_bleu(&hyp_a, &refs, mode)?.bleu;
        let bleu_b = bleu::corpus_bleu(&hyp_b, &refs, mode)?.bleu;
        buckets.push(Bucket {
            lo: difficulties[idx[0]],
            hi: difficulties[*idx.last().unwrap()],
            count: idx.len(),
            bleu_a,
            bleu_b,
            delta: bleu_b - bleu_a,
        });
    }
    if merged_empty > 0 {
        log::info!("bucket_analysis: {merged_empty} empty bucket(s) merged");
    }
    Ok(BucketReport {
        buckets,
        merged_empty,
    })
}

/// One validation measurement during training.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub bleu: f64,
    pub wall_seconds: f64,
}

/// Outcome of an acceleration measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Acceleration {
    /// Both arms reached the target; ratios are baseline / method.
    Reached {
        target_bleu: f64,
        baseline_step: usize,
        method_step: usize,
        step_ratio: f64,
        baseline_seconds: f64,
        method_seconds: f64,
        time_ratio: f64,
    },
    /// At least one arm never reached the target.
    NotReached {
        target_bleu: f64,
        baseline_reached: bool,
        method_reached: bool,
    },
}

fn first_reaching(series: &[EvalPoint], target: f64) -> Option<EvalPoint> {
    series.iter().copied().find(|p| p.bleu >= target)
}

/// Step and wall-time acceleration: the ratio of when the baseline first
/// reaches `target_bleu` to when the method does.
pub fn measure_acceleration(
    baseline: &[EvalPoint],
    method: &[EvalPoint],
    target_bleu: f64,
) -> Acceleration {
    match (
        first_reaching(baseline, target_bleu),
        first_reaching(method, target_bleu),
    ) {
        (Some(b), Some(m)) => Acceleration::Reached {
            target_bleu,
            baseline_step: b.step,
            method_step: m.step,
            step_ratio: b.step as f64 / m.step.max(1) as f64,
            baseline_seconds: b.wall_seconds,
            method_seconds: m.wall_seconds,
            time_ratio: b.wall_seconds / m.wall_seconds.max(1e-9),
        },
        (b, m) => Acceleration::NotReached {
            target_bleu,
            baseline_reached: b.is_some(),
            method_reached: m.is_some(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(v: &[(usize, f64)]) -> Vec<EvalPoint> {
        v.iter()
            .map(|&(step, bleu)| EvalPoint {
                step,
                bleu,
                wall_seconds: step as f64 * 0.5,
            })
            .collect()
    }

    #[test]
    fn identical_logs_give_ratio_one() {
        let log = points(&[(100, 5.0), (200, 12.0), (300, 20.0)]);
        match measure_acceleration(&log, &log, 12.0) {
            Acceleration::Reached {
                step_ratio,
                time_ratio,
                ..
            } => {
                assert_eq!(step_ratio, 1.0);
                assert_eq!(time_ratio, 1.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn table_style_ratio() {
        // baseline reaches 20 BLEU at 31k, method at 10k -> 3.1x
        let base = points(&[(10_000, 8.0), (31_000, 20.0)]);
        let ours = points(&[(10_000, 20.5)]);
        match measure_acceleration(&base, &ours, 20.0) {
            Acceleration::Reached { step_ratio, .. } => {
                assert!((step_ratio - 3.1).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unreached_target_is_explicit() {
        let base = points(&[(100, 5.0)]);
        let ours = points(&[(100, 25.0)]);
        match measure_acceleration(&base, &ours, 20.0) {
            Acceleration::NotReached {
                baseline_reached,
                method_reached,
                ..
            } => {
                assert!(!baseline_reached);
                assert!(method_reached);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn buckets_partition_the_test_set() {
        let difficulties: Vec<f64> = (0..4).map(|i| i as f64 / 3.0).collect();
        let refs: Vec<Vec<TokenId>> = (0..4).map(|i| vec![i, i + 1, i + 2, i + 3]).collect();
        let report =
            bucket_analysis(&difficulties, &refs, &refs, &refs, 2, Parallelism::Rayon).unwrap();
        assert_eq!(report.buckets.len(), 2);
        assert_eq!(report.buckets[0].count, 2);
        assert_eq!(report.buckets[1].count, 2);
        let total: usize = report.buckets.iter().map(|b| b.count).sum();
        assert_eq!(total, 4);
        for b in &report.buckets {
            assert_eq!(b.delta, 0.0, "identical systems have zero delta");
        }
    }

    #[test]
    fn surplus_buckets_are_merged() {
        let difficulties = vec![0.1, 0.9];
        let refs: Vec<Vec<TokenId>> = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]];
        let report =
            bucket_analysis(&difficulties, &refs, &refs, &refs, 5, Parallelism::Rayon).unwrap();
        assert!(report.merged_empty > 0);
        let total: usize = report.buckets.iter().map(|b| b.count).sum();
        assert_eq!(total, 2);
    }

    #[test]
    fn mismatched_inputs_error() {
        let refs: Vec<Vec<TokenId>> = vec![vec![1, 2]];
        assert!(bucket_analysis(&[0.5, 0.6], &refs, &refs, &refs, 2, Parallelism::Rayon).is_err());
        assert!(
            bucket_analysis(&[0.5], &refs, &[], &refs, 2, Parallelism::Rayon).is_err()
        );
    }
}
