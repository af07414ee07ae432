//! Competence-based phased dataloading.
//!
//! A phase snapshots the competence `c(t)`, collects every sentence with
//! normalized difficulty `<= c(t)`, groups them into shuffled token-capped
//! batches, and serves each batch exactly once. When the phase is used
//! up, the next one starts at the then-current step. Competence is frozen
//! for the lifetime of a phase.

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::difficulty::DifficultyTable;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("no sentence has difficulty <= competence {competence}")]
    EmptyEligibleSet { competence: f64 },
    #[error("invalid schedule: {0}")]
    BadSchedule(String),
}

/// The competence curve `c(t) = min(1, (t/T (1 - c0^p) + c0^p)^(1/p))`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CompetenceSchedule {
    /// Initial competence in `(0, 1]`.
    pub c0: f64,
    /// Curve exponent, `>= 1`.
    pub p: f64,
    /// Step at which the whole corpus becomes available.
    pub duration: usize,
}

impl CompetenceSchedule {
    pub fn new(c0: f64, p: f64, duration: usize) -> Result<Self, SchedulerError> {
        if !(c0 > 0.0 && c0 <= 1.0) {
            return Err(SchedulerError::BadSchedule(format!(
                "c0 must be in (0, 1], got {c0}"
            )));
        }
        if p < 1.0 {
            return Err(SchedulerError::BadSchedule(format!(
                "p must be >= 1, got {p}"
            )));
        }
        if duration < 1 {
            return Err(SchedulerError::BadSchedule("duration must be >= 1".into()));
        }
        Ok(CompetenceSchedule { c0, p, duration })
    }

    /// Competence at step `t`. Exactly `c0` at `t = 0` and exactly 1 for
    /// `t >= duration`.
    pub fn competence(&self, t: usize) -> f64 {
        if t == 0 {
            return self.c0;
        }
        if t >= self.duration {
            return 1.0;
        }
        let c0p = self.c0.powf(self.p);
        let inner = t as f64 / self.duration as f64 * (1.0 - c0p) + c0p;
        inner.powf(1.0 / self.p).min(1.0)
    }
}

/// One pass over the currently eligible sentences at a frozen competence.
#[derive(Debug, Clone)]
pub struct Phase {
    /// Competence value the phase was opened at.
    pub competence: f64,
    /// Step the phase was opened at.
    pub start_step: usize,
    /// Eligible sentence indices (ascending).
    pub eligible: Vec<usize>,
    batches: Vec<Vec<usize>>,
    cursor: usize,
}

impl Phase {
    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }

    pub fn batches(&self) -> &[Vec<usize>] {
        &self.batches
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn exhausted(&self) -> bool {
        self.cursor >= self.batches.len()
    }
}

/// Opens a phase at step `t`: selects sentences with normalized
/// difficulty `<= c(t)`, shuffles them, greedily fills token-capped
/// batches, and shuffles the batch order. Deterministic given `seed`.
pub fn start_phase(
    t: usize,
    schedule: &CompetenceSchedule,
    table: &DifficultyTable,
    lengths: &[usize],
    batch_tokens: usize,
    seed: u64,
) -> Result<Phase, SchedulerError> {
    assert_eq!(table.normalized.len(), lengths.len());
    let competence = schedule.competence(t);
    let eligible: Vec<usize> = table
        .normalized
        .iter()
        .enumerate()
        .filter(|(_, d)| **d <= competence)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(SchedulerError::EmptyEligibleSet { competence });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = eligible.clone();
    order.shuffle(&mut rng);

    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_tokens = 0usize;
    for idx in order {
        let len = lengths[idx];
        if len > batch_tokens {
            // oversize sentence: its own singleton batch
            if !current.is_empty() {
                batches.push(std::mem::take(&mut current));
                current_tokens = 0;
            }
            batches.push(vec![idx]);
            continue;
        }
        if current_tokens + len > batch_tokens && !current.is_empty() {
            batches.push(std::mem::take(&mut current));
            current_tokens = 0;
        }
        current.push(idx);
        current_tokens += len;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);

    Ok(Phase {
        competence,
        start_step: t,
        eligible,
        batches,
        cursor: 0,
    })
}

/// Phase-transition record, one per opened phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseEvent {
    pub step: usize,
    pub competence: f64,
    pub eligible_count: usize,
}

/// Serves token-capped batches under the competence schedule,
/// transparently rolling over to a new phase when the current one is
/// exhausted.
#[derive(Debug, Clone)]
pub struct CurriculumLoader {
    schedule: CompetenceSchedule,
    table: DifficultyTable,
    lengths: Vec<usize>,
    batch_tokens: usize,
    base_seed: u64,
    phase: Option<Phase>,
    phases_started: usize,
    events: Vec<PhaseEvent>,
}

impl CurriculumLoader {
    pub fn new(
        schedule: CompetenceSchedule,
        table: DifficultyTable,
        lengths: Vec<usize>,
        batch_tokens: usize,
        base_seed: u64,
    ) -> Self {
        assert_eq!(table.normalized.len(), lengths.len());
        assert!(batch_tokens > 0);
        CurriculumLoader {
            schedule,
            table,
            lengths,
            batch_tokens,
            base_seed,
            phase: None,
            phases_started: 0,
            events: Vec::new(),
        }
    }

    pub fn table(&self) -> &DifficultyTable {
        &self.table
    }

    pub fn schedule(&self) -> &CompetenceSchedule {
        &self.schedule
    }

    /// Competence of the phase the next batch will come from.
    pub fn current_competence(&self, t: usize) -> f64 {
        match &self.phase {
            Some(p) if !p.exhausted() => p.competence,
            _ => self.schedule.competence(t),
        }
    }

    pub fn events(&self) -> &[PhaseEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<PhaseEvent> {
        std::mem::take(&mut self.events)
    }

    /// Phase index and batch cursor, for checkpointing.
    pub fn position(&self) -> (usize, usize) {
        (
            self.phases_started,
            self.phase.as_ref().map(|p| p.cursor).unwrap_or(0),
        )
    }

    /// Restores the loader to a checkpointed position. `phase_start_step`
    /// is the step the interrupted phase was opened at.
    pub fn restore(
        &mut self,
        phases_started: usize,
        cursor: usize,
        phase_start_step: usize,
    ) -> Result<(), SchedulerError> {
        self.phases_started = phases_started;
        self.phase = None;
        self.events.clear();
        if phases_started > 0 {
            let seed = self.phase_seed(phases_started - 1);
            let mut phase = start_phase(
                phase_start_step,
                &self.schedule,
                &self.table,
                &self.lengths,
                self.batch_tokens,
                seed,
            )?;
            phase.cursor = cursor;
            self.phase = Some(phase);
        }
        Ok(())
    }

    pub fn current_phase(&self) -> Option<&Phase> {
        self.phase.as_ref()
    }

    fn phase_seed(&self, phase_index: usize) -> u64 {
        // distinct stream per phase, stable across resumes
        self.base_seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(phase_index as u64)
    }

    /// Returns the next batch of sentence indices. Starts a new phase at
    /// the current step when the previous one is used up.
    pub fn next_batch(&mut self, t: usize) -> Result<Vec<usize>, SchedulerError> {
        if self.phase.as_ref().is_none_or(|p| p.exhausted()) {
            let seed = self.phase_seed(self.phases_started);
            let phase = start_phase(
                t,
                &self.schedule,
                &self.table,
                &self.lengths,
                self.batch_tokens,
                seed,
            )?;
            self.events.push(PhaseEvent {
                step: t,
                competence: phase.competence,
                eligible_count: phase.eligible.len(),
            });
            self.phases_started += 1;
            self.phase = Some(phase);
        }
        let phase = self.phase.as_mut().expect("phase just ensured");
        let batch = phase.batches[phase.cursor].clone();
        phase.cursor += 1;
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::difficulty::DifficultyCriterion;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn table(normalized: Vec<f64>) -> DifficultyTable {
        DifficultyTable {
            criterion: DifficultyCriterion::Length,
            raw: normalized.clone(),
            normalized,
        }
    }

    #[test]
    fn competence_boundaries_are_exact() {
        let s = CompetenceSchedule::new(0.01, 2.0, 1000).unwrap();
        assert_eq!(s.competence(0), 0.01);
        assert_eq!(s.competence(1000), 1.0);
        assert_eq!(s.competence(5000), 1.0);
    }

    #[test]
    fn competence_midpoint_matches_direct_evaluation() {
        let s = CompetenceSchedule::new(0.01, 2.0, 1000).unwrap();
        let got = s.competence(500);
        let expect = (0.5 * (1.0 - 0.0001) + 0.0001_f64).sqrt();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.707142).abs() < 1e-6);
    }

    #[test]
    fn schedule_validation() {
        assert!(CompetenceSchedule::new(0.0, 2.0, 10).is_err());
        assert!(CompetenceSchedule::new(1.5, 2.0, 10).is_err());
        assert!(CompetenceSchedule::new(0.5, 0.5, 10).is_err());
        assert!(CompetenceSchedule::new(0.5, 2.0, 0).is_err());
    }

    #[test]
    fn threshold_is_inclusive() {
        let s = CompetenceSchedule::new(0.5, 1.0, 2).unwrap();
        let t = table(vec![0.0, 0.5, 0.9]);
        let phase = start_phase(0, &s, &t, &[3, 4, 5], 100, 1).unwrap();
        // c(0) = 0.5; sentences 0 and 1 eligible (<=), 2 not
        assert_eq!(phase.eligible, vec![0, 1]);
    }

    #[test]
    fn full_competence_covers_corpus() {
        let s = CompetenceSchedule::new(0.1, 2.0, 10).unwrap();
        let t = table(vec![0.0, 0.3, 0.7, 1.0]);
        let phase = start_phase(10, &s, &t, &[2, 2, 2, 2], 100, 9).unwrap();
        assert_eq!(phase.eligible, vec![0, 1, 2, 3]);
    }

    #[test]
    fn empty_eligible_set_errors() {
        let s = CompetenceSchedule::new(0.05, 2.0, 10).unwrap();
        let t = table(vec![0.4, 0.9]);
        assert!(matches!(
            start_phase(0, &s, &t, &[2, 2], 100, 0),
            Err(SchedulerError::EmptyEligibleSet { .. })
        ));
    }

    #[test]
    fn batches_partition_eligible_and_respect_cap() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 200;
        let norm: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let lengths: Vec<usize> = (0..n).map(|_| rng.random_range(1..=20)).collect();
        let s = CompetenceSchedule::new(0.5, 2.0, 100).unwrap();
        let t = table(norm.clone());
        let cap = 50;
        let phase = start_phase(30, &s, &t, &lengths, cap, 123).unwrap();
        let mut served: Vec<usize> = Vec::new();
        for b in phase.batches() {
            let toks: usize = b.iter().map(|&i| lengths[i]).sum();
            assert!(
                toks <= cap || b.len() == 1,
                "batch over cap must be a singleton"
            );
            for &i in b {
                assert!(norm[i] <= phase.competence);
            }
            served.extend_from_slice(b);
        }
        served.sort_unstable();
        assert_eq!(served, phase.eligible, "exact coverage, no duplicates");
    }

    #[test]
    fn oversize_sentence_forms_singleton() {
        let s = CompetenceSchedule::new(1.0, 2.0, 1).unwrap();
        let t = table(vec![0.0, 0.0, 0.0]);
        let phase = start_phase(0, &s, &t, &[200, 3, 4], 100, 5).unwrap();
        let singleton = phase
            .batches()
            .iter()
            .find(|b| b.contains(&0))
            .expect("sentence 0 served");
        assert_eq!(singleton.len(), 1);
    }

    #[test]
    fn loader_serves_each_batch_once_then_rephases() {
        let s = CompetenceSchedule::new(1.0, 2.0, 1).unwrap();
        let t = table(vec![0.0, 0.2, 0.4, 0.6]);
        let mut loader = CurriculumLoader::new(s, t, vec![2, 2, 2, 2], 4, 99);
        let n_batches = 2; // 4 sentences of length 2, cap 4
        let mut first_phase: Vec<Vec<usize>> = Vec::new();
        for _ in 0..n_batches {
            first_phase.push(loader.next_batch(0).unwrap());
        }
        let mut seen: Vec<usize> = first_phase.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        // next call rolls into a fresh phase
        let _ = loader.next_batch(5).unwrap();
        assert_eq!(loader.events().len(), 2);
    }

    #[test]
    fn loader_is_deterministic_and_restorable() {
        let s = CompetenceSchedule::new(0.3, 2.0, 50).unwrap();
        let norm: Vec<f64> = (0..40).map(|i| i as f64 / 39.0).collect();
        let lengths = vec![3usize; 40];
        let mk = || CurriculumLoader::new(s, table(norm.clone()), lengths.clone(), 9, 4242);

        let mut a = mk();
        let mut b = mk();
        for t in 0..30 {
            assert_eq!(a.next_batch(t).unwrap(), b.next_batch(t).unwrap());
        }

        // replay first 10 on a fresh loader, checkpoint, restore, compare
        let mut c = mk();
        let mut reference = mk();
        let mut phase_start = 0usize;
        for t in 0..10 {
            if c.current_phase().map(|p| p.exhausted()).unwrap_or(true) {
                phase_start = t;
            }
            let _ = c.next_batch(t).unwrap();
            let _ = reference.next_batch(t).unwrap();
        }
        let (phases, cursor) = c.position();
        let mut restored = mk();
        restored.restore(phases, cursor, phase_start).unwrap();
        for t in 10..25 {
            assert_eq!(
                restored.next_batch(t).unwrap(),
                reference.next_batch(t).unwrap()
            );
        }
    }

    #[test]
    fn scripted_run_respects_competence_at_t0() {
        // c0 = 0.25: the batch served at t = 0 may not contain anything
        // harder than 0.25
        let s = CompetenceSchedule::new(0.25, 2.0, 100).unwrap();
        let norm: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let mut loader = CurriculumLoader::new(s, table(norm.clone()), vec![5; 50], 25, 1);
        let batch = loader.next_batch(0).unwrap();
        for &i in &batch {
            assert!(norm[i] <= 0.25);
        }
    }

    proptest! {
        #[test]
        fn competence_is_monotone_and_bounded(
            c0 in 0.01f64..1.0,
            p in 1.0f64..4.0,
            duration in 1usize..500,
        ) {
            let s = CompetenceSchedule::new(c0, p, duration).unwrap();
            let mut prev = 0.0;
            for t in 0..=duration + 10 {
                let c = s.competence(t);
                prop_assert!(c >= prev - 1e-15);
                prop_assert!(c >= c0 - 1e-15 && c <= 1.0);
                prev = c;
            }
        }
    }
}
