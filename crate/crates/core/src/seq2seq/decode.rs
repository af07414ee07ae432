//! Autoregressive decoding: greedy argmax and length-normalized beam
//! search over the KV-cached incremental decoder.
//!
//! The beam core is generic over a decoding state and an
//! `advance(state, token) -> (state, next log-probs)` closure, so the
//! search rule can be tested against exhaustive enumeration with
//! hand-set scores. Finished hypotheses are ranked by
//! `sum_logprob / steps^length_penalty`, where `steps` counts every
//! emission including the end symbol.

use crate::corpus::{BOS, EOS, Sentence, TokenId};

use super::{DropoutMode, Model, ModelError};

/// Beam search settings.
#[derive(Debug, Clone, Copy)]
pub struct BeamParams {
    pub beam_size: usize,
    pub length_penalty: f64,
    /// Hard cap on emitted tokens (the end symbol counts as one step).
    pub max_len: usize,
}

struct Hypothesis<S> {
    tokens: Sentence,
    sum_logprob: f64,
    state: S,
    next_logprobs: Vec<f64>,
}

fn normalized(score: f64, steps: usize, length_penalty: f64) -> f64 {
    score / (steps as f64).powf(length_penalty)
}

fn argmax(logprobs: &[f64]) -> TokenId {
    logprobs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(tok, _)| tok)
        .expect("non-empty vocabulary")
}

/// Length-normalized beam search over an arbitrary stepping rule.
///
/// `init` is the state after consuming the start symbol together with
/// the first next-token log-probs; `advance` extends a state by one
/// emitted token. A finished candidate closes its beam slot (which makes
/// `beam_size = 1` coincide with greedy decoding). Returns the best
/// finished sequence without its end symbol; hypotheses still alive at
/// `max_len` compete with their truncated scores.
pub fn beam_search_core<S, A>(init: (S, Vec<f64>), advance: A, params: &BeamParams) -> Sentence
where
    A: Fn(&S, TokenId) -> (S, Vec<f64>),
{
    assert!(params.beam_size >= 1, "beam_size must be >= 1");
    let (state0, lp0) = init;
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        sum_logprob: 0.0,
        state: state0,
        next_logprobs: lp0,
    }];
    let mut done: Vec<(Sentence, f64)> = Vec::new();

    for _ in 0..params.max_len {
        let mut candidates: Vec<(usize, TokenId, f64)> = Vec::new();
        for (i, hyp) in alive.iter().enumerate() {
            for (tok, lp) in hyp.next_logprobs.iter().enumerate() {
                candidates.push((i, tok, hyp.sum_logprob + lp));
            }
        }
        // highest joint log-prob first; ties break toward earlier beams
        // and lower token ids for determinism
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap()
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });

        let mut next_alive: Vec<Hypothesis<S>> = Vec::with_capacity(params.beam_size);
        for &(i, tok, score) in candidates.iter().take(params.beam_size) {
            if tok == EOS {
                // steps include this end emission
                let steps = alive[i].tokens.len() + 1;
                done.push((
                    alive[i].tokens.clone(),
                    normalized(score, steps, params.length_penalty),
                ));
            } else {
                let (state, next_logprobs) = advance(&alive[i].state, tok);
                let mut tokens = alive[i].tokens.clone();
                tokens.push(tok);
                next_alive.push(Hypothesis {
                    tokens,
                    sum_logprob: score,
                    state,
                    next_logprobs,
                });
            }
        }
        alive = next_alive;
        if alive.is_empty() {
            break;
        }
    }
    // anything still alive competes with its truncated score
    for hyp in alive {
        let steps = hyp.tokens.len().max(1);
        done.push((
            hyp.tokens,
            normalized(hyp.sum_logprob, steps, params.length_penalty),
        ));
    }
    done.into_iter()
        .max_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .unwrap()
                .then(b.0.len().cmp(&a.0.len()))
        })
        .map(|(tokens, _)| tokens)
        .unwrap_or_default()
}

impl Model {
    /// Greedy argmax decoding in inference mode. The output excludes the
    /// start and end symbols; an immediately finished decode yields a
    /// single end symbol.
    pub fn greedy_translate(
        &self,
        sentence: &[TokenId],
        src_lang: usize,
        tgt_lang: usize,
        max_len: usize,
    ) -> Result<Sentence, ModelError> {
        let enc = self.encode(sentence, src_lang, DropoutMode::Off, false)?;
        let dec = self.incremental_decoder(&enc, tgt_lang);
        let mut state = dec.start();
        let mut logprobs = dec.advance(&mut state, BOS);
        let mut out: Sentence = Vec::new();
        for _ in 0..max_len {
            let best = argmax(&logprobs);
            if best == EOS {
                break;
            }
            out.push(best);
            if out.len() >= max_len {
                break;
            }
            logprobs = dec.advance(&mut state, best);
        }
        if out.is_empty() {
            out.push(EOS);
        }
        Ok(out)
    }

    /// Length-normalized beam search; `beam_size = 1` matches
    /// [`Model::greedy_translate`].
    pub fn beam_translate(
        &self,
        sentence: &[TokenId],
        src_lang: usize,
        tgt_lang: usize,
        beam_size: usize,
        length_penalty: f64,
        max_len: usize,
    ) -> Result<Sentence, ModelError> {
        let enc = self.encode(sentence, src_lang, DropoutMode::Off, false)?;
        let dec = self.incremental_decoder(&enc, tgt_lang);
        let params = BeamParams {
            beam_size,
            length_penalty,
            max_len,
        };
        let init = {
            let mut state = dec.start();
            let lp = dec.advance(&mut state, BOS);
            (state, lp)
        };
        let mut out = beam_search_core(
            init,
            |state, tok| {
                let mut next = state.clone();
                let lp = dec.advance(&mut next, tok);
                (next, lp)
            },
            &params,
        );
        if out.is_empty() {
            out.push(EOS);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A fixed scoring table keyed by prefix length; the "state" is just
    /// the prefix.
    fn table_init(table: &[Vec<f64>]) -> (Sentence, Vec<f64>) {
        (Vec::new(), table[0].clone())
    }

    fn table_advance(table: &[Vec<f64>]) -> impl Fn(&Sentence, TokenId) -> (Sentence, Vec<f64>) + '_ {
        move |prefix: &Sentence, tok: TokenId| {
            let mut next = prefix.clone();
            next.push(tok);
            let lp = table[next.len().min(table.len() - 1)].clone();
            (next, lp)
        }
    }

    /// Exhaustive search over all terminated sequences up to max_len.
    fn exhaustive_best(table: &[Vec<f64>], vocab: usize, params: &BeamParams) -> (Sentence, f64) {
        fn consider(
            best: &mut Option<(Sentence, f64)>,
            tokens: Sentence,
            score: f64,
            steps: usize,
            length_penalty: f64,
        ) {
            let norm = normalized(score, steps.max(1), length_penalty);
            if best.as_ref().is_none_or(|(_, b)| norm > *b) {
                *best = Some((tokens, norm));
            }
        }
        fn walk(
            table: &[Vec<f64>],
            vocab: usize,
            max_len: usize,
            prefix: &mut Sentence,
            sum: f64,
            best: &mut Option<(Sentence, f64)>,
            length_penalty: f64,
        ) {
            if prefix.len() >= max_len {
                consider(best, prefix.clone(), sum, prefix.len(), length_penalty);
                return;
            }
            let lps = &table[prefix.len().min(table.len() - 1)];
            for tok in 0..vocab {
                if tok == EOS {
                    consider(
                        best,
                        prefix.clone(),
                        sum + lps[tok],
                        prefix.len() + 1,
                        length_penalty,
                    );
                } else {
                    prefix.push(tok);
                    walk(
                        table,
                        vocab,
                        max_len,
                        prefix,
                        sum + lps[tok],
                        best,
                        length_penalty,
                    );
                    prefix.pop();
                }
            }
        }
        let mut best = None;
        let mut prefix = Vec::new();
        walk(
            table,
            vocab,
            params.max_len,
            &mut prefix,
            0.0,
            &mut best,
            params.length_penalty,
        );
        best.unwrap()
    }

    #[test]
    fn beam_matches_exhaustive_enumeration() {
        // 5-token vocab (EOS = 3), three steps of hand-set log-probs
        let table = vec![
            vec![-1.2, -0.4, -3.0, -2.5, -1.0],
            vec![-0.9, -1.8, -0.2, -1.1, -2.2],
            vec![-2.0, -0.3, -1.4, -0.6, -0.8],
            vec![-1.0, -1.0, -1.0, -0.1, -1.0],
        ];
        for lp in [0.5, 1.0, 1.5] {
            let params = BeamParams {
                beam_size: 5usize.pow(3),
                length_penalty: lp,
                max_len: 3,
            };
            let got = beam_search_core(table_init(&table), table_advance(&table), &params);
            let (want, _) = exhaustive_best(&table, 5, &params);
            assert_eq!(got, want, "length_penalty {lp}");
        }
    }

    #[test]
    fn length_penalty_breaks_constructed_tie() {
        // Emitting token 0 (lp -0.6) then EOS (-0.1) totals -0.7 over 2
        // steps; immediate EOS scores -0.65 over 1 step. Mean-normalized
        // (penalty 1) the longer hypothesis wins; unnormalized (penalty
        // 0) the short one wins.
        let table = vec![
            vec![-0.6, -9.0, -9.0, -0.65, -9.0],
            vec![-9.0, -9.0, -9.0, -0.1, -9.0],
        ];
        let long = beam_search_core(
            table_init(&table),
            table_advance(&table),
            &BeamParams {
                beam_size: 8,
                length_penalty: 1.0,
                max_len: 4,
            },
        );
        assert_eq!(long, vec![0]);
        let short = beam_search_core(
            table_init(&table),
            table_advance(&table),
            &BeamParams {
                beam_size: 8,
                length_penalty: 0.0,
                max_len: 4,
            },
        );
        assert_eq!(short, Vec::<TokenId>::new());
    }

    #[test]
    fn beam_one_is_greedy_on_a_table() {
        let table = vec![
            vec![-0.5, -1.0, -2.0, -3.0],
            vec![-2.0, -0.1, -1.0, -0.4],
            vec![-1.0, -1.0, -1.0, -0.05],
        ];
        let got = beam_search_core(
            table_init(&table),
            table_advance(&table),
            &BeamParams {
                beam_size: 1,
                length_penalty: 1.0,
                max_len: 3,
            },
        );
        // greedy walk: argmax per step until EOS (= id 3)
        let mut want: Sentence = Vec::new();
        while want.len() < 3 {
            let lps = &table[want.len().min(table.len() - 1)];
            let best = argmax(lps);
            if best == EOS {
                break;
            }
            want.push(best);
        }
        assert_eq!(got, want);
    }
}
