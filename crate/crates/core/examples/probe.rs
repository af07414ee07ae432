// scratch probe for desk-scale convergence (deleted before release)
use unmt_core::corpus::{SyntheticPairSpec, generate_synthetic_pair};
use unmt_core::quality::Estimator;
use unmt_core::seq2seq::ModelConfig;
use unmt_core::trainer::{self, TrainConfig, Trainer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let arm = args.get(1).map(|s| s.as_str()).unwrap_or("baseline");
    let rounds: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(60);
    let dim: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);

    let pair = generate_synthetic_pair(&SyntheticPairSpec {
        vocab_size: 200,
        sentences_per_side: 5000,
        eval_size: 300,
        embed_dim: dim,
        sentence_length_range: (4, 12),
        embed_noise: 0.25,
        seed: 42,
        ..Default::default()
    })
    .unwrap();
    let data = trainer::data_from_pair(&pair).unwrap();
    let total = rounds * 4;
    let cfg = TrainConfig {
        model: ModelConfig {
            layers: 2,
            heads: 4,
            model_dim: dim,
            ffn_dim: dim * 4,
            dropout: 0.1,
            max_len: 30,
            vocab_size: pair.vocab.len(),
            num_languages: 2,
            seed: 7,
        },
        lr: args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3),
        batch_tokens: 2000,
        rounds,
        eval_every: 5,
        competence_duration: (total as f64 * 0.4) as usize,
        curriculum: arm == "full",
        ae_estimator: if arm == "full" { Estimator::Js } else { Estimator::None },
        bt_estimator: if arm == "full" { Estimator::Cp } else { Estimator::None },
        seed: 1,
        noise: unmt_core::seq2seq::NoiseConfig {
            drop_prob: args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.1),
            blank_prob: args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.1),
            shuffle_window: 3,
        },
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let mut tr = Trainer::new(cfg, data).unwrap();
    let setup = t0.elapsed();
    let t1 = std::time::Instant::now();
    for _ in 0..3 { tr.run_round().unwrap(); }
    let three_rounds = t1.elapsed();
    let t2 = std::time::Instant::now();
    tr.evaluate().unwrap();
    let one_eval = t2.elapsed();
    println!("setup {setup:.1?}; 3 rounds {three_rounds:.1?}; 1 beam-4 eval {one_eval:.1?}");
    tr.train().unwrap();
    for e in &tr.out.evals {
        println!(
            "arm {arm} round {:3} t {:4} bleu_fwd {:6.2} bleu_bwd {:6.2} wall {:6.1}s",
            e.round, e.t, e.bleu_fwd, e.bleu_bwd, e.wall_seconds
        );
    }
    println!("arm {arm}: total {:.1?}", t0.elapsed());
    // inspect outputs: what does the model emit for eval sources?
    let v = &tr.data.vocab;
    let n_src_tokens = 200usize;
    let first_tgt = 5 + n_src_tokens; // specials + source block
    for i in 0..4 {
        let x = &tr.data.eval_src[i];
        let hyp = tr.model.greedy_translate(x, 0, 1, 30).unwrap();
        let refr = &tr.data.eval_ref[i];
        println!("SRC: {}", v.decode(x));
        println!("HYP: {}", v.decode(&hyp));
        println!("REF: {}", v.decode(refr));
    }
    let mut tgt_tokens = 0usize;
    let mut total = 0usize;
    let mut copied = 0usize;
    for x in tr.data.eval_src.iter().take(100) {
        let hyp = tr.model.greedy_translate(x, 0, 1, 30).unwrap();
        for &t in &hyp {
            total += 1;
            if t >= first_tgt { tgt_tokens += 1; }
            if x.contains(&t) { copied += 1; }
        }
    }
    println!("hyp tokens in target language: {tgt_tokens}/{total}; copied from source: {copied}/{total}");
}
