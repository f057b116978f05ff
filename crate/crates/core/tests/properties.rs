//! Randomized invariant checks for the scoring, advantage, and corpus
//! primitives.

use std::sync::Arc;

use covo_core::corpus::SuffixAutomaton;
use covo_core::grpo::group_advantages;
use covo_core::lm::loss::{clipped_term, k3_divergence};
use covo_core::lm::model::{Model, ModelConfig};
use covo_core::lm::sampler::{sample_sequence, SamplerConfig};
use covo_core::lm::vocab::{escape_token, unescape_token, TokenSequence, Vocabulary};
use covo_core::score::{covo_score, mi_identity_check, CovoConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_model(seed: u64) -> Model<f64> {
    let vocab = Arc::new(Vocabulary::from_charset("\nab").unwrap());
    let cfg = ModelConfig {
        dim: 8,
        layers: 1,
        heads: 2,
        context: 64,
        tied_head: true,
        final_norm: true,
    };
    Model::new(cfg, vocab, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn joint_tables_satisfy_the_mutual_information_identity(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut joint: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| rand::Rng::random_range(&mut rng, 1e-6..1.0)).collect())
            .collect();
        let total: f64 = joint.iter().flatten().sum();
        for row in &mut joint {
            for p in row {
                *p /= total;
            }
        }
        let worst = mi_identity_check(&joint).unwrap();
        prop_assert!(worst <= 1e-12, "identity gap {worst}");
    }

    #[test]
    fn value_stays_nonpositive_and_originality_nonnegative(
        seed in any::<u64>(),
        prompt in "[ab]{1,6}",
        y in proptest::collection::vec(2u32..5, 1..8),
    ) {
        let model = tiny_model(seed);
        let prompt = TokenSequence::from_text(model.vocab(), &prompt).unwrap();
        let cfg = CovoConfig::default();
        let b = covo_score(&model, &prompt, &y, &cfg).unwrap();
        prop_assert!(b.s_v <= 0.0, "s_v {}", b.s_v);
        prop_assert!(b.s_o >= 0.0, "s_o {}", b.s_o);
        prop_assert!((b.total - (b.s_v + b.s_o)).abs() < 1e-12);
    }

    #[test]
    fn advantages_are_centered_and_unit_scale(
        rewards in proptest::collection::vec(-10.0f64..10.0, 1..9),
    ) {
        let n = rewards.len() as f64;
        let centered = group_advantages(&rewards, false).unwrap();
        let mean: f64 = centered.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);

        let scaled = group_advantages(&rewards, true).unwrap();
        let smean: f64 = scaled.iter().sum::<f64>() / n;
        prop_assert!(smean.abs() < 1e-9);
        let var: f64 = scaled.iter().map(|a| a * a).sum::<f64>() / n;
        if scaled.iter().any(|a| *a != 0.0) {
            prop_assert!((var - 1.0).abs() < 1e-9, "variance {var}");
        }
    }

    #[test]
    fn degenerate_groups_get_zero_advantages(r in -5.0f64..5.0, n in 1usize..9) {
        let adv = group_advantages(&vec![r; n], true).unwrap();
        prop_assert!(adv.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn k3_is_nonnegative_and_vanishes_only_near_zero(d in -20.0f64..20.0) {
        let v = k3_divergence(d, 0.0);
        prop_assert!(v >= 0.0, "k3({d}) = {v}");
        if d.abs() > 1e-6 {
            prop_assert!(v > 0.0, "k3({d}) = {v}");
        }
    }

    #[test]
    fn clipped_term_never_exceeds_either_branch(
        ratio in 0.01f64..5.0,
        advantage in -3.0f64..3.0,
        eps in 0.05f64..0.5,
    ) {
        let t = clipped_term(ratio, advantage, eps);
        prop_assert!(t <= ratio * advantage + 1e-15);
        prop_assert!(t <= ratio.clamp(1.0 - eps, 1.0 + eps) * advantage + 1e-15);
    }

    #[test]
    fn tokenize_then_detokenize_is_identity(text in "[ab\n ]{0,24}") {
        let vocab = Vocabulary::from_charset("\nab ").unwrap();
        let ids = vocab.tokenize(&text).unwrap();
        prop_assert_eq!(vocab.detokenize(&ids).unwrap(), text);
    }

    #[test]
    fn token_escaping_round_trips(token in "[a-z\n\\\\ ]{1,8}") {
        prop_assert_eq!(unescape_token(&escape_token(&token)).unwrap(), token);
    }

    #[test]
    fn automaton_accepts_exactly_the_substrings(
        doc in proptest::collection::vec(0u32..4, 1..40),
        query in proptest::collection::vec(0u32..4, 1..8),
    ) {
        let sa = SuffixAutomaton::from_symbols(&doc);
        let naive = doc.windows(query.len()).any(|w| w == &query[..]);
        prop_assert_eq!(sa.contains(&query), naive);
        prop_assert!(sa.state_count() <= (2 * doc.len()).max(2));
    }

    #[test]
    fn sampling_respects_budget_and_vocabulary(
        seed in any::<u64>(),
        budget in 1usize..12,
    ) {
        let model = tiny_model(seed);
        let cfg = SamplerConfig {
            temperature: 1.0,
            top_k: 0,
            max_new_tokens: budget,
            greedy: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let out = sample_sequence(&model, &[2], &cfg, &mut rng).unwrap();
        prop_assert!(out.tokens.len() <= budget);
        prop_assert_eq!(out.tokens.len(), out.logps.len());
        prop_assert!(out.tokens.iter().all(|&t| (t as usize) < model.vocab_size()));
        prop_assert!(out.logps.iter().all(|l| l.is_finite() && *l <= 0.0));
        if !out.overflow {
            prop_assert_eq!(*out.tokens.last().unwrap(), 1u32);
        } else {
            prop_assert_eq!(out.tokens.len(), budget);
        }
    }
}
