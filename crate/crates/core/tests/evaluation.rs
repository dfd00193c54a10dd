mod common;

use approx::assert_relative_eq;
use proptest::prelude::*;
use spindle_core::corpus::TokenizerKind;
use spindle_core::denoiser::{Denoiser, DenoiserConfig, TimeMode};
use spindle_core::diffusion::ScheduleParams;
use spindle_core::evaluation::{bleu4, elbo_eval, elbo_eval_all_steps, self_bleu4, EvalConfig};

fn sentences() -> impl Strategy<Value = Vec<Vec<u8>>> {
    prop::collection::vec(prop::collection::vec(0u8..6, 1..10), 2..8)
}

proptest! {
    #[test]
    fn bleu_is_permutation_invariant(cands in sentences(), refs in sentences(), rot in 0usize..8) {
        let mut shuffled = cands.clone();
        shuffled.rotate_left(rot % cands.len());
        shuffled.reverse();
        let a = bleu4(&cands, &refs).unwrap();
        let b = bleu4(&shuffled, &refs).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        let sa = self_bleu4(&cands).unwrap();
        let sb = self_bleu4(&shuffled).unwrap();
        prop_assert!((sa - sb).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&sa));
    }

    #[test]
    fn identical_candidates_have_self_bleu_one(s in prop::collection::vec(0u8..6, 1..10), k in 2usize..6) {
        let cands = vec![s; k];
        prop_assert!((self_bleu4(&cands).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn uniform_model_bound_is_log_content() {
    let lines = common::grammar_sentences(60, 1, "uniform");
    let p = common::prepare(&lines, TokenizerKind::Word, 128);
    let content = p.vocab.num_content() as f64;
    let params = ScheduleParams::new(16, 0.0);
    let mut config = DenoiserConfig::new(p.vocab.len(), TimeMode::Lte, 16).with_size(1, 16, 2);
    config.n_max = 8;
    // The output projection starts at zero, so predictions are uniform.
    let model = Denoiser::<f64>::new(config, 3).unwrap();
    let cfg = EvalConfig {
        seed: 8,
        ..Default::default()
    };
    let e = elbo_eval_all_steps(&model, &p.data, &p.surprisal, &params, 4, &cfg).unwrap();
    assert!(
        (e.nats_per_token - content.ln()).abs() <= 4.0 * e.std_error + 1e-9,
        "{} vs ln C = {}",
        e.nats_per_token,
        content.ln()
    );
    assert!(e.ppl_proxy() >= 1.0);
}

#[test]
fn doubling_draws_moves_the_estimate_by_less_than_its_error() {
    let lines = common::grammar_sentences(80, 2, "double");
    let p = common::prepare(&lines, TokenizerKind::Word, 128);
    let params = ScheduleParams::new(16, 0.3);
    let mut config = DenoiserConfig::new(p.vocab.len(), TimeMode::Tad, 16).with_size(1, 16, 2);
    config.n_max = 8;
    let model = Denoiser::<f32>::new(config, 3).unwrap();
    let small = EvalConfig {
        t_samples: 8,
        seed: 5,
        ..Default::default()
    };
    let large = EvalConfig {
        t_samples: 16,
        ..small.clone()
    };
    let a = elbo_eval(&model, &p.data, &p.surprisal, &params, &small).unwrap();
    let b = elbo_eval(&model, &p.data, &p.surprisal, &params, &large).unwrap();
    assert!(
        (a.nats_per_token - b.nats_per_token).abs() < a.std_error,
        "{a:?} vs {b:?}"
    );
    let again = elbo_eval(&model, &p.data, &p.surprisal, &params, &small).unwrap();
    assert_relative_eq!(again.nats_per_token, a.nats_per_token);
}

#[test]
fn empty_dataset_is_an_error() {
    let lines = common::grammar_sentences(10, 2, "empty");
    let p = common::prepare(&lines, TokenizerKind::Word, 128);
    let params = ScheduleParams::new(8, 0.3);
    let mut config = DenoiserConfig::new(p.vocab.len(), TimeMode::Tad, 8).with_size(1, 16, 2);
    config.n_max = 8;
    let model = Denoiser::<f32>::new(config, 3).unwrap();
    assert!(elbo_eval(&model, &[], &p.surprisal, &params, &EvalConfig::default()).is_err());
}

#[test]
fn memorised_sentence_has_near_zero_bound() {
    let (model, p, params) = common::memorizer(600);
    let cfg = EvalConfig {
        seed: 1,
        ..Default::default()
    };
    let e = elbo_eval_all_steps(&model, &p.data, &p.surprisal, &params, 8, &cfg).unwrap();
    assert!(e.nats_per_token <= 0.05, "{e:?}");
}
