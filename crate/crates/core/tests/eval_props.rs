use finpatch::baselines::{chance_predict, ChanceModel};
use finpatch::data::{Granularity, PriceSeries};
use finpatch::eval::{
    accuracy, chance_rate, evaluate, macro_f1, stepwise_eval, window_origins, Direction, DirectionalOutcome,
    EvalProtocol, TieRule,
};
use finpatch::forecast::{AccessAudit, ChanceForecaster, OracleForecaster};
use finpatch::synthetic::drifting_walks;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn outcome(predicted: Direction, actual: Direction) -> DirectionalOutcome {
    DirectionalOutcome { instrument_id: "x".into(), horizon: 2, step: 1, anchor: 0, predicted, actual }
}

fn dir(up: bool) -> Direction {
    if up {
        Direction::Up
    } else {
        Direction::Down
    }
}

/// Per-class precision, recall and F1 straight from the definitions.
fn f1_oracle(pairs: &[(bool, bool)]) -> f64 {
    let mut total = 0.0;
    for class in [true, false] {
        let tp = pairs.iter().filter(|&&(p, a)| p == class && a == class).count() as f64;
        let predicted = pairs.iter().filter(|&&(p, _)| p == class).count() as f64;
        let support = pairs.iter().filter(|&&(_, a)| a == class).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if support > 0.0 { tp / support } else { 0.0 };
        total += if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    }
    total / 2.0
}

#[test]
fn skewed_market_with_an_always_up_predictor() {
    let outcomes: Vec<_> = (0..1000).map(|i| outcome(Direction::Up, dir(i % 10 != 0))).collect();
    assert!((macro_f1(&outcomes).unwrap() - 0.474).abs() <= 1e-3);
    assert!((accuracy(&outcomes).unwrap() - 0.9).abs() < 1e-15);
}

#[test]
fn counting_accuracy() {
    let outcomes: Vec<_> = (0..1000).map(|i| outcome(Direction::Up, dir(i < 530))).collect();
    assert!((accuracy(&outcomes).unwrap() - 0.53).abs() < 1e-15);
}

proptest! {
    #[test]
    fn six_outcome_tables_match_the_oracle(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 6)) {
        let outcomes: Vec<_> = pairs.iter().map(|&(p, a)| outcome(dir(p), dir(a))).collect();
        // both classes present among the actuals, so no class is skipped
        prop_assume!(pairs.iter().any(|p| p.1) && pairs.iter().any(|p| !p.1));
        prop_assert!((macro_f1(&outcomes).unwrap() - f1_oracle(&pairs)).abs() <= 1e-12);
    }

    #[test]
    fn metrics_ignore_outcome_order(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60), seed in any::<u64>()) {
        let outcomes: Vec<_> = pairs.iter().map(|&(p, a)| outcome(dir(p), dir(a))).collect();
        let mut shuffled = outcomes.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        prop_assert_eq!(accuracy(&outcomes).unwrap(), accuracy(&shuffled).unwrap());
        prop_assert_eq!(macro_f1(&outcomes).unwrap(), macro_f1(&shuffled).unwrap());
    }

    #[test]
    fn chance_rate_is_bounded(p in 0.0f64..=1.0, ups in 0usize..50, downs in 1usize..50) {
        let outcomes: Vec<_> = (0..ups + downs).map(|i| outcome(Direction::Up, dir(i < ups))).collect();
        let c = chance_rate(&outcomes, p).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
        if p == 0.5 {
            prop_assert!((c - 0.5).abs() < 1e-15);
        }
    }
}

#[test]
fn ratio_matched_guesser_converges_to_the_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let actual: Vec<bool> = (0..n).map(|_| rng.random_bool(0.62)).collect();
    let model = ChanceModel { up_ratio: 0.55, seed: 9 };
    let mut guesses = model.rng();
    let outcomes: Vec<_> = actual.iter().map(|&a| outcome(chance_predict(&model, &mut guesses), dir(a))).collect();
    let expected = chance_rate(&outcomes, 0.55).unwrap();
    let se = (expected * (1.0 - expected) / n as f64).sqrt();
    assert!((accuracy(&outcomes).unwrap() - expected).abs() < 4.0 * se);
}

#[test]
fn foresight_scores_perfectly_and_ties_follow_the_rule() {
    let s = drifting_walks(1, 300, 0.02, 0.0, 3).remove(0);
    let p = EvalProtocol { context_len: 16, total_horizon: 8, horizons: vec![2], tie_rule: TieRule::Down };
    let out = stepwise_eval(&OracleForecaster::new(std::slice::from_ref(&s)), &s, 20, 2, &p).unwrap();
    assert_eq!(out.len(), 4);
    assert!(out.iter().all(DirectionalOutcome::correct));

    let flat = PriceSeries::new("flat", Granularity::Daily, (0..40).collect(), vec![5.0; 40]).unwrap();
    let oracle = OracleForecaster::new(std::slice::from_ref(&flat));
    let down = stepwise_eval(&oracle, &flat, 16, 2, &p).unwrap();
    assert!(down.iter().all(|o| o.actual == Direction::Down && o.predicted == Direction::Down));
    let excluded = EvalProtocol { tie_rule: TieRule::Exclude, ..p };
    assert!(stepwise_eval(&oracle, &flat, 16, 2, &excluded).unwrap().is_empty());
}

#[test]
fn every_query_stops_at_its_anchor() {
    let series = drifting_walks(3, 260, 0.01, 0.001, 11);
    let audit = AccessAudit::new(ChanceForecaster { model: ChanceModel { up_ratio: 0.5, seed: 2 } }, &series);
    let p = EvalProtocol { context_len: 24, total_horizon: 16, horizons: vec![2, 3, 5, 16, 40], tie_rule: TieRule::Down };
    let report = evaluate(&audit, &series, &p, 0.5, &|_| 30).unwrap();
    assert!(report.rows.iter().all(|r| r.n_outcomes > 0));
    let records = audit.records();
    assert!(!records.is_empty());
    for r in &records {
        assert!(r.is_causal(), "{r:?}");
        let (start, end) = r.range.unwrap();
        assert_eq!(end - start, 24);
    }
    // one query per scored step
    let expected: usize = p
        .horizons
        .iter()
        .map(|&h| series.iter().map(|s| window_origins(s.len(), 30, h, &p).len() * p.steps(h)).sum::<usize>())
        .sum();
    assert_eq!(records.len(), expected);
}

#[test]
fn windows_never_share_scored_points() {
    let p = EvalProtocol { context_len: 10, total_horizon: 12, horizons: vec![5], tie_rule: TieRule::Down };
    for h in [1, 2, 5, 7, 12, 20] {
        let origins = window_origins(400, 37, h, &p);
        for w in origins.windows(2) {
            assert!(w[1] >= w[0] + p.span(h));
        }
        assert!(origins.iter().all(|&o| o >= 37 && o + p.span(h) <= 400));
    }
}
