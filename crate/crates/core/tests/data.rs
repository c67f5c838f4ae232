use proptest::prelude::*;
use tickets_core::data::{generate, oracle_accuracies, Dataset, Example, QuestionType, SynthSpec, World};
use tickets_core::losses::BiasPrior;

/// Answer distribution for one prototype, written out from the generative
/// story: the preferred answer gets `p`, the rest of its slice share `1 − p`.
fn expected_prior(spec: &SynthSpec, preferred: usize, t: QuestionType) -> Vec<f64> {
    let k = spec.answer_count as f64;
    let (lo, hi) = spec.slice(t);
    let kt = (hi - lo) as f64;
    // interpolate from uniform-in-slice at β = 1/K to one-hot at β = 1
    let lambda = (spec.bias_strength - 1.0 / k) / (1.0 - 1.0 / k);
    let p = (1.0 - lambda) / kt + lambda;
    let mut out = vec![0.0; spec.answer_count];
    for (a, slot) in out.iter_mut().enumerate().take(hi).skip(lo) {
        *slot = if a == preferred { p } else { (1.0 - p) / (kt - 1.0) };
    }
    out
}

fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Reads an answer code off the visual input when one is present.
fn vision_guess(e: &Example, spec: &SynthSpec, world: &World, fallback: usize) -> usize {
    let f = spec.feature_dim;
    for slot in e.visual.chunks(f) {
        for a in 0..spec.answer_count {
            let code = &world.codes[a * f..(a + 1) * f];
            if slot.iter().zip(code).all(|(v, c)| *v == spec.code_scale * c) {
                return a;
            }
        }
    }
    fallback
}

fn exact_match(data: &Dataset, mut predict: impl FnMut(&Example) -> usize) -> f64 {
    let hits = data.examples.iter().filter(|e| predict(e) == e.answer()).count();
    hits as f64 / data.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(3))]

    /// 10k samples per prototype.
    #[test]
    fn train_frequencies_converge_to_the_prior(seed in 0u64..1000, beta in 0.3f64..1.0) {
        let spec = SynthSpec {
            prototype_count: 3,
            bias_strength: beta,
            train_size: 30_000,
            test_size: 10,
            objects: 1,
            feature_dim: 1,
            seed,
            ..SynthSpec::default()
        };
        let world = World::new(&spec).unwrap();
        let train = generate(&spec).unwrap().train;
        let prior = BiasPrior::fit(train.examples.iter().map(|e| (e.prototype, e.answer())), spec.answer_count, 0.0).unwrap();
        for p in 0..spec.prototype_count {
            let want = expected_prior(&spec, world.train_preferred[p], spec.prototype_type(p));
            let tv = total_variation(&prior.lookup(p), &want);
            prop_assert!(tv < 0.02, "prototype {p}: tv {tv}");
        }
    }

    #[test]
    fn test_preferences_are_a_derangement(seed in 0u64..10_000, k in 6usize..30) {
        let spec = SynthSpec { answer_count: k, seed, ..SynthSpec::default() };
        let world = World::new(&spec).unwrap();
        for p in 0..spec.prototype_count {
            let (lo, hi) = spec.slice(spec.prototype_type(p));
            let (a, b) = (world.train_preferred[p], world.test_preferred[p]);
            prop_assert!(a != b && (lo..hi).contains(&b));
        }
    }

    #[test]
    fn every_type_appears_in_both_splits(seed in 0u64..10_000) {
        let spec = SynthSpec { train_size: 300, test_size: 100, seed, ..SynthSpec::default() };
        let splits = generate(&spec).unwrap();
        for data in [&splits.train, &splits.test] {
            for t in QuestionType::ALL {
                prop_assert!(data.examples.iter().any(|e| e.question_type == t));
            }
        }
    }
}

#[test]
fn reference_predictors_match_closed_form() {
    let spec = SynthSpec {
        train_size: 40_000,
        test_size: 40_000,
        ..SynthSpec::default()
    };
    let world = World::new(&spec).unwrap();
    let splits = generate(&spec).unwrap();
    let oracle = oracle_accuracies(&spec).unwrap();
    let q = |e: &Example| world.train_preferred[e.prototype];
    let v = |e: &Example| vision_guess(e, &spec, &world, world.train_preferred[e.prototype]);
    let checks = [
        (exact_match(&splits.train, q), oracle.question_only_train),
        (exact_match(&splits.test, q), oracle.question_only_test),
        (exact_match(&splits.train, v), oracle.vision_train),
        (exact_match(&splits.test, v), oracle.vision_test),
    ];
    for (i, (got, want)) in checks.into_iter().enumerate() {
        assert!((got - want).abs() < 0.01, "check {i}: {got} vs {want}");
    }
}

#[test]
fn dataset_file_roundtrip() {
    let spec = SynthSpec {
        train_size: 50,
        test_size: 20,
        ..SynthSpec::default()
    };
    let splits = generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    splits.train.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), splits.train);
}
