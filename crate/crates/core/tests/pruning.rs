use indexmap::IndexMap;
use proptest::prelude::*;
use tickets_core::data::{generate, SynthSpec};
use tickets_core::model::{build_model, ModelConfig, ParameterRegistry};
use tickets_core::pruning::{
    init_real_mask, omp, pruned_count, random_init_real_mask, MaskHyper, MaskSet, MatrixMask, ThresholdScheme,
};
use tickets_core::sparsity::SparsityConfig;
use tickets_core::train::{train_masks, LossSetup, ModelState, OptimConfig};

fn tiny_spec() -> SynthSpec {
    SynthSpec {
        train_size: 96,
        test_size: 32,
        objects: 3,
        feature_dim: 4,
        ..SynthSpec::default()
    }
}

fn tiny_config(spec: &SynthSpec) -> ModelConfig {
    spec.model_config(&ModelConfig {
        d_model: 8,
        d_ffn: 16,
        heads: 2,
        language_layers: 1,
        visual_layers: 1,
        cross_layers: 1,
        pooled_dim: 8,
        ..ModelConfig::default()
    })
}

fn registry(seed: u64) -> ParameterRegistry {
    build_model(&tiny_config(&tiny_spec()), seed).unwrap()
}

fn one_matrix(real: Vec<f64>, target: f64) -> MaskSet {
    let mut masks = IndexMap::new();
    masks.insert(
        "m".to_string(),
        MatrixMask {
            shape: vec![real.len()],
            binary: vec![true; real.len()],
            real: Some(real),
            phi: 0.0,
            target,
        },
    );
    MaskSet {
        masks,
        hyper: MaskHyper::default(),
        scheme: ThresholdScheme::PerMatrix,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn omp_ignores_positive_rescaling(seed in 0u64..1000, s in 0.0f64..=1.0, c in 1e-3f64..1e3) {
        let reg = registry(seed);
        let targets = SparsityConfig::uniform(s).targets(&reg, None).unwrap();
        let mut scaled = reg.clone();
        for (_, p) in scaled.iter_mut().filter(|(_, p)| p.prunable) {
            p.value.data_mut().iter_mut().for_each(|v| *v *= c);
        }
        prop_assert_eq!(omp(&reg, &targets).unwrap(), omp(&scaled, &targets).unwrap());
    }

    #[test]
    fn omp_prunes_exact_counts(seed in 0u64..1000, s in 0.0f64..=1.0) {
        let reg = registry(seed);
        let targets = SparsityConfig::uniform(s).targets(&reg, None).unwrap();
        for (name, m) in omp(&reg, &targets).unwrap().iter() {
            prop_assert_eq!(m.pruned(), pruned_count(targets[name], m.numel()));
        }
    }

    /// Values drawn from a handful of levels, so ties are common.
    #[test]
    fn recompute_hits_target_with_ties(
        levels in prop::collection::vec(0u8..4, 1..200),
        target in 0.0f64..=1.0,
    ) {
        let real: Vec<f64> = levels.iter().map(|&l| l as f64 * 0.25).collect();
        let n = real.len();
        let mut set = one_matrix(real, target);
        set.recompute_thresholds();
        let m = set.get("m").unwrap();
        prop_assert_eq!(m.pruned(), pruned_count(target, n));
        // binary agrees with the threshold rule
        let real = m.real.as_ref().unwrap();
        prop_assert!(real.iter().zip(&m.binary).all(|(&r, &b)| b == (r >= m.phi)));
    }

    #[test]
    fn global_recompute_hits_overall_count(
        a in prop::collection::vec(-1.0f64..1.0, 1..50),
        b in prop::collection::vec(-1.0f64..1.0, 1..50),
        s in 0.0f64..=1.0,
    ) {
        let total = a.len() + b.len();
        let mut set = one_matrix(a, s);
        let second = MatrixMask { shape: vec![b.len()], binary: vec![true; b.len()], real: Some(b), phi: 0.0, target: s };
        set.masks.insert("n".into(), second);
        set.scheme = ThresholdScheme::Global { sparsity: s };
        set.recompute_thresholds();
        prop_assert_eq!(set.total_pruned(), pruned_count(s, total));
    }

    #[test]
    fn random_init_meets_targets(seed in 0u64..1000, s in 0.0f64..=1.0) {
        let reg = registry(1);
        let targets = SparsityConfig::uniform(s).targets(&reg, None).unwrap();
        let set = random_init_real_mask(&reg, &targets, &MaskHyper::default(), ThresholdScheme::PerMatrix, seed).unwrap();
        for (name, m) in set.iter() {
            prop_assert_eq!(m.pruned(), pruned_count(targets[name], m.numel()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn zero_eta_keeps_the_omp_subnetwork(seed in 0u64..100, s in 0.1f64..0.9) {
        let spec = tiny_spec();
        let data = generate(&spec).unwrap().train;
        let mut state = ModelState::new(registry(seed));
        let targets = SparsityConfig::uniform(s).targets(&state.registry, None).unwrap();
        let hyper = MaskHyper { eta: 0.0, recompute_interval: 2, ..MaskHyper::default() };
        let mut masks = init_real_mask(&state.registry, &targets, &hyper, ThresholdScheme::PerMatrix).unwrap();
        let reference = omp(&state.registry, &targets).unwrap();
        let before: Vec<Vec<f64>> = masks.iter().map(|(_, m)| m.real.clone().unwrap()).collect();
        let opt = OptimConfig { epochs: 1, batch_size: 16, max_steps: Some(5), ..OptimConfig::default() };
        train_masks(&mut state, &mut masks, &data, &LossSetup::bce(), &opt, seed).unwrap();
        let after: Vec<Vec<f64>> = masks.iter().map(|(_, m)| m.real.clone().unwrap()).collect();
        prop_assert_eq!(before, after);
        for (name, m) in masks.iter() {
            prop_assert_eq!(&m.binary, &reference.get(name).unwrap().binary);
        }
    }

    #[test]
    fn mask_training_never_writes_weights(seed in 0u64..100, s in 0.1f64..0.9) {
        let spec = tiny_spec();
        let data = generate(&spec).unwrap().train;
        let mut state = ModelState::new(registry(seed));
        let checksum = state.registry.weight_checksum();
        let targets = SparsityConfig::uniform(s).targets(&state.registry, None).unwrap();
        let mut masks = init_real_mask(&state.registry, &targets, &MaskHyper::default(), ThresholdScheme::PerMatrix).unwrap();
        let opt = OptimConfig { epochs: 1, batch_size: 16, max_steps: Some(4), ..OptimConfig::default() };
        train_masks(&mut state, &mut masks, &data, &LossSetup::bce(), &opt, seed).unwrap();
        prop_assert_eq!(state.registry.weight_checksum(), checksum);
        for (name, m) in masks.iter() {
            prop_assert_eq!(m.pruned(), pruned_count(targets[name], m.numel()));
        }
    }
}
