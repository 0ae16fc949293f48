mod common;

use common::*;
use prunelab::data::{BatchSampler, GaussianMixture};
use prunelab::nn::{build_model, Model, ModelSpec};
use prunelab::optim::{LrSchedule, OptimizerConfig, OptimizerKind};
use prunelab::prune::*;
use prunelab::seeds::SeedStreams;
use prunelab::tensor::Tensor;
use prunelab::train::TrainSettings;
use proptest::prelude::*;

fn settings(lr: f64, batch_size: usize) -> TrainSettings {
    TrainSettings {
        optimizer: OptimizerConfig {
            kind: OptimizerKind::Sgd { momentum: 0.9 },
            schedule: LrSchedule::Constant { lr },
        },
        batch_size,
    }
}

fn masks(model: &Model) -> Vec<Tensor> {
    model.params().iter().map(|p| p.mask().clone()).collect()
}

fn assert_no_revival(before: &[Tensor], after: &Model) {
    for (m0, p) in before.iter().zip(after.params()) {
        for (a, b) in m0.data().iter().zip(p.mask().data()) {
            assert!(!(*a == 0.0 && *b != 0.0), "mask of {} went 0→1", p.id());
        }
    }
}

#[test]
fn synflow_scores_are_conserved_per_layer() {
    for seed in 0..30 {
        let mut r = rng(seed);
        let mut model = build_model(random_mlp_spec(&mut r, Some(false)), seed).unwrap();
        if seed % 2 == 1 {
            random_masks(&mut r, &mut model, 0.3);
        }
        let z = score_synflow(&model).unwrap();
        let sums: Vec<f64> = z.layer_sums(&model).into_iter().map(|(_, s)| s).collect();
        let hi = sums.iter().cloned().fold(f64::MIN, f64::max);
        let lo = sums.iter().cloned().fold(f64::MAX, f64::min);
        if hi == 0.0 {
            continue; // a masked cut disconnects the network; every sum is 0
        }
        assert!((hi - lo) / hi <= 1e-4, "seed {seed}: {sums:?}");
    }
}

#[test]
fn synflow_avoids_collapse_at_extreme_sparsity() {
    for seed in 0..2 {
        let model = build_model(ModelSpec::lenet_300_100(), seed).unwrap();
        let (pruned, report) = synflow_pipeline(model, 0.999, 100).unwrap();
        assert!(report.collapsed_layers.is_empty(), "seed {seed}");
        assert_eq!(pruned.survivor_count(), target_count(0.001, pruned.prunable_count()));
    }
}

#[test]
fn snip_tracks_exact_connection_sensitivity() {
    let rhos: Vec<f64> = (0..5).map(snip_fidelity).collect();
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    assert!(mean >= 0.9, "spearman per seed {rhos:?}");
}

#[test]
fn schedules_hit_their_targets() {
    let (train, _) = GaussianMixture {
        classes: 4,
        dim: 30,
        separation: 3.0,
        seed: 1,
    }
    .split(20, 2)
    .unwrap();
    for kappa in [0.9, 0.98, 0.993] {
        for n in [1, 10, 100] {
            let schedule = make_schedule(kappa, n).unwrap();
            for method in [PruneMethod::Synflow, PruneMethod::Drive, PruneMethod::Magnitude] {
                let mut model = build_model(ModelSpec::mlp("s", &[30, 40, 20, 4], true), 3).unwrap();
                let mut sampler = BatchSampler::new(&train, 8, 5).unwrap();
                let before = masks(&model);
                iterative_prune(&mut model, method, &schedule, Some(&mut sampler), None).unwrap();
                assert_no_revival(&before, &model);
                let want = ((1.0 - kappa) * model.prunable_count() as f64).round() as i64;
                let got = model.survivor_count() as i64;
                assert!((got - want).abs() <= 1, "{method} κ={kappa} N={n}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn imp_rewinds_survivors_to_initialization() {
    let (train, _) = GaussianMixture {
        classes: 3,
        dim: 10,
        separation: 3.0,
        seed: 2,
    }
    .split(40, 2)
    .unwrap();
    let streams = SeedStreams::from_seed(6);
    let spec = ModelSpec::mlp("imp", &[10, 16, 3], true);
    let init = build_model(spec.clone(), streams.init).unwrap();
    let mut cycles = 0;
    let mut last_masks = masks(&init);
    let (model, report) = imp_pipeline_observed(
        init.clone(),
        &train,
        4,
        1,
        0.8,
        &settings(0.05, 8),
        &streams,
        |_, m: &Model| {
            cycles += 1;
            assert_no_revival(&last_masks, m);
            last_masks = masks(m);
            for (p, p0) in m.params().iter().zip(init.params()) {
                for j in 0..p.len() {
                    if !p.is_pruned(j) {
                        assert_eq!(
                            p.value().data()[j].to_bits(),
                            p0.value().data()[j].to_bits(),
                            "{}[{j}]",
                            p.id()
                        );
                    }
                }
            }
        },
    )
    .unwrap();
    assert_eq!(cycles, 4);
    assert_eq!(report.density_trace.len(), 4);
    assert_eq!(model.survivor_count(), target_count(0.2, model.prunable_count()));
}

#[test]
fn pipelines_are_deterministic_and_monotone() {
    let (train, _) = GaussianMixture {
        classes: 3,
        dim: 12,
        separation: 3.0,
        seed: 8,
    }
    .split(30, 2)
    .unwrap();
    let spec = ModelSpec::mlp("det", &[12, 20, 3], true);
    let run = |method: PruneMethod| {
        let streams = SeedStreams::from_seed(11);
        let model = build_model(spec.clone(), streams.init).unwrap();
        let st = settings(0.05, 8);
        match method {
            PruneMethod::Magnitude => imp_pipeline(model, &train, 3, 1, 0.9, &st, &streams),
            PruneMethod::Snip => snip_pipeline(model, &train, 0.9, 8, &streams),
            PruneMethod::Synflow => synflow_pipeline(model, 0.9, 20),
            PruneMethod::Drive => {
                drive_pipeline(model, &train, 1, &make_schedule(0.9, 20).unwrap(), &st, &streams)
            }
        }
        .unwrap()
    };
    for method in PruneMethod::ALL {
        let (a, ra) = run(method);
        let (b, _) = run(method);
        assert_eq!(masks(&a), masks(&b), "{method}");
        // density traces only ever go down
        assert!(ra.density_trace.windows(2).all(|w| w[1] <= w[0]), "{method}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn normalized_scores_sum_to_one(seed in 0u64..100_000, p in 0.0f64..0.8) {
        let mut r = rng(seed);
        let mut model = build_model(random_mlp_spec(&mut r, None), seed).unwrap();
        random_masks(&mut r, &mut model, p);
        let batch = random_batch(&mut r, model.spec(), 4);
        for method in [PruneMethod::Snip, PruneMethod::Drive] {
            match score(&model, method, Some(&batch)) {
                Ok(z) => {
                    prop_assert!(z.normalized);
                    prop_assert!((z.total() - 1.0).abs() <= 1e-5);
                }
                Err(prunelab::Error::ZeroSaliency) => {}
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }

    #[test]
    fn apply_prune_is_exact_and_monotone(seed in 0u64..100_000, d1 in 0.05f64..1.0, shrink in 0.0f64..1.0) {
        let mut r = rng(seed);
        let mut model = build_model(random_mlp_spec(&mut r, None), seed).unwrap();
        let total = model.prunable_count();
        let z = score_magnitude(&model);
        apply_prune(&mut model, &z, d1, None).unwrap();
        prop_assert_eq!(model.survivor_count(), target_count(d1, total));
        let before = masks(&model);
        let d2 = d1 * shrink;
        let z = score_magnitude(&model);
        apply_prune(&mut model, &z, d2, None).unwrap();
        prop_assert_eq!(model.survivor_count(), target_count(d2, total));
        assert_no_revival(&before, &model);
        let err = apply_prune(&mut model, &z, (d2 + 0.2).min(1.0), None);
        if target_count((d2 + 0.2).min(1.0), total) > model.survivor_count() {
            prop_assert!(
                matches!(err, Err(prunelab::Error::DensityIncrease { .. })),
                "expected DensityIncrease, got {:?}",
                err.map(|_| ())
            );
        }
    }

    #[test]
    fn magnitude_ranking_is_scale_invariant(seed in 0u64..100_000, c in 0.01f32..100.0, d in 0.05f64..0.95) {
        let mut r = rng(seed);
        let model = build_model(random_mlp_spec(&mut r, None), seed).unwrap();
        let mut scaled = model.clone();
        for p in scaled.params_mut() {
            p.value_mut().data_mut().iter_mut().for_each(|v| *v *= c);
        }
        let (mut a, mut b) = (model.clone(), scaled.clone());
        let za = score_magnitude(&a);
        let zb = score_magnitude(&b);
        apply_prune(&mut a, &za, d, None).unwrap();
        apply_prune(&mut b, &zb, d, None).unwrap();
        prop_assert_eq!(masks(&a), masks(&b));
    }

    #[test]
    fn schedule_shape(kappa in 0.0f64..0.9999, n in 1usize..300) {
        let s = make_schedule(kappa, n).unwrap();
        prop_assert_eq!(s.densities.len(), n);
        prop_assert!(s.densities.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(*s.densities.last().unwrap(), 1.0 - kappa);
        prop_assert!(s.densities[0] <= 1.0);
    }
}
