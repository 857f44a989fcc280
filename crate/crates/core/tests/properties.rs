use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use cfa_core::categorical::{fit_dwls, implied_correlation_vector, wls_discrepancy, PolychoricSummary};
use cfa_core::datagen::{generate_continuous, sample_covariance, NormalStream, ThresholdSet};
use cfa_core::ml::{fit_ml, ml_discrepancy, FitOptions, SampleMoments, StartPolicy};
use cfa_core::model::{
    build_parameter_layout, implied_covariance, parse_model_text, Bound, IdentificationStrategy,
    LoadingRef, ModelSpec, ParamStatus, VariableKind,
};
use cfa_core::sign::positive_anchor;
use cfa_core::simulation::{one_factor_spec, population};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn nonzero_loading() -> impl Strategy<Value = f64> {
    (0.35f64..0.85, any::<bool>()).prop_map(|(m, neg)| if neg { -m } else { m })
}

fn sampled_moments(truth: &[f64], n: usize, seed: u64) -> SampleMoments {
    let (layout, theta) = population(truth).unwrap();
    let data = generate_continuous(&layout, &theta, n, seed).unwrap();
    SampleMoments::from_covariance(sample_covariance(&data).unwrap(), n)
}

/// A small random model with optional fixes, starts and bounds.
fn model_spec() -> impl Strategy<Value = ModelSpec> {
    (
        3usize..7,
        prop::collection::vec((any::<u8>(), -2.0f64..2.0), 3..7),
        any::<bool>(),
    )
        .prop_map(|(p, extras, ordinal)| {
            let names: Vec<String> = (1..=p).map(|i| format!("x{}", i)).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let mut spec = ModelSpec::one_factor("F", &refs);
            for (k, (tag, v)) in extras.into_iter().enumerate() {
                let r = LoadingRef::new("F", names[k % p].clone());
                let v = (v * 1000.0).round() / 1000.0;
                match tag % 4 {
                    0 if !spec.loading_starts.contains_key(&r) && !spec.loading_bounds.contains_key(&r) => {
                        spec.loading_mut(&r).unwrap().status = ParamStatus::Fixed(v);
                    }
                    1 if spec.loading(&r).unwrap().status == ParamStatus::Free => {
                        spec.loading_starts.insert(r, v);
                    }
                    2 if spec.loading(&r).unwrap().status == ParamStatus::Free => {
                        spec.loading_bounds.insert(r, Bound { lower: v.min(0.0), upper: f64::INFINITY });
                    }
                    _ => {}
                }
            }
            if ordinal {
                for x in spec.indicators.iter_mut() {
                    x.kind = VariableKind::Ordinal { categories: 3 };
                }
            }
            spec
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn model_text_round_trips(spec in model_spec()) {
        let reparsed = parse_model_text(&spec.to_text()).unwrap();
        prop_assert_eq!(&reparsed, &spec);
        prop_assert_eq!(reparsed.to_text(), spec.to_text());
    }

    #[test]
    fn mirrored_solutions_share_the_discrepancy(
        truth in prop::collection::vec(nonzero_loading(), 3..6),
        seed in any::<u64>(),
    ) {
        let moments = sampled_moments(&truth, 200, seed);
        let spec = one_factor_spec(truth.len());
        let fixvar = IdentificationStrategy::FixedFactorVariance;
        let fit = fit_ml(&spec, &fixvar, &moments, &FitOptions::default()).unwrap();
        let layout = &fit.layout;
        let mirrored: Vec<f64> = layout
            .free_entries()
            .zip(&fit.theta)
            .map(|(e, v)| if e.label.starts_with("F.") { -v } else { *v })
            .collect();
        let a = ml_discrepancy(&moments.covariance, &implied_covariance(layout, &fit.theta).unwrap()).unwrap();
        let b = ml_discrepancy(&moments.covariance, &implied_covariance(layout, &mirrored).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn fit_never_ends_above_its_start(
        truth in prop::collection::vec(nonzero_loading(), 3..6),
        start in -1.5f64..1.5,
        seed in any::<u64>(),
    ) {
        prop_assume!(start.abs() > 0.05);
        let moments = sampled_moments(&truth, 150, seed);
        let options = FitOptions::with_starts(StartPolicy::UniformLoading(start));
        let fit = fit_ml(&one_factor_spec(truth.len()), &IdentificationStrategy::FixedFactorVariance, &moments, &options).unwrap();
        prop_assert!(fit.discrepancy <= fit.start_discrepancy + 1e-12);
    }

    #[test]
    fn estimates_respect_bounds(
        truth in prop::collection::vec(nonzero_loading(), 3..6),
        lower in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let p = truth.len();
        let moments = sampled_moments(&truth, 200, seed);
        let mut spec = one_factor_spec(p);
        let bound = if lower {
            Bound { lower: 0.0, upper: f64::INFINITY }
        } else {
            Bound { lower: f64::NEG_INFINITY, upper: 0.0 }
        };
        for i in 1..=p {
            spec.loading_bounds.insert(LoadingRef::new("F", format!("x{}", i)), bound);
        }
        let options = FitOptions::with_starts(StartPolicy::UniformLoading(if lower { -1.0 } else { 1.0 }));
        let fit = fit_ml(&spec, &IdentificationStrategy::FixedFactorVariance, &moments, &options).unwrap();
        for (_, v, _) in fit.factor_loadings("F") {
            prop_assert!(v >= bound.lower && v <= bound.upper, "{} outside {:?}", v, bound);
        }
    }

    #[test]
    fn positive_anchor_is_fixed_at_one(anchor in 1usize..6, p in 3usize..7) {
        prop_assume!(anchor <= p);
        let spec = one_factor_spec(p);
        let r = LoadingRef::new("F", format!("x{}", anchor));
        let (anchored, strategy) = positive_anchor(&spec, &r).unwrap();
        prop_assert_eq!(anchored.loading(&r).unwrap().status, ParamStatus::Fixed(1.0));
        prop_assert!(!anchored.loading_starts.contains_key(&r));
        let layout = build_parameter_layout(&anchored, &strategy, &StartPolicy::EngineDefault).unwrap();
        let free: Vec<&str> = layout
            .free_entries()
            .filter(|e| e.label.starts_with("F."))
            .map(|e| e.label.as_str())
            .collect();
        prop_assert_eq!(free.len(), p - 1);
        let anchor_label = r.to_string();
        prop_assert!(!free.contains(&anchor_label.as_str()));
    }

    #[test]
    fn wls_is_nonnegative(
        pairs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0.01f64..10.0), 1..20),
    ) {
        let s: Vec<f64> = pairs.iter().map(|t| t.0).collect();
        let sigma: Vec<f64> = pairs.iter().map(|t| t.1).collect();
        let w: Vec<f64> = pairs.iter().map(|t| t.2).collect();
        prop_assert!(wls_discrepancy(&s, &sigma, &w).unwrap() >= 0.0);
        prop_assert_eq!(wls_discrepancy(&s, &s, &w).unwrap(), 0.0);
    }

    #[test]
    fn dwls_implied_correlations_are_correlations(
        truth in prop::collection::vec(nonzero_loading(), 3..6),
        start in prop_oneof![Just(1.0), Just(-1.0), Just(0.5)],
    ) {
        let p = truth.len();
        let (layout, theta) = population(&truth).unwrap();
        let sigma = implied_covariance(&layout, &theta).unwrap();
        let names: Vec<String> = (1..=p).map(|i| format!("x{}", i)).collect();
        let thresholds = ThresholdSet::uniform(p, &[0.0]).unwrap();
        let summary = PolychoricSummary::new(names, thresholds, sigma).unwrap();
        let mut spec = one_factor_spec(p);
        for x in spec.indicators.iter_mut() {
            x.kind = VariableKind::Ordinal { categories: 2 };
        }
        let options = FitOptions::with_starts(StartPolicy::UniformLoading(start));
        let fit = fit_dwls(&spec, &summary, &options, &IdentificationStrategy::FixedFactorVariance).unwrap();
        for &r in implied_correlation_vector(&fit).iter() {
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&r), "{}", r);
        }
        let implied = fit.implied_covariance();
        for i in 0..p {
            assert_abs_diff_eq!(implied[(i, i)], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn generator_is_seed_deterministic(
        truth in prop::collection::vec(nonzero_loading(), 2..5),
        seed in any::<u64>(),
    ) {
        let (layout, theta) = population(&truth).unwrap();
        let a = generate_continuous(&layout, &theta, 25, seed).unwrap();
        let b = generate_continuous(&layout, &theta, 25, seed).unwrap();
        let c = generate_continuous(&layout, &theta, 25, seed ^ 1).unwrap();
        prop_assert_eq!(&a.values, &b.values);
        prop_assert_ne!(&a.values, &c.values);
    }
}

#[test]
fn normal_stream_matches_across_instances() {
    let draw = |seed| {
        let mut s = NormalStream::new(seed);
        (0..64).map(|_| s.next()).collect::<Vec<f64>>()
    };
    assert_eq!(draw(77), draw(77));
    assert_ne!(draw(77), draw(78));
}

#[test]
fn per_loading_starts_pick_the_solution() {
    let truth = [0.7, -0.7, 0.7];
    let (layout, theta) = population(&truth).unwrap();
    let sigma: DMatrix<f64> = implied_covariance(&layout, &theta).unwrap();
    let moments = SampleMoments::from_covariance(sigma, 200);
    let starts: BTreeMap<LoadingRef, f64> = (1..=3)
        .map(|i| (LoadingRef::new("F", format!("x{}", i)), -truth[i - 1].signum()))
        .collect();
    let fit = fit_ml(
        &one_factor_spec(3),
        &IdentificationStrategy::FixedFactorVariance,
        &moments,
        &FitOptions::with_starts(StartPolicy::PerLoading(starts)),
    )
    .unwrap();
    for ((_, v, _), t) in fit.factor_loadings("F").into_iter().zip(truth) {
        assert_abs_diff_eq!(v, -t, epsilon = 1e-5);
    }
}
