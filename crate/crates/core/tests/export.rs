use std::collections::BTreeMap;

use exmap_core::aggregate::{GeoEntry, GeoTable, IndicatorCount, InstitutionAggregate};
use exmap_core::export::{assign_ranks, build_bundles, rank_delta, BundleInputs, ExportBundle, Measure};
use exmap_core::fitting::{build_design, READER_INDICATORS};
use exmap_core::{Indicator, Sector, Subject};
use exmap_glmm::simulate::{simulate, SimulationSpec};
use exmap_glmm::{fit, intercept_model, logistic, CshCovariance, FitConfig, FitResult, InterceptModel};
use proptest::prelude::*;

struct Fixture {
    aggregates: Vec<InstitutionAggregate>,
    geo: GeoTable,
    plain: FitResult,
    adjusted: FitResult,
    intercept: InterceptModel,
}

// Forty institutions drawn from the model with a covariate effect, fitted
// with and without it.
fn fixture() -> Fixture {
    let spec = SimulationSpec {
        indicators: Indicator::ALL.iter().map(|i| i.name().to_string()).collect(),
        beta: vec![-2.2, -2.6, -2.0, -1.9, -2.1, -2.2, -2.2],
        cov: CshCovariance {
            sigma2: vec![0.25; 7],
            rho: 0.6,
        },
        clusters: 40,
        trials: (150, 600),
        covariate_slopes: Some(vec![0.3; 7]),
    };
    let sim = simulate(&spec, 5).unwrap();
    let design = &sim.design;
    let x = design.covariate().unwrap();
    let mut aggregates = Vec::new();
    let mut geo = GeoTable::new();
    for (j, id) in design.cluster_ids().iter().enumerate() {
        let mut indicators = BTreeMap::new();
        for row in design.cluster_rows(j) {
            indicators.insert(
                Indicator::ALL[row.indicator],
                IndicatorCount {
                    n: row.trials,
                    y: row.successes,
                    raw_sum: row.successes as f64,
                    low_threshold_papers: if row.indicator == 1 { row.trials } else { 0 },
                },
            );
        }
        aggregates.push(InstitutionAggregate {
            institution_id: id.clone(),
            subject: Subject::Area(2700),
            country: Some("C1".into()),
            indicators,
            covariates: BTreeMap::new(),
            standardized: BTreeMap::from([("GNI".to_string(), x[j])]),
        });
        if j > 0 {
            geo.insert(
                id.clone(),
                GeoEntry {
                    name: format!("Institute {j}"),
                    country: "C1".into(),
                    lat: Some(j as f64),
                    lon: Some(-(j as f64)),
                },
            );
        }
    }
    let config = FitConfig {
        nodes: 3,
        ..FitConfig::default()
    };
    let (d0, _) = build_design(&aggregates, None).unwrap();
    let (d1, _) = build_design(&aggregates, Some("GNI")).unwrap();
    let plain = fit(&d0, &config).unwrap();
    let adjusted = fit(&d1, &config).unwrap();
    let intercept = intercept_model(&d0.select_indicators(&READER_INDICATORS).unwrap(), &config).unwrap();
    Fixture {
        aggregates,
        geo,
        plain,
        adjusted,
        intercept,
    }
}

fn bundles(f: &Fixture, adjusted: bool) -> Vec<ExportBundle> {
    build_bundles(&BundleInputs {
        subject: Subject::Area(2700),
        plain: &f.plain,
        adjusted: adjusted.then_some(&f.adjusted),
        intercept: Some(&f.intercept),
        aggregates: &f.aggregates,
        geo: &f.geo,
    })
    .unwrap()
}

#[test]
fn bundles_cover_both_measures_and_all_audiences() {
    let f = fixture();
    for adjusted in [false, true] {
        let set = bundles(&f, adjusted);
        assert_eq!(set.len(), 7);
        let cited: Vec<&ExportBundle> = set.iter().filter(|b| b.measure == Measure::HighlyCited).collect();
        assert_eq!(cited.len(), 1);
        assert!(cited[0].audience.is_none());
        let audiences: Vec<Sector> = set.iter().filter_map(|b| b.audience).collect();
        assert_eq!(audiences, Sector::ALL.to_vec());

        for b in &set {
            b.validate().unwrap();
            assert_eq!(b.entries.len(), 40);
            let mut ranks: Vec<usize> = b.entries.iter().map(|e| e.rank).collect();
            ranks.sort_unstable();
            assert_eq!(ranks, (1..=40).collect::<Vec<_>>());
            if adjusted {
                assert_eq!(b.covariate.as_deref(), Some("GNI"));
                assert_eq!(b.entries.iter().map(|e| e.rank_delta.unwrap()).sum::<i64>(), 0);
            } else {
                assert!(b.entries.iter().all(|e| e.rank_delta.is_none()));
            }
            for e in &b.entries {
                assert!(e.lo <= e.probability && e.probability <= e.hi);
                assert_eq!(e.sibling_probabilities.is_some(), b.audience.is_some());
            }
            // Ranks follow probability, highest first.
            for w in b.entries.windows(2) {
                assert!(w[0].probability >= w[1].probability);
            }
            // The institution without a geography row keeps null coordinates.
            let missing = b.entries.iter().find(|e| e.name.is_none()).unwrap();
            assert!(missing.lat.is_none() && missing.lon.is_none());
            assert!(b.diagnostics.iter().any(|d| d.contains(&missing.institution_id)));
        }
        let librarians = set.iter().find(|b| b.audience == Some(Sector::Librarians)).unwrap();
        assert!(librarians.entries.iter().all(|e| e.low_threshold));
        let students = set.iter().find(|b| b.audience == Some(Sector::Students)).unwrap();
        assert!(students.entries.iter().all(|e| !e.low_threshold));
    }
}

#[test]
fn probabilities_add_the_residual_to_the_indicator_mean() {
    let f = fixture();
    let set = bundles(&f, false);
    for (k, b) in set.iter().enumerate() {
        assert!((b.grand_mean_probability - logistic(f.plain.reference_logits[k])).abs() < 1e-15);
        for e in &b.entries {
            let u = &f.plain.eb.iter().find(|c| c.cluster == e.institution_id).unwrap().u;
            let expected = logistic(f.plain.reference_logits[k] + u[k]);
            assert!((e.probability - expected).abs() < 1e-12);
            assert_eq!(e.above_mean, e.lo > b.grand_mean_probability);
            assert_eq!(e.below_mean, e.hi < b.grand_mean_probability);
            if let Some(sib) = &e.sibling_probabilities {
                assert_eq!(sib[&b.audience.unwrap()], e.probability);
                assert!(e.audience_average_probability.is_some());
            }
        }
    }
}

#[test]
fn bundles_round_trip_byte_for_byte() {
    let f = fixture();
    for b in bundles(&f, true) {
        let bytes = b.to_bytes();
        let parsed = ExportBundle::from_slice(&bytes).unwrap();
        assert_eq!(parsed, b);
        assert_eq!(parsed.to_bytes(), bytes);
    }
}

#[test]
fn flags_do_not_move_ranks() {
    let f = fixture();
    for b in bundles(&f, true) {
        let before: BTreeMap<&str, (usize, Option<i64>)> = b
            .entries
            .iter()
            .map(|e| (e.institution_id.as_str(), (e.rank, e.rank_delta)))
            .collect();
        for e in b.entries.iter().filter(|e| e.above_mean || e.below_mean) {
            assert_eq!(before[e.institution_id.as_str()], (e.rank, e.rank_delta));
        }
        // Ranks recomputed from probabilities alone agree.
        let items: Vec<(&str, f64)> = b.entries.iter().map(|e| (e.institution_id.as_str(), e.probability)).collect();
        let ranks = assign_ranks(&items);
        assert!(b.entries.iter().zip(ranks).all(|(e, r)| e.rank == r));
    }
}

proptest! {
    #[test]
    fn deltas_of_a_permutation_sum_to_zero(n in 1usize..60, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let ids: Vec<String> = (0..n).map(|i| format!("I{i}")).collect();
        let mut order: Vec<usize> = (1..=n).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let with: BTreeMap<String, usize> = ids.iter().cloned().zip(order).collect();
        let without: BTreeMap<String, usize> = ids.iter().cloned().zip(1..=n).collect();
        let d = rank_delta(&with, &without).unwrap();
        prop_assert_eq!(d.values().sum::<i64>(), 0);
        prop_assert!(rank_delta(&with, &with).unwrap().values().all(|&v| v == 0));
    }

    #[test]
    fn ranking_is_a_stable_permutation(probs in prop::collection::vec(0u8..6, 1..50)) {
        let ids: Vec<String> = (0..probs.len()).map(|i| format!("I{i:02}")).collect();
        let items: Vec<(&str, f64)> = ids.iter().map(String::as_str).zip(probs.iter().map(|&p| f64::from(p) / 10.0)).collect();
        let ranks = assign_ranks(&items);
        let mut sorted = ranks.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (1..=items.len()).collect::<Vec<_>>());
        for a in 0..items.len() {
            for b in 0..items.len() {
                if items[a].1 > items[b].1 || (items[a].1 == items[b].1 && items[a].0 < items[b].0) {
                    prop_assert!(ranks[a] < ranks[b]);
                }
            }
        }
    }
}
