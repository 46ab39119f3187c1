use std::collections::{BTreeMap, BTreeSet};

use exmap_core::aggregate::{
    accumulate, attach_standardized, round_successes, select_institutions, ExclusionReason, IndicatorCount,
    InstitutionAggregate, SelectionCriteria,
};
use exmap_core::indicators::IndicatorWeights;
use exmap_core::ingest::{PaperRecord, Retrieval};
use exmap_core::{Indicator, Subject};
use proptest::prelude::*;

fn agg(inst: &str, subject: Subject, papers: u64) -> InstitutionAggregate {
    InstitutionAggregate {
        institution_id: inst.into(),
        subject,
        country: None,
        indicators: Indicator::ALL
            .iter()
            .map(|&i| {
                (
                    i,
                    IndicatorCount {
                        n: papers,
                        y: papers / 10,
                        raw_sum: papers as f64 / 10.0,
                        low_threshold_papers: 0,
                    },
                )
            })
            .collect(),
        covariates: BTreeMap::new(),
        standardized: BTreeMap::new(),
    }
}

fn selected(kept: &[InstitutionAggregate], subject: Subject) -> BTreeSet<String> {
    kept.iter()
        .filter(|a| a.subject == subject)
        .map(|a| a.institution_id.clone())
        .collect()
}

#[test]
fn paper_minimum_is_inclusive() {
    let chem = Subject::Area(1600);
    let mut rows: Vec<InstitutionAggregate> = (0..60).map(|i| agg(&format!("I{i:02}"), chem, 800)).collect();
    rows.push(agg("SMALL", chem, 499));
    rows.push(agg("EDGE", chem, 500));
    let (kept, excluded) = select_institutions(&rows, &SelectionCriteria::default());
    let chem_kept = selected(&kept, chem);
    assert!(!chem_kept.contains("SMALL"));
    assert!(chem_kept.contains("EDGE"));
    assert!(excluded.iter().any(|e| e.institution_id == "SMALL"
        && e.reason == ExclusionReason::TooFewPapers { papers: 499, required: 500 }));
}

#[test]
fn subjects_below_fifty_institutions_vanish() {
    let math = Subject::Area(2600);
    let rows: Vec<InstitutionAggregate> = (0..49).map(|i| agg(&format!("I{i}"), math, 900)).collect();
    let (kept, excluded) = select_institutions(&rows, &SelectionCriteria::default());
    assert!(kept.is_empty());
    assert_eq!(excluded.len(), 49);
    assert!(excluded
        .iter()
        .all(|e| matches!(e.reason, ExclusionReason::SubjectTooSmall { institutions: 49, required: 50 })));
}

#[test]
fn all_subjects_needs_five_areas() {
    let areas: Vec<Subject> = [1100, 1300, 1600, 2700, 3100].iter().map(|&c| Subject::Area(c)).collect();
    let mut rows = Vec::new();
    for i in 0..55 {
        let id = format!("I{i:02}");
        for &s in &areas {
            rows.push(agg(&id, s, 600));
        }
        rows.push(agg(&id, Subject::All, 3000));
    }
    // Active in four areas only.
    for &s in &areas[..4] {
        rows.push(agg("FOUR", s, 600));
    }
    rows.push(agg("FOUR", Subject::All, 2400));
    let (kept, excluded) = select_institutions(&rows, &SelectionCriteria::default());
    assert!(!selected(&kept, Subject::All).contains("FOUR"));
    assert!(selected(&kept, areas[0]).contains("FOUR"));
    assert!(excluded.iter().any(|e| e.institution_id == "FOUR"
        && e.subject == Subject::All
        && e.reason == ExclusionReason::TooFewSubjects { subjects: 4, required: 5 }));
    assert_eq!(selected(&kept, Subject::All).len(), 55);
}

fn rows_strategy() -> impl Strategy<Value = Vec<InstitutionAggregate>> {
    let subjects = vec![Subject::Area(1100), Subject::Area(1200), Subject::Area(1300), Subject::Area(1400), Subject::All];
    prop::collection::btree_map((0u8..25, prop::sample::select(subjects)), 0u64..40, 0..120).prop_map(|m| {
        m.into_iter()
            .map(|((i, s), n)| agg(&format!("I{i:02}"), s, n))
            .collect()
    })
}

proptest! {
    #[test]
    fn selection_is_idempotent_and_order_free(rows in rows_strategy(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let criteria = SelectionCriteria { min_papers: 15, min_institutions: 4, min_subjects: 2 };
        let (kept, excluded) = select_institutions(&rows, &criteria);
        let (again, none) = select_institutions(&kept, &criteria);
        prop_assert_eq!(&kept, &again);
        prop_assert!(none.is_empty());

        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let (kept2, excluded2) = select_institutions(&shuffled, &criteria);
        prop_assert_eq!(&kept, &kept2);
        prop_assert_eq!(&excluded, &excluded2);

        // Every input row is either kept or explained.
        prop_assert_eq!(kept.len() + excluded.len(), rows.len());
        for a in &kept {
            prop_assert!(a.papers() >= criteria.min_papers);
        }
    }

    #[test]
    fn rounding_stays_within_trials(raw in 0.0f64..500.0, extra in 0u64..50) {
        let n = raw.ceil() as u64 + extra;
        let y = round_successes(raw, n);
        prop_assert!(y <= n);
        prop_assert!((y as f64 - raw).abs() <= 0.5 + 1e-9);
    }
}

#[test]
fn whole_counting_sums_fractional_weights() {
    let make = |id: &str, insts: &[&str]| PaperRecord {
        paper_id: id.into(),
        doi: None,
        year: 2015,
        asjc_codes: BTreeSet::from([2705]),
        institution_ids: insts.iter().map(|s| s.to_string()).collect(),
        citations: 0,
        sjr: 0.0,
        readers: None,
        reader_counts: BTreeMap::new(),
        retrieval: Retrieval::Inline,
    };
    let records = vec![make("a", &["X"]), make("b", &["X", "Y"]), make("c", &["X"])];
    let weights: Vec<IndicatorWeights> = [("a", 1.0), ("b", 1.0 / 3.0), ("c", 0.0)]
        .iter()
        .map(|&(p, w)| IndicatorWeights {
            paper_id: p.into(),
            indicator: Indicator::Citations,
            per_asjc: BTreeMap::from([(2705, w)]),
            all_subjects: w,
        })
        .collect();
    let acc = accumulate(&weights, &records, &BTreeSet::new()).unwrap();
    let x = acc[&("X".to_string(), Subject::Area(2700), Indicator::Citations)];
    assert_eq!(x.n, 3);
    assert!((x.raw_sum - 4.0 / 3.0).abs() < 1e-12);
    assert_eq!(round_successes(x.raw_sum, x.n), 1);
    let y = acc[&("Y".to_string(), Subject::All, Indicator::Citations)];
    assert_eq!(y.n, 1);

    let stray = vec![IndicatorWeights {
        paper_id: "zz".into(),
        indicator: Indicator::Citations,
        per_asjc: BTreeMap::new(),
        all_subjects: 0.0,
    }];
    assert!(accumulate(&stray, &records, &BTreeSet::new()).is_err());
    assert!(accumulate(&[], &records, &BTreeSet::new()).unwrap().is_empty());
}

#[test]
fn covariates_are_standardized_over_institutions() {
    let mut rows = Vec::new();
    for (i, gni) in [10.0, 20.0, 30.0, 70.0].iter().enumerate() {
        // Each institution appears in two subjects; it still counts once.
        for s in [Subject::Area(1100), Subject::All] {
            let mut a = agg(&format!("I{i}"), s, 100);
            a.covariates.insert("GNI".into(), *gni);
            rows.push(a);
        }
    }
    rows.push(agg("NOVALUE", Subject::All, 100));
    let diags = attach_standardized(&mut rows, &["GNI".to_string()]).unwrap();
    assert_eq!(diags.len(), 1);
    let z: BTreeMap<&str, f64> = rows
        .iter()
        .filter(|a| a.subject == Subject::All)
        .filter_map(|a| a.standardized.get("GNI").map(|&v| (a.institution_id.as_str(), v)))
        .collect();
    assert_eq!(z.len(), 4);
    let mean = z.values().sum::<f64>() / 4.0;
    let var = z.values().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-12);
}
