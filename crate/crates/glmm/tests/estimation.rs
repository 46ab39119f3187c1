use exmap_glmm::fit::EstimationMethod;
use exmap_glmm::simulate::{simulate, SimulationSpec};
use exmap_glmm::{
    fit, fit_ml, fit_pql, intercept_model, logit, report, ClusterInput, CshCovariance, FitConfig, Method,
    StackedDesign,
};

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("k{i}")).collect()
}

fn spec(beta: Vec<f64>, sigma2: Vec<f64>, rho: f64, clusters: usize, trials: (u64, u64)) -> SimulationSpec {
    SimulationSpec {
        indicators: names(beta.len()),
        beta,
        cov: CshCovariance::new(sigma2, rho).unwrap(),
        clusters,
        trials,
        covariate_slopes: None,
    }
}

#[test]
fn recovers_generating_parameters() {
    let s = spec(vec![-1.9, -2.6, -1.2], vec![0.2, 0.4, 0.3], 0.7, 400, (200, 1000));
    let sim = simulate(&s, 11).unwrap();
    let r = fit_ml(&sim.design, &FitConfig::default()).unwrap();
    assert_eq!(r.method, EstimationMethod::AdaptiveQuadrature { nodes: 7 });
    for (b, t) in r.beta().iter().zip(&s.beta) {
        assert!((b - t).abs() < 0.08, "beta {b} vs {t}");
    }
    for (v, t) in r.variance.iter().zip(&s.cov.sigma2) {
        assert!((v.sigma2 / t - 1.0).abs() < 0.25, "sigma2 {} vs {t}", v.sigma2);
        assert!(v.wald.significant);
    }
    assert!((r.correlation.rho - 0.7).abs() < 0.08, "rho {}", r.correlation.rho);
    assert!(r.convergence.gradient_norm < 1e-6);
}

#[test]
fn refitting_is_bit_identical() {
    let sim = simulate(&spec(vec![-2.0, -1.5], vec![0.3, 0.3], 0.5, 80, (50, 300)), 2).unwrap();
    let a = fit_ml(&sim.design, &FitConfig::default()).unwrap();
    let b = fit_ml(&sim.design, &FitConfig::default()).unwrap();
    assert_eq!(a, b);
    let c = fit_pql(&sim.design, &FitConfig::default()).unwrap();
    let d = fit_pql(&sim.design, &FitConfig::default()).unwrap();
    assert_eq!(c, d);
}

#[test]
fn zero_generating_variance_lands_on_the_boundary() {
    let sim = simulate(&spec(vec![-2.0, -1.5, -1.0], vec![0.0, 0.4, 0.3], 0.6, 300, (100, 500)), 5).unwrap();
    let r = fit_ml(&sim.design, &FitConfig::default()).unwrap();
    let v = &r.variance[0];
    assert!(v.sigma2 < 0.01, "sigma2 {}", v.sigma2);
    assert!(!v.wald.significant, "{v:?}");
    assert!(r.variance[1].wald.significant && r.variance[2].wald.significant);
}

#[test]
fn pseudo_likelihood_agrees_with_ml_for_large_clusters() {
    let sim = simulate(&spec(vec![-2.2, -1.6, -2.6], vec![0.25, 0.35, 0.3], 0.72, 150, (10_000, 20_000)), 9).unwrap();
    let ml = fit_ml(&sim.design, &FitConfig::default()).unwrap();
    let pql = fit_pql(&sim.design, &FitConfig::default()).unwrap();
    assert_eq!(pql.method, EstimationMethod::PseudoLikelihood);
    for (a, b) in ml.beta().iter().zip(pql.beta()) {
        assert!((a - b).abs() < 0.02, "{a} vs {b}");
    }
}

fn constant_rate_design(k: usize) -> StackedDesign {
    let clusters = (0..30)
        .map(|j| ClusterInput {
            id: format!("c{j:02}"),
            covariate: None,
            outcomes: (0..k).map(|i| Some(((i as u64 + 1) * 10, 100))).collect(),
        })
        .collect();
    StackedDesign::build(names(k), clusters, None).unwrap()
}

#[test]
fn pseudo_likelihood_without_heterogeneity_returns_pooled_logits() {
    let d = constant_rate_design(2);
    let r = fit_pql(&d, &FitConfig::default()).unwrap();
    assert!((r.beta()[0] - logit(0.1).unwrap()).abs() < 1e-4, "{:?}", r.beta());
    assert!((r.beta()[1] - logit(0.2).unwrap()).abs() < 1e-4, "{:?}", r.beta());
}

#[test]
fn failing_ml_falls_back_to_pseudo_likelihood() {
    let sim = simulate(&spec(vec![-2.0, -1.5], vec![0.3, 0.3], 0.5, 60, (50, 300)), 4).unwrap();
    let cfg = FitConfig {
        max_iter: 2,
        ..FitConfig::default()
    };
    let r = fit(&sim.design, &cfg).unwrap();
    assert_eq!(r.method, EstimationMethod::PseudoLikelihood);
    assert!(r.convergence.ml_failure.is_some());

    let forced = FitConfig {
        method: Method::Pql,
        ..FitConfig::default()
    };
    assert_eq!(fit(&sim.design, &forced).unwrap().method, EstimationMethod::PseudoLikelihood);
}

#[test]
fn intercept_model_centres_symmetric_indicators() {
    let sim = simulate(&spec(vec![-2.0; 4], vec![0.3; 4], 0.6, 300, (200, 800)), 8).unwrap();
    let im = intercept_model(&sim.design, &FitConfig::default()).unwrap();
    assert!((im.intercept + 2.0).abs() < 0.05, "intercept {}", im.intercept);
    let ml = fit_ml(&sim.design, &FitConfig::default()).unwrap();
    let mean_beta = ml.beta().iter().sum::<f64>() / 4.0;
    assert!((im.intercept - mean_beta).abs() < 0.02);
}

#[test]
fn intercept_model_of_one_indicator_is_its_coefficient() {
    let sim = simulate(&spec(vec![-1.7], vec![0.4], 0.0, 120, (100, 400)), 3).unwrap();
    let im = intercept_model(&sim.design, &FitConfig::default()).unwrap();
    let ml = fit_ml(&sim.design, &FitConfig::default()).unwrap();
    assert!((im.intercept - ml.beta()[0]).abs() < 1e-4);
}

#[test]
fn covariate_model_reference_is_the_main_effect() {
    let mut s = spec(vec![-2.0, -1.5], vec![0.3, 0.2], 0.5, 300, (200, 600));
    s.covariate_slopes = Some(vec![0.4, -0.2]);
    let sim = simulate(&s, 12).unwrap();
    let r = fit_ml(&sim.design, &FitConfig::default()).unwrap();
    assert_eq!(r.fixed.len(), 4);
    assert_eq!(r.reference_logits, r.beta()[..2].to_vec());
    assert!((r.beta()[2] - 0.4).abs() < 0.1 && (r.beta()[3] + 0.2).abs() < 0.1, "{:?}", r.beta());
    let base = fit_ml(&sim.design.without_covariate(), &FitConfig::default()).unwrap();
    let r2 = report::explained_variance(&base, &r).unwrap();
    assert!(r2[0].unwrap().value > 0.2);
    let text = report::render(&r, Some(&base)).unwrap();
    assert!(text.contains("CSH correlation") && text.contains("x×k1"));
}

#[test]
fn negative_correlation_is_fitted_by_laplace() {
    let sim = simulate(&spec(vec![-1.5, -1.5, -1.5], vec![0.4, 0.4, 0.4], -0.3, 300, (100, 400)), 21).unwrap();
    let r = fit_ml(&sim.design, &FitConfig::default()).unwrap();
    assert_eq!(r.method, EstimationMethod::Laplace);
    assert!((r.correlation.rho + 0.3).abs() < 0.12, "rho {}", r.correlation.rho);
}

#[test]
fn scores_are_consistent_with_effects() {
    let sim = simulate(&spec(vec![-2.0, -1.0], vec![0.3, 0.3], 0.5, 100, (50, 500)), 13).unwrap();
    let r = fit_ml(&sim.design, &FitConfig::default()).unwrap();
    let scores = r.scores().unwrap();
    assert_eq!(scores.len(), 200);
    for s in &scores {
        let i = &s.interval;
        assert!(i.adjusted.lower < i.probability && i.probability < i.adjusted.upper);
        assert!(!(s.above_mean && s.below_mean));
    }
    // Posterior effects average to roughly zero per indicator.
    for k in 0..2 {
        let mean = r.eb.iter().map(|e| e.u[k]).sum::<f64>() / r.eb.len() as f64;
        assert!(mean.abs() < 0.1, "{mean}");
    }
}
