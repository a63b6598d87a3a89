use seqspace::phantom::{build_scenario, sample, Component, MixtureSpec, ScenarioSpec};
use seqspace::stats;

fn two_mode_2d() -> MixtureSpec {
    MixtureSpec::new(vec![
        Component {
            weight: 0.3,
            mean: vec![-1.0, 0.5],
            var: vec![0.2, 0.4],
        },
        Component {
            weight: 0.7,
            mean: vec![1.5, -0.5],
            var: vec![0.3, 0.1],
        },
    ])
    .unwrap()
}

// Plain density sum, no log-space tricks; fine near the modes.
fn naive_density(spec: &MixtureSpec, sigma: f64, u: &[f64]) -> f64 {
    spec.components
        .iter()
        .map(|c| {
            let mut p = c.weight;
            for k in 0..u.len() {
                let v = c.var[k] + sigma * sigma;
                p *= (-(u[k] - c.mean[k]).powi(2) / (2.0 * v)).exp()
                    / (2.0 * std::f64::consts::PI * v).sqrt();
            }
            p
        })
        .sum()
}

#[test]
fn log_density_matches_direct_sum() {
    let spec = two_mode_2d();
    for &sigma in &[0.0, 0.1, 0.5] {
        for &u in &[[0.0, 0.0], [-1.0, 0.5], [2.0, 1.0], [0.3, -0.7]] {
            let want = naive_density(&spec, sigma, &u).ln();
            let got = spec.log_density(sigma, &u);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            assert!((spec.analytic_energy(sigma, &u) + want).abs() < 1e-12);
        }
    }
}

#[test]
fn score_is_stable_far_from_the_modes() {
    let spec = two_mode_2d();
    let s = spec.analytic_score(0.1, &[80.0, -60.0]);
    assert!(s.iter().all(|v| v.is_finite()));
    // Far out the first component dominates both coordinates.
    assert!(s[0] < 0.0 && s[1] > 0.0);
}

#[test]
fn sample_moments_match_the_mixture() {
    let spec = two_mode_2d();
    let drawn = sample(&spec, 40_000, 3).unwrap();
    assert_eq!(drawn.table.n(), 40_000);
    assert_eq!(drawn.table.coords().unwrap().len(), 40_000);
    let frac = drawn.labels.iter().filter(|&&l| l == 1).count() as f64 / 40_000.0;
    assert!((frac - 0.7).abs() < 0.01);
    let xs: Vec<f64> = drawn.table.rows().map(|r| r[0]).collect();
    let mean_x = -0.3 + 0.7 * 1.5;
    assert!((stats::mean(&xs) - mean_x).abs() < 0.02);
    assert_eq!(
        sample(&spec, 100, 3).unwrap(),
        sample(&spec, 100, 3).unwrap()
    );
    assert_ne!(
        sample(&spec, 100, 3).unwrap(),
        sample(&spec, 100, 4).unwrap()
    );
}

#[test]
fn invalid_mixtures_are_rejected() {
    let bad_weight = MixtureSpec::new(vec![Component {
        weight: 0.5,
        mean: vec![0.0],
        var: vec![1.0],
    }]);
    assert!(bad_weight.is_err());
    assert!(MixtureSpec::gaussian(vec![0.0, 0.0], vec![1.0, 0.0]).is_err());
    assert!(MixtureSpec::gaussian(vec![0.0, 0.0], vec![1.0]).is_err());
}

#[test]
fn stable_scenario_truth() {
    let sc = build_scenario(&ScenarioSpec::stable(4000, 5)).unwrap();
    assert_eq!(sc.followups.len(), 3);
    assert_eq!(sc.truth.axis_length, 4.0);
    assert_eq!(sc.truth.axis_direction, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    for (label, f) in &sc.followups {
        assert!(
            f.labels.iter().all(|&l| l == 0),
            "{label} keeps tumour rows"
        );
    }
    for t in &sc.truth.followups {
        assert_eq!(t.displaced, 0);
        assert_eq!(t.expected_drift, 0.0);
    }
    assert_eq!(sc.healthy_rows.len(), 200);
    for &i in &sc.healthy_rows {
        assert_eq!(sc.baseline.labels[i], 0);
    }
    for &i in &sc.tumour_rows {
        assert_eq!(sc.baseline.labels[i], 1);
    }
}

#[test]
fn recurrence_scenario_truth() {
    let sc = build_scenario(&ScenarioSpec::recurrence(4000, 6)).unwrap();
    let drifts: Vec<f64> = sc
        .truth
        .followups
        .iter()
        .map(|t| t.expected_drift)
        .collect();
    // Displaced share times half the mode separation.
    for (got, f) in drifts.iter().zip([0.0, 0.1, 0.2]) {
        assert!((got - 2.0 * f).abs() < 0.01, "{got}");
    }
    for (t, (_, f)) in sc.truth.followups.iter().zip(&sc.followups) {
        assert_eq!(t.n, f.table.n());
        let mean_x = stats::mean(&f.table.rows().map(|r| r[0]).collect::<Vec<_>>());
        assert!((mean_x - t.expected_drift).abs() < 0.05);
    }
    assert!(sc.truth.followups[2].oracle_delta_energy > sc.truth.followups[0].oracle_delta_energy);
    assert_eq!(
        build_scenario(&ScenarioSpec::recurrence(500, 6)).unwrap(),
        { build_scenario(&ScenarioSpec::recurrence(500, 6)).unwrap() }
    );
}
