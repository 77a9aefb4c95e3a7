use tailsgd::bounds::sigma2_mle;
use tailsgd::harness::experiment::run_experiment;
use tailsgd::harness::sweep::{parse_grid, sweep};
use tailsgd::harness::verify::verify_lemmas;
use tailsgd::harness::{parse_config, ExperimentConfig};
use tailsgd::stationary::{CovarianceProblem, QuadraticOperatorS};
use tailsgd::{Error, SpdMat, SymMat};

fn config(text: &str) -> ExperimentConfig {
    parse_config(text).unwrap()
}

#[test]
fn noiseless_start_at_optimum_has_zero_risk() {
    let cfg = config(
        r#"
        T = 500
        replicates = 10
        w0 = [1.0, 2.0]
        [distribution]
        kind = "gaussian_well_specified"
        d = 2
        w_star = [1.0, 2.0]
        noise_sigma = 0.0
        "#,
    );
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.risk.mean, 0.0);
    assert_eq!(r.risk.stderr, 0.0);
    assert!(r.bound.total >= 0.0);
    assert!(r.efficiency_ratio.is_none());
}

#[test]
fn well_specified_variance_regime_meets_bound_and_efficiency() {
    let cfg = config(
        r#"
        T = 20000
        t_rule = "explicit"
        t = 10000
        replicates = 1000
        seed = 12
        w0 = [0.3, -0.2, 0.1]
        [distribution]
        kind = "gaussian_well_specified"
        d = 3
        w_star = [0.3, -0.2, 0.1]
        noise_sigma = 1.0
        "#,
    );
    let r = run_experiment(&cfg).unwrap();
    // gamma R^2 = 1/2 gives a variance factor of exactly 2
    let want = 2.0 * sigma2_mle(&cfg.moments) / 1e4;
    assert!((r.bound.total - want).abs() < 1e-15 * want.max(1.0));
    assert!(
        r.risk.mean <= r.bound.total,
        "{} > {}",
        r.risk.mean,
        r.bound.total
    );
    let e = r.efficiency_ratio.unwrap();
    assert!((0.5..=2.0).contains(&e), "efficiency {e}");
    assert_eq!(r.bias_risk.mean, 0.0);
}

#[test]
fn misspecified_family_with_rho_stepsize_meets_bound() {
    let cfg = config(
        r#"
        T = 8000
        replicates = 300
        seed = 4
        gamma_rule = "half_inv_rho_R2"
        [distribution]
        kind = "gaussian_misspecified"
        H = [[1.0, 0.2, 0.0], [0.2, 0.6, 0.0], [0.0, 0.0, 0.3]]
        w_star = [1.0, -1.0, 0.5]
        noise_sigma = 1.0
        "#,
    );
    assert!(cfg.moments.is_exact());
    let r = run_experiment(&cfg).unwrap();
    assert!(r.rate_constants.rho_misspec.unwrap() > 1.0);
    assert!(r.risk.mean - 1.96 * r.risk.stderr <= r.bound.total);
}

#[test]
fn verify_suite_passes_on_grid_points() {
    for rule in ["half_inv_R2", "frac_inv_R2:0.99"] {
        let cfg = config(&format!(
            r#"
            T = 4000
            replicates = 200
            gamma_rule = "{rule}"
            [distribution]
            kind = "gaussian_well_specified"
            d = 3
            H = [[1.0, 0.0, 0.0], [0.0, 0.6666666666666666, 0.0], [0.0, 0.0, 0.5]]
            w_star = [0.5773502691896258, -0.5773502691896258, 0.5773502691896258]
            noise_sigma = 1.0
            "#
        ));
        let table = verify_lemmas(&cfg).unwrap();
        let failed: Vec<_> = table.failures().collect();
        assert!(table.all_passed, "{rule}: {failed:?}");
        assert!(table.rows.len() >= 20);
    }
}

#[test]
fn corrupted_noise_covariance_is_rejected() {
    let h = SpdMat::identity(2);
    let bad = SymMat::from_rows(&[vec![1.0, 0.0], vec![0.0, -0.5]]).unwrap();
    let err =
        CovarianceProblem::new(h.clone(), QuadraticOperatorS::gaussian(h), bad, 0.1).unwrap_err();
    assert!(matches!(err, Error::NotPositiveSemidefinite(_)));
}

#[test]
fn sweep_risk_scales_inversely_with_horizon() {
    let grid = parse_grid(
        r#"
        seed = 21
        replicates = 200
        [grid]
        d = [3]
        family = ["well_specified"]
        gamma_rule = ["half_inv_R2"]
        T = [1000, 10000, 100000]
        "#,
    )
    .unwrap();
    let rows = sweep(&grid, 0);
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.horizon as f64).ln(), r.emp_risk.unwrap().ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!(slope > -1.3 && slope < -0.7, "slope {slope}");
}

#[test]
fn variance_bound_grows_with_stepsize() {
    let grid = parse_grid(
        r#"
        seed = 22
        replicates = 20
        [grid]
        d = [3]
        family = ["well_specified", "misspecified"]
        gamma_rule = ["frac_inv_R2:0.2", "frac_inv_R2:0.5", "frac_inv_R2:0.9"]
        T = [2000]
        "#,
    )
    .unwrap();
    let rows = sweep(&grid, 0);
    for family in rows.chunks(3) {
        let v: Vec<f64> = family.iter().map(|r| r.var_bound.unwrap()).collect();
        assert!(v[0] < v[1] && v[1] < v[2], "{v:?}");
    }
}
