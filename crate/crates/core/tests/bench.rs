use mkv_core::bench::{oracle_policy, solve_lq_oracle, LQSpec, LinearFeedbackFamily};
use mkv_core::timebase::TimeGrid;
use mkv_core::value::{estimate_value, estimate_value_richardson, optimize_value};

fn instances() -> Vec<LQSpec> {
    vec![
        LQSpec::default(),
        LQSpec { a: 0.3, a_bar: -0.4, sigma0: 0.0, q_bar_t: 0.5, mu0: -0.5, v0: 0.5, ..LQSpec::default() },
        LQSpec { b_c: 2.0, r: 1.0, q: 0.2, sigma: 0.8, sigma0: 0.6, horizon: 0.5, ..LQSpec::default() },
    ]
}

/// The oracle feedback, simulated, reproduces the oracle value. Richardson
/// extrapolation removes the first-order time-discretization bias that
/// would otherwise dominate the Monte-Carlo error.
#[test]
fn oracle_feedback_attains_the_oracle_value() {
    for lq in instances() {
        let spec = lq.to_problem().unwrap();
        let grid = TimeGrid::new(lq.horizon, 40).unwrap();
        let (policy, oracle) = oracle_policy(&lq, &grid).unwrap();
        let est = estimate_value_richardson(&spec, &policy, 512, 128, &grid, 3).unwrap();
        assert!((est.mean - oracle).abs() <= 3.0 * est.std_error, "{lq:?}: {} ± {} vs {oracle}", est.mean, est.std_error);
    }
}

/// Plain Euler on a fine grid agrees too, with a looser bias budget.
#[test]
fn euler_estimate_approaches_the_oracle() {
    let lq = LQSpec::default();
    let spec = lq.to_problem().unwrap();
    let grid = TimeGrid::new(1.0, 200).unwrap();
    let (policy, oracle) = oracle_policy(&lq, &grid).unwrap();
    let est = estimate_value(&spec, &policy, 256, 64, &grid, 4).unwrap();
    // first-order bias is about 0.65 / m
    assert!((est.mean - oracle).abs() <= 3.0 * est.std_error + 0.65 / 200.0 * 1.5, "{} ± {} vs {oracle}", est.mean, est.std_error);
}

#[test]
fn search_never_beats_the_oracle() {
    let lq = LQSpec::default();
    let spec = lq.to_problem().unwrap();
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let (_, oracle) = solve_lq_oracle(&lq, lq.mu0, lq.v0, &grid).unwrap();
    let res = optimize_value(&spec, &LinearFeedbackFamily::new(1.0, 2), 256, 64, 16, &grid, 9).unwrap();
    assert!(res.best.mean <= oracle + 3.0 * res.best.std_error, "{} ± {} vs {oracle}", res.best.mean, res.best.std_error);
}
