//! Cross-checks of the library against the independent reference
//! computations in `common`: dense joint-Gaussian posteriors, brute-force
//! nonsmooth minimization, quadrature, and grid searches.

mod common;

use common::{
    batch_mean_se, coordinate_descent_oracle, dense_normal_solve, direct_loss, feasible_w0,
    random_moments, random_spd, simpson,
};
use nalgebra::{DMatrix, DVector};
use portemu::baselines::markowitz_myopic;
use portemu::em::{em_solve, EmConfig};
use portemu::ffbs::{backward_sample, backward_smooth, forward_filter};
use portemu::loss::{
    build_normal_emulator, solve_normal_multistep, ForecastMoments, LossFamily, LossSpec,
};
use portemu::mcmc::{
    find_marginal_mode, fixed_point_mode, run_chain, McmcConfig, MixtureOfNormals,
    ModeSearchConfig,
};
use portemu::LinearConstraint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

#[test]
fn smoothed_moments_match_dense_joint_gaussian() {
    // k = 2, h = 2: the stacked state is 4-dimensional, small enough to
    // compare the full joint posterior directly.
    let mut rng = ChaCha12Rng::seed_from_u64(42);
    for constrained in [false, true] {
        for _ in 0..10 {
            let moments = random_moments(2, 2, &mut rng);
            let w0 = feasible_w0(2, constrained, &mut rng);
            let constraint = constrained.then(|| LinearConstraint::sum_to_one(2).unwrap());
            let spec = LossSpec::constant(
                LossFamily::Normal,
                2.0,
                1.5,
                0.8,
                f64::INFINITY,
                0.3,
                2,
                w0,
                constraint,
            )
            .unwrap();
            let smoothed = solve_normal_multistep(&moments, &spec).unwrap();
            let dense = dense_normal_solve(&moments, &spec);
            for t in 0..2 {
                let dm = (&smoothed.means[t] - &dense.path[t]).amax();
                assert!(dm <= 1e-8, "mean mismatch {dm:.3e} at step {t}");
                let dc = (&smoothed.covariances[t] - &dense.covariances[t]).amax();
                assert!(dc <= 1e-8, "covariance mismatch {dc:.3e} at step {t}");
            }
        }
    }
}

#[test]
fn backward_samples_match_smoothed_moments() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let moments = random_moments(2, 2, &mut rng);
    let w0 = DVector::from_row_slice(&[0.2, 0.5]);
    let spec = LossSpec::constant(
        LossFamily::Normal,
        1.0,
        1.0,
        1.0,
        f64::INFINITY,
        0.4,
        2,
        w0,
        None,
    )
    .unwrap();
    let model = build_normal_emulator(&moments, &spec).unwrap();
    let filter = forward_filter(&model).unwrap();
    let smoothed = backward_smooth(&filter, &model).unwrap();

    let n = 10_000;
    let mut sum = DVector::zeros(2);
    let mut sumsq = DMatrix::zeros(2, 2);
    let mut draw_rng = ChaCha12Rng::seed_from_u64(91);
    for _ in 0..n {
        let w1 = backward_sample(&filter, &model, &mut draw_rng).unwrap().means[0].clone();
        sum += &w1;
        sumsq.ger(1.0, &w1, &w1, 1.0);
    }
    let mean = &sum / n as f64;
    let cov = (&sumsq - &sum * sum.transpose() / n as f64) / (n as f64 - 1.0);

    let s1 = &smoothed.means[0];
    let c1 = &smoothed.covariances[0];
    for i in 0..2 {
        let se = (c1[(i, i)] / n as f64).sqrt();
        assert!(
            (mean[i] - s1[i]).abs() <= 4.0 * se,
            "sample mean off: {} vs {} (se {se:.2e})",
            mean[i],
            s1[i]
        );
        for j in 0..2 {
            let se_cov =
                ((c1[(i, i)] * c1[(j, j)] + c1[(i, j)] * c1[(i, j)]) / n as f64).sqrt();
            assert!(
                (cov[(i, j)] - c1[(i, j)]).abs() <= 4.0 * se_cov,
                "sample covariance off at ({i},{j})"
            );
        }
    }
}

#[test]
fn hard_target_no_turnover_limit_is_markowitz() {
    // h = 1, lambda = inf, alpha = 0: the loss collapses to the classical
    // minimum-variance program with a hard return target.
    let mut rng = ChaCha12Rng::seed_from_u64(19);
    for _ in 0..5 {
        let k = 4;
        let precision = random_spd(k, &mut rng);
        let f = DVector::from_fn(k, |i, _| 0.01 * (i as f64 + 1.0) + rng.random_range(0.0..0.005));
        let target = 0.022;
        let moments = ForecastMoments::new(vec![f.clone()], vec![precision.clone()]).unwrap();
        let spec = LossSpec::constant(
            LossFamily::Normal,
            0.0,
            2.0,
            f64::INFINITY,
            f64::INFINITY,
            target,
            1,
            DVector::from_element(k, 1.0 / k as f64),
            Some(LinearConstraint::sum_to_one(k).unwrap()),
        )
        .unwrap();
        let solved = solve_normal_multistep(&moments, &spec).unwrap();
        let direct = markowitz_myopic(&f, &precision, target).unwrap();
        assert!(
            (&solved.means[0] - &direct).amax() <= 1e-8,
            "limit solve differs from the closed-form program"
        );
    }
}

#[test]
fn em_matches_brute_force_minimizer() {
    let mut rng = ChaCha12Rng::seed_from_u64(23);
    for constrained in [false, true] {
        for family in [LossFamily::Laplace, LossFamily::ExtendedLaplace] {
            let moments = random_moments(2, 2, &mut rng);
            let w0 = feasible_w0(2, constrained, &mut rng);
            let constraint = constrained.then(|| LinearConstraint::sum_to_one(2).unwrap());
            let gamma = if family == LossFamily::ExtendedLaplace { 3.0 } else { f64::INFINITY };
            let spec = LossSpec::constant(
                family,
                1.0,
                1.0,
                2.0,
                gamma,
                0.25,
                2,
                w0.clone(),
                constraint,
            )
            .unwrap();
            let em = em_solve(&moments, &spec, &EmConfig::default()).unwrap();
            let em_loss = direct_loss(&em.path, &moments, &spec);
            let start = vec![w0.clone(); 2];
            let (_, oracle_loss) =
                coordinate_descent_oracle(&moments, &spec, &start, 400);
            assert!(
                em_loss <= oracle_loss + 1e-6,
                "EM loss {em_loss} above brute-force loss {oracle_loss}"
            );
        }
    }
}

#[test]
fn strong_shrinkage_produces_sparser_weights() {
    let f = DVector::from_row_slice(&[1.0, 0.8, 0.6, 0.4]);
    let moments = ForecastMoments::new(
        vec![f.clone(), f.clone()],
        vec![DMatrix::identity(4, 4), DMatrix::identity(4, 4)],
    )
    .unwrap();
    let w0 = DVector::zeros(4);
    let base = LossSpec::constant(
        LossFamily::ExtendedLaplace,
        0.5,
        1.0,
        5.0,
        f64::INFINITY,
        1.0,
        2,
        w0.clone(),
        None,
    )
    .unwrap();
    let shrunk = LossSpec::constant(
        LossFamily::ExtendedLaplace,
        0.5,
        1.0,
        5.0,
        1.0,
        1.0,
        2,
        w0,
        None,
    )
    .unwrap();
    let cfg = EmConfig::default();
    let loose = em_solve(&moments, &base, &cfg).unwrap();
    let tight = em_solve(&moments, &shrunk, &cfg).unwrap();
    let count = |w: &DVector<f64>| w.iter().filter(|x| x.abs() > 1e-4).count();
    let n_loose = count(loose.decision());
    let n_tight = count(tight.decision());
    assert!(n_loose > 0, "baseline should trade");
    assert!(
        n_tight < n_loose,
        "shrinkage did not sparsify: {n_tight} vs {n_loose} nonzeros"
    );
}

#[test]
fn weak_turnover_chain_collapses_to_normal_marginal() {
    // lambda = 1e6 makes the absolute penalty negligible; the sampled
    // mixture must agree with the exact Gaussian marginal.
    let mut rng = ChaCha12Rng::seed_from_u64(31);
    let moments = random_moments(2, 2, &mut rng);
    let w0 = DVector::from_row_slice(&[0.5, 0.5]);
    let constraint = LinearConstraint::sum_to_one(2).unwrap();
    let laplace = LossSpec::constant(
        LossFamily::Laplace,
        1.0,
        1.0,
        1e6,
        f64::INFINITY,
        0.3,
        2,
        w0.clone(),
        Some(constraint.clone()),
    )
    .unwrap();
    let normal = LossSpec::constant(
        LossFamily::Normal,
        1.0,
        1.0,
        1e6,
        f64::INFINITY,
        0.3,
        2,
        w0,
        Some(constraint),
    )
    .unwrap();
    let cfg = McmcConfig { iterations: 6000, burn_in: Some(1000), seed: 3, ..McmcConfig::default() };
    let chain = run_chain(&moments, &laplace, &cfg).unwrap();
    let exact = solve_normal_multistep(&moments, &normal).unwrap();

    let series: Vec<Vec<f64>> = (0..2)
        .map(|i| chain.mixture.components().map(|(m, _)| m[i]).collect())
        .collect();
    for i in 0..2 {
        let (mean, se) = batch_mean_se(&series[i]);
        let gap = (mean - exact.means[0][i]).abs();
        assert!(
            gap <= 3.0 * se + 1e-4,
            "coordinate {i}: mixture mean {mean} vs exact {} (se {se:.2e})",
            exact.means[0][i]
        );
    }
}

#[test]
fn scalar_chain_mean_matches_quadrature() {
    // h = 1, k = 1, unconstrained: the first-step marginal is available by
    // direct integration of exp(-L/2).
    let moments = ForecastMoments::new(
        vec![DVector::from_element(1, 1.0)],
        vec![DMatrix::from_element(1, 1, 1.0)],
    )
    .unwrap();
    let spec = LossSpec::constant(
        LossFamily::Laplace,
        1.0,
        1.0,
        1.5,
        f64::INFINITY,
        0.8,
        1,
        DVector::zeros(1),
        None,
    )
    .unwrap();
    let loss = |w: f64| {
        let path = vec![DVector::from_element(1, w)];
        direct_loss(&path, &moments, &spec)
    };
    let z = simpson(|w| (-0.5 * loss(w)).exp(), -12.0, 12.0, 12_000);
    let first = simpson(|w| w * (-0.5 * loss(w)).exp(), -12.0, 12.0, 12_000);
    let exact_mean = first / z;

    let cfg =
        McmcConfig { iterations: 100_000, burn_in: Some(10_000), seed: 8, ..McmcConfig::default() };
    let chain = run_chain(&moments, &spec, &cfg).unwrap();
    let mean = chain.mixture.mean()[0];
    assert!(
        (mean - exact_mean).abs() <= 0.005,
        "chain mean {mean} vs quadrature {exact_mean}"
    );
}

#[test]
fn independent_chains_agree() {
    let mut rng = ChaCha12Rng::seed_from_u64(59);
    let moments = random_moments(2, 2, &mut rng);
    let w0 = DVector::from_row_slice(&[0.7, 0.3]);
    let spec = LossSpec::constant(
        LossFamily::Laplace,
        1.0,
        1.0,
        2.0,
        f64::INFINITY,
        0.2,
        2,
        w0,
        Some(LinearConstraint::sum_to_one(2).unwrap()),
    )
    .unwrap();
    let base = McmcConfig { iterations: 8000, burn_in: Some(1500), ..McmcConfig::default() };
    let a = run_chain(&moments, &spec, &McmcConfig { seed: 100, ..base.clone() }).unwrap();
    let b = run_chain(&moments, &spec, &McmcConfig { seed: 200, ..base }).unwrap();
    for i in 0..2 {
        let sa: Vec<f64> = a.mixture.components().map(|(m, _)| m[i]).collect();
        let sb: Vec<f64> = b.mixture.components().map(|(m, _)| m[i]).collect();
        let (ma, ea) = batch_mean_se(&sa);
        let (mb, eb) = batch_mean_se(&sb);
        let combined = (ea * ea + eb * eb).sqrt();
        assert!(
            (ma - mb).abs() <= 3.0 * combined + 1e-5,
            "coordinate {i}: chains disagree, {ma} vs {mb} (se {combined:.2e})"
        );
    }
}

fn scalar_mixture(points: &[(f64, f64)]) -> MixtureOfNormals {
    MixtureOfNormals::new(
        points
            .iter()
            .map(|&(m, v)| (DVector::from_element(1, m), DMatrix::from_element(1, 1, v)))
            .collect(),
    )
    .unwrap()
}

fn grid_argmax(mix: &MixtureOfNormals, lo: f64, hi: f64, step: f64) -> f64 {
    let mut best_x = lo;
    let mut best = f64::NEG_INFINITY;
    let n = ((hi - lo) / step).round() as usize;
    for i in 0..=n {
        let x = lo + i as f64 * step;
        let v = mix.log_density(&DVector::from_element(1, x));
        if v > best {
            best = v;
            best_x = x;
        }
    }
    best_x
}

#[test]
fn symmetric_bimodal_fixed_point_agrees_with_grid() {
    // Equal mixture of N(-3, 1) and N(3, 1): a fixed-point run from -3 must
    // land on the left mode, whose location the grid search pins down.
    let mix = scalar_mixture(&[(-3.0, 1.0), (3.0, 1.0)]);
    let grid_mode = grid_argmax(&mix, -4.0, 4.0, 1e-4);
    let run = fixed_point_mode(&mix, &DVector::from_element(1, -3.0), &ModeSearchConfig::default())
        .unwrap();
    assert!(run.converged);
    assert!(
        (run.point[0] - grid_mode).abs() <= 1e-3,
        "fixed point {} vs grid {grid_mode}",
        run.point[0]
    );
}

#[test]
fn tight_unimodal_mode_sits_at_the_mean() {
    let spread = 0.01;
    let mix = scalar_mixture(&[(0.20, spread * spread), (0.21, spread * spread)]);
    let found = find_marginal_mode(&mix, &ModeSearchConfig::default()).unwrap();
    assert!(!found.warning);
    let grid_mode = grid_argmax(&mix, 0.1, 0.3, 1e-5);
    assert!((found.point[0] - grid_mode).abs() <= 1e-3);
    assert!((found.point[0] - mix.mean()[0]).abs() <= spread);
}

#[test]
fn turnover_rises_and_loss_falls_as_the_penalty_weakens() {
    // Re-solving across a lambda ladder: the optimal total loss is
    // pointwise non-increasing in lambda, and the raw turnover of the
    // optimum is non-decreasing (standard exchange argument).
    let mut rng = ChaCha12Rng::seed_from_u64(71);
    for constrained in [false, true] {
        for _ in 0..10 {
            let moments = random_moments(3, 3, &mut rng);
            let w0 = feasible_w0(3, constrained, &mut rng);
            let ladder = [0.5, 1.0, 2.0, 5.0, 20.0, 100.0];
            let mut last_loss = f64::INFINITY;
            let mut last_turnover = -f64::INFINITY;
            for &lambda in &ladder {
                let constraint =
                    constrained.then(|| LinearConstraint::sum_to_one(3).unwrap());
                let spec = LossSpec::constant(
                    LossFamily::Normal,
                    1.0,
                    1.0,
                    lambda,
                    f64::INFINITY,
                    0.3,
                    3,
                    w0.clone(),
                    constraint,
                )
                .unwrap();
                let solved = solve_normal_multistep(&moments, &spec).unwrap();
                let loss = direct_loss(&solved.means, &moments, &spec);
                // Raw turnover: the quadratic form without its lambda weight.
                let mut turnover = 0.0;
                for t in 0..3 {
                    let prev = if t == 0 { &spec.initial_weights } else { &solved.means[t - 1] };
                    let d = &solved.means[t] - prev;
                    turnover += d.norm_squared();
                }
                assert!(
                    loss <= last_loss + 1e-9 * last_loss.abs().max(1.0),
                    "loss rose along the ladder at lambda = {lambda}"
                );
                assert!(
                    turnover >= last_turnover - 1e-9 * last_turnover.abs().max(1.0),
                    "turnover fell along the ladder at lambda = {lambda}"
                );
                last_loss = loss;
                last_turnover = turnover;
            }
        }
    }
}
