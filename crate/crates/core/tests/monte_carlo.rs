use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spider_lab::mc::{bound_check, estimate, simulate_outcomes, EstimateOptions, DEFAULT_KAPPA};
use spider_lab::{InitialState, SpiderError, StoppingRule, ValueParams, WalkConfig};

fn opts(threads: usize) -> EstimateOptions {
    EstimateOptions {
        threads,
        ..EstimateOptions::default()
    }
}

#[test]
fn estimates_do_not_depend_on_thread_count() {
    for n in 0..=2 {
        let rule = StoppingRule::FirstEntry { c: 1.0 };
        let params = ValueParams::new(n, 1.0).unwrap();
        let config = WalkConfig::new(0.05, n, 42, 1_000_000).unwrap();
        let one = estimate(&rule, &params, &config, 5_000, &opts(1)).unwrap();
        let many = estimate(&rule, &params, &config, 5_000, &opts(5)).unwrap();
        assert_eq!(
            serde_json::to_string(&one).unwrap(),
            serde_json::to_string(&many).unwrap()
        );
    }
}

#[test]
fn seeds_change_the_sample() {
    let rule = StoppingRule::Drawdown { a: 0.5 };
    let params = ValueParams::new(1, 1.0).unwrap();
    let a = estimate(&rule, &params, &WalkConfig::new(0.05, 1, 1, 1_000_000).unwrap(), 1000, &opts(0)).unwrap();
    let b = estimate(&rule, &params, &WalkConfig::new(0.05, 1, 2, 1_000_000).unwrap(), 1000, &opts(0)).unwrap();
    assert_ne!(a.mean_s, b.mean_s);
}

/// For the simple random walk a drawdown of `k` steps gives `E S = k h` and
/// `E tau = (k h)^2 + k h^2`, so lattice answers are known exactly.
#[test]
fn lattice_drawdown_moments() {
    let h = 0.1;
    let a = 1.0;
    let config = WalkConfig::new(h, 0, 9, 1_000_000).unwrap();
    let est = estimate(
        &StoppingRule::Drawdown { a },
        &ValueParams::new(0, 1.0).unwrap(),
        &config,
        40_000,
        &opts(0),
    )
    .unwrap();
    assert!((est.mean_s - a).abs() < 4.0 * est.se_s, "{est:?}");
    let tau = a * a + a * h;
    assert!((est.mean_tau - tau).abs() < 4.0 * est.se_tau, "{est:?}");
}

#[test]
fn delta_method_agrees_with_bootstrap() {
    let rule = StoppingRule::Drawdown { a: 0.7 };
    let config = WalkConfig::new(0.05, 1, 3, 1_000_000).unwrap();
    let est = estimate(&rule, &ValueParams::new(1, 1.0).unwrap(), &config, 4_000, &opts(0)).unwrap();
    // same seed, so these are the paths behind `est`
    let outcomes = simulate_outcomes(&InitialState::origin(1), &rule, &config, 4_000, 0).unwrap();

    let s: Vec<f64> = outcomes.iter().map(|o| o.record_sum()).collect();
    let tau: Vec<f64> = outcomes.iter().map(|o| o.tau).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ratios: Vec<f64> = (0..1000)
        .map(|_| {
            let (mut ss, mut st) = (0.0, 0.0);
            for _ in 0..s.len() {
                let i = rng.gen_range(0..s.len());
                ss += s[i];
                st += tau[i];
            }
            let m = s.len() as f64;
            (ss / m) / (st / m).sqrt()
        })
        .collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let sd = (ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (ratios.len() - 1) as f64).sqrt();
    let rel = (sd - est.se_ratio).abs() / est.se_ratio;
    assert!(rel < 0.2, "bootstrap {sd} vs delta {}", est.se_ratio);
}

/// Records left on the two ribs have the same law.
#[test]
fn ribs_are_exchangeable() {
    let config = WalkConfig::new(0.05, 2, 5, 1_000_000).unwrap();
    let out = simulate_outcomes(
        &InitialState::origin(2),
        &StoppingRule::FirstEntry { c: 1.0 },
        &config,
        20_000,
        0,
    )
    .unwrap();
    let d: Vec<f64> = out.iter().map(|o| o.s_final[0] - o.s_final[1]).collect();
    let m = d.len() as f64;
    let mean = d.iter().sum::<f64>() / m;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    assert!(mean.abs() < 4.0 * sd / m.sqrt(), "mean difference {mean}");

    let ahead = out.iter().filter(|o| o.s_final[0] > o.s_final[1]).count() as f64;
    let behind = out.iter().filter(|o| o.s_final[0] < o.s_final[1]).count() as f64;
    let z = (ahead - behind) / (ahead + behind).sqrt();
    assert!(z.abs() < 4.0, "sign test z = {z}");
}

#[test]
fn bound_holds_for_a_coarse_first_entry_run() {
    for n in 0..=2 {
        let config = WalkConfig::new(0.05, n, 8, 1_000_000).unwrap();
        let est = estimate(
            &StoppingRule::FirstEntry { c: 1.0 },
            &ValueParams::new(n, 1.0).unwrap(),
            &config,
            5_000,
            &opts(0),
        )
        .unwrap();
        let check = bound_check(&est, n, DEFAULT_KAPPA).unwrap();
        assert!(check.satisfied, "n={n}: {est:?} {check:?}");
    }
}

#[test]
fn censoring_is_reported() {
    let config = WalkConfig::new(0.1, 1, 1, 50).unwrap();
    let err = estimate(
        &StoppingRule::SumThreshold { b: 5.0 },
        &ValueParams::new(1, 1.0).unwrap(),
        &config,
        200,
        &opts(1),
    )
    .unwrap_err();
    assert!(matches!(err, SpiderError::ExcessiveCensoring { .. }));
}
