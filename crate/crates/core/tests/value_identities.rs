use proptest::prelude::*;
use spider_lab::value_fn::{in_stopping_set, rescale, theta, v_hat};
use spider_lab::{EvalPoint, ValueParams};

const REL: f64 = 1e-12;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REL * (1.0 + a.abs().max(b.abs()))
}

/// A valid point for `n` ribs built from unit-interval draws.
fn point(n: usize, x_frac: f64, r: usize, recs: &[f64]) -> EvalPoint {
    match n {
        0 => {
            let s = 4.0 * recs[0] - 2.0;
            EvalPoint::line(s - 3.0 * x_frac, s)
        }
        _ => {
            let s: Vec<f64> = recs[..n].iter().map(|v| 3.0 * v).collect();
            let r = r % n;
            EvalPoint::spider(x_frac * s[r], r, s)
        }
    }
}

fn arb_point() -> impl Strategy<Value = (usize, EvalPoint)> {
    (0usize..=2, 0.0f64..=1.0, 0usize..2, prop::collection::vec(0.0f64..=1.0, 2))
        .prop_map(|(n, xf, r, recs)| (n, point(n, xf, r, &recs)))
}

proptest! {
    #![proptest_config(config(1000))]

    #[test]
    fn scaling_identity((n, p) in arb_point(), c in 0.1f64..10.0, lambda in 0.1f64..10.0) {
        let at_c = v_hat(&ValueParams::new(n, c).unwrap(), &p).unwrap();
        let scaled = EvalPoint {
            x: lambda * p.x,
            r: p.r,
            s: p.s.iter().map(|v| lambda * v).collect(),
        };
        let at_scaled = v_hat(&ValueParams::new(n, c / lambda).unwrap(), &scaled).unwrap();
        prop_assert!(close(at_scaled, lambda * at_c), "{at_scaled} vs {}", lambda * at_c);

        let params = ValueParams::new(n, c).unwrap();
        let (unit, factor) = rescale(&params, &p);
        let at_unit = v_hat(&ValueParams::new(n, 1.0).unwrap(), &unit).unwrap();
        prop_assert!(close(at_c, factor * at_unit));
    }

    #[test]
    fn rib_relabeling(xf in 0.0f64..=1.0, r in 0usize..2, recs in prop::collection::vec(0.0f64..=1.0, 2), c in 0.1f64..10.0) {
        let p = point(2, xf, r, &recs);
        let params = ValueParams::new(2, c).unwrap();
        let swapped = EvalPoint::spider(p.x, 1 - p.r, vec![p.s[1], p.s[0]]);
        prop_assert_eq!(v_hat(&params, &p).unwrap(), v_hat(&params, &swapped).unwrap());
    }

    #[test]
    fn monotone_in_records((n, p) in arb_point(), c in 0.1f64..10.0, bump in 0.0f64..1.0, j in 0usize..2) {
        let params = ValueParams::new(n, c).unwrap();
        let j = j % n.max(1);
        let mut up = p.clone();
        up.s[j] += bump;
        let (a, b) = (v_hat(&params, &p).unwrap(), v_hat(&params, &up).unwrap());
        prop_assert!(b >= a - REL * (1.0 + a.abs()), "{a} -> {b}");
    }

    #[test]
    fn stopping_set_is_contact_set((n, p) in arb_point(), c in 0.1f64..10.0) {
        let params = ValueParams::new(n, c).unwrap();
        let v = v_hat(&params, &p).unwrap();
        let sum = p.record_sum();
        let gap = v - sum;
        let scale = 1.0 + v.abs() + p.x.abs() + 1.0 / c;
        if in_stopping_set(&params, &p).unwrap() {
            prop_assert!(gap.abs() <= 1e-9 * scale, "gap {gap} inside the stopping set");
        } else {
            prop_assert!(gap >= -REL * scale);
        }
        if gap > 1e-9 * scale {
            prop_assert!(!in_stopping_set(&params, &p).unwrap());
        }
    }
}

proptest! {
    #![proptest_config(config(10_000))]

    #[test]
    fn dominates_payoff((n, p) in arb_point(), c in 0.05f64..20.0) {
        let v = v_hat(&ValueParams::new(n, c).unwrap(), &p).unwrap();
        let sum = p.record_sum();
        prop_assert!(v >= sum - REL * (1.0 + sum.abs()), "{v} < {sum}");
    }
}

#[test]
fn two_rib_seam_is_continuous() {
    for &c in &[0.5, 1.0, 2.0, 3.7] {
        let params = ValueParams::new(2, c).unwrap();
        for k in 0..=200 {
            let t = k as f64 / 200.0;
            let (si, sj) = (t / c, (1.0 - t) / c);
            for m in 0..=10 {
                let x = (si * m as f64 / 10.0).min(si);
                let on = v_hat(&params, &EvalPoint::spider(x, 0, vec![si, sj])).unwrap();
                // just inside and just outside the seam
                let eps = 1e-13 / c;
                let below = v_hat(&params, &EvalPoint::spider(x, 0, vec![si, sj - eps]));
                let above = v_hat(&params, &EvalPoint::spider(x, 0, vec![si, sj + eps])).unwrap();
                if let Ok(below) = below {
                    assert!(close(below, above), "c={c} t={t} x={x}: {below} vs {above}");
                    assert!(close(below, on));
                }
            }
        }
    }
}

#[test]
fn origin_values() {
    for n in 0..=2 {
        for &c in &[0.25, 0.5, 1.0, 2.0, 4.0] {
            let v = v_hat(&ValueParams::new(n, c).unwrap(), &EvalPoint::origin(n)).unwrap();
            assert!(close(v, theta(n).unwrap() / c));
        }
    }
}

/// On the line the optimal rule is a drawdown rule; `a - C a^2` over `a`
/// peaks at `1 / (4 C)`.
#[test]
fn line_origin_matches_best_drawdown() {
    for &c in &[0.5, 1.0, 2.0] {
        let best = (1..=100_000)
            .map(|k| {
                let a = k as f64 * 1e-5 / c;
                a - c * a * a
            })
            .fold(f64::MIN, f64::max);
        let v = v_hat(&ValueParams::new(0, c).unwrap(), &EvalPoint::origin(0)).unwrap();
        assert!((v - best).abs() < 1e-9, "c={c}: {v} vs {best}");
    }
}

#[test]
fn rejects_points_outside_the_domain() {
    let p1 = ValueParams::new(1, 1.0).unwrap();
    assert!(v_hat(&p1, &EvalPoint::spider(2.0, 0, vec![1.0])).is_err());
    assert!(v_hat(&p1, &EvalPoint::spider(0.5, 0, vec![1.0, 1.0])).is_err());
    let p0 = ValueParams::new(0, 1.0).unwrap();
    assert!(v_hat(&p0, &EvalPoint::line(1.0, 0.5)).is_err());
    assert!(v_hat(&ValueParams::new(3, 1.0).unwrap(), &EvalPoint::origin(3)).is_err());
    assert!(ValueParams::new(1, 0.0).is_err());
}
