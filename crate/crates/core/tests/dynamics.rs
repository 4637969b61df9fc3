//! Qualitative stage pattern of the logits of a primary state along a long run.

use pglab_core::hard::{StateClass, A0, A1, A2};
use pglab_core::*;

fn argmax(xs: &[f64]) -> usize {
    (0..xs.len()).max_by(|&i, &j| xs[i].total_cmp(&xs[j])).unwrap()
}

fn argmin(xs: &[f64]) -> usize {
    (0..xs.len()).min_by(|&i, &j| xs[i].total_cmp(&xs[j])).unwrap()
}

#[test]
fn primary_logits_follow_the_stage_pattern() {
    let mut p = HardMdpParams::desk(0.9, 1000, 6);
    p.c_b1 = 0.2;
    p.c_b2 = 0.2;
    p.c_m = 0.4;
    p.c_p = 0.1;
    let inst = collapsed_instance(&p, Variant::Base).unwrap();
    let mut cfg = PgConfig::new(0.01 / 6.0, 20_000_000).without_error_stops();
    cfg.stop_when_crossed = true;
    let res = run(&inst, &cfg, Algorithm::Pg).unwrap();
    let s3 = res
        .monitored
        .iter()
        .find(|m| m.class == Some(StateClass::Primary(3)))
        .unwrap()
        .state;
    let series = res.series(s3);
    let trace = |a| {
        series
            .iter()
            .map(|(_, st)| st.theta_of(a).unwrap())
            .collect::<Vec<f64>>()
    };
    let (t0, t1, t2) = (trace(A0), trace(A1), trace(A2));
    let last = series.len() - 1;

    // a1 first decreases, then recovers
    let low = argmin(&t1);
    assert!(low > 0 && low < last);
    assert!(t1[last] > t1[low]);
    // a0 rises, then falls
    let high = argmax(&t0);
    assert!(high > 0 && high < last);
    assert!(t0[last] < t0[high]);
    // a2 rises, then collapses below its starting value
    let peak = argmax(&t2);
    assert!(peak > 0 && peak < last);
    assert!(t2[last] < 0.0);
    // a1 ends as the leading action
    assert!(t1[last] > t0[last] && t1[last] > t2[last]);
}
