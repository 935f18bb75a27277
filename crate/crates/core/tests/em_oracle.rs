mod support;

use support::em_oracle::{m_step_deviation, variance_deviation};

#[test]
fn m_step_matches_direct_minimization() {
    for seed in 0..50 {
        let err = m_step_deviation(seed).unwrap();
        assert!(err < 1e-5, "seed {seed}: |W - W_ref| = {err:e}");
    }
}

#[test]
fn variance_trace_form_matches_double_sum() {
    for seed in 0..50 {
        let err = variance_deviation(seed).unwrap();
        assert!(err < 1e-9, "seed {seed}: {err:e}");
    }
}
