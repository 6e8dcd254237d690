//! Round-trip tests of the external-model protocol against the reference
//! child process.

use std::time::Duration;

use pdduq::models::{ExternalModel, Model, ModelError};

fn demo(mode: &str, dim: usize, timeout: Duration, pool: usize) -> ExternalModel {
    ExternalModel::new(
        vec![
            env!("CARGO_BIN_EXE_pdduq-model-demo").to_string(),
            mode.to_string(),
            dim.to_string(),
        ],
        dim,
        1,
        timeout,
        pool,
    )
    .expect("demo model spawns")
}

fn quadratic(x: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut prod = 1.0;
    for (i, &xi) in x.iter().enumerate() {
        acc += (i as f64 + 1.0) * xi * xi;
        prod *= xi;
    }
    acc + prod
}

#[test]
fn echo_model_returns_first_coordinate() {
    let model = demo("echo", 3, Duration::from_secs(10), 1);
    let y = model.eval(&[0.25, -1.5, 7.0]).unwrap();
    assert_eq!(y, vec![0.25]);
}

#[test]
fn quadratic_round_trips_bit_for_bit() {
    let model = demo("quadratic", 4, Duration::from_secs(10), 2);
    let mut state = 0x9E3779B97F4A7C15u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
    };
    for _ in 0..10_000 {
        let x: Vec<f64> = (0..4).map(|_| next()).collect();
        let y = model.eval(&x).unwrap();
        // 17-significant-digit decimals reproduce the f64 exactly
        assert_eq!(y[0].to_bits(), quadratic(&x).to_bits(), "x = {x:?}");
    }
}

#[test]
fn non_finite_output_is_a_distinct_error() {
    let model = demo("nan", 2, Duration::from_secs(10), 1);
    match model.eval(&[0.1, 0.2]) {
        Err(ModelError::NonFinite { .. }) => {}
        other => panic!("expected a non-finite error, got {other:?}"),
    }
    // the worker restarts after a violation; an honest child still works
    let ok = demo("echo", 2, Duration::from_secs(10), 1);
    assert_eq!(ok.eval(&[0.5, 0.1]).unwrap(), vec![0.5]);
}

#[test]
fn stalled_child_times_out_and_recovers() {
    let model = demo("stall", 2, Duration::from_millis(300), 1);
    match model.eval(&[0.1, 0.2]) {
        Err(ModelError::Timeout(_)) => {}
        other => panic!("expected a timeout, got {other:?}"),
    }
    // the replacement worker also stalls, but each call fails cleanly
    match model.eval(&[0.3, 0.4]) {
        Err(ModelError::Timeout(_)) => {}
        other => panic!("expected a timeout, got {other:?}"),
    }
}

#[test]
fn handshake_mismatch_is_rejected() {
    // child announces dimension 3, parent expects 5
    let err = ExternalModel::new(
        vec![
            env!("CARGO_BIN_EXE_pdduq-model-demo").to_string(),
            "quadratic".to_string(),
            "3".to_string(),
        ],
        5,
        1,
        Duration::from_secs(5),
        1,
    )
    .err()
    .expect("handshake must fail");
    assert!(matches!(err, ModelError::Malformed(_)), "{err:?}");
}

#[test]
fn parallel_pool_serves_concurrent_evaluations() {
    let model = std::sync::Arc::new(demo("quadratic", 2, Duration::from_secs(10), 4));
    let mut handles = Vec::new();
    for t in 0..8 {
        let m = std::sync::Arc::clone(&model);
        handles.push(std::thread::spawn(move || {
            for k in 0..200 {
                let x = [t as f64 * 0.1, k as f64 * 0.01];
                let y = m.eval(&x).unwrap();
                assert_eq!(y[0].to_bits(), quadratic(&x).to_bits());
            }
        }));
    }
    for h in handles {
        h.join().unwrap();
    }
}
