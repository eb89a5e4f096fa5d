//! Throughput probe (ignored by default; run explicitly when tuning).

use std::time::Instant;

use prunefire_core::model::build_micro_config;
use prunefire_core::rng::Rng;
use prunefire_core::tape::Tape;
use prunefire_core::tensor::Tensor;

#[test]
#[ignore]
fn train_step_throughput() {
    let mut rng = Rng::new(1);
    let mut model = build_micro_config(20, 8, &mut rng).unwrap();
    let batch = 32usize;
    let x = Tensor::from_vec(
        &[batch, 3, 113, 113],
        (0..batch * 3 * 113 * 113).map(|_| rng.normal()).collect(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..batch).map(|i| i % 20).collect();

    let t0 = Instant::now();
    let mut tape = Tape::new();
    let (loss, _) = model.forward_train(&mut tape, x.clone(), &labels).unwrap();
    let fwd = t0.elapsed();
    let t1 = Instant::now();
    let _grads = tape.backward(loss).unwrap();
    let bwd = t1.elapsed();
    println!(
        "batch {}: forward {:?} ({:.1} ms/img), backward {:?} ({:.1} ms/img)",
        batch,
        fwd,
        fwd.as_secs_f64() * 1000.0 / batch as f64,
        bwd,
        bwd.as_secs_f64() * 1000.0 / batch as f64
    );
}
