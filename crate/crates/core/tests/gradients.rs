use attnpyr_core::gradcheck::{registry, run_suite, TOLERANCE};

#[test]
fn every_registered_op_passes_over_three_seeds() {
    let cases = registry();
    let report = run_suite(&cases, &[11, 12, 13], None).unwrap();
    assert_eq!(report.cases.len(), cases.len());
    assert!(report.passed, "failing ops: {:?}", report.failures());
    assert!(report.cases.iter().all(|c| c.max_rel_error < TOLERANCE));
}

#[test]
fn every_registered_op_passes_over_one_hundred_seeds() {
    let seeds: Vec<u64> = (1000..1100).collect();
    let report = run_suite(&registry(), &seeds, None).unwrap();
    let worst = report.cases.iter().map(|c| (c.op.as_str(), c.max_rel_error)).fold(("", 0.0), |a, b| {
        if b.1 > a.1 {
            b
        } else {
            a
        }
    });
    println!("worst: {} {:.3e}", worst.0, worst.1);
    assert!(report.passed, "failing ops: {:?}", report.failures());
}

#[test]
fn corrupted_gradient_is_named() {
    for op in ["conv2d", "model_loss", "spatial_attention"] {
        let report = run_suite(&registry(), &[1], Some(op)).unwrap();
        assert_eq!(report.failures(), vec![op]);
    }
}

#[test]
fn registry_covers_the_differentiable_surface() {
    let names: Vec<&str> = registry().iter().map(|c| c.name).collect();
    for op in [
        "matmul",
        "conv2d",
        "avg_pool2d",
        "global_avg_pool",
        "sigmoid",
        "relu",
        "log_softmax",
        "concat_split",
        "channel_attention",
        "spatial_attention",
        "triplet_batch_hard",
        "ce_label_smoothed",
        "model_loss",
    ] {
        assert!(names.contains(&op), "{op} missing");
    }
}
