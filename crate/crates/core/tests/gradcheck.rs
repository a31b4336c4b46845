use std::time::Instant;

use omake_core::harness::{gradcheck, GradcheckConfig};
use omake_core::losses::LossConfig;

#[test]
fn toy_config_passes() {
    let t = Instant::now();
    let report = gradcheck(&GradcheckConfig::default()).unwrap();
    println!("{report:?} in {:?}", t.elapsed());
    assert!(report.passed, "{report:?}");
    assert!(report.checked > 1000);
}

#[test]
fn hard_labels_without_fga_pass() {
    let cfg = GradcheckConfig { loss: LossConfig { lambda: 0.0, beta: 0.0, ..LossConfig::full() }, ..Default::default() };
    let report = gradcheck(&cfg).unwrap();
    println!("{report:?}");
    assert!(report.passed, "{report:?}");
}

#[test]
fn other_seeds_pass() {
    for seed in [1, 2, 3] {
        let report = gradcheck(&GradcheckConfig { seed, ..Default::default() }).unwrap();
        assert!(report.passed, "seed {seed}: {report:?}");
    }
}

#[test]
fn corrupted_gradient_fails() {
    let report = gradcheck(&GradcheckConfig { corrupt_gradient: true, ..Default::default() }).unwrap();
    assert!(!report.passed);
    assert!(report.max_rel_error > 1e-2);
}

