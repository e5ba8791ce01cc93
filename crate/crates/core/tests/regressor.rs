//! Segmentation baseline plus volume regressor on a small phantom set.

use volpi::experiment::{cmd_run_all, ExperimentConfig};
use volpi::phantom::PhantomSpec;

#[test]
fn regressor_median_is_mostly_near_truth() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        phantom: PhantomSpec {
            grid_size: [16, 16, 16],
            lesion_radius_range_mm: [3.0, 6.0],
            ..Default::default()
        },
        n_cases: 40,
        splits: [0.5, 0.25, 0.25],
        methods: vec!["regcnn".into()],
        seed: 3,
        out_dir: dir.path().join("out"),
        ..Default::default()
    };
    cfg.train.epochs = 4;
    cfg.regressor.epochs = 20;

    let outcome = cmd_run_all(&cfg, false).unwrap();
    let recs = &outcome.evaluation.records;
    assert_eq!(recs.len(), 10);
    for c in 0..3 {
        let errors: Vec<f64> = recs
            .iter()
            .map(|r| (r.interval.classes[c].mean_ml - r.truth_ml[c]).abs())
            .collect();
        let mae = errors.iter().sum::<f64>() / errors.len() as f64;
        assert!(mae.is_finite());
        let near = errors.iter().filter(|&&e| e <= 3.0 * mae).count();
        assert!(2 * near >= errors.len(), "class {c}: {near}/{} within 3 MAE", errors.len());
    }
    assert!(recs.iter().all(|r| r.forward_passes == 1));
}
