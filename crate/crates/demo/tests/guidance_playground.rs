use hld_demo::{cfg_samples, hmcfg_samples, mean_xy, SUBJECT_MEAN};

/// Progress of the sample mean along the line from the class-1 mean `(1, 0)` to the subject.
fn toward_subject(points: &[f64]) -> f64 {
    let m = mean_xy(points);
    let d = [SUBJECT_MEAN[0] - 1.0, SUBJECT_MEAN[1]];
    ((m[0] - 1.0) * d[0] + m[1] * d[1]) / (d[0] * d[0] + d[1] * d[1])
}

#[test]
fn cfg_pushes_class_one_outward() {
    let plain = mean_xy(&cfg_samples(1.0, 1500, 100, 1).unwrap());
    let guided = mean_xy(&cfg_samples(3.0, 1500, 100, 1).unwrap());
    assert!(guided[0] > plain[0] + 0.2, "plain {plain:?} guided {guided:?}");
}

#[test]
fn kappa_moves_samples_toward_subject() {
    let along: Vec<f64> = [0.4, 1.0, 1.6]
        .iter()
        .map(|&k| toward_subject(&hmcfg_samples(1.5, k, 800, 100, 2).unwrap()))
        .collect();
    assert!(along[0] < along[1] && along[1] < along[2], "{along:?}");
}

#[test]
fn invalid_kappa_is_reported() {
    let err = hmcfg_samples(2.0, 2.5, 10, 20, 0).unwrap_err();
    assert!(err.contains("kappa"), "{err}");
}

#[test]
fn samples_are_seeded() {
    assert_eq!(cfg_samples(2.0, 20, 30, 7).unwrap(), cfg_samples(2.0, 20, 30, 7).unwrap());
    assert_eq!(cfg_samples(2.0, 20, 30, 7).unwrap().len(), 40);
}
