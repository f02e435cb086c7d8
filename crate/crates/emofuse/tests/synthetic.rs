//! Checks that the synthetic data generator actually plants the signals the
//! training and ablation tests rely on.

mod common;

use emofuse::dataset::generate_synthetic;

/// Flatten rows into the design-matrix layout the helpers expect, with an
/// intercept column prepended.
fn design(rows: &[Vec<f64>]) -> (Vec<f64>, usize, usize) {
    let n = rows.len();
    let d = rows[0].len() + 1;
    let mut x = Vec::with_capacity(n * d);
    for row in rows {
        x.push(1.0);
        x.extend_from_slice(row);
    }
    (x, n, d)
}

fn fit_r2(rows: &[Vec<f64>], ys: &[f64]) -> f64 {
    let (x, n, d) = design(rows);
    let beta = common::ridge_fit(&x, ys, n, d, 1e-6);
    common::r_squared(&x, ys, &beta, n, d)
}

/// The positive-label pattern must respond to the scene-signal knob: with the
/// knob at zero the planted scene factor carries no label information, at one
/// it carries a lot.
#[test]
fn scene_signal_knob_controls_label_dependence() {
    let r2_at = |signal: f32| {
        let data = generate_synthetic(300, 11, signal);
        let rows: Vec<Vec<f64>> = data
            .factors
            .iter()
            .map(|f| f.scene.iter().map(|&v| f64::from(v)).collect())
            .collect();
        let ys: Vec<f64> = data
            .manifest
            .samples
            .iter()
            .map(|s| s.annotation.disc.iter().map(|&d| f64::from(d)).sum::<f64>())
            .collect();
        fit_r2(&rows, &ys)
    };
    let low = r2_at(0.0);
    let high = r2_at(1.0);
    assert!(
        high > low + 0.1,
        "scene factor R^2 did not respond to the knob: {low:.4} -> {high:.4}"
    );
}

/// The scene feature vector must be linearly recoverable from the planted
/// scene factor — otherwise the ablation trend test measures noise.
#[test]
fn scene_features_linearly_encode_planted_factor() {
    let data = generate_synthetic(300, 13, 0.5);
    let rows: Vec<Vec<f64>> = data
        .manifest
        .samples
        .iter()
        .map(|s| {
            s.precomputed["scene"]
                .iter()
                .map(|&v| f64::from(v))
                .collect()
        })
        .collect();
    // recover the first planted scene coordinate from the feature vector
    let ys: Vec<f64> = data.factors.iter().map(|f| f64::from(f.scene[0])).collect();
    let r2 = fit_r2(&rows, &ys);
    assert!(r2 > 0.9, "scene factor not linearly recoverable: R^2 {r2:.4}");
}

/// Depth maps must encode the planted distance factor the same way.
#[test]
fn depth_statistics_track_planted_distance() {
    let data = generate_synthetic(300, 17, 0.5);
    let rows: Vec<Vec<f64>> = data
        .manifest
        .samples
        .iter()
        .map(|s| {
            let d = s.depth.as_ref().expect("synthetic samples carry depth");
            let mean = d.data.iter().map(|&v| f64::from(v)).sum::<f64>() / d.data.len() as f64;
            vec![mean]
        })
        .collect();
    let ys: Vec<f64> = data.factors.iter().map(|f| f64::from(f.distance)).collect();
    let r2 = fit_r2(&rows, &ys);
    assert!(r2 > 0.5, "distance factor not visible in depth maps: R^2 {r2:.4}");
}
