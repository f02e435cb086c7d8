//! Shared test oracles, kept deliberately independent of the library's
//! implementations.

#![allow(dead_code)]

/// Brute-force AP by rank counting: rank(i) = 1 + #{j : score_j > score_i}
/// + #{j < i : score_j = score_i} (stable descending order), precision at a
/// positive = positives at rank <= rank(i) divided by rank(i). O(n^2), no
/// sorting, f64 throughout.
pub fn ap_oracle(scores: &[f32], labels: &[u8]) -> Option<f64> {
    let n = scores.len();
    assert_eq!(n, labels.len());
    let positives = labels.iter().filter(|&&l| l != 0).count();
    if positives == 0 {
        return None;
    }
    let mut sum = 0.0f64;
    for i in 0..n {
        if labels[i] == 0 {
            continue;
        }
        let mut rank = 1usize;
        let mut hits = 1usize;
        for j in 0..n {
            if j == i {
                continue;
            }
            let ahead = scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
            if ahead {
                rank += 1;
                if labels[j] != 0 {
                    hits += 1;
                }
            }
        }
        sum += hits as f64 / rank as f64;
    }
    Some(sum / positives as f64)
}

/// Solves (X^T X + lambda I) w = X^T y by Gaussian elimination with partial
/// pivoting. X is row-major [n, d].
pub fn ridge_fit(x: &[f64], y: &[f64], n: usize, d: usize, lambda: f64) -> Vec<f64> {
    assert_eq!(x.len(), n * d);
    assert_eq!(y.len(), n);
    let mut a = vec![0.0f64; d * d];
    let mut b = vec![0.0f64; d];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        for i in 0..d {
            b[i] += row[i] * y[r];
            for j in 0..d {
                a[i * d + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        a[i * d + i] += lambda;
    }
    // elimination
    for col in 0..d {
        let mut piv = col;
        for r in col + 1..d {
            if a[r * d + col].abs() > a[piv * d + col].abs() {
                piv = r;
            }
        }
        if piv != col {
            for j in 0..d {
                a.swap(col * d + j, piv * d + j);
            }
            b.swap(col, piv);
        }
        let diag = a[col * d + col];
        assert!(diag.abs() > 1e-12, "singular ridge system");
        for r in col + 1..d {
            let f = a[r * d + col] / diag;
            if f == 0.0 {
                continue;
            }
            for j in col..d {
                a[r * d + j] -= f * a[col * d + j];
            }
            b[r] -= f * b[col];
        }
    }
    let mut w = vec![0.0f64; d];
    for i in (0..d).rev() {
        let mut acc = b[i];
        for j in i + 1..d {
            acc -= a[i * d + j] * w[j];
        }
        w[i] = acc / a[i * d + i];
    }
    w
}

/// R^2 of predictions x·w against y.
pub fn r_squared(x: &[f64], y: &[f64], w: &[f64], n: usize, d: usize) -> f64 {
    let mean = y.iter().sum::<f64>() / n as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for r in 0..n {
        let pred: f64 = x[r * d..(r + 1) * d]
            .iter()
            .zip(w)
            .map(|(a, b)| a * b)
            .sum();
        ss_res += (y[r] - pred) * (y[r] - pred);
        ss_tot += (y[r] - mean) * (y[r] - mean);
    }
    1.0 - ss_res / ss_tot
}
