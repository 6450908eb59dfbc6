//! Brute-force reference implementations used as test oracles.
//! They follow the textbook definitions directly and share no code with the
//! library.

#![allow(dead_code)]

/// Pairwise scalar distances by name.
pub fn distance(metric: &str, a: f64, b: f64) -> f64 {
    match metric {
        "euclidean" => ((a - b) * (a - b)).sqrt(),
        "sqeuclidean" => (a - b).powi(2),
        "cityblock" => (a - b).abs(),
        "chebyshev" => [(a - b).abs()].into_iter().fold(0.0, f64::max),
        "canberra" => {
            if a == 0.0 && b == 0.0 {
                0.0
            } else {
                (a - b).abs() / (a.abs() + b.abs())
            }
        }
        other => panic!("unknown metric {other}"),
    }
}

/// `RP_ij = 1 - d(v_i, v_j) / max_kl d(v_k, v_l)`, all ones for a flat segment.
pub fn recurrence(values: &[f64], metric: &str) -> Vec<Vec<f64>> {
    let m = values.len();
    let d: Vec<Vec<f64>> =
        (0..m).map(|i| (0..m).map(|j| distance(metric, values[i], values[j])).collect()).collect();
    let max = d.iter().flatten().cloned().fold(0.0, f64::max);
    d.iter().map(|row| row.iter().map(|&x| if max == 0.0 { 1.0 } else { 1.0 - x / max }).collect()).collect()
}

/// Polar angles of the segment after min-max rescaling to [-1, 1].
pub fn polar_angles(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            let s = if hi == lo { 0.0 } else { 2.0 * (v - lo) / (hi - lo) - 1.0 };
            s.clamp(-1.0, 1.0).acos()
        })
        .collect()
}

pub fn gasf(values: &[f64]) -> Vec<Vec<f64>> {
    let th = polar_angles(values);
    th.iter().map(|a| th.iter().map(|b| (a + b).cos()).collect()).collect()
}

pub fn gadf(values: &[f64]) -> Vec<Vec<f64>> {
    let th = polar_angles(values);
    th.iter().map(|a| th.iter().map(|b| (a - b).sin()).collect()).collect()
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let i = h.floor() as usize;
    if i + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[i] + (h - i as f64) * (sorted[i + 1] - sorted[i])
}

/// Bin index: number of interior quantile edges strictly below the value.
pub fn bins(values: &[f64], q: usize) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let edges: Vec<f64> = (1..q).map(|k| quantile(&sorted, k as f64 / q as f64)).collect();
    values.iter().map(|&v| edges.iter().filter(|&&e| e < v).count()).collect()
}

pub fn markov(values: &[f64], q: usize) -> Vec<Vec<f64>> {
    let b = bins(values, q);
    let mut w = vec![vec![0.0; q]; q];
    for t in 1..b.len() {
        w[b[t - 1]][b[t]] += 1.0;
    }
    for row in &mut w {
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v = if s == 0.0 { 1.0 / q as f64 } else { *v / s };
        }
    }
    b.iter().map(|&i| b.iter().map(|&j| w[i][j]).collect()).collect()
}

/// Largest absolute entry-wise difference between a square matrix and a flat image.
pub fn max_abs_diff(expected: &[Vec<f64>], actual: &[f64]) -> f64 {
    let m = expected.len();
    assert_eq!(actual.len(), m * m, "image size");
    let mut worst: f64 = 0.0;
    for i in 0..m {
        for j in 0..m {
            worst = worst.max((expected[i][j] - actual[i * m + j]).abs());
        }
    }
    worst
}

/// Central-difference gradient of `f` with respect to every coordinate of `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error `|a - n| / max(|a| + |n|, floor)` used for gradient checks.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Index of the closest landmark, lowest index on ties.
pub fn nearest(anchor: [f64; 2], landmarks: &[[f64; 2]]) -> usize {
    let d = |p: [f64; 2]| (p[0] - anchor[0]).hypot(p[1] - anchor[1]);
    (0..landmarks.len())
        .min_by(|&a, &b| d(landmarks[a]).partial_cmp(&d(landmarks[b])).unwrap().then(a.cmp(&b)))
        .unwrap()
}

/// Exhaustive knnUnique: all k-nearest candidates within eps, then greedy
/// one-to-one matching by ascending distance. Returns `(test, train)` index pairs.
pub fn knn_unique(train: &[[f64; 2]], test: &[[f64; 2]], k: usize, eps: f64) -> Vec<(usize, usize)> {
    let d = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let mut cands = Vec::new();
    for (j, &p) in test.iter().enumerate() {
        let mut all: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, &q)| (d(p, q), i)).collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(dist, i) in all.iter().take(k) {
            if dist < eps * eps {
                cands.push((dist, j, i));
            }
        }
    }
    cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_i = vec![false; train.len()];
    let mut used_j = vec![false; test.len()];
    let mut out = Vec::new();
    for (_, j, i) in cands {
        if !used_i[i] && !used_j[j] {
            used_i[i] = true;
            used_j[j] = true;
            out.push((j, i));
        }
    }
    out
}

/// Mean euclidean distance, summed in index order.
pub fn mean_distance(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += ((a[i][0] - b[i][0]).powi(2) + (a[i][1] - b[i][1]).powi(2)).sqrt();
    }
    s / a.len() as f64
}

/// Rotation matrix from axis-angle via the matrix exponential series.
pub fn axis_angle(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let w = [axis[0] / n * angle, axis[1] / n * angle, axis[2] / n * angle];
    let k = [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]];
    let mut out = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut term = out;
    for n in 1..40 {
        let mut next = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                next[r][c] = (0..3).map(|i| term[r][i] * k[i][c]).sum::<f64>() / n as f64;
            }
        }
        term = next;
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] += term[r][c];
            }
        }
    }
    out
}

pub fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

pub fn frobenius(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> f64 {
    let mut s = 0.0;
    for r in 0..3 {
        for c in 0..3 {
            s += (a[r][c] - b[r][c]).powi(2);
        }
    }
    s.sqrt()
}
