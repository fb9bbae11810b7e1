//! Independent reference implementations and generators shared by the
//! integration and acceptance tests. Nothing here calls into the code paths
//! it is used to check.

#![allow(dead_code)]

use maskforge_core::geometry::{Point3, PointCloud};
use maskforge_core::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn random_points(n: usize, rng: &mut impl Rng) -> Vec<Point3> {
    (0..n)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect()
}

pub fn random_cloud(n: usize, rng: &mut impl Rng) -> PointCloud {
    PointCloud::new(random_points(n, rng)).unwrap()
}

fn euclid(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Greedy max-min selection recomputed from scratch at every step.
pub fn fps_oracle(points: &[Point3], k: usize) -> Vec<usize> {
    let n = points.len();
    let mut sum = [0.0; 3];
    for p in points {
        for d in 0..3 {
            sum[d] += p[d];
        }
    }
    let centroid = sum.map(|s| s / n as f64);

    let mut chosen: Vec<usize> = Vec::new();
    let mut first = 0;
    for i in 1..n {
        if euclid(&points[i], &centroid) > euclid(&points[first], &centroid) {
            first = i;
        }
    }
    chosen.push(first);
    while chosen.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&c| euclid(&points[i], &points[c]))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

/// Smallest gap between the winning and runner-up candidate over all greedy
/// FPS decisions, including the first pick. Clouds with a comfortable gap
/// cannot change their FPS order under a rotation's rounding noise.
pub fn fps_margin(points: &[Point3], k: usize) -> f64 {
    let n = points.len();
    let mut sum = [0.0; 3];
    for p in points {
        for d in 0..3 {
            sum[d] += p[d];
        }
    }
    let centroid = sum.map(|s| s / n as f64);
    let gap = |vals: &mut Vec<f64>| {
        vals.sort_by(|a, b| b.total_cmp(a));
        if vals.len() < 2 {
            f64::INFINITY
        } else {
            vals[0] - vals[1]
        }
    };
    let mut margin = gap(&mut points.iter().map(|p| euclid(p, &centroid)).collect());
    let chosen = fps_oracle(points, k);
    for step in 1..k {
        let mut vals: Vec<f64> = (0..n)
            .filter(|i| !chosen[..step].contains(i))
            .map(|i| {
                chosen[..step]
                    .iter()
                    .map(|&c| euclid(&points[i], &points[c]))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        margin = margin.min(gap(&mut vals));
    }
    margin
}

/// Full sort of all points by (distance, index); the center leads.
pub fn knn_oracle(points: &[Point3], center: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..points.len()).filter(|&i| i != center).collect();
    all.sort_by(|&a, &b| {
        euclid(&points[a], &points[center])
            .partial_cmp(&euclid(&points[b], &points[center]))
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut out = vec![center];
    out.extend(all.into_iter().take(k - 1));
    out
}

/// Gap between the k-th and (k+1)-th neighbor distance.
pub fn knn_margin(points: &[Point3], center: usize, k: usize) -> f64 {
    let mut d: Vec<f64> = (0..points.len())
        .filter(|&i| i != center)
        .map(|i| euclid(&points[i], &points[center]))
        .collect();
    d.sort_by(f64::total_cmp);
    if k > d.len() || k < 2 {
        return f64::INFINITY;
    }
    d[k - 1] - d[k - 2]
}

/// Rank by counting: strictly smaller values plus equal values at lower index.
pub fn rank_oracle(values: &[f64]) -> Vec<usize> {
    (0..values.len())
        .map(|i| {
            (0..values.len())
                .filter(|&j| values[j] < values[i] || (values[j] == values[i] && j < i))
                .count()
        })
        .collect()
}

/// Direct evaluation of the grid coordinate / type formulas.
pub fn grid_oracle(centers: &[Point3], g: [usize; 3]) -> (Vec<[u8; 3]>, Vec<u8>) {
    let ranks: Vec<Vec<usize>> = (0..3)
        .map(|d| rank_oracle(&centers.iter().map(|c| c[d]).collect::<Vec<_>>()))
        .collect();
    let coords: Vec<[u8; 3]> = (0..centers.len())
        .map(|i| {
            let mut c = [0u8; 3];
            for d in 0..3 {
                let block = ranks[d][i] / g[d];
                c[d] = (block % 2) as u8;
            }
            c
        })
        .collect();
    let types = coords
        .iter()
        .map(|c| c[0] + c[1] * 2 + c[2] * 4)
        .collect();
    (coords, types)
}

/// Uniform rotation via a normalized 4D Gaussian quaternion; returns the trace
/// of its rotation matrix (`4w^2 - 1` for a unit quaternion).
pub fn gaussian_quaternion_trace(rng: &mut impl Rng) -> f64 {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n2: f64 = q.iter().map(|v| v * v).sum();
    4.0 * q[0] * q[0] / n2 - 1.0
}

/// E|trace| under Haar measure on SO(3): integrate |1 + 2cos θ| against the
/// rotation-angle density (1 - cos θ)/π by composite Simpson's rule.
pub fn haar_mean_abs_trace() -> f64 {
    let n = 200_000;
    let h = std::f64::consts::PI / n as f64;
    let f = |t: f64| (1.0 + 2.0 * t.cos()).abs() * (1.0 - t.cos()) / std::f64::consts::PI;
    let mut s = f(0.0) + f(std::f64::consts::PI);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(i as f64 * h);
    }
    s * h / 3.0
}

/// Two tight blobs in `dim` dimensions far apart; returns features and labels.
pub fn two_blobs(k: usize, dim: usize, rng: &mut impl Rng) -> (Matrix, Vec<usize>) {
    let mut rows = Vec::with_capacity(k);
    let mut labels = Vec::with_capacity(k);
    for i in 0..k {
        let label = i % 2;
        let center = if label == 0 { 0.0 } else { 10.0 };
        rows.push(
            (0..dim)
                .map(|_| center + 0.1 * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect::<Vec<f64>>(),
        );
        labels.push(label);
    }
    (Matrix::from_rows(&rows), labels)
}

/// Random row-stochastic matrix with entries drawn from `(0, 1)` before normalization.
pub fn random_stochastic(k: usize, rng: &mut impl Rng) -> Matrix {
    let mut m = Matrix::zeros(k, k);
    for i in 0..k {
        let row = m.row_mut(i);
        for v in row.iter_mut() {
            *v = rng.gen_range(1e-3..1.0f64).powi(3);
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    m
}
