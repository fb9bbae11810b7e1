//! Semantic stream: attention thresholding, a diagonal Gaussian mixture fit
//! by EM over attention rows, and one shared random score per component.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::{MaskScores, Stream};
use crate::error::{Error, Result};
use crate::geometry::{dist2, PatchSet, Point3};
use crate::matrix::Matrix;
use crate::rng::seeded;

/// Row sums must be within this of 1 for a map to count as row-stochastic.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// `K x K` non-negative row-stochastic patch-to-patch attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    a: Matrix,
    iteration: u64,
}

impl AttentionMap {
    pub fn new(a: Matrix, iteration: u64) -> Result<Self> {
        let k = a.rows();
        if k == 0 || a.cols() != k {
            return Err(Error::validation(format!(
                "attention map must be square and non-empty, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        for (i, row) in a.iter_rows().enumerate() {
            if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::validation(format!("row {i} has invalid entry {v}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::validation(format!("row {i} sums to {sum}, not 1")));
            }
        }
        Ok(Self { a, iteration })
    }

    /// Uniform `1/K` attention.
    pub fn uniform(k: usize, iteration: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::argument("attention map needs at least one patch"));
        }
        Self::new(Matrix::filled(k, k, 1.0 / k as f64), iteration)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.a.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.a.rows() == 0
    }

    pub fn matrix(&self) -> &Matrix {
        &self.a
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// The attention feature vector of patch `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        self.a.row(i)
    }

    pub fn off_diagonal(&self) -> Vec<f64> {
        let k = self.len();
        let mut out = Vec::with_capacity(k * k.saturating_sub(1));
        for i in 0..k {
            for (j, &v) in self.a.row(i).iter().enumerate() {
                if i != j {
                    out.push(v);
                }
            }
        }
        out
    }
}

/// Attention with every entry `<= tau` zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    w: Matrix,
    tau: f64,
}

impl AffinityGraph {
    pub fn weights(&self) -> &Matrix {
        &self.w
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Number of retained off-diagonal edges.
    pub fn edge_count(&self) -> usize {
        let k = self.w.rows();
        (0..k)
            .map(|i| (0..k).filter(|&j| j != i && self.w.get(i, j) > 0.0).count())
            .sum()
    }
}

fn check_progress(t: u64, total: u64) -> Result<()> {
    if total == 0 {
        return Err(Error::argument("total iterations T must be >= 1"));
    }
    if t > total {
        return Err(Error::argument(format!("iteration t={t} exceeds T={total}")));
    }
    Ok(())
}

/// `round_half_up(c_max - (t/T)(c_max - c_min))`, clamped to `[c_min, min(c_max, k)]`.
/// When `k < c_min` the result is `k`.
pub fn component_count(t: u64, total: u64, c_max: usize, c_min: usize, k: usize) -> Result<usize> {
    check_progress(t, total)?;
    if c_min == 0 || c_min > c_max {
        return Err(Error::argument(format!(
            "component bounds need 1 <= C_min <= C_max, got C_min={c_min}, C_max={c_max}"
        )));
    }
    if k == 0 {
        return Err(Error::argument("patch count must be >= 1"));
    }
    let progress = t as f64 / total as f64;
    let raw = c_max as f64 - progress * (c_max - c_min) as f64;
    let rounded = (raw + 0.5).floor() as usize;
    Ok(rounded.clamp(c_min, c_max).min(k))
}

/// Linear-interpolation empirical quantile of sorted data (the "type 7" rule).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    let (a, b) = (sorted[lo], sorted[hi]);
    if a == b {
        a
    } else {
        a + frac * (b - a)
    }
}

/// Threshold at quantile `q_start + (t/T)(q_end - q_start)` of the off-diagonal
/// attention entries, so it rises with training progress.
pub fn threshold_schedule(
    attn: &AttentionMap,
    t: u64,
    total: u64,
    q_start: f64,
    q_end: f64,
) -> Result<f64> {
    check_progress(t, total)?;
    if !(0.0..=1.0).contains(&q_start) || !(0.0..=1.0).contains(&q_end) || q_start > q_end {
        return Err(Error::argument(format!(
            "quantiles need 0 <= q_start <= q_end <= 1, got {q_start}, {q_end}"
        )));
    }
    if attn.len() < 2 {
        return Err(Error::argument("threshold needs at least two patches (off-diagonal entries)"));
    }
    let mut values = attn.off_diagonal();
    values.sort_by(f64::total_cmp);
    let q = q_start + (t as f64 / total as f64) * (q_end - q_start);
    Ok(quantile_sorted(&values, q))
}

/// Keep entries strictly above `tau`, zero the rest.
pub fn affinity_graph(attn: &AttentionMap, tau: f64) -> Result<AffinityGraph> {
    threshold_matrix(attn.matrix(), tau)
}

/// Same rule applied to an arbitrary matrix (e.g. re-thresholding a graph).
pub fn threshold_matrix(m: &Matrix, tau: f64) -> Result<AffinityGraph> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::argument(format!("threshold must be finite and >= 0, got {tau}")));
    }
    let data = m
        .as_slice()
        .iter()
        .map(|&v| if v > tau { v } else { 0.0 })
        .collect();
    Ok(AffinityGraph {
        w: Matrix::from_vec(m.rows(), m.cols(), data),
        tau,
    })
}

/// Which rows feed the mixture model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    /// Raw attention rows.
    #[default]
    Attention,
    /// Rows of the thresholded affinity graph.
    Affinity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Stop once the log-likelihood gain of an iteration drops below this.
    /// Zero disables early stopping.
    pub tol: f64,
    pub variance_floor: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-6,
            variance_floor: 1e-6,
        }
    }
}

impl EmOptions {
    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::argument("EM needs max_iters >= 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::argument("EM tolerance must be >= 0"));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::argument("EM variance floor must be > 0"));
        }
        Ok(())
    }
}

/// Fitted diagonal-covariance mixture and the hard component labels it implies.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    /// `K x C` posterior component probabilities.
    pub responsibilities: Matrix,
    pub weights: Vec<f64>,
    /// `C x D`.
    pub means: Matrix,
    /// `C x D`, each entry at least the variance floor.
    pub variances: Matrix,
    /// Log-likelihood after initialization and after every EM iteration.
    pub log_likelihood_trace: Vec<f64>,
    /// Number of iterations in which empty components were re-seeded.
    pub reseeds: usize,
}

impl Clustering {
    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Patches per component.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_components()];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihood_trace.last().unwrap_or(&f64::NAN)
    }
}

struct Params {
    weights: Vec<f64>,
    means: Matrix,
    variances: Matrix,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl Params {
    fn components(&self) -> usize {
        self.weights.len()
    }

    /// Fills `log_joint[i][c] = ln pi_c + ln N(x_i | mu_c, diag var_c)` and
    /// returns the total log-likelihood.
    fn log_joint(&self, x: &Matrix, log_joint: &mut Matrix) -> f64 {
        let c_count = self.components();
        let d = x.cols();
        let mut norm = Vec::with_capacity(c_count);
        let mut inv_var = Matrix::zeros(c_count, d);
        for c in 0..c_count {
            let mut log_det = 0.0;
            for (dst, &v) in inv_var.row_mut(c).iter_mut().zip(self.variances.row(c)) {
                *dst = 1.0 / v;
                log_det += v.ln();
            }
            norm.push(self.weights[c].ln() - 0.5 * (d as f64 * LN_2PI + log_det));
        }
        let mut total = 0.0;
        for i in 0..x.rows() {
            let row = x.row(i);
            let out = log_joint.row_mut(i);
            for c in 0..c_count {
                let mean = self.means.row(c);
                let iv = inv_var.row(c);
                let mut q = 0.0;
                for j in 0..d {
                    let diff = row[j] - mean[j];
                    q += diff * diff * iv[j];
                }
                out[c] = norm[c] - 0.5 * q;
            }
            total += log_sum_exp(out);
        }
        total
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Turns log joint densities into normalized responsibilities in place.
fn normalize_rows(log_joint: &mut Matrix) {
    for i in 0..log_joint.rows() {
        let row = log_joint.row_mut(i);
        let lse = log_sum_exp(row);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn argmax_rows(resp: &Matrix) -> Vec<usize> {
    resp.iter_rows()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn column_variance(x: &Matrix, floor: f64) -> Vec<f64> {
    let n = x.rows() as f64;
    (0..x.cols())
        .map(|j| {
            let mean = x.iter_rows().map(|r| r[j]).sum::<f64>() / n;
            let var = x.iter_rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            var.max(floor)
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Distance-weighted (k-means++ style) choice of `count` further seed rows,
/// given rows already chosen in `means`.
fn seed_means(x: &Matrix, means: &mut Vec<Vec<f64>>, count: usize, rng: &mut impl Rng) {
    let n = x.rows();
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| {
            means
                .iter()
                .map(|m| sq_dist(x.row(i), m))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    for _ in 0..count {
        let total: f64 = nearest.iter().filter(|v| v.is_finite()).sum();
        let pick = if means.is_empty() || !(total > 0.0) {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        let m = x.row(pick).to_vec();
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), &m));
        }
        means.push(m);
    }
}

fn validate_em_inputs(features: &Matrix, components: usize, opts: &EmOptions) -> Result<()> {
    opts.validate()?;
    let k = features.rows();
    if k == 0 || features.cols() == 0 {
        return Err(Error::argument("EM needs a non-empty feature matrix"));
    }
    if components == 0 || components > k {
        return Err(Error::argument(format!(
            "component count must be in 1..={k}, got {components}"
        )));
    }
    if let Some(i) = features
        .iter_rows()
        .position(|r| r.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::validation(format!("feature row {i} has a non-finite value")));
    }
    Ok(())
}

/// Fits a `components`-way diagonal Gaussian mixture to the rows of `features`
/// with a fresh seeded initialization.
pub fn em_cluster(
    features: &Matrix,
    components: usize,
    seed: u64,
    opts: &EmOptions,
) -> Result<Clustering> {
    validate_em_inputs(features, components, opts)?;
    let mut rng = seeded(seed);
    let mut means = Vec::with_capacity(components);
    seed_means(features, &mut means, components, &mut rng);
    let var = column_variance(features, opts.variance_floor);
    let params = Params {
        weights: vec![1.0 / components as f64; components],
        means: Matrix::from_rows(&means),
        variances: Matrix::from_rows(&vec![var; components]),
    };
    run_em(features, params, opts)
}

/// Like [`em_cluster`] but starts from a previous fit. The heaviest
/// `min(components, prior)` components are kept; any extra ones are seeded
/// by distance weighting from `seed`.
pub fn em_cluster_warm(
    features: &Matrix,
    components: usize,
    seed: u64,
    opts: &EmOptions,
    prior: &Clustering,
) -> Result<Clustering> {
    validate_em_inputs(features, components, opts)?;
    if prior.means.cols() != features.cols() {
        return Err(Error::argument(format!(
            "warm start has feature dimension {}, data has {}",
            prior.means.cols(),
            features.cols()
        )));
    }
    let mut order: Vec<usize> = (0..prior.num_components()).collect();
    order.sort_by(|&a, &b| prior.weights[b].total_cmp(&prior.weights[a]).then(a.cmp(&b)));
    order.truncate(components);

    let mut means: Vec<Vec<f64>> = order.iter().map(|&c| prior.means.row(c).to_vec()).collect();
    let mut variances: Vec<Vec<f64>> = order.iter().map(|&c| prior.variances.row(c).to_vec()).collect();
    let mut weights: Vec<f64> = order.iter().map(|&c| prior.weights[c]).collect();

    let extra = components - means.len();
    if extra > 0 {
        let mut rng = seeded(seed);
        seed_means(features, &mut means, extra, &mut rng);
        let var = column_variance(features, opts.variance_floor);
        for _ in 0..extra {
            variances.push(var.clone());
            weights.push(1.0 / features.rows() as f64);
        }
    }
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    } else {
        weights.iter_mut().for_each(|w| *w = 1.0 / components as f64);
    }
    for row in &mut variances {
        row.iter_mut().for_each(|v| *v = v.max(opts.variance_floor));
    }
    let params = Params {
        weights,
        means: Matrix::from_rows(&means),
        variances: Matrix::from_rows(&variances),
    };
    run_em(features, params, opts)
}

fn m_step(x: &Matrix, resp: &Matrix, prev: &Params, floor: f64) -> Params {
    let (n, d) = (x.rows(), x.cols());
    let c_count = resp.cols();
    let mut weights = vec![0.0; c_count];
    let mut means = prev.means.clone();
    let mut variances = prev.variances.clone();
    for (c, weight) in weights.iter_mut().enumerate() {
        let nk: f64 = (0..n).map(|i| resp.get(i, c)).sum();
        *weight = nk / n as f64;
        if !(nk > 0.0) {
            continue;
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            let g = resp.get(i, c);
            if g == 0.0 {
                continue;
            }
            for (m, &v) in mean.iter_mut().zip(x.row(i)) {
                *m += g * v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nk);
        let mut var = vec![0.0; d];
        for i in 0..n {
            let g = resp.get(i, c);
            if g == 0.0 {
                continue;
            }
            for ((s, &v), &m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += g * (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s = (*s / nk).max(floor));
        means.row_mut(c).copy_from_slice(&mean);
        variances.row_mut(c).copy_from_slice(&var);
    }
    Params {
        weights,
        means,
        variances,
    }
}

/// Moves every component that owns no patch onto the rows the current model
/// explains least confidently. Returns `None` when nothing is empty.
fn reseed_empty(x: &Matrix, resp: &Matrix, params: &Params) -> Option<Params> {
    let assignment = argmax_rows(resp);
    let mut owned = vec![false; params.components()];
    for &c in &assignment {
        owned[c] = true;
    }
    let empty: Vec<usize> = (0..owned.len()).filter(|&c| !owned[c]).collect();
    if empty.is_empty() {
        return None;
    }
    let n = x.rows();
    let mut rows: Vec<(f64, usize)> = (0..n)
        .map(|i| (resp.row(i)[assignment[i]], i))
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut next = Params {
        weights: params.weights.clone(),
        means: params.means.clone(),
        variances: params.variances.clone(),
    };
    for (&c, &(_, i)) in empty.iter().zip(&rows) {
        next.means.row_mut(c).copy_from_slice(x.row(i));
        let donor = assignment[i];
        let donor_var = params.variances.row(donor).to_vec();
        next.variances.row_mut(c).copy_from_slice(&donor_var);
        next.weights[c] = 1.0 / n as f64;
    }
    let total: f64 = next.weights.iter().sum();
    next.weights.iter_mut().for_each(|w| *w /= total);
    Some(next)
}

fn run_em(x: &Matrix, mut params: Params, opts: &EmOptions) -> Result<Clustering> {
    let (n, c_count) = (x.rows(), params.components());
    let mut resp = Matrix::zeros(n, c_count);
    let mut scratch = Matrix::zeros(n, c_count);
    let mut ll = params.log_joint(x, &mut resp);
    normalize_rows(&mut resp);
    let mut trace = vec![ll];
    let mut reseeds = 0;

    for _ in 0..opts.max_iters {
        let mut next = m_step(x, &resp, &params, opts.variance_floor);
        let mut next_ll = next.log_joint(x, &mut scratch);
        // Re-seeding is accepted only when it does not lower the likelihood,
        // which keeps the trace monotone.
        if c_count > 1 {
            normalize_rows(&mut scratch);
            if let Some(candidate) = reseed_empty(x, &scratch, &next) {
                let mut cand_joint = Matrix::zeros(n, c_count);
                let cand_ll = candidate.log_joint(x, &mut cand_joint);
                if cand_ll >= next_ll {
                    next = candidate;
                    next_ll = cand_ll;
                    scratch = cand_joint;
                    reseeds += 1;
                } else {
                    next.log_joint(x, &mut scratch);
                }
            } else {
                next.log_joint(x, &mut scratch);
            }
        }
        normalize_rows(&mut scratch);
        std::mem::swap(&mut resp, &mut scratch);
        params = next;
        let gain = next_ll - ll;
        ll = next_ll;
        trace.push(ll);
        if opts.tol > 0.0 && gain < opts.tol {
            break;
        }
    }

    Ok(Clustering {
        assignment: argmax_rows(&resp),
        responsibilities: resp,
        weights: params.weights,
        means: params.means,
        variances: params.variances,
        log_likelihood_trace: trace,
        reseeds,
    })
}

/// One uniform draw per component (in component order); each patch takes the
/// draw of its component.
pub fn semantic_scores(clustering: &Clustering, seed: u64) -> MaskScores {
    let mut rng = seeded(seed);
    let deltas: Vec<f64> = (0..clustering.num_components())
        .map(|_| rng.gen::<f64>())
        .collect();
    let scores = clustering.assignment.iter().map(|&c| deltas[c]).collect();
    MaskScores::new_unchecked(scores, Stream::Semantic)
}

/// Geometric stand-in for encoder attention: a Gaussian kernel over patch
/// center distances, optionally perturbed by a seeded multiplicative factor
/// in `[1 - noise, 1 + noise]`, then row-normalized.
pub fn synth_attention(
    patches: &PatchSet,
    bandwidth: f64,
    noise: f64,
    seed: u64,
) -> Result<AttentionMap> {
    synth_attention_from_centers(patches.center_coords(), bandwidth, noise, seed)
}

pub fn synth_attention_from_centers(
    centers: &[Point3],
    bandwidth: f64,
    noise: f64,
    seed: u64,
) -> Result<AttentionMap> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::argument(format!("bandwidth must be finite and > 0, got {bandwidth}")));
    }
    if !(0.0..1.0).contains(&noise) {
        return Err(Error::argument(format!("noise must be in [0, 1), got {noise}")));
    }
    if centers.is_empty() {
        return Err(Error::argument("attention synthesis needs at least one center"));
    }
    let k = centers.len();
    let inv_bw2 = 1.0 / (bandwidth * bandwidth);
    let mut rng = (noise > 0.0).then(|| seeded(seed));
    let mut a = Matrix::zeros(k, k);
    for i in 0..k {
        let row = a.row_mut(i);
        for j in 0..k {
            let mut v = (-dist2(&centers[i], &centers[j]) * inv_bw2).exp();
            if let Some(rng) = rng.as_mut() {
                v *= 1.0 + noise * (2.0 * rng.gen::<f64>() - 1.0);
            }
            row[j] = v;
        }
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    AttentionMap::new(a, 0)
}
