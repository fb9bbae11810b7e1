//! Curriculum weighting between the two streams, score mixing, top-k mask
//! selection, and the composed dual-stream pipeline.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::PatchSet;
use crate::grid_mask::{
    grid_coordinates, grid_scores, make_cell_probs, rank_coordinates, AxisRanks, CellScheme,
    GridAssignment, GridCellProbs, Granularity,
};
use crate::rng::seeded;
use crate::semantic_mask::{
    affinity_graph, component_count, em_cluster, em_cluster_warm, semantic_scores,
    threshold_schedule, AttentionMap, Clustering, EmOptions, FeatureSource,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stream {
    Spatial,
    Semantic,
    Mixed,
}

/// Per-patch masking scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskScores {
    values: Vec<f64>,
    stream: Stream,
}

impl MaskScores {
    pub fn new(values: Vec<f64>, stream: Stream) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || !(0.0..=1.0).contains(*v))
        {
            return Err(Error::validation(format!("score {i} = {v} is outside [0, 1]")));
        }
        Ok(Self { values, stream })
    }

    pub(crate) fn new_unchecked(values: Vec<f64>, stream: Stream) -> Self {
        debug_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        Self { values, stream }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Independent seeds for each randomized stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Seeds {
    pub cell_probs: u64,
    pub delta: u64,
    pub em: u64,
    pub selection: u64,
}

impl Seeds {
    /// Derives the four stage seeds from one master seed.
    pub fn from_master(seed: u64) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Seeds {
            cell_probs: rng.gen(),
            delta: rng.gen(),
            em: rng.gen(),
            selection: rng.gen(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    /// Total training iterations `T`.
    pub total_iters: u64,
    pub gamma: f64,
    /// Fraction of patches to mask, strictly between 0 and 1.
    pub ratio: f64,
    pub c_max: usize,
    pub c_min: usize,
    pub q_start: f64,
    pub q_end: f64,
    pub granularity: Granularity,
    pub cell_scheme: CellScheme,
    pub explicit_probs: Option<[f64; 8]>,
    pub feature_source: FeatureSource,
    pub em: EmOptions,
    /// Warm-start EM from a prior clustering when the caller supplies one.
    pub em_warm_start: bool,
    pub seeds: Seeds,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            total_iters: 100,
            gamma: 2.0,
            ratio: 0.75,
            c_max: 40,
            c_min: 10,
            q_start: 0.5,
            q_end: 0.9,
            granularity: Granularity::default(),
            cell_scheme: CellScheme::Checkerboard,
            explicit_probs: None,
            feature_source: FeatureSource::Attention,
            em: EmOptions::default(),
            em_warm_start: false,
            seeds: Seeds::default(),
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::argument("T must be >= 1"));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::argument(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::argument(format!(
                "mask ratio must be strictly between 0 and 1, got {}",
                self.ratio
            )));
        }
        if self.c_min == 0 || self.c_min > self.c_max {
            return Err(Error::argument(format!(
                "need 1 <= C_min <= C_max, got {} and {}",
                self.c_min, self.c_max
            )));
        }
        if !(0.0..=1.0).contains(&self.q_start)
            || !(0.0..=1.0).contains(&self.q_end)
            || self.q_start > self.q_end
        {
            return Err(Error::argument("need 0 <= q_start <= q_end <= 1"));
        }
        if self.granularity.0.contains(&0) {
            return Err(Error::argument("grid granularity must be >= 1"));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the config's JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `(t / T)^gamma`.
pub fn alpha(t: u64, total: u64, gamma: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::argument("T must be >= 1"));
    }
    if t > total {
        return Err(Error::argument(format!("iteration t={t} exceeds T={total}")));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::argument(format!("gamma must be > 0, got {gamma}")));
    }
    if t == total {
        return Ok(1.0);
    }
    Ok((t as f64 / total as f64).powf(gamma))
}

/// Elementwise `(1 - alpha) * spatial + alpha * semantic`.
pub fn mix_scores(spatial: &MaskScores, semantic: &MaskScores, alpha: f64) -> Result<MaskScores> {
    if spatial.len() != semantic.len() {
        return Err(Error::argument(format!(
            "stream lengths differ: {} vs {}",
            spatial.len(),
            semantic.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::argument(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let values = spatial
        .values
        .iter()
        .zip(&semantic.values)
        .map(|(&s, &m)| {
            let v = (1.0 - alpha) * s + alpha * m;
            // rounding can push a convex combination one ulp outside its ends
            v.clamp(s.min(m), s.max(m))
        })
        .collect();
    Ok(MaskScores::new_unchecked(values, Stream::Mixed))
}

/// `round_half_up(ratio * k)`.
pub fn masked_count_for(ratio: f64, k: usize) -> usize {
    (ratio * k as f64 + 0.5).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub alpha: f64,
    pub t: u64,
    pub total_iters: u64,
    pub seeds: Seeds,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSelection {
    masked: Vec<bool>,
    masked_count: usize,
    ratio: f64,
    scores: MaskScores,
    provenance: Option<Provenance>,
}

impl MaskSelection {
    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    pub fn masked_count(&self) -> usize {
        self.masked_count
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn num_patches(&self) -> usize {
        self.masked.len()
    }

    /// The scores the selection was made from.
    pub fn scores(&self) -> &MaskScores {
        &self.scores
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    /// Ascending indices of masked patches.
    pub fn masked_indices(&self) -> Vec<usize> {
        self.masked
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        self.masked
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (!m).then_some(i))
            .collect()
    }
}

/// Masks the `round_half_up(ratio * K)` highest-scoring patches. Equal scores
/// are ordered by a seeded random key, then by patch index; the scores
/// themselves are never perturbed.
pub fn select_mask(mixed: &MaskScores, ratio: f64, seed: u64) -> Result<MaskSelection> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::argument(format!(
            "mask ratio must be strictly between 0 and 1, got {ratio}"
        )));
    }
    let k = mixed.len();
    let count = masked_count_for(ratio, k);
    if count == 0 || count >= k {
        return Err(Error::argument(format!(
            "ratio {ratio} over {k} patches masks {count} patches; need between 1 and {}",
            k.saturating_sub(1)
        )));
    }
    let mut rng = seeded(seed);
    let keys: Vec<u64> = (0..k).map(|_| rng.gen()).collect();
    let scores = mixed.values();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(keys[a].cmp(&keys[b]))
            .then(a.cmp(&b))
    });
    let mut masked = vec![false; k];
    for &i in &order[..count] {
        masked[i] = true;
    }
    Ok(MaskSelection {
        masked,
        masked_count: count,
        ratio,
        scores: mixed.clone(),
        provenance: None,
    })
}

/// Everything computed on the way to a selection, for inspection and plotting.
#[derive(Debug, Clone)]
pub struct DualStreamRun {
    pub selection: MaskSelection,
    pub alpha: f64,
    pub ranks: AxisRanks,
    pub grid: GridAssignment,
    pub cell_probs: GridCellProbs,
    pub spatial: MaskScores,
    /// Absent when `alpha == 0`; the semantic stream cannot affect the result.
    pub semantic: Option<MaskScores>,
    pub clustering: Option<Clustering>,
    pub tau: f64,
    pub components: usize,
}

pub fn run_dual_stream(
    patches: &PatchSet,
    attn: &AttentionMap,
    t: u64,
    cfg: &CurriculumConfig,
) -> Result<MaskSelection> {
    run_dual_stream_detailed(patches, attn, t, cfg, None).map(|r| r.selection)
}

/// The full pipeline. `prior` is used only when `cfg.em_warm_start` is set.
pub fn run_dual_stream_detailed(
    patches: &PatchSet,
    attn: &AttentionMap,
    t: u64,
    cfg: &CurriculumConfig,
    prior: Option<&Clustering>,
) -> Result<DualStreamRun> {
    cfg.validate()?;
    let k = patches.len();
    if attn.len() != k {
        return Err(Error::argument(format!(
            "attention map covers {} patches but the patch set has {k}",
            attn.len()
        )));
    }
    let total = cfg.total_iters;
    let a = alpha(t, total, cfg.gamma)?;

    let ranks = rank_coordinates(patches.center_coords())?;
    let grid = grid_coordinates(&ranks, cfg.granularity)?;
    let cell_probs = make_cell_probs(cfg.cell_scheme, cfg.seeds.cell_probs, cfg.explicit_probs)?;
    let spatial = grid_scores(&grid, &cell_probs);

    let components = component_count(t, total, cfg.c_max, cfg.c_min, k)?;
    let tau = threshold_schedule(attn, t, total, cfg.q_start, cfg.q_end)?;

    let (semantic, clustering, mixed) = if a == 0.0 {
        (None, None, MaskScores::new_unchecked(spatial.values.clone(), Stream::Mixed))
    } else {
        let features = match cfg.feature_source {
            FeatureSource::Attention => attn.matrix().clone(),
            FeatureSource::Affinity => affinity_graph(attn, tau)?.weights().clone(),
        };
        let clustering = match prior.filter(|_| cfg.em_warm_start) {
            Some(prev) => em_cluster_warm(&features, components, cfg.seeds.em, &cfg.em, prev)?,
            None => em_cluster(&features, components, cfg.seeds.em, &cfg.em)?,
        };
        let semantic = semantic_scores(&clustering, cfg.seeds.delta);
        let mixed = mix_scores(&spatial, &semantic, a)?;
        (Some(semantic), Some(clustering), mixed)
    };

    let selection = select_mask(&mixed, cfg.ratio, cfg.seeds.selection)?.with_provenance(Provenance {
        alpha: a,
        t,
        total_iters: total,
        seeds: cfg.seeds,
        config_hash: cfg.hash(),
    });

    Ok(DualStreamRun {
        selection,
        alpha: a,
        ranks,
        grid,
        cell_probs,
        spatial,
        semantic,
        clustering,
        tau,
        components,
    })
}

/// Components with members on both sides of the mask.
pub fn split_components(assignment: &[usize], masked: &[bool]) -> usize {
    let c_count = assignment.iter().copied().max().map_or(0, |m| m + 1);
    let mut seen = vec![[false; 2]; c_count];
    for (&c, &m) in assignment.iter().zip(masked) {
        seen[c][m as usize] = true;
    }
    seen.iter().filter(|s| s[0] && s[1]).count()
}

/// Share of non-empty components that are entirely masked or entirely visible.
pub fn coherence(assignment: &[usize], masked: &[bool]) -> f64 {
    let c_count = assignment.iter().copied().max().map_or(0, |m| m + 1);
    let mut seen = vec![[false; 2]; c_count];
    for (&c, &m) in assignment.iter().zip(masked) {
        seen[c][m as usize] = true;
    }
    let non_empty = seen.iter().filter(|s| s[0] || s[1]).count();
    if non_empty == 0 {
        return 1.0;
    }
    let whole = seen.iter().filter(|s| s[0] != s[1]).count();
    whole as f64 / non_empty as f64
}
