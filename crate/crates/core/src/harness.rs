//! Studies built on the pipeline: curriculum traces and rotation-consistency
//! checks across the aligned / z-axis / full-rotation regimes.

use rand::Rng;
use serde::Serialize;

use crate::curriculum::{
    coherence, masked_count_for, run_dual_stream_detailed, CurriculumConfig, DualStreamRun,
};
use crate::error::{Error, Result};
use crate::geometry::{apply_rotation, patchify, sample_rotation, PatchSet, PointCloud, RotationMode};
use crate::metrics::{jaccard, mean_std};
use crate::rng::seeded;
use crate::semantic_mask::{synth_attention, AttentionMap, Clustering};

/// Where the semantic stream's attention comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionSource {
    /// A fixed map, e.g. exported from a training run. Its size must equal
    /// the patch count.
    Fixed(AttentionMap),
    /// Gaussian kernel over patch centers, recomputed per cloud.
    Synthetic { bandwidth: f64, noise: f64, seed: u64 },
}

impl Default for AttentionSource {
    fn default() -> Self {
        AttentionSource::Synthetic {
            bandwidth: 0.25,
            noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub num_patches: usize,
    pub knn: usize,
    pub attention: AttentionSource,
    pub config: CurriculumConfig,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            num_patches: 64,
            knn: 32,
            attention: AttentionSource::default(),
            config: CurriculumConfig::default(),
        }
    }
}

impl PipelineOptions {
    pub fn attention_for(&self, patches: &PatchSet) -> Result<AttentionMap> {
        match &self.attention {
            AttentionSource::Fixed(map) => {
                if map.len() != patches.len() {
                    return Err(Error::argument(format!(
                        "attention map has {} patches, pipeline produces {}",
                        map.len(),
                        patches.len()
                    )));
                }
                Ok(map.clone())
            }
            AttentionSource::Synthetic { bandwidth, noise, seed } => {
                synth_attention(patches, *bandwidth, *noise, *seed)
            }
        }
    }
}

/// Surface samples of a three-lobed shape: a unit sphere with smaller spheres
/// attached along +x and +z. Points are split between lobes by surface area.
pub fn demo_cloud(n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::argument("demo cloud needs at least one point"));
    }
    const LOBES: [([f64; 3], f64); 3] = [([0.0, 0.0, 0.0], 1.0), ([1.45, 0.0, 0.0], 0.6), ([0.0, 0.0, 1.3], 0.45)];
    let area: f64 = LOBES.iter().map(|(_, r)| r * r).sum();
    let mut rng = seeded(seed);
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let pick = rng.gen::<f64>() * area;
        let mut acc = 0.0;
        let (center, radius) = LOBES
            .iter()
            .find(|(_, r)| {
                acc += r * r;
                pick < acc
            })
            .copied()
            .unwrap_or(LOBES[2]);
        // rejection-sample a direction from the unit ball
        let v: [f64; 3] = std::array::from_fn(|_| 2.0 * rng.gen::<f64>() - 1.0);
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !(len > 1e-6 && len <= 1.0) {
            continue;
        }
        let p: [f64; 3] = std::array::from_fn(|d| center[d] + radius * v[d] / len);
        let inside_other = LOBES.iter().any(|(c, r)| {
            *r != radius && (0..3).map(|d| (p[d] - c[d]).powi(2)).sum::<f64>() < r * r
        });
        if !inside_other {
            points.push(p);
        }
    }
    PointCloud::new(points)
}

/// Patchify, build attention, and run the dual-stream pipeline at iteration `t`.
pub fn mask_cloud(
    cloud: &PointCloud,
    opts: &PipelineOptions,
    t: u64,
    prior: Option<&Clustering>,
) -> Result<(PatchSet, DualStreamRun)> {
    opts.config.validate()?;
    let patches = patchify(cloud, opts.num_patches, opts.knn)?;
    let attn = opts.attention_for(&patches)?;
    let run = run_dual_stream_detailed(&patches, &attn, t, &opts.config, prior)?;
    Ok((patches, run))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: u64,
    pub alpha: f64,
    #[serde(rename = "C")]
    pub components: usize,
    pub tau: f64,
    pub masked_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurriculumTrace {
    pub rows: Vec<TraceRow>,
}

impl CurriculumTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,alpha,C,tau,masked_count\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.t, r.alpha, r.components, r.tau, r.masked_count
            ));
        }
        out
    }
}

/// `steps` evenly spaced iterations from 0 to `total`, rounded half up.
pub fn trace_iterations(total: u64, steps: usize) -> Result<Vec<u64>> {
    if steps < 2 {
        return Err(Error::argument(format!("trace needs at least 2 steps, got {steps}")));
    }
    let span = (steps - 1) as u128;
    Ok((0..steps as u128)
        .map(|i| ((2 * i * total as u128 + span) / (2 * span)) as u64)
        .collect())
}

/// Runs the pipeline at each traced iteration; the warm-start option chains
/// each clustering into the next step.
pub fn curriculum_trace(cloud: &PointCloud, opts: &PipelineOptions, steps: usize) -> Result<CurriculumTrace> {
    let ts = trace_iterations(opts.config.total_iters, steps)?;
    opts.config.validate()?;
    let patches = patchify(cloud, opts.num_patches, opts.knn)?;
    let attn = opts.attention_for(&patches)?;
    let mut prior: Option<Clustering> = None;
    let mut rows = Vec::with_capacity(ts.len());
    for t in ts {
        let run = run_dual_stream_detailed(&patches, &attn, t, &opts.config, prior.as_ref())?;
        rows.push(TraceRow {
            t,
            alpha: run.alpha,
            components: run.components,
            tau: run.tau,
            masked_count: run.selection.masked_count(),
        });
        if run.clustering.is_some() {
            prior = run.clustering;
        }
    }
    Ok(CurriculumTrace { rows })
}

/// Base/rotated rotation regimes. `AR` means the base run sees the aligned
/// cloud and the comparison run a fully rotated one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RotationScenario {
    AA,
    AR,
    ZZ,
    ZR,
    RR,
}

impl RotationScenario {
    pub const ALL: [RotationScenario; 5] = [Self::AA, Self::AR, Self::ZZ, Self::ZR, Self::RR];

    pub fn modes(self) -> (RotationMode, RotationMode) {
        use RotationMode::*;
        match self {
            Self::AA => (Aligned, Aligned),
            Self::AR => (Aligned, Full),
            Self::ZZ => (ZAxis, ZAxis),
            Self::ZR => (ZAxis, Full),
            Self::RR => (Full, Full),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::AA => "A/A",
            Self::AR => "A/R",
            Self::ZZ => "Z/Z",
            Self::ZR => "Z/R",
            Self::RR => "R/R",
        }
    }
}

impl std::str::FromStr for RotationScenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('/', "").as_str() {
            "aa" => Ok(Self::AA),
            "ar" => Ok(Self::AR),
            "zz" => Ok(Self::ZZ),
            "zr" => Ok(Self::ZR),
            "rr" => Ok(Self::RR),
            other => Err(Error::argument(format!("unknown rotation scenario {other:?}"))),
        }
    }
}

impl Serialize for RotationScenario {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub overlap: f64,
    pub coherence: f64,
    pub ratio_exact: bool,
    pub z_rank_match: bool,
    pub same_centers: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RotationStudyReport {
    pub scenario: RotationScenario,
    pub trials: usize,
    pub t: u64,
    #[serde(rename = "T")]
    pub total_iters: u64,
    /// Jaccard overlap of masked patch-center point indices, base vs rotated.
    pub overlap_mean: f64,
    pub overlap_std: f64,
    /// Share of components left unsplit by the mask at `t = T` (alpha = 1).
    pub coherence_mean: f64,
    pub ratio_exact: bool,
    /// Trials whose z-rank column matched between base and rotated runs.
    pub z_rank_matches: usize,
    pub per_trial: Vec<TrialOutcome>,
}

impl RotationStudyReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn trial_seed(seed: u64, trial: usize, lane: u64) -> u64 {
    // splitmix64 finalizer over (seed, trial, lane)
    let mut z = seed
        .wrapping_add((trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(lane.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn masked_centers(patches: &PatchSet, run: &DualStreamRun) -> Vec<usize> {
    run.selection
        .masked_indices()
        .into_iter()
        .map(|i| patches.centers()[i])
        .collect()
}

/// z-rank of each center, keyed by the center's point index.
fn z_rank_by_point(patches: &PatchSet, run: &DualStreamRun) -> Vec<(usize, usize)> {
    let mut v: Vec<(usize, usize)> = patches
        .centers()
        .iter()
        .zip(run.ranks.as_slice())
        .map(|(&c, r)| (c, r[2]))
        .collect();
    v.sort_unstable();
    v
}

/// For each trial, rotates the cloud per the scenario's base and comparison
/// regimes, runs the pipeline on both with identical seeds at iteration `t`,
/// and compares the masks.
pub fn rotation_study(
    cloud: &PointCloud,
    scenario: RotationScenario,
    trials: usize,
    t: u64,
    opts: &PipelineOptions,
    seed: u64,
) -> Result<RotationStudyReport> {
    if trials == 0 {
        return Err(Error::argument("rotation study needs at least one trial"));
    }
    opts.config.validate()?;
    let total = opts.config.total_iters;
    let (base_mode, rot_mode) = scenario.modes();
    let mut per_trial = Vec::with_capacity(trials);
    for trial in 0..trials {
        let base_rot = sample_rotation(base_mode, trial_seed(seed, trial, 1));
        let cmp_rot = sample_rotation(rot_mode, trial_seed(seed, trial, 2));
        let base_cloud = apply_rotation(cloud, &base_rot);
        let cmp_cloud = apply_rotation(cloud, &cmp_rot);

        let (bp, brun) = mask_cloud(&base_cloud, opts, t, None)?;
        let (cp, crun) = mask_cloud(&cmp_cloud, opts, t, None)?;
        let overlap = jaccard(&masked_centers(&bp, &brun), &masked_centers(&cp, &crun));

        let (_, late) = if t == total {
            (cp.clone(), crun.clone())
        } else {
            mask_cloud(&cmp_cloud, opts, total, None)?
        };
        let coh = late
            .clustering
            .as_ref()
            .map(|c| coherence(&c.assignment, late.selection.masked()))
            .unwrap_or(1.0);

        let expected = masked_count_for(opts.config.ratio, opts.num_patches);
        let ratio_exact = [&brun, &crun, &late]
            .iter()
            .all(|r| r.selection.masked_count() == expected && r.selection.masked_indices().len() == expected);

        per_trial.push(TrialOutcome {
            trial,
            overlap,
            coherence: coh,
            ratio_exact,
            z_rank_match: z_rank_by_point(&bp, &brun) == z_rank_by_point(&cp, &crun),
            same_centers: bp.centers() == cp.centers(),
        });
    }
    per_trial.sort_by_key(|o| o.trial);
    let overlaps: Vec<f64> = per_trial.iter().map(|o| o.overlap).collect();
    let (overlap_mean, overlap_std) = mean_std(&overlaps);
    let (coherence_mean, _) = mean_std(&per_trial.iter().map(|o| o.coherence).collect::<Vec<_>>());
    Ok(RotationStudyReport {
        scenario,
        trials,
        t,
        total_iters: total,
        overlap_mean,
        overlap_std,
        coherence_mean,
        ratio_exact: per_trial.iter().all(|o| o.ratio_exact),
        z_rank_matches: per_trial.iter().filter(|o| o.z_rank_match).count(),
        per_trial,
    })
}
