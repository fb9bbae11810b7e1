//! Browser bindings for the interactive demo in `www/`. Every export returns a
//! JSON string; the plain functions behind them are usable (and tested) natively.

use maskforge_core::curriculum::{alpha, CurriculumConfig, Seeds};
use maskforge_core::geometry::{apply_rotation, dist2, sample_rotation, RotationMode};
use maskforge_core::harness::{demo_cloud, mask_cloud, rotation_study, PipelineOptions, RotationScenario};
use maskforge_core::semantic_mask::component_count;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct MaskView {
    /// Flattened xyz of every point.
    points: Vec<f32>,
    /// Patch owning each point (nearest center).
    owner: Vec<u32>,
    centers: Vec<f32>,
    masked: Vec<bool>,
    scores: Vec<f64>,
    grid_type: Vec<u8>,
    /// Semantic component per patch; empty when the semantic stream was skipped.
    component: Vec<usize>,
    alpha: f64,
    components: usize,
    tau: f64,
    masked_count: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn mask_demo_json(
    num_points: usize,
    patches: usize,
    knn: usize,
    t: u64,
    total: u64,
    gamma: f64,
    rotation: &str,
    seed: u64,
) -> Result<String, String> {
    let mode: RotationMode = rotation.parse().map_err(|e| format!("{e}"))?;
    let cloud = demo_cloud(num_points, seed).map_err(|e| e.to_string())?;
    let cloud = apply_rotation(&cloud, &sample_rotation(mode, seed));
    let opts = PipelineOptions {
        num_patches: patches,
        knn,
        config: CurriculumConfig {
            total_iters: total,
            gamma,
            seeds: Seeds::from_master(seed),
            ..CurriculumConfig::default()
        },
        ..PipelineOptions::default()
    };
    if t > total {
        return Err(format!("t = {t} exceeds T = {total}"));
    }
    let (set, run) = mask_cloud(&cloud, &opts, t, None).map_err(|e| e.to_string())?;

    let owner = cloud
        .points()
        .iter()
        .map(|p| {
            let mut best = 0;
            for (i, c) in set.center_coords().iter().enumerate() {
                if dist2(p, c) < dist2(p, &set.center_coords()[best]) {
                    best = i;
                }
            }
            best as u32
        })
        .collect();
    let flat = |pts: &[[f64; 3]]| pts.iter().flatten().map(|&v| v as f32).collect::<Vec<_>>();
    let view = MaskView {
        points: flat(cloud.points()),
        owner,
        centers: flat(set.center_coords()),
        masked: run.selection.masked().to_vec(),
        scores: run.selection.scores().values().to_vec(),
        grid_type: run.grid.grid_type().to_vec(),
        component: run.clustering.as_ref().map(|c| c.assignment.clone()).unwrap_or_default(),
        alpha: run.alpha,
        components: run.components,
        tau: run.tau,
        masked_count: run.selection.masked_count(),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct ScheduleView {
    t: Vec<u64>,
    alpha: Vec<f64>,
    components: Vec<usize>,
}

/// `alpha(t)` and `C(t)` at `steps` evenly spaced iterations from 0 to T.
pub fn schedule_json(total: u64, gamma: f64, c_max: usize, c_min: usize, steps: usize) -> Result<String, String> {
    if steps < 2 {
        return Err("need at least 2 steps".into());
    }
    let ts: Vec<u64> = (0..steps as u64)
        .map(|i| (i as u128 * total as u128 / (steps as u128 - 1)) as u64)
        .collect();
    let mut view = ScheduleView { t: Vec::new(), alpha: Vec::new(), components: Vec::new() };
    for t in ts {
        view.alpha.push(alpha(t, total, gamma).map_err(|e| e.to_string())?);
        view.components.push(component_count(t, total, c_max, c_min, usize::MAX).map_err(|e| e.to_string())?);
        view.t.push(t);
    }
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

pub fn rotation_check_json(scenario: &str, trials: usize, t: u64, seed: u64) -> Result<String, String> {
    let scenario: RotationScenario = scenario.parse().map_err(|e| format!("{e}"))?;
    let cloud = demo_cloud(512, seed).map_err(|e| e.to_string())?;
    let opts = PipelineOptions {
        num_patches: 32,
        knn: 16,
        config: CurriculumConfig {
            seeds: Seeds::from_master(seed),
            ..CurriculumConfig::default()
        },
        ..PipelineOptions::default()
    };
    rotation_study(&cloud, scenario, trials, t, &opts, seed)
        .map(|r| r.to_json())
        .map_err(|e| e.to_string())
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn mask_demo(
    num_points: usize,
    patches: usize,
    knn: usize,
    t: u32,
    total: u32,
    gamma: f64,
    rotation: &str,
    seed: u32,
) -> Result<String, JsValue> {
    mask_demo_json(num_points, patches, knn, t.into(), total.into(), gamma, rotation, seed.into())
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn schedule(total: u32, gamma: f64, c_max: usize, c_min: usize, steps: usize) -> Result<String, JsValue> {
    schedule_json(total.into(), gamma, c_max, c_min, steps).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn rotation_check(scenario: &str, trials: usize, t: u32, seed: u32) -> Result<String, JsValue> {
    rotation_check_json(scenario, trials, t.into(), seed.into()).map_err(|e| JsValue::from_str(&e))
}
