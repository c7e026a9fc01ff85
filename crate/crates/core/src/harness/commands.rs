//! Command implementations behind the `posedist` binary. Every file written
//! here is a pure function of the inputs; wall-clock timings are only
//! returned to the caller.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::config::{SceneConfig, SynthesisConfig};
use super::scene::{AppliedNoise, Scene};
use super::viz::{render, viz_records, write_records_csv, CONVENTION};
use crate::distribution::{
    entropy, evaluate_grid, log_likelihood_of, log_likelihood_upper_bound, marginalize_rotation,
    mean_log_likelihood, uniform_log_likelihood, Approximation, MeanLogLikelihood,
    PoseDistribution, RotationDistribution,
};
use crate::error::{Error, Result};
use crate::heatmap::write_heatmaps;
use crate::projection::write_point_csv;
use crate::rotation_grid::{
    build_rotation_grid, geodesic_distance, grid_size, Rotation, RotationGrid,
};

pub const MAX_SWEEP_RECURSION: u32 = 5;
pub const DEFAULT_VIZ_RECURSION: u32 = 5;
pub const DEFAULT_MIN_ALPHA: f64 = 1e-3;
pub const VIZ_WIDTH: usize = 800;
pub const VIZ_HEIGHT: usize = 400;

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut out = create(path)?;
    f(&mut out)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_with(path, |out| {
        serde_json::to_writer_pretty(&mut *out, value)?;
        writeln!(out)
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_grid(recursion: u32, out: &Path) -> Result<PathBuf> {
    let grid = build_rotation_grid(recursion)?;
    ensure_dir(out)?;
    let path = out.join("grid.csv");
    write_with(&path, |w| grid.write_csv(w))?;
    Ok(path)
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthManifest {
    pub gt_pose: super::config::PoseConfig,
    /// Includes the identity.
    pub symmetries: Vec<[f64; 4]>,
    pub sigma: f64,
    pub seed: Option<u64>,
    pub keypoints: usize,
    pub resolution: usize,
    /// Intrinsics the heatmaps were rendered with, after crop jitter.
    pub intrinsics: crate::projection::CameraIntrinsics,
    pub noise: AppliedNoise,
    pub crop_shift_rule: &'static str,
}

/// Renders the configured synthetic heatmaps to `heatmaps.kphm`, with a
/// manifest and a `scene.json` that evaluates the written file.
pub fn cmd_synth(config: &SceneConfig, out: &Path) -> Result<SynthManifest> {
    let synthesis: &SynthesisConfig = config
        .synthesis
        .as_ref()
        .ok_or_else(|| Error::config("synthesis", "synth needs a synthesis block"))?;
    let scene = Scene::build(config)?;
    ensure_dir(out)?;
    write_heatmaps(&scene.heatmaps, &out.join("heatmaps.kphm"))?;
    write_with(&out.join("keypoints.csv"), |w| {
        write_point_csv(w, scene.keypoints.points())
    })?;

    let manifest = SynthManifest {
        gt_pose: config.gt_pose,
        symmetries: scene.symmetries.rotations().iter().map(Rotation::wxyz).collect(),
        sigma: synthesis.sigma,
        seed: config.seed,
        keypoints: scene.keypoints.len(),
        resolution: scene.camera.resolution,
        intrinsics: scene.camera,
        noise: scene.noise.clone(),
        crop_shift_rule: match config.noise.as_ref().and_then(|n| n.crop_translation_jitter) {
            Some(_) => "uniform within the configured bound",
            None => "uniform within the range keeping every projected keypoint one pixel inside the crop",
        },
    };
    write_json(&out.join("manifest.json"), &manifest)?;

    let mut derived = config.clone();
    derived.keypoints_path = PathBuf::from("keypoints.csv");
    derived.keypoint_count = None;
    derived.keypoint_seed_index = 0;
    derived.heatmaps_path = Some(PathBuf::from("heatmaps.kphm"));
    derived.synthesis = None;
    derived.intrinsics = scene.camera;
    if let Some(noise) = derived.noise.as_mut() {
        // already baked into the heatmaps and intrinsics
        noise.crop_scale_jitter = 0.0;
        noise.crop_translation_jitter = Some(0.0);
    }
    write_json(&out.join("scene.json"), &derived)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize)]
pub struct ArgmaxSummary {
    pub index: usize,
    pub rotation: [f64; 4],
    pub mass: f64,
    /// Geodesic distance to the ground truth rotation, radians.
    pub error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub recursion: u32,
    pub grid_size: usize,
    pub translations: usize,
    pub evaluations: usize,
    pub mode: Approximation,
    pub gt_log_likelihood: f64,
    pub upper_bound: f64,
    pub uniform_baseline: f64,
    pub entropy: f64,
    pub argmax: ArgmaxSummary,
    pub position_estimate: [f64; 3],
    pub noise: AppliedNoise,
}

pub struct Evaluation {
    pub summary: EvalSummary,
    pub pose: PoseDistribution,
    pub rotation: RotationDistribution,
    pub elapsed: Duration,
}

/// Evaluates a built scene on a grid; timing covers the grid evaluation only.
pub fn evaluate_scene(scene: &Scene, grid: &Arc<RotationGrid>) -> Result<Evaluation> {
    let start = Instant::now();
    let pose = evaluate_grid(
        &scene.heatmaps,
        &scene.keypoints,
        grid,
        &scene.translation_grid,
        &scene.camera,
        scene.mode,
    )?;
    let elapsed = start.elapsed();
    let rotation = marginalize_rotation(&pose);
    let best = rotation.argmax();
    let best_rotation = grid.get(best);
    let center = scene.translation_grid.center();
    let summary = EvalSummary {
        recursion: grid.recursion(),
        grid_size: grid.len(),
        translations: scene.translation_grid.len(),
        evaluations: grid.len() * scene.translation_grid.len(),
        mode: scene.mode,
        gt_log_likelihood: log_likelihood_of(&rotation, &scene.gt_pose.rotation),
        upper_bound: log_likelihood_upper_bound(grid.len()),
        uniform_baseline: uniform_log_likelihood(),
        entropy: entropy(rotation.masses()),
        argmax: ArgmaxSummary {
            index: best,
            rotation: best_rotation.wxyz(),
            mass: rotation.mass(best),
            error: geodesic_distance(&best_rotation, &scene.gt_pose.rotation),
        },
        position_estimate: [center.x, center.y, center.z],
        noise: scene.noise.clone(),
    };
    Ok(Evaluation {
        summary,
        pose,
        rotation,
        elapsed,
    })
}

/// Writes `rotation_distribution.csv`, `summary.json` and optionally the
/// full pose masses as `pose_distribution.kppd`.
pub fn cmd_eval(
    config: &SceneConfig,
    out: &Path,
    save_pose_distribution: bool,
) -> Result<Evaluation> {
    let scene = Scene::build(config)?;
    let grid = Arc::new(build_rotation_grid(scene.recursion)?);
    let eval = evaluate_scene(&scene, &grid)?;
    ensure_dir(out)?;
    write_with(&out.join("rotation_distribution.csv"), |w| {
        eval.rotation.write_csv(w)
    })?;
    write_json(&out.join("summary.json"), &eval.summary)?;
    if save_pose_distribution {
        write_with(&out.join("pose_distribution.kppd"), |w| eval.pose.encode(w))?;
    }
    Ok(eval)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub recursion: u32,
    pub grid_size: usize,
    pub evaluations: usize,
    pub gt_log_likelihood: f64,
    pub upper_bound: f64,
    #[serde(skip)]
    pub elapsed: Duration,
}

pub fn parse_recursions(list_text: &str) -> Result<Vec<u32>> {
    let list = list_text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| Error::InvalidArgument(format!("`{s}` is not a recursion level")))
        })
        .collect::<Result<Vec<_>>>()?;
    if list.is_empty() {
        return Err(Error::InvalidArgument("no recursions given".into()));
    }
    Ok(list)
}

/// Scores the same scene at each recursion and writes `sweep.csv`.
pub fn cmd_sweep(config: &SceneConfig, recursions: &[u32], out: &Path) -> Result<Vec<SweepRow>> {
    if let Some(s) = recursions.iter().find(|&&s| s > MAX_SWEEP_RECURSION) {
        return Err(Error::InvalidArgument(format!(
            "sweep recursion {s} is outside 0..={MAX_SWEEP_RECURSION}"
        )));
    }
    let scene = Scene::build(config)?;
    let mut rows = Vec::with_capacity(recursions.len());
    for &s in recursions {
        let grid = Arc::new(build_rotation_grid(s)?);
        let eval = evaluate_scene(&scene, &grid)?;
        rows.push(SweepRow {
            recursion: s,
            grid_size: grid.len(),
            evaluations: eval.summary.evaluations,
            gt_log_likelihood: eval.summary.gt_log_likelihood,
            upper_bound: eval.summary.upper_bound,
            elapsed: eval.elapsed,
        });
    }
    ensure_dir(out)?;
    write_with(&out.join("sweep.csv"), |w| {
        writeln!(
            w,
            "recursion,grid_size,evaluations,gt_log_likelihood,upper_bound"
        )?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{:.16e},{:.16e}",
                r.recursion, r.grid_size, r.evaluations, r.gt_log_likelihood, r.upper_bound
            )?;
        }
        Ok(())
    })?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct VizSummary {
    pub recursion: u32,
    pub records: usize,
    pub min_alpha: f64,
    pub convention: &'static str,
    pub ground_truth: Option<super::viz::VizRecord>,
}

/// Recursion level of a grid with `len` samples.
fn recursion_for_size(len: usize) -> Result<u32> {
    (0..=8)
        .find(|&s| grid_size(s) == len)
        .ok_or_else(|| Error::Format(format!("{len} rows is not a rotation grid size")))
}

/// Writes `viz.csv`, `viz.ppm` and `viz.json`. The distribution is either
/// read from `input` or computed from the config with the ground truth crop
/// and position.
pub fn cmd_viz(
    config: Option<&SceneConfig>,
    input: Option<&Path>,
    recursion: u32,
    min_alpha: f64,
    out: &Path,
) -> Result<VizSummary> {
    if !(0.0..=1.0).contains(&min_alpha) {
        return Err(Error::InvalidArgument(format!(
            "min alpha must lie in [0, 1], got {min_alpha}"
        )));
    }
    let gt = config.map(|c| c.gt_pose.to_pose()).transpose()?;
    let rd = match (input, config) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let rows = text
                .lines()
                .skip(1)
                .filter(|l| !l.trim().is_empty())
                .count();
            let grid = Arc::new(build_rotation_grid(recursion_for_size(rows)?)?);
            RotationDistribution::read_csv(grid, text.as_bytes())?
        }
        (None, Some(config)) => {
            let scene = Scene::build_noiseless(config)?;
            let grid = Arc::new(build_rotation_grid(recursion)?);
            evaluate_scene(&scene, &grid)?.rotation
        }
        (None, None) => {
            return Err(Error::InvalidArgument(
                "viz needs a config or an input distribution".into(),
            ))
        }
    };
    let records = viz_records(&rd, min_alpha);
    let gt_rotation = gt.map(|p| p.rotation);
    ensure_dir(out)?;
    write_with(&out.join("viz.csv"), |w| write_records_csv(w, &records))?;
    let raster = render(&records, gt_rotation.as_ref(), VIZ_WIDTH, VIZ_HEIGHT);
    write_with(&out.join("viz.ppm"), |w| raster.write_ppm(w))?;
    let summary = VizSummary {
        recursion: rd.rotation_grid().recursion(),
        records: records.len(),
        min_alpha,
        convention: CONVENTION,
        ground_truth: gt_rotation.map(|r| super::viz::viz_record(usize::MAX, &r, 1.0)),
    };
    write_json(&out.join("viz.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub recursion: u32,
    pub evaluations: usize,
    pub repetitions: usize,
    pub median_seconds: f64,
    pub evaluations_per_second: f64,
}

/// Times `evaluate_grid` on the scene's workload.
pub fn cmd_bench(config: &SceneConfig, repetitions: usize) -> Result<BenchReport> {
    if repetitions == 0 {
        return Err(Error::InvalidArgument(
            "repetitions must be positive".into(),
        ));
    }
    let scene = Scene::build(config)?;
    let grid = Arc::new(build_rotation_grid(scene.recursion)?);
    bench_scene(&scene, &grid, repetitions)
}

pub fn bench_scene(
    scene: &Scene,
    grid: &Arc<RotationGrid>,
    repetitions: usize,
) -> Result<BenchReport> {
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        let pd = evaluate_grid(
            &scene.heatmaps,
            &scene.keypoints,
            grid,
            &scene.translation_grid,
            &scene.camera,
            scene.mode,
        )?;
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(pd);
    }
    times.sort_by(f64::total_cmp);
    let median = if repetitions % 2 == 1 {
        times[repetitions / 2]
    } else {
        0.5 * (times[repetitions / 2 - 1] + times[repetitions / 2])
    };
    let evaluations = grid.len() * scene.translation_grid.len();
    Ok(BenchReport {
        recursion: grid.recursion(),
        evaluations,
        repetitions,
        median_seconds: median,
        evaluations_per_second: evaluations as f64 / median.max(f64::MIN_POSITIVE),
    })
}

/// One entry of a scene list.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredScene {
    pub object: String,
    pub config: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreReport {
    pub scenes: usize,
    #[serde(flatten)]
    pub mean: MeanLogLikelihood,
}

pub fn load_scene_list(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let list: Vec<ScoredScene> = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(list
        .into_iter()
        .map(|s| {
            let config = if s.config.is_relative() {
                base.join(s.config)
            } else {
                s.config
            };
            (s.object, config)
        })
        .collect())
}

/// Scores every scene and writes `score.csv` and `score.json` with the
/// per-object and overall mean log likelihood. `adjust` may override
/// settings of each loaded config (it receives the scene position).
pub fn cmd_score<F>(list: &[(String, PathBuf)], out: &Path, mut adjust: F) -> Result<ScoreReport>
where
    F: FnMut(usize, &mut SceneConfig),
{
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    let mut rows = Vec::with_capacity(list.len());
    let mut grids: Vec<Arc<RotationGrid>> = Vec::new();
    for (i, (object, path)) in list.iter().enumerate() {
        let mut config = SceneConfig::load(path)?;
        adjust(i, &mut config);
        let scene = Scene::build(&config)?;
        let grid = match grids.iter().find(|g| g.recursion() == scene.recursion) {
            Some(g) => Arc::clone(g),
            None => {
                let g = Arc::new(build_rotation_grid(scene.recursion)?);
                grids.push(Arc::clone(&g));
                g
            }
        };
        let ll = evaluate_scene(&scene, &grid)?.summary.gt_log_likelihood;
        match groups.iter_mut().find(|(name, _)| name == object) {
            Some((_, scores)) => scores.push(ll),
            None => groups.push((object.clone(), vec![ll])),
        }
        rows.push((object.clone(), path.clone(), ll));
    }
    let report = ScoreReport {
        scenes: rows.len(),
        mean: mean_log_likelihood(&groups)?,
    };
    ensure_dir(out)?;
    write_with(&out.join("score.csv"), |w| {
        writeln!(w, "object,config,gt_log_likelihood")?;
        for (object, path, ll) in &rows {
            writeln!(w, "{object},{},{ll:.16e}", path.display())?;
        }
        Ok(())
    })?;
    write_json(&out.join("score.json"), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recursion_lists() {
        assert_eq!(parse_recursions("0, 2,5").unwrap(), vec![0, 2, 5]);
        assert!(parse_recursions("1,x").is_err());
    }

    #[test]
    fn sizes_map_back_to_recursions() {
        assert_eq!(recursion_for_size(72).unwrap(), 0);
        assert_eq!(recursion_for_size(36864).unwrap(), 3);
        assert!(recursion_for_size(100).is_err());
    }
}
