//! Command-line frontend: simulate | enhance | synthesize | evaluate |
//! pipeline, wired around one JSON config with flag overrides. Every run
//! writes a manifest carrying the resolved config snapshot, the seed, and the
//! crate version.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::formation::{render_scene_pair, simulate_observation, FormationParams, SceneSpec, SyntheticScene};
use crate::pipeline::{enhance_image_pair, EnhanceParams, EnhancementReport};
use crate::scene_io::{
    read_depth_image, read_point_cloud, write_depth_image, write_point_cloud, DepthImage,
    PointCloud, RunConfig,
};
use crate::synthesis::{compare_clouds, estimate_normals, project_to_cloud, ViewSide};

#[derive(Debug, Parser)]
#[command(name = "mvdepth", version, about = "Two-view depth image enhancement and point cloud evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene pair and apply the sensor formation model.
    Simulate(CommonOpts),
    /// Enhance a noisy rectified pair.
    Enhance(EnhanceOpts),
    /// Project a depth pair to a merged point cloud.
    Synthesize(SynthesizeOpts),
    /// Compare a test cloud against a reference cloud.
    Evaluate(EvaluateOpts),
    /// Run simulate, enhance, synthesize and evaluate end to end.
    Pipeline(CommonOpts),
}

#[derive(Debug, Clone, Args)]
pub struct CommonOpts {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured noise variance.
    #[arg(long = "sigma-n2")]
    pub sigma_n2: Option<f64>,
    /// Overrides the configured quantizer bit depth.
    #[arg(long)]
    pub bits: Option<u32>,
    /// Replaces the configured scene with a named preset.
    #[arg(long, value_enum)]
    pub scene: Option<ScenePreset>,
    /// Drops the right view's likelihood and prior terms (ablation).
    #[arg(long)]
    pub single_view: bool,
    /// Worker threads for the parallel per-point loops.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EnhanceOpts {
    #[command(flatten)]
    pub common: CommonOpts,
    /// Noisy left input; defaults to <out-dir>/noisy_left.pgm.
    #[arg(long)]
    pub left: Option<PathBuf>,
    /// Noisy right input; defaults to <out-dir>/noisy_right.pgm.
    #[arg(long)]
    pub right: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthesizeOpts {
    #[command(flatten)]
    pub common: CommonOpts,
    /// Left depth input; defaults to <out-dir>/enhanced_left.pgm.
    #[arg(long)]
    pub left: Option<PathBuf>,
    /// Right depth input; defaults to <out-dir>/enhanced_right.pgm.
    #[arg(long)]
    pub right: Option<PathBuf>,
    /// Output cloud; defaults to <out-dir>/cloud.ply.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Attach estimated normals to the output cloud.
    #[arg(long)]
    pub normals: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateOpts {
    #[command(flatten)]
    pub common: CommonOpts,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Also dump the per-reference-point distances as CSV.
    #[arg(long)]
    pub per_point: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenePreset {
    Plane,
    Slanted,
    Sinusoid,
}

impl ScenePreset {
    fn to_spec(self, depth_range: [f64; 2], rig_width: usize, rig_height: usize) -> SceneSpec {
        let [lo, hi] = depth_range;
        let span = hi - lo;
        match self {
            ScenePreset::Plane => SceneSpec::Plane {
                depth: lo + 0.5 * span,
            },
            ScenePreset::Slanted => SceneSpec::Slanted {
                base: lo + 0.2 * span,
                slope_u: 0.3 * span / rig_width as f64,
                slope_v: 0.2 * span / rig_height as f64,
            },
            ScenePreset::Sinusoid => SceneSpec::SlantedSinusoid {
                base: lo + 0.2 * span,
                slope_u: 0.3 * span / rig_width as f64,
                slope_v: 0.2 * span / rig_height as f64,
                amplitude: 0.05 * span,
                period_u: rig_width as f64,
                period_v: rig_height as f64 / 2.0,
            },
        }
    }
}

/// Flags override config-file values; the manifest records the result.
fn resolve_config(common: &CommonOpts) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.formation.seed = seed;
    }
    if let Some(s2) = common.sigma_n2 {
        cfg.formation.sigma_n2 = s2;
    }
    if let Some(bits) = common.bits {
        cfg.formation.bits = bits;
    }
    if let Some(preset) = common.scene {
        cfg.scene = preset.to_spec(cfg.depth_range, cfg.rig.width, cfg.rig.height);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_jobs(common: &CommonOpts) {
    if let Some(jobs) = common.jobs {
        // ignore failure when a pool exists (e.g. pipeline calling stages)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global();
    }
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    subcommand: &'a str,
    version: &'a str,
    timestamp_unix: u64,
    config_path: Option<String>,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
    config: &'a RunConfig,
}

fn write_manifest(
    subcommand: &str,
    common: &CommonOpts,
    cfg: &RunConfig,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    let manifest = RunManifest {
        subcommand,
        version: env!("CARGO_PKG_VERSION"),
        timestamp_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        config_path: common.config.as_ref().map(|p| p.display().to_string()),
        seed: cfg.formation.seed,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        config: cfg,
    };
    let path = common.out_dir.join(format!("manifest_{subcommand}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| Error::io(path, e))
}

/// Storage scale for depth files: the finest subdivision of the quantization
/// step whose raw values still fit in 16 bits at the top of the depth range.
fn storage_scale(qstep: f64, depth_max: f64) -> f64 {
    let k = (65535.0 * qstep / depth_max).floor().max(1.0);
    qstep / k
}

fn ensure_out_dir(common: &CommonOpts) -> Result<()> {
    std::fs::create_dir_all(&common.out_dir).map_err(|e| Error::io(common.out_dir.clone(), e))
}

pub struct SimulateOutput {
    pub clean_left: PathBuf,
    pub clean_right: PathBuf,
    pub noisy_left: PathBuf,
    pub noisy_right: PathBuf,
}

pub fn run_simulate(common: &CommonOpts) -> Result<SimulateOutput> {
    let cfg = resolve_config(common)?;
    ensure_out_dir(common)?;
    init_jobs(common);

    let scene = SyntheticScene::new(cfg.scene.clone(), cfg.rig.clone())?;
    let (clean_left, clean_right) = render_scene_pair(&scene)?;
    let qstep = cfg.quantization_step();
    let params_l = FormationParams::new(qstep, cfg.formation.sigma_n2, cfg.formation.seed)?;
    // decorrelated noise across views, still a pure function of the seed
    let params_r = FormationParams::new(
        qstep,
        cfg.formation.sigma_n2,
        cfg.formation.seed.wrapping_add(0x9e3779b97f4a7c15),
    )?;
    let noisy_left = simulate_observation(&clean_left, &params_l);
    let noisy_right = simulate_observation(&clean_right, &params_r);

    let scale = storage_scale(qstep, cfg.depth_range[1]);
    let out = SimulateOutput {
        clean_left: common.out_dir.join("clean_left.pgm"),
        clean_right: common.out_dir.join("clean_right.pgm"),
        noisy_left: common.out_dir.join("noisy_left.pgm"),
        noisy_right: common.out_dir.join("noisy_right.pgm"),
    };
    write_depth_image(&clean_left, &out.clean_left, scale)?;
    write_depth_image(&clean_right, &out.clean_right, scale)?;
    write_depth_image(&noisy_left, &out.noisy_left, scale)?;
    write_depth_image(&noisy_right, &out.noisy_right, scale)?;
    write_manifest(
        "simulate",
        common,
        &cfg,
        &[],
        &[
            &out.clean_left,
            &out.clean_right,
            &out.noisy_left,
            &out.noisy_right,
        ],
    )?;
    Ok(out)
}

pub struct EnhanceOutput {
    pub enhanced_left: PathBuf,
    pub enhanced_right: PathBuf,
    pub report: PathBuf,
}

pub fn run_enhance(opts: &EnhanceOpts) -> Result<EnhanceOutput> {
    let common = &opts.common;
    let cfg = resolve_config(common)?;
    ensure_out_dir(common)?;
    init_jobs(common);

    let left_path = opts
        .left
        .clone()
        .unwrap_or_else(|| common.out_dir.join("noisy_left.pgm"));
    let right_path = opts
        .right
        .clone()
        .unwrap_or_else(|| common.out_dir.join("noisy_right.pgm"));
    let left = read_depth_image(&left_path)?;
    let right = read_depth_image(&right_path)?;

    let mut params = EnhanceParams::from_config(&cfg);
    params.single_view = common.single_view;
    let (enh_left, enh_right, report) = enhance_image_pair(&left, &right, &cfg.rig, &params)?;

    let scale = storage_scale(cfg.quantization_step(), cfg.depth_range[1]);
    let out = EnhanceOutput {
        enhanced_left: common.out_dir.join("enhanced_left.pgm"),
        enhanced_right: common.out_dir.join("enhanced_right.pgm"),
        report: common.out_dir.join("enhance_report.json"),
    };
    write_depth_image(&enh_left, &out.enhanced_left, scale)?;
    write_depth_image(&enh_right, &out.enhanced_right, scale)?;
    write_report(&report, &out.report)?;
    write_manifest(
        "enhance",
        common,
        &cfg,
        &[&left_path, &right_path],
        &[&out.enhanced_left, &out.enhanced_right, &out.report],
    )?;
    Ok(out)
}

fn write_report(report: &EnhancementReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report).unwrap())
        .map_err(|e| Error::io(path, e))
}

fn synthesize_pair(
    left: &DepthImage,
    right: &DepthImage,
    cfg: &RunConfig,
    normals: bool,
) -> Result<PointCloud> {
    let merged = project_to_cloud(left, &cfg.rig, ViewSide::Left)
        .merged(&project_to_cloud(right, &cfg.rig, ViewSide::Right));
    if normals {
        estimate_normals(&merged, cfg.synthesis.normal_k)
    } else {
        Ok(merged)
    }
}

pub fn run_synthesize(opts: &SynthesizeOpts) -> Result<PathBuf> {
    let common = &opts.common;
    let cfg = resolve_config(common)?;
    ensure_out_dir(common)?;
    init_jobs(common);

    let left_path = opts
        .left
        .clone()
        .unwrap_or_else(|| common.out_dir.join("enhanced_left.pgm"));
    let right_path = opts
        .right
        .clone()
        .unwrap_or_else(|| common.out_dir.join("enhanced_right.pgm"));
    let out_path = opts
        .out
        .clone()
        .unwrap_or_else(|| common.out_dir.join("cloud.ply"));
    let left = read_depth_image(&left_path)?;
    let right = read_depth_image(&right_path)?;
    let cloud = synthesize_pair(&left, &right, &cfg, opts.normals)?;
    write_point_cloud(&cloud, &out_path)?;
    write_manifest(
        "synthesize",
        common,
        &cfg,
        &[&left_path, &right_path],
        &[&out_path],
    )?;
    Ok(out_path)
}

#[derive(Debug, Serialize)]
pub struct EvaluateMetrics {
    pub c2c: f64,
    pub c2p: f64,
    pub reference_points: usize,
    pub test_points: usize,
}

pub fn run_evaluate(opts: &EvaluateOpts) -> Result<EvaluateMetrics> {
    let common = &opts.common;
    let cfg = resolve_config(common)?;
    ensure_out_dir(common)?;
    init_jobs(common);

    let reference = read_point_cloud(&opts.reference)?;
    let test = read_point_cloud(&opts.test)?;
    let test = if test.normals().is_some() {
        test
    } else {
        estimate_normals(&test, cfg.synthesis.normal_k)?
    };
    let report = compare_clouds(&reference, &test, opts.per_point)?;
    let metrics = EvaluateMetrics {
        c2c: report.c2c,
        c2p: report.c2p,
        reference_points: reference.len(),
        test_points: test.len(),
    };

    let json_path = common.out_dir.join("metrics.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&metrics).unwrap())
        .map_err(|e| Error::io(json_path.clone(), e))?;
    let csv_path = common.out_dir.join("metrics.csv");
    let csv = format!(
        "metric,value\nc2c,{}\nc2p,{}\nreference_points,{}\ntest_points,{}\n",
        metrics.c2c, metrics.c2p, metrics.reference_points, metrics.test_points
    );
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path.clone(), e))?;
    if let Some(distances) = &report.per_point {
        let path = common.out_dir.join("c2c_per_point.csv");
        let mut body = String::from("index,distance\n");
        for (i, d) in distances.iter().enumerate() {
            body.push_str(&format!("{i},{d}\n"));
        }
        std::fs::write(&path, body).map_err(|e| Error::io(path, e))?;
    }
    write_manifest(
        "evaluate",
        common,
        &cfg,
        &[opts.reference.as_path(), opts.test.as_path()],
        &[&json_path, &csv_path],
    )?;
    Ok(metrics)
}

#[derive(Debug, Serialize)]
pub struct PipelineMetrics {
    pub c2c_noisy: f64,
    pub c2c_enhanced: f64,
    pub c2p_noisy: f64,
    pub c2p_enhanced: f64,
    pub c2c_ratio: f64,
    pub c2p_ratio: f64,
}

pub fn run_pipeline(common: &CommonOpts) -> Result<PipelineMetrics> {
    let cfg = resolve_config(common)?;
    ensure_out_dir(common)?;
    init_jobs(common);

    let sim = run_simulate(common)?;
    let enh = run_enhance(&EnhanceOpts {
        common: common.clone(),
        left: Some(sim.noisy_left.clone()),
        right: Some(sim.noisy_right.clone()),
    })?;

    // clouds: ground truth, noisy, enhanced
    let gt_left = read_depth_image(&sim.clean_left)?;
    let gt_right = read_depth_image(&sim.clean_right)?;
    let noisy_left = read_depth_image(&sim.noisy_left)?;
    let noisy_right = read_depth_image(&sim.noisy_right)?;
    let enh_left = read_depth_image(&enh.enhanced_left)?;
    let enh_right = read_depth_image(&enh.enhanced_right)?;

    let gt_cloud = synthesize_pair(&gt_left, &gt_right, &cfg, false)?;
    let noisy_cloud = synthesize_pair(&noisy_left, &noisy_right, &cfg, true)?;
    let enh_cloud = synthesize_pair(&enh_left, &enh_right, &cfg, true)?;

    let gt_path = common.out_dir.join("ground_truth.ply");
    let noisy_path = common.out_dir.join("noisy.ply");
    let enh_path = common.out_dir.join("enhanced.ply");
    write_point_cloud(&gt_cloud, &gt_path)?;
    write_point_cloud(&noisy_cloud, &noisy_path)?;
    write_point_cloud(&enh_cloud, &enh_path)?;

    let noisy_metrics = compare_clouds(&gt_cloud, &noisy_cloud, false)?;
    let enh_metrics = compare_clouds(&gt_cloud, &enh_cloud, false)?;
    let metrics = PipelineMetrics {
        c2c_noisy: noisy_metrics.c2c,
        c2c_enhanced: enh_metrics.c2c,
        c2p_noisy: noisy_metrics.c2p,
        c2p_enhanced: enh_metrics.c2p,
        c2c_ratio: enh_metrics.c2c / noisy_metrics.c2c,
        c2p_ratio: enh_metrics.c2p / noisy_metrics.c2p,
    };

    let json_path = common.out_dir.join("metrics.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&metrics).unwrap())
        .map_err(|e| Error::io(json_path.clone(), e))?;
    let csv_path = common.out_dir.join("metrics.csv");
    let csv = format!(
        "metric,value\nc2c_noisy,{}\nc2c_enhanced,{}\nc2p_noisy,{}\nc2p_enhanced,{}\n",
        metrics.c2c_noisy, metrics.c2c_enhanced, metrics.c2p_noisy, metrics.c2p_enhanced
    );
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path.clone(), e))?;
    write_manifest(
        "pipeline",
        common,
        &cfg,
        &[],
        &[&gt_path, &noisy_path, &enh_path, &json_path, &csv_path],
    )?;
    Ok(metrics)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(common) => {
            let out = run_simulate(&common)?;
            println!(
                "wrote {}, {}, {}, {}",
                out.clean_left.display(),
                out.clean_right.display(),
                out.noisy_left.display(),
                out.noisy_right.display()
            );
        }
        Command::Enhance(opts) => {
            let out = run_enhance(&opts)?;
            println!(
                "wrote {}, {}, {}",
                out.enhanced_left.display(),
                out.enhanced_right.display(),
                out.report.display()
            );
        }
        Command::Synthesize(opts) => {
            let out = run_synthesize(&opts)?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate(opts) => {
            let metrics = run_evaluate(&opts)?;
            println!("c2c = {}", metrics.c2c);
            println!("c2p = {}", metrics.c2p);
        }
        Command::Pipeline(common) => {
            let metrics = run_pipeline(&common)?;
            println!("c2c: noisy {} -> enhanced {}", metrics.c2c_noisy, metrics.c2c_enhanced);
            println!("c2p: noisy {} -> enhanced {}", metrics.c2p_noisy, metrics.c2p_enhanced);
        }
    }
    Ok(())
}
