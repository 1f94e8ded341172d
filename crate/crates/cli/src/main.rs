use anyhow::{bail, Context, Result};
use brickpose::cloud::{PointCloud, RansacParams};
use brickpose::codec::{decode, encode_mask, EncodingConfig, GridTensor};
use brickpose::geom::{rotated_nms, RotatedBox};
use brickpose::io::{self, read_bundle_mask, read_json, read_ply, to_json_string, write_bundle, write_json, write_ply};
use brickpose::metrics::{evaluate, EvalMode, MatchRule};
use brickpose::pose::{
    derive_seed, estimate_brick_pose, select_topmost, BrickDims, BrickPose, PipelineOutput, PipelineParams,
    PlacementCriteria, PlacementNoise, WallParams,
};
use brickpose::synth::{generate, ClutterParams};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "brickpose", version, about = "Rotated-box targets, detection metrics and brick pose estimation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Base RNG seed; every subcommand is deterministic given this
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Brick dimensions L,W,H in meters
    #[arg(long, global = true, default_value = "0.2,0.09,0.06")]
    dims: BrickDims,
    /// RANSAC iterations for plane and line fitting
    #[arg(long, global = true, default_value_t = 500)]
    ransac_iters: usize,
    /// RANSAC inlier distance in meters
    #[arg(long, global = true, default_value_t = 0.005)]
    ransac_thresh: f64,
    /// Grid cell size in pixels
    #[arg(long, global = true, default_value_t = 16)]
    cell_size: u32,
    /// Minimum class probability for a decoded cell
    #[arg(long, global = true, default_value_t = 0.5)]
    conf_thresh: f64,
    /// IoU threshold for NMS and AP matching
    #[arg(long, global = true, default_value_t = 0.5)]
    iou_thresh: f64,
    /// Up direction x,y,z (camera frame for pose, world frame for simulate)
    #[arg(long, global = true, default_value = "0,0,-1", value_parser = parse_vec3)]
    up: Vector3<f64>,
    /// Directory for intermediate stage artifacts
    #[arg(long, global = true)]
    debug_dir: Option<PathBuf>,
}

fn parse_vec3(s: &str) -> Result<Vector3<f64>, String> {
    let v: Vec<f64> =
        s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match v[..] {
        [x, y, z] => Vector3::new(x, y, z).try_normalize(1e-12).ok_or_else(|| "vector must be non-zero".to_string()),
        _ => Err(format!("expected x,y,z, got {s:?}")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render random cluttered scenes into bundle directories
    Synth(SynthArgs),
    /// Estimate the brick pose inside a rotated box of a registered cloud
    Pose(PoseArgs),
    /// Score predicted boxes against a scene bundle
    Eval(EvalArgs),
    /// Simulate wall building with noisy placements
    Simulate(SimulateArgs),
    /// Grid-tensor encoding and decoding
    #[command(subcommand)]
    Codec(CodecCommand),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of scenes
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    /// Bricks per scene
    #[arg(long, default_value_t = 6)]
    bricks: usize,
    /// Range noise standard deviation in meters
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Also render the ground plane as background points
    #[arg(long)]
    ground: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PoseArgs {
    /// Pixel-registered ASCII PLY cloud
    #[arg(long)]
    cloud: PathBuf,
    /// JSON file with one box or a list of boxes
    #[arg(long = "box")]
    boxes: PathBuf,
    /// Which box of a list to use
    #[arg(long, conflicts_with = "all")]
    index: Option<usize>,
    /// Estimate every box and report the topmost pose along --up
    #[arg(long)]
    all: bool,
    /// Output file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Rotated,
    Upright,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    Center,
    Iou,
}

#[derive(Args)]
struct EvalArgs {
    /// JSON list of predicted boxes
    #[arg(long)]
    pred: PathBuf,
    /// Scene bundle directory with the ground truth
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Rotated)]
    mode: Mode,
    /// Recall matching rule
    #[arg(long, value_enum, default_value_t = Rule::Center)]
    rule: Rule,
    /// Apply rotated NMS (at --iou-thresh) to the predictions first
    #[arg(long)]
    nms: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 25)]
    rounds: usize,
    #[arg(long, default_value_t = 6)]
    layers: usize,
    /// Horizontal placement noise in meters
    #[arg(long, default_value_t = 0.0)]
    sigma_t: f64,
    /// Rotation noise in radians (per rotation-vector component)
    #[arg(long, default_value_t = 0.0)]
    sigma_r: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CodecCommand {
    /// Encode a bundle's instance mask into a grid tensor
    Encode {
        /// Scene bundle directory
        #[arg(long)]
        scene: PathBuf,
        /// Tensor output file
        #[arg(long)]
        out: PathBuf,
        /// Assignment report; stdout when omitted
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Decode a grid tensor into boxes
    Decode {
        #[arg(long)]
        tensor: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit<T: Serialize + ?Sized>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_json(p, value)?,
        None => print!("{}", to_json_string(value)?),
    }
    Ok(())
}

impl Global {
    fn encoding(&self) -> Result<EncodingConfig> {
        let cfg =
            EncodingConfig { cell: self.cell_size, conf_threshold: self.conf_thresh, ..EncodingConfig::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    fn pipeline(&self) -> PipelineParams {
        let tune = |base: RansacParams| RansacParams {
            iterations: self.ransac_iters,
            threshold: self.ransac_thresh,
            seed: self.seed,
            ..base
        };
        PipelineParams {
            plane: tune(RansacParams::plane()),
            line: tune(RansacParams::line()),
            dims: self.dims,
            ..PipelineParams::default()
        }
    }
}

#[derive(Serialize)]
struct ManifestEntry {
    dir: String,
    seed: u64,
    files: Vec<String>,
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    scenes: Vec<ManifestEntry>,
}

fn cmd_synth(g: &Global, a: &SynthArgs) -> Result<()> {
    if a.sigma.is_nan() || a.sigma < 0.0 {
        bail!("--sigma must be non-negative");
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let params = ClutterParams {
        n_bricks: a.bricks,
        dims: g.dims,
        noise_sigma: a.sigma,
        render_ground: a.ground,
        ..ClutterParams::default()
    };
    let mut scenes: Vec<ManifestEntry> = (0..a.scenes)
        .into_par_iter()
        .map(|i| -> Result<ManifestEntry> {
            let seed = derive_seed(g.seed, i as u64);
            let (spec, scene) = generate(&params, seed)?;
            let name = format!("scene_{i:04}");
            write_bundle(&a.out.join(&name), seed, &spec, &scene)?;
            let files = io::BUNDLE_FILES.iter().map(|f| format!("{name}/{f}")).collect();
            Ok(ManifestEntry { dir: name, seed, files })
        })
        .collect::<Result<_>>()?;
    scenes.sort_by(|x, y| x.dir.cmp(&y.dir));
    write_json(&a.out.join("manifest.json"), &Manifest { seed: g.seed, scenes })?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BoxInput {
    One(RotatedBox),
    Many(Vec<RotatedBox>),
}

fn dump_stages(dir: &Path, out: &PipelineOutput) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let crop = &out.crop;
    write_ply(&dir.join("crop.ply"), crop)?;
    write_ply(&dir.join("inliers.ply"), &crop.subset(&out.plane.inliers))?;
    write_ply(&dir.join("boundary.ply"), &crop.subset(&out.boundary))?;
    let line_pts: Vec<usize> = out.lines.iter().flat_map(|l| l.inliers.iter().copied()).collect();
    write_ply(&dir.join("lines.ply"), &crop.subset(&line_pts))?;
    write_ply(&dir.join("corners.ply"), &PointCloud::new(out.corners.iter().map(|c| c.point).collect())?)?;
    #[derive(Serialize)]
    struct Line {
        anchor: [f64; 3],
        direction: [f64; 3],
        inliers: usize,
    }
    let summary = serde_json::json!({
        "crop_points": crop.len(),
        "plane": {"normal": out.plane.normal, "offset": out.plane.offset, "inliers": out.plane.inliers.len()},
        "surface": out.surface,
        "boundary_points": out.boundary.len(),
        "lines": out.lines.iter().map(|l| Line {
            anchor: l.anchor.coords.into(),
            direction: l.direction.into(),
            inliers: l.inliers.len(),
        }).collect::<Vec<_>>(),
        "corners": out.corners.iter().map(|c| serde_json::json!({"point": c.point.coords, "lines": [c.lines.0, c.lines.1]})).collect::<Vec<_>>(),
        "edges": out.edges,
        "face": out.face,
        "refined_surface": out.refined,
        "pose": out.pose,
    });
    write_json(&dir.join("stages.json"), &summary)?;
    Ok(())
}

fn cmd_pose(g: &Global, a: &PoseArgs) -> Result<()> {
    let cloud = read_ply(&a.cloud)?;
    let boxes = match read_json::<BoxInput>(&a.boxes)? {
        BoxInput::One(b) => vec![b],
        BoxInput::Many(v) => v,
    };
    let params = g.pipeline();
    if a.all {
        #[derive(Serialize)]
        struct Entry {
            index: usize,
            #[serde(skip_serializing_if = "Option::is_none")]
            pose: Option<BrickPose>,
            #[serde(skip_serializing_if = "Option::is_none")]
            error: Option<String>,
        }
        let results: Vec<Result<PipelineOutput, _>> =
            boxes.par_iter().map(|b| estimate_brick_pose(&cloud, b, &params)).collect();
        let mut ok = Vec::new();
        let mut entries = Vec::new();
        for (i, r) in results.iter().enumerate() {
            match r {
                Ok(o) => {
                    ok.push((i, o.pose));
                    if let Some(d) = &g.debug_dir {
                        dump_stages(&d.join(format!("box_{i:03}")), o)?;
                    }
                    entries.push(Entry { index: i, pose: Some(o.pose), error: None });
                }
                Err(e) => entries.push(Entry { index: i, pose: None, error: Some(e.to_string()) }),
            }
        }
        let poses: Vec<BrickPose> = ok.iter().map(|(_, p)| *p).collect();
        let topmost = select_topmost(&poses, &g.up).ok().map(|k| ok[k].0);
        emit(&serde_json::json!({"poses": entries, "topmost": topmost}), a.out.as_deref())?;
        if topmost.is_none() {
            bail!("no box produced a pose");
        }
        return Ok(());
    }
    let index = a.index.unwrap_or(0);
    let region = boxes.get(index).with_context(|| format!("box index {index} out of range ({} boxes)", boxes.len()))?;
    let out = estimate_brick_pose(&cloud, region, &params)?;
    if let Some(d) = &g.debug_dir {
        dump_stages(d, &out)?;
    }
    emit(&out.pose, a.out.as_deref())
}

fn cmd_eval(g: &Global, a: &EvalArgs) -> Result<()> {
    let mut pred: Vec<RotatedBox> = read_json(&a.pred)?;
    let (_, mask) = read_bundle_mask(&a.gt)?;
    if a.nms {
        pred = rotated_nms(&pred, g.iou_thresh);
    }
    let mode = match a.mode {
        Mode::Rotated => EvalMode::Rotated,
        Mode::Upright => EvalMode::Upright,
    };
    let rule = match a.rule {
        Rule::Center => MatchRule::CenterInBox,
        Rule::Iou => MatchRule::Iou { tau: g.iou_thresh },
    };
    let report = evaluate(&pred, &mask, mode, rule, g.iou_thresh);
    emit(&report, a.out.as_deref())
}

fn cmd_simulate(g: &Global, a: &SimulateArgs) -> Result<()> {
    let params = WallParams {
        rounds: a.rounds,
        layers: a.layers,
        noise: PlacementNoise { sigma_t: a.sigma_t, sigma_r: a.sigma_r },
        dims: g.dims,
        criteria: PlacementCriteria::default(),
        up: g.up.into(),
        seed: g.seed,
    };
    let report = brickpose::pose::simulate_wall(&params)?;
    let table = serde_json::json!({
        "rounds": report.rounds,
        "sigma_t": a.sigma_t,
        "sigma_r": a.sigma_r,
        "seed": g.seed,
        "layers": report.layers.iter().zip(&report.successes)
            .map(|(l, s)| serde_json::json!({"layer": l, "successful_rounds": s}))
            .collect::<Vec<_>>(),
    });
    emit(&table, a.out.as_deref())
}

fn cmd_codec(g: &Global, c: &CodecCommand) -> Result<()> {
    let cfg = g.encoding()?;
    match c {
        CodecCommand::Encode { scene, out, report } => {
            let (_, mask) = read_bundle_mask(scene)?;
            let enc = encode_mask(&mask, &cfg)?;
            enc.tensor.write(out)?;
            let summary = serde_json::json!({
                "rows": enc.tensor.rows(),
                "cols": enc.tensor.cols(),
                "assigned": enc.assigned,
                "dropped": enc.dropped,
            });
            emit(&summary, report.as_deref())
        }
        CodecCommand::Decode { tensor, out } => {
            let t = GridTensor::read(tensor, &cfg)?;
            emit(&decode(&t, &cfg), out.as_deref())
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth(a) => cmd_synth(g, a),
        Command::Pose(a) => cmd_pose(g, a),
        Command::Eval(a) => cmd_eval(g, a),
        Command::Simulate(a) => cmd_simulate(g, a),
        Command::Codec(c) => cmd_codec(g, c),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
