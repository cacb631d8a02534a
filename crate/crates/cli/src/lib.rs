//! Command implementations behind the `trajattn` binary.
//!
//! Every command returns a JSON report; `main` prints it on one line and maps
//! errors to exit codes with [`exit_code`].

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use trajattn::attn::{
    full_spacetime_attention, fuse, init_branch_from_temporal, temporal_attention,
    trajectory_branch, AttentionWeights, FeatureVolume, Scalar, DEFAULT_HEADS,
};
use trajattn::metrics::{ate, rpe, PoseTrajectory};
use trajattn::synth::selftest::run_selftest;
use trajattn::traj::{
    extract_from_image, extract_from_video, rescale_to_latent, PointTracks, TrajectorySet,
};
use trajattn::{io, Error};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVARIANT: i32 = 1;
pub const EXIT_INVALID_ARGUMENT: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Maps a library error onto the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Degenerate(_) => EXIT_INVALID_ARGUMENT,
        Error::Format { .. } | Error::Io { .. } | Error::Json(_) => EXIT_IO,
        Error::Internal(_) => EXIT_INVARIANT,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Temporal,
    Branch,
    Fused,
    Spacetime,
}

/// Settings shared by all commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub heads: usize,
    pub latent_scale: f64,
    pub rpe_delta: usize,
    pub precision: Precision,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            heads: DEFAULT_HEADS,
            latent_scale: 1.0,
            rpe_delta: 1,
            precision: Precision::F32,
            learning_rate: 1e-5,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.heads < 1 {
            return Err(Error::InvalidArgument("heads must be at least 1".into()));
        }
        if !(self.latent_scale.is_finite() && self.latent_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "latent_scale must be positive, got {}",
                self.latent_scale
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.rpe_delta < 1 {
            return Err(Error::InvalidArgument(
                "rpe_delta must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Flag overrides; unset fields fall back to the config file, then defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON file with any subset of the run settings
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Attention heads (overrides the count stored in the weights file)
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    /// Latent grid size relative to pixel resolution
    #[arg(long, global = true)]
    pub latent_scale: Option<f64>,
    /// Frame step for the relative pose error
    #[arg(long, global = true, visible_alias = "delta")]
    pub rpe_delta: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    /// Resolves flags > config file > defaults.
    pub fn resolve(&self) -> Result<RunConfig, Error> {
        Ok(self.resolve_tracking_heads()?.0)
    }

    /// Like [`resolve`](Self::resolve), also reporting whether the head
    /// count was set explicitly rather than defaulted.
    pub fn resolve_tracking_heads(&self) -> Result<(RunConfig, bool), Error> {
        let (mut cfg, file_heads) = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|source| Error::Io {
                    path: path.clone(),
                    source,
                })?;
                let raw: Value = serde_json::from_str(&text)?;
                let has_heads = raw.get("heads").is_some();
                (serde_json::from_value(raw)?, has_heads)
            }
            None => (RunConfig::default(), false),
        };
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
        if let Some(v) = self.latent_scale {
            cfg.latent_scale = v;
        }
        if let Some(v) = self.rpe_delta {
            cfg.rpe_delta = v;
        }
        if let Some(v) = self.precision {
            cfg.precision = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok((cfg, file_heads || self.heads.is_some()))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "trajattn",
    version,
    about = "Trajectory extraction and trajectory attention toolkit"
)]
pub struct Cli {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trajectories induced by camera motion over one depth map
    ExtractImage {
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trajectories from point tracks, per-frame depth and camera poses
    ExtractVideo {
        #[arg(long)]
        tracks: PathBuf,
        /// Directory of per-frame depth files, read in file-name order
        #[arg(long)]
        depth_dir: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs an attention operator on a feature volume
    Attend {
        #[arg(long)]
        features: PathBuf,
        /// Pixel-space trajectories, mapped onto the feature grid with the latent scale
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Trajectory-branch weights; defaults to the zero-initialized copy of `--weights`
        #[arg(long)]
        branch_weights: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// ATE and RPE between two pose files
    Metrics {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Runs the built-in invariant suite
    Selftest {
        /// Weights to check in addition to the random instances
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

/// Outcome of a command: a JSON report plus whether every invariant held.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub report: Value,
    pub passed: bool,
}

impl Outcome {
    fn ok(report: Value) -> Self {
        Self {
            report,
            passed: true,
        }
    }
}

pub fn run(cli: &Cli) -> Result<Outcome, Error> {
    let (cfg, explicit_heads) = cli.config.resolve_tracking_heads()?;
    match &cli.command {
        Command::ExtractImage { depth, poses, out } => cmd_extract_image(depth, poses, out),
        Command::ExtractVideo {
            tracks,
            depth_dir,
            poses,
            out,
        } => cmd_extract_video(tracks, depth_dir, poses, out),
        Command::Attend {
            features,
            trajectories,
            weights,
            branch_weights,
            mode,
            out,
        } => {
            let heads = explicit_heads.then_some(cfg.heads);
            let paths = AttendPaths {
                features,
                trajectories,
                weights,
                branch_weights: branch_weights.as_deref(),
                out,
            };
            cmd_attend(&paths, *mode, &cfg, heads)
        }
        Command::Metrics { est, gt } => cmd_metrics(est, gt, cfg.rpe_delta),
        Command::Selftest { weights } => cmd_selftest(cfg.seed, weights.as_deref()),
    }
}

fn summary(ts: &TrajectorySet) -> Value {
    json!({ "L": ts.count(), "F": ts.frames(), "valid_fraction": ts.valid_fraction() })
}

pub fn cmd_extract_image(depth: &Path, poses: &Path, out: &Path) -> Result<Outcome, Error> {
    let d = io::read_depth(depth)?;
    let p = io::read_poses(poses)?;
    let ts = extract_from_image(&d, &p.require_intrinsics()?, &p.frames)?;
    io::write_trajectories(out, &ts)?;
    Ok(Outcome::ok(summary(&ts)))
}

/// Depth files of `dir` in file-name order.
pub fn depth_files(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let io_err = |source| Error::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn cmd_extract_video(
    tracks: &Path,
    depth_dir: &Path,
    poses: &Path,
    out: &Path,
) -> Result<Outcome, Error> {
    let t: PointTracks = io::read_tracks(tracks)?;
    let depths = depth_files(depth_dir)?
        .iter()
        .map(|p| io::read_depth(p))
        .collect::<Result<Vec<_>, _>>()?;
    let p = io::read_poses(poses)?;
    let ts = extract_from_video(&t, &depths, &p.require_intrinsics()?, &p.frames)?;
    io::write_trajectories(out, &ts)?;
    Ok(Outcome::ok(summary(&ts)))
}

pub struct AttendPaths<'a> {
    pub features: &'a Path,
    pub trajectories: &'a Path,
    pub weights: &'a Path,
    pub branch_weights: Option<&'a Path>,
    pub out: &'a Path,
}

fn with_heads(
    w: AttentionWeights<f32>,
    heads: Option<usize>,
) -> Result<AttentionWeights<f32>, Error> {
    match heads {
        Some(h) if h != w.heads() => AttentionWeights::new(w.wq, w.wk, w.wv, w.wo, h),
        _ => Ok(w),
    }
}

fn attend<T: Scalar>(
    z: &FeatureVolume<T>,
    ts: &TrajectorySet,
    w: &AttentionWeights<T>,
    branch: &AttentionWeights<T>,
    mode: Mode,
) -> Result<FeatureVolume<T>, Error> {
    match mode {
        Mode::Temporal => temporal_attention(z, w),
        Mode::Branch => trajectory_branch(z, ts, branch),
        Mode::Fused => fuse(
            &temporal_attention(z, w)?,
            &trajectory_branch(z, ts, branch)?,
        ),
        Mode::Spacetime => fuse(
            &full_spacetime_attention(z, w)?,
            &trajectory_branch(z, ts, branch)?,
        ),
    }
}

pub fn cmd_attend(
    paths: &AttendPaths,
    mode: Mode,
    cfg: &RunConfig,
    heads: Option<usize>,
) -> Result<Outcome, Error> {
    let z = io::read_features(paths.features)?;
    let pixel_ts = io::read_trajectories(paths.trajectories)?;
    let w = with_heads(io::read_weights(paths.weights)?, heads)?;
    let branch = match (paths.branch_weights, mode) {
        (Some(p), _) => with_heads(io::read_weights(p)?, heads)?,
        (None, Mode::Branch) => w.clone(),
        (None, _) => init_branch_from_temporal(&w),
    };

    // pixel grid whose latent image is the feature grid
    let s = cfg.latent_scale;
    let pixel_w = (z.width() as f64 / s).round() as usize;
    let pixel_h = (z.height() as f64 / s).round() as usize;
    let ts = rescale_to_latent(&pixel_ts, s, pixel_w, pixel_h)?;

    let out = match cfg.precision {
        Precision::F32 => attend(&z, &ts, &w, &branch, mode)?,
        Precision::F64 => {
            attend(&z.cast::<f64>(), &ts, &w.cast(), &branch.cast(), mode)?.cast::<f32>()
        }
    };
    io::write_features(paths.out, &out)?;
    let (f, h, wd, c) = out.shape();
    Ok(Outcome::ok(json!({
        "mode": format!("{mode:?}").to_lowercase(),
        "shape": [f, h, wd, c],
        "trajectories": ts.count(),
    })))
}

/// Pose files hold world-to-camera extrinsics; metrics expect camera-to-world.
fn camera_to_world(path: &Path) -> Result<PoseTrajectory, Error> {
    let p = io::read_poses(path)?;
    Ok(PoseTrajectory::new(
        p.frames.iter().map(|e| e.inverse()).collect(),
    ))
}

pub fn cmd_metrics(est: &Path, gt: &Path, delta: usize) -> Result<Outcome, Error> {
    let (est, gt) = (camera_to_world(est)?, camera_to_world(gt)?);
    let ate_m = ate(&est, &gt)?;
    let r = rpe(&est, &gt, delta)?;
    Ok(Outcome::ok(json!({
        "ate_m": ate_m,
        "rpe_trans_m": r.trans_m,
        "rpe_rot_deg": r.rot_deg,
    })))
}

pub fn cmd_selftest(seed: u64, weights: Option<&Path>) -> Result<Outcome, Error> {
    let w = weights.map(io::read_weights).transpose()?;
    let report = run_selftest(seed, w.as_ref())?;
    Ok(Outcome {
        passed: report.passed,
        report: serde_json::to_value(&report)?,
    })
}

/// Sizes the global thread pool from `TA_THREADS` when set.
pub fn init_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("TA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "TA_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))
}
