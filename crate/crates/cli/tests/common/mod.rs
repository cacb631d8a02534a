#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::Vector3;
use trajattn::attn::{AttentionWeights, FeatureVolume, SquareMatrix};
use trajattn::geom::{DepthMap, Extrinsics, Intrinsics};
use trajattn::io::{self, PoseFile};
use trajattn::metrics::PoseTrajectory;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trajattn"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn stdout_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.trim().lines().count(), 1, "report is one line: {text}");
    serde_json::from_str(text.trim()).expect("report is JSON")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn lateral(tx: f64) -> Extrinsics {
    Extrinsics::from_translation(Vector3::new(tx, 0.0, 0.0))
}

pub fn write_pose_file(path: &Path, k: Option<Intrinsics>, frames: Vec<Extrinsics>) {
    io::write_poses(
        path,
        &PoseFile {
            intrinsics: k,
            frames,
        },
    )
    .unwrap();
}

/// Stores camera-to-world trajectories in the world-to-camera file layout.
pub fn write_trajectory_poses(path: &Path, t: &PoseTrajectory) {
    write_pose_file(path, None, t.poses().iter().map(|p| p.inverse()).collect());
}

pub fn write_constant_depth(path: &Path, h: usize, w: usize, d: f32) {
    io::write_depth(path, &DepthMap::constant(h, w, d).unwrap()).unwrap();
}

pub fn matrix(c: usize, v: &[f32]) -> SquareMatrix<f32> {
    SquareMatrix::new(c, v.to_vec()).unwrap()
}

pub fn read_volume(path: &Path) -> FeatureVolume<f32> {
    io::read_features(path).unwrap()
}

pub fn write_weights(path: &Path, w: &AttentionWeights<f32>) {
    io::write_weights(path, w).unwrap();
}

pub fn tmp(dir: &tempfile::TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}
