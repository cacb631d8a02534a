mod common;

use std::fs;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajattn::attn::{AttentionWeights, FeatureVolume, SquareMatrix};
use trajattn::geom::{make_default_intrinsics, Extrinsics, Intrinsics};
use trajattn::io;
use trajattn::metrics::drift_fixture;
use trajattn::traj::PointTracks;

#[test]
fn extract_image_static_poses_are_fully_valid() {
    let dir = tempfile::tempdir().unwrap();
    let (depth, poses, out) = (
        tmp(&dir, "d.tadm"),
        tmp(&dir, "p.json"),
        tmp(&dir, "t.tatr"),
    );
    write_constant_depth(&depth, 6, 8, 2.0);
    let k = make_default_intrinsics(8.0, 6.0, 260.0).unwrap();
    write_pose_file(&poses, Some(k), vec![Extrinsics::identity(); 3]);
    let o = run(&[
        "extract-image",
        "--depth",
        s(&depth),
        "--poses",
        s(&poses),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = stdout_json(&o);
    assert_eq!(r["L"], 48);
    assert_eq!(r["F"], 3);
    assert_eq!(r["valid_fraction"], 1.0);
    assert_eq!(io::read_trajectories(&out).unwrap().count(), 48);
}

#[test]
fn extract_image_pan_matches_recount() {
    let dir = tempfile::tempdir().unwrap();
    let (depth, poses, out) = (
        tmp(&dir, "d.tadm"),
        tmp(&dir, "p.json"),
        tmp(&dir, "t.tatr"),
    );
    let (w, h, frames) = (8usize, 4usize, 3usize);
    write_constant_depth(&depth, h, w, 2.0);
    // 10 · 0.4 / 2 = 2 px per frame
    let k = Intrinsics::new(10.0, 10.0, 3.5, 1.5).unwrap();
    write_pose_file(
        &poses,
        Some(k),
        (0..frames).map(|f| lateral(0.4 * f as f64)).collect(),
    );
    let o = run(&[
        "extract-image",
        "--depth",
        s(&depth),
        "--poses",
        s(&poses),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = stdout_json(&o);

    let mut valid = 0;
    for f in 0..frames {
        for x in 0..w {
            let shifted = x as f64 + 2.0 * f as f64;
            if shifted >= 0.0 && shifted < w as f64 {
                valid += h;
            }
        }
    }
    let expect = valid as f64 / (w * h * frames) as f64;
    let got = r["valid_fraction"].as_f64().unwrap();
    assert!(got < 1.0);
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
}

#[test]
fn truncated_depth_names_payload_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let (depth, poses, out) = (
        tmp(&dir, "d.tadm"),
        tmp(&dir, "p.json"),
        tmp(&dir, "t.tatr"),
    );
    write_constant_depth(&depth, 3, 4, 2.0);
    let bytes = fs::read(&depth).unwrap();
    fs::write(&depth, &bytes[..bytes.len() - 5]).unwrap();
    write_pose_file(
        &poses,
        Some(make_default_intrinsics(4.0, 3.0, 260.0).unwrap()),
        vec![Extrinsics::identity()],
    );
    let o = run(&[
        "extract-image",
        "--depth",
        s(&depth),
        "--poses",
        s(&poses),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(
        err.contains("expected 48 bytes") && err.contains("found 43"),
        "{err}"
    );
    assert!(o.stdout.is_empty());
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = tmp(&dir, "nope.tadm");
    let o = run(&[
        "extract-image",
        "--depth",
        s(&missing),
        "--poses",
        s(&missing),
        "--out",
        s(&missing),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

fn write_video_inputs(
    dir: &tempfile::TempDir,
    frames: usize,
    pose_frames: usize,
) -> [std::path::PathBuf; 4] {
    let (tracks, depth_dir, poses, out) = (
        tmp(dir, "tracks.tatk"),
        tmp(dir, "depth"),
        tmp(dir, "p.json"),
        tmp(dir, "t.tatr"),
    );
    let (w, h, count) = (10usize, 6usize, 5usize);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let positions = (0..frames * count)
        .map(|_| [rng.gen_range(0.0f32..9.0), rng.gen_range(0.0f32..5.0)])
        .collect();
    let visible = (0..frames * count).map(|_| rng.gen_bool(0.8)).collect();
    io::write_tracks(
        &tracks,
        &PointTracks::new(frames, count, positions, visible).unwrap(),
    )
    .unwrap();
    fs::create_dir(&depth_dir).unwrap();
    for f in 0..frames {
        write_constant_depth(
            &depth_dir.join(format!("{f:04}.tadm")),
            h,
            w,
            2.0 + f as f32,
        );
    }
    let k = make_default_intrinsics(w as f64, h as f64, 260.0).unwrap();
    write_pose_file(&poses, Some(k), vec![Extrinsics::identity(); pose_frames]);
    [tracks, depth_dir, poses, out]
}

#[test]
fn extract_video_identity_poses_keep_track_coordinates() {
    let dir = tempfile::tempdir().unwrap();
    let [tracks, depth_dir, poses, out] = write_video_inputs(&dir, 4, 4);
    let o = run(&[
        "extract-video",
        "--tracks",
        s(&tracks),
        "--depth-dir",
        s(&depth_dir),
        "--poses",
        s(&poses),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = io::read_tracks(&tracks).unwrap();
    let ts = io::read_trajectories(&out).unwrap();
    assert_eq!((ts.count(), ts.frames()), (5, 4));
    for f in 0..4 {
        for l in 0..5 {
            if ts.is_valid(f, l) {
                assert_eq!(ts.coord(l, f), t.position(f, l));
            }
            assert_eq!(ts.is_valid(f, l), t.is_visible(f, l));
        }
    }
    // written bytes re-encode identically
    let bytes = fs::read(&out).unwrap();
    assert_eq!(
        io::encode_trajectories(&io::decode_trajectories(&bytes).unwrap()).unwrap(),
        bytes
    );
}

#[test]
fn extract_video_frame_mismatch_names_both_counts() {
    let dir = tempfile::tempdir().unwrap();
    let [tracks, depth_dir, poses, out] = write_video_inputs(&dir, 4, 3);
    let o = run(&[
        "extract-video",
        "--tracks",
        s(&tracks),
        "--depth-dir",
        s(&depth_dir),
        "--poses",
        s(&poses),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains('3') && err.contains('4'), "{err}");
}

fn attend(
    dir: &tempfile::TempDir,
    mode: &str,
    branch: Option<&std::path::Path>,
    extra: &[&str],
) -> std::process::Output {
    let (f, t, w, out) = (
        tmp(dir, "z.tafv"),
        tmp(dir, "t.tatr"),
        tmp(dir, "w.taaw"),
        tmp(dir, &format!("{mode}.tafv")),
    );
    let mut args = vec![
        "attend",
        "--features",
        s(&f),
        "--trajectories",
        s(&t),
        "--weights",
        s(&w),
        "--mode",
        mode,
        "--out",
        s(&out),
    ];
    if let Some(b) = branch {
        args.extend(["--branch-weights", s(b)]);
    }
    args.extend(extra);
    run(&args)
}

fn random_attend_inputs(dir: &tempfile::TempDir, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f, h, w, c) = (3, 4, 5, 4);
    let z = FeatureVolume::from_fn(f, h, w, c, |_, _, _, _| rng.gen_range(-1.0f32..1.0));
    io::write_features(&tmp(dir, "z.tafv"), &z).unwrap();
    let mut m = || {
        matrix(
            c,
            &(0..c * c)
                .map(|_| rng.gen_range(-0.8f32..0.8))
                .collect::<Vec<_>>(),
        )
    };
    let weights = AttentionWeights::new(m(), m(), m(), m(), 2).unwrap();
    write_weights(&tmp(dir, "w.taaw"), &weights);
    let ts = trajattn::synth::random_trajectories(&mut rng, 15, f, h, w);
    io::write_trajectories(&tmp(dir, "t.tatr"), &ts).unwrap();
}

#[test]
fn attend_fused_zero_init_matches_temporal_bytes() {
    let dir = tempfile::tempdir().unwrap();
    random_attend_inputs(&dir, 1);
    for mode in ["temporal", "fused"] {
        let o = attend(&dir, mode, None, &[]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(
        fs::read(tmp(&dir, "temporal.tafv")).unwrap(),
        fs::read(tmp(&dir, "fused.tafv")).unwrap()
    );
}

#[test]
fn attend_branch_with_zero_output_projector_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    random_attend_inputs(&dir, 2);
    let mut w = io::read_weights(&tmp(&dir, "w.taaw")).unwrap();
    w.wo = SquareMatrix::zeros(4);
    let bw = tmp(&dir, "branch.taaw");
    write_weights(&bw, &w);
    let o = attend(&dir, "branch", Some(&bw), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(read_volume(&tmp(&dir, "branch.tafv"))
        .data()
        .iter()
        .all(|v| *v == 0.0));
}

#[test]
fn attend_temporal_toy_fixture() {
    let dir = tempfile::tempdir().unwrap();
    // channel 0 carries q = k = [1, 0]; wv routes channel 1 = [2, 4] into v
    let z = FeatureVolume::new(2, 1, 1, 2, vec![1.0f32, 2.0, 0.0, 4.0]).unwrap();
    io::write_features(&tmp(&dir, "z.tafv"), &z).unwrap();
    let pick0 = matrix(2, &[1.0, 0.0, 0.0, 0.0]);
    let w = AttentionWeights::new(
        pick0.clone(),
        pick0.clone(),
        matrix(2, &[0.0, 1.0, 0.0, 0.0]),
        pick0,
        2,
    )
    .unwrap();
    write_weights(&tmp(&dir, "w.taaw"), &w);
    let ts = trajattn::traj::TrajectorySet::identity_grid(2, 1, 1);
    io::write_trajectories(&tmp(&dir, "t.tatr"), &ts).unwrap();
    let o = attend(&dir, "temporal", None, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = read_volume(&tmp(&dir, "temporal.tafv"));
    assert!((out.at(0, 0, 0, 0) - 2.5379).abs() < 1e-3);
    assert!((out.at(1, 0, 0, 0) - 3.0).abs() < 1e-6);
    assert_eq!(out.at(0, 0, 0, 1), 0.0);
}

#[test]
fn attend_precision_and_spacetime_modes() {
    let dir = tempfile::tempdir().unwrap();
    random_attend_inputs(&dir, 3);
    let o = attend(&dir, "spacetime", None, &["--precision", "f64"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout_json(&o)["shape"], serde_json::json!([3, 4, 5, 4]));
    let o = attend(&dir, "temporal", None, &["--heads", "3"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn attend_rescales_pixel_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    random_attend_inputs(&dir, 5);
    // pixel grid twice the feature grid
    let ts = trajattn::traj::TrajectorySet::identity_grid(3, 8, 10);
    io::write_trajectories(&tmp(&dir, "t.tatr"), &ts).unwrap();
    let o = attend(&dir, "branch", None, &["--latent-scale", "0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout_json(&o)["trajectories"], 20);
}

fn metrics(dir: &tempfile::TempDir, extra: &[&str]) -> std::process::Output {
    let (est, gt) = (tmp(dir, "est.json"), tmp(dir, "gt.json"));
    let mut args = vec!["metrics", "--est", s(&est), "--gt", s(&gt)];
    args.extend(extra);
    run(&args)
}

#[test]
fn metrics_identical_trajectories_are_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (_, gt) = drift_fixture(8, 1.0);
    write_trajectory_poses(&tmp(&dir, "est.json"), &gt);
    write_trajectory_poses(&tmp(&dir, "gt.json"), &gt);
    let o = metrics(&dir, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        stdout_json(&o),
        serde_json::json!({"ate_m": 0.0, "rpe_trans_m": 0.0, "rpe_rot_deg": 0.0})
    );
}

#[test]
fn metrics_drift_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (est, gt) = drift_fixture(10, 1.0);
    write_trajectory_poses(&tmp(&dir, "est.json"), &est);
    write_trajectory_poses(&tmp(&dir, "gt.json"), &gt);
    let r = stdout_json(&metrics(&dir, &[]));
    assert!((r["rpe_rot_deg"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    let r = stdout_json(&metrics(&dir, &["--delta", "2"]));
    assert!((r["rpe_rot_deg"].as_f64().unwrap() - 2.0).abs() < 1e-6);
}

#[test]
fn metrics_global_transform_has_zero_ate() {
    let dir = tempfile::tempdir().unwrap();
    let (_, gt) = drift_fixture(10, 1.0);
    let g = Extrinsics::from_axis_angle(
        nalgebra::Vector3::new(0.3, -0.4, 0.866),
        0.7,
        nalgebra::Vector3::new(1.0, -2.0, 0.5),
    )
    .unwrap();
    write_trajectory_poses(&tmp(&dir, "est.json"), &gt.transformed(&g));
    write_trajectory_poses(&tmp(&dir, "gt.json"), &gt);
    let r = stdout_json(&metrics(&dir, &[]));
    assert!(r["ate_m"].as_f64().unwrap() <= 1e-9, "{r}");
}

#[test]
fn metrics_length_mismatch_is_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let (est, gt) = drift_fixture(6, 1.0);
    write_trajectory_poses(&tmp(&dir, "est.json"), &est);
    write_trajectory_poses(
        &tmp(&dir, "gt.json"),
        &trajattn::metrics::PoseTrajectory::new(gt.poses()[..4].to_vec()),
    );
    assert_eq!(metrics(&dir, &[]).status.code(), Some(2));
}

#[test]
fn malformed_pose_json_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(tmp(&dir, "est.json"), "{\"frames\": [").unwrap();
    fs::write(tmp(&dir, "gt.json"), "{\"frames\": []}").unwrap();
    assert_eq!(metrics(&dir, &[]).status.code(), Some(3));
}

#[test]
fn config_file_sets_defaults_below_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (est, gt) = drift_fixture(10, 1.0);
    write_trajectory_poses(&tmp(&dir, "est.json"), &est);
    write_trajectory_poses(&tmp(&dir, "gt.json"), &gt);
    let cfg = tmp(&dir, "cfg.json");
    fs::write(&cfg, r#"{"rpe_delta": 3}"#).unwrap();
    let r = stdout_json(&metrics(&dir, &["--config", s(&cfg)]));
    assert!((r["rpe_rot_deg"].as_f64().unwrap() - 3.0).abs() < 1e-6);
    let r = stdout_json(&metrics(&dir, &["--config", s(&cfg), "--rpe-delta", "1"]));
    assert!((r["rpe_rot_deg"].as_f64().unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn selftest_passes_and_is_deterministic() {
    let a = run(&["selftest", "--seed", "3"]);
    let b = run(&["selftest", "--seed", "3"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(stdout_json(&a)["passed"], true);
}

#[test]
fn selftest_flags_corrupted_weights() {
    let dir = tempfile::tempdir().unwrap();
    let path = tmp(&dir, "bad.taaw");
    let mut w = AttentionWeights::<f32>::identity(4, 2).unwrap();
    w.wk.data_mut()[5] = f32::NAN;
    write_weights(&path, &w);
    let o = run(&["selftest", "--weights", s(&path)]);
    assert_eq!(o.status.code(), Some(1));
    let r = stdout_json(&o);
    let failed: Vec<&str> = r["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert!(failed.contains(&"supplied_weights_finite"), "{failed:?}");
}

#[test]
fn thread_count_from_environment() {
    let o = bin()
        .env("TA_THREADS", "2")
        .args(["selftest", "--seed", "1"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let o = bin()
        .env("TA_THREADS", "zero")
        .args(["selftest"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
