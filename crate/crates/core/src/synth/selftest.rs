//! The invariant suite behind the `selftest` command.
//!
//! Each group returns named [`CheckResult`]s carrying the measured value and
//! the threshold it was held to. Results depend only on the seed.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::gradcheck::{run_gradient_checks, GRAD_TOL};
use super::reference::{brute_force_reference, ReferenceInputs, ReferenceOutput};
use super::{constancy_on_path, make_scene, random_trajectories, CameraPath};
use crate::attn::{
    attention_stats, back_project, frame_attention, frame_attention_maps, fuse,
    init_branch_from_temporal, sample_along_trajectories, temporal_attention, trajectory_branch,
    AttentionMaps, AttentionWeights, FeatureVolume, Scalar, SquareMatrix, TokenTensor,
    TrajFeatures, ROW_SUM_TOL,
};
use crate::error::Result;
use crate::geom::{make_default_intrinsics, pixel_translation, DepthMap, Extrinsics, Intrinsics};
use crate::io;
use crate::metrics::{ate, drift_fixture, rigid_align, rpe, PoseTrajectory};
use crate::traj::{PointTracks, TrajectorySet};

pub const ORACLE_INSTANCES: usize = 100;
pub const IDENTITY_INSTANCES: usize = 20;
pub const TOL_F32: f64 = 1e-5;
pub const TOL_F64: f64 = 1e-10;
pub const GEOMETRY_TOL_PX: f64 = 1e-4;
pub const METRIC_TOL: f64 = 1e-9;
pub const STATS_TOL: f64 = 1e-12;
pub const DRIFT_TOL_DEG: f64 = 1e-6;
pub const NEGATIVE_CONTROL_RATIO: f64 = 10.0;
pub const CONSTANCY_SIZE: usize = 64;
pub const CONSTANCY_FRAMES: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
}

impl CheckResult {
    /// Passes when `value <= threshold`.
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: value <= threshold,
            value,
            threshold,
        }
    }

    /// Passes when `value >= threshold`.
    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: value >= threshold,
            value,
            threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub fn random_volume<T: Scalar>(
    rng: &mut ChaCha8Rng,
    f: usize,
    h: usize,
    w: usize,
    c: usize,
) -> FeatureVolume<T> {
    FeatureVolume::from_fn(f, h, w, c, |_, _, _, _| {
        T::from_f64(rng.gen_range(-1.0..1.0))
    })
}

pub fn random_matrix<T: Scalar>(rng: &mut ChaCha8Rng, c: usize) -> SquareMatrix<T> {
    SquareMatrix::new(
        c,
        (0..c * c)
            .map(|_| T::from_f64(rng.gen_range(-1.0..1.0)))
            .collect(),
    )
    .expect("square size")
}

pub fn random_weights<T: Scalar>(
    rng: &mut ChaCha8Rng,
    c: usize,
    heads: usize,
) -> AttentionWeights<T> {
    let (q, k, v, o) = (
        random_matrix(rng, c),
        random_matrix(rng, c),
        random_matrix(rng, c),
        random_matrix(rng, c),
    );
    AttentionWeights::new(q, k, v, o, heads).expect("heads divide channels")
}

fn random_tokens<T: Scalar>(rng: &mut ChaCha8Rng, f: usize, n: usize, c: usize) -> TokenTensor<T> {
    TokenTensor::new(
        f,
        n,
        c,
        (0..f * n * c)
            .map(|_| T::from_f64(rng.gen_range(-2.0..2.0)))
            .collect(),
    )
    .expect("sizes agree")
}

fn random_channels_and_heads(rng: &mut ChaCha8Rng) -> (usize, usize) {
    let c = [2usize, 4, 8][rng.gen_range(0..3)];
    let heads = [1usize, 2, 4]
        .into_iter()
        .filter(|h| c.is_multiple_of(*h))
        .collect::<Vec<_>>();
    (c, heads[rng.gen_range(0..heads.len())])
}

fn count_bit_mismatches(a: &[f32], b: &[f32]) -> usize {
    a.iter()
        .zip(b)
        .filter(|(x, y)| x.to_bits() != y.to_bits())
        .count()
        + a.len().abs_diff(b.len())
}

fn max_rel_diff(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Zero-initialized branch leaves temporal attention untouched, bit for bit.
pub fn check_zero_init_identity(
    seed: u64,
    supplied: Option<&AttentionWeights<f32>>,
) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
    let mut mismatches = 0usize;
    for _ in 0..IDENTITY_INSTANCES {
        let (c, heads) = random_channels_and_heads(&mut rng);
        let (f, h, w) = (
            rng.gen_range(1..5),
            rng.gen_range(1..6),
            rng.gen_range(1..6),
        );
        let z: FeatureVolume<f32> = random_volume(&mut rng, f, h, w, c);
        let weights = random_weights(&mut rng, c, heads);
        let l = rng.gen_range(1..2 * h * w + 1);
        let ts = random_trajectories(&mut rng, l, f, h, w);
        mismatches += zero_init_mismatches(&z, &ts, &weights)?;
    }
    let mut out = vec![CheckResult::at_most(
        "zero_init_identity",
        mismatches as f64,
        0.0,
    )];

    if let Some(w) = supplied {
        out.push(CheckResult::at_least(
            "supplied_weights_finite",
            w.is_finite() as u8 as f64,
            1.0,
        ));
        let c = w.channels();
        let z: FeatureVolume<f32> = random_volume(&mut rng, 3, 4, 4, c);
        let ts = random_trajectories(&mut rng, 12, 3, 4, 4);
        let m = if w.is_finite() {
            zero_init_mismatches(&z, &ts, w)?
        } else {
            z.len()
        };
        out.push(CheckResult::at_most(
            "zero_init_identity.supplied_weights",
            m as f64,
            0.0,
        ));
    }
    Ok(out)
}

pub fn zero_init_mismatches(
    z: &FeatureVolume<f32>,
    ts: &TrajectorySet,
    w: &AttentionWeights<f32>,
) -> Result<usize> {
    let temporal = temporal_attention(z, w)?;
    let branch = trajectory_branch(z, ts, &init_branch_from_temporal(w))?;
    let fused = fuse(&temporal, &branch)?;
    Ok(count_bit_mismatches(fused.data(), temporal.data()))
}

/// Back projection inverts sampling on dense identity trajectories.
pub fn check_adjoint_round_trip(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xad01);
    let mut value_mismatches = 0usize;
    let mut count_mismatches = 0usize;
    for _ in 0..IDENTITY_INSTANCES {
        let (f, h, w, c) = (
            rng.gen_range(1..=4),
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
        );
        let z: FeatureVolume<f32> = random_volume(&mut rng, f, h, w, c);
        let ts = TrajectorySet::identity_grid(f, h, w);
        let bp = back_project(&sample_along_trajectories(&z, &ts)?, &ts, h, w)?;
        value_mismatches += count_bit_mismatches(bp.values.data(), z.data());
        count_mismatches += bp.counts.iter().filter(|&&u| u != 1).count();
    }
    Ok(vec![
        CheckResult::at_most("adjoint_round_trip.values", value_mismatches as f64, 0.0),
        CheckResult::at_most("adjoint_round_trip.counts", count_mismatches as f64, 0.0),
    ])
}

fn random_pose(rng: &mut ChaCha8Rng, angle: f64, shift: f64) -> Extrinsics {
    Extrinsics::from_axis_angle(
        Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ),
        rng.gen_range(-angle..angle),
        Vector3::new(
            rng.gen_range(-shift..shift),
            rng.gen_range(-shift..shift),
            rng.gen_range(-shift..shift),
        ),
    )
    .expect("non-zero axis")
}

/// Optimized kernels against the scalar-loop references.
pub fn check_oracle_equivalence(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0a7c);
    let mut sample_mismatch = 0usize;
    let mut bp_counts = 0usize;
    let (mut bp32, mut bp64) = (0.0f64, 0.0f64);
    let (mut fa32, mut fa64) = (0.0f64, 0.0f64);
    let mut pt_err = 0.0f64;
    let mut pt_flags = 0usize;

    for _ in 0..ORACLE_INSTANCES {
        let (c, heads) = random_channels_and_heads(&mut rng);
        let (f, h, w) = (
            rng.gen_range(1..5),
            rng.gen_range(1..7),
            rng.gen_range(1..7),
        );
        let l = rng.gen_range(1..30);
        let ts = random_trajectories(&mut rng, l, f, h, w);

        // sampling, exact
        let z32: FeatureVolume<f32> = random_volume(&mut rng, f, h, w, c);
        let z64: FeatureVolume<f64> = z32.cast();
        let kernel = sample_along_trajectories(&z32, &ts)?;
        let ReferenceOutput::Sampled(reference) = brute_force_reference(
            "sample_along_trajectories",
            &ReferenceInputs::Sample {
                z: z64,
                ts: ts.clone(),
            },
        )?
        else {
            unreachable!("sample reference returns sampled features")
        };
        sample_mismatch += kernel
            .tokens
            .data
            .iter()
            .zip(&reference)
            .filter(|(a, b)| (**a as f64).to_bits() != b.to_bits())
            .count();

        // back projection, both precisions
        let zt32: TokenTensor<f32> = random_tokens(&mut rng, f, l, c);
        let zt64: TokenTensor<f64> =
            TokenTensor::new(f, l, c, zt32.data.iter().map(|&v| v as f64).collect())?;
        let ReferenceOutput::BackProjected { values, counts } = brute_force_reference(
            "back_project",
            &ReferenceInputs::BackProject {
                zt: zt64.clone(),
                ts: ts.clone(),
                height: h,
                width: w,
            },
        )?
        else {
            unreachable!("back projection reference returns values and counts")
        };
        let feats32 = TrajFeatures {
            tokens: zt32,
            mask: ts.mask().to_vec(),
        };
        let feats64 = TrajFeatures {
            tokens: zt64,
            mask: ts.mask().to_vec(),
        };
        let k32 = back_project(&feats32, &ts, h, w)?;
        let k64 = back_project(&feats64, &ts, h, w)?;
        bp_counts += k32
            .counts
            .iter()
            .zip(&counts)
            .filter(|(a, b)| a != b)
            .count();
        bp32 = bp32.max(max_rel_diff(
            k32.values.data().iter().map(|&v| v as f64),
            values.iter().copied(),
        ));
        bp64 = bp64.max(max_rel_diff(
            k64.values.data().iter().copied(),
            values.iter().copied(),
        ));

        // frame attention, both precisions
        let n = rng.gen_range(1..6);
        let q: TokenTensor<f32> = random_tokens(&mut rng, f, n, c);
        let k: TokenTensor<f32> = random_tokens(&mut rng, f, n, c);
        let v: TokenTensor<f32> = random_tokens(&mut rng, f, n, c);
        let mask: Option<Vec<bool>> = rng
            .gen_bool(0.5)
            .then(|| (0..f * n).map(|_| rng.gen_bool(0.7)).collect());
        let up = |t: &TokenTensor<f32>| {
            TokenTensor::new(f, n, c, t.data.iter().map(|&x| x as f64).collect()).unwrap()
        };
        let (q64, k64, v64) = (up(&q), up(&k), up(&v));
        let ReferenceOutput::Attended(reference) = brute_force_reference(
            "frame_attention",
            &ReferenceInputs::FrameAttention {
                q: q64.clone(),
                k: k64.clone(),
                v: v64.clone(),
                heads,
                key_mask: mask.clone(),
            },
        )?
        else {
            unreachable!("attention reference returns attended tokens")
        };
        let out32 = frame_attention(&q, &k, &v, heads, mask.as_deref())?;
        let out64 = frame_attention(&q64, &k64, &v64, heads, mask.as_deref())?;
        fa32 = fa32.max(max_rel_diff(
            out32.data.iter().map(|&x| x as f64),
            reference.iter().copied(),
        ));
        fa64 = fa64.max(max_rel_diff(
            out64.data.iter().copied(),
            reference.iter().copied(),
        ));

        // pixel translation
        let (ph, pw) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let depth = DepthMap::new(
            ph,
            pw,
            (0..ph * pw).map(|_| rng.gen_range(0.5f32..5.0)).collect(),
        )?;
        let kk = Intrinsics::new(
            rng.gen_range(5.0..300.0),
            rng.gen_range(5.0..300.0),
            rng.gen_range(0.0..pw as f64),
            rng.gen_range(0.0..ph as f64),
        )?;
        let (e1, e2) = (
            random_pose(&mut rng, 0.5, 1.0),
            random_pose(&mut rng, 0.5, 1.0),
        );
        let kernel = pixel_translation(&depth, &kk, &e1, &e2);
        let ReferenceOutput::Translation { vectors, valid } = brute_force_reference(
            "pixel_translation",
            &ReferenceInputs::PixelTranslation {
                depth,
                k: kk,
                e1,
                e2,
            },
        )?
        else {
            unreachable!("translation reference returns a field")
        };
        pt_flags += kernel
            .valid_flags()
            .iter()
            .zip(&valid)
            .filter(|(a, b)| a != b)
            .count();
        pt_err = pt_err.max(max_rel_diff(
            kernel.vectors().iter().flat_map(|v| *v),
            vectors.iter().flat_map(|v| *v),
        ));
    }

    Ok(vec![
        CheckResult::at_most(
            "oracle.sample_along_trajectories",
            sample_mismatch as f64,
            0.0,
        ),
        CheckResult::at_most("oracle.back_project.counts", bp_counts as f64, 0.0),
        CheckResult::at_most("oracle.back_project.f32", bp32, TOL_F32),
        CheckResult::at_most("oracle.back_project.f64", bp64, TOL_F64),
        CheckResult::at_most("oracle.frame_attention.f32", fa32, TOL_F32),
        CheckResult::at_most("oracle.frame_attention.f64", fa64, TOL_F64),
        CheckResult::at_most("oracle.pixel_translation.valid", pt_flags as f64, 0.0),
        CheckResult::at_most("oracle.pixel_translation.f64", pt_err, TOL_F64),
    ])
}

pub fn check_gradients(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(run_gradient_checks(seed ^ 0x9e4d)?
        .into_iter()
        .map(|g| CheckResult::at_most(format!("gradient.{}", g.op), g.rel_error, GRAD_TOL))
        .collect())
}

/// Closed-form pixel motion for lateral and forward camera translation.
pub fn check_geometry_analytics() -> Result<Vec<CheckResult>> {
    let (fx, d, tx) = (260.0, 2.0, 0.5);
    let expected = fx * tx / d;
    let depth = DepthMap::constant(36, 64, d as f32)?;
    let k = make_default_intrinsics(64.0, 36.0, fx)?;
    let lateral = pixel_translation(
        &depth,
        &k,
        &Extrinsics::identity(),
        &Extrinsics::from_translation(Vector3::new(-tx, 0.0, 0.0)),
    );
    let lateral_err = lateral
        .vectors()
        .iter()
        .map(|v| (v[0].abs() - expected).abs().max(v[1].abs()))
        .fold(0.0, f64::max);
    let sign_consistent = lateral.vectors().iter().all(|v| v[0] < 0.0);

    let tz = 0.5;
    let forward = pixel_translation(
        &depth,
        &k,
        &Extrinsics::identity(),
        &Extrinsics::from_translation(Vector3::new(0.0, 0.0, -tz)),
    );
    let mut zoom_err = 0.0f64;
    for y in 0..36 {
        for x in 0..64 {
            let (rx, ry) = (x as f64 - k.cx, y as f64 - k.cy);
            let v = forward.vector(0, x, y);
            let s = d / (d - tz);
            zoom_err = zoom_err
                .max((rx + v[0] - rx * s).abs())
                .max((ry + v[1] - ry * s).abs());
        }
    }
    Ok(vec![
        CheckResult::at_most("geometry.lateral_65px", lateral_err, GEOMETRY_TOL_PX),
        CheckResult::at_least(
            "geometry.lateral_sign_consistent",
            sign_consistent as u8 as f64,
            1.0,
        ),
        CheckResult::at_most("geometry.zoom_law", zoom_err, GEOMETRY_TOL_PX),
    ])
}

/// Softmax normalization, masked-key exclusion and the diagnostic profile.
pub fn check_attention_contracts(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa77e);
    let mut row_err = 0.0f64;
    let mut out_of_range = 0usize;
    let mut key_leaks = 0usize;
    let mut branch_leaks = 0usize;
    for _ in 0..IDENTITY_INSTANCES {
        let (c, heads) = random_channels_and_heads(&mut rng);
        let (f, n) = (rng.gen_range(1..7), rng.gen_range(1..6));
        let q: TokenTensor<f32> = random_tokens(&mut rng, f, n, c);
        let k: TokenTensor<f32> = random_tokens(&mut rng, f, n, c);
        let v: TokenTensor<f32> = random_tokens(&mut rng, f, n, c);
        let maps = frame_attention_maps(&q, &k, heads, None)?;
        for col in 0..maps.columns {
            let m = maps.map(col);
            for i in 0..f {
                let s: f64 = m[i * f..(i + 1) * f].iter().sum();
                row_err = row_err.max((s - 1.0).abs());
            }
            out_of_range += m.iter().filter(|p| !(0.0..=1.0).contains(*p)).count();
        }

        // perturbing masked keys and values changes nothing
        let mask: Vec<bool> = (0..f * n).map(|_| rng.gen_bool(0.6)).collect();
        let base = frame_attention(&q, &k, &v, heads, Some(&mask))?;
        let (mut k2, mut v2) = (k.clone(), v.clone());
        for (idx, &m) in mask.iter().enumerate() {
            if !m {
                for ch in 0..c {
                    k2.data[idx * c + ch] += rng.gen_range(-5.0..5.0);
                    v2.data[idx * c + ch] += rng.gen_range(-5.0..5.0);
                }
            }
        }
        let moved = frame_attention(&q, &k2, &v2, heads, Some(&mask))?;
        key_leaks += count_bit_mismatches(&base.data, &moved.data);

        // trajectory level: a masked entry parked on a cell no valid entry
        // visits in that frame; perturbing Z there must not change the output
        let (h, w) = (3, 4);
        let z: FeatureVolume<f32> = random_volume(&mut rng, f, h, w, c);
        let weights: AttentionWeights<f32> = random_weights(&mut rng, c, heads);
        let l = 6;
        let mut coords = Vec::new();
        let mut tmask = vec![false; l * f];
        for li in 0..l {
            for fi in 0..f {
                // valid entries stay on rows 0..2; masked ones sit on row 2
                let valid = li == 0 || rng.gen_bool(0.6);
                tmask[fi * l + li] = valid;
                let y = if valid { rng.gen_range(0..2) } else { 2 };
                coords.push([rng.gen_range(0..w) as f32, y as f32]);
            }
        }
        let ts = TrajectorySet::new(l, f, coords, tmask)?;
        let before = trajectory_branch(&z, &ts, &weights)?;
        let mut z2 = z.clone();
        for fi in 0..f {
            for x in 0..w {
                let o = z2.offset(fi, 2, x);
                for ch in 0..c {
                    z2.data_mut()[o + ch] += 3.0;
                }
            }
        }
        let after = trajectory_branch(&z2, &ts, &weights)?;
        branch_leaks += count_bit_mismatches(before.data(), after.data());
    }

    // diagnostic profiles on analytic maps
    let f = 6;
    let uniform = attention_stats(&AttentionMaps::new(f, 2, vec![1.0 / f as f64; f * f * 2])?)?;
    let uniform_err = uniform
        .offset_profile
        .iter()
        .map(|p| (p - 1.0 / f as f64).abs())
        .fold(0.0, f64::max);
    let mut diag = vec![0.0; f * f];
    for i in 0..f {
        diag[i * f + i] = 1.0;
    }
    let diagonal = attention_stats(&AttentionMaps::new(f, 1, diag)?)?;
    let diag_err = diagonal
        .offset_profile
        .iter()
        .enumerate()
        .map(|(d, p)| (p - if d == 0 { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max);

    Ok(vec![
        CheckResult::at_most("attention.softmax_row_sum", row_err, ROW_SUM_TOL),
        CheckResult::at_most(
            "attention.weights_in_unit_interval",
            out_of_range as f64,
            0.0,
        ),
        CheckResult::at_most("attention.masked_key_exclusion", key_leaks as f64, 0.0),
        CheckResult::at_most(
            "attention.masked_trajectory_exclusion",
            branch_leaks as f64,
            0.0,
        ),
        CheckResult::at_most("attention.stats_uniform_profile", uniform_err, STATS_TOL),
        CheckResult::at_most("attention.stats_diagonal_profile", diag_err, 0.0),
    ])
}

/// Rendered synthetic sequences stay constant along extracted trajectories;
/// shuffled trajectories do not.
pub fn check_trajectory_constancy(seed: u64) -> Result<Vec<CheckResult>> {
    let scene = make_scene(seed, CONSTANCY_SIZE, CONSTANCY_SIZE, 3)?;
    let mut out = Vec::new();
    for path in CameraPath::ALL {
        let r = constancy_on_path(&scene, path, CONSTANCY_FRAMES, seed)?;
        out.push(CheckResult::at_most(
            format!("constancy.{}", path.name()),
            r.deviation,
            r.bound,
        ));
        out.push(CheckResult::at_least(
            format!("constancy.{}.negative_control", path.name()),
            r.shuffled_deviation,
            NEGATIVE_CONTROL_RATIO * r.bound,
        ));
    }
    Ok(out)
}

pub fn check_metric_fixtures(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3e7c);
    let gt = PoseTrajectory::new((0..10).map(|_| random_pose(&mut rng, 3.0, 3.0)).collect());
    let self_ate = ate(&gt, &gt)?;
    let g = random_pose(&mut rng, 3.0, 5.0);
    let moved = gt.transformed(&g);
    let global_ate = ate(&moved, &gt)?;
    let align = rigid_align(&moved, &gt, false)?;
    let residual = moved
        .centers()
        .iter()
        .zip(gt.centers())
        .map(|(e, t)| (align.apply(e) - t).norm())
        .fold(0.0, f64::max);
    let self_rpe = rpe(&gt, &gt, 1)?;
    let (est, truth) = drift_fixture(10, 1.0);
    let drift = rpe(&est, &truth, 1)?;
    Ok(vec![
        CheckResult::at_most("metrics.ate_self", self_ate, 0.0),
        CheckResult::at_most("metrics.ate_global_transform", global_ate, METRIC_TOL),
        CheckResult::at_most("metrics.rigid_align_residual", residual, METRIC_TOL),
        CheckResult::at_most(
            "metrics.rpe_self",
            self_rpe.trans_m.max(self_rpe.rot_deg),
            0.0,
        ),
        CheckResult::at_most(
            "metrics.rpe_drift_1deg",
            (drift.rot_deg - 1.0).abs(),
            DRIFT_TOL_DEG,
        ),
    ])
}

/// Encode → decode → encode must reproduce the bytes for every format.
pub fn check_formats(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf0f0);
    let mut failures = 0usize;
    for _ in 0..10 {
        let (f, h, w) = (
            rng.gen_range(1..4),
            rng.gen_range(1..6),
            rng.gen_range(1..6),
        );
        let (c, heads) = random_channels_and_heads(&mut rng);

        let z: FeatureVolume<f32> = random_volume(&mut rng, f, h, w, c);
        let bytes = io::encode_features(&z)?;
        failures += (io::encode_features(&io::decode_features(&bytes)?)? != bytes) as usize;

        let wts: AttentionWeights<f32> = random_weights(&mut rng, c, heads);
        let bytes = io::encode_weights(&wts)?;
        failures += (io::encode_weights(&io::decode_weights(&bytes)?)? != bytes) as usize;

        let count = rng.gen_range(1..20);
        let ts = random_trajectories(&mut rng, count, f, h, w);
        let bytes = io::encode_trajectories(&ts)?;
        failures += (io::encode_trajectories(&io::decode_trajectories(&bytes)?)? != bytes) as usize;

        let depth = DepthMap::new(
            h,
            w,
            (0..h * w).map(|_| rng.gen_range(0.1f32..10.0)).collect(),
        )?;
        let bytes = io::encode_depth(&depth)?;
        failures += (io::encode_depth(&io::decode_depth(&bytes)?)? != bytes) as usize;

        let l = rng.gen_range(1..10);
        let tracks = PointTracks::new(
            f,
            l,
            (0..f * l)
                .map(|_| [rng.gen_range(-5.0f32..50.0), rng.gen_range(-5.0f32..50.0)])
                .collect(),
            (0..f * l).map(|_| rng.gen_bool(0.8)).collect(),
        )?;
        let bytes = io::encode_tracks(&tracks)?;
        failures += (io::encode_tracks(&io::decode_tracks(&bytes)?)? != bytes) as usize;

        let poses = io::PoseFile {
            intrinsics: Some(make_default_intrinsics(w as f64, h as f64, 260.0)?),
            frames: (0..f).map(|_| random_pose(&mut rng, 3.0, 2.0)).collect(),
        };
        let text = io::poses_to_json(&poses)?;
        failures += (io::parse_poses(&text)? != poses) as usize;
    }
    Ok(vec![CheckResult::at_most(
        "formats.round_trip",
        failures as f64,
        0.0,
    )])
}

/// Runs every group. `weights`, when given, are checked for finiteness and
/// run through the zero-init identity.
pub fn run_selftest(seed: u64, weights: Option<&AttentionWeights<f32>>) -> Result<SelftestReport> {
    let mut checks = Vec::new();
    checks.extend(check_zero_init_identity(seed, weights)?);
    checks.extend(check_adjoint_round_trip(seed)?);
    checks.extend(check_oracle_equivalence(seed)?);
    checks.extend(check_gradients(seed)?);
    checks.extend(check_geometry_analytics()?);
    checks.extend(check_attention_contracts(seed)?);
    checks.extend(check_trajectory_constancy(seed)?);
    checks.extend(check_metric_fixtures(seed)?);
    checks.extend(check_formats(seed)?);
    Ok(SelftestReport {
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}
