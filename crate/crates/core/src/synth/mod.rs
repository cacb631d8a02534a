//! Synthetic scenes with exact depth and known camera motion, used as
//! ground truth for trajectory extraction and the kernels built on it.

pub mod gradcheck;
pub mod reference;
pub mod selftest;

use nalgebra::Vector3;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attn::{latent_cell, FeatureVolume};
use crate::error::{ensure_arg, Error, Result};
use crate::geom::{
    make_default_intrinsics, pixel_translation, relative_transform, DepthMap, Extrinsics,
    Intrinsics,
};
use crate::traj::TrajectorySet;

pub const BASE_DEPTH: f64 = 2.0;
pub const DEPTH_AMPLITUDE: f64 = 0.25;
pub const DEFAULT_FOCAL: f64 = 260.0;

/// Texture image, depth and intrinsics of a synthetic scene, all expressed
/// in the reference (frame-0) camera.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `H × W × C` values in `[0, 1]`.
    pub texture: Vec<f32>,
    pub depth: DepthMap,
    pub intrinsics: Intrinsics,
}

impl SyntheticScene {
    #[inline]
    pub fn texel(&self, x: usize, y: usize) -> &[f32] {
        let o = (y * self.width + x) * self.channels;
        &self.texture[o..o + self.channels]
    }

    /// Largest channel difference between any pixel and its 8-neighbours.
    ///
    /// Rendering and trajectory lookup both round to the nearest cell, so a
    /// trajectory can read a neighbouring surface point but never one further
    /// away while the view-to-view mapping stays close to an isometry.
    pub fn quantization_bound(&self) -> f64 {
        let mut bound = 0.0f64;
        for y in 0..self.height {
            for x in 0..self.width {
                let a = self.texel(x, y);
                for (dx, dy) in [(1i64, 0i64), (0, 1), (1, 1), (1, -1)] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= self.width as i64 || ny >= self.height as i64 {
                        continue;
                    }
                    let b = self.texel(nx as usize, ny as usize);
                    for (u, v) in a.iter().zip(b) {
                        bound = bound.max((u - v).abs() as f64);
                    }
                }
            }
        }
        bound
    }
}

/// Smooth depth `d₀ + a·sin(2πx/W)·sin(2πy/H)` sampled on the pixel grid.
pub fn sine_depth(width: usize, height: usize, base: f64, amplitude: f64) -> Result<DepthMap> {
    let mut values = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let sx = (2.0 * std::f64::consts::PI * x as f64 / width as f64).sin();
            let sy = (2.0 * std::f64::consts::PI * y as f64 / height as f64).sin();
            values.push((base + amplitude * sx * sy) as f32);
        }
    }
    DepthMap::new(height, width, values)
}

/// Seeded value noise: random lattice values every `cell` pixels, blended
/// with smoothstep weights, then min-max normalized per channel.
fn value_noise(
    rng: &mut ChaCha8Rng,
    width: usize,
    height: usize,
    channels: usize,
    cell: usize,
) -> Vec<f32> {
    let gw = width / cell + 2;
    let gh = height / cell + 2;
    let lattice: Vec<f64> = (0..gw * gh * channels).map(|_| rng.gen::<f64>()).collect();
    let lat = |gx: usize, gy: usize, c: usize| lattice[(gy * gw + gx) * channels + c];
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);

    let mut tex = vec![0.0f64; width * height * channels];
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64 / cell as f64, y as f64 / cell as f64);
            let (gx, gy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (smooth(fx - gx as f64), smooth(fy - gy as f64));
            for c in 0..channels {
                let top = lat(gx, gy, c) * (1.0 - tx) + lat(gx + 1, gy, c) * tx;
                let bottom = lat(gx, gy + 1, c) * (1.0 - tx) + lat(gx + 1, gy + 1, c) * tx;
                tex[(y * width + x) * channels + c] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    for c in 0..channels {
        let vals = tex.iter().skip(c).step_by(channels);
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let span = if hi > lo { hi - lo } else { 1.0 };
        for v in tex.iter_mut().skip(c).step_by(channels) {
            *v = (*v - lo) / span;
        }
    }
    tex.into_iter().map(|v| v as f32).collect()
}

/// Deterministic scene from `seed` with default depth relief and intrinsics.
pub fn make_scene(
    seed: u64,
    width: usize,
    height: usize,
    channels: usize,
) -> Result<SyntheticScene> {
    make_scene_with(seed, width, height, channels, DEPTH_AMPLITUDE)
}

pub fn make_scene_with(
    seed: u64,
    width: usize,
    height: usize,
    channels: usize,
    amplitude: f64,
) -> Result<SyntheticScene> {
    ensure_arg!(
        width > 0 && height > 0 && channels > 0,
        "scene dimensions must be positive, got {width}x{height}x{channels}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = (width.max(height) / 2).max(1);
    Ok(SyntheticScene {
        height,
        width,
        channels,
        texture: value_noise(&mut rng, width, height, channels, cell),
        depth: sine_depth(width, height, BASE_DEPTH, amplitude)?,
        intrinsics: make_default_intrinsics(width as f64, height as f64, DEFAULT_FOCAL)?,
    })
}

/// Camera motion families used to exercise trajectory extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraPath {
    Pan,
    ZoomIn,
    ZoomOut,
    Orbit,
    Roll,
}

impl CameraPath {
    pub const ALL: [CameraPath; 5] = [
        CameraPath::Pan,
        CameraPath::ZoomIn,
        CameraPath::ZoomOut,
        CameraPath::Orbit,
        CameraPath::Roll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CameraPath::Pan => "pan",
            CameraPath::ZoomIn => "zoom_in",
            CameraPath::ZoomOut => "zoom_out",
            CameraPath::Orbit => "orbit",
            CameraPath::Roll => "roll",
        }
    }

    /// World-to-camera poses, with the world frame equal to the first camera.
    pub fn poses(self, frames: usize) -> Vec<Extrinsics> {
        (0..frames)
            .map(|f| {
                let s = if frames > 1 {
                    f as f64 / (frames - 1) as f64
                } else {
                    0.0
                };
                self.pose_at(s)
            })
            .collect()
    }

    fn pose_at(self, s: f64) -> Extrinsics {
        let y = Vector3::y();
        let z = Vector3::z();
        match self {
            CameraPath::Pan => Extrinsics::from_translation(Vector3::new(-0.1 * s, 0.0, 0.0)),
            CameraPath::ZoomIn => Extrinsics::from_translation(Vector3::new(0.0, 0.0, -0.3 * s)),
            CameraPath::ZoomOut => Extrinsics::from_translation(Vector3::new(0.0, 0.0, 0.3 * s)),
            CameraPath::Orbit => {
                // camera circles the point at scene depth on the optical axis
                let angle = (2.0f64 * s).to_radians();
                let pivot = Vector3::new(0.0, 0.0, BASE_DEPTH);
                let cam_to_world =
                    Extrinsics::from_axis_angle(y, angle, Vector3::zeros()).expect("unit axis");
                let center = pivot + cam_to_world.apply(&Vector3::new(0.0, 0.0, -BASE_DEPTH));
                let r = cam_to_world.rotation().transpose();
                Extrinsics::from_parts_unchecked(r, -(r * center))
            }
            CameraPath::Roll => {
                Extrinsics::from_axis_angle(z, (-20.0f64 * s).to_radians(), Vector3::zeros())
                    .expect("unit axis")
            }
        }
    }
}

/// Forward-splats the scene texture into every view of `poses` with a
/// z-buffer. `poses[0]` is the camera the scene is defined in.
///
/// The output has `C + 1` channels; the last is a coverage flag, 1 where a
/// scene point landed and 0 for holes (whose texture channels are 0).
pub fn render_sequence(scene: &SyntheticScene, poses: &[Extrinsics]) -> Result<FeatureVolume<f32>> {
    ensure_arg!(!poses.is_empty(), "pose list is empty");
    let (h, w, c) = (scene.height, scene.width, scene.channels);
    let k = &scene.intrinsics;
    let out_c = c + 1;
    let mut data = vec![0.0f32; poses.len() * h * w * out_c];
    for (f, pose) in poses.iter().enumerate() {
        let field = pixel_translation(&scene.depth, k, &poses[0], pose);
        let rel = relative_transform(&poses[0], pose);
        let mut zbuf = vec![f64::INFINITY; h * w];
        let frame = &mut data[f * h * w * out_c..(f + 1) * h * w * out_c];
        for y in 0..h {
            for x in 0..w {
                if !field.is_valid(0, x, y) {
                    continue;
                }
                let v = field.vector(0, x, y);
                let target = [(x as f64 + v[0]) as f32, (y as f64 + v[1]) as f32];
                let Some((tx, ty)) = latent_cell(target, w, h) else {
                    continue;
                };
                let p = k.unproject(x as f64, y as f64) * scene.depth.at(x, y) as f64;
                let z = rel.apply(&p).z;
                let cell = ty * w + tx;
                if z < zbuf[cell] {
                    zbuf[cell] = z;
                    let o = cell * out_c;
                    frame[o..o + c].copy_from_slice(scene.texel(x, y));
                    frame[o + c] = 1.0;
                }
            }
        }
    }
    FeatureVolume::new(poses.len(), h, w, out_c, data)
}

/// Maximum channel deviation of features along each valid trajectory from
/// its frame-0 value. The last channel of `volume` is the coverage flag
/// written by [`render_sequence`]; uncovered samples are skipped.
pub fn check_trajectory_constancy(volume: &FeatureVolume<f32>, ts: &TrajectorySet) -> Result<f64> {
    ensure_arg!(
        volume.channels() >= 2,
        "volume needs texture channels plus a coverage channel"
    );
    ensure_arg!(
        ts.frames() == volume.frames(),
        "trajectories span {} frames, volume {}",
        ts.frames(),
        volume.frames()
    );
    let (w, h) = (volume.width(), volume.height());
    let tc = volume.channels() - 1;
    let lookup = |f: usize, l: usize| -> Result<Option<&[f32]>> {
        if !ts.is_valid(f, l) {
            return Ok(None);
        }
        let c = ts.coord(l, f);
        let (x, y) = latent_cell(c, w, h).ok_or_else(|| {
            Error::invalid(format!(
                "valid trajectory {l} leaves the grid at frame {f}: ({}, {})",
                c[0], c[1]
            ))
        })?;
        let px = volume.pixel(f, y, x);
        Ok((px[tc] > 0.5).then(|| &px[..tc]))
    };
    let mut worst = 0.0f64;
    for l in 0..ts.count() {
        let Some(reference) = lookup(0, l)? else {
            continue;
        };
        for f in 1..ts.frames() {
            if let Some(px) = lookup(f, l)? {
                for (a, b) in px.iter().zip(reference) {
                    worst = worst.max((a - b).abs() as f64);
                }
            }
        }
    }
    Ok(worst)
}

/// Random in-bounds trajectories on an `h × w` grid with roughly 30% of
/// entries masked out.
pub fn random_trajectories(
    rng: &mut ChaCha8Rng,
    count: usize,
    frames: usize,
    h: usize,
    w: usize,
) -> TrajectorySet {
    let coords = (0..count * frames)
        .map(|_| [rng.gen_range(0.0..w as f32), rng.gen_range(0.0..h as f32)])
        .collect();
    let mask = (0..count * frames).map(|_| rng.gen_bool(0.7)).collect();
    TrajectorySet::new(count, frames, coords, mask).expect("consistent sizes")
}

/// Negative control: keeps frame 0 of every trajectory and assigns frames
/// `1..F` from a randomly chosen other trajectory.
pub fn shuffle_trajectories(ts: &TrajectorySet, seed: u64) -> Result<TrajectorySet> {
    let mut perm: Vec<usize> = (0..ts.count()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (l_n, f_n) = (ts.count(), ts.frames());
    let mut coords = Vec::with_capacity(l_n * f_n);
    let mut mask = vec![false; l_n * f_n];
    for l in 0..l_n {
        for f in 0..f_n {
            let src = if f == 0 { l } else { perm[l] };
            coords.push(ts.coord(src, f));
            mask[f * l_n + l] = ts.is_valid(f, src);
        }
    }
    TrajectorySet::new(l_n, f_n, coords, mask)
}

/// Constancy measurement for one camera path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstancyReport {
    pub path: CameraPath,
    pub bound: f64,
    pub deviation: f64,
    pub shuffled_deviation: f64,
    pub valid_fraction: f64,
}

pub fn constancy_on_path(
    scene: &SyntheticScene,
    path: CameraPath,
    frames: usize,
    seed: u64,
) -> Result<ConstancyReport> {
    let poses = path.poses(frames);
    let volume = render_sequence(scene, &poses)?;
    let ts = crate::traj::extract_from_image(&scene.depth, &scene.intrinsics, &poses)?;
    let deviation = check_trajectory_constancy(&volume, &ts)?;
    let shuffled = shuffle_trajectories(&ts, seed)?;
    let shuffled_deviation = check_trajectory_constancy(&volume, &shuffled)?;
    Ok(ConstancyReport {
        path,
        bound: scene.quantization_bound(),
        deviation,
        shuffled_deviation,
        valid_fraction: ts.valid_fraction(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traj::extract_from_image;

    #[test]
    fn scenes_are_deterministic() {
        let a = make_scene(42, 16, 12, 3).unwrap();
        let b = make_scene(42, 16, 12, 3).unwrap();
        assert_eq!(a, b);
        assert!(a
            .texture
            .iter()
            .zip(&b.texture)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(make_scene(43, 16, 12, 3).unwrap().texture, a.texture);
    }

    #[test]
    fn flat_scene_has_constant_depth() {
        let s = make_scene_with(1, 8, 8, 1, 0.0).unwrap();
        assert!(s.depth.values().iter().all(|&d| d == BASE_DEPTH as f32));
    }

    #[test]
    fn default_depth_range() {
        let s = make_scene(1, 64, 64, 1).unwrap();
        let (lo, hi) = s
            .depth
            .values()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &d| {
                (lo.min(d), hi.max(d))
            });
        assert!(lo >= 1.75 && hi <= 2.25, "{lo} {hi}");
        // the grid hits the extrema at quarter periods
        assert!((lo - 1.75).abs() < 1e-6 && (hi - 2.25).abs() < 1e-6);
    }

    #[test]
    fn static_render_equals_texture() {
        let s = make_scene(3, 10, 8, 2).unwrap();
        let v = render_sequence(&s, &[Extrinsics::identity(); 3]).unwrap();
        for f in 0..3 {
            for y in 0..8 {
                for x in 0..10 {
                    let px = v.pixel(f, y, x);
                    assert_eq!(&px[..2], s.texel(x, y));
                    assert_eq!(px[2], 1.0);
                }
            }
        }
    }

    #[test]
    fn one_pixel_scene_lands_at_projection() {
        // a single scene point seen from a translated camera
        let mut s = make_scene(0, 1, 1, 1).unwrap();
        s.depth = DepthMap::constant(1, 1, 2.0).unwrap();
        s.intrinsics = Intrinsics::new(10.0, 10.0, 0.0, 0.0).unwrap();
        let e2 = Extrinsics::from_translation(Vector3::new(0.04, 0.0, 0.0));
        let v = render_sequence(&s, &[Extrinsics::identity(), e2]).unwrap();
        // projection: 10 * 0.04 / 2 = 0.2 px, rounds back onto the only cell
        assert_eq!(v.pixel(1, 0, 0)[1], 1.0);
        let e3 = Extrinsics::from_translation(Vector3::new(0.2, 0.0, 0.0));
        let v = render_sequence(&s, &[Extrinsics::identity(), e3]).unwrap();
        // 1 px to the right: outside the 1x1 image, so a hole
        assert_eq!(v.pixel(1, 0, 0)[1], 0.0);
    }

    #[test]
    fn nearer_point_wins_collisions() {
        // two columns at different depths; a pure zoom-out maps both onto
        // the principal column, where the nearer one must win
        let mut s = make_scene(5, 3, 1, 1).unwrap();
        s.texture = vec![0.1, 0.5, 0.9];
        s.depth = DepthMap::new(1, 3, vec![1.0, 4.0, 1.0]).unwrap();
        s.intrinsics = Intrinsics::new(1.0, 1.0, 1.0, 0.0).unwrap();
        let e2 = Extrinsics::from_translation(Vector3::new(0.0, 0.0, 2.0));
        let v = render_sequence(&s, &[Extrinsics::identity(), e2]).unwrap();
        // pixel 0: x' = -1/3 → 0.667 → cell 1; pixel 2: 1/3 → 1.333 → cell 1;
        // pixel 1 stays at cell 1 with depth 6, the others have depth 3
        assert_eq!(v.pixel(1, 0, 1), &[0.1, 1.0]);
        assert_eq!(v.pixel(1, 0, 0)[1], 0.0);
    }

    #[test]
    fn static_camera_constancy_is_zero() {
        let s = make_scene(9, 12, 12, 2).unwrap();
        let poses = vec![Extrinsics::identity(); 4];
        let v = render_sequence(&s, &poses).unwrap();
        let ts = extract_from_image(&s.depth, &s.intrinsics, &poses).unwrap();
        assert_eq!(check_trajectory_constancy(&v, &ts).unwrap(), 0.0);
    }

    #[test]
    fn pan_constancy_within_bound() {
        let s = make_scene(11, 64, 64, 3).unwrap();
        let r = constancy_on_path(&s, CameraPath::Pan, 12, 1).unwrap();
        assert!(r.deviation <= r.bound, "{r:?}");
        assert!(r.shuffled_deviation >= 10.0 * r.bound, "{r:?}");
    }
}
