//! Trajectory sets built from camera motion over a single image or over a
//! tracked video, plus sparsification and latent-resolution rescaling.

use rayon::prelude::*;

use crate::error::{ensure_arg, Result};
use crate::geom::{pixel_translation, DepthMap, Extrinsics, Intrinsics, PixelGrid};

/// `L` trajectories over `F` frames.
///
/// Coordinates are stored trajectory-major (`L × F`), the validity mask
/// frame-major (`F × L`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    count: usize,
    frames: usize,
    coords: Vec<[f32; 2]>,
    mask: Vec<bool>,
}

impl TrajectorySet {
    pub fn new(
        count: usize,
        frames: usize,
        coords: Vec<[f32; 2]>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        ensure_arg!(frames > 0, "trajectory set needs at least one frame");
        ensure_arg!(
            coords.len() == count * frames,
            "expected {} coordinates for {count} trajectories x {frames} frames, got {}",
            count * frames,
            coords.len()
        );
        ensure_arg!(
            mask.len() == count * frames,
            "expected {} mask entries, got {}",
            count * frames,
            mask.len()
        );
        for f in 0..frames {
            for l in 0..count {
                if mask[f * count + l] {
                    let c = coords[l * frames + f];
                    ensure_arg!(
                        c[0].is_finite() && c[1].is_finite(),
                        "valid trajectory {l} has non-finite coordinate at frame {f}"
                    );
                }
            }
        }
        Ok(Self {
            count,
            frames,
            coords,
            mask,
        })
    }

    /// One static trajectory per cell of a `height × width` grid, all valid.
    pub fn identity_grid(frames: usize, height: usize, width: usize) -> Self {
        let grid = PixelGrid::new(height, width);
        let count = grid.len();
        let mut coords = Vec::with_capacity(count * frames);
        for (x, y) in grid.coords() {
            coords.extend(std::iter::repeat_n([x as f32, y as f32], frames));
        }
        Self {
            count,
            frames,
            coords,
            mask: vec![true; count * frames],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    #[inline]
    pub fn coord(&self, l: usize, f: usize) -> [f32; 2] {
        self.coords[l * self.frames + f]
    }

    #[inline]
    pub fn is_valid(&self, f: usize, l: usize) -> bool {
        self.mask[f * self.count + l]
    }

    pub fn coords(&self) -> &[[f32; 2]] {
        &self.coords
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    /// Subset of trajectories in the given order (indices may repeat).
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut coords = Vec::with_capacity(indices.len() * self.frames);
        for &l in indices {
            coords.extend_from_slice(&self.coords[l * self.frames..(l + 1) * self.frames]);
        }
        let mut mask = Vec::with_capacity(indices.len() * self.frames);
        for f in 0..self.frames {
            mask.extend(indices.iter().map(|&l| self.is_valid(f, l)));
        }
        Self {
            count: indices.len(),
            frames: self.frames,
            coords,
            mask,
        }
    }
}

/// Point tracks from an external tracker: `F × L` positions with per-entry
/// visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTracks {
    frames: usize,
    count: usize,
    positions: Vec<[f32; 2]>,
    visible: Vec<bool>,
}

impl PointTracks {
    pub fn new(
        frames: usize,
        count: usize,
        positions: Vec<[f32; 2]>,
        visible: Vec<bool>,
    ) -> Result<Self> {
        ensure_arg!(frames > 0, "point tracks need at least one frame");
        ensure_arg!(
            positions.len() == frames * count && visible.len() == frames * count,
            "point tracks expect {} entries, got {} positions and {} flags",
            frames * count,
            positions.len(),
            visible.len()
        );
        for (i, (p, &v)) in positions.iter().zip(&visible).enumerate() {
            ensure_arg!(
                !v || (p[0].is_finite() && p[1].is_finite()),
                "visible track {} has non-finite position at frame {}",
                i % count,
                i / count
            );
        }
        Ok(Self {
            frames,
            count,
            positions,
            visible,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn position(&self, f: usize, l: usize) -> [f32; 2] {
        self.positions[f * self.count + l]
    }

    #[inline]
    pub fn is_visible(&self, f: usize, l: usize) -> bool {
        self.visible[f * self.count + l]
    }

    pub fn positions(&self) -> &[[f32; 2]] {
        &self.positions
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }
}

#[inline]
pub fn in_bounds(c: [f32; 2], width: usize, height: usize) -> bool {
    c[0] >= 0.0 && c[1] >= 0.0 && c[0] < width as f32 && c[1] < height as f32
}

/// Frame-major `F × L` in-bounds flags for a set of `F × L` positions.
pub fn in_bounds_mask(positions: &[[f32; 2]], width: usize, height: usize) -> Vec<bool> {
    positions
        .iter()
        .map(|&c| in_bounds(c, width, height))
        .collect()
}

/// Camera-motion trajectories for every pixel of a single image.
///
/// `poses[0]` is the view the depth map was taken from.
pub fn extract_from_image(
    depth: &DepthMap,
    k: &Intrinsics,
    poses: &[Extrinsics],
) -> Result<TrajectorySet> {
    ensure_arg!(!poses.is_empty(), "pose list is empty");
    let (h, w) = (depth.height(), depth.width());
    let grid = PixelGrid::new(h, w);
    let frames = poses.len();
    let count = grid.len();

    let fields: Vec<_> = poses
        .par_iter()
        .map(|pose| pixel_translation(depth, k, &poses[0], pose))
        .collect();

    let mut coords = vec![[0.0f32; 2]; count * frames];
    let mut mask = vec![false; count * frames];
    for (f, field) in fields.iter().enumerate() {
        for (l, (x, y)) in grid.coords().enumerate() {
            let v = field.vector(0, x, y);
            let c = [(x as f64 + v[0]) as f32, (y as f64 + v[1]) as f32];
            coords[l * frames + f] = c;
            mask[f * count + l] = field.is_valid(0, x, y) && in_bounds(c, w, h);
        }
    }
    TrajectorySet::new(count, frames, coords, mask)
}

/// Combines tracked object motion with camera motion.
///
/// Every depth map is read in its own frame's camera; the translation for
/// frame `f` is taken relative to `poses[0]` and sampled bilinearly at the
/// tracked position.
pub fn extract_from_video(
    tracks: &PointTracks,
    depths: &[DepthMap],
    k: &Intrinsics,
    poses: &[Extrinsics],
) -> Result<TrajectorySet> {
    let frames = tracks.frames();
    ensure_arg!(
        depths.len() == frames && poses.len() == frames,
        "frame count mismatch: tracks have {frames}, depths {}, poses {}",
        depths.len(),
        poses.len()
    );
    let (h, w) = (depths[0].height(), depths[0].width());
    for (f, d) in depths.iter().enumerate() {
        ensure_arg!(
            d.height() == h && d.width() == w,
            "depth map {f} is {}x{}, expected {h}x{w}",
            d.height(),
            d.width()
        );
    }

    let count = tracks.count();
    let per_frame: Vec<Vec<([f32; 2], bool)>> = (0..frames)
        .into_par_iter()
        .map(|f| {
            let field = pixel_translation(&depths[f], k, &poses[0], &poses[f]);
            (0..count)
                .map(|l| {
                    let p = tracks.position(f, l);
                    if !(p[0].is_finite() && p[1].is_finite()) {
                        return ([0.0, 0.0], false);
                    }
                    match field.sample_bilinear(0, p[0] as f64, p[1] as f64) {
                        Some(t) => {
                            let c = [(p[0] as f64 + t[0]) as f32, (p[1] as f64 + t[1]) as f32];
                            (c, tracks.is_visible(f, l) && in_bounds(c, w, h))
                        }
                        None => (p, false),
                    }
                })
                .collect()
        })
        .collect();

    let mut coords = vec![[0.0f32; 2]; count * frames];
    let mut mask = vec![false; count * frames];
    for (f, row) in per_frame.into_iter().enumerate() {
        for (l, (c, m)) in row.into_iter().enumerate() {
            coords[l * frames + f] = c;
            mask[f * count + l] = m;
        }
    }
    TrajectorySet::new(count, frames, coords, mask)
}

/// Frame-independent spatial selection mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub height: usize,
    pub width: usize,
    pub flags: Vec<bool>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, flags: Vec<bool>) -> Result<Self> {
        ensure_arg!(
            flags.len() == height * width,
            "region mask expects {} flags, got {}",
            height * width,
            flags.len()
        );
        Ok(Self {
            height,
            width,
            flags,
        })
    }

    /// Axis-aligned box `[x0, x1) × [y0, y1)`.
    pub fn from_box(
        height: usize,
        width: usize,
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
    ) -> Self {
        let flags = PixelGrid::new(height, width)
            .coords()
            .map(|(x, y)| x >= x0 && x < x1 && y >= y0 && y < y1)
            .collect();
        Self {
            height,
            width,
            flags,
        }
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.flags[y as usize * self.width + x as usize]
    }
}

/// Keeps trajectories whose frame-0 cell lies on the `stride` grid and,
/// when given, inside `region`.
pub fn sparsify(
    ts: &TrajectorySet,
    stride: usize,
    region: Option<&RegionMask>,
) -> Result<TrajectorySet> {
    ensure_arg!(stride >= 1, "stride must be at least 1, got {stride}");
    let keep: Vec<usize> = (0..ts.count())
        .filter(|&l| {
            let c = ts.coord(l, 0);
            if !(c[0].is_finite() && c[1].is_finite()) {
                return false;
            }
            let (x, y) = (c[0].round() as i64, c[1].round() as i64);
            let on_grid = x.rem_euclid(stride as i64) == 0 && y.rem_euclid(stride as i64) == 0;
            on_grid && region.is_none_or(|r| r.contains(x, y))
        })
        .collect();
    Ok(ts.select(&keep))
}

/// Maps pixel-space trajectories onto a latent grid `scale` times the
/// pixel resolution.
///
/// Trajectories are first thinned to one per latent cell with stride
/// `round(1/scale)`; masks are then intersected with the latent bounds
/// `⌊H_p·scale⌋ × ⌊W_p·scale⌋`.
pub fn rescale_to_latent(
    ts: &TrajectorySet,
    scale: f64,
    pixel_width: usize,
    pixel_height: usize,
) -> Result<TrajectorySet> {
    ensure_arg!(
        scale.is_finite() && scale > 0.0,
        "latent scale must be positive, got {scale}"
    );
    let stride = (1.0 / scale).round().max(1.0) as usize;
    let kept = sparsify(ts, stride, None)?;
    let (lw, lh) = latent_dims(pixel_width, pixel_height, scale);
    let coords: Vec<[f32; 2]> = kept
        .coords
        .iter()
        .map(|c| [(c[0] as f64 * scale) as f32, (c[1] as f64 * scale) as f32])
        .collect();
    let (count, frames) = (kept.count, kept.frames);
    let mask = (0..frames * count)
        .map(|i| {
            let (f, l) = (i / count, i % count);
            kept.mask[i] && in_bounds(coords[l * frames + f], lw, lh)
        })
        .collect();
    TrajectorySet::new(count, frames, coords, mask)
}

/// `(⌊W_p·scale⌋, ⌊H_p·scale⌋)`.
pub fn latent_dims(pixel_width: usize, pixel_height: usize, scale: f64) -> (usize, usize) {
    (
        (pixel_width as f64 * scale).floor() as usize,
        (pixel_height as f64 * scale).floor() as usize,
    )
}
