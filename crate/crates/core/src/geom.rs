//! Pinhole camera model, rigid pose algebra and depth-driven pixel
//! translation between two views.
//!
//! Conventions used throughout the crate:
//!
//! - `x` is the column index and `y` the row index of a pixel.
//! - [`Extrinsics`] map world coordinates into the camera frame,
//!   `X_cam = R * X_world + t`.
//! - Depth is the camera-frame `z` of the source view.

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use rayon::prelude::*;

use crate::error::{ensure_arg, Error, Result};

/// Transformed points at or below this camera-frame depth (meters) are
/// treated as behind the camera.
pub const BEHIND_CAMERA_EPS: f64 = 1e-6;

/// Tolerance on `‖RᵀR − I‖∞` accepted when validating a rotation.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        ensure_arg!(
            fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0,
            "focal lengths must be positive and finite, got fx={fx}, fy={fy}"
        );
        ensure_arg!(
            cx.is_finite() && cy.is_finite(),
            "principal point must be finite, got ({cx}, {cy})"
        );
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Back-projects pixel `(x, y)` onto the normalized image plane (`z = 1`).
    #[inline]
    pub fn unproject(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-frame point with perspective division.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> [f64; 2] {
        [self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy]
    }
}

/// Intrinsics with the principal point in the image center and equal focal
/// lengths.
pub fn make_default_intrinsics(width: f64, height: f64, focal: f64) -> Result<Intrinsics> {
    ensure_arg!(
        width > 0.0 && height > 0.0,
        "image dimensions must be positive, got {width}x{height}"
    );
    ensure_arg!(focal > 0.0, "focal length must be positive, got {focal}");
    Intrinsics::new(focal, focal, width / 2.0, height / 2.0)
}

/// Rigid world-to-camera transform `[R | t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Extrinsics {
    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        ensure_arg!(
            rotation
                .iter()
                .chain(translation.iter())
                .all(|v| v.is_finite()),
            "extrinsics contain non-finite values"
        );
        let err = orthonormality_error(&rotation);
        ensure_arg!(
            err <= ORTHONORMAL_TOL,
            "rotation is not orthonormal (‖RᵀR − I‖∞ = {err:.3e})"
        );
        let det = rotation.determinant();
        ensure_arg!(det > 0.0, "rotation has determinant {det:.6}, expected +1");
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation of `angle` radians about `axis`, followed by translation `t`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, t: Vector3<f64>) -> Result<Self> {
        ensure_arg!(axis.norm() > 0.0, "rotation axis must be non-zero");
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Ok(Self {
            rotation: *rot.matrix(),
            translation: t,
        })
    }

    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Extrinsics) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

pub(crate) fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

/// Transform taking camera-1 coordinates to camera-2 coordinates, `E₂·E₁⁻¹`.
///
/// Identical inputs yield the exact identity.
pub fn relative_transform(e1: &Extrinsics, e2: &Extrinsics) -> Extrinsics {
    if e1 == e2 {
        return Extrinsics::identity();
    }
    e2.compose(&e1.inverse())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        ensure_arg!(
            height > 0 && width > 0,
            "depth map must be non-empty, got {height}x{width}"
        );
        ensure_arg!(
            values.len() == height * width,
            "depth map expects {} values, got {}",
            height * width,
            values.len()
        );
        if let Some(i) = values.iter().position(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::invalid(format!(
                "depth at ({}, {}) is {}, expected finite and > 0",
                i % width,
                i / width,
                values[i]
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn constant(height: usize, width: usize, depth: f32) -> Result<Self> {
        Self::new(height, width, vec![depth; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

/// Integer pixel coordinates `(x, y)` of an `height × width` image,
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    pub height: usize,
    pub width: usize,
}

impl PixelGrid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn coord(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.len()).map(|i| self.coord(i))
    }
}

/// Per-pixel displacement `(Δx, Δy)` between views, stacked over frames.
///
/// Pixels whose transformed point falls behind the camera carry a zero
/// vector and `valid = false`.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationField {
    frames: usize,
    height: usize,
    width: usize,
    vectors: Vec<[f64; 2]>,
    valid: Vec<bool>,
}

impl TranslationField {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        let n = frames * height * width;
        Self {
            frames,
            height,
            width,
            vectors: vec![[0.0; 2]; n],
            valid: vec![true; n],
        }
    }

    /// Stacks single-frame fields of equal size.
    pub fn stack(slices: &[TranslationField]) -> Result<Self> {
        ensure_arg!(!slices.is_empty(), "cannot stack zero translation fields");
        let (h, w) = (slices[0].height, slices[0].width);
        let mut vectors = Vec::new();
        let mut valid = Vec::new();
        let mut frames = 0;
        for s in slices {
            ensure_arg!(
                s.height == h && s.width == w,
                "translation field size {}x{} differs from {}x{}",
                s.height,
                s.width,
                h,
                w
            );
            vectors.extend_from_slice(&s.vectors);
            valid.extend_from_slice(&s.valid);
            frames += s.frames;
        }
        Ok(Self {
            frames,
            height: h,
            width: w,
            vectors,
            valid,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    fn index(&self, f: usize, x: usize, y: usize) -> usize {
        (f * self.height + y) * self.width + x
    }

    #[inline]
    pub fn vector(&self, f: usize, x: usize, y: usize) -> [f64; 2] {
        self.vectors[self.index(f, x, y)]
    }

    #[inline]
    pub fn is_valid(&self, f: usize, x: usize, y: usize) -> bool {
        self.valid[self.index(f, x, y)]
    }

    pub fn vectors(&self) -> &[[f64; 2]] {
        &self.vectors
    }

    pub fn valid_flags(&self) -> &[bool] {
        &self.valid
    }

    /// Bilinear sample of frame `f` at continuous position `(x, y)`, with
    /// coordinates clamped to the field. Returns `None` if any contributing
    /// corner is flagged invalid.
    pub fn sample_bilinear(&self, f: usize, x: f64, y: f64) -> Option<[f64; 2]> {
        if !(x.is_finite() && y.is_finite()) {
            return None;
        }
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = xc - x0 as f64;
        let ay = yc - y0 as f64;
        let corners = [
            (x0, y0, (1.0 - ax) * (1.0 - ay)),
            (x1, y0, ax * (1.0 - ay)),
            (x0, y1, (1.0 - ax) * ay),
            (x1, y1, ax * ay),
        ];
        let mut out = [0.0; 2];
        for (cx, cy, wgt) in corners {
            if wgt == 0.0 {
                continue;
            }
            if !self.is_valid(f, cx, cy) {
                return None;
            }
            let v = self.vector(f, cx, cy);
            out[0] += wgt * v[0];
            out[1] += wgt * v[1];
        }
        Some(out)
    }
}

/// Displacement of every source pixel when the scene seen from `e1` with
/// the given depth is re-projected into view `e2`.
///
/// Returns a single-frame [`TranslationField`].
pub fn pixel_translation(
    depth: &DepthMap,
    k: &Intrinsics,
    e1: &Extrinsics,
    e2: &Extrinsics,
) -> TranslationField {
    let (h, w) = (depth.height(), depth.width());
    let rel = relative_transform(e1, e2);
    if rel.is_identity() {
        return TranslationField::zeros(1, h, w);
    }

    let rows: Vec<(Vec<[f64; 2]>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut vectors = Vec::with_capacity(w);
            let mut valid = Vec::with_capacity(w);
            for x in 0..w {
                match reproject_pixel(depth, k, &rel, x, y) {
                    Some(uv) => {
                        vectors.push([uv[0] - x as f64, uv[1] - y as f64]);
                        valid.push(true);
                    }
                    None => {
                        vectors.push([0.0, 0.0]);
                        valid.push(false);
                    }
                }
            }
            (vectors, valid)
        })
        .collect();

    let mut vectors = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for (v, m) in rows {
        vectors.extend(v);
        valid.extend(m);
    }
    TranslationField {
        frames: 1,
        height: h,
        width: w,
        vectors,
        valid,
    }
}

/// Pixel position of source pixel `(x, y)` seen through `rel`, or `None`
/// when the transformed point is behind the camera.
#[inline]
pub(crate) fn reproject_pixel(
    depth: &DepthMap,
    k: &Intrinsics,
    rel: &Extrinsics,
    x: usize,
    y: usize,
) -> Option<[f64; 2]> {
    let d = depth.at(x, y) as f64;
    let p = k.unproject(x as f64, y as f64) * d;
    let q = rel.apply(&p);
    if q.z <= BEHIND_CAMERA_EPS {
        return None;
    }
    Some(k.project(&q))
}
