//! Naive scalar-loop re-implementations used as oracles for the optimized
//! kernels. Nothing here shares code with the kernels it checks.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::attn::{FeatureVolume, TokenTensor};
use crate::error::{Error, Result};
use crate::geom::{DepthMap, Extrinsics, Intrinsics, BEHIND_CAMERA_EPS};
use crate::traj::TrajectorySet;

/// Largest instance (in scalar elements) the references accept.
pub const MAX_ELEMENTS: usize = 10_000;

#[derive(Debug, Clone)]
pub enum ReferenceInputs {
    Sample {
        z: FeatureVolume<f64>,
        ts: TrajectorySet,
    },
    BackProject {
        /// `F × L × C` trajectory features.
        zt: TokenTensor<f64>,
        ts: TrajectorySet,
        height: usize,
        width: usize,
    },
    FrameAttention {
        q: TokenTensor<f64>,
        k: TokenTensor<f64>,
        v: TokenTensor<f64>,
        heads: usize,
        key_mask: Option<Vec<bool>>,
    },
    PixelTranslation {
        depth: DepthMap,
        k: Intrinsics,
        e1: Extrinsics,
        e2: Extrinsics,
    },
}

impl ReferenceInputs {
    fn op_name(&self) -> &'static str {
        match self {
            ReferenceInputs::Sample { .. } => "sample_along_trajectories",
            ReferenceInputs::BackProject { .. } => "back_project",
            ReferenceInputs::FrameAttention { .. } => "frame_attention",
            ReferenceInputs::PixelTranslation { .. } => "pixel_translation",
        }
    }

    fn elements(&self) -> usize {
        match self {
            ReferenceInputs::Sample { z, ts } => z.len() + 2 * ts.count() * ts.frames(),
            ReferenceInputs::BackProject { zt, ts, .. } => {
                zt.data.len() + 2 * ts.count() * ts.frames()
            }
            ReferenceInputs::FrameAttention { q, .. } => 3 * q.data.len(),
            ReferenceInputs::PixelTranslation { depth, .. } => depth.values().len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceOutput {
    /// `F × L × C`, masked rows zero.
    Sampled(Vec<f64>),
    BackProjected {
        values: Vec<f64>,
        counts: Vec<u32>,
    },
    Attended(Vec<f64>),
    Translation {
        vectors: Vec<[f64; 2]>,
        valid: Vec<bool>,
    },
}

pub const SUPPORTED_OPS: [&str; 4] = [
    "sample_along_trajectories",
    "back_project",
    "frame_attention",
    "pixel_translation",
];

/// Runs the named reference on matching inputs.
pub fn brute_force_reference(op_name: &str, inputs: &ReferenceInputs) -> Result<ReferenceOutput> {
    if !SUPPORTED_OPS.contains(&op_name) {
        return Err(Error::invalid(format!(
            "unsupported reference op {op_name:?}; expected one of {SUPPORTED_OPS:?}"
        )));
    }
    if op_name != inputs.op_name() {
        return Err(Error::invalid(format!(
            "op {op_name:?} given inputs for {:?}",
            inputs.op_name()
        )));
    }
    if inputs.elements() > MAX_ELEMENTS {
        return Err(Error::invalid(format!(
            "reference instance has {} elements, limit is {MAX_ELEMENTS}",
            inputs.elements()
        )));
    }
    Ok(match inputs {
        ReferenceInputs::Sample { z, ts } => ReferenceOutput::Sampled(sample(z, ts)?),
        ReferenceInputs::BackProject {
            zt,
            ts,
            height,
            width,
        } => {
            let (values, counts) = back_project(zt, ts, *height, *width)?;
            ReferenceOutput::BackProjected { values, counts }
        }
        ReferenceInputs::FrameAttention {
            q,
            k,
            v,
            heads,
            key_mask,
        } => ReferenceOutput::Attended(frame_attention(q, k, v, *heads, key_mask.as_deref())),
        ReferenceInputs::PixelTranslation { depth, k, e1, e2 } => {
            let (vectors, valid) = pixel_translation(depth, k, e1, e2);
            ReferenceOutput::Translation { vectors, valid }
        }
    })
}

/// Nearest cell of a non-negative in-bounds coordinate.
fn nearest(v: f32, size: usize) -> usize {
    let r = (v as f64 + 0.5).floor() as usize;
    if r >= size {
        size - 1
    } else {
        r
    }
}

fn cell(
    ts: &TrajectorySet,
    l: usize,
    f: usize,
    width: usize,
    height: usize,
) -> Result<(usize, usize)> {
    let [x, y] = ts.coord(l, f);
    if !(x >= 0.0 && y >= 0.0 && (x as f64) < width as f64 && (y as f64) < height as f64) {
        return Err(Error::invalid(format!(
            "trajectory {l} out of bounds at frame {f}"
        )));
    }
    Ok((nearest(x, width), nearest(y, height)))
}

fn sample(z: &FeatureVolume<f64>, ts: &TrajectorySet) -> Result<Vec<f64>> {
    let (frames, h, w, c) = z.shape();
    let l_n = ts.count();
    let mut out = vec![0.0; frames * l_n * c];
    for l in 0..l_n {
        for f in 0..frames {
            if !ts.is_valid(f, l) {
                continue;
            }
            let (x, y) = cell(ts, l, f, w, h)?;
            for ch in 0..c {
                out[(f * l_n + l) * c + ch] = z.at(f, y, x, ch);
            }
        }
    }
    Ok(out)
}

fn back_project(
    zt: &TokenTensor<f64>,
    ts: &TrajectorySet,
    h: usize,
    w: usize,
) -> Result<(Vec<f64>, Vec<u32>)> {
    let (frames, l_n, c) = zt.shape();
    let mut sums = vec![0.0; frames * h * w * c];
    let mut counts = vec![0u32; frames * h * w];
    for l in 0..l_n {
        for f in 0..frames {
            if !ts.is_valid(f, l) {
                continue;
            }
            let (x, y) = cell(ts, l, f, w, h)?;
            let idx = (f * h + y) * w + x;
            counts[idx] += 1;
            for ch in 0..c {
                sums[idx * c + ch] += zt.data[(f * l_n + l) * c + ch];
            }
        }
    }
    for idx in 0..frames * h * w {
        if counts[idx] > 0 {
            for ch in 0..c {
                sums[idx * c + ch] /= counts[idx] as f64;
            }
        }
    }
    Ok((sums, counts))
}

fn frame_attention(
    q: &TokenTensor<f64>,
    k: &TokenTensor<f64>,
    v: &TokenTensor<f64>,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Vec<f64> {
    let (frames, n_tok, c) = q.shape();
    let hd = c / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let at = |t: &TokenTensor<f64>, f: usize, n: usize, ch: usize| t.data[(f * n_tok + n) * c + ch];
    let mut out = vec![0.0; frames * n_tok * c];
    for n in 0..n_tok {
        for h in 0..heads {
            for i in 0..frames {
                let mut logits = Vec::new();
                for j in 0..frames {
                    if key_mask.is_some_and(|m| !m[j * n_tok + n]) {
                        continue;
                    }
                    let mut s = 0.0;
                    for d in 0..hd {
                        s += at(q, i, n, h * hd + d) * at(k, j, n, h * hd + d);
                    }
                    logits.push((j, s * scale));
                }
                if logits.is_empty() {
                    continue;
                }
                let max = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = logits.iter().map(|l| (l.1 - max).exp()).sum();
                for &(j, s) in &logits {
                    let p = (s - max).exp() / denom;
                    for d in 0..hd {
                        out[(i * n_tok + n) * c + h * hd + d] += p * at(v, j, n, h * hd + d);
                    }
                }
            }
        }
    }
    out
}

fn pixel_translation(
    depth: &DepthMap,
    k: &Intrinsics,
    e1: &Extrinsics,
    e2: &Extrinsics,
) -> (Vec<[f64; 2]>, Vec<bool>) {
    let rel: Matrix4<f64> =
        e2.to_homogeneous() * e1.to_homogeneous().try_inverse().expect("rigid transform");
    let km: Matrix3<f64> = k.matrix();
    let k_inv = km.try_inverse().expect("valid intrinsics");
    let mut vectors = Vec::new();
    let mut valid = Vec::new();
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let ray = k_inv * Vector3::new(x as f64, y as f64, 1.0);
            let p = ray * depth.at(x, y) as f64;
            let q = rel * Vector4::new(p.x, p.y, p.z, 1.0);
            if q.z <= BEHIND_CAMERA_EPS {
                vectors.push([0.0, 0.0]);
                valid.push(false);
                continue;
            }
            let uvw = km * Vector3::new(q.x, q.y, q.z);
            vectors.push([uvw.x / uvw.z - x as f64, uvw.y / uvw.z - y as f64]);
            valid.push(true);
        }
    }
    (vectors, valid)
}
