use rayon::prelude::*;

use super::tensor::{
    AttentionWeights, BackProjection, Channels, DenoisingBatch, FeatureVolume, Scalar,
    SquareMatrix, TokenTensor, TrajFeatures,
};
use crate::error::{ensure_arg, Error, Result};
use crate::traj::{in_bounds, TrajectorySet};

/// Largest token count accepted by [`full_spacetime_attention`].
pub const SPACETIME_TOKEN_BUDGET: usize = 4096;

/// Multiplies every channel row by `w` (`y = W·x`).
pub fn linear_project<T: Scalar, X: Channels<T>>(x: &X, w: &SquareMatrix<T>) -> Result<X> {
    let c = x.channels();
    ensure_arg!(
        w.dim() == c,
        "projector is {}x{} but input has {c} channels",
        w.dim(),
        w.dim()
    );
    let mut out = x.clone();
    let wd = w.data();
    out.data_mut()
        .par_chunks_mut(c)
        .zip(x.data().par_chunks(c))
        .for_each(|(o, row)| {
            for (i, oi) in o.iter_mut().enumerate() {
                let wrow = &wd[i * c..(i + 1) * c];
                let acc: f64 = wrow
                    .iter()
                    .zip(row)
                    .map(|(a, b)| a.to_f64() * b.to_f64())
                    .sum();
                *oi = T::from_f64(acc);
            }
        });
    Ok(out)
}

pub(crate) struct AttnGeometry {
    pub frames: usize,
    pub tokens: usize,
    pub channels: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub scale: f64,
}

pub(crate) fn check_attention_inputs<T: Scalar>(
    q: &TokenTensor<T>,
    k: &TokenTensor<T>,
    v: &TokenTensor<T>,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<AttnGeometry> {
    ensure_arg!(
        q.shape() == k.shape() && q.shape() == v.shape(),
        "q/k/v shapes differ: {:?}, {:?}, {:?}",
        q.shape(),
        k.shape(),
        v.shape()
    );
    let (frames, tokens, channels) = q.shape();
    ensure_arg!(
        heads >= 1 && channels.is_multiple_of(heads),
        "{heads} heads do not divide {channels} channels"
    );
    if let Some(m) = key_mask {
        ensure_arg!(
            m.len() == frames * tokens,
            "key mask has {} entries, expected {}",
            m.len(),
            frames * tokens
        );
    }
    let head_dim = channels / heads;
    Ok(AttnGeometry {
        frames,
        tokens,
        channels,
        heads,
        head_dim,
        scale: 1.0 / (head_dim as f64).sqrt(),
    })
}

/// Softmax weights `P[i][j]` over frames for token column `n` and head `h`.
/// Masked keys get weight 0; a query with no visible key gets an all-zero row.
pub(crate) fn column_probs<T: Scalar>(
    g: &AttnGeometry,
    q: &TokenTensor<T>,
    k: &TokenTensor<T>,
    key_mask: Option<&[bool]>,
    n: usize,
    h: usize,
) -> Result<Vec<f64>> {
    let f = g.frames;
    let lo = h * g.head_dim;
    let hi = lo + g.head_dim;
    let visible = |j: usize| key_mask.is_none_or(|m| m[j * g.tokens + n]);
    let mut probs = vec![0.0; f * f];
    for i in 0..f {
        let qi = &q.row(i, n)[lo..hi];
        let row = &mut probs[i * f..(i + 1) * f];
        let mut max = f64::NEG_INFINITY;
        let mut any = false;
        for (j, r) in row.iter_mut().enumerate() {
            if !visible(j) {
                continue;
            }
            let kj = &k.row(j, n)[lo..hi];
            let s: f64 = qi
                .iter()
                .zip(kj)
                .map(|(a, b)| a.to_f64() * b.to_f64())
                .sum::<f64>()
                * g.scale;
            *r = s;
            any = true;
            if s > max {
                max = s;
            }
        }
        if !any {
            row.fill(0.0);
            continue;
        }
        if !max.is_finite() {
            return Err(Error::Internal(format!(
                "non-finite attention logits at column {n}, head {h}, query {i}"
            )));
        }
        let mut sum = 0.0;
        for (j, r) in row.iter_mut().enumerate() {
            if visible(j) {
                *r = (*r - max).exp();
                sum += *r;
            } else {
                *r = 0.0;
            }
        }
        for r in row.iter_mut() {
            *r /= sum;
        }
    }
    Ok(probs)
}

/// Multi-head attention along the frame axis, independently for every token
/// column. Logits are scaled by `1/√head_dim`.
pub fn frame_attention<T: Scalar>(
    q: &TokenTensor<T>,
    k: &TokenTensor<T>,
    v: &TokenTensor<T>,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<TokenTensor<T>> {
    let g = check_attention_inputs(q, k, v, heads, key_mask)?;
    let (f, c) = (g.frames, g.channels);
    let columns: Vec<Vec<f64>> = (0..g.tokens)
        .into_par_iter()
        .map(|n| {
            let mut out = vec![0.0; f * c];
            for h in 0..g.heads {
                let probs = column_probs(&g, q, k, key_mask, n, h)?;
                let lo = h * g.head_dim;
                for i in 0..f {
                    let orow = &mut out[i * c + lo..i * c + lo + g.head_dim];
                    for j in 0..f {
                        let p = probs[i * f + j];
                        if p == 0.0 {
                            continue;
                        }
                        let vj = &v.row(j, n)[lo..lo + g.head_dim];
                        for (o, vv) in orow.iter_mut().zip(vj) {
                            *o += p * vv.to_f64();
                        }
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut out = TokenTensor::zeros(f, g.tokens, c);
    for (n, col) in columns.into_iter().enumerate() {
        for i in 0..f {
            let o = out.offset(i, n);
            for (dst, src) in out.data[o..o + c].iter_mut().zip(&col[i * c..(i + 1) * c]) {
                *dst = T::from_f64(*src);
            }
        }
    }
    Ok(out)
}

/// Softmax maps of [`frame_attention`], one `F × F` map per
/// `(token column, head)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub frames: usize,
    pub columns: usize,
    /// `[column][query][key]`, column index `n * heads + h`.
    pub data: Vec<f64>,
}

impl AttentionMaps {
    pub fn new(frames: usize, columns: usize, data: Vec<f64>) -> Result<Self> {
        ensure_arg!(
            data.len() == frames * frames * columns,
            "attention maps need {} values, got {}",
            frames * frames * columns,
            data.len()
        );
        Ok(Self {
            frames,
            columns,
            data,
        })
    }

    pub fn map(&self, column: usize) -> &[f64] {
        let ff = self.frames * self.frames;
        &self.data[column * ff..(column + 1) * ff]
    }
}

pub fn frame_attention_maps<T: Scalar>(
    q: &TokenTensor<T>,
    k: &TokenTensor<T>,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<AttentionMaps> {
    let g = check_attention_inputs(q, k, k, heads, key_mask)?;
    let maps: Vec<Vec<f64>> = (0..g.tokens * g.heads)
        .into_par_iter()
        .map(|col| column_probs(&g, q, k, key_mask, col / g.heads, col % g.heads))
        .collect::<Result<_>>()?;
    AttentionMaps::new(g.frames, g.tokens * g.heads, maps.concat())
}

/// Project, attend along frames, project out.
fn attention_block<T: Scalar>(
    tokens: &TokenTensor<T>,
    w: &AttentionWeights<T>,
    key_mask: Option<&[bool]>,
) -> Result<TokenTensor<T>> {
    let q = linear_project(tokens, &w.wq)?;
    let k = linear_project(tokens, &w.wk)?;
    let v = linear_project(tokens, &w.wv)?;
    let a = frame_attention(&q, &k, &v, w.heads(), key_mask)?;
    linear_project(&a, &w.wo)
}

fn check_weights<T: Scalar>(z: &FeatureVolume<T>, w: &AttentionWeights<T>) -> Result<()> {
    ensure_arg!(
        w.channels() == z.channels(),
        "weights expect {} channels, features have {}",
        w.channels(),
        z.channels()
    );
    Ok(())
}

/// Attention across frames at every fixed spatial position.
pub fn temporal_attention<T: Scalar>(
    z: &FeatureVolume<T>,
    w: &AttentionWeights<T>,
) -> Result<FeatureVolume<T>> {
    check_weights(z, w)?;
    let (h, wd) = (z.height(), z.width());
    let out = attention_block(&z.clone().into_tokens(), w, None)?;
    FeatureVolume::from_tokens(out, h, wd)
}

/// Attention over all `F·H·W` tokens as one sequence.
pub fn full_spacetime_attention<T: Scalar>(
    z: &FeatureVolume<T>,
    w: &AttentionWeights<T>,
) -> Result<FeatureVolume<T>> {
    check_weights(z, w)?;
    let (f, h, wd, c) = z.shape();
    let n = f * h * wd;
    ensure_arg!(
        n <= SPACETIME_TOKEN_BUDGET,
        "{n} tokens exceed the spacetime attention budget of {SPACETIME_TOKEN_BUDGET}"
    );
    let seq = TokenTensor::new(n, 1, c, z.data().to_vec())?;
    let out = attention_block(&seq, w, None)?;
    FeatureVolume::new(f, h, wd, c, out.data)
}

/// Latent cell addressed by a trajectory coordinate: rounded half away from
/// zero and clamped to the grid. `None` when the coordinate lies outside
/// `[0, W) × [0, H)`.
#[inline]
pub fn latent_cell(c: [f32; 2], width: usize, height: usize) -> Option<(usize, usize)> {
    if !in_bounds(c, width, height) {
        return None;
    }
    let x = (c[0].round() as usize).min(width - 1);
    let y = (c[1].round() as usize).min(height - 1);
    Some((x, y))
}

/// Resolves the cell of every valid `(f, l)` entry, frame-major. Invalid
/// entries map to `None`.
pub(crate) fn resolve_cells(
    ts: &TrajectorySet,
    width: usize,
    height: usize,
) -> Result<Vec<Option<(usize, usize)>>> {
    let (frames, count) = (ts.frames(), ts.count());
    let mut cells = Vec::with_capacity(frames * count);
    for f in 0..frames {
        for l in 0..count {
            if !ts.is_valid(f, l) {
                cells.push(None);
                continue;
            }
            let c = ts.coord(l, f);
            match latent_cell(c, width, height) {
                Some(cell) => cells.push(Some(cell)),
                None => {
                    return Err(Error::invalid(format!(
                        "valid trajectory {l} at frame {f} lies outside the {width}x{height} grid: ({}, {})",
                        c[0], c[1]
                    )))
                }
            }
        }
    }
    Ok(cells)
}

/// Gathers features along trajectories; masked entries are zero.
pub fn sample_along_trajectories<T: Scalar>(
    z: &FeatureVolume<T>,
    ts: &TrajectorySet,
) -> Result<TrajFeatures<T>> {
    ensure_arg!(
        ts.frames() == z.frames(),
        "trajectories span {} frames, features {}",
        ts.frames(),
        z.frames()
    );
    let cells = resolve_cells(ts, z.width(), z.height())?;
    let (frames, count, c) = (z.frames(), ts.count(), z.channels());
    let mut out = TokenTensor::zeros(frames, count, c);
    out.data
        .par_chunks_mut(count * c)
        .enumerate()
        .for_each(|(f, frame)| {
            for l in 0..count {
                if let Some((x, y)) = cells[f * count + l] {
                    frame[l * c..(l + 1) * c].copy_from_slice(z.pixel(f, y, x));
                }
            }
        });
    Ok(TrajFeatures {
        tokens: out,
        mask: ts.mask().to_vec(),
    })
}

/// Scatters trajectory features onto an `H × W` grid and averages cells by
/// their number of valid contributions.
///
/// Contributions to a cell are summed in ascending trajectory order.
pub fn back_project<T: Scalar>(
    zt: &TrajFeatures<T>,
    ts: &TrajectorySet,
    height: usize,
    width: usize,
) -> Result<BackProjection<T>> {
    ensure_arg!(
        zt.frames() == ts.frames() && zt.count() == ts.count(),
        "features are {}x{} (frames x trajectories), trajectories {}x{}",
        zt.frames(),
        zt.count(),
        ts.frames(),
        ts.count()
    );
    ensure_arg!(height > 0 && width > 0, "grid must be non-empty");
    let cells = resolve_cells(ts, width, height)?;
    let (frames, count, c) = (ts.frames(), ts.count(), zt.tokens.channels);
    let plane = height * width;

    let per_frame: Vec<(Vec<T>, Vec<u32>)> = (0..frames)
        .into_par_iter()
        .map(|f| {
            // -0.0 is the additive identity, so a single contribution is copied bit-exactly
            let mut sums = vec![-0.0f64; plane * c];
            let mut counts = vec![0u32; plane];
            for l in 0..count {
                if let Some((x, y)) = cells[f * count + l] {
                    let cell = y * width + x;
                    counts[cell] += 1;
                    for (s, v) in sums[cell * c..(cell + 1) * c]
                        .iter_mut()
                        .zip(zt.tokens.row(f, l))
                    {
                        *s += v.to_f64();
                    }
                }
            }
            let values = sums
                .iter()
                .enumerate()
                .map(|(i, s)| match counts[i / c] {
                    0 => T::default(),
                    u => T::from_f64(s / u as f64),
                })
                .collect();
            (values, counts)
        })
        .collect();

    let mut data = Vec::with_capacity(frames * plane * c);
    let mut counts = Vec::with_capacity(frames * plane);
    for (v, u) in per_frame {
        data.extend(v);
        counts.extend(u);
    }
    Ok(BackProjection {
        values: FeatureVolume::new(frames, height, width, c, data)?,
        counts,
    })
}

/// Trajectory attention: sample, attend along frames with trajectory
/// masking, project out, scatter back.
pub fn trajectory_branch<T: Scalar>(
    z: &FeatureVolume<T>,
    ts: &TrajectorySet,
    w: &AttentionWeights<T>,
) -> Result<FeatureVolume<T>> {
    check_weights(z, w)?;
    let zt = sample_along_trajectories(z, ts)?;
    let mut out = attention_block(&zt.tokens, w, Some(&zt.mask))?;
    let c = out.channels;
    for (row, &valid) in out.data.chunks_mut(c).zip(&zt.mask) {
        if !valid {
            row.fill(T::default());
        }
    }
    let projected = TrajFeatures {
        tokens: out,
        mask: zt.mask,
    };
    Ok(back_project(&projected, ts, z.height(), z.width())?.values)
}

/// Residual fusion of the temporal and trajectory branches.
pub fn fuse<T: Scalar>(
    temporal_out: &FeatureVolume<T>,
    branch_out: &FeatureVolume<T>,
) -> Result<FeatureVolume<T>> {
    ensure_arg!(
        temporal_out.shape() == branch_out.shape(),
        "cannot fuse shapes {:?} and {:?}",
        temporal_out.shape(),
        branch_out.shape()
    );
    let mut out = temporal_out.clone();
    for (o, b) in out.data_mut().iter_mut().zip(branch_out.data()) {
        let b = b.to_f64();
        // skipping zeros keeps the sign bit of a -0.0 temporal output
        if b != 0.0 {
            *o = T::from_f64(o.to_f64() + b);
        }
    }
    Ok(out)
}

/// Branch weights inheriting the temporal QKV projectors with a zeroed
/// output projector.
pub fn init_branch_from_temporal<T: Scalar>(
    w_temporal: &AttentionWeights<T>,
) -> AttentionWeights<T> {
    let mut w = w_temporal.clone();
    w.wo = SquareMatrix::zeros(w_temporal.channels());
    w
}

/// Mean squared error between the denoiser output and the clean latents.
pub fn denoising_loss<T: Scalar>(
    pred: &FeatureVolume<T>,
    batch: &DenoisingBatch<T>,
) -> Result<f64> {
    ensure_arg!(
        pred.shape() == batch.x0.shape(),
        "prediction shape {:?} differs from target {:?}",
        pred.shape(),
        batch.x0.shape()
    );
    let sum: f64 = pred
        .data()
        .iter()
        .zip(batch.x0.data())
        .map(|(p, x)| {
            let d = p.to_f64() - x.to_f64();
            d * d
        })
        .sum();
    Ok(sum / pred.len() as f64)
}
