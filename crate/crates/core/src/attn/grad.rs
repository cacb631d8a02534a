//! Analytic gradients of the differentiable attention operators.
//!
//! Every function takes the forward inputs plus the upstream gradient of the
//! operator's output and returns gradients for the inputs (and weights where
//! the operator has any).

use super::ops::{check_attention_inputs, column_probs, resolve_cells};
use super::tensor::{
    BackProjection, Channels, DenoisingBatch, FeatureVolume, Scalar, SquareMatrix, TokenTensor,
    TrajFeatures,
};
use crate::error::{ensure_arg, Result};
use crate::traj::TrajectorySet;

/// Gradients of `y = W·x` row-wise: `(∂x, ∂W)`.
pub fn linear_project_backward<T: Scalar, X: Channels<T>>(
    x: &X,
    w: &SquareMatrix<T>,
    grad_out: &X,
) -> Result<(X, SquareMatrix<T>)> {
    let c = x.channels();
    ensure_arg!(
        w.dim() == c,
        "projector/channel mismatch: {} vs {c}",
        w.dim()
    );
    ensure_arg!(
        grad_out.data().len() == x.data().len(),
        "upstream gradient has {} values, input {}",
        grad_out.data().len(),
        x.data().len()
    );
    let mut gx = x.clone();
    let mut gw = vec![0.0f64; c * c];
    for ((gx_row, x_row), g_row) in gx
        .data_mut()
        .chunks_mut(c)
        .zip(x.data().chunks(c))
        .zip(grad_out.data().chunks(c))
    {
        for (j, gxj) in gx_row.iter_mut().enumerate() {
            let acc: f64 = (0..c)
                .map(|i| w.get(i, j).to_f64() * g_row[i].to_f64())
                .sum();
            *gxj = T::from_f64(acc);
        }
        for i in 0..c {
            let gi = g_row[i].to_f64();
            for j in 0..c {
                gw[i * c + j] += gi * x_row[j].to_f64();
            }
        }
    }
    let gw = SquareMatrix::new(c, gw.into_iter().map(T::from_f64).collect())?;
    Ok((gx, gw))
}

/// Gradients of [`frame_attention`](super::frame_attention) with respect to
/// `q`, `k` and `v`. Masked keys receive zero gradient.
pub fn frame_attention_backward<T: Scalar>(
    q: &TokenTensor<T>,
    k: &TokenTensor<T>,
    v: &TokenTensor<T>,
    heads: usize,
    key_mask: Option<&[bool]>,
    grad_out: &TokenTensor<T>,
) -> Result<(TokenTensor<T>, TokenTensor<T>, TokenTensor<T>)> {
    let g = check_attention_inputs(q, k, v, heads, key_mask)?;
    ensure_arg!(
        grad_out.shape() == q.shape(),
        "upstream gradient shape {:?} differs from {:?}",
        grad_out.shape(),
        q.shape()
    );
    let (f, c, hd) = (g.frames, g.channels, g.head_dim);
    let n_total = g.frames * g.tokens * c;
    let mut dq = vec![0.0f64; n_total];
    let mut dk = vec![0.0f64; n_total];
    let mut dv = vec![0.0f64; n_total];
    let at = |f_: usize, n: usize| (f_ * g.tokens + n) * c;

    for n in 0..g.tokens {
        for h in 0..g.heads {
            let p = column_probs(&g, q, k, key_mask, n, h)?;
            let lo = h * hd;
            // dP[i][j] = dO_i · v_j
            let mut dp = vec![0.0f64; f * f];
            for i in 0..f {
                let go = &grad_out.row(i, n)[lo..lo + hd];
                for j in 0..f {
                    let vj = &v.row(j, n)[lo..lo + hd];
                    dp[i * f + j] = go
                        .iter()
                        .zip(vj)
                        .map(|(a, b)| a.to_f64() * b.to_f64())
                        .sum();
                }
            }
            for i in 0..f {
                let row = &p[i * f..(i + 1) * f];
                let dot: f64 = row
                    .iter()
                    .zip(&dp[i * f..(i + 1) * f])
                    .map(|(a, b)| a * b)
                    .sum();
                let go = &grad_out.row(i, n)[lo..lo + hd];
                for j in 0..f {
                    let pij = row[j];
                    if pij == 0.0 {
                        continue;
                    }
                    // dV_j += P_ij dO_i
                    for d in 0..hd {
                        dv[at(j, n) + lo + d] += pij * go[d].to_f64();
                    }
                    let ds = pij * (dp[i * f + j] - dot) * g.scale;
                    let qi = &q.row(i, n)[lo..lo + hd];
                    let kj = &k.row(j, n)[lo..lo + hd];
                    for d in 0..hd {
                        dq[at(i, n) + lo + d] += ds * kj[d].to_f64();
                        dk[at(j, n) + lo + d] += ds * qi[d].to_f64();
                    }
                }
            }
        }
    }
    let wrap = |d: Vec<f64>| {
        TokenTensor::new(
            g.frames,
            g.tokens,
            c,
            d.into_iter().map(T::from_f64).collect(),
        )
    };
    Ok((wrap(dq)?, wrap(dk)?, wrap(dv)?))
}

/// Gradient of trajectory sampling with respect to `Z`: a scatter-add of
/// the valid rows of `grad_zt` into their cells.
pub fn sample_backward<T: Scalar>(
    grad_zt: &TrajFeatures<T>,
    ts: &TrajectorySet,
    height: usize,
    width: usize,
) -> Result<FeatureVolume<T>> {
    ensure_arg!(
        grad_zt.frames() == ts.frames() && grad_zt.count() == ts.count(),
        "gradient shape does not match trajectories"
    );
    let cells = resolve_cells(ts, width, height)?;
    let (frames, count, c) = (ts.frames(), ts.count(), grad_zt.tokens.channels);
    let mut acc = vec![0.0f64; frames * height * width * c];
    for f in 0..frames {
        for l in 0..count {
            if let Some((x, y)) = cells[f * count + l] {
                let o = ((f * height + y) * width + x) * c;
                for (a, g) in acc[o..o + c].iter_mut().zip(grad_zt.tokens.row(f, l)) {
                    *a += g.to_f64();
                }
            }
        }
    }
    FeatureVolume::new(
        frames,
        height,
        width,
        c,
        acc.into_iter().map(T::from_f64).collect(),
    )
}

/// Gradient of back projection with respect to the trajectory features:
/// gather the upstream gradient at each valid cell and divide by its count.
pub fn back_project_backward<T: Scalar>(
    grad_values: &FeatureVolume<T>,
    ts: &TrajectorySet,
    forward: &BackProjection<T>,
) -> Result<TrajFeatures<T>> {
    let (frames, height, width, c) = grad_values.shape();
    ensure_arg!(
        forward.values.shape() == grad_values.shape() && frames == ts.frames(),
        "gradient shape {:?} does not match forward output {:?}",
        grad_values.shape(),
        forward.values.shape()
    );
    let cells = resolve_cells(ts, width, height)?;
    let count = ts.count();
    let mut out = TokenTensor::zeros(frames, count, c);
    for f in 0..frames {
        for l in 0..count {
            if let Some((x, y)) = cells[f * count + l] {
                let u = forward.counts[(f * height + y) * width + x] as f64;
                let o = out.offset(f, l);
                for (dst, g) in out.data[o..o + c]
                    .iter_mut()
                    .zip(grad_values.pixel(f, y, x))
                {
                    *dst = T::from_f64(g.to_f64() / u);
                }
            }
        }
    }
    Ok(TrajFeatures {
        tokens: out,
        mask: ts.mask().to_vec(),
    })
}

/// Both summands of a fusion receive the upstream gradient unchanged.
pub fn fuse_backward<T: Scalar>(
    grad_out: &FeatureVolume<T>,
) -> (FeatureVolume<T>, FeatureVolume<T>) {
    (grad_out.clone(), grad_out.clone())
}

/// Gradient of the mean squared denoising loss with respect to the
/// prediction, scaled by the upstream scalar gradient.
pub fn denoising_loss_backward<T: Scalar>(
    pred: &FeatureVolume<T>,
    batch: &DenoisingBatch<T>,
    upstream: f64,
) -> Result<FeatureVolume<T>> {
    ensure_arg!(
        pred.shape() == batch.x0.shape(),
        "prediction shape {:?} differs from target {:?}",
        pred.shape(),
        batch.x0.shape()
    );
    let n = pred.len() as f64;
    let mut out = pred.clone();
    for (o, x) in out.data_mut().iter_mut().zip(batch.x0.data()) {
        *o = T::from_f64(upstream * 2.0 * (o.to_f64() - x.to_f64()) / n);
    }
    Ok(out)
}
