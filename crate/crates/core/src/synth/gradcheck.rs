//! Central finite-difference oracle for the analytic backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::random_trajectories;
use crate::attn::grad::{
    back_project_backward, denoising_loss_backward, frame_attention_backward, fuse_backward,
    linear_project_backward, sample_backward,
};
use crate::attn::{
    back_project, denoising_loss, frame_attention, fuse, linear_project, sample_along_trajectories,
    DenoisingBatch, FeatureVolume, SquareMatrix, TokenTensor, TrajFeatures,
};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-6;

/// Instance shape `(F, H, W, C)` used by the checks.
pub const CHECK_SHAPE: (usize, usize, usize, usize) = (2, 3, 3, 4);
const CHECK_HEADS: usize = 2;

/// Central differences of `f` at `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, or 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub op: String,
    pub rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_error <= GRAD_TOL
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn volume(shape: (usize, usize, usize, usize), data: Vec<f64>) -> FeatureVolume<f64> {
    FeatureVolume::new(shape.0, shape.1, shape.2, shape.3, data).expect("finite data")
}

/// Checks every backward op against central differences on random
/// 64-bit instances.
pub fn run_gradient_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = CHECK_SHAPE;
    let (f, h, w, c) = shape;
    let n = f * h * w * c;
    let mut checks = Vec::new();
    let mut push = |op: &str, a: &[f64], num: &[f64]| {
        checks.push(GradCheck {
            op: op.to_string(),
            rel_error: relative_error(a, num),
        })
    };

    // linear_project
    {
        let x = random_vec(&mut rng, n);
        let wv = random_vec(&mut rng, c * c);
        let g = random_vec(&mut rng, n);
        let loss = |xd: &[f64], wd: &[f64]| {
            let out = linear_project(
                &volume(shape, xd.to_vec()),
                &SquareMatrix::new(c, wd.to_vec()).unwrap(),
            )
            .unwrap();
            dot(out.data(), &g)
        };
        let (gx, gw) = linear_project_backward(
            &volume(shape, x.clone()),
            &SquareMatrix::new(c, wv.clone())?,
            &volume(shape, g.clone()),
        )?;
        push(
            "linear_project.x",
            gx.data(),
            &central_difference(|p| loss(p, &wv), &x, FD_STEP),
        );
        push(
            "linear_project.w",
            gw.data(),
            &central_difference(|p| loss(&x, p), &wv, FD_STEP),
        );
    }

    // frame_attention
    {
        let tokens = h * w;
        let q = random_vec(&mut rng, n);
        let k = random_vec(&mut rng, n);
        let v = random_vec(&mut rng, n);
        let mask: Vec<bool> = (0..f * tokens).map(|_| rng.gen_bool(0.75)).collect();
        let g = random_vec(&mut rng, n);
        let t = |d: &[f64]| TokenTensor::new(f, tokens, c, d.to_vec()).unwrap();
        let loss = |qd: &[f64], kd: &[f64], vd: &[f64]| {
            let out = frame_attention(&t(qd), &t(kd), &t(vd), CHECK_HEADS, Some(&mask)).unwrap();
            dot(&out.data, &g)
        };
        let (dq, dk, dv) =
            frame_attention_backward(&t(&q), &t(&k), &t(&v), CHECK_HEADS, Some(&mask), &t(&g))?;
        push(
            "frame_attention.q",
            &dq.data,
            &central_difference(|p| loss(p, &k, &v), &q, FD_STEP),
        );
        push(
            "frame_attention.k",
            &dk.data,
            &central_difference(|p| loss(&q, p, &v), &k, FD_STEP),
        );
        push(
            "frame_attention.v",
            &dv.data,
            &central_difference(|p| loss(&q, &k, p), &v, FD_STEP),
        );
    }

    // sample_along_trajectories and back_project
    {
        let l = 7;
        let ts = random_trajectories(&mut rng, l, f, h, w);
        let z = random_vec(&mut rng, n);
        let g = random_vec(&mut rng, f * l * c);
        let loss = |zd: &[f64]| {
            dot(
                &sample_along_trajectories(&volume(shape, zd.to_vec()), &ts)
                    .unwrap()
                    .tokens
                    .data,
                &g,
            )
        };
        let grad_zt = TrajFeatures {
            tokens: TokenTensor::new(f, l, c, g.clone())?,
            mask: ts.mask().to_vec(),
        };
        let gz = sample_backward(&grad_zt, &ts, h, w)?;
        push(
            "sample_along_trajectories.z",
            gz.data(),
            &central_difference(loss, &z, FD_STEP),
        );

        let zt = random_vec(&mut rng, f * l * c);
        let gv = random_vec(&mut rng, n);
        let feats = |d: &[f64]| TrajFeatures {
            tokens: TokenTensor::new(f, l, c, d.to_vec()).unwrap(),
            mask: ts.mask().to_vec(),
        };
        let loss = |d: &[f64]| {
            dot(
                back_project(&feats(d), &ts, h, w).unwrap().values.data(),
                &gv,
            )
        };
        let fwd = back_project(&feats(&zt), &ts, h, w)?;
        let gzt = back_project_backward(&volume(shape, gv.clone()), &ts, &fwd)?;
        push(
            "back_project.zt",
            &gzt.tokens.data,
            &central_difference(loss, &zt, FD_STEP),
        );
    }

    // fuse
    {
        let a = random_vec(&mut rng, n);
        let b = random_vec(&mut rng, n);
        let g = random_vec(&mut rng, n);
        let loss = |ad: &[f64], bd: &[f64]| {
            dot(
                fuse(&volume(shape, ad.to_vec()), &volume(shape, bd.to_vec()))
                    .unwrap()
                    .data(),
                &g,
            )
        };
        let (ga, gb) = fuse_backward(&volume(shape, g.clone()));
        push(
            "fuse.temporal",
            ga.data(),
            &central_difference(|p| loss(p, &b), &a, FD_STEP),
        );
        push(
            "fuse.branch",
            gb.data(),
            &central_difference(|p| loss(&a, p), &b, FD_STEP),
        );
    }

    // denoising_loss
    {
        let x0 = random_vec(&mut rng, n);
        let noise = random_vec(&mut rng, n);
        let pred = random_vec(&mut rng, n);
        let batch = DenoisingBatch::new(volume(shape, x0), volume(shape, noise), 0.5, vec![])?;
        let loss = |p: &[f64]| denoising_loss(&volume(shape, p.to_vec()), &batch).unwrap();
        let gp = denoising_loss_backward(&volume(shape, pred.clone()), &batch, 1.0)?;
        push(
            "denoising_loss.pred",
            gp.data(),
            &central_difference(loss, &pred, FD_STEP),
        );
    }

    Ok(checks)
}
