use serde::Serialize;

use super::ops::AttentionMaps;
use crate::error::{Error, Result};

/// Tolerance on attention row sums.
pub const ROW_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionStats {
    /// Mean weight at each frame offset `|i − j|`, index = offset.
    pub offset_profile: Vec<f64>,
    /// Column-averaged `F × F` map, min-max normalized to `[0, 1]`.
    /// A constant map normalizes to all zeros.
    pub normalized_map: Vec<f64>,
}

/// Summarizes softmax maps by frame offset and as a normalized mean map.
pub fn attention_stats(maps: &AttentionMaps) -> Result<AttentionStats> {
    let f = maps.frames;
    if f == 0 || maps.columns == 0 {
        return Err(Error::invalid("attention maps are empty"));
    }
    let mut mean = vec![0.0f64; f * f];
    for col in 0..maps.columns {
        let m = maps.map(col);
        for i in 0..f {
            let row = &m[i * f..(i + 1) * f];
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!(
                    "row {i} of map {col} sums to {s}, expected 1"
                )));
            }
            for (acc, v) in mean[i * f..(i + 1) * f].iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    for v in &mut mean {
        *v /= maps.columns as f64;
    }

    let mut sums = vec![0.0f64; f];
    let mut counts = vec![0usize; f];
    for i in 0..f {
        for j in 0..f {
            let d = i.abs_diff(j);
            sums[d] += mean[i * f + j];
            counts[d] += 1;
        }
    }
    let offset_profile = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s / n as f64)
        .collect();

    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalized_map = mean
        .iter()
        .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
        .collect();
    Ok(AttentionStats {
        offset_profile,
        normalized_map,
    })
}
