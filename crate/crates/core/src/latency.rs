//! Wall-clock latency of inference batches, measured directly and reported as
//! a median with its interquartile range.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{variant_forward, ModelParams, SceneInput};
use crate::synthetic::{SyntheticBatch, TaskWorld};

pub const DEFAULT_WARMUP: usize = 5;
pub const DEFAULT_TIMED: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub median_s: f64,
    pub q1_s: f64,
    pub q3_s: f64,
    pub iqr_s: f64,
}

/// Linear-interpolated quantile of an ascending slice.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(samples: &[f64]) -> Result<LatencyStats> {
    if samples.is_empty() {
        return Err(Error::Empty("latency samples".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let (q1, q3) = (quantile(&s, 0.25), quantile(&s, 0.75));
    Ok(LatencyStats {
        samples: s.len(),
        median_s: quantile(&s, 0.5),
        q1_s: q1,
        q3_s: q3,
        iqr_s: q3 - q1,
    })
}

/// Times the forward pass over `batch_size` images, `warmup` untimed batches
/// followed by `timed` timed ones.
pub fn measure_latency(
    params: &ModelParams,
    world: &TaskWorld,
    batch_size: usize,
    warmup: usize,
    timed: usize,
) -> Result<LatencyStats> {
    if timed == 0 || batch_size == 0 {
        return Err(Error::Config("latency measurement needs at least one timed batch of one image".into()));
    }
    let batches: Vec<Vec<SyntheticBatch>> = (0..warmup + timed)
        .map(|b| {
            (0..batch_size)
                .map(|i| world.generate_batch((b * batch_size + i) as u64))
                .collect()
        })
        .collect();
    let mut samples = Vec::with_capacity(timed);
    for (b, images) in batches.iter().enumerate() {
        let start = Instant::now();
        for img in images {
            let input = SceneInput {
                features: &img.features,
                queries: &img.queries,
            };
            std::hint::black_box(variant_forward(params.policy(), input, params, params.cfg())?);
        }
        if b >= warmup {
            samples.push(start.elapsed().as_secs_f64());
        }
    }
    summarize(&samples)
}
