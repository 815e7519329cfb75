//! Detection-like surrogate task. Each image has a latent scene type that
//! shifts its feature rows, and a set of queries with latent instance types.
//! A query's target comes from its type's fixed map plus a per-scene offset,
//! so both routing levels carry useful signal.

mod optim;
mod train;

pub use optim::{clip_global_norm, Optimizer, OptimizerKind};
pub use train::{
    evaluate, train, EvalOutcome, MetricLog, MetricRecord, TrainOutcome, TrainerConfig, EVAL_BATCH_OFFSET,
    METRIC_COLUMNS,
};
pub(crate) use train::objective;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{activation, Matrix, Vector};
use crate::rng;
use crate::routing::MoEConfig;

pub const DEFAULT_TYPE_LABELS: [&str; 4] = ["small", "occluded", "tail", "easy"];

/// Generator settings (`data.*` keys).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_scenes: usize,
    pub n_types: usize,
    /// Feature rows per image.
    pub tokens_per_scene: usize,
    pub queries_per_scene: usize,
    /// Distance between scene-type centers in feature space.
    pub scene_margin: f64,
    pub scene_noise: f64,
    /// Distance between instance-type centers in query space.
    pub type_margin: f64,
    pub query_noise: f64,
    /// Scale of the `tanh` part of each target map.
    pub nonlinear_gain: f64,
    /// Norm of the per-scene target offset.
    pub scene_offset: f64,
    pub target_noise: f64,
    /// Sampling weights over scene types; uniform when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene_weights: Option<Vec<f64>>,
    /// Sampling weights over instance types; uniform when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub type_weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub type_labels: Option<Vec<String>>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_scenes: 4,
            n_types: 4,
            tokens_per_scene: 8,
            queries_per_scene: 16,
            scene_margin: 4.0,
            scene_noise: 1.0,
            type_margin: 3.0,
            query_noise: 0.5,
            nonlinear_gain: 0.5,
            scene_offset: 1.0,
            target_noise: 0.0,
            scene_weights: None,
            type_weights: None,
            type_labels: None,
        }
    }
}

impl SyntheticConfig {
    /// Heavily unbalanced scene and instance frequencies; without a balancing
    /// term, routing tends to pile onto the experts serving the common cases.
    pub fn skewed() -> Self {
        SyntheticConfig {
            scene_weights: Some(vec![0.7, 0.1, 0.1, 0.1]),
            type_weights: Some(vec![0.7, 0.1, 0.1, 0.1]),
            ..SyntheticConfig::default()
        }
    }

    pub fn type_names(&self) -> Vec<String> {
        match &self.type_labels {
            Some(l) => l.clone(),
            None if self.n_types <= DEFAULT_TYPE_LABELS.len() => {
                DEFAULT_TYPE_LABELS[..self.n_types].iter().map(|s| s.to_string()).collect()
            }
            None => (0..self.n_types).map(|t| format!("type{t}")).collect(),
        }
    }

    pub fn validate(&self, moe: &MoEConfig) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        for (key, v) in [
            ("data.n_scenes", self.n_scenes),
            ("data.n_types", self.n_types),
            ("data.tokens_per_scene", self.tokens_per_scene),
            ("data.queries_per_scene", self.queries_per_scene),
        ] {
            if v == 0 {
                return err(format!("{key} must be at least 1"));
            }
        }
        if self.n_scenes > moe.d_scene {
            return err(format!(
                "data.n_scenes ({}) must not exceed moe.d_scene ({})",
                self.n_scenes, moe.d_scene
            ));
        }
        if self.n_types > moe.d_model {
            return err(format!(
                "data.n_types ({}) must not exceed moe.d_model ({})",
                self.n_types, moe.d_model
            ));
        }
        for (key, v) in [
            ("data.scene_margin", self.scene_margin),
            ("data.scene_noise", self.scene_noise),
            ("data.type_margin", self.type_margin),
            ("data.query_noise", self.query_noise),
            ("data.nonlinear_gain", self.nonlinear_gain),
            ("data.scene_offset", self.scene_offset),
            ("data.target_noise", self.target_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return err(format!("{key} must be a finite value >= 0, got {v}"));
            }
        }
        for (key, w, n) in [
            ("data.scene_weights", &self.scene_weights, self.n_scenes),
            ("data.type_weights", &self.type_weights, self.n_types),
        ] {
            if let Some(w) = w {
                if w.len() != n || w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                    return err(format!("{key} must list {n} non-negative weights with a positive sum"));
                }
            }
        }
        if let Some(l) = &self.type_labels {
            if l.len() != self.n_types {
                return err(format!("data.type_labels must have {} entries", self.n_types));
            }
        }
        Ok(())
    }
}

/// One image of the surrogate task.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBatch {
    pub index: u64,
    /// `tokens_per_scene x d_scene` feature rows.
    pub features: Matrix,
    pub queries: Vec<Vector>,
    pub targets: Vec<Vector>,
    pub scene_type: usize,
    pub instance_types: Vec<usize>,
}

/// `y = A q + gain * tanh(B q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMap {
    pub a: Matrix,
    pub b: Matrix,
}

/// Fixed ground truth of one task instance, derived from the run seed.
#[derive(Clone, Debug)]
pub struct TaskWorld {
    cfg: SyntheticConfig,
    seed: u64,
    d_model: usize,
    d_scene: usize,
    scene_centers: Vec<Vec<f64>>,
    type_centers: Vec<Vec<f64>>,
    maps: Vec<TargetMap>,
    offsets: Vec<Vec<f64>>,
    scene_dist: WeightedIndex<f64>,
    type_dist: WeightedIndex<f64>,
}

fn gaussian(r: &mut impl Rng) -> f64 {
    r.sample(StandardNormal)
}

/// `n` orthonormal vectors in `R^d` (Gram-Schmidt on Gaussian draws).
fn orthonormal(r: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(r)).collect();
        for u in &out {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

fn weighted(w: &Option<Vec<f64>>, n: usize) -> Result<WeightedIndex<f64>> {
    let w = w.clone().unwrap_or_else(|| vec![1.0; n]);
    WeightedIndex::new(w).map_err(|e| Error::Config(format!("sampling weights: {e}")))
}

impl TaskWorld {
    pub fn new(cfg: &SyntheticConfig, moe: &MoEConfig, seed: u64) -> Result<Self> {
        cfg.validate(moe)?;
        let (d, dg) = (moe.d_model, moe.d_scene);
        let half = std::f64::consts::FRAC_1_SQRT_2;
        let scene_centers = (0..cfg.n_scenes)
            .map(|s| {
                let mut c = vec![0.0; dg];
                c[s] = cfg.scene_margin * half;
                c
            })
            .collect();
        let mut r = rng::stream(seed, "world.types", 0);
        let type_centers = orthonormal(&mut r, cfg.n_types, d)
            .into_iter()
            .map(|u| u.into_iter().map(|x| x * cfg.type_margin * half).collect())
            .collect();
        let maps = (0..cfg.n_types)
            .map(|t| {
                let mut r = rng::stream(seed, "world.maps", t as u64);
                let a = Matrix::from_rows(&orthonormal(&mut r, d, d)).expect("square");
                let scale = 1.0 / (d as f64).sqrt();
                let b = Matrix::from_vec(d, d, (0..d * d).map(|_| scale * gaussian(&mut r)).collect())
                    .expect("square");
                TargetMap { a, b }
            })
            .collect();
        let mut r = rng::stream(seed, "world.offsets", 0);
        let offsets = (0..cfg.n_scenes)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| gaussian(&mut r)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x * cfg.scene_offset / norm).collect()
            })
            .collect();
        Ok(TaskWorld {
            cfg: cfg.clone(),
            seed,
            d_model: d,
            d_scene: dg,
            scene_centers,
            type_centers,
            maps,
            offsets,
            scene_dist: weighted(&cfg.scene_weights, cfg.n_scenes)?,
            type_dist: weighted(&cfg.type_weights, cfg.n_types)?,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    pub fn scene_center(&self, s: usize) -> &[f64] {
        &self.scene_centers[s]
    }

    pub fn type_center(&self, t: usize) -> &[f64] {
        &self.type_centers[t]
    }

    pub fn target_map(&self, t: usize) -> &TargetMap {
        &self.maps[t]
    }

    pub fn scene_offset(&self, s: usize) -> &[f64] {
        &self.offsets[s]
    }

    /// Noise-free target of query `q` with instance type `t` in scene `s`.
    pub fn target(&self, q: &[f64], t: usize, s: usize) -> Vec<f64> {
        let m = &self.maps[t];
        let d = self.d_model;
        (0..d)
            .map(|i| {
                let a: f64 = m.a.row(i).iter().zip(q).map(|(w, x)| w * x).sum();
                let b: f64 = m.b.row(i).iter().zip(q).map(|(w, x)| w * x).sum();
                a + self.cfg.nonlinear_gain * activation(b) + self.offsets[s][i]
            })
            .collect()
    }

    fn sample_query(&self, r: &mut impl Rng, t: usize) -> Vec<f64> {
        self.type_centers[t]
            .iter()
            .map(|c| c + self.cfg.query_noise * gaussian(r))
            .collect()
    }

    /// Image `index`; identical for identical `(seed, index)`.
    pub fn generate_batch(&self, index: u64) -> SyntheticBatch {
        let mut r = rng::stream(self.seed, "batch", index);
        let scene_type = self.scene_dist.sample(&mut r);
        let center = &self.scene_centers[scene_type];
        let n_tok = self.cfg.tokens_per_scene;
        let features = Matrix::from_vec(
            n_tok,
            self.d_scene,
            (0..n_tok * self.d_scene)
                .map(|j| center[j % self.d_scene] + self.cfg.scene_noise * gaussian(&mut r))
                .collect(),
        )
        .expect("consistent shape");
        let mut queries = Vec::with_capacity(self.cfg.queries_per_scene);
        let mut targets = Vec::with_capacity(self.cfg.queries_per_scene);
        let mut instance_types = Vec::with_capacity(self.cfg.queries_per_scene);
        for _ in 0..self.cfg.queries_per_scene {
            let t = self.type_dist.sample(&mut r);
            let q = self.sample_query(&mut r, t);
            let mut y = self.target(&q, t, scene_type);
            if self.cfg.target_noise > 0.0 {
                for v in &mut y {
                    *v += self.cfg.target_noise * gaussian(&mut r);
                }
            }
            queries.push(Vector(q));
            targets.push(Vector(y));
            instance_types.push(t);
        }
        SyntheticBatch {
            index,
            features,
            queries,
            targets,
            scene_type,
            instance_types,
        }
    }

    /// Shared diversity probes for one training step, drawn from the query distribution.
    pub fn probes(&self, step: u64, m: usize) -> Vec<Vector> {
        let mut r = rng::stream(self.seed, "probes", step);
        (0..m)
            .map(|_| {
                let t = self.type_dist.sample(&mut r);
                Vector(self.sample_query(&mut r, t))
            })
            .collect()
    }
}

/// One image from a freshly built world.
pub fn generate_batch(cfg: &SyntheticConfig, moe: &MoEConfig, seed: u64, index: u64) -> Result<SyntheticBatch> {
    Ok(TaskWorld::new(cfg, moe, seed)?.generate_batch(index))
}

#[cfg(test)]
mod tests;
