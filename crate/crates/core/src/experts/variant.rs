use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{expert_forward_t, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::{topk, Matrix, Tape, Vector};
use crate::routing::{
    himoe_scene_t, instance_route_t, mix_experts, pool_scene, scene_route_t, select_in_pool, MoEConfig,
    RoutingTrace, SceneForward, TraceRecord,
};

/// Which routing scheme drives the expert bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantPolicy {
    /// One FFN for every query.
    Dense,
    /// Flat top-K over all experts for every feature token; queries use the
    /// top-K of the token-averaged weights.
    TokenMoe,
    /// Instance router over the full bank with a zeroed scene block.
    InstanceOnly,
    /// Scene router only: one pool-restricted weighting shared by every query.
    SceneOnly,
    /// Scene routing to a pool, then per-query top-K inside it.
    Hierarchical,
}

impl VariantPolicy {
    pub const ALL: [VariantPolicy; 5] = [
        VariantPolicy::Dense,
        VariantPolicy::TokenMoe,
        VariantPolicy::InstanceOnly,
        VariantPolicy::SceneOnly,
        VariantPolicy::Hierarchical,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantPolicy::Dense => "dense",
            VariantPolicy::TokenMoe => "token_moe",
            VariantPolicy::InstanceOnly => "instance_only",
            VariantPolicy::SceneOnly => "scene_only",
            VariantPolicy::Hierarchical => "hierarchical",
        }
    }

    pub fn is_routed(self) -> bool {
        self != VariantPolicy::Dense
    }
}

impl fmt::Display for VariantPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        VariantPolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown routing policy `{s}`")))
    }
}

/// One image: encoder-like feature rows plus its object queries.
#[derive(Clone, Copy, Debug)]
pub struct SceneInput<'a> {
    pub features: &'a Matrix,
    pub queries: &'a [Vector],
}

/// Evaluates one scene under `policy`. Records are tagged with `batch = 0`.
pub fn variant_forward(
    policy: VariantPolicy,
    input: SceneInput<'_>,
    params: &ModelParams,
    cfg: &MoEConfig,
) -> Result<(Vec<Vector>, RoutingTrace)> {
    cfg.validate()?;
    if params.policy() != policy {
        return Err(Error::Config(format!(
            "parameters were built for `{}` but `{policy}` was requested",
            params.policy()
        )));
    }
    if params.cfg() != cfg {
        return Err(Error::Config("parameters were built for a different moe config".into()));
    }
    let mut tape = Tape::new();
    let out = forward_scene_t(&mut tape, params, input, 0)?;
    let ys = out.outputs.iter().map(|v| Vector(tape.value(*v).to_vec())).collect();
    let mut trace = RoutingTrace::new(cfg.n_experts);
    for r in out.records {
        trace.push(r)?;
    }
    Ok((ys, trace))
}

pub(crate) fn forward_scene_t(
    tape: &mut Tape,
    params: &ModelParams,
    input: SceneInput<'_>,
    batch: u64,
) -> Result<SceneForward> {
    let cfg = params.cfg();
    let binder = params.binder();
    let routes = cfg.route_map();
    if input.queries.is_empty() {
        return Err(Error::Input("no queries to route".into()));
    }
    if input.features.cols() != cfg.d_scene {
        return Err(Error::dim(
            "variant_forward",
            format!("feature rows of length {}", cfg.d_scene),
            input.features.cols(),
        ));
    }
    for q in input.queries {
        if q.len() != cfg.d_model {
            return Err(Error::dim("variant_forward", format!("query of length {}", cfg.d_model), q.len()));
        }
    }
    let mut out = SceneForward {
        outputs: Vec::with_capacity(input.queries.len()),
        records: Vec::new(),
        soft: Vec::new(),
    };
    let all: Vec<usize> = (0..cfg.n_experts).collect();

    match params.policy() {
        VariantPolicy::Dense => {
            let ffn = binder.dense(tape)?.ok_or_else(|| Error::Config("dense policy without a dense FFN".into()))?;
            for q in input.queries {
                let qv = tape.constant(q.0.clone());
                out.outputs.push(expert_forward_t(tape, &ffn, qv)?);
            }
        }
        VariantPolicy::Hierarchical => {
            let router = binder.router(tape)?;
            return himoe_scene_t(tape, input.features, input.queries, &router, &binder, cfg, &routes, batch);
        }
        VariantPolicy::InstanceOnly => {
            let gate = binder
                .router(tape)?
                .instance
                .ok_or_else(|| Error::Config("instance_only policy without an instance router".into()))?;
            let g = tape.constant(vec![0.0; cfg.n_scene_routes]);
            for (i, q) in input.queries.iter().enumerate() {
                let qv = tape.constant(q.0.clone());
                let a = instance_route_t(tape, qv, g, &all, gate, cfg)?;
                out.outputs.push(mix_experts(tape, &binder, qv, &a.assignment.selected, a.weights)?);
                out.soft.push(a.masked);
                out.records.push(TraceRecord {
                    batch,
                    query: i,
                    routes: Vec::new(),
                    pool: all.clone(),
                    experts: a.assignment.selected,
                    weights: a.assignment.weights,
                    e_full: a.assignment.e.into_vec(),
                    g: vec![0.0; cfg.n_scene_routes],
                    scene: None,
                    itype: None,
                    loss: None,
                });
            }
        }
        VariantPolicy::SceneOnly => {
            let gate = binder
                .router(tape)?
                .scene
                .ok_or_else(|| Error::Config("scene_only policy without a scene router".into()))?;
            let x = tape.constant(pool_scene(input.features)?.0);
            let scene = scene_route_t(tape, x, gate, cfg, &routes)?;
            let projection = route_projection(&routes, &scene.pool.selected_routes, cfg);
            let raw = tape.const_matvec(&projection, scene.g)?;
            let ghat = tape.normalize(raw)?;
            let pool = scene.pool.expert_pool.clone();
            let weights = tape.gather(ghat, &pool)?;
            let w_values = tape.value(weights).to_vec();
            let e_full = tape.value(ghat).to_vec();
            for (i, q) in input.queries.iter().enumerate() {
                let qv = tape.constant(q.0.clone());
                out.outputs.push(mix_experts(tape, &binder, qv, &pool, weights)?);
                out.soft.push(ghat);
                out.records.push(TraceRecord {
                    batch,
                    query: i,
                    routes: scene.pool.selected_routes.clone(),
                    pool: pool.clone(),
                    experts: pool.clone(),
                    weights: w_values.clone(),
                    e_full: e_full.clone(),
                    g: scene.pool.g.as_slice().to_vec(),
                    scene: None,
                    itype: None,
                    loss: None,
                });
            }
        }
        VariantPolicy::TokenMoe => {
            let gate = binder
                .token_gate(tape)?
                .ok_or_else(|| Error::Config("token_moe policy without a token router".into()))?;
            let mut spread = Vec::with_capacity(input.features.rows());
            for t in 0..input.features.rows() {
                let hv = tape.constant(input.features.row(t).to_vec());
                let logits = tape.linear(gate.w, hv, gate.b)?;
                let e = tape.softmax_temp(logits, cfg.tau_query)?;
                let a = select_in_pool(tape, e, &all, cfg.top_k)?;
                spread.push(tape.scatter(a.weights, &a.assignment.selected, cfg.n_experts)?);
                out.soft.push(e);
                out.records.push(TraceRecord {
                    batch,
                    query: t,
                    routes: Vec::new(),
                    pool: all.clone(),
                    experts: a.assignment.selected,
                    weights: a.assignment.weights,
                    e_full: a.assignment.e.into_vec(),
                    g: vec![0.0; cfg.n_scene_routes],
                    scene: None,
                    itype: None,
                    loss: None,
                });
            }
            let mean = tape.mean(&spread)?;
            let chosen = topk(tape.value(mean), cfg.top_k)?;
            let picked = tape.gather(mean, &chosen)?;
            let weights = tape.normalize(picked)?;
            for q in input.queries {
                let qv = tape.constant(q.0.clone());
                out.outputs.push(mix_experts(tape, &binder, qv, &chosen, weights)?);
            }
        }
    }
    Ok(out)
}

/// `N_e x N_s` map from scene-route probabilities to expert weights: each
/// selected route spreads its probability evenly over its experts.
fn route_projection(routes: &[Vec<usize>], selected: &[usize], cfg: &MoEConfig) -> Matrix {
    let mut m = Matrix::zeros(cfg.n_experts, cfg.n_scene_routes);
    for &r in selected {
        let share = 1.0 / routes[r].len() as f64;
        for &k in &routes[r] {
            m.set(k, r, m.get(k, r) + share);
        }
    }
    m
}

#[cfg(test)]
mod tests;
