//! Two-level routing: a scene router picks the top-`K_s` scene routes from a
//! pooled global descriptor, which fixes a candidate expert pool; each query
//! is then routed to its top-`K` experts inside that pool.
//!
//! Order of operations per query: softmax over all `N_e` instance logits,
//! zero the experts outside the pool, take the top-`K` of the masked vector,
//! renormalize over the selected experts. Nothing is renormalized between the
//! mask and the top-`K`.

mod trace;

pub use trace::{RoutingTrace, TraceRecord};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{expert_forward_t, ExpertBank, ExpertParams, ExpertVars};
use crate::numerics::{topk, Matrix, SimplexVector, Tape, Var, Vector};

/// Route labels used when the config does not name its routes.
pub const DEFAULT_ROUTE_LABELS: [&str; 4] = ["indoor", "outdoor", "crowd", "generalist"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoEConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub n_scene_routes: usize,
    pub scene_top_k: usize,
    pub d_model: usize,
    pub d_scene: usize,
    /// Expert hidden width; `2 * d_model` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_hidden: Option<usize>,
    pub tau_scene: f64,
    pub tau_query: f64,
    /// Expert subset owned by each scene route; an even contiguous partition when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub route_to_experts: Option<Vec<Vec<usize>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub route_labels: Option<Vec<String>>,
}

impl Default for MoEConfig {
    fn default() -> Self {
        MoEConfig {
            n_experts: 8,
            top_k: 2,
            n_scene_routes: 4,
            scene_top_k: 2,
            d_model: 16,
            d_scene: 16,
            d_hidden: None,
            tau_scene: 1.0,
            tau_query: 1.0,
            route_to_experts: None,
            route_labels: None,
        }
    }
}

impl MoEConfig {
    /// The full-detector block shape: 16 experts, top-2, 4 scene routes, top-2 routes.
    pub fn reference_scale() -> Self {
        MoEConfig {
            n_experts: 16,
            top_k: 2,
            n_scene_routes: 4,
            scene_top_k: 2,
            ..MoEConfig::default()
        }
    }

    pub fn hidden(&self) -> usize {
        self.d_hidden.unwrap_or(2 * self.d_model)
    }

    /// Width of the instance-router input `[q; g]`.
    pub fn instance_input(&self) -> usize {
        self.d_model + self.n_scene_routes
    }

    pub fn route_map(&self) -> Vec<Vec<usize>> {
        match &self.route_to_experts {
            Some(m) => m.clone(),
            None => default_partition(self.n_experts, self.n_scene_routes),
        }
    }

    pub fn labels(&self) -> Vec<String> {
        match &self.route_labels {
            Some(l) => l.clone(),
            None if self.n_scene_routes == DEFAULT_ROUTE_LABELS.len() => {
                DEFAULT_ROUTE_LABELS.iter().map(|s| s.to_string()).collect()
            }
            None => (0..self.n_scene_routes).map(|r| format!("route{r}")).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.n_experts == 0 {
            return cfg("moe.n_experts must be at least 1".into());
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return cfg(format!(
                "moe.top_k ({}) must satisfy 1 <= moe.top_k <= moe.n_experts ({})",
                self.top_k, self.n_experts
            ));
        }
        if self.n_scene_routes == 0 {
            return cfg("moe.n_scene_routes must be at least 1".into());
        }
        if self.scene_top_k == 0 || self.scene_top_k > self.n_scene_routes {
            return cfg(format!(
                "moe.scene_top_k ({}) must satisfy 1 <= moe.scene_top_k <= moe.n_scene_routes ({})",
                self.scene_top_k, self.n_scene_routes
            ));
        }
        for (key, v) in [("moe.d_model", self.d_model), ("moe.d_scene", self.d_scene), ("moe.d_hidden", self.hidden())] {
            if v == 0 {
                return cfg(format!("{key} must be at least 1"));
            }
        }
        for (key, v) in [("moe.tau_scene", self.tau_scene), ("moe.tau_query", self.tau_query)] {
            if !v.is_finite() || v <= 0.0 {
                return cfg(format!("{key} must be a positive finite temperature, got {v}"));
            }
        }
        if let Some(labels) = &self.route_labels {
            if labels.len() != self.n_scene_routes {
                return cfg(format!(
                    "moe.route_labels has {} entries but moe.n_scene_routes = {}",
                    labels.len(),
                    self.n_scene_routes
                ));
            }
        }
        let map = self.route_map();
        if map.len() != self.n_scene_routes {
            return cfg(format!(
                "moe.route_to_experts has {} routes but moe.n_scene_routes = {}",
                map.len(),
                self.n_scene_routes
            ));
        }
        let mut covered = vec![false; self.n_experts];
        for (r, experts) in map.iter().enumerate() {
            if experts.is_empty() {
                return cfg(format!("moe.route_to_experts[{r}] is empty"));
            }
            for &k in experts {
                if k >= self.n_experts {
                    return cfg(format!(
                        "moe.route_to_experts[{r}] names expert {k}, outside [0, {})",
                        self.n_experts
                    ));
                }
                covered[k] = true;
            }
        }
        if let Some(k) = covered.iter().position(|c| !c) {
            return cfg(format!("moe.route_to_experts leaves expert {k} unreachable"));
        }
        let smallest = smallest_pool(&map, self.n_experts, self.scene_top_k);
        if smallest < self.top_k {
            return cfg(format!(
                "moe.route_to_experts: some choice of {} routes reaches only {smallest} experts, fewer than moe.top_k ({})",
                self.scene_top_k, self.top_k
            ));
        }
        Ok(())
    }
}

/// Contiguous partition of `n_experts` into `n_routes` groups whose sizes
/// differ by at most one. With fewer experts than routes, route `r` owns
/// expert `r mod n_experts`.
pub fn default_partition(n_experts: usize, n_routes: usize) -> Vec<Vec<usize>> {
    if n_routes == 0 || n_experts == 0 {
        return vec![Vec::new(); n_routes];
    }
    if n_experts < n_routes {
        return (0..n_routes).map(|r| vec![r % n_experts]).collect();
    }
    let base = n_experts / n_routes;
    let extra = n_experts % n_routes;
    let mut start = 0;
    (0..n_routes)
        .map(|r| {
            let len = base + usize::from(r < extra);
            let group = (start..start + len).collect();
            start += len;
            group
        })
        .collect()
}

/// Size of the smallest expert union over all `k`-subsets of routes.
fn smallest_pool(map: &[Vec<usize>], n_experts: usize, k: usize) -> usize {
    fn walk(map: &[Vec<usize>], start: usize, left: usize, acc: &mut Vec<u32>, best: &mut usize) {
        if left == 0 {
            *best = (*best).min(acc.iter().filter(|c| **c > 0).count());
            return;
        }
        for r in start..=map.len() - left {
            for &e in &map[r] {
                acc[e] += 1;
            }
            walk(map, r + 1, left - 1, acc, best);
            for &e in &map[r] {
                acc[e] -= 1;
            }
        }
    }
    let mut best = usize::MAX;
    walk(map, 0, k, &mut vec![0; n_experts], &mut best);
    best
}

/// Learnable gate weights for both routing levels.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams {
    /// `N_s x d_scene`
    pub scene_w: Matrix,
    pub scene_b: Vector,
    /// `N_e x (d_model + N_s)`
    pub inst_w: Matrix,
    pub inst_b: Vector,
}

impl RouterParams {
    pub fn zeros(cfg: &MoEConfig) -> Self {
        RouterParams {
            scene_w: Matrix::zeros(cfg.n_scene_routes, cfg.d_scene),
            scene_b: Vector::zeros(cfg.n_scene_routes),
            inst_w: Matrix::zeros(cfg.n_experts, cfg.instance_input()),
            inst_b: Vector::zeros(cfg.n_experts),
        }
    }

    pub(crate) fn bind_const(&self, tape: &mut Tape) -> RouterVars {
        RouterVars {
            scene: Some(GateVars {
                w: tape.constant_matrix(&self.scene_w),
                b: tape.constant(self.scene_b.0.clone()),
            }),
            instance: Some(GateVars {
                w: tape.constant_matrix(&self.inst_w),
                b: tape.constant(self.inst_b.0.clone()),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct GateVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct RouterVars {
    pub scene: Option<GateVars>,
    pub instance: Option<GateVars>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenePool {
    pub selected_routes: Vec<usize>,
    /// Ascending expert indices reachable from the selected routes.
    pub expert_pool: Vec<usize>,
    pub g: SimplexVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingAssignment {
    pub query_index: usize,
    /// Instance distribution over all experts, before masking.
    pub e: SimplexVector,
    pub masked: Vec<f64>,
    /// Selected experts in descending masked probability.
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Mean over the rows of the encoder feature matrix.
pub fn pool_scene(h: &Matrix) -> Result<Vector> {
    if h.rows() == 0 || h.cols() == 0 {
        return Err(Error::Input("cannot pool an empty feature matrix".into()));
    }
    let mut out = vec![0.0; h.cols()];
    for i in 0..h.rows() {
        for (o, v) in out.iter_mut().zip(h.row(i)) {
            *o += v;
        }
    }
    let n = h.rows() as f64;
    Ok(Vector(out.into_iter().map(|v| v / n).collect()))
}

/// Zeroes the entries of `e` outside `pool`; pool entries are left unchanged.
pub fn mask_to_pool(e: &[f64], pool: &[usize]) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(Error::Config("scene-selected expert pool is empty".into()));
    }
    let mut tape = Tape::new();
    let ev = tape.constant(e.to_vec());
    let m = tape.mask(ev, pool)?;
    Ok(tape.value(m).to_vec())
}

pub fn scene_route(x_global: &Vector, params: &RouterParams, cfg: &MoEConfig) -> Result<ScenePool> {
    let mut tape = Tape::new();
    let rv = params.bind_const(&mut tape);
    let x = tape.constant(x_global.0.clone());
    Ok(scene_route_t(&mut tape, x, rv.scene.expect("bound"), cfg, &cfg.route_map())?.pool)
}

pub fn instance_route(
    q: &Vector,
    g: &SimplexVector,
    pool: &[usize],
    params: &RouterParams,
    cfg: &MoEConfig,
) -> Result<RoutingAssignment> {
    let mut tape = Tape::new();
    let rv = params.bind_const(&mut tape);
    let qv = tape.constant(q.0.clone());
    let gv = tape.constant(g.as_slice().to_vec());
    let mut out = instance_route_t(&mut tape, qv, gv, pool, rv.instance.expect("bound"), cfg)?;
    out.assignment.query_index = 0;
    Ok(out.assignment)
}

/// Runs the full two-level routing and sparse aggregation for one scene.
/// Trace records are tagged with `batch = 0`.
pub fn himoe_forward(
    h: &Matrix,
    queries: &[Vector],
    router: &RouterParams,
    experts: &[ExpertParams],
    cfg: &MoEConfig,
) -> Result<(Vec<Vector>, RoutingTrace)> {
    cfg.validate()?;
    if experts.len() != cfg.n_experts {
        return Err(Error::Config(format!(
            "expected {} experts, got {}",
            cfg.n_experts,
            experts.len()
        )));
    }
    let mut tape = Tape::new();
    let rv = router.bind_const(&mut tape);
    let bank: Vec<ExpertVars> = experts.iter().map(|e| e.bind_const(&mut tape)).collect();
    let out = himoe_scene_t(&mut tape, h, queries, &rv, &bank, cfg, &cfg.route_map(), 0)?;
    let ys = out.outputs.iter().map(|v| Vector(tape.value(*v).to_vec())).collect();
    let mut trace = RoutingTrace::new(cfg.n_experts);
    for r in out.records {
        trace.push(r)?;
    }
    Ok((ys, trace))
}

pub(crate) struct ScenePoolOut {
    pub pool: ScenePool,
    pub g: Var,
}

pub(crate) fn scene_route_t(
    tape: &mut Tape,
    x_global: Var,
    gate: GateVars,
    cfg: &MoEConfig,
    routes: &[Vec<usize>],
) -> Result<ScenePoolOut> {
    let logits = tape.linear(gate.w, x_global, gate.b)?;
    let g = tape.softmax_temp(logits, cfg.tau_scene)?;
    let selected_routes = topk(tape.value(g), cfg.scene_top_k)?;
    let expert_pool = union_of(routes, &selected_routes, cfg.n_experts);
    Ok(ScenePoolOut {
        pool: ScenePool {
            selected_routes,
            expert_pool,
            g: SimplexVector::new(tape.value(g).to_vec())?,
        },
        g,
    })
}

pub(crate) fn union_of(routes: &[Vec<usize>], selected: &[usize], n_experts: usize) -> Vec<usize> {
    let mut member = vec![false; n_experts];
    for &r in selected {
        for &k in &routes[r] {
            member[k] = true;
        }
    }
    (0..n_experts).filter(|&k| member[k]).collect()
}

pub(crate) struct AssignmentOut {
    pub assignment: RoutingAssignment,
    /// Masked instance distribution (not renormalized).
    pub masked: Var,
    /// Weights aligned with `assignment.selected`.
    pub weights: Var,
}

pub(crate) fn instance_route_t(
    tape: &mut Tape,
    q: Var,
    g: Var,
    pool: &[usize],
    gate: GateVars,
    cfg: &MoEConfig,
) -> Result<AssignmentOut> {
    let r = tape.concat(q, g)?;
    let logits = tape.linear(gate.w, r, gate.b)?;
    let e = tape.softmax_temp(logits, cfg.tau_query)?;
    select_in_pool(tape, e, pool, cfg.top_k)
}

/// Mask to `pool`, take the top-`k`, and renormalize over the selection.
pub(crate) fn select_in_pool(tape: &mut Tape, e: Var, pool: &[usize], k: usize) -> Result<AssignmentOut> {
    if pool.is_empty() {
        return Err(Error::Config("scene-selected expert pool is empty".into()));
    }
    let masked = tape.mask(e, pool)?;
    let positive = tape.value(masked).iter().filter(|v| **v > 0.0).count();
    if positive < k {
        return Err(Error::RoutingDegeneracy { positive, k });
    }
    let selected = topk(tape.value(masked), k)?;
    let picked = tape.gather(masked, &selected)?;
    let weights = tape.normalize(picked)?;
    Ok(AssignmentOut {
        assignment: RoutingAssignment {
            query_index: 0,
            e: SimplexVector::new(tape.value(e).to_vec())?,
            masked: tape.value(masked).to_vec(),
            selected,
            weights: tape.value(weights).to_vec(),
        },
        masked,
        weights,
    })
}

/// `sum_k w_k E_k(q)`, accumulated in ascending expert index.
pub(crate) fn mix_experts<B: ExpertBank + ?Sized>(
    tape: &mut Tape,
    bank: &B,
    q: Var,
    experts: &[usize],
    weights: Var,
) -> Result<Var> {
    let mut order: Vec<usize> = (0..experts.len()).collect();
    order.sort_by_key(|&j| experts[j]);
    let mut terms = Vec::with_capacity(order.len());
    for j in order {
        let ev = bank.expert(tape, experts[j])?;
        let out = expert_forward_t(tape, &ev, q)?;
        terms.push(tape.scale(out, weights, j)?);
    }
    tape.sum(&terms)
}

pub(crate) struct SceneForward {
    pub outputs: Vec<Var>,
    pub records: Vec<TraceRecord>,
    /// Per-record routing distributions over all experts, each summing to
    /// one over its pool; their mean is the soft utilization.
    pub soft: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn himoe_scene_t<B: ExpertBank + ?Sized>(
    tape: &mut Tape,
    h: &Matrix,
    queries: &[Vector],
    router: &RouterVars,
    bank: &B,
    cfg: &MoEConfig,
    routes: &[Vec<usize>],
    batch: u64,
) -> Result<SceneForward> {
    if queries.is_empty() {
        return Err(Error::Input("no queries to route".into()));
    }
    let scene_gate = router
        .scene
        .ok_or_else(|| Error::Config("hierarchical routing needs a scene router".into()))?;
    let inst_gate = router
        .instance
        .ok_or_else(|| Error::Config("hierarchical routing needs an instance router".into()))?;
    let xg = pool_scene(h)?;
    let x = tape.constant(xg.0);
    let scene = scene_route_t(tape, x, scene_gate, cfg, routes)?;

    let mut out = SceneForward {
        outputs: Vec::with_capacity(queries.len()),
        records: Vec::with_capacity(queries.len()),
        soft: Vec::with_capacity(queries.len()),
    };
    for (i, q) in queries.iter().enumerate() {
        if q.len() != cfg.d_model {
            return Err(Error::dim("himoe_forward", format!("query of length {}", cfg.d_model), q.len()));
        }
        let qv = tape.constant(q.0.clone());
        let a = instance_route_t(tape, qv, scene.g, &scene.pool.expert_pool, inst_gate, cfg)?;
        let y = mix_experts(tape, bank, qv, &a.assignment.selected, a.weights)?;
        out.outputs.push(y);
        let in_pool = tape.normalize(a.masked)?;
        out.soft.push(in_pool);
        out.records.push(TraceRecord {
            batch,
            query: i,
            routes: scene.pool.selected_routes.clone(),
            pool: scene.pool.expert_pool.clone(),
            experts: a.assignment.selected,
            weights: a.assignment.weights,
            e_full: a.assignment.e.into_vec(),
            g: scene.pool.g.as_slice().to_vec(),
            scene: None,
            itype: None,
            loss: None,
        });
    }
    Ok(out)
}
