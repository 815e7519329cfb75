use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ExpertBank, ExpertParams, ExpertVars, VariantPolicy};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamId, Tape, Vector};
use crate::rng;
use crate::routing::{GateVars, MoEConfig, RouterParams, RouterVars};

/// Standard deviation of router weights at initialization. Small enough that
/// the first routing decisions are close to uniform.
pub const ROUTER_INIT_STD: f64 = 0.01;

pub const CHECKPOINT_FORMAT: &str = "himoe-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct GateIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ExpertIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, Default)]
struct Layout {
    scene: Option<GateIds>,
    instance: Option<GateIds>,
    token: Option<GateIds>,
    dense: Option<ExpertIds>,
    experts: Vec<ExpertIds>,
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    Normal(f64),
}

/// Every learnable tensor of one routing variant, in a fixed order.
#[derive(Clone, Debug)]
pub struct ModelParams {
    policy: VariantPolicy,
    cfg: MoEConfig,
    seed: u64,
    tensors: Vec<ParamTensor>,
    layout: Layout,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.policy == other.policy && self.cfg == other.cfg && self.seed == other.seed && self.tensors == other.tensors
    }
}

struct Builder {
    specs: Vec<(String, usize, usize, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> ParamId {
        self.specs.push((name, rows, cols, init));
        ParamId(self.specs.len() - 1)
    }

    fn gate(&mut self, prefix: &str, rows: usize, cols: usize) -> GateIds {
        GateIds {
            w: self.add(format!("{prefix}.w"), rows, cols, Init::Normal(ROUTER_INIT_STD)),
            b: self.add(format!("{prefix}.b"), rows, 1, Init::Zero),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, h: usize) -> ExpertIds {
        ExpertIds {
            w1: self.add(format!("{prefix}.w1"), h, d, Init::Normal(1.0 / (d as f64).sqrt())),
            b1: self.add(format!("{prefix}.b1"), h, 1, Init::Zero),
            w2: self.add(format!("{prefix}.w2"), d, h, Init::Normal(1.0 / (h as f64).sqrt())),
            b2: self.add(format!("{prefix}.b2"), d, 1, Init::Zero),
        }
    }
}

fn plan(policy: VariantPolicy, cfg: &MoEConfig) -> (Vec<(String, usize, usize, Init)>, Layout) {
    use VariantPolicy::*;
    let mut b = Builder { specs: Vec::new() };
    let mut layout = Layout::default();
    let (d, h) = (cfg.d_model, cfg.hidden());
    if matches!(policy, SceneOnly | Hierarchical) {
        layout.scene = Some(b.gate("router.scene", cfg.n_scene_routes, cfg.d_scene));
    }
    if matches!(policy, InstanceOnly | Hierarchical) {
        layout.instance = Some(b.gate("router.instance", cfg.n_experts, cfg.instance_input()));
    }
    if policy == TokenMoe {
        layout.token = Some(b.gate("router.token", cfg.n_experts, cfg.d_scene));
    }
    if policy == Dense {
        layout.dense = Some(b.ffn("dense", d, h));
    } else {
        layout.experts = (0..cfg.n_experts).map(|k| b.ffn(&format!("expert.{k}"), d, h)).collect();
    }
    (b.specs, layout)
}

impl ModelParams {
    /// Fresh parameters. Each tensor draws from its own stream keyed by its
    /// name, so expert `k` starts identically under every variant.
    pub fn init(policy: VariantPolicy, cfg: &MoEConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (specs, layout) = plan(policy, cfg);
        let tensors = specs
            .into_iter()
            .map(|(name, rows, cols, init)| {
                let data = match init {
                    Init::Zero => vec![0.0; rows * cols],
                    Init::Normal(std) => {
                        let mut r = rng::stream(seed, &format!("init/{name}"), 0);
                        let dist = Normal::new(0.0, std).expect("positive std");
                        (0..rows * cols).map(|_| dist.sample(&mut r)).collect()
                    }
                };
                ParamTensor { name, rows, cols, data }
            })
            .collect();
        Ok(ModelParams {
            policy,
            cfg: cfg.clone(),
            seed,
            tensors,
            layout,
        })
    }

    pub fn policy(&self) -> VariantPolicy {
        self.policy
    }

    pub fn cfg(&self) -> &MoEConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensor(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::dim("set_flat", self.n_params(), flat.len()));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Expert ids whose tensors belong to expert `k`.
    pub fn expert_tensor_ids(&self, k: usize) -> Option<[ParamId; 4]> {
        self.layout.experts.get(k).map(|e| [e.w1, e.b1, e.w2, e.b2])
    }

    fn vector(&self, id: ParamId) -> Vector {
        Vector(self.tensors[id.0].data.clone())
    }

    fn matrix(&self, id: ParamId) -> Matrix {
        let t = &self.tensors[id.0];
        Matrix::from_vec(t.rows, t.cols, t.data.clone()).expect("shape validated at construction")
    }

    fn ffn(&self, id: usize, e: &ExpertIds) -> ExpertParams {
        ExpertParams {
            id,
            w1: self.matrix(e.w1),
            b1: self.vector(e.b1),
            w2: self.matrix(e.w2),
            b2: self.vector(e.b2),
        }
    }

    pub fn expert(&self, k: usize) -> Option<ExpertParams> {
        self.layout.experts.get(k).map(|e| self.ffn(k, e))
    }

    pub fn experts(&self) -> Vec<ExpertParams> {
        (0..self.layout.experts.len()).filter_map(|k| self.expert(k)).collect()
    }

    pub fn dense(&self) -> Option<ExpertParams> {
        self.layout.dense.as_ref().map(|e| self.ffn(0, e))
    }

    /// Scene and instance router weights, when both exist.
    pub fn router(&self) -> Option<RouterParams> {
        let (s, i) = (self.layout.scene?, self.layout.instance?);
        Some(RouterParams {
            scene_w: self.matrix(s.w),
            scene_b: self.vector(s.b),
            inst_w: self.matrix(i.w),
            inst_b: self.vector(i.b),
        })
    }

    pub fn binder(&self) -> ParamBinder<'_> {
        ParamBinder { params: self }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            policy: self.policy,
            seed: self.seed,
            cfg: self.cfg.clone(),
            tensors: self.tensors.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Input(format!("unsupported checkpoint format `{}`", ck.format)));
        }
        ck.cfg.validate()?;
        let (specs, layout) = plan(ck.policy, &ck.cfg);
        if specs.len() != ck.tensors.len() {
            return Err(Error::Input(format!(
                "checkpoint holds {} tensors, config expects {}",
                ck.tensors.len(),
                specs.len()
            )));
        }
        for ((name, rows, cols, _), t) in specs.iter().zip(&ck.tensors) {
            if &t.name != name || t.rows != *rows || t.cols != *cols {
                return Err(Error::Input(format!(
                    "checkpoint tensor `{}` ({}x{}) does not match expected `{name}` ({rows}x{cols})",
                    t.name, t.rows, t.cols
                )));
            }
            if t.data.len() != rows * cols {
                return Err(Error::dim("checkpoint", rows * cols, t.data.len()));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("checkpoint tensor `{name}` has non-finite entries")));
            }
        }
        Ok(ModelParams {
            policy: ck.policy,
            cfg: ck.cfg,
            seed: ck.seed,
            tensors: ck.tensors,
            layout,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, &self.checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(f)?;
        Self::from_checkpoint(ck)
    }
}

/// Self-describing parameter file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub policy: VariantPolicy,
    pub seed: u64,
    pub cfg: MoEConfig,
    pub tensors: Vec<ParamTensor>,
}

/// Binds stored tensors onto a tape on first use.
pub struct ParamBinder<'a> {
    params: &'a ModelParams,
}

impl ParamBinder<'_> {
    fn bind(&self, tape: &mut Tape, id: ParamId) -> Result<crate::numerics::Var> {
        let t = &self.params.tensors[id.0];
        tape.param(id, t.rows, t.cols, &t.data)
    }

    fn gate(&self, tape: &mut Tape, g: Option<GateIds>) -> Result<Option<GateVars>> {
        g.map(|g| {
            Ok(GateVars {
                w: self.bind(tape, g.w)?,
                b: self.bind(tape, g.b)?,
            })
        })
        .transpose()
    }

    pub(crate) fn router(&self, tape: &mut Tape) -> Result<RouterVars> {
        Ok(RouterVars {
            scene: self.gate(tape, self.params.layout.scene)?,
            instance: self.gate(tape, self.params.layout.instance)?,
        })
    }

    pub(crate) fn token_gate(&self, tape: &mut Tape) -> Result<Option<GateVars>> {
        self.gate(tape, self.params.layout.token)
    }

    fn ffn(&self, tape: &mut Tape, e: ExpertIds) -> Result<ExpertVars> {
        Ok(ExpertVars {
            w1: self.bind(tape, e.w1)?,
            b1: self.bind(tape, e.b1)?,
            w2: self.bind(tape, e.w2)?,
            b2: self.bind(tape, e.b2)?,
        })
    }

    pub(crate) fn dense(&self, tape: &mut Tape) -> Result<Option<ExpertVars>> {
        self.params.layout.dense.map(|e| self.ffn(tape, e)).transpose()
    }
}

impl ExpertBank for ParamBinder<'_> {
    fn expert(&self, tape: &mut Tape, k: usize) -> Result<ExpertVars> {
        let ids = *self
            .params
            .layout
            .experts
            .get(k)
            .ok_or_else(|| Error::Input(format!("expert {k} outside bank of {}", self.params.layout.experts.len())))?;
        self.ffn(tape, ids)
    }
}
