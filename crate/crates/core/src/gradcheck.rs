//! Full-pipeline gradient check: tape gradients of the training objective
//! against central finite differences, per parameter tensor.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experts::{ModelParams, VariantPolicy};
use crate::numerics::{finite_diff_grad, relative_error, AdjointFault, Tape};
use crate::rng;
use crate::synthetic::{objective, SyntheticBatch, TaskWorld};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_EPS: f64 = 1e-5;
pub const MAX_D_MODEL: usize = 8;
pub const MAX_EXPERTS: usize = 4;
/// Router weights are redrawn at this scale so routing is far from uniform.
const ROUTER_CHECK_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: String,
    pub n_params: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub policy: VariantPolicy,
    pub tolerance: f64,
    pub objective: f64,
    pub blocks: Vec<BlockReport>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failing(&self) -> Vec<&str> {
        self.blocks.iter().filter(|b| !b.passed).map(|b| b.block.as_str()).collect()
    }
}

/// The small configuration used by default: d = 4, N_e = 4, two queries per image.
pub fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.moe.n_experts = 4;
    c.moe.top_k = 2;
    c.moe.n_scene_routes = 2;
    c.moe.scene_top_k = 1;
    c.moe.d_model = 4;
    c.moe.d_scene = 4;
    c.data.n_scenes = 2;
    c.data.n_types = 2;
    c.data.tokens_per_scene = 3;
    c.data.queries_per_scene = 2;
    c.train.batch_size = 1;
    c.loss.n_probes = 4;
    c
}

/// Checks every parameter tensor of `run.train.policy`. With `fault`, the
/// analytic pass uses a deliberately corrupted adjoint.
pub fn check_gradients(run: &RunConfig, fault: Option<AdjointFault>) -> Result<GradCheckReport> {
    run.validate()?;
    if run.moe.d_model > MAX_D_MODEL || run.moe.n_experts > MAX_EXPERTS {
        return Err(Error::Config(format!(
            "gradient check needs moe.d_model <= {MAX_D_MODEL} and moe.n_experts <= {MAX_EXPERTS}, got {} and {}",
            run.moe.d_model, run.moe.n_experts
        )));
    }
    let seed = run.train.seed;
    let policy = run.train.policy;
    let world = TaskWorld::new(&run.data, &run.moe, seed)?;
    let batches: Vec<SyntheticBatch> = (0..run.train.batch_size as u64).map(|i| world.generate_batch(i)).collect();
    let probes = if policy.is_routed() {
        world.probes(0, run.loss.n_probes)
    } else {
        Vec::new()
    };

    let mut params = ModelParams::init(policy, &run.moe, seed)?;
    let mut r = rng::stream(seed, "gradcheck.router", 0);
    let router_ids: Vec<usize> = params
        .tensors()
        .iter()
        .enumerate()
        .filter(|(_, t)| t.name.starts_with("router.") && t.name.ends_with(".w"))
        .map(|(i, _)| i)
        .collect();
    for i in router_ids {
        for v in &mut params.tensor_mut(crate::numerics::ParamId(i)).data {
            *v = ROUTER_CHECK_STD * r.sample::<f64, _>(StandardNormal);
        }
    }

    let mut tape = match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let obj = objective(&mut tape, &params, &batches, &probes, &run.loss)?;
    let value = tape.scalar(obj.total);
    let grads = tape.backward(obj.total)?;

    let flat = params.flat();
    let mut scratch = params.clone();
    let numeric = finite_diff_grad(
        |x| {
            scratch.set_flat(x).expect("same length");
            let mut t = Tape::new();
            match objective(&mut t, &scratch, &batches, &probes, &run.loss) {
                Ok(o) => t.scalar(o.total),
                Err(_) => f64::NAN,
            }
        },
        &flat,
        FD_EPS,
    )?;

    let mut blocks = Vec::new();
    let mut offset = 0;
    for (i, t) in params.tensors().iter().enumerate() {
        let n = t.data.len();
        let analytic = grads.get(crate::numerics::ParamId(i));
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let a = analytic.map_or(0.0, |g| g[j]);
            worst = worst.max(relative_error(a, numeric[offset + j]));
        }
        blocks.push(BlockReport {
            block: t.name.clone(),
            n_params: n,
            max_rel_error: worst,
            passed: worst <= GRAD_TOLERANCE,
        });
        offset += n;
    }
    let passed = blocks.iter().all(|b| b.passed);
    Ok(GradCheckReport {
        policy,
        tolerance: GRAD_TOLERANCE,
        objective: value,
        blocks,
        passed,
    })
}
