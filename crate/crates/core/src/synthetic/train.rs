use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, Optimizer, OptimizerKind};
use super::{SyntheticBatch, TaskWorld};
use crate::config::RunConfig;
use crate::diagnostics::routing_entropy;
use crate::error::{Error, Result};
use crate::experts::{expert_forward_t, forward_scene_t, ExpertBank, ModelParams, SceneInput, VariantPolicy};
use crate::losses::{balance_loss, combine, diversity_t, soft_balance_t, utilization, LossBreakdown, LossConfig};
use crate::numerics::{Tape, Var, Vector};
use crate::routing::RoutingTrace;

/// Evaluation images are drawn from indices far beyond any training index.
pub const EVAL_BATCH_OFFSET: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub policy: VariantPolicy,
    pub steps: usize,
    /// Images per step.
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm threshold.
    pub clip: f64,
    /// Held-out images used for the final loss and trace.
    pub eval_batches: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            policy: VariantPolicy::Hierarchical,
            steps: 2000,
            batch_size: 8,
            lr: 5.0,
            seed: 1,
            optimizer: OptimizerKind::Sgd,
            clip: 0.1,
            eval_batches: 32,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.eval_batches == 0 {
            return Err(Error::Config("train.eval_batches must be at least 1".into()));
        }
        for (key, v) in [("train.lr", self.lr), ("train.clip", self.clip)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{key} must be a finite value > 0, got {v}")));
            }
        }
        Ok(())
    }
}

pub const METRIC_COLUMNS: [&str; 7] = ["step", "task", "balance_hard", "balance_soft", "diversity", "total", "entropy"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub losses: LossBreakdown,
    /// Mean routing entropy over the step's records.
    pub entropy: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm actually applied.
    pub applied_norm: f64,
}

impl MetricRecord {
    fn row(&self) -> [String; 7] {
        let l = &self.losses;
        [
            self.step.to_string(),
            l.task.to_string(),
            l.balance_hard.to_string(),
            l.balance_soft.to_string(),
            l.diversity.to_string(),
            l.total.to_string(),
            self.entropy.to_string(),
        ]
    }
}

/// Append-only CSV metric log, flushed after every row so an aborted run
/// keeps everything logged so far.
pub struct MetricLog<W: Write> {
    w: csv::Writer<W>,
}

impl MetricLog<std::fs::File> {
    pub fn create(path: &Path) -> Result<Self> {
        MetricLog::new(std::fs::File::create(path)?)
    }
}

impl<W: Write> MetricLog<W> {
    pub fn new(inner: W) -> Result<Self> {
        let mut w = csv::Writer::from_writer(inner);
        w.write_record(METRIC_COLUMNS)?;
        w.flush()?;
        Ok(MetricLog { w })
    }

    pub fn append(&mut self, r: &MetricRecord) -> Result<()> {
        self.w.write_record(r.row())?;
        self.w.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

pub(crate) struct Objective {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub trace: RoutingTrace,
}

/// Builds the full training objective for one step on `tape`.
pub(crate) fn objective(
    tape: &mut Tape,
    params: &ModelParams,
    batches: &[SyntheticBatch],
    probes: &[Vector],
    losscfg: &LossConfig,
) -> Result<Objective> {
    let cfg = params.cfg();
    let policy = params.policy();
    let mut trace = RoutingTrace::new(cfg.n_experts);
    let mut query_losses = Vec::new();
    let mut soft = Vec::new();
    for b in batches {
        let out = forward_scene_t(
            tape,
            params,
            SceneInput {
                features: &b.features,
                queries: &b.queries,
            },
            b.index,
        )?;
        let mut losses = Vec::with_capacity(b.queries.len());
        for (y, t) in out.outputs.iter().zip(&b.targets) {
            let l = tape.mse(*y, &t.0)?;
            losses.push(l);
        }
        let per_query = policy != VariantPolicy::TokenMoe;
        for mut rec in out.records {
            rec.scene = Some(b.scene_type);
            if per_query {
                rec.itype = Some(b.instance_types[rec.query]);
                rec.loss = Some(tape.scalar(losses[rec.query]));
            }
            trace.push(rec)?;
        }
        query_losses.extend(losses);
        soft.extend(out.soft);
    }
    let task = tape.mean(&query_losses)?;
    let mut breakdown = LossBreakdown {
        task: tape.scalar(task),
        ..LossBreakdown::default()
    };
    let mut terms = vec![(1.0, task)];
    if policy.is_routed() {
        breakdown.balance_hard = balance_loss(&utilization(&trace)?.f);
        let (bal, _) = soft_balance_t(tape, &soft, cfg.n_experts)?;
        breakdown.balance_soft = tape.scalar(bal);
        if losscfg.lambda1 > 0.0 {
            terms.push((losscfg.lambda1, bal));
        }
        if cfg.n_experts >= 2 && !probes.is_empty() {
            let binder = params.binder();
            let mut responses = Vec::with_capacity(cfg.n_experts);
            for k in 0..cfg.n_experts {
                let ev = binder.expert(tape, k)?;
                let mut r = Vec::with_capacity(probes.len());
                for p in probes {
                    let pv = tape.constant(p.0.clone());
                    r.push(expert_forward_t(tape, &ev, pv)?);
                }
                responses.push(r);
            }
            let div = diversity_t(tape, &responses)?;
            breakdown.diversity = tape.scalar(div);
            if losscfg.lambda2 > 0.0 {
                terms.push((losscfg.lambda2, div));
            }
        }
    }
    let total = tape.lincomb(&terms)?;
    breakdown.total = combine(breakdown.task, breakdown.balance_soft, breakdown.diversity, losscfg);
    if !policy.is_routed() {
        breakdown.total = breakdown.task;
    }
    Ok(Objective { total, breakdown, trace })
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    /// Mean per-query task loss over the held-out images.
    pub task_loss: f64,
    /// Routing records labelled with scene, instance type and per-query loss.
    pub trace: RoutingTrace,
}

/// Evaluates `params` on `n_batches` held-out images.
pub fn evaluate(params: &ModelParams, world: &TaskWorld, n_batches: usize) -> Result<EvalOutcome> {
    let mut trace = RoutingTrace::new(params.cfg().n_experts);
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..n_batches as u64 {
        let b = world.generate_batch(EVAL_BATCH_OFFSET + i);
        let mut tape = Tape::new();
        let obj = objective(&mut tape, params, std::slice::from_ref(&b), &[], &LossConfig::default())?;
        sum += obj.breakdown.task * b.queries.len() as f64;
        n += b.queries.len();
        trace.extend(obj.trace)?;
    }
    Ok(EvalOutcome {
        task_loss: sum / n as f64,
        trace,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<MetricRecord>,
    /// Routing trace of the trained model on held-out images.
    pub trace: RoutingTrace,
    pub eval_task_loss: f64,
}

fn all_finite(b: &LossBreakdown) -> bool {
    [b.task, b.balance_hard, b.balance_soft, b.diversity, b.total]
        .iter()
        .all(|v| v.is_finite())
}

/// Trains `run.train.policy` from a fresh seeded initialization. `on_step`
/// sees every metric record as soon as it is produced.
pub fn train(run: &RunConfig, on_step: &mut dyn FnMut(&MetricRecord) -> Result<()>) -> Result<TrainOutcome> {
    run.validate()?;
    let tc = &run.train;
    let world = TaskWorld::new(&run.data, &run.moe, tc.seed)?;
    let mut params = ModelParams::init(tc.policy, &run.moe, tc.seed)?;
    let mut opt = Optimizer::new(tc.optimizer, tc.lr);
    let mut metrics = Vec::with_capacity(tc.steps);
    let bs = tc.batch_size as u64;
    for step in 0..tc.steps {
        let s = step as u64;
        let batches: Vec<SyntheticBatch> = (0..bs).map(|j| world.generate_batch(s * bs + j)).collect();
        let probes = if tc.policy.is_routed() {
            world.probes(s, run.loss.n_probes)
        } else {
            Vec::new()
        };
        let mut tape = Tape::new();
        let obj = objective(&mut tape, &params, &batches, &probes, &run.loss)?;
        if !all_finite(&obj.breakdown) {
            return Err(Error::Divergence {
                step,
                detail: format!("{:?}", obj.breakdown),
            });
        }
        let mut grads = tape.backward(obj.total)?;
        let grad_norm = clip_global_norm(&mut grads, tc.clip);
        if !grad_norm.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("non-finite gradient norm; losses {:?}", obj.breakdown),
            });
        }
        let entropy = if obj.trace.is_empty() { 0.0 } else { routing_entropy(&obj.trace)? };
        let record = MetricRecord {
            step,
            losses: obj.breakdown,
            entropy,
            grad_norm,
            applied_norm: grads.global_norm(),
        };
        opt.step(&mut params, &grads)?;
        on_step(&record)?;
        metrics.push(record);
    }
    let eval = evaluate(&params, &world, tc.eval_batches)?;
    Ok(TrainOutcome {
        params,
        metrics,
        trace: eval.trace,
        eval_task_loss: eval.task_loss,
    })
}
