//! Expert FFNs, the shared expert bank, and the five routing variants that
//! run over it.

mod cost;
mod params;
mod variant;

pub use cost::{count_params_flops, ComputeCost};
pub use params::{Checkpoint, ModelParams, ParamTensor};
pub use variant::{variant_forward, SceneInput, VariantPolicy};

pub(crate) use variant::forward_scene_t;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var, Vector};

/// One hidden-layer FFN: `W2 act(W1 q + b1) + b2` with `act = tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    pub id: usize,
    /// `h x d`
    pub w1: Matrix,
    pub b1: Vector,
    /// `d x h`
    pub w2: Matrix,
    pub b2: Vector,
}

impl ExpertParams {
    pub fn zeros(id: usize, d: usize, h: usize) -> Self {
        ExpertParams {
            id,
            w1: Matrix::zeros(h, d),
            b1: Vector::zeros(h),
            w2: Matrix::zeros(d, h),
            b2: Vector::zeros(d),
        }
    }

    pub fn n_params(&self) -> usize {
        self.w1.as_slice().len() + self.b1.len() + self.w2.as_slice().len() + self.b2.len()
    }

    pub(crate) fn bind_const(&self, tape: &mut Tape) -> ExpertVars {
        ExpertVars {
            w1: tape.constant_matrix(&self.w1),
            b1: tape.constant(self.b1.0.clone()),
            w2: tape.constant_matrix(&self.w2),
            b2: tape.constant(self.b2.0.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ExpertVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Resolves expert `k` to tape nodes, binding lazily so that experts never
/// evaluated never enter the tape.
pub(crate) trait ExpertBank {
    fn expert(&self, tape: &mut Tape, k: usize) -> Result<ExpertVars>;
}

impl ExpertBank for [ExpertVars] {
    fn expert(&self, _tape: &mut Tape, k: usize) -> Result<ExpertVars> {
        self.get(k)
            .copied()
            .ok_or_else(|| Error::Input(format!("expert {k} outside bank of {}", self.len())))
    }
}

impl ExpertBank for Vec<ExpertVars> {
    fn expert(&self, tape: &mut Tape, k: usize) -> Result<ExpertVars> {
        self.as_slice().expert(tape, k)
    }
}

pub fn expert_forward(expert: &ExpertParams, q: &Vector) -> Result<Vector> {
    let mut tape = Tape::new();
    let ev = expert.bind_const(&mut tape);
    let qv = tape.constant(q.0.clone());
    let y = expert_forward_t(&mut tape, &ev, qv)?;
    Ok(Vector(tape.value(y).to_vec()))
}

pub(crate) fn expert_forward_t(tape: &mut Tape, e: &ExpertVars, q: Var) -> Result<Var> {
    let pre = tape.linear(e.w1, q, e.b1)?;
    let hidden = tape.activation(pre);
    tape.linear(e.w2, hidden, e.b2)
}
