//! Dynamics embedding of joint positions and velocities, and the one-hot
//! semantics encoders for joint type and frame index.
//!
//! Every encoder is two fully connected layers with ReLU after each:
//! `relu(W2 · relu(W1 · x + b1) + b2)`.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Weights of one two-layer encoder, stored `[d_out, d_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams<S> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> EmbedderParams<S> {
    pub fn xavier<R: Rng + ?Sized>(d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w1: Tensor::xavier_uniform(&[hidden, d_in], d_in, hidden, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::xavier_uniform(&[d_out, hidden], hidden, d_out, rng),
            b2: Tensor::zeros(&[d_out]),
        }
    }

    pub fn zeros(d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[hidden, d_in]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[d_out, hidden]),
            b2: Tensor::zeros(&[d_out]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> EmbedderVars {
        EmbedderVars {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            b2: tape.param(self.b2.clone()),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.w1.numel() + self.b1.numel() + self.w2.numel() + self.b2.numel()
    }
}

/// Tape handles of an encoder's weights.
#[derive(Debug, Clone, Copy)]
pub struct EmbedderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Applies the encoder to the last axis of `x`.
pub fn embed_vector<S: Scalar>(tape: &mut Tape<S>, x: Var, p: &EmbedderVars) -> Result<Var> {
    let h = tape.affine(x, p.w1, Some(p.b1))?;
    let h = tape.relu(h)?;
    let y = tape.affine(h, p.w2, Some(p.b2))?;
    tape.relu(y)
}

/// `z = p̃ + ṽ`.
pub fn fuse_dynamics<S: Scalar>(tape: &mut Tape<S>, pos: Var, vel: Var) -> Result<Var> {
    tape.add(pos, vel)
}

/// Per-joint dynamics embedding of `[.., T, J, 3]` positions and optional
/// velocities into `[.., T, J, C1]`.
pub fn embed_sequence<S: Scalar>(
    tape: &mut Tape<S>,
    positions: Var,
    velocities: Option<Var>,
    pos: &EmbedderVars,
    vel: Option<&EmbedderVars>,
) -> Result<Var> {
    if tape.shape(positions).last() != Some(&3) {
        return dim_err(format!("positions must end in 3 coordinates, got {:?}", tape.shape(positions)));
    }
    let p = embed_vector(tape, positions, pos)?;
    match (velocities, vel) {
        (None, _) => Ok(p),
        (Some(v), Some(params)) => {
            if tape.shape(v) != tape.shape(positions) {
                return dim_err(format!(
                    "velocities {:?} do not match positions {:?}",
                    tape.shape(v),
                    tape.shape(positions)
                ));
            }
            let v = embed_vector(tape, v, params)?;
            fuse_dynamics(tape, p, v)
        }
        (Some(_), None) => dim_err("velocities given without a velocity embedder"),
    }
}

/// One-hot bases `j_k` (size J) and `f_t` (size T).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SemanticsTable {
    pub joints: usize,
    pub frames: usize,
}

impl SemanticsTable {
    pub fn new(joints: usize, frames: usize) -> Self {
        Self { joints, frames }
    }

    /// Row `k` is `j_k`.
    pub fn joint_basis<S: Scalar>(&self) -> Tensor<S> {
        Tensor::eye(self.joints)
    }

    /// Row `t` is `f_t`.
    pub fn frame_basis<S: Scalar>(&self) -> Tensor<S> {
        Tensor::eye(self.frames)
    }
}

/// Joint-type embeddings `[J, C]` and frame-index embeddings `[T, C']`, each
/// present only when its encoder is.
pub fn semantics_embeddings<S: Scalar>(
    tape: &mut Tape<S>,
    table: &SemanticsTable,
    joint_type: Option<&EmbedderVars>,
    frame_index: Option<&EmbedderVars>,
) -> Result<(Option<Var>, Option<Var>)> {
    let jt = match joint_type {
        Some(p) => {
            let basis = tape.constant(table.joint_basis());
            Some(embed_vector(tape, basis, p)?)
        }
        None => None,
    };
    let fi = match frame_index {
        Some(p) => {
            let basis = tape.constant(table.frame_basis());
            Some(embed_vector(tape, basis, p)?)
        }
        None => None,
    };
    Ok((jt, fi))
}
