//! Joint-level module: a content-adaptive graph per frame and three residual
//! graph convolutions that share it.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{BatchNormMode, RunningStats, Tape, Var};

/// θ and φ projections used for the affinities.
#[derive(Debug, Clone, Copy)]
pub struct GraphVars {
    pub theta_w: Var,
    pub theta_b: Var,
    pub phi_w: Var,
    pub phi_b: Var,
}

/// One residual GCN layer: `BN(G·Z·W_yᵀ + Z·W_zᵀ)` followed by ReLU.
#[derive(Debug, Clone, Copy)]
pub struct GcnLayerVars {
    pub wy: Var,
    pub wz: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Raw affinities `S` and their row softmax `G`, both `[N, J, J]`.
#[derive(Debug, Clone, Copy)]
pub struct FrameGraph {
    pub affinity: Var,
    pub adjacency: Var,
}

/// Whether each frame gets its own graph or all `T·J` joints share one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphScope {
    PerFrame,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JointFlags {
    pub jt_in_graph: bool,
    pub jt_in_passing: bool,
    pub scope: GraphScope,
}

pub struct JointLevelOutput {
    /// `[B, T, J, C3]`.
    pub features: Var,
    pub graph: FrameGraph,
}

/// Appends the joint-type embedding `[J, C]` to every frame of `[.., J, C1]`.
pub fn concat_joint_type<S: Scalar>(tape: &mut Tape<S>, z: Var, jt: Var) -> Result<Var> {
    let zs = tape.shape(z).to_vec();
    let js = tape.shape(jt).to_vec();
    if zs.len() < 2 || js.len() != 2 || js[0] != zs[zs.len() - 2] {
        return dim_err(format!("concat_joint_type: dynamics {zs:?} vs joint types {js:?}"));
    }
    let mut target = zs.clone();
    *target.last_mut().unwrap() = js[1];
    let jt = tape.broadcast_to(jt, &target)?;
    tape.concat_last(z, jt)
}

/// `S = θ(Z̄)·φ(Z̄)ᵀ`, `G = softmax_rows(S)` for node features `[N, J, d]`.
pub fn compute_adjacency<S: Scalar>(tape: &mut Tape<S>, zbar: Var, g: &GraphVars) -> Result<FrameGraph> {
    if tape.shape(zbar).len() != 3 {
        return dim_err(format!("compute_adjacency expects [N, J, d], got {:?}", tape.shape(zbar)));
    }
    let theta = tape.affine(zbar, g.theta_w, Some(g.theta_b))?;
    let phi = tape.affine(zbar, g.phi_w, Some(g.phi_b))?;
    let affinity = tape.bmm(theta, phi, true)?;
    let adjacency = tape.softmax_rows(affinity)?;
    Ok(FrameGraph { affinity, adjacency })
}

/// Pre-normalization message passing `G·Z·W_yᵀ + Z·W_zᵀ` on `[N, J, d_in]`.
pub fn gcn_message<S: Scalar>(tape: &mut Tape<S>, z: Var, g: Var, layer: &GcnLayerVars) -> Result<Var> {
    let gz = tape.bmm(g, z, false)?;
    let y = tape.affine(gz, layer.wy, None)?;
    let skip = tape.affine(z, layer.wz, None)?;
    tape.add(y, skip)
}

pub fn gcn_residual_layer<S: Scalar>(
    tape: &mut Tape<S>,
    z: Var,
    g: Var,
    layer: &GcnLayerVars,
    running: &mut RunningStats<S>,
    mode: BatchNormMode,
) -> Result<Var> {
    let pre = gcn_message(tape, z, g, layer)?;
    let axis = tape.shape(pre).len() - 1;
    let bn = tape.batchnorm(pre, axis, layer.gamma, layer.beta, running, mode)?;
    tape.relu(bn)
}

/// Graph construction and three GCN layers over dynamics `z: [B, T, J, C1]`.
///
/// `jt` is the joint-type embedding `[J, C1]`, required when either JT flag is
/// set. All layers use the one adjacency computed from the first layer's input.
#[allow(clippy::too_many_arguments)]
pub fn joint_level_forward<S: Scalar>(
    tape: &mut Tape<S>,
    z: Var,
    jt: Option<Var>,
    flags: JointFlags,
    graph: &GraphVars,
    layers: &[GcnLayerVars],
    running: &mut [RunningStats<S>],
    mode: BatchNormMode,
) -> Result<JointLevelOutput> {
    let shape = tape.shape(z).to_vec();
    let [b, t, j, _] = shape[..] else {
        return dim_err(format!("joint_level_forward expects [B, T, J, C], got {shape:?}"));
    };
    if layers.len() != running.len() || layers.is_empty() {
        return Err(crate::Error::Config(format!(
            "{} GCN layers but {} running-stat buffers",
            layers.len(),
            running.len()
        )));
    }
    let zbar = match jt {
        Some(jt) if flags.jt_in_graph || flags.jt_in_passing => Some(concat_joint_type(tape, z, jt)?),
        None if flags.jt_in_graph || flags.jt_in_passing => {
            return Err(crate::Error::Config("joint-type flags set without a joint-type embedding".into()))
        }
        _ => None,
    };
    let graph_in = if flags.jt_in_graph { zbar.unwrap() } else { z };
    let pass_in = if flags.jt_in_passing { zbar.unwrap() } else { z };
    let (n, nodes) = match flags.scope {
        GraphScope::PerFrame => (b * t, j),
        GraphScope::Global => (b, t * j),
    };
    let as_nodes = |tape: &mut Tape<S>, v: Var| {
        let c = *tape.shape(v).last().unwrap();
        tape.reshape(v, &[n, nodes, c])
    };
    let graph_in = as_nodes(tape, graph_in)?;
    let fg = compute_adjacency(tape, graph_in, graph)?;
    let mut h = as_nodes(tape, pass_in)?;
    for (layer, stats) in layers.iter().zip(running.iter_mut()) {
        h = gcn_residual_layer(tape, h, fg.adjacency, layer, stats, mode)?;
    }
    let c3 = *tape.shape(h).last().unwrap();
    let features = tape.reshape(h, &[b, t, j, c3])?;
    Ok(JointLevelOutput { features, graph: fg })
}
