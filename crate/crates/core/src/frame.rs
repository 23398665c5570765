//! Frame-level module: frame-index injection, spatial pooling over joints,
//! two temporal convolutions, temporal pooling and the classifier.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{BatchNormMode, PoolMode, RunningStats, Tape, Tensor, Var};

/// Temporal convolution followed by batch norm and ReLU.
#[derive(Debug, Clone, Copy)]
pub struct ConvBlockVars {
    pub kernel: Var,
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FrameLevelVars {
    pub cnn1: ConvBlockVars,
    pub cnn2: ConvBlockVars,
}

/// Joint selected by spatial max pooling for every `(sequence, frame, channel)`,
/// shape `[B, T, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmpTrace {
    pub batch: usize,
    pub frames: usize,
    pub channels: usize,
    pub joints: usize,
    pub argmax: Vec<usize>,
}

impl SmpTrace {
    /// Trace of one sequence in the batch, `frames * channels` entries.
    pub fn sequence(&self, b: usize) -> &[usize] {
        let n = self.frames * self.channels;
        &self.argmax[b * n..(b + 1) * n]
    }

    /// Selection count per joint for sequence `b`.
    pub fn joint_counts(&self, b: usize) -> Vec<usize> {
        let mut counts = vec![0; self.joints];
        for &k in self.sequence(b) {
            counts[k] += 1;
        }
        counts
    }
}

/// Adds `f̃_t: [T, C]` to every joint of frame `t` in `[B, T, J, C]`.
pub fn add_frame_index<S: Scalar>(tape: &mut Tape<S>, z: Var, fi: Var) -> Result<Var> {
    let zs = tape.shape(z).to_vec();
    let fs = tape.shape(fi).to_vec();
    if zs.len() != 4 || fs.len() != 2 || fs[0] != zs[1] || fs[1] != zs[3] {
        return dim_err(format!("add_frame_index: features {zs:?} vs frame embeddings {fs:?}"));
    }
    let f = tape.reshape(fi, &[fs[0], 1, fs[1]])?;
    let f = tape.broadcast_to(f, &zs)?;
    tape.add(z, f)
}

/// Max over the joint axis of `[B, T, J, C]`, with the winning joints.
pub fn spatial_maxpool<S: Scalar>(tape: &mut Tape<S>, z: Var) -> Result<(Var, SmpTrace)> {
    let shape = tape.shape(z).to_vec();
    let [b, t, j, c] = shape[..] else {
        return dim_err(format!("spatial_maxpool expects [B, T, J, C], got {shape:?}"));
    };
    let (out, argmax) = tape.pool_axis(z, 2, PoolMode::Max)?;
    Ok((
        out,
        SmpTrace {
            batch: b,
            frames: t,
            channels: c,
            joints: j,
            argmax,
        },
    ))
}

fn conv_block<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    block: &ConvBlockVars,
    running: &mut RunningStats<S>,
    mode: BatchNormMode,
) -> Result<Var> {
    let y = tape.conv1d_temporal(x, block.kernel, None)?;
    let y = tape.batchnorm(y, 2, block.gamma, block.beta, running, mode)?;
    tape.relu(y)
}

/// Two conv blocks over `[N, T, C3]` and pooling over time, giving `[N, C4]`.
pub fn frame_level_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    params: &FrameLevelVars,
    running: &mut [RunningStats<S>; 2],
    temporal_pool: PoolMode,
    mode: BatchNormMode,
) -> Result<Var> {
    let h = frame_convs(tape, x, params, running, mode)?;
    Ok(tape.pool_axis(h, 1, temporal_pool)?.0)
}

/// The conv blocks alone, `[N, T, C3] -> [N, T, C4]`.
pub fn frame_convs<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    params: &FrameLevelVars,
    running: &mut [RunningStats<S>; 2],
    mode: BatchNormMode,
) -> Result<Var> {
    if tape.shape(x).len() != 3 {
        return dim_err(format!("frame-level input must be [N, T, C], got {:?}", tape.shape(x)));
    }
    let [r1, r2] = running;
    let h = conv_block(tape, x, &params.cnn1, r1, mode)?;
    conv_block(tape, h, &params.cnn2, r2, mode)
}

/// `logits = feature · W_cᵀ + b_c`.
pub fn classify<S: Scalar>(tape: &mut Tape<S>, feature: Var, w: Var, b: Var) -> Result<Var> {
    tape.affine(feature, w, Some(b))
}

/// Row-wise softmax of `[B, K]` logits.
pub fn probabilities<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let k = *logits.shape().last().unwrap_or(&1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k.max(1)) {
        crate::tensor::softmax_in_place(row);
    }
    out
}

/// Joints ranked by how often spatial pooling selected them, ties broken by
/// lower index. Counts over all joints sum to `T * C`.
pub fn rank_joints(counts: &[usize], top_k: usize) -> Vec<(usize, usize)> {
    let mut ranked: Vec<(usize, usize)> = counts.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_k);
    ranked
}
