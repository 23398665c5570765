//! The assembled network: parameter store, forward pass for every ablation
//! variant, parameter counting and checkpoints.

mod checkpoint;
mod config;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::compute_velocity;
use crate::embedding::{embed_sequence, semantics_embeddings, EmbedderVars, SemanticsTable};
use crate::error::{dim_err, Error, Result};
use crate::frame::{add_frame_index, classify, frame_convs, frame_level_forward, spatial_maxpool, ConvBlockVars, FrameLevelVars, SmpTrace};
use crate::joint::{joint_level_forward, GcnLayerVars, GraphScope, GraphVars, JointFlags};
use crate::scalar::Scalar;
use crate::tensor::{gradcheck, BatchNormMode, GradcheckOptions, GradcheckReport, PoolMode, RunningStats, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, write_atomic, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Preset, SpatialPool, Suite};

/// Names of the batch-norm layers, in forward order.
const GCN_BN: [&str; 3] = ["joint.gcn1.bn", "joint.gcn2.bn", "joint.gcn3.bn"];
const CNN_BN: [&str; 2] = ["frame.cnn1.bn", "frame.cnn2.bn"];

#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    config: ModelConfig,
    params: IndexMap<String, Tensor<S>>,
    running: IndexMap<String, RunningStats<S>>,
    step: u64,
}

/// Everything a forward pass produces besides the tape itself.
pub struct ForwardOutput<S> {
    /// `[B, K]`.
    pub logits: Var,
    /// Present when spatial max pooling is used.
    pub smp: Option<SmpTrace>,
    /// Adjacency shared by the GCN layers: `[B·T, J, J]`, or `[B, T·J, T·J]`
    /// for the global graph.
    pub adjacency: Var,
    /// Joint-level output `[B, T, J, C3]`.
    pub joint_features: Var,
    /// Frame features after spatial pooling, `[B, T, C3]`; absent without a
    /// spatial pool.
    pub frame_features: Option<Var>,
    /// Tape handle of every parameter, keyed by name.
    pub params: IndexMap<String, Var>,
    /// Updated running statistics (train mode); unchanged copies in eval mode.
    pub bn_stats: IndexMap<String, RunningStats<S>>,
}

impl<S: Scalar> Model<S> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.get_mut(name)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &RunningStats<S>)> {
        self.running.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn set_running_stats(&mut self, stats: IndexMap<String, RunningStats<S>>) -> Result<()> {
        for (name, s) in &stats {
            match self.running.get(name) {
                Some(old) if old.channels() == s.channels() => {}
                _ => return Err(Error::Contract(format!("unexpected running stats {name:?}"))),
            }
        }
        self.running.extend(stats);
        Ok(())
    }

    /// Trainable scalars, batch-norm affine parameters included.
    pub fn count_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Replaces every bias and batch-norm shift with `U(-scale, scale)` draws.
    ///
    /// Freshly built models have zero biases, which puts ReLUs exactly on
    /// their kink for constant inputs such as the first-frame velocity; finite
    /// differences are meaningless there.
    pub fn randomize_biases(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in self.params.iter_mut() {
            if name.ends_with(".bias") || name.ends_with(".bn.beta") {
                *t = Tensor::uniform(t.shape(), -scale, scale, &mut rng);
            }
        }
    }

    /// Whether `name` is a batch-norm scale or shift.
    pub fn is_bn_param(name: &str) -> bool {
        name.ends_with(".bn.gamma") || name.ends_with(".bn.beta")
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: IndexMap<String, Tensor<S>>,
        running: IndexMap<String, RunningStats<S>>,
        step: u64,
    ) -> Result<Self> {
        let reference = build_model::<S>(&config, 0)?;
        let same_keys = |a: &IndexMap<String, Tensor<S>>| {
            a.len() == reference.params.len()
                && reference
                    .params
                    .iter()
                    .all(|(k, v)| a.get(k).is_some_and(|t| t.shape() == v.shape()))
        };
        if !same_keys(&params) {
            return Err(Error::Integrity("parameter set does not match the stored config".into()));
        }
        if running.len() != reference.running.len()
            || reference
                .running
                .iter()
                .any(|(k, v)| running.get(k).is_none_or(|r| r.channels() != v.channels() || r.var.len() != r.mean.len()))
        {
            return Err(Error::Integrity("running statistics do not match the stored config".into()));
        }
        let params = reference.params.keys().map(|k| (k.clone(), params[k].clone())).collect();
        let running = reference.running.keys().map(|k| (k.clone(), running[k].clone())).collect();
        Ok(Self {
            config,
            params,
            running,
            step,
        })
    }

    /// Runs the network on translated positions `[B, T, J, 3]`.
    pub fn forward(&self, tape: &mut Tape<S>, positions: &Tensor<S>, mode: BatchNormMode) -> Result<ForwardOutput<S>> {
        let mut vars = IndexMap::new();
        for (name, t) in &self.params {
            vars.insert(name.clone(), tape.param(t.clone()));
        }
        self.forward_bound(tape, vars, positions, mode)
    }

    /// [`Model::forward`] with the parameters already on the tape, one var
    /// per name in [`Model::param_names`] order.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<S>,
        vars: IndexMap<String, Var>,
        positions: &Tensor<S>,
        mode: BatchNormMode,
    ) -> Result<ForwardOutput<S>> {
        let cfg = &self.config;
        let shape = positions.shape();
        if shape.len() != 4 || shape[1] != cfg.frames || shape[2] != cfg.joints || shape[3] != 3 {
            return dim_err(format!(
                "model expects [B, {}, {}, 3] positions, got {shape:?}",
                cfg.frames, cfg.joints
            ));
        }
        if let Some((name, t)) = self.params.iter().find(|(n, t)| vars.get(*n).is_none_or(|v| tape.shape(*v) != t.shape())) {
            return dim_err(format!("parameter {name} {:?} is missing or misshapen on the tape", t.shape()));
        }
        let b = shape[0];
        let v = |name: &str| vars[name];
        let embedder = |prefix: &str| EmbedderVars {
            w1: v(&format!("{prefix}.fc1.weight")),
            b1: v(&format!("{prefix}.fc1.bias")),
            w2: v(&format!("{prefix}.fc2.weight")),
            b2: v(&format!("{prefix}.fc2.bias")),
        };
        let mut stats = self.running.clone();

        tape.set_scope("embed");
        let pos = tape.constant(positions.clone());
        let (vel, vel_params) = if cfg.use_velocity {
            (Some(tape.constant(compute_velocity(positions)?)), Some(embedder("embed.vel")))
        } else {
            (None, None)
        };
        let z = embed_sequence(tape, pos, vel, &embedder("embed.pos"), vel_params.as_ref())?;
        let jt_params = cfg.uses_joint_type().then(|| embedder("embed.joint"));
        let fi_params = cfg.use_fi.then(|| embedder("embed.frame"));
        let table = SemanticsTable::new(cfg.joints, cfg.frames);
        let (jt, fi) = semantics_embeddings(tape, &table, jt_params.as_ref(), fi_params.as_ref())?;

        let z = match fi {
            Some(fi) if cfg.global_graph => add_frame_index(tape, z, fi)?,
            _ => z,
        };
        let graph = GraphVars {
            theta_w: v("joint.theta.weight"),
            theta_b: v("joint.theta.bias"),
            phi_w: v("joint.phi.weight"),
            phi_b: v("joint.phi.bias"),
        };
        let layers: Vec<GcnLayerVars> = (1..=3)
            .map(|l| GcnLayerVars {
                wy: v(&format!("joint.gcn{l}.wy")),
                wz: v(&format!("joint.gcn{l}.wz")),
                gamma: v(&format!("joint.gcn{l}.bn.gamma")),
                beta: v(&format!("joint.gcn{l}.bn.beta")),
            })
            .collect();
        let mut gcn_stats: Vec<RunningStats<S>> = GCN_BN.iter().map(|n| stats[*n].clone()).collect();
        let flags = JointFlags {
            jt_in_graph: cfg.use_jt_in_graph,
            jt_in_passing: cfg.use_jt_in_passing,
            scope: if cfg.global_graph { GraphScope::Global } else { GraphScope::PerFrame },
        };
        tape.set_scope("joint");
        let jl = joint_level_forward(tape, z, jt, flags, &graph, &layers, &mut gcn_stats, mode)?;
        for (name, s) in GCN_BN.iter().zip(gcn_stats) {
            stats[*name] = s;
        }

        tape.set_scope("frame");
        let mut feat = jl.features;
        if let (Some(fi), false) = (fi, cfg.global_graph) {
            feat = add_frame_index(tape, feat, fi)?;
        }
        let conv = |prefix: &str| ConvBlockVars {
            kernel: v(&format!("{prefix}.weight")),
            gamma: v(&format!("{prefix}.bn.gamma")),
            beta: v(&format!("{prefix}.bn.beta")),
        };
        let fl = FrameLevelVars {
            cnn1: conv("frame.cnn1"),
            cnn2: conv("frame.cnn2"),
        };
        let mut cnn_stats = [stats[CNN_BN[0]].clone(), stats[CNN_BN[1]].clone()];
        let (pooled, smp, frame_features) = match cfg.spatial_pool {
            SpatialPool::Max => {
                let (x, trace) = spatial_maxpool(tape, feat)?;
                let y = frame_level_forward(tape, x, &fl, &mut cnn_stats, cfg.temporal_pool, mode)?;
                (y, Some(trace), Some(x))
            }
            SpatialPool::Avg => {
                let (x, _) = tape.pool_axis(feat, 2, PoolMode::Avg)?;
                let y = frame_level_forward(tape, x, &fl, &mut cnn_stats, cfg.temporal_pool, mode)?;
                (y, None, Some(x))
            }
            SpatialPool::None => {
                let c3 = tape.shape(feat)[3];
                let per_joint = tape.swap_axes(feat, 1, 2)?;
                let per_joint = tape.reshape(per_joint, &[b * cfg.joints, cfg.frames, c3])?;
                let h = frame_convs(tape, per_joint, &fl, &mut cnn_stats, mode)?;
                let c4 = tape.shape(h)[2];
                let h = tape.reshape(h, &[b, cfg.joints * cfg.frames, c4])?;
                (tape.pool_axis(h, 1, cfg.temporal_pool)?.0, None, None)
            }
        };
        let [s1, s2] = cnn_stats;
        stats[CNN_BN[0]] = s1;
        stats[CNN_BN[1]] = s2;

        tape.set_scope("classifier");
        let logits = classify(tape, pooled, v("frame.fc.weight"), v("frame.fc.bias"))?;
        tape.set_scope("");
        Ok(ForwardOutput {
            logits,
            smp,
            adjacency: jl.graph.adjacency,
            joint_features: jl.features,
            frame_features,
            params: vars,
            bn_stats: stats,
        })
    }

    /// Eval-mode logits `[B, K]` and the spatial pooling trace.
    pub fn predict(&self, positions: &Tensor<S>) -> Result<(Tensor<S>, Option<SmpTrace>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, positions, BatchNormMode::Eval)?;
        Ok((tape.value(out.logits).clone(), out.smp))
    }
}

/// Compares the model's analytic gradients of the smoothed cross-entropy on
/// one batch against central differences, in train mode. See
/// [`Model::randomize_biases`] for getting a model off its ReLU kinks first.
pub fn gradcheck_model(
    model: &Model<f64>,
    positions: &Tensor<f64>,
    labels: &[usize],
    smoothing: f64,
    opts: GradcheckOptions,
) -> Result<GradcheckReport> {
    let names = model.param_names();
    let values: Vec<Tensor<f64>> = model.params.values().cloned().collect();
    gradcheck(
        |tape, vars| {
            let bound = names.iter().cloned().zip(vars.iter().copied()).collect();
            let out = model.forward_bound(tape, bound, positions, BatchNormMode::Train)?;
            tape.smoothed_cross_entropy(out.logits, labels, smoothing)
        },
        &values,
        opts,
    )
}

/// Builds a model with Xavier-uniform weights, zero biases and identity
/// batch norms, all drawn deterministically from `seed`.
pub fn build_model<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: IndexMap<String, Tensor<S>> = IndexMap::new();
    let mut running = IndexMap::new();
    let p = &mut params;
    embedder(p, &mut rng, "embed.pos", 3, cfg.c1, cfg.c1);
    if cfg.use_velocity {
        embedder(p, &mut rng, "embed.vel", 3, cfg.c1, cfg.c1);
    }
    if cfg.uses_joint_type() {
        embedder(p, &mut rng, "embed.joint", cfg.joints, cfg.c1, cfg.c1);
    }
    if cfg.use_fi {
        embedder(p, &mut rng, "embed.frame", cfg.frames, cfg.c1, cfg.fi_width());
    }
    let graph_in = if cfg.use_jt_in_graph { 2 * cfg.c1 } else { cfg.c1 };
    dense(&mut params, &mut rng, "joint.theta", cfg.c2, graph_in, true);
    dense(&mut params, &mut rng, "joint.phi", cfg.c2, graph_in, true);
    let mut width = if cfg.use_jt_in_passing { 2 * cfg.c1 } else { cfg.c1 };
    for (l, &out) in cfg.gcn_sizes.iter().enumerate() {
        let prefix = format!("joint.gcn{}", l + 1);
        params.insert(format!("{prefix}.wy"), Tensor::xavier_uniform(&[out, width], width, out, &mut rng));
        params.insert(format!("{prefix}.wz"), Tensor::xavier_uniform(&[out, width], width, out, &mut rng));
        params.insert(format!("{prefix}.bn.gamma"), Tensor::ones(&[out]));
        params.insert(format!("{prefix}.bn.beta"), Tensor::zeros(&[out]));
        running.insert(format!("{prefix}.bn"), RunningStats::new(out));
        width = out;
    }
    let k = cfg.tconv_kernel;
    let convs = [("frame.cnn1", cfg.c3, cfg.c3, k), ("frame.cnn2", cfg.c4, cfg.c3, 1)];
    for (prefix, c_out, c_in, k) in convs {
        params.insert(
            format!("{prefix}.weight"),
            Tensor::xavier_uniform(&[c_out, c_in, k], c_in * k, c_out * k, &mut rng),
        );
        params.insert(format!("{prefix}.bn.gamma"), Tensor::ones(&[c_out]));
        params.insert(format!("{prefix}.bn.beta"), Tensor::zeros(&[c_out]));
        running.insert(format!("{prefix}.bn"), RunningStats::new(c_out));
    }
    dense(&mut params, &mut rng, "frame.fc", cfg.classes, cfg.c4, true);
    Ok(Model {
        config: cfg.clone(),
        params,
        running,
        step: 0,
    })
}

fn dense<S: Scalar>(
    params: &mut IndexMap<String, Tensor<S>>,
    rng: &mut ChaCha8Rng,
    name: &str,
    d_out: usize,
    d_in: usize,
    bias: bool,
) {
    params.insert(format!("{name}.weight"), Tensor::xavier_uniform(&[d_out, d_in], d_in, d_out, rng));
    if bias {
        params.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]));
    }
}

fn embedder<S: Scalar>(
    params: &mut IndexMap<String, Tensor<S>>,
    rng: &mut ChaCha8Rng,
    name: &str,
    d_in: usize,
    hidden: usize,
    d_out: usize,
) {
    dense(params, rng, &format!("{name}.fc1"), hidden, d_in, true);
    dense(params, rng, &format!("{name}.fc2"), d_out, hidden, true);
}

/// Parameter count of a config without materializing weights twice.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    Ok(build_model::<f32>(cfg, 0)?.count_parameters())
}
