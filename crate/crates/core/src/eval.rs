//! Test-time protocol, spatial-pooling reports and the ablation runner.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use indexmap::IndexMap;

use crate::data::{batch_to_tensor, prepare_clip, sequence_rng, DatasetManifest, SkeletonSequence, Split};
use crate::error::{Error, Result};
use crate::frame::{probabilities, rank_joints};
use crate::model::{build_model, count_parameters, Model, Preset, SpatialPool, Suite};
use crate::scalar::Scalar;
use crate::train::{argmax, train, TrainRecipe};

/// Sequences scored per forward pass.
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes without test samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`, counted per source recording.
    pub confusion: Vec<Vec<usize>>,
    pub samples: usize,
    pub seed: u64,
    /// `(source_id, label, predicted)` in first-seen order.
    pub predictions: Vec<(String, usize, usize)>,
}

impl EvalReport {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// Accuracy over test items whose true class is in `classes`.
    pub fn subset_accuracy(&self, classes: &[usize]) -> Option<f64> {
        let total: usize = classes.iter().map(|&c| self.confusion[c].iter().sum::<usize>()).sum();
        let hits: usize = classes.iter().map(|&c| self.confusion[c][c]).sum();
        (total > 0).then(|| hits as f64 / total as f64)
    }
}

/// Mean softmax scores of each sequence over `samples` clip samplings.
pub fn score_sequences<S: Scalar>(
    model: &Model<S>,
    seqs: &[&SkeletonSequence],
    samples: usize,
    seed: u64,
    ref_joint: usize,
) -> Result<Vec<Vec<f64>>> {
    if samples == 0 {
        return Err(Error::Config("at least one test-time sample is needed".into()));
    }
    let k = model.config().classes;
    let frames = model.config().frames;
    let mut scores = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let mut clips = Vec::with_capacity(chunk.len() * samples);
        for s in chunk {
            for i in 0..samples {
                let mut rng = sequence_rng(seed, i as u64, &s.id);
                clips.push(prepare_clip(s, frames, ref_joint, None, &mut rng)?);
            }
        }
        let (logits, _) = model.predict(&batch_to_tensor(&clips)?)?;
        let probs = probabilities(&logits);
        for rows in probs.data().chunks(k * samples) {
            let mut mean = vec![0.0; k];
            for row in rows.chunks(k) {
                for (m, &p) in mean.iter_mut().zip(row) {
                    *m += p.as_f64() / samples as f64;
                }
            }
            scores.push(mean);
        }
    }
    Ok(scores)
}

/// Evaluates on the test split: clip-sampled score averaging per sequence,
/// then score averaging over person tracks sharing a `source_id`.
pub fn evaluate<S: Scalar>(model: &Model<S>, manifest: &DatasetManifest, samples: usize, seed: u64) -> Result<EvalReport> {
    evaluate_with(model, manifest, samples, seed, 0)
}

pub fn evaluate_with<S: Scalar>(
    model: &Model<S>,
    manifest: &DatasetManifest,
    samples: usize,
    seed: u64,
    ref_joint: usize,
) -> Result<EvalReport> {
    let cfg = model.config();
    if cfg.joints != manifest.joints {
        return Err(Error::Schema(format!(
            "model expects {} joints, dataset has {}",
            cfg.joints, manifest.joints
        )));
    }
    if cfg.classes != manifest.classes {
        return Err(Error::Schema(format!(
            "model predicts {} classes, dataset has {}",
            cfg.classes, manifest.classes
        )));
    }
    let test: Vec<&SkeletonSequence> = manifest.split(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let scores = score_sequences(model, &test, samples, seed, ref_joint)?;
    let mut by_source: IndexMap<&str, (usize, Vec<f64>, usize)> = IndexMap::new();
    for (s, sc) in test.iter().zip(scores) {
        let entry = by_source
            .entry(s.source_id.as_str())
            .or_insert_with(|| (s.label, vec![0.0; cfg.classes], 0));
        if entry.0 != s.label {
            return Err(Error::Data(format!("tracks of {:?} disagree on the label", s.source_id)));
        }
        for (a, b) in entry.1.iter_mut().zip(&sc) {
            *a += b;
        }
        entry.2 += 1;
    }
    let k = cfg.classes;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut predictions = Vec::with_capacity(by_source.len());
    for (source, (label, sum, _)) in by_source {
        let pred = argmax(&sum);
        confusion[label][pred] += 1;
        predictions.push((source.to_string(), label, pred));
    }
    let total: usize = confusion.iter().flatten().sum();
    let hits: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    Ok(EvalReport {
        accuracy: hits as f64 / total as f64,
        per_class_accuracy,
        confusion,
        samples,
        seed,
        predictions,
    })
}

/// Joints most often selected by spatial max pooling on one clip of `seq`,
/// as `(joint, count)` pairs; counts over all joints sum to `T * C3`.
pub fn smp_report<S: Scalar>(model: &Model<S>, seq: &SkeletonSequence, top_k: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if model.step() == 0 {
        return Err(Error::State("model has not been trained".into()));
    }
    let cfg = model.config();
    if cfg.spatial_pool != SpatialPool::Max {
        return Err(Error::Config("this model has no spatial max pooling".into()));
    }
    if seq.num_joints() != cfg.joints {
        return Err(Error::Schema(format!(
            "sequence {:?} has {} joints, model expects {}",
            seq.id,
            seq.num_joints(),
            cfg.joints
        )));
    }
    let mut rng = sequence_rng(seed, 0, &seq.id);
    let clip = prepare_clip(seq, cfg.frames, 0, None, &mut rng)?;
    let (_, trace) = model.predict(&batch_to_tensor(std::slice::from_ref(&clip))?)?;
    let trace = trace.expect("max pooling yields a trace");
    Ok(rank_joints(&trace.joint_counts(0), top_k))
}

/// Dimensions at which parameter counts are compared with published values.
pub const REFERENCE_DIMS: (usize, usize, usize) = (25, 20, 60);
/// Allowed deviation from the published counts, in millions.
pub const COUNT_TOLERANCE_MILLIONS: f64 = 0.015;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub preset: Preset,
    /// Parameters at [`REFERENCE_DIMS`] and full width.
    pub params: usize,
    pub published_millions: f64,
    pub count_matches: bool,
    /// Parameters of the model actually trained.
    pub trained_params: Option<usize>,
    pub accuracy: Option<f64>,
    /// Accuracy restricted to each requested class group.
    pub group_accuracy: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub suite: Suite,
    pub rows: Vec<AblationRow>,
    pub seed: u64,
    pub groups: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub struct AblationOptions {
    /// Channel widths of trained models are divided by this.
    pub width_divisor: usize,
    pub samples: usize,
    pub seed: u64,
    /// Named class groups whose accuracy is reported separately.
    pub groups: Vec<(String, Vec<usize>)>,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            width_divisor: 1,
            samples: 5,
            seed: 0,
            groups: Vec::new(),
        }
    }
}

/// Counts, and with a dataset also trains and evaluates, every preset of a
/// suite. Counts are checked at [`REFERENCE_DIMS`] whatever the dataset.
pub fn run_ablation_suite<S: Scalar>(
    suite: Suite,
    manifest: Option<&DatasetManifest>,
    recipe: &TrainRecipe,
    opts: &AblationOptions,
) -> Result<AblationReport> {
    let (j, t, k) = REFERENCE_DIMS;
    let mut rows = Vec::new();
    for &preset in suite.presets() {
        let wrap = |e: Error| Error::Config(format!("preset {}: {e}", preset.name()));
        let params = count_parameters(&preset.config(j, t, k)).map_err(wrap)?;
        let published = preset.published_millions();
        let count_matches = (params as f64 / 1e6 - published).abs() <= COUNT_TOLERANCE_MILLIONS;
        let mut row = AblationRow {
            preset,
            params,
            published_millions: published,
            count_matches,
            trained_params: None,
            accuracy: None,
            group_accuracy: vec![None; opts.groups.len()],
        };
        if let Some(m) = manifest {
            let cfg = preset
                .config(m.joints, REFERENCE_DIMS.1, m.classes)
                .scaled_widths(opts.width_divisor);
            let model = build_model::<S>(&cfg, opts.seed).map_err(wrap)?;
            row.trained_params = Some(model.count_parameters());
            let run = TrainRecipe {
                seed: opts.seed,
                ..recipe.clone()
            };
            let trained = train(model, m, &run, &mut |_| {}).map_err(wrap)?;
            let report = evaluate(&trained.model, m, opts.samples, opts.seed)?;
            row.accuracy = Some(report.accuracy);
            row.group_accuracy = opts.groups.iter().map(|(_, g)| report.subset_accuracy(g)).collect();
        }
        rows.push(row);
    }
    Ok(AblationReport {
        suite,
        rows,
        seed: opts.seed,
        groups: opts.groups.clone(),
    })
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

impl AblationReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let groups: String = self.groups.iter().map(|(n, _)| format!(" {n} acc (%) |")).collect();
        let _ = writeln!(s, "| Method | Preset | #Params(M) | Published (M) | Count ok | Acc (%) |{groups}");
        let seps: String = self.groups.iter().map(|_| "---|").collect();
        let _ = writeln!(s, "|---|---|---|---|---|---|{seps}");
        for r in &self.rows {
            let g: String = r.group_accuracy.iter().map(|a| format!(" {} |", pct(*a))).collect();
            let _ = writeln!(
                s,
                "| {} | {} | {:.3} | {:.2} | {} | {} |{g}",
                r.preset.label(),
                r.preset.name(),
                r.params as f64 / 1e6,
                r.published_millions,
                if r.count_matches { "yes" } else { "no" },
                pct(r.accuracy),
            );
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "suite".to_string(),
            "preset".into(),
            "method".into(),
            "params".into(),
            "published_millions".into(),
            "count_matches".into(),
            "trained_params".into(),
            "accuracy".into(),
        ];
        header.extend(self.groups.iter().map(|(n, _)| format!("{n}_accuracy")));
        header.push("seed".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
            let mut rec = vec![
                self.suite.name().to_string(),
                r.preset.name().into(),
                r.preset.label().into(),
                r.params.to_string(),
                r.published_millions.to_string(),
                r.count_matches.to_string(),
                r.trained_params.map_or(String::new(), |p| p.to_string()),
                opt(r.accuracy),
            ];
            rec.extend(r.group_accuracy.iter().map(|a| opt(*a)));
            rec.push(self.seed.to_string());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }
}

/// Selection counts summed over many sequences, keyed by joint.
pub fn aggregate_smp<S: Scalar>(model: &Model<S>, seqs: &[&SkeletonSequence], seed: u64) -> Result<BTreeMap<usize, usize>> {
    let mut total = BTreeMap::new();
    for s in seqs {
        for (j, c) in smp_report(model, s, usize::MAX, seed)? {
            *total.entry(j).or_insert(0) += c;
        }
    }
    Ok(total)
}
