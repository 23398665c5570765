//! Procedural skeleton datasets with built-in hard class pairs.
//!
//! Besides generic trajectories, a layout always contains
//!
//! * a role-swap pair: one class is another with two joint columns exchanged,
//!   so both classes have the same set of joint coordinates in every frame and
//!   differ only in which joint carries which trajectory;
//! * a time-reversal pair: one class is another played backwards. The source
//!   of such a pair is usually an [`MotionTemplate::Excursion`], a closed walk
//!   `A → B → A → C → A` whose reversal visits exactly the same
//!   (position, velocity) states, only in a different order.
//!
//! Joint 0 never moves, which keeps it a clean translation reference.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::preprocess::sequence_rng;
use super::sequence::{DatasetManifest, Joint, SkeletonSequence, Split};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionTemplate {
    /// One joint rises along an arc.
    Lift { joint: usize },
    /// The listed joints travel out to pose B, back, out to pose C, and back.
    Excursion { joints: Vec<usize> },
    /// Seeded sinusoidal motion of two joints.
    Generic { motion: u64 },
    /// Class `source` with joint columns `joint_a` and `joint_b` exchanged.
    RoleSwap {
        source: usize,
        joint_a: usize,
        joint_b: usize,
    },
    /// Class `source` played backwards.
    Reversed { source: usize },
}

impl MotionTemplate {
    fn source(&self) -> Option<usize> {
        match self {
            MotionTemplate::RoleSwap { source, .. } | MotionTemplate::Reversed { source } => Some(*source),
            _ => None,
        }
    }

    fn short_name(&self) -> String {
        match self {
            MotionTemplate::Lift { joint } => format!("lift_j{joint}"),
            MotionTemplate::Excursion { .. } => "excursion".into(),
            MotionTemplate::Generic { motion } => format!("generic_{motion}"),
            MotionTemplate::RoleSwap { source, .. } => format!("swap_of_{source}"),
            MotionTemplate::Reversed { source } => format!("reverse_of_{source}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub joints: usize,
    pub classes: usize,
    pub frames: usize,
    /// One template per class; empty selects [`SyntheticConfig::default_layout`].
    #[serde(default)]
    pub templates: Vec<MotionTemplate>,
    /// Standard deviation of per-coordinate Gaussian noise, meters.
    pub noise_std: f64,
    pub sequences_per_class: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub seed: u64,
}

fn default_test_fraction() -> f64 {
    0.25
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            joints: 15,
            classes: 8,
            frames: 20,
            templates: Vec::new(),
            noise_std: 0.01,
            sequences_per_class: 200,
            test_fraction: default_test_fraction(),
            seed: 0,
        }
    }
}

/// Class ids of the built-in hard pairs in the default layout.
pub const SWAP_PAIR: (usize, usize) = (0, 1);
pub const REVERSAL_PAIR: (usize, usize) = (2, 3);

impl SyntheticConfig {
    /// Classes 0/1 are "hand up" and its role swap with the "foot" joint,
    /// classes 2/3 an excursion and its reversal, the rest generic motions.
    pub fn default_layout(joints: usize, classes: usize) -> Vec<MotionTemplate> {
        let hand = joints.saturating_sub(1);
        let foot = joints.saturating_sub(2);
        let mut t = vec![
            MotionTemplate::Lift { joint: hand },
            MotionTemplate::RoleSwap {
                source: 0,
                joint_a: hand,
                joint_b: foot,
            },
            MotionTemplate::Excursion { joints: vec![1, 2] },
            MotionTemplate::Reversed { source: 2 },
        ];
        t.extend((4..classes).map(|k| MotionTemplate::Generic { motion: k as u64 }));
        t.truncate(classes.max(4));
        t
    }

    pub fn templates(&self) -> Vec<MotionTemplate> {
        if self.templates.is_empty() {
            Self::default_layout(self.joints, self.classes)
        } else {
            self.templates.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.joints < 3 {
            return bad(format!("synthetic data needs at least 3 joints, got {}", self.joints));
        }
        if self.frames < 5 {
            return bad(format!("synthetic data needs at least 5 frames, got {}", self.frames));
        }
        if self.templates.is_empty() && (self.classes < 4 || self.joints < 5) {
            return bad("the default layout needs at least 4 classes and 5 joints".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if self.sequences_per_class == 0 {
            return bad("sequences_per_class must be positive".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction));
        }
        let templates = self.templates();
        if templates.len() != self.classes {
            return bad(format!("{} templates for {} classes", templates.len(), self.classes));
        }
        let joint_ok = |j: usize| j >= 1 && j < self.joints;
        for (k, t) in templates.iter().enumerate() {
            if let Some(src) = t.source() {
                if src >= self.classes || src == k || templates[src].source().is_some() {
                    return bad(format!("class {k}: source {src} must be a different, non-derived class"));
                }
            }
            let joints_valid = match t {
                MotionTemplate::Lift { joint } => joint_ok(*joint),
                MotionTemplate::Excursion { joints } => !joints.is_empty() && joints.iter().all(|&j| joint_ok(j)),
                MotionTemplate::RoleSwap { joint_a, joint_b, .. } => {
                    joint_ok(*joint_a) && joint_ok(*joint_b) && joint_a != joint_b
                }
                _ => true,
            };
            if !joints_valid {
                return bad(format!("class {k}: template joints must be distinct and in 1..{}", self.joints));
            }
        }
        let has = |f: fn(&MotionTemplate) -> bool| templates.iter().any(f);
        if !has(|t| matches!(t, MotionTemplate::RoleSwap { .. })) || !has(|t| matches!(t, MotionTemplate::Reversed { .. })) {
            return bad("layout needs at least one role-swap and one reversed class".into());
        }
        Ok(())
    }
}

/// Per-sequence nuisance factors.
struct Variation {
    amplitude: f64,
    jitter: Vec<Joint>,
    offset: Joint,
}

impl Variation {
    fn identity(joints: usize) -> Self {
        Self {
            amplitude: 1.0,
            jitter: vec![[0.0; 3]; joints],
            offset: [0.0; 3],
        }
    }

    fn draw<R: Rng>(joints: usize, rng: &mut R) -> Self {
        let n = Normal::new(0.0, 0.03).expect("valid normal");
        let mut jitter = vec![[0.0; 3]; joints];
        for p in jitter.iter_mut().skip(1) {
            *p = [n.sample(rng), n.sample(rng), n.sample(rng)];
        }
        Self {
            amplitude: rng.random_range(0.75..1.25),
            jitter,
            offset: [rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2), rng.random_range(-1.0..1.0)],
        }
    }
}

fn base_pose(cfg: &SyntheticConfig) -> Vec<Joint> {
    let mut rng = sequence_rng(cfg.seed, 0x905e, "base-pose");
    (0..cfg.joints)
        .map(|k| {
            if k == 0 {
                [0.0; 3]
            } else {
                [
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.9..0.8),
                    rng.random_range(-0.15..0.15),
                ]
            }
        })
        .collect()
}

fn add(p: Joint, d: Joint, s: f64) -> Joint {
    [p[0] + s * d[0], p[1] + s * d[1], p[2] + s * d[2]]
}

fn render(cfg: &SyntheticConfig, templates: &[MotionTemplate], class: usize, base: &[Joint], var: &Variation) -> Vec<Vec<Joint>> {
    let t_len = cfg.frames;
    let pose: Vec<Joint> = base
        .iter()
        .zip(&var.jitter)
        .map(|(&b, &j)| add(add(b, j, 1.0), var.offset, 1.0))
        .collect();
    let mut frames = vec![pose.clone(); t_len];
    let a = var.amplitude;
    let s_of = |t: usize| t as f64 / (t_len - 1) as f64;
    match &templates[class] {
        MotionTemplate::Lift { joint } => {
            for (t, f) in frames.iter_mut().enumerate() {
                let s = s_of(t);
                let rise = s * s * (3.0 - 2.0 * s);
                let arc = (std::f64::consts::PI * s).sin();
                f[*joint] = add(f[*joint], [0.1 * arc, 0.6 * rise, 0.25 * arc], a);
            }
        }
        MotionTemplate::Excursion { joints } => {
            let seg = (t_len - 1) / 4;
            let keys: [Joint; 5] = [[0.0; 3], [0.35, 0.25, 0.1], [0.0; 3], [-0.35, 0.25, -0.1], [0.0; 3]];
            for (t, f) in frames.iter_mut().enumerate() {
                let d = if t >= 4 * seg {
                    keys[4]
                } else {
                    let i = t / seg;
                    let w = (t % seg) as f64 / seg as f64;
                    let (p, q) = (keys[i], keys[i + 1]);
                    [0, 1, 2].map(|c| p[c] + w * (q[c] - p[c]))
                };
                for (r, &j) in joints.iter().enumerate() {
                    let scale = a / (1.0 + 0.5 * r as f64);
                    f[j] = add(f[j], d, scale);
                }
            }
        }
        MotionTemplate::Generic { motion } => {
            let mut rng = sequence_rng(cfg.seed, *motion, "generic-motion");
            let picks: Vec<usize> = (0..2).map(|_| rng.random_range(1..cfg.joints)).collect();
            for &j in &picks {
                let dir: Joint = [0, 1, 2].map(|_| rng.random_range(-0.4..0.4));
                let freq = [0.5, 1.0, 1.5][rng.random_range(0..3)];
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                for (t, f) in frames.iter_mut().enumerate() {
                    let w = (std::f64::consts::TAU * freq * s_of(t) + phase).sin();
                    f[j] = add(f[j], dir, a * w);
                }
            }
        }
        MotionTemplate::RoleSwap { source, joint_a, joint_b } => {
            frames = render(cfg, templates, *source, base, var);
            for f in frames.iter_mut() {
                f.swap(*joint_a, *joint_b);
            }
        }
        MotionTemplate::Reversed { source } => {
            frames = render(cfg, templates, *source, base, var);
            frames.reverse();
        }
    }
    frames
}

/// Noise-free template of `class` with no per-sequence variation.
pub fn class_template(cfg: &SyntheticConfig, class: usize) -> Result<Vec<Vec<Joint>>> {
    cfg.validate()?;
    if class >= cfg.classes {
        return Err(Error::Config(format!("class {class} out of range for {} classes", cfg.classes)));
    }
    let templates = cfg.templates();
    Ok(render(cfg, &templates, class, &base_pose(cfg), &Variation::identity(cfg.joints)))
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let templates = cfg.templates();
    let base = base_pose(cfg);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let class_names = templates
        .iter()
        .enumerate()
        .map(|(k, t)| format!("{k:02}_{}", t.short_name()))
        .collect();
    let mut manifest = DatasetManifest::new(cfg.joints, cfg.classes, class_names);
    let n = cfg.sequences_per_class;
    let n_test = (cfg.test_fraction * n as f64).round() as usize;
    for class in 0..cfg.classes {
        let mut order: Vec<usize> = (0..n).collect();
        let mut split_rng = sequence_rng(cfg.seed, class as u64, "split");
        for i in (1..n).rev() {
            order.swap(i, split_rng.random_range(0..=i));
        }
        let mut is_test = vec![false; n];
        for &i in &order[..n_test] {
            is_test[i] = true;
        }
        for (i, &test) in is_test.iter().enumerate() {
            let id = format!("c{class:02}_s{i:04}");
            let mut rng = sequence_rng(cfg.seed, 0x5e9, &id);
            let var = Variation::draw(cfg.joints, &mut rng);
            let mut frames = render(cfg, &templates, class, &base, &var);
            if cfg.noise_std > 0.0 {
                for p in frames.iter_mut().flatten() {
                    for c in p.iter_mut() {
                        *c += noise.sample(&mut rng);
                    }
                }
            }
            let split = if test { Split::Test } else { Split::Train };
            manifest.sequences.push(SkeletonSequence::new(id, class, split, frames));
        }
    }
    Ok(manifest)
}
