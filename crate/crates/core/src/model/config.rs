use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::PoolMode;

/// How the joint axis is removed before the temporal convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialPool {
    Max,
    Avg,
    /// Keep joints through the convolutions (weights shared across joints)
    /// and pool over frames and joints together at the end.
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub joints: usize,
    pub frames: usize,
    pub classes: usize,
    /// Width of the dynamics and joint-type embeddings.
    pub c1: usize,
    /// Width of the θ/φ affinity projections.
    pub c2: usize,
    /// Width of the joint-level output, frame-index embedding and first conv.
    pub c3: usize,
    /// Width of the second conv and the pooled feature.
    pub c4: usize,
    pub gcn_sizes: Vec<usize>,
    pub use_velocity: bool,
    pub use_jt_in_graph: bool,
    pub use_jt_in_passing: bool,
    pub use_fi: bool,
    pub tconv_kernel: usize,
    pub spatial_pool: SpatialPool,
    pub temporal_pool: PoolMode,
    pub global_graph: bool,
    pub data_augmentation: bool,
}

impl ModelConfig {
    /// Full model at the default widths.
    pub fn sgn(joints: usize, frames: usize, classes: usize) -> Self {
        Self {
            joints,
            frames,
            classes,
            c1: 64,
            c2: 256,
            c3: 256,
            c4: 512,
            gcn_sizes: vec![128, 256, 256],
            use_velocity: true,
            use_jt_in_graph: true,
            use_jt_in_passing: true,
            use_fi: true,
            tconv_kernel: 3,
            spatial_pool: SpatialPool::Max,
            temporal_pool: PoolMode::Max,
            global_graph: false,
            data_augmentation: true,
        }
    }

    /// Divides every channel width by `factor` (rounding up).
    pub fn scaled_widths(mut self, factor: usize) -> Self {
        let f = factor.max(1);
        for w in [&mut self.c1, &mut self.c2, &mut self.c3, &mut self.c4] {
            *w = w.div_ceil(f);
        }
        for w in &mut self.gcn_sizes {
            *w = w.div_ceil(f);
        }
        self
    }

    pub fn uses_joint_type(&self) -> bool {
        self.use_jt_in_graph || self.use_jt_in_passing
    }

    /// Output width of the frame-index encoder.
    pub fn fi_width(&self) -> usize {
        if self.global_graph {
            self.c1
        } else {
            self.c3
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let dims = [
            ("joints", self.joints),
            ("frames", self.frames),
            ("classes", self.classes),
            ("c1", self.c1),
            ("c2", self.c2),
            ("c3", self.c3),
            ("c4", self.c4),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.gcn_sizes.len() != 3 || self.gcn_sizes.contains(&0) {
            return bad(format!("gcn_sizes must be three positive widths, got {:?}", self.gcn_sizes));
        }
        if self.gcn_sizes[2] != self.c3 {
            return bad(format!(
                "last GCN width {} must equal c3 = {}",
                self.gcn_sizes[2], self.c3
            ));
        }
        if !matches!(self.tconv_kernel, 1 | 3) {
            return bad(format!("tconv_kernel must be 1 or 3, got {}", self.tconv_kernel));
        }
        if self.global_graph && self.spatial_pool != SpatialPool::None {
            return bad("a global graph mixes frames, so it requires spatial_pool = none".into());
        }
        Ok(())
    }
}

/// Named architecture variants, grouped into the three ablation suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    GraphNoJtPassNoJt,
    GraphJtPassNoJt,
    GraphNoJtPassJt,
    GraphJtPassJt,
    NoTconvNoFi,
    NoTconvFi,
    TconvNoFi,
    Sgn,
    SgnGlobalGraph,
    SgnNoSmp,
    Baseline,
    BaselineDa,
    BaselineDaVel,
    BaselineDaVelMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    Semantics,
    Hierarchy,
    Techniques,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Semantics, Suite::Hierarchy, Suite::Techniques];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Semantics => "table1",
            Suite::Hierarchy => "table2",
            Suite::Techniques => "table3",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown suite {name:?} (expected table1, table2 or table3)")))
    }

    pub fn presets(self) -> &'static [Preset] {
        use Preset::*;
        match self {
            Suite::Semantics => &[
                GraphNoJtPassNoJt,
                GraphJtPassNoJt,
                GraphNoJtPassJt,
                GraphJtPassJt,
                NoTconvNoFi,
                NoTconvFi,
                TconvNoFi,
                Sgn,
            ],
            Suite::Hierarchy => &[SgnGlobalGraph, SgnNoSmp, Sgn],
            Suite::Techniques => &[Baseline, BaselineDa, BaselineDaVel, BaselineDaVelMax],
        }
    }
}

impl Preset {
    pub const ALL: [Preset; 14] = [
        Preset::GraphNoJtPassNoJt,
        Preset::GraphJtPassNoJt,
        Preset::GraphNoJtPassJt,
        Preset::GraphJtPassJt,
        Preset::NoTconvNoFi,
        Preset::NoTconvFi,
        Preset::TconvNoFi,
        Preset::Sgn,
        Preset::SgnGlobalGraph,
        Preset::SgnNoSmp,
        Preset::Baseline,
        Preset::BaselineDa,
        Preset::BaselineDaVel,
        Preset::BaselineDaVelMax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::GraphNoJtPassNoJt => "g-nojt-p-nojt",
            Preset::GraphJtPassNoJt => "g-jt-p-nojt",
            Preset::GraphNoJtPassJt => "g-nojt-p-jt",
            Preset::GraphJtPassJt => "g-jt-p-jt",
            Preset::NoTconvNoFi => "notconv-nofi",
            Preset::NoTconvFi => "notconv-fi",
            Preset::TconvNoFi => "tconv-nofi",
            Preset::Sgn => "sgn",
            Preset::SgnGlobalGraph => "sgn-global-graph",
            Preset::SgnNoSmp => "sgn-no-smp",
            Preset::Baseline => "baseline",
            Preset::BaselineDa => "baseline-da",
            Preset::BaselineDaVel => "baseline-da-vel",
            Preset::BaselineDaVelMax => "baseline-da-vel-max",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Preset::GraphNoJtPassNoJt => "JL(G w/o JT & P w/o JT) & FL",
            Preset::GraphJtPassNoJt => "JL(G w JT & P w/o JT) & FL",
            Preset::GraphNoJtPassJt => "JL(G w/o JT & P w JT) & FL",
            Preset::GraphJtPassJt => "JL(G w JT & P w JT) & FL",
            Preset::NoTconvNoFi => "JL & FL(w/o T-Conv) w/o FI",
            Preset::NoTconvFi => "JL & FL(w/o T-Conv) w FI",
            Preset::TconvNoFi => "JL & FL(w T-Conv) w/o FI",
            Preset::Sgn => "SGN",
            Preset::SgnGlobalGraph => "SGN w G-GCN",
            Preset::SgnNoSmp => "SGN w/o SMP",
            Preset::Baseline => "Baseline",
            Preset::BaselineDa => "+ DA",
            Preset::BaselineDaVel => "+ Velocity",
            Preset::BaselineDaVelMax => "+ MaxPooling",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!("unknown preset {name:?} (expected one of {})", names.join(", ")))
            })
    }

    /// Published model size in millions of parameters at 25 joints, 20
    /// frames and 60 classes.
    pub fn published_millions(self) -> f64 {
        match self {
            Preset::GraphNoJtPassNoJt => 0.62,
            Preset::GraphJtPassNoJt => 0.66,
            Preset::GraphNoJtPassJt => 0.64,
            Preset::GraphJtPassJt => 0.67,
            Preset::NoTconvNoFi => 0.54,
            Preset::NoTconvFi => 0.56,
            Preset::TconvNoFi => 0.67,
            Preset::Sgn => 0.69,
            Preset::SgnGlobalGraph => 0.68,
            Preset::SgnNoSmp => 0.69,
            Preset::Baseline => 0.61,
            Preset::BaselineDa => 0.61,
            Preset::BaselineDaVel => 0.62,
            Preset::BaselineDaVelMax => 0.62,
        }
    }

    pub fn config(self, joints: usize, frames: usize, classes: usize) -> ModelConfig {
        let mut c = ModelConfig::sgn(joints, frames, classes);
        let jt = |c: &mut ModelConfig, g: bool, p: bool| {
            c.use_jt_in_graph = g;
            c.use_jt_in_passing = p;
        };
        match self {
            Preset::GraphNoJtPassNoJt | Preset::GraphJtPassNoJt | Preset::GraphNoJtPassJt | Preset::GraphJtPassJt => {
                c.use_fi = false;
                let g = matches!(self, Preset::GraphJtPassNoJt | Preset::GraphJtPassJt);
                let p = matches!(self, Preset::GraphNoJtPassJt | Preset::GraphJtPassJt);
                jt(&mut c, g, p);
            }
            Preset::NoTconvNoFi => {
                c.tconv_kernel = 1;
                c.use_fi = false;
            }
            Preset::NoTconvFi => c.tconv_kernel = 1,
            Preset::TconvNoFi => c.use_fi = false,
            Preset::Sgn => {}
            Preset::SgnGlobalGraph => {
                c.global_graph = true;
                c.spatial_pool = SpatialPool::None;
            }
            Preset::SgnNoSmp => c.spatial_pool = SpatialPool::None,
            Preset::Baseline | Preset::BaselineDa | Preset::BaselineDaVel | Preset::BaselineDaVelMax => {
                jt(&mut c, false, false);
                c.use_fi = false;
                c.use_velocity = !matches!(self, Preset::Baseline | Preset::BaselineDa);
                c.data_augmentation = self != Preset::Baseline;
                if self != Preset::BaselineDaVelMax {
                    c.spatial_pool = SpatialPool::Avg;
                    c.temporal_pool = PoolMode::Avg;
                }
            }
        }
        c
    }
}
