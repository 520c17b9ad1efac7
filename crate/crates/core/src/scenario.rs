//! Transfer scenarios and ablation variants, and the mapping from each
//! variant to its data streams and active loss terms.

use serde::{Deserialize, Serialize};

use crate::data::StreamMode;
use crate::error::{Error, Result};

/// The three supported transfer settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    /// Shared label space, unlabelled target; classification evaluation.
    Uda,
    /// Disjoint label spaces, k labels per target class; classification.
    SemiDlstl { k: usize },
    /// Disjoint label spaces, no target labels; retrieval evaluation.
    UnsupDlstl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Classification,
    Retrieval,
}

impl Scenario {
    pub fn eval_mode(&self) -> EvalMode {
        match self {
            Scenario::Uda | Scenario::SemiDlstl { .. } => EvalMode::Classification,
            Scenario::UnsupDlstl => EvalMode::Retrieval,
        }
    }

    /// DLSTL scenarios demand disjoint label spaces.
    pub fn requires_disjoint(&self) -> bool {
        !matches!(self, Scenario::Uda)
    }

    /// Whether the architecture carries a separate target classifier.
    pub fn has_target_head(&self) -> bool {
        matches!(self, Scenario::SemiDlstl { .. })
    }

    pub fn kshot(&self) -> Option<usize> {
        match self {
            Scenario::SemiDlstl { k } => Some(*k),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Uda => "uda",
            Scenario::SemiDlstl { .. } => "semi_dlstl",
            Scenario::UnsupDlstl => "unsup_dlstl",
        }
    }
}

/// Full model and its ablations/baselines. Each variant fixes a data-stream
/// mode and a set of active loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cfsm,
    SourceOnly,
    SourcePlusRegs,
    Ae,
    CfsmMinusGraph,
    CfsmClassicGraph,
    JointFt,
    TrainTarget,
    FtTarget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphTermMode {
    Off,
    /// Graph on the CFS activations regularising the features (the method).
    TopDown,
    /// Graph on the features regularising the CFS activations (ablation).
    Classic,
}

/// Which loss terms a (variant, scenario) pair activates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TermSet {
    pub supervised: bool,
    pub factorisation: bool,
    pub graph: GraphTermMode,
    pub target_entropy: bool,
    pub triplet: bool,
    pub ae: bool,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Cfsm => "cfsm",
            Variant::SourceOnly => "source_only",
            Variant::SourcePlusRegs => "source_plus_regs",
            Variant::Ae => "ae",
            Variant::CfsmMinusGraph => "cfsm_minus_graph",
            Variant::CfsmClassicGraph => "cfsm_classic_graph",
            Variant::JointFt => "joint_ft",
            Variant::TrainTarget => "train_target",
            Variant::FtTarget => "ft_target",
        }
    }

    pub fn stream_mode(&self) -> StreamMode {
        match self {
            Variant::Cfsm
            | Variant::Ae
            | Variant::CfsmMinusGraph
            | Variant::CfsmClassicGraph
            | Variant::JointFt => StreamMode::Joint,
            Variant::SourceOnly | Variant::SourcePlusRegs => StreamMode::SourceOnly,
            Variant::TrainTarget | Variant::FtTarget => StreamMode::TargetLabelledOnly,
        }
    }

    /// Joint variants start from a source pre-trained model; TrainTarget is
    /// the from-scratch baseline.
    pub fn needs_pretrain(&self) -> bool {
        !matches!(self, Variant::TrainTarget)
    }

    pub fn needs_ae_decoder(&self) -> bool {
        matches!(self, Variant::Ae)
    }

    pub fn compatible_with(&self, scenario: Scenario) -> Result<()> {
        match self {
            Variant::JointFt if !matches!(scenario, Scenario::Uda) => Err(Error::Config(format!(
                "variant joint_ft is a UDA baseline, not valid under {}",
                scenario.name()
            ))),
            Variant::TrainTarget | Variant::FtTarget
                if !matches!(scenario, Scenario::SemiDlstl { .. }) =>
            {
                Err(Error::Config(format!(
                    "variant {} needs labelled target data (semi_dlstl), not valid under {}",
                    self.name(),
                    scenario.name()
                )))
            }
            _ => Ok(()),
        }
    }

    /// The declared (streams, terms) tuple. Scenario extras: target softmax
    /// entropy for joint variants under UDA, triplet for supervised terms
    /// under retrieval evaluation.
    pub fn term_set(&self, scenario: Scenario) -> TermSet {
        let mut terms = match self {
            Variant::Cfsm | Variant::SourcePlusRegs => TermSet {
                supervised: true,
                factorisation: true,
                graph: GraphTermMode::TopDown,
                target_entropy: false,
                triplet: false,
                ae: false,
            },
            Variant::CfsmMinusGraph => TermSet {
                supervised: true,
                factorisation: true,
                graph: GraphTermMode::Off,
                target_entropy: false,
                triplet: false,
                ae: false,
            },
            Variant::CfsmClassicGraph => TermSet {
                supervised: true,
                factorisation: true,
                graph: GraphTermMode::Classic,
                target_entropy: false,
                triplet: false,
                ae: false,
            },
            Variant::Ae => TermSet {
                supervised: true,
                factorisation: false,
                graph: GraphTermMode::Off,
                target_entropy: false,
                triplet: false,
                ae: true,
            },
            Variant::SourceOnly | Variant::JointFt | Variant::TrainTarget | Variant::FtTarget => {
                TermSet {
                    supervised: true,
                    factorisation: false,
                    graph: GraphTermMode::Off,
                    target_entropy: false,
                    triplet: false,
                    ae: false,
                }
            }
        };
        if matches!(scenario, Scenario::Uda) && self.stream_mode() == StreamMode::Joint {
            terms.target_entropy = true;
        }
        if scenario.eval_mode() == EvalMode::Retrieval && terms.supervised {
            terms.triplet = true;
        }
        terms
    }
}
