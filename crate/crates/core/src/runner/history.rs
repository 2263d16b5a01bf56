use crate::flopsmeter::OperatingPoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Base network right after pretraining (ordered approach only).
    Pretrained,
    /// Reference evaluation before any head pruning: after joint pretraining,
    /// or right after internal heads are attached in the ordered approach.
    Baseline,
    /// A whole-network prune/fine-tune round.
    Joint,
    /// A base-network round (backbone + final classifier).
    Base,
    /// A head-only round.
    Heads,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Pretrained => "pretrained",
            Phase::Baseline => "baseline",
            Phase::Joint => "joint",
            Phase::Base => "base",
            Phase::Heads => "heads",
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            Phase::Pretrained => 0,
            Phase::Baseline => 1,
            Phase::Joint => 2,
            Phase::Base => 3,
            Phase::Heads => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Phase::Pretrained,
            1 => Phase::Baseline,
            2 => Phase::Joint,
            3 => Phase::Base,
            4 => Phase::Heads,
            _ => return None,
        })
    }
}

/// One completed prune/fine-tune round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub round: u32,
    pub phase: Phase,
    pub global_sparsity: f64,
    pub scope_sparsity: f64,
    pub newly_masked: u64,
    pub loss_first: Option<f64>,
    pub loss_last: Option<f64>,
    pub loss_mean: Option<f64>,
    /// Per exit (K entries), `None` for heads not attached.
    pub pre_accuracy: Vec<Option<f64>>,
    pub post_accuracy: Vec<Option<f64>>,
}

/// Test-set evaluation of the network at one point of the run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub round: u32,
    pub phase: Phase,
    pub forced_accuracy: Vec<Option<f64>>,
    pub cumulative_cost: Vec<f64>,
    /// Threshold sweep; empty while internal heads are not attached.
    pub points: Vec<OperatingPoint>,
    /// Envelope vertices `(flops, accuracy)`.
    pub hull: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunHistory {
    pub rounds: Vec<RoundLog>,
    pub evaluations: Vec<EvalRecord>,
}
