//! The two pruning orderings as resumable step sequences.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::{Approach, DataSource, ExperimentConfig};
use super::history::{EvalRecord, Phase, RoundLog, RunHistory};
use super::reports::emit_reports;
use crate::datasets::{load_idx, split, synthetic_blobs, Dataset};
use crate::error::{Error, Result};
use crate::exitnet::{build_network, train_epoch, MultiExitNetwork, TrainSpec};
use crate::flopsmeter::{exit_cost_table, sweep_profile, time_share_envelope};
use crate::pruner::{prune_finetune_round, scope_sparsity, sparsity_report, MaskSet, PruneScope};
use crate::tensorcore::{ParamRef, Sgd};

pub const CHECKPOINT_FILE: &str = "checkpoint.eepn";
const LOCK_FILE: &str = ".exitprune.lock";

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Loads the configured source, splits it and optionally standardizes with
/// training-set statistics.
pub fn load_data(config: &ExperimentConfig) -> Result<Splits> {
    let data = match &config.data {
        DataSource::Idx { images, labels } => load_idx(images, labels)?,
        DataSource::Synthetic {
            classes,
            per_class,
            side,
        } => synthetic_blobs(*classes, *per_class, *side, config.seed)?,
    };
    let data = data.with_class_count(config.network.num_classes)?;
    if data.sample_shape() != config.network.input_shape {
        return Err(Error::config(format!(
            "data samples have shape {:?} but the network expects {:?}",
            data.sample_shape(),
            config.network.input_shape
        )));
    }
    let (train, _val, test) = split(&data, &config.split)?;
    let (mut train, mut test) = (
        train.ok_or_else(|| Error::data("empty training split"))?,
        test.ok_or_else(|| Error::data("empty test split"))?,
    );
    if config.standardize {
        let (mean, std) = train.pixel_mean_std();
        train.standardize(mean, std)?;
        test.standardize(mean, std)?;
    }
    Ok(Splits { train, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Step {
    Pretrain,
    Round { phase: Phase, round: u32 },
    AttachHeads { round: u32 },
}

fn plan(config: &ExperimentConfig) -> Vec<Step> {
    let mut steps = vec![Step::Pretrain];
    match config.approach {
        Approach::Joint => {
            steps.extend((1..=config.rounds as u32).map(|round| Step::Round {
                phase: Phase::Joint,
                round,
            }));
        }
        Approach::Ordered => {
            let a = config.rounds as u32;
            steps.extend((1..=a).map(|round| Step::Round {
                phase: Phase::Base,
                round,
            }));
            steps.push(Step::AttachHeads { round: a });
            steps.extend((1..=config.rounds_phase_b as u32).map(|r| Step::Round {
                phase: Phase::Heads,
                round: a + r,
            }));
        }
    }
    steps
}

/// Everything a run carries between steps.
#[derive(Clone, Debug)]
pub struct RunState {
    pub config: ExperimentConfig,
    pub net: MultiExitNetwork,
    pub masks: MaskSet,
    pub steps_done: u32,
    pub history: RunHistory,
}

impl RunState {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let net = match config.approach {
            Approach::Joint => build_network(config.network.clone(), config.seed)?,
            Approach::Ordered => MultiExitNetwork::build_base(config.network.clone(), config.seed)?,
        };
        let mut weights = net.backbone_weight_refs();
        weights.extend(net.head_weight_refs());
        let masks = MaskSet::dense_for(net.params(), &weights)?;
        Ok(Self {
            config,
            net,
            masks,
            steps_done: 0,
            history: RunHistory::default(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.config.to_text(),
            steps_done: self.steps_done,
            internal_attached: self.net.internal_heads_attached(),
            params: self.net.params().clone(),
            masks: self.masks.clone(),
            history: self.history.clone(),
        }
    }

    /// Rebuilds a state from a checkpoint; the network layout is derived from
    /// the embedded config.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let config = ExperimentConfig::parse(&ck.config_text)?;
        let mut state = Self::new(config)?;
        if ck.internal_attached && !state.net.internal_heads_attached() {
            state.net.attach_internal_heads(state.config.seed)?;
        }
        state.net.load_params(ck.params)?;
        if !ck.masks.holds_in(state.net.params()) {
            return Err(Error::state("checkpoint masks disagree with its parameters"));
        }
        state.masks = ck.masks;
        state.steps_done = ck.steps_done;
        state.history = ck.history;
        Ok(state)
    }

    pub fn is_complete(&self) -> bool {
        self.steps_done as usize >= plan(&self.config).len()
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from `checkpoint.eepn` in the output directory when present.
    pub resume: bool,
    /// Stop (without reports) once this many steps are done. Pretraining is
    /// step 1, each round or head attachment one more.
    pub stop_after_steps: Option<u32>,
    /// Print one progress line per step to stderr.
    pub verbose: bool,
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub output_dir: PathBuf,
    pub completed: bool,
    pub state: RunState,
}

/// Exclusive ownership of an output directory for the life of a run.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::state(format!(
                        "{} is locked by another run (remove {} if that run is gone)",
                        dir.display(),
                        path.display()
                    ))
                } else {
                    Error::io(&path, e)
                }
            })?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn trainable_heads(net: &MultiExitNetwork) -> BTreeSet<ParamRef> {
    net.active_exits()
        .into_iter()
        .flat_map(|j| {
            let name = &net.heads()[j].dense.name;
            [ParamRef::weight(name), ParamRef::bias(name)]
        })
        .collect()
}

fn scope_for(net: &MultiExitNetwork, phase: Phase) -> Result<PruneScope> {
    let refs = match phase {
        Phase::Joint => {
            let mut r = net.backbone_weight_refs();
            r.extend(net.head_weight_refs());
            r
        }
        Phase::Base => {
            let mut r = net.backbone_weight_refs();
            r.push(net.final_head_weight_ref());
            r
        }
        Phase::Heads => net.head_weight_refs(),
        Phase::Pretrained | Phase::Baseline => {
            return Err(Error::usage("no prune scope outside pruning rounds"))
        }
    };
    PruneScope::new(refs)
}

/// Test-set evaluation: forced accuracy per exit, cost table and, with all
/// heads attached, the threshold sweep and its envelope.
pub fn evaluate(
    net: &MultiExitNetwork,
    masks: &MaskSet,
    test: &Dataset,
    grid: &[f64],
    round: u32,
    phase: Phase,
) -> Result<EvalRecord> {
    let profile = net.exit_profile(test)?;
    let costs = exit_cost_table(net, masks)?;
    let forced_accuracy = (0..net.exit_count())
        .map(|j| {
            if net.is_active(j) {
                profile.forced_accuracy(j).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let (points, hull) = if net.internal_heads_attached() {
        let points = sweep_profile(&profile, &costs, grid)?;
        let curve = time_share_envelope(points)?;
        let hull = curve.hull.iter().map(|v| (v.flops, v.accuracy)).collect();
        (curve.points, hull)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(EvalRecord {
        round,
        phase,
        forced_accuracy,
        cumulative_cost: costs.cumulative_cost,
        points,
        hull,
    })
}

fn per_exit(net: &MultiExitNetwork, acc: &[f64]) -> Vec<Option<f64>> {
    let active = net.active_exits();
    (0..net.exit_count())
        .map(|j| active.iter().position(|&a| a == j).map(|k| acc[k]))
        .collect()
}

fn execute(state: &mut RunState, step: Step, step_index: u32, data: &Splits) -> Result<()> {
    let cfg = state.config.clone();
    let epoch_base = (step_index as u64) << 32;
    let all_trainable: Option<&BTreeSet<ParamRef>> = None;
    match step {
        Step::Pretrain => {
            let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum)?;
            let spec = TrainSpec {
                loss_weights: &cfg.loss_weights,
                batch_size: cfg.batch_size,
                shuffle_seed: cfg.seed,
                trainable: all_trainable,
            };
            for e in 0..cfg.pretrain_epochs {
                train_epoch(&mut state.net, &data.train, &state.masks, &mut opt, &spec, epoch_base + e as u64)?;
            }
            let phase = match cfg.approach {
                Approach::Joint => Phase::Baseline,
                Approach::Ordered => Phase::Pretrained,
            };
            let record = evaluate(&state.net, &state.masks, &data.test, &cfg.threshold_grid, 0, phase)?;
            state.history.evaluations.push(record);
        }
        Step::AttachHeads { round } => {
            state.net.attach_internal_heads(cfg.seed)?;
            let heads = state.net.head_weight_refs();
            state.masks.extend_dense(state.net.params(), &heads)?;
            let record = evaluate(
                &state.net,
                &state.masks,
                &data.test,
                &cfg.threshold_grid,
                round,
                Phase::Baseline,
            )?;
            state.history.evaluations.push(record);
        }
        Step::Round { phase, round } => {
            let scope = scope_for(&state.net, phase)?;
            let frozen = (phase == Phase::Heads && cfg.freeze_backbone_phase_b)
                .then(|| trainable_heads(&state.net));
            let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum)?;
            let spec = TrainSpec {
                loss_weights: &cfg.loss_weights,
                batch_size: cfg.batch_size,
                shuffle_seed: cfg.seed,
                trainable: frozen.as_ref(),
            };
            let test = &data.test;
            let outcome = prune_finetune_round(
                &mut state.net,
                &mut state.masks,
                &scope,
                cfg.prune_fraction,
                cfg.finetune_epochs,
                |net, masks, e| train_epoch(net, &data.train, masks, &mut opt, &spec, epoch_base + e as u64),
                |net| {
                    let profile = net.exit_profile(test)?;
                    net.active_exits()
                        .into_iter()
                        .map(|j| profile.forced_accuracy(j))
                        .collect()
                },
            )?;
            let losses = &outcome.epoch_losses;
            let log = RoundLog {
                round,
                phase,
                global_sparsity: outcome.report.global.sparsity,
                scope_sparsity: scope_sparsity(state.net.params(), &state.masks, &scope)?,
                newly_masked: outcome.newly_masked as u64,
                loss_first: losses.first().copied(),
                loss_last: losses.last().copied(),
                loss_mean: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
                pre_accuracy: per_exit(&state.net, &outcome.pre_accuracy),
                post_accuracy: per_exit(&state.net, &outcome.post_accuracy),
            };
            state.history.rounds.push(log);
            let record = evaluate(&state.net, &state.masks, test, &cfg.threshold_grid, round, phase)?;
            state.history.evaluations.push(record);
        }
    }
    state.steps_done = step_index + 1;
    Ok(())
}

fn progress_line(state: &RunState, step: Step, total: usize) -> String {
    let what = match step {
        Step::Pretrain => "pretrain".to_string(),
        Step::AttachHeads { .. } => "attach heads".to_string(),
        Step::Round { phase, round } => format!("{} round {round}", phase.as_str()),
    };
    let acc = state
        .history
        .evaluations
        .last()
        .map(|e| {
            e.forced_accuracy
                .iter()
                .map(|a| a.map_or("-".to_string(), |a| format!("{a:.4}")))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .unwrap_or_default();
    format!(
        "[{}/{}] {what}: global sparsity {:.4}, forced accuracy [{acc}]",
        state.steps_done,
        total,
        global_sparsity(state)
    )
}

/// Runs (or resumes) the configured experiment and writes its reports into
/// `config.output_dir`.
pub fn run(config: ExperimentConfig, options: &RunOptions) -> Result<RunArtifacts> {
    config.validate()?;
    super::alloc::keep_heap_mapped();
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let _lock = DirLock::acquire(&dir)?;
    let ck_path = dir.join(CHECKPOINT_FILE);

    let mut state = if options.resume && ck_path.exists() {
        let state = RunState::from_checkpoint(load_checkpoint(&ck_path)?)?;
        if !state.config.same_experiment(&config) {
            return Err(Error::config(format!(
                "{} belongs to a different experiment configuration",
                ck_path.display()
            )));
        }
        RunState { config, ..state }
    } else {
        RunState::new(config)?
    };

    let data = load_data(&state.config)?;
    let steps = plan(&state.config);
    while (state.steps_done as usize) < steps.len() {
        if options.stop_after_steps.is_some_and(|s| state.steps_done >= s) {
            return Ok(RunArtifacts {
                output_dir: dir,
                completed: false,
                state,
            });
        }
        let i = state.steps_done;
        execute(&mut state, steps[i as usize], i, &data)?;
        save_checkpoint(&state.to_checkpoint(), &ck_path)?;
        if options.verbose {
            eprintln!("{}", progress_line(&state, steps[i as usize], steps.len()));
        }
    }
    emit_reports(&state, &dir)?;
    Ok(RunArtifacts {
        output_dir: dir,
        completed: true,
        state,
    })
}

pub fn run_approach1(mut config: ExperimentConfig) -> Result<RunArtifacts> {
    config.approach = Approach::Joint;
    run(config, &RunOptions::default())
}

pub fn run_approach2(mut config: ExperimentConfig) -> Result<RunArtifacts> {
    config.approach = Approach::Ordered;
    run(config, &RunOptions::default())
}

/// Global sparsity of the current state, for quick inspection.
pub fn global_sparsity(state: &RunState) -> f64 {
    sparsity_report(state.net.params(), &state.masks).global.sparsity
}
