//! Sparsity-aware FLOPs accounting per exit, threshold sweeps and the
//! time-shared accuracy/FLOPs envelope.
//!
//! Convention: one multiply-accumulate is 2 FLOPs, bias additions count one
//! FLOP per output element, activations, pooling and flattening are free.
//! Pruned weights do not count.

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::exitnet::{ExitProfile, MultiExitNetwork};
use crate::pruner::MaskSet;
use crate::tensorcore::{LayerKind, LayerSpec, ParamRef};

/// FLOPs of one layer for one sample. `weight_nnz` is the surviving weight
/// count (the full weight size when `None`); `output_shape` excludes the
/// batch axis.
pub fn layer_flops(layer: &LayerSpec, weight_nnz: Option<usize>, output_shape: &[usize]) -> u64 {
    let full = layer
        .kind
        .param_shapes()
        .map_or(0, |(w, _)| w.iter().product::<usize>());
    let nnz = weight_nnz.unwrap_or(full) as u64;
    match layer.kind {
        LayerKind::Dense { out_features, .. } => 2 * nnz + out_features as u64,
        LayerKind::Conv2d { out_channels, .. } => {
            let positions = (output_shape[1] * output_shape[2]) as u64;
            2 * nnz * positions + out_channels as u64 * positions
        }
        LayerKind::Relu | LayerKind::MaxPool2 | LayerKind::GlobalAvgPool | LayerKind::Flatten => 0,
    }
}

/// Per-sample cost of reaching a decision at each exit.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitCostTable {
    /// Backbone FLOPs between consecutive taps (segment `j` ends at tap `j`).
    pub segment_costs: Vec<f64>,
    /// Cost of each head; zero for heads that are not attached.
    pub head_costs: Vec<f64>,
    /// Backbone prefix up to tap `j` plus every attached head `0..=j`.
    pub cumulative_cost: Vec<f64>,
}

impl ExitCostTable {
    pub fn from_parts(segment_costs: Vec<f64>, head_costs: Vec<f64>) -> Result<Self> {
        if segment_costs.len() != head_costs.len() || segment_costs.is_empty() {
            return Err(Error::usage(
                "segment and head cost lists must be non-empty and of equal length",
            ));
        }
        let mut acc = 0.0;
        let cumulative_cost = segment_costs
            .iter()
            .zip(&head_costs)
            .map(|(s, h)| {
                acc += s + h;
                acc
            })
            .collect();
        Ok(Self {
            segment_costs,
            head_costs,
            cumulative_cost,
        })
    }

    pub fn exit_count(&self) -> usize {
        self.cumulative_cost.len()
    }
}

pub fn exit_cost_table(net: &MultiExitNetwork, masks: &MaskSet) -> Result<ExitCostTable> {
    let config = net.config();
    let shapes = config.activation_shapes()?;
    let nnz = |layer: &LayerSpec| masks.nnz_of(&ParamRef::weight(&layer.name));
    let taps = config.taps();
    let mut segment_costs = Vec::with_capacity(taps.len());
    let mut start = 0;
    for &tap in &taps {
        let cost: u64 = (start..=tap)
            .map(|i| layer_flops(&config.backbone[i], nnz(&config.backbone[i]), &shapes[i]))
            .sum();
        segment_costs.push(cost as f64);
        start = tap + 1;
    }
    let head_costs = net
        .heads()
        .iter()
        .enumerate()
        .map(|(j, head)| {
            if net.is_active(j) {
                layer_flops(&head.dense, nnz(&head.dense), &[config.num_classes]) as f64
            } else {
                0.0
            }
        })
        .collect();
    ExitCostTable::from_parts(segment_costs, head_costs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub accuracy: f64,
    pub expected_flops: f64,
    /// Fraction of samples leaving at each of the K exits.
    pub exit_fractions: Vec<f64>,
}

/// Applies one threshold to a precomputed profile.
pub fn operating_point(profile: &ExitProfile, costs: &ExitCostTable, threshold: f64) -> Result<OperatingPoint> {
    let n = profile.len();
    if n == 0 {
        return Err(Error::data("empty dataset"));
    }
    let mut counts = vec![0usize; costs.exit_count()];
    let mut correct = 0usize;
    for i in 0..n {
        let (exit, pred) = profile.decide(i, threshold);
        counts[exit] += 1;
        if pred == profile.labels[i] {
            correct += 1;
        }
    }
    let exit_fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let expected_flops = exit_fractions
        .iter()
        .zip(&costs.cumulative_cost)
        .map(|(f, c)| f * c)
        .sum();
    Ok(OperatingPoint {
        threshold,
        accuracy: correct as f64 / n as f64,
        expected_flops,
        exit_fractions,
    })
}

pub fn evaluate_policy(net: &MultiExitNetwork, masks: &MaskSet, dataset: &Dataset, threshold: f64) -> Result<OperatingPoint> {
    if dataset.is_empty() {
        return Err(Error::data("empty dataset"));
    }
    let profile = net.exit_profile(dataset)?;
    operating_point(&profile, &exit_cost_table(net, masks)?, threshold)
}

/// 21 evenly spaced thresholds 0.00, 0.05, …, 1.00.
pub fn default_threshold_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

pub fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::config("threshold grid is empty"));
    }
    if let Some(t) = grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::config(format!("threshold {t} outside [0, 1]")));
    }
    Ok(())
}

pub fn sweep_profile(profile: &ExitProfile, costs: &ExitCostTable, grid: &[f64]) -> Result<Vec<OperatingPoint>> {
    check_grid(grid)?;
    grid.iter()
        .map(|&t| operating_point(profile, costs, t))
        .collect()
}

pub fn sweep_thresholds(
    net: &MultiExitNetwork,
    masks: &MaskSet,
    dataset: &Dataset,
    grid: &[f64],
) -> Result<Vec<OperatingPoint>> {
    check_grid(grid)?;
    let profile = net.exit_profile(dataset)?;
    sweep_profile(&profile, &exit_cost_table(net, masks)?, grid)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HullVertex {
    pub flops: f64,
    pub accuracy: f64,
    /// Index into the curve's points.
    pub point: usize,
}

/// Operating points and the upper concave envelope reachable by randomly
/// mixing two threshold policies.
#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffCurve {
    pub points: Vec<OperatingPoint>,
    /// Vertices in increasing FLOPs and strictly increasing accuracy.
    pub hull: Vec<HullVertex>,
}

/// Mixture realizing a budget: use `right` with probability `p_right`,
/// `left` otherwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mixture {
    pub left: usize,
    pub right: usize,
    pub p_right: f64,
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

pub fn time_share_envelope(points: Vec<OperatingPoint>) -> Result<TradeoffCurve> {
    if points.is_empty() {
        return Err(Error::usage("envelope of an empty point set"));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .expected_flops
            .total_cmp(&points[b].expected_flops)
            .then(points[b].accuracy.total_cmp(&points[a].accuracy))
            .then(a.cmp(&b))
    });
    let xy = |i: usize| (points[i].expected_flops, points[i].accuracy);
    let mut upper: Vec<usize> = Vec::new();
    for &i in &order {
        if let Some(&last) = upper.last() {
            if xy(last).0 == xy(i).0 {
                continue;
            }
        }
        while upper.len() >= 2 {
            let (a, b) = (upper[upper.len() - 2], upper[upper.len() - 1]);
            if cross(xy(a), xy(b), xy(i)) >= 0.0 {
                upper.pop();
            } else {
                break;
            }
        }
        upper.push(i);
    }
    // Past the most accurate vertex extra FLOPs buy nothing.
    let best = upper
        .iter()
        .enumerate()
        .fold(0, |best, (k, &i)| if xy(i).1 > xy(upper[best]).1 { k } else { best });
    upper.truncate(best + 1);
    let hull = upper
        .into_iter()
        .map(|i| HullVertex {
            flops: points[i].expected_flops,
            accuracy: points[i].accuracy,
            point: i,
        })
        .collect();
    Ok(TradeoffCurve { points, hull })
}

impl TradeoffCurve {
    pub fn min_flops(&self) -> f64 {
        self.hull[0].flops
    }

    pub fn max_flops(&self) -> f64 {
        self.hull[self.hull.len() - 1].flops
    }

    pub fn max_accuracy(&self) -> f64 {
        self.hull[self.hull.len() - 1].accuracy
    }

    pub fn min_accuracy(&self) -> f64 {
        self.hull[0].accuracy
    }

    /// Policy mixture whose expected cost equals `budget`, or `None` when the
    /// budget is below every policy. Budgets past the last vertex use it
    /// alone.
    pub fn mixture_at(&self, budget: f64) -> Option<Mixture> {
        let first = self.hull.first()?;
        if budget < first.flops {
            return None;
        }
        let last = self.hull.len() - 1;
        if budget >= self.hull[last].flops {
            return Some(Mixture {
                left: self.hull[last].point,
                right: self.hull[last].point,
                p_right: 1.0,
            });
        }
        let k = self.hull.windows(2).position(|w| budget < w[1].flops)?;
        let (a, b) = (self.hull[k], self.hull[k + 1]);
        Some(Mixture {
            left: a.point,
            right: b.point,
            p_right: (budget - a.flops) / (b.flops - a.flops),
        })
    }

    /// Best accuracy achievable on average within `budget` FLOPs.
    pub fn accuracy_at(&self, budget: f64) -> Option<f64> {
        let m = self.mixture_at(budget)?;
        let (l, r) = (&self.points[m.left], &self.points[m.right]);
        Some((1.0 - m.p_right) * l.accuracy + m.p_right * r.accuracy)
    }

    /// Smallest expected FLOPs reaching `accuracy`, or `None` when the
    /// envelope never gets there.
    pub fn flops_for(&self, accuracy: f64) -> Option<f64> {
        let first = self.hull.first()?;
        if accuracy <= first.accuracy {
            return Some(first.flops);
        }
        let k = self.hull.windows(2).position(|w| accuracy <= w[1].accuracy)?;
        let (a, b) = (self.hull[k], self.hull[k + 1]);
        Some(a.flops + (accuracy - a.accuracy) / (b.accuracy - a.accuracy) * (b.flops - a.flops))
    }
}
