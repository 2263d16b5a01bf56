//! Multi-exit networks: a backbone with pooled linear heads tapped at
//! intermediate depths, the joint training objective, confidence scores and
//! threshold-based early-exit inference.

use std::collections::{BTreeMap, BTreeSet};

use crate::datasets::{batches, Dataset};
use crate::error::{Error, Result};
use crate::pruner::MaskSet;
use crate::tensorcore::{
    forward, init_layer_params, LayerKind, LayerSpec, ParamRef, ParamStore, Sgd, Tape,
    Tensor, Var,
};

/// Samples per chunk in batched evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub backbone: Vec<LayerSpec>,
    /// Backbone indices after which an internal head is attached. The output
    /// of the last backbone layer always feeds the final head.
    pub exit_after: Vec<usize>,
    pub num_classes: usize,
    /// `(channels, height, width)`.
    pub input_shape: [usize; 3],
}

impl NetworkConfig {
    /// Three conv blocks with exits after the first two pools.
    pub fn desk_default(num_classes: usize, input_shape: [usize; 3]) -> Self {
        let c = input_shape[0];
        let backbone = vec![
            LayerSpec::new("conv1", LayerKind::conv3x3(c, 8)),
            LayerSpec::new("relu1", LayerKind::Relu),
            LayerSpec::new("pool1", LayerKind::MaxPool2),
            LayerSpec::new("conv2", LayerKind::conv3x3(8, 16)),
            LayerSpec::new("relu2", LayerKind::Relu),
            LayerSpec::new("pool2", LayerKind::MaxPool2),
            LayerSpec::new("conv3", LayerKind::conv3x3(16, 32)),
            LayerSpec::new("relu3", LayerKind::Relu),
        ];
        Self {
            backbone,
            exit_after: vec![2, 5],
            num_classes,
            input_shape,
        }
    }

    /// Number of exits including the final classifier.
    pub fn exit_count(&self) -> usize {
        self.exit_after.len() + 1
    }

    pub fn head_name(&self, exit: usize) -> String {
        format!("head{exit}")
    }

    /// Backbone index feeding each head, in exit order.
    pub fn taps(&self) -> Vec<usize> {
        let mut taps = self.exit_after.clone();
        taps.push(self.backbone.len().saturating_sub(1));
        taps
    }

    /// Validates the layer list and exit positions and returns the
    /// per-sample activation shape after every backbone layer.
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.backbone.is_empty() {
            return Err(Error::config("backbone has no layers"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::config(format!(
                "input shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        let mut names = BTreeSet::new();
        for layer in &self.backbone {
            layer.validate()?;
            if !names.insert(layer.name.as_str()) {
                return Err(Error::config(format!(
                    "duplicate layer name '{}'",
                    layer.name
                )));
            }
        }
        for j in 0..self.exit_count() {
            if names.contains(self.head_name(j).as_str()) {
                return Err(Error::config(format!(
                    "layer name '{}' collides with a head name",
                    self.head_name(j)
                )));
            }
        }
        if self.exit_after.is_empty() {
            return Err(Error::config(
                "exit_after is empty: a multi-exit network needs at least one internal exit",
            ));
        }
        let last = self.backbone.len() - 1;
        let mut prev: Option<usize> = None;
        for &idx in &self.exit_after {
            if idx >= last {
                return Err(Error::config(format!(
                    "exit_after index {idx} invalid: must be below {last} (the final backbone layer feeds the last exit)"
                )));
            }
            if prev.is_some_and(|p| idx <= p) {
                return Err(Error::config(format!(
                    "exit_after index {idx} invalid: indices must be strictly increasing"
                )));
            }
            prev = Some(idx);
        }
        let mut shape = self.input_shape.to_vec();
        let mut shapes = Vec::with_capacity(self.backbone.len());
        for layer in &self.backbone {
            shape = layer.output_shape(&shape)?;
            shapes.push(shape.clone());
        }
        for (j, &tap) in self.taps().iter().enumerate() {
            head_spec(&self.head_name(j), &shapes[tap], self.num_classes)?;
        }
        Ok(shapes)
    }
}

/// Head over an activation: global average pooling for `[c, h, w]` maps,
/// then a dense layer to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub tap: usize,
    pub pool: bool,
    pub dense: LayerSpec,
}

fn head_spec(name: &str, tap_shape: &[usize], classes: usize) -> Result<(bool, LayerSpec)> {
    let (pool, features) = match *tap_shape {
        [c, _, _] => (true, c),
        [f] => (false, f),
        _ => {
            return Err(Error::config(format!(
                "head '{name}' cannot attach to activation of shape {tap_shape:?}"
            )))
        }
    };
    Ok((
        pool,
        LayerSpec::new(
            name,
            LayerKind::Dense {
                in_features: features,
                out_features: classes,
            },
        ),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiExitNetwork {
    config: NetworkConfig,
    params: ParamStore,
    heads: Vec<Head>,
    internal_attached: bool,
}

/// Builds the full network with all heads initialized from `seed`.
pub fn build_network(config: NetworkConfig, seed: u64) -> Result<MultiExitNetwork> {
    let mut net = MultiExitNetwork::build_base(config, seed)?;
    net.attach_internal_heads(seed)?;
    Ok(net)
}

impl MultiExitNetwork {
    /// Backbone plus final classifier only; internal heads are attached later
    /// with [`MultiExitNetwork::attach_internal_heads`].
    pub fn build_base(config: NetworkConfig, seed: u64) -> Result<Self> {
        let shapes = config.activation_shapes()?;
        let mut params = ParamStore::new();
        for layer in &config.backbone {
            if let Some((w, b)) = init_layer_params(&layer.kind, &layer.name, seed) {
                params.insert(ParamRef::weight(&layer.name), w)?;
                params.insert(ParamRef::bias(&layer.name), b)?;
            }
        }
        let heads = config
            .taps()
            .iter()
            .enumerate()
            .map(|(j, &tap)| {
                let (pool, dense) = head_spec(&config.head_name(j), &shapes[tap], config.num_classes)?;
                Ok(Head { tap, pool, dense })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut net = Self {
            config,
            params,
            heads,
            internal_attached: false,
        };
        let last = net.heads.len() - 1;
        net.init_head(last, seed)?;
        Ok(net)
    }

    fn init_head(&mut self, j: usize, seed: u64) -> Result<()> {
        let dense = &self.heads[j].dense;
        let (w, b) = init_layer_params(&dense.kind, &dense.name, seed)
            .expect("heads are dense layers");
        let name = dense.name.clone();
        self.params.insert(ParamRef::weight(&name), w)?;
        self.params.insert(ParamRef::bias(&name), b)?;
        Ok(())
    }

    /// Adds freshly initialized internal heads.
    pub fn attach_internal_heads(&mut self, seed: u64) -> Result<()> {
        if self.internal_attached {
            return Err(Error::state("internal heads are already attached"));
        }
        for j in 0..self.heads.len() - 1 {
            self.init_head(j, seed)?;
        }
        self.internal_attached = true;
        Ok(())
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces all parameters, e.g. from a checkpoint. Names and shapes must
    /// match the current network.
    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        let expect: Vec<_> = self.params.iter().map(|(r, t)| (r.clone(), t.shape().to_vec())).collect();
        let got: Vec<_> = params.iter().map(|(r, t)| (r.clone(), t.shape().to_vec())).collect();
        if expect != got {
            return Err(Error::state("parameter set does not match the network layout"));
        }
        self.params = params;
        Ok(())
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn internal_heads_attached(&self) -> bool {
        self.internal_attached
    }

    /// Total number of exits K in the configuration.
    pub fn exit_count(&self) -> usize {
        self.heads.len()
    }

    /// Exit indices whose heads currently exist, in order.
    pub fn active_exits(&self) -> Vec<usize> {
        if self.internal_attached {
            (0..self.heads.len()).collect()
        } else {
            vec![self.heads.len() - 1]
        }
    }

    pub fn is_active(&self, exit: usize) -> bool {
        exit < self.heads.len() && (self.internal_attached || exit == self.heads.len() - 1)
    }

    pub fn backbone_weight_refs(&self) -> Vec<ParamRef> {
        self.config
            .backbone
            .iter()
            .filter(|l| l.kind.has_params())
            .map(|l| ParamRef::weight(&l.name))
            .collect()
    }

    /// Weight refs of the heads that currently exist.
    pub fn head_weight_refs(&self) -> Vec<ParamRef> {
        self.active_exits()
            .into_iter()
            .map(|j| ParamRef::weight(&self.heads[j].dense.name))
            .collect()
    }

    pub fn final_head_weight_ref(&self) -> ParamRef {
        ParamRef::weight(&self.heads[self.heads.len() - 1].dense.name)
    }

    fn layer_params(&self, layer: &LayerSpec) -> Result<Option<(&Tensor, &Tensor)>> {
        if !layer.kind.has_params() {
            return Ok(None);
        }
        Ok(Some((
            self.params.get(&ParamRef::weight(&layer.name))?,
            self.params.get(&ParamRef::bias(&layer.name))?,
        )))
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let shape = batch.shape();
        if shape.len() != 4 || shape[1..] != self.config.input_shape {
            return Err(Error::data(format!(
                "batch of shape {shape:?} does not match input shape [n, {}, {}, {}]",
                self.config.input_shape[0], self.config.input_shape[1], self.config.input_shape[2]
            )));
        }
        Ok(())
    }

    /// Logits of head `j` on a tapped activation.
    fn head_logits(&self, j: usize, activation: &Tensor) -> Result<Tensor> {
        let head = &self.heads[j];
        let pooled;
        let input = if head.pool {
            pooled = forward(
                &LayerSpec::new("gap", LayerKind::GlobalAvgPool),
                None,
                activation,
            )?;
            &pooled
        } else {
            activation
        };
        forward(&head.dense, self.layer_params(&head.dense)?, input)
    }

    /// Logits of every active head, `[batch, classes]` each. The backbone is
    /// evaluated once; each head reads its tap.
    pub fn forward_all_exits(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        self.check_batch(batch)?;
        let active = self.active_exits();
        let mut out = Vec::with_capacity(active.len());
        let mut next = 0;
        let mut x = batch.clone();
        for (i, layer) in self.config.backbone.iter().enumerate() {
            x = forward(layer, self.layer_params(layer)?, &x)?;
            while next < active.len() && self.heads[active[next]].tap == i {
                out.push(self.head_logits(active[next], &x)?);
                next += 1;
            }
        }
        Ok(out)
    }

    /// Logits of active heads up to and including `exit`, evaluating only the
    /// backbone prefix that feeds it.
    pub fn forward_prefix(&self, batch: &Tensor, exit: usize) -> Result<Vec<Tensor>> {
        self.check_batch(batch)?;
        if !self.is_active(exit) {
            return Err(Error::usage(format!("exit {exit} is not attached")));
        }
        let active: Vec<usize> = self.active_exits().into_iter().filter(|&j| j <= exit).collect();
        let stop = self.heads[exit].tap;
        let mut out = Vec::new();
        let mut next = 0;
        let mut x = batch.clone();
        for (i, layer) in self.config.backbone.iter().enumerate().take(stop + 1) {
            x = forward(layer, self.layer_params(layer)?, &x)?;
            while next < active.len() && self.heads[active[next]].tap == i {
                out.push(self.head_logits(active[next], &x)?);
                next += 1;
            }
        }
        Ok(out)
    }

    /// Records the forward pass on `tape`. Parameters in `trainable` (all,
    /// when `None`) become differentiable leaves.
    fn record(
        &self,
        tape: &mut Tape,
        batch: Tensor,
        trainable: Option<&BTreeSet<ParamRef>>,
    ) -> Result<(Vec<Var>, BTreeMap<ParamRef, Var>)> {
        let mut vars = BTreeMap::new();
        for (r, t) in self.params.iter() {
            let v = if trainable.is_none_or(|s| s.contains(r)) {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.insert(r.clone(), v);
        }
        let param_vars = |layer: &LayerSpec| -> Option<(Var, Var)> {
            layer.kind.has_params().then(|| {
                (
                    vars[&ParamRef::weight(&layer.name)],
                    vars[&ParamRef::bias(&layer.name)],
                )
            })
        };
        let active = self.active_exits();
        let gap = LayerSpec::new("gap", LayerKind::GlobalAvgPool);
        let mut logits = Vec::with_capacity(active.len());
        let mut next = 0;
        let mut x = tape.constant(batch);
        for (i, layer) in self.config.backbone.iter().enumerate() {
            x = tape.layer(layer, param_vars(layer), x)?;
            while next < active.len() && self.heads[active[next]].tap == i {
                let head = &self.heads[active[next]];
                let h = if head.pool { tape.layer(&gap, None, x)? } else { x };
                logits.push(tape.layer(&head.dense, param_vars(&head.dense), h)?);
                next += 1;
            }
        }
        Ok((logits, vars))
    }

    /// Forward, joint loss and backward on one batch; gradients land in the
    /// parameters' grad buffers (non-trainable parameters get none).
    pub fn compute_gradients(
        &mut self,
        images: Tensor,
        labels: &[usize],
        loss_weights: &[f64],
        trainable: Option<&BTreeSet<ParamRef>>,
    ) -> Result<f64> {
        self.check_batch(&images)?;
        let mut tape = Tape::new();
        let (logits, vars) = self.record(&mut tape, images, trainable)?;
        let loss = joint_loss(&mut tape, &logits, labels, loss_weights)?;
        let value = tape.value(loss)?.data()[0];
        let grads = tape.backward(loss)?;
        for (r, t) in self.params.iter_mut() {
            if trainable.is_none_or(|s| s.contains(r)) {
                t.set_grad(grads.wrt(vars[r])?.to_vec())?;
            } else {
                t.clear_grad();
            }
        }
        Ok(value)
    }

    /// Prediction and confidence of every active head for every sample.
    pub fn exit_profile(&self, dataset: &Dataset) -> Result<ExitProfile> {
        let n = dataset.len();
        if n == 0 {
            return Err(Error::data("empty dataset"));
        }
        let exits = self.active_exits();
        let mut predictions = vec![Vec::with_capacity(n); exits.len()];
        let mut confidences = vec![Vec::with_capacity(n); exits.len()];
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let batch = dataset.images().slice_batch(start, end)?;
            for (k, logits) in self.forward_all_exits(&batch)?.iter().enumerate() {
                let classes = logits.shape()[1];
                for row in logits.data().chunks(classes) {
                    predictions[k].push(argmax(row));
                    confidences[k].push(confidence(row));
                }
            }
        }
        Ok(ExitProfile {
            exits,
            predictions,
            confidences,
            labels: dataset.labels().to_vec(),
        })
    }
}

/// `Σ_j weights[j] · CE(logits[j], labels)` recorded on the tape.
pub fn joint_loss(tape: &mut Tape, logits: &[Var], labels: &[usize], weights: &[f64]) -> Result<Var> {
    check_loss_weights(weights, logits.len())?;
    let mut total: Option<Var> = None;
    for (&l, &w) in logits.iter().zip(weights) {
        let ce = tape.softmax_cross_entropy(l, labels)?;
        let term = tape.scale(ce, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one head"))
}

/// Value-only joint loss over plain logits.
pub fn joint_loss_value(logits: &[Tensor], labels: &[usize], weights: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = logits.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = joint_loss(&mut tape, &vars, labels, weights)?;
    Ok(tape.value(loss)?.data()[0])
}

pub fn check_loss_weights(weights: &[f64], heads: usize) -> Result<()> {
    if weights.len() != heads {
        return Err(Error::config(format!(
            "{} loss weights for {heads} heads",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::config("loss weights must be finite and nonnegative"));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::config("loss weights are all zero"));
    }
    Ok(())
}

/// Maximum softmax probability.
pub fn confidence(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    1.0 / logits.iter().map(|v| (v - max).exp()).sum::<f64>()
}

/// Index of the largest logit (first on ties).
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExitDecision {
    pub prediction: usize,
    pub exit_index: usize,
    /// Confidences of the heads actually evaluated, in order.
    pub confidences: Vec<f64>,
}

/// The exit rule: first head whose confidence reaches `threshold`; the last
/// head always accepts.
pub fn select_exit(confidences: &[f64], threshold: f64) -> usize {
    confidences
        .iter()
        .position(|&c| c >= threshold)
        .unwrap_or(confidences.len() - 1)
}

/// Early-exit inference for one sample (`[c, h, w]` or `[1, c, h, w]`).
/// Layers past the taken exit are never evaluated. Pruned weights are
/// already zero in the parameters, so no mask is consulted here.
pub fn infer_early_exit(net: &MultiExitNetwork, sample: &Tensor, threshold: f64) -> Result<ExitDecision> {
    let batch = match sample.rank() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(sample.shape());
            sample.clone().reshape(shape)?
        }
        4 if sample.shape()[0] == 1 => sample.clone(),
        _ => {
            return Err(Error::data(format!(
                "expected a single sample, got shape {:?}",
                sample.shape()
            )))
        }
    };
    net.check_batch(&batch)?;
    let exits = net.active_exits();
    let last = *exits.last().expect("final head always exists");
    let mut confidences = Vec::new();
    let mut next = 0;
    let mut x = batch;
    for (i, layer) in net.config.backbone.iter().enumerate() {
        x = forward(layer, net.layer_params(layer)?, &x)?;
        while next < exits.len() && net.heads[exits[next]].tap == i {
            let j = exits[next];
            let logits = net.head_logits(j, &x)?;
            let c = confidence(logits.data());
            confidences.push(c);
            if c >= threshold || j == last {
                return Ok(ExitDecision {
                    prediction: argmax(logits.data()),
                    exit_index: j,
                    confidences,
                });
            }
            next += 1;
        }
    }
    unreachable!("the final head is tapped on the last backbone layer")
}

/// Per-sample predictions and confidences of every active head, computed once
/// and reused across thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitProfile {
    pub exits: Vec<usize>,
    pub predictions: Vec<Vec<usize>>,
    pub confidences: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl ExitProfile {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Exit index and prediction for sample `n` under `threshold`, using the
    /// same rule as [`infer_early_exit`].
    pub fn decide(&self, n: usize, threshold: f64) -> (usize, usize) {
        let confs: Vec<f64> = self.confidences.iter().map(|c| c[n]).collect();
        let k = select_exit(&confs, threshold);
        (self.exits[k], self.predictions[k][n])
    }

    pub fn forced_accuracy(&self, exit: usize) -> Result<f64> {
        let k = self
            .exits
            .iter()
            .position(|&e| e == exit)
            .ok_or_else(|| Error::usage(format!("exit {exit} is not attached")))?;
        let correct = self.predictions[k]
            .iter()
            .zip(&self.labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok(correct as f64 / self.len() as f64)
    }
}

/// Accuracy when every sample leaves at `exit`.
pub fn forced_exit_accuracy(net: &MultiExitNetwork, dataset: &Dataset, exit: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::data("empty dataset"));
    }
    if !net.is_active(exit) {
        return Err(Error::usage(format!(
            "exit {exit} out of range or not attached"
        )));
    }
    net.exit_profile(dataset)?.forced_accuracy(exit)
}

/// Hyperparameters of one joint-training epoch.
#[derive(Clone, Debug)]
pub struct TrainSpec<'a> {
    pub loss_weights: &'a [f64],
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub trainable: Option<&'a BTreeSet<ParamRef>>,
}

/// One epoch of mask-respecting joint training; returns the mean batch loss.
pub fn train_epoch(
    net: &mut MultiExitNetwork,
    data: &Dataset,
    masks: &MaskSet,
    opt: &mut Sgd,
    spec: &TrainSpec<'_>,
    epoch_index: u64,
) -> Result<f64> {
    let weights: Vec<f64> = net
        .active_exits()
        .iter()
        .map(|&j| spec.loss_weights.get(j).copied().unwrap_or(0.0))
        .collect();
    if spec.loss_weights.len() != net.exit_count() {
        return Err(Error::config(format!(
            "{} loss weights for {} exits",
            spec.loss_weights.len(),
            net.exit_count()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches(data, spec.batch_size, spec.shuffle_seed, epoch_index)? {
        let (images, labels) = batch?;
        let loss = net.compute_gradients(images, &labels, &weights, spec.trainable)?;
        opt.step(net.params_mut(), masks)?;
        total += loss;
        count += 1;
    }
    net.params_mut().clear_grads();
    Ok(total / count as f64)
}
