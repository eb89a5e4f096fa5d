//! Taylor-score filter pruning with dependency-aware network surgery.
//!
//! A filter group is one conv output filter plus everything that dies with
//! it: its weight row and bias element, the batchnorm channel that
//! normalizes it, and the input-channel slice of every downstream consumer
//! (resolved through relu/pool/concat wiring, with concat index remapping).
//! Group importance per mini-batch is sum((g * w)^2) over the group's own
//! trainable scalars; scores accumulate over an epoch and average at its
//! end. The lowest-scoring groups are removed structurally, keeping the
//! graph channel-consistent.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelGraph, NodeKind, ParamRef, ParamSlot};
use crate::rng::Rng;
use crate::tape::{Gradients, Tape, ValId};
use crate::tensor::Tensor;
use crate::train::{
    apply_sgdm, assemble_eval_batch, assemble_train_batch, evaluate, train, TrainConfig, Velocities,
};

/// One prunable unit: a conv output filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterGroup {
    pub id: usize,
    /// ordinal of the owning conv among conv layers (tie-break key)
    pub layer_ord: usize,
    /// node index of the owning conv
    pub conv: usize,
    pub filter: usize,
}

/// Shared per-conv wiring: normalization channels and downstream consumers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerWiring {
    pub conv: usize,
    pub filters: usize,
    /// (batchnorm node, channel base offset)
    pub bns: Vec<(usize, usize)>,
    /// (conv/dense consumer node, input-channel base offset)
    pub consumers: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSet {
    pub layers: Vec<LayerWiring>,
    pub groups: Vec<FilterGroup>,
}

impl GroupSet {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn wiring_of(&self, conv: usize) -> &LayerWiring {
        self.layers
            .iter()
            .find(|l| l.conv == conv)
            .expect("conv has wiring")
    }

    /// Trainable + running-stat scalar slots owned by one group.
    pub fn group_scalars(&self, model: &ModelGraph, group: &FilterGroup) -> usize {
        let conv = match &model.nodes[group.conv].kind {
            NodeKind::Conv(c) => c,
            _ => unreachable!("group on non-conv node"),
        };
        let per_filter = conv.weight.elements() / conv.filters();
        // weight row + bias + (gamma, beta, running mean, running var) per bn
        per_filter + 1 + 4 * self.wiring_of(group.conv).bns.len()
    }
}

/// (node index, channel base offset) pairs.
pub type OffsetSlots = Vec<(usize, usize)>;

/// Downstream wiring of one conv's output channels: walk through
/// channel-preserving nodes, shifting the base offset at concats, until a
/// conv or dense consumer absorbs the channels.
fn trace_consumers(model: &ModelGraph, conv: usize) -> Result<(OffsetSlots, OffsetSlots)> {
    let mut bns = Vec::new();
    let mut consumers = Vec::new();
    let mut frontier = alloc::vec![(conv, 0usize)];
    while let Some((node, offset)) = frontier.pop() {
        for consumer in model.consumers(node) {
            match &model.nodes[consumer].kind {
                NodeKind::Conv(_) => consumers.push((consumer, offset)),
                NodeKind::Dense(_) => consumers.push((consumer, offset)),
                NodeKind::BatchNorm(_) => {
                    bns.push((consumer, offset));
                    frontier.push((consumer, offset));
                }
                NodeKind::Relu | NodeKind::MaxPool { .. } | NodeKind::GlobalAvgPool => {
                    frontier.push((consumer, offset));
                }
                NodeKind::Concat => {
                    // offset shifts by the width of every operand before us
                    let mut base = 0usize;
                    for input in &model.nodes[consumer].inputs {
                        if *input == node {
                            frontier.push((consumer, offset + base));
                        }
                        base += model.out_channels(*input);
                    }
                }
                NodeKind::Input { .. } => {
                    return Err(Error::UnresolvableWiring {
                        layer: model.nodes[consumer].name.clone(),
                        detail: "input node consuming activations".into(),
                    })
                }
            }
        }
    }
    // deterministic order regardless of traversal
    bns.sort_unstable();
    bns.dedup();
    consumers.sort_unstable();
    Ok((consumers, bns))
}

/// One group per conv output filter. Dense head parameters stay ungrouped
/// (unprunable).
pub fn group_model(model: &ModelGraph) -> Result<GroupSet> {
    let mut layers = Vec::new();
    let mut groups = Vec::new();
    let mut layer_ord = 0usize;
    for (idx, node) in model.nodes.iter().enumerate() {
        let conv = match &node.kind {
            NodeKind::Conv(c) => c,
            _ => continue,
        };
        let (consumers, bns) = trace_consumers(model, idx)?;
        layers.push(LayerWiring {
            conv: idx,
            filters: conv.filters(),
            bns,
            consumers,
        });
        for filter in 0..conv.filters() {
            groups.push(FilterGroup {
                id: groups.len(),
                layer_ord,
                conv: idx,
                filter,
            });
        }
        layer_ord += 1;
    }
    Ok(GroupSet { layers, groups })
}

/// Accumulated Taylor scores over an epoch's mini-batches.
#[derive(Debug, Clone)]
pub struct ImportanceTable {
    pub sums: Vec<f64>,
    pub batches: usize,
}

impl ImportanceTable {
    pub fn new(n_groups: usize) -> Self {
        ImportanceTable {
            sums: alloc::vec![0.0; n_groups],
            batches: 0,
        }
    }

    /// Epoch-averaged score per group: running sum / mini-batch count.
    pub fn averages(&self) -> Vec<f64> {
        let n = self.batches.max(1) as f64;
        self.sums.iter().map(|s| s / n).collect()
    }
}

/// sum over (gradient, weight) pairs of (g * w)^2, accumulated in f64 in
/// iteration order. The order is part of the contract: conv weight row in
/// storage order, bias, then gamma and beta per attached batchnorm.
pub fn group_contribution(pairs: impl Iterator<Item = (f32, f32)>) -> f64 {
    let mut acc = 0.0f64;
    for (g, w) in pairs {
        let t = g as f64 * w as f64;
        acc += t * t;
    }
    acc
}

/// Add one mini-batch's joint importance to every group's running sum.
/// Gradients must be the fresh ones for this batch, before the optimizer
/// step.
pub fn score_batch(
    table: &mut ImportanceTable,
    groups: &GroupSet,
    model: &ModelGraph,
    bindings: &[(ParamRef, ValId)],
    grads: &Gradients<f32>,
) -> Result<()> {
    debug_assert_eq!(table.sums.len(), groups.groups.len());
    let by_ref: BTreeMap<ParamRef, ValId> = bindings.iter().copied().collect();
    let grad_of = |node: usize, slot: ParamSlot| -> Result<&Tensor<f32>> {
        let val =
            by_ref
                .get(&ParamRef { node, slot })
                .ok_or_else(|| Error::UnresolvableWiring {
                    layer: model.nodes[node].name.clone(),
                    detail: "parameter missing from tape bindings".into(),
                })?;
        Ok(grads.get(*val).expect("parameter gradient"))
    };
    for layer in &groups.layers {
        let conv = match &model.nodes[layer.conv].kind {
            NodeKind::Conv(c) => c,
            _ => unreachable!(),
        };
        let per_filter = conv.weight.elements() / conv.filters();
        let gw = grad_of(layer.conv, ParamSlot::ConvWeight)?;
        let gb = grad_of(layer.conv, ParamSlot::ConvBias)?;
        if gw.elements() != conv.weight.elements() || gb.elements() != conv.bias.elements() {
            return Err(Error::ScoreLengthMismatch {
                group: layer.conv,
                detail: format!(
                    "grad {} elements vs weight {}",
                    gw.elements(),
                    conv.weight.elements()
                ),
            });
        }
        // groups of this layer are contiguous in id space
        let first_id = groups
            .groups
            .iter()
            .find(|g| g.conv == layer.conv)
            .expect("layer has groups")
            .id;
        for filter in 0..layer.filters {
            let row = filter * per_filter..(filter + 1) * per_filter;
            let mut contribution = group_contribution(
                gw.data()[row.clone()]
                    .iter()
                    .copied()
                    .zip(conv.weight.data()[row].iter().copied()),
            );
            contribution += group_contribution(core::iter::once((
                gb.data()[filter],
                conv.bias.data()[filter],
            )));
            for (bn_node, offset) in &layer.bns {
                let bn = match &model.nodes[*bn_node].kind {
                    NodeKind::BatchNorm(b) => b,
                    _ => unreachable!(),
                };
                let ch = offset + filter;
                let ggamma = grad_of(*bn_node, ParamSlot::BnGamma)?;
                let gbeta = grad_of(*bn_node, ParamSlot::BnBeta)?;
                contribution += group_contribution(
                    [
                        (ggamma.data()[ch], bn.gamma.data()[ch]),
                        (gbeta.data()[ch], bn.beta.data()[ch]),
                    ]
                    .into_iter(),
                );
            }
            table.sums[first_id + filter] += contribution;
        }
    }
    table.batches += 1;
    Ok(())
}

/// Scoring pass: one epoch over the subset with SGDM updates at the scoring
/// learning rate; importance accumulates from each batch's fresh gradients
/// before its optimizer step. Returns the epoch-averaged table and the mean
/// mini-batch loss.
pub fn scoring_epoch(
    model: &mut ModelGraph,
    dataset: &Dataset,
    subset: &[usize],
    groups: &GroupSet,
    schedule: &PruneSchedule,
    rng: &mut Rng,
) -> Result<(ImportanceTable, f64)> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let mut table = ImportanceTable::new(groups.len());
    let mut velocities = Velocities::zeros(model);
    let mut order = subset.to_vec();
    rng.shuffle(&mut order);
    let mut loss_sum = 0.0f64;
    let mut seen = 0usize;
    for chunk in order.chunks(schedule.batch_size) {
        let (batch, labels) = assemble_train_batch(dataset, chunk, schedule.norm, rng)?;
        let mut tape = Tape::new();
        let (loss_id, bindings) = model.forward_train(&mut tape, batch, &labels)?;
        let loss = tape.value(loss_id).scalar_value();
        if !loss.is_finite() {
            return Err(Error::NanLoss {
                epoch: 0,
                batch: seen / schedule.batch_size.max(1),
                lr: schedule.scoring_lr,
            });
        }
        let grads = tape.backward(loss_id)?;
        score_batch(&mut table, groups, model, &bindings, &grads)?;
        apply_sgdm(
            model,
            &bindings,
            &grads,
            &mut velocities,
            schedule.scoring_lr as f32,
            schedule.scoring_momentum,
            0.0,
        )?;
        loss_sum += loss as f64 * chunk.len() as f64;
        seen += chunk.len();
    }
    Ok((table, loss_sum / seen.max(1) as f64))
}

/// Optional per-layer L2 normalization of averaged scores (off by default).
pub fn normalize_per_layer(averages: &mut [f64], groups: &GroupSet) {
    let mut start = 0usize;
    for layer in &groups.layers {
        let slice = &mut averages[start..start + layer.filters];
        let norm = libm::sqrt(slice.iter().map(|v| v * v).sum::<f64>());
        if norm > 0.0 {
            for v in slice.iter_mut() {
                *v /= norm;
            }
        }
        start += layer.filters;
    }
}

/// The `k` lowest-scoring groups, never dropping a layer below `floor`
/// filters. Ties break on (layer ordinal, filter index). Skipped shortfall
/// redistributes to the next-lowest eligible groups; if fewer than `k`
/// remain eligible, all of them are returned with the exhaustion flag.
pub fn select_victims(
    averages: &[f64],
    groups: &GroupSet,
    k: usize,
    floor: usize,
) -> (Vec<FilterGroup>, bool) {
    let mut order: Vec<usize> = (0..groups.groups.len()).collect();
    order.sort_by(|a, b| {
        let ga = &groups.groups[*a];
        let gb = &groups.groups[*b];
        averages[*a]
            .total_cmp(&averages[*b])
            .then(ga.layer_ord.cmp(&gb.layer_ord))
            .then(ga.filter.cmp(&gb.filter))
    });
    let mut picked_per_conv: BTreeMap<usize, usize> = BTreeMap::new();
    let mut victims = Vec::with_capacity(k);
    for idx in order {
        if victims.len() == k {
            break;
        }
        let g = groups.groups[idx];
        let layer_filters = groups.wiring_of(g.conv).filters;
        let picked = picked_per_conv.entry(g.conv).or_insert(0);
        if layer_filters - *picked <= floor {
            continue; // removal would sink the layer below its floor
        }
        *picked += 1;
        victims.push(g);
    }
    let exhausted = victims.len() < k;
    (victims, exhausted)
}

fn remove_rank0_entry(t: &Tensor<f32>, index: usize) -> Tensor<f32> {
    let mut data = t.data().to_vec();
    data.remove(index);
    Tensor::from_vec(&[t.shape()[0] - 1], data).expect("entry removal")
}

/// Drop row `index` along the leading axis of [F, ...].
fn remove_leading_row(t: &Tensor<f32>, index: usize) -> Tensor<f32> {
    let shape = t.shape().to_vec();
    let row = t.elements() / shape[0];
    let mut data = t.data().to_vec();
    data.drain(index * row..(index + 1) * row);
    let mut new_shape = shape;
    new_shape[0] -= 1;
    Tensor::from_vec(&new_shape, data).expect("row removal")
}

/// Drop slice `index` along the second axis of [F, C, ...] or [K, C].
fn remove_second_axis(t: &Tensor<f32>, index: usize) -> Tensor<f32> {
    let shape = t.shape().to_vec();
    let c = shape[1];
    let inner: usize = shape[2..].iter().product::<usize>().max(1);
    let mut data = Vec::with_capacity(t.elements() - shape[0] * inner);
    for f in 0..shape[0] {
        for ch in 0..c {
            if ch == index {
                continue;
            }
            let base = (f * c + ch) * inner;
            data.extend_from_slice(&t.data()[base..base + inner]);
        }
    }
    let mut new_shape = shape;
    new_shape[1] -= 1;
    Tensor::from_vec(&new_shape, data).expect("slice removal")
}

fn excise_filter(model: &mut ModelGraph, conv: usize, filter: usize) -> Result<()> {
    let (consumers, bns) = trace_consumers(model, conv)?;
    match &mut model.nodes[conv].kind {
        NodeKind::Conv(c) => {
            c.weight = remove_leading_row(&c.weight, filter);
            c.bias = remove_rank0_entry(&c.bias, filter);
        }
        _ => unreachable!("victim on non-conv node"),
    }
    for (bn_node, offset) in bns {
        let ch = offset + filter;
        match &mut model.nodes[bn_node].kind {
            NodeKind::BatchNorm(b) => {
                b.gamma = remove_rank0_entry(&b.gamma, ch);
                b.beta = remove_rank0_entry(&b.beta, ch);
                b.running_mean = remove_rank0_entry(&b.running_mean, ch);
                b.running_var = remove_rank0_entry(&b.running_var, ch);
            }
            _ => unreachable!(),
        }
    }
    for (consumer, offset) in consumers {
        let ch = offset + filter;
        match &mut model.nodes[consumer].kind {
            NodeKind::Conv(c) => c.weight = remove_second_axis(&c.weight, ch),
            NodeKind::Dense(d) => d.weight = remove_second_axis(&d.weight, ch),
            _ => unreachable!(),
        }
    }
    Ok(())
}

/// Structurally remove the victim filters. All-or-nothing: the input model
/// is untouched and the pruned clone is validated before it is returned.
pub fn surgery(model: &ModelGraph, victims: &[FilterGroup]) -> Result<ModelGraph> {
    let mut pruned = model.clone();
    // per conv, remove high filter indices first so lower ones stay valid
    let mut by_conv: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for v in victims {
        by_conv.entry(v.conv).or_default().push(v.filter);
    }
    for (conv, mut filters) in by_conv {
        filters.sort_unstable_by(|a, b| b.cmp(a));
        filters.dedup();
        for f in filters {
            excise_filter(&mut pruned, conv, f)?;
        }
    }
    pruned.validate_channels()?;
    Ok(pruned)
}

pub const BRUTE_FORCE_GROUP_CEILING: usize = 300;

/// Mean eval-mode cross-entropy over prepared batches, with optional channel
/// ablations.
pub fn model_error(
    model: &ModelGraph,
    batches: &[(Tensor<f32>, Vec<usize>)],
    ablations: &[(usize, usize)],
) -> Result<f64> {
    let mut loss_sum = 0.0f64;
    let mut count = 0usize;
    for (batch, labels) in batches {
        let out = model.forward_eval(batch, ablations)?;
        let (loss, _) = crate::ops::softmax_cross_entropy_forward(&out.logits, labels)?;
        loss_sum += loss as f64 * labels.len() as f64;
        count += labels.len();
    }
    Ok(loss_sum / count.max(1) as f64)
}

/// Induced-error oracle for one group: the squared difference of the
/// prediction error with and without the group, where "without" forces the
/// filter's post-relu channel to zero. Guarded by a group-count ceiling;
/// larger models should use sampled evaluation instead.
pub fn brute_force_importance(
    model: &ModelGraph,
    groups: &GroupSet,
    group_id: usize,
    batches: &[(Tensor<f32>, Vec<usize>)],
) -> Result<f64> {
    if groups.len() > BRUTE_FORCE_GROUP_CEILING {
        return Err(Error::BruteForceCeiling {
            groups: groups.len(),
            ceiling: BRUTE_FORCE_GROUP_CEILING,
        });
    }
    let base = model_error(model, batches, &[])?;
    let g = &groups.groups[group_id];
    let ablated = model_error(model, batches, &[(g.conv, g.filter)])?;
    Ok((base - ablated) * (base - ablated))
}

/// Induced-error oracle for every group, computing the base error once.
pub fn brute_force_sweep(
    model: &ModelGraph,
    groups: &GroupSet,
    batches: &[(Tensor<f32>, Vec<usize>)],
) -> Result<Vec<f64>> {
    if groups.len() > BRUTE_FORCE_GROUP_CEILING {
        return Err(Error::BruteForceCeiling {
            groups: groups.len(),
            ceiling: BRUTE_FORCE_GROUP_CEILING,
        });
    }
    let base = model_error(model, batches, &[])?;
    let mut scores = Vec::with_capacity(groups.len());
    for g in &groups.groups {
        let ablated = model_error(model, batches, &[(g.conv, g.filter)])?;
        scores.push((base - ablated) * (base - ablated));
    }
    Ok(scores)
}

/// Iterative prune/retrain session parameters.
#[derive(Debug, Clone)]
pub struct PruneSchedule {
    /// fraction of the ORIGINAL filter count removed per iteration
    pub step_fraction: f64,
    /// fraction of the training set scored per iteration
    pub subset_fraction: f64,
    /// retrain at iterations 1, 1+N, 1+2N, ...
    pub retrain_every: usize,
    /// stop once iteration * step_fraction reaches this
    pub max_total_fraction: f64,
    pub scoring_lr: f64,
    pub scoring_momentum: f32,
    pub batch_size: usize,
    /// minimum filters left per layer
    pub floor: usize,
    pub normalize_per_layer: bool,
    pub recalibrate_bn: bool,
    pub norm: crate::data::Normalization,
    /// retraining protocol; None disables retraining
    pub retrain: Option<TrainConfig>,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule {
            step_fraction: 0.01,
            subset_fraction: 0.25,
            retrain_every: 5,
            max_total_fraction: 0.4,
            scoring_lr: 0.01,
            scoring_momentum: 0.9,
            batch_size: 128,
            floor: 1,
            normalize_per_layer: false,
            recalibrate_bn: false,
            norm: crate::data::Normalization::default(),
            retrain: None,
        }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_fraction > 0.0 && self.step_fraction < 1.0)
            || !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0)
        {
            return Err(Error::ShapeMismatch {
                op: "prune_schedule",
                detail: "step_fraction in (0,1), subset_fraction in (0,1]".into(),
            });
        }
        Ok(())
    }

    /// Victims per iteration: round-half-up of step_fraction * original
    /// filter count, at least 1.
    pub fn victims_per_iteration(&self, original_filters: usize) -> usize {
        (libm::floor(self.step_fraction * original_filters as f64 + 0.5) as usize).max(1)
    }

    pub fn planned_iterations(&self) -> usize {
        libm::floor(self.max_total_fraction / self.step_fraction + 0.5) as usize
    }
}

/// One row of the iteration log.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneIteration {
    pub iteration: usize,
    /// nominal pruned fraction: iteration * step_fraction
    pub pruned_fraction: f64,
    pub filters: usize,
    pub learnables: usize,
    pub embedding_dim: usize,
    pub model_bytes: usize,
    pub minibatch_loss: f64,
    pub val_accuracy: f64,
    pub retrained: bool,
    /// eval-hook columns, fixed order
    pub extra: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct PruneLog {
    pub original_filters: usize,
    pub victims_per_iteration: usize,
    pub iterations: Vec<PruneIteration>,
    pub exhausted: bool,
}

type HookResult<T> = core::result::Result<T, String>;

/// Extra metric columns appended to an iteration row by the eval hook.
pub type EvalHook<'a> =
    dyn FnMut(&ModelGraph, &PruneIteration) -> HookResult<Vec<(String, f64)>> + 'a;
/// Runs after each iteration's row is complete (checkpointing, logging).
pub type AfterIterationHook<'a> =
    dyn FnMut(&ModelGraph, &PruneIteration, &Rng) -> HookResult<()> + 'a;

/// Optional per-iteration callbacks (metric columns, checkpointing).
#[derive(Default)]
pub struct PruneHooks<'a> {
    pub eval: Option<&'a mut EvalHook<'a>>,
    pub after_iteration: Option<&'a mut AfterIterationHook<'a>>,
}

/// The iterative prune loop: sample a scoring subset, run a scoring epoch,
/// remove the k lowest-scoring filters, retrain on schedule, log stats.
/// `start_iteration` resumes a session whose completed iterations are
/// already applied to `model` (pass 0 for a fresh run).
#[allow(clippy::too_many_arguments)]
pub fn prune_session(
    model: &mut ModelGraph,
    dataset: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    schedule: &PruneSchedule,
    original_filters: usize,
    start_iteration: usize,
    rng: &mut Rng,
    hooks: &mut PruneHooks<'_>,
) -> Result<PruneLog> {
    schedule.validate()?;
    let k = schedule.victims_per_iteration(original_filters);
    let total_iterations = schedule.planned_iterations();
    let mut log = PruneLog {
        original_filters,
        victims_per_iteration: k,
        iterations: Vec::new(),
        exhausted: false,
    };
    for iteration in (start_iteration + 1)..=total_iterations {
        let subset_size = (libm::floor(schedule.subset_fraction * train_idx.len() as f64 + 0.5)
            as usize)
            .clamp(1, train_idx.len());
        let picks = rng.sample_indices(train_idx.len(), subset_size);
        let subset: Vec<usize> = picks.iter().map(|i| train_idx[*i]).collect();

        let groups = group_model(model)?;
        let (table, minibatch_loss) =
            scoring_epoch(model, dataset, &subset, &groups, schedule, rng)?;
        let mut averages = table.averages();
        if schedule.normalize_per_layer {
            normalize_per_layer(&mut averages, &groups);
        }
        let (victims, exhausted) = select_victims(&averages, &groups, k, schedule.floor);
        *model = surgery(model, &victims)?;
        if schedule.recalibrate_bn {
            let mut batches = Vec::new();
            for chunk in subset.chunks(schedule.batch_size).take(4) {
                batches.push(assemble_eval_batch(dataset, chunk, schedule.norm)?.0);
            }
            model.recalibrate_bn(&batches)?;
        }

        let mut retrained = false;
        if let Some(retrain_cfg) = &schedule.retrain {
            if (iteration - 1) % schedule.retrain_every == 0 {
                train(
                    model,
                    dataset,
                    train_idx,
                    val_idx,
                    retrain_cfg,
                    rng,
                    &mut || 0.0,
                )?;
                retrained = true;
            }
        }

        let (_, val_accuracy) =
            evaluate(model, dataset, val_idx, schedule.norm, schedule.batch_size)?;
        let stats = model.count_stats();
        let mut row = PruneIteration {
            iteration,
            pruned_fraction: iteration as f64 * schedule.step_fraction,
            filters: stats.total_filters,
            learnables: stats.learnables,
            embedding_dim: stats.embedding_dim,
            model_bytes: stats.model_bytes,
            minibatch_loss,
            val_accuracy,
            retrained,
            extra: Vec::new(),
        };
        if let Some(eval_hook) = hooks.eval.as_mut() {
            row.extra = eval_hook(model, &row).map_err(Error::Hook)?;
        }
        if let Some(after) = hooks.after_iteration.as_mut() {
            after(model, &row, rng).map_err(Error::Hook)?;
        }
        log.iterations.push(row);
        if exhausted {
            log.exhausted = true;
            break;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_arch, ArchSpec, BlockSpec, FireSpec};

    fn fire_arch(classes: usize) -> ArchSpec {
        ArchSpec {
            input_channels: 3,
            blocks: alloc::vec![
                (
                    "conv1".into(),
                    BlockSpec::Conv {
                        filters: 6,
                        kernel: 3,
                        stride: 2,
                        pad: 1
                    }
                ),
                (
                    "fire2".into(),
                    BlockSpec::Fire(FireSpec {
                        squeeze_1x1: 4,
                        expand_1x1: 6,
                        expand_3x3: 6
                    })
                ),
                (
                    "pool2".into(),
                    BlockSpec::MaxPool {
                        kernel: 2,
                        stride: 2
                    }
                ),
                (
                    "fire3".into(),
                    BlockSpec::Fire(FireSpec {
                        squeeze_1x1: 3,
                        expand_1x1: 5,
                        expand_3x3: 7
                    })
                ),
            ],
            embed_filters: 10,
            num_classes: classes,
        }
    }

    fn simple_model(filters: usize) -> ModelGraph {
        let mut rng = Rng::new(31);
        let mut g = ModelGraph::new(3);
        let relu = g.add_conv_bn_relu("c", 0, filters, 3, 1, 1, &mut rng);
        let gap = g.add_global_avg_pool("gap", relu);
        g.add_dense("fc", gap, 3, &mut rng);
        g
    }

    #[test]
    fn simple_chain_grouping() {
        let model = simple_model(8);
        let groups = group_model(&model).unwrap();
        assert_eq!(groups.len(), 8);
        let wiring = &groups.layers[0];
        assert_eq!(wiring.filters, 8);
        assert_eq!(wiring.bns.len(), 1);
        // only consumer is the dense head at offset 0
        let fc = model.node_index("fc").unwrap();
        assert_eq!(wiring.consumers, alloc::vec![(fc, 0)]);
        // 1 weight-row slot of 27 scalars + bias + 4 bn entries
        assert_eq!(groups.group_scalars(&model, &groups.groups[0]), 27 + 1 + 4);
    }

    #[test]
    fn fire_squeeze_feeds_both_expands() {
        let mut rng = Rng::new(32);
        let model = build_arch(&fire_arch(3), &mut rng);
        let groups = group_model(&model).unwrap();
        let squeeze = model.node_index("fire2.squeeze").unwrap();
        let wiring = groups.wiring_of(squeeze);
        let e1 = model.node_index("fire2.expand1").unwrap();
        let e3 = model.node_index("fire2.expand3").unwrap();
        assert_eq!(wiring.consumers, alloc::vec![(e1, 0), (e3, 0)]);
    }

    #[test]
    fn expand_offsets_respect_concat_order() {
        let mut rng = Rng::new(33);
        let model = build_arch(&fire_arch(3), &mut rng);
        let groups = group_model(&model).unwrap();
        let e1 = model.node_index("fire2.expand1").unwrap();
        let e3 = model.node_index("fire2.expand3").unwrap();
        let next_squeeze = model.node_index("fire3.squeeze").unwrap();
        // expand1 lands at offset 0, expand3 after expand1's 6 channels
        assert_eq!(
            groups.wiring_of(e1).consumers,
            alloc::vec![(next_squeeze, 0)]
        );
        assert_eq!(
            groups.wiring_of(e3).consumers,
            alloc::vec![(next_squeeze, 6)]
        );
    }

    #[test]
    fn grouping_accounts_for_every_scalar() {
        let mut rng = Rng::new(34);
        let model = build_arch(&fire_arch(4), &mut rng);
        let groups = group_model(&model).unwrap();
        let grouped: usize = groups
            .groups
            .iter()
            .map(|g| groups.group_scalars(&model, g))
            .sum();
        let head = match &model.nodes[model.node_index("fc").unwrap()].kind {
            NodeKind::Dense(d) => d.weight.elements() + d.bias.elements(),
            _ => unreachable!(),
        };
        let stats = model.count_stats();
        let running: usize = model
            .nodes
            .iter()
            .map(|n| match &n.kind {
                NodeKind::BatchNorm(b) => b.running_mean.elements() + b.running_var.elements(),
                _ => 0,
            })
            .sum();
        assert_eq!(grouped + head, stats.learnables + running);
    }

    #[test]
    fn contribution_arithmetic() {
        // g = [1, 2], w = [3, 4] -> (1*3)^2 + (2*4)^2 = 73
        let c = group_contribution([(1.0f32, 3.0f32), (2.0, 4.0)].into_iter());
        assert_eq!(c, 73.0);
        // zero gradient kills the contribution regardless of weights
        let z = group_contribution([(0.0f32, 3.0f32), (0.0, -9.0)].into_iter());
        assert_eq!(z, 0.0);
    }

    #[test]
    fn contribution_invariant_under_scale_swap() {
        // doubling w and halving g leaves (g*w)^2 bitwise unchanged
        let base = group_contribution([(0.25f32, 1.5f32)].into_iter());
        let swapped = group_contribution([(0.125f32, 3.0f32)].into_iter());
        assert_eq!(base.to_bits(), swapped.to_bits());
    }

    #[test]
    fn score_batch_matches_independent_recomputation() {
        let mut rng = Rng::new(35);
        let mut model = build_arch(&fire_arch(3), &mut rng);
        let groups = group_model(&model).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::from_vec(
            &[2, 3, 16, 16],
            (0..2 * 3 * 256)
                .map(|i| ((i * 7) % 23) as f32 * 0.1 - 1.0)
                .collect(),
        )
        .unwrap();
        let (loss, bindings) = model.forward_train(&mut tape, x, &[0, 2]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut table = ImportanceTable::new(groups.len());
        score_batch(&mut table, &groups, &model, &bindings, &grads).unwrap();
        assert_eq!(table.batches, 1);

        // oracle: recompute from dumped (g, w) arrays in the same member order
        let by_ref: BTreeMap<ParamRef, ValId> = bindings.iter().copied().collect();
        for layer in &groups.layers {
            let conv = match &model.nodes[layer.conv].kind {
                NodeKind::Conv(c) => c.clone(),
                _ => unreachable!(),
            };
            let per_filter = conv.weight.elements() / conv.filters();
            let gw = grads
                .get(
                    by_ref[&ParamRef {
                        node: layer.conv,
                        slot: ParamSlot::ConvWeight,
                    }],
                )
                .unwrap();
            let gb = grads
                .get(
                    by_ref[&ParamRef {
                        node: layer.conv,
                        slot: ParamSlot::ConvBias,
                    }],
                )
                .unwrap();
            let first_id = groups
                .groups
                .iter()
                .find(|g| g.conv == layer.conv)
                .unwrap()
                .id;
            for f in 0..layer.filters {
                let mut pairs: Vec<(f32, f32)> = Vec::new();
                for i in f * per_filter..(f + 1) * per_filter {
                    pairs.push((gw.data()[i], conv.weight.data()[i]));
                }
                pairs.push((gb.data()[f], conv.bias.data()[f]));
                for (bn_node, offset) in &layer.bns {
                    let bn = match &model.nodes[*bn_node].kind {
                        NodeKind::BatchNorm(b) => b.clone(),
                        _ => unreachable!(),
                    };
                    let gg = grads
                        .get(
                            by_ref[&ParamRef {
                                node: *bn_node,
                                slot: ParamSlot::BnGamma,
                            }],
                        )
                        .unwrap();
                    let gbeta = grads
                        .get(
                            by_ref[&ParamRef {
                                node: *bn_node,
                                slot: ParamSlot::BnBeta,
                            }],
                        )
                        .unwrap();
                    pairs.push((gg.data()[offset + f], bn.gamma.data()[offset + f]));
                    pairs.push((gbeta.data()[offset + f], bn.beta.data()[offset + f]));
                }
                let expect = group_contribution(pairs.into_iter());
                assert_eq!(
                    table.sums[first_id + f].to_bits(),
                    expect.to_bits(),
                    "group {} differs",
                    first_id + f
                );
            }
        }
    }

    #[test]
    fn victim_selection_rules() {
        let model = simple_model(3);
        let groups = group_model(&model).unwrap();
        let (victims, exhausted) = select_victims(&[5.0, 1.0, 3.0], &groups, 1, 1);
        assert!(!exhausted);
        assert_eq!(victims[0].filter, 1);

        // equal scores: lowest (layer, filter) first
        let (victims, _) = select_victims(&[2.0, 2.0, 2.0], &groups, 2, 1);
        assert_eq!((victims[0].filter, victims[1].filter), (0, 1));

        // floor of 1: a single-filter layer can never be selected; shortfall
        // falls to the next-lowest groups
        let (victims, exhausted) = select_victims(&[0.0, 0.5, 0.6], &groups, 3, 1);
        assert_eq!(victims.len(), 2);
        assert!(exhausted);
    }

    #[test]
    fn surgery_counts_and_validation() {
        let mut rng = Rng::new(36);
        let model = build_arch(&fire_arch(3), &mut rng);
        let before = model.count_stats();
        let groups = group_model(&model).unwrap();
        // carve three filters from distinct layers
        let victims = alloc::vec![groups.groups[0], groups.groups[7], groups.groups[20]];
        let pruned = surgery(&model, &victims).unwrap();
        pruned.validate_channels().unwrap();
        let after = pruned.count_stats();
        assert_eq!(after.total_filters, before.total_filters - 3);
        assert!(after.learnables < before.learnables);
        assert!(after.model_bytes < before.model_bytes);
        // original untouched
        assert_eq!(model.count_stats().total_filters, before.total_filters);
    }

    #[test]
    fn surgery_matches_functional_ablation() {
        let mut rng = Rng::new(37);
        let model = build_arch(&fire_arch(4), &mut rng);
        let groups = group_model(&model).unwrap();
        let x = Tensor::from_vec(
            &[2, 3, 17, 17],
            (0..2 * 3 * 289).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        for id in [0usize, 6, 9, 16, 21, 30] {
            let g = groups.groups[id];
            let ablated = model.forward_eval(&x, &[(g.conv, g.filter)]).unwrap();
            let pruned = surgery(&model, &[g]).unwrap();
            let removed = pruned.forward_eval(&x, &[]).unwrap();
            let max_abs = ablated
                .logits
                .data()
                .iter()
                .zip(removed.logits.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(
                max_abs <= 1e-5,
                "group {}: ablation vs surgery {}",
                id,
                max_abs
            );
        }
    }

    #[test]
    fn expand1_removal_shifts_expand3_consumer_slice() {
        let mut rng = Rng::new(38);
        let model = build_arch(&fire_arch(3), &mut rng);
        let groups = group_model(&model).unwrap();
        let e1 = model.node_index("fire2.expand1").unwrap();
        let e3 = model.node_index("fire2.expand3").unwrap();
        let next = model.node_index("fire3.squeeze").unwrap();
        let e1_width = 6usize;

        // remove expand1 filter 2: post-concat channel 2 disappears and the
        // expand3 block (channels 6..12) shifts down by one
        let victim = groups
            .groups
            .iter()
            .find(|g| g.conv == e1 && g.filter == 2)
            .copied()
            .unwrap();
        let pruned = surgery(&model, &[victim]).unwrap();
        let old_w = match &model.nodes[next].kind {
            NodeKind::Conv(c) => c.weight.clone(),
            _ => unreachable!(),
        };
        let new_w = match &pruned.nodes[next].kind {
            NodeKind::Conv(c) => c.weight.clone(),
            _ => unreachable!(),
        };
        let (f, old_c) = (old_w.shape()[0], old_w.shape()[1]);
        assert_eq!(new_w.shape()[1], old_c - 1);
        // index-tracking oracle: old channel ch maps to new channel ch for
        // ch<2, disappears at 2, and shifts down by one above
        for fi in 0..f {
            for ch in 0..old_c {
                let new_ch = match ch {
                    2 => continue,
                    c if c > 2 => c - 1,
                    c => c,
                };
                assert_eq!(
                    old_w.data()[fi * old_c + ch].to_bits(),
                    new_w.data()[fi * (old_c - 1) + new_ch].to_bits(),
                    "filter {} channel {} (expand3 block starts at {})",
                    fi,
                    ch,
                    e1_width
                );
            }
        }
        let _ = e3;
    }

    #[test]
    fn brute_force_zero_downstream_weights_scores_zero() {
        let mut model = simple_model(4);
        // silence everything downstream of filter 2
        let fc = model.node_index("fc").unwrap();
        if let NodeKind::Dense(d) = &mut model.nodes[fc].kind {
            let (k, c) = (d.weight.shape()[0], d.weight.shape()[1]);
            for row in 0..k {
                d.weight.data_mut()[row * c + 2] = 0.0;
            }
        }
        let groups = group_model(&model).unwrap();
        let x = Tensor::filled(&[2, 3, 8, 8], 0.3);
        let batches = alloc::vec![(x, alloc::vec![0usize, 1])];
        let score = brute_force_importance(&model, &groups, 2, &batches).unwrap();
        assert_eq!(score, 0.0);
    }

    #[test]
    fn brute_force_ceiling_guard() {
        let model = simple_model(4);
        let groups = group_model(&model).unwrap();
        let mut big = groups.clone();
        for i in 0..400 {
            big.groups.push(FilterGroup {
                id: 4 + i,
                layer_ord: 0,
                conv: big.layers[0].conv,
                filter: 0,
            });
        }
        let x = Tensor::filled(&[1, 3, 8, 8], 0.1);
        let batches = alloc::vec![(x, alloc::vec![0usize])];
        assert!(matches!(
            brute_force_importance(&model, &big, 0, &batches),
            Err(Error::BruteForceCeiling { .. })
        ));
    }

    #[test]
    fn redundant_twin_scores_near_zero() {
        // two identical filters; the combiner leans almost entirely on the
        // twin, so ablating the near-unused copy barely moves the error
        let mut rng = Rng::new(39);
        let mut g = ModelGraph::new(3);
        let relu = g.add_conv_bn_relu("c", 0, 3, 3, 1, 1, &mut rng);
        let gap = g.add_global_avg_pool("gap", relu);
        g.add_dense("fc", gap, 2, &mut rng);
        let c_node = g.node_index("c").unwrap();
        if let NodeKind::Conv(c) = &mut g.nodes[c_node].kind {
            let row = c.weight.elements() / 3;
            let twin: Vec<f32> = c.weight.data()[0..row].to_vec();
            c.weight.data_mut()[row..2 * row].copy_from_slice(&twin);
            let b0 = c.bias.data()[0];
            c.bias.data_mut()[1] = b0;
        }
        let fc = g.node_index("fc").unwrap();
        if let NodeKind::Dense(d) = &mut g.nodes[fc].kind {
            let c = d.weight.shape()[1];
            for row in 0..2 {
                let w0 = d.weight.data()[row * c];
                d.weight.data_mut()[row * c + 1] = w0 * 0.999 + 0.001; // twin carries it
                d.weight.data_mut()[row * c] = 0.0005; // original nearly unused
            }
        }
        // align the twin's batchnorm channel with the original's
        let bn = g.node_index("c.bn").unwrap();
        if let NodeKind::BatchNorm(p) = &mut g.nodes[bn].kind {
            for t in [
                &mut p.gamma,
                &mut p.beta,
                &mut p.running_mean,
                &mut p.running_var,
            ] {
                let v0 = t.data()[0];
                t.data_mut()[1] = v0;
            }
        }
        let groups = group_model(&g).unwrap();
        let x = Tensor::from_vec(
            &[2, 3, 9, 9],
            (0..2 * 3 * 81).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        let batches = alloc::vec![(x, alloc::vec![0usize, 1])];
        let redundant = brute_force_importance(&g, &groups, 0, &batches).unwrap();
        let distinct = brute_force_importance(&g, &groups, 2, &batches).unwrap();
        assert!(
            redundant < distinct * 0.05,
            "redundant {} should be far below distinct {}",
            redundant,
            distinct
        );
    }

    fn toy_dataset(n_ids: usize) -> Dataset {
        let synth = crate::data::synthesize_dataset(&crate::data::SynthSpec {
            n_identities: n_ids,
            n_per_pose: 2,
            image_size: 129,
            seed: 77,
            train_fraction: 0.99,
            noise: 8.0,
        })
        .unwrap();
        Dataset::from_labeled(
            synth
                .entries
                .into_iter()
                .zip(synth.manifest.rows.iter())
                .filter(|(_, row)| row.split == crate::data::Split::Train)
                .map(|((_, img), row)| (img, row.identity.clone()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn scoring_epoch_counts_batches_and_lr_zero_freezes_params() {
        let mut rng = Rng::new(40);
        let mut model = build_arch(&fire_arch(4), &mut rng);
        let groups = group_model(&model).unwrap();
        let dataset = toy_dataset(4);
        let subset: Vec<usize> = (0..10).collect();
        let schedule = PruneSchedule {
            batch_size: 5,
            scoring_lr: 0.0,
            ..PruneSchedule::default()
        };
        let before = model.clone();
        let (table, loss) =
            scoring_epoch(&mut model, &dataset, &subset, &groups, &schedule, &mut rng).unwrap();
        // 10 samples in batches of 5
        assert_eq!(table.batches, 2);
        assert!(loss.is_finite());
        // averages are sums over the two batches divided by two
        for (avg, sum) in table.averages().iter().zip(&table.sums) {
            assert_eq!(*avg, sum / 2.0);
            assert!(*avg >= 0.0);
        }
        // lr 0: trainable parameters untouched (running stats may move)
        for r in model.param_refs() {
            assert_eq!(model.param(r), before.param(r), "{:?}", r);
        }
        assert!(matches!(
            scoring_epoch(&mut model, &dataset, &[], &groups, &schedule, &mut rng),
            Err(Error::EmptySubset)
        ));
    }

    #[test]
    fn session_retrains_on_schedule_and_decays_monotonically() {
        let mut rng = Rng::new(41);
        let mut model = build_arch(&fire_arch(4), &mut rng);
        let dataset = toy_dataset(4);
        let idx: Vec<usize> = (0..dataset.len()).collect();
        let original = model.count_stats().total_filters;
        let schedule = PruneSchedule {
            step_fraction: 0.01,
            subset_fraction: 0.5,
            retrain_every: 3,
            max_total_fraction: 0.07,
            batch_size: 8,
            retrain: Some(TrainConfig {
                batch_size: 8,
                max_epochs: 1,
                min_images_per_class: 1,
                ..TrainConfig::default()
            }),
            ..PruneSchedule::default()
        };
        let mut hooks = PruneHooks::default();
        let log = prune_session(
            &mut model, &dataset, &idx, &idx, &schedule, original, 0, &mut rng, &mut hooks,
        )
        .unwrap();
        assert_eq!(log.iterations.len(), 7);
        // retrain at iterations 1, 1+3, 1+6
        let retrained: Vec<usize> = log
            .iterations
            .iter()
            .filter(|r| r.retrained)
            .map(|r| r.iteration)
            .collect();
        assert_eq!(retrained, alloc::vec![1, 4, 7]);
        // monotone accounting, exactly k filters per iteration
        let k = log.victims_per_iteration;
        let mut prev = original;
        let mut prev_learnables = usize::MAX;
        let mut prev_bytes = usize::MAX;
        for row in &log.iterations {
            assert_eq!(row.filters, prev - k);
            assert!(row.learnables < prev_learnables);
            assert!(row.model_bytes < prev_bytes);
            prev = row.filters;
            prev_learnables = row.learnables;
            prev_bytes = row.model_bytes;
        }
    }

    #[test]
    fn per_layer_normalization_rescales_within_layers() {
        let model = simple_model(4);
        let groups = group_model(&model).unwrap();
        let mut averages = alloc::vec![3.0, 4.0, 0.0, 0.0];
        normalize_per_layer(&mut averages, &groups);
        // layer norm is 5; order preserved, unit L2 within the layer
        assert!((averages[0] - 0.6).abs() < 1e-12);
        assert!((averages[1] - 0.8).abs() < 1e-12);
        let l2: f64 = averages.iter().map(|v| v * v).sum::<f64>();
        assert!((l2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_rounding_rules() {
        let sched = PruneSchedule::default();
        assert_eq!(sched.victims_per_iteration(493), 5); // round(4.93)
        assert_eq!(sched.victims_per_iteration(950), 10); // round-half-up(9.5)
        assert_eq!(sched.victims_per_iteration(10), 1); // minimum 1
        assert_eq!(sched.planned_iterations(), 40);
        let sched = PruneSchedule {
            max_total_fraction: 0.2,
            ..PruneSchedule::default()
        };
        assert_eq!(sched.planned_iterations(), 20);
    }
}
