//! Global unstructured L1 magnitude pruning over masks, and the iterative
//! prune/fine-tune round.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::exitnet::MultiExitNetwork;
use crate::tensorcore::{ParamRef, ParamStore};

/// Binary keep-masks per parameter tensor (`true` = surviving) plus the set
/// of tensors prunable in the current phase.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskSet {
    entries: BTreeMap<ParamRef, Vec<bool>>,
    prunable: BTreeSet<ParamRef>,
}

impl MaskSet {
    /// All-ones masks for the given tensors.
    pub fn dense_for(params: &ParamStore, refs: &[ParamRef]) -> Result<Self> {
        let mut masks = Self::default();
        masks.extend_dense(params, refs)?;
        Ok(masks)
    }

    /// Adds all-ones masks for tensors that do not have one yet.
    pub fn extend_dense(&mut self, params: &ParamStore, refs: &[ParamRef]) -> Result<()> {
        for r in refs {
            let n = params.get(r)?.numel();
            self.entries.entry(r.clone()).or_insert_with(|| vec![true; n]);
        }
        Ok(())
    }

    pub fn insert(&mut self, r: ParamRef, mask: Vec<bool>) {
        self.entries.insert(r, mask);
    }

    pub fn get(&self, r: &ParamRef) -> Option<&[bool]> {
        self.entries.get(r).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamRef, &[bool])> {
        self.entries.iter().map(|(r, m)| (r, m.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prunable(&self) -> &BTreeSet<ParamRef> {
        &self.prunable
    }

    pub fn set_prunable(&mut self, scope: &PruneScope) {
        self.prunable = scope.refs.iter().cloned().collect();
    }

    pub fn nnz_of(&self, r: &ParamRef) -> Option<usize> {
        self.entries.get(r).map(|m| m.iter().filter(|&&k| k).count())
    }

    /// Surviving positions over all masked tensors.
    pub fn nnz(&self) -> usize {
        self.entries.values().map(|m| m.iter().filter(|&&k| k).count()).sum()
    }

    pub fn total(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    /// Zeroes every masked position in `params`.
    pub fn apply(&self, params: &mut ParamStore) -> Result<()> {
        for (r, m) in &self.entries {
            let t = params.get_mut(r)?;
            if t.numel() != m.len() {
                return Err(Error::state(format!("mask for {r} does not match its tensor")));
            }
            for (w, &keep) in t.data_mut().iter_mut().zip(m) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
        Ok(())
    }

    /// True when every masked position of `params` holds exactly 0.0.
    pub fn holds_in(&self, params: &ParamStore) -> bool {
        self.entries.iter().all(|(r, m)| {
            params.get(r).is_ok_and(|t| {
                t.data().iter().zip(m).all(|(&w, &keep)| keep || w == 0.0)
            })
        })
    }
}

/// Tensors ranked together by one global pruning call. Weights only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneScope {
    refs: Vec<ParamRef>,
}

impl PruneScope {
    pub fn new(refs: Vec<ParamRef>) -> Result<Self> {
        if refs.is_empty() {
            return Err(Error::config("prune scope is empty"));
        }
        if let Some(b) = refs.iter().find(|r| r.role != crate::tensorcore::ParamRole::Weight) {
            return Err(Error::config(format!("prune scope may not contain bias {b}")));
        }
        let mut refs = refs;
        refs.sort();
        refs.dedup();
        Ok(Self { refs })
    }

    pub fn refs(&self) -> &[ParamRef] {
        &self.refs
    }

    pub fn contains(&self, r: &ParamRef) -> bool {
        self.refs.binary_search(r).is_ok()
    }
}

/// `floor(fraction · survivors)`, guarded against products that land a hair
/// below an integer.
pub fn prune_count(fraction: f64, survivors: usize) -> usize {
    let p = fraction * survivors as f64;
    (p * (1.0 + 1e-12)).floor() as usize
}

#[derive(Clone, Copy, Debug)]
struct Candidate<'a> {
    magnitude: f64,
    tensor: &'a ParamRef,
    index: usize,
}

fn rank(a: &Candidate<'_>, b: &Candidate<'_>) -> Ordering {
    a.magnitude
        .total_cmp(&b.magnitude)
        .then_with(|| a.tensor.cmp(b.tensor))
        .then_with(|| a.index.cmp(&b.index))
}

/// Masks the `floor(fraction · S)` smallest-|w| survivors across every tensor
/// in `scope` (S = survivors in scope before the call) and zeroes them.
/// Ties on |w| fall back to `(parameter name, flat index)`. Returns the
/// number of newly masked positions.
pub fn global_l1_prune(
    params: &mut ParamStore,
    masks: &mut MaskSet,
    scope: &PruneScope,
    fraction: f64,
) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!(
            "prune fraction must lie in (0, 1), got {fraction}"
        )));
    }
    masks.extend_dense(params, scope.refs())?;
    let mut candidates = Vec::new();
    for r in scope.refs() {
        let t = params.get(r)?;
        let m = masks.entries.get(r).expect("extended above");
        if m.len() != t.numel() {
            return Err(Error::state(format!("mask for {r} does not match its tensor")));
        }
        candidates.extend(
            t.data()
                .iter()
                .zip(m)
                .enumerate()
                .filter(|(_, (_, &keep))| keep)
                .map(|(index, (w, _))| Candidate {
                    magnitude: w.abs(),
                    tensor: r,
                    index,
                }),
        );
    }
    if candidates.is_empty() {
        return Err(Error::state("no surviving weights left in the prune scope"));
    }
    let k = prune_count(fraction, candidates.len());
    if k == 0 {
        return Ok(0);
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, rank);
    }
    let chosen: Vec<(ParamRef, usize)> = candidates[..k]
        .iter()
        .map(|c| (c.tensor.clone(), c.index))
        .collect();
    for (r, index) in chosen {
        masks.entries.get_mut(&r).expect("in scope")[index] = false;
        params.get_mut(&r)?.data_mut()[index] = 0.0;
    }
    Ok(k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityRow {
    pub param: ParamRef,
    pub total: usize,
    pub nnz: usize,
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityReport {
    pub rows: Vec<SparsityRow>,
    pub global: SparsityRow,
}

fn row(param: ParamRef, total: usize, nnz: usize) -> SparsityRow {
    SparsityRow {
        param,
        total,
        nnz,
        sparsity: if total == 0 {
            0.0
        } else {
            1.0 - nnz as f64 / total as f64
        },
    }
}

/// Mask-based counts for every weight tensor of `params`; tensors without a
/// mask count as fully dense. Biases are not reported.
pub fn sparsity_report(params: &ParamStore, masks: &MaskSet) -> SparsityReport {
    let rows: Vec<SparsityRow> = params
        .iter()
        .filter(|(r, _)| r.role == crate::tensorcore::ParamRole::Weight)
        .map(|(r, t)| {
            let nnz = masks.nnz_of(r).unwrap_or(t.numel());
            row(r.clone(), t.numel(), nnz)
        })
        .collect();
    let total = rows.iter().map(|r| r.total).sum();
    let nnz = rows.iter().map(|r| r.nnz).sum();
    SparsityReport {
        rows,
        global: row(ParamRef::weight("global"), total, nnz),
    }
}

/// Sparsity restricted to the tensors of `scope`.
pub fn scope_sparsity(params: &ParamStore, masks: &MaskSet, scope: &PruneScope) -> Result<f64> {
    let mut total = 0;
    let mut nnz = 0;
    for r in scope.refs() {
        let n = params.get(r)?.numel();
        total += n;
        nnz += masks.nnz_of(r).unwrap_or(n);
    }
    Ok(1.0 - nnz as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub newly_masked: usize,
    /// Forced-exit accuracies right after pruning, before fine-tuning.
    pub pre_accuracy: Vec<f64>,
    /// Forced-exit accuracies after fine-tuning.
    pub post_accuracy: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub report: SparsityReport,
}

/// One prune then `epochs` epochs of mask-respecting fine-tuning.
/// `train_epoch(net, masks, epoch)` runs one epoch and returns its mean loss;
/// `evaluate(net)` returns per-exit accuracies.
pub fn prune_finetune_round<T, E>(
    net: &mut MultiExitNetwork,
    masks: &mut MaskSet,
    scope: &PruneScope,
    fraction: f64,
    epochs: usize,
    mut train_epoch: T,
    mut evaluate: E,
) -> Result<RoundOutcome>
where
    T: FnMut(&mut MultiExitNetwork, &MaskSet, usize) -> Result<f64>,
    E: FnMut(&MultiExitNetwork) -> Result<Vec<f64>>,
{
    masks.set_prunable(scope);
    let newly_masked = global_l1_prune(net.params_mut(), masks, scope, fraction)?;
    let pre_accuracy = evaluate(net)?;
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        epoch_losses.push(train_epoch(net, masks, epoch)?);
    }
    if !masks.holds_in(net.params()) {
        return Err(Error::state("fine-tuning revived a pruned weight"));
    }
    let post_accuracy = if epochs == 0 {
        pre_accuracy.clone()
    } else {
        evaluate(net)?
    };
    Ok(RoundOutcome {
        newly_masked,
        pre_accuracy,
        post_accuracy,
        epoch_losses,
        report: sparsity_report(net.params(), masks),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::Tensor;

    fn two_tensors() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(ParamRef::weight("A"), Tensor::new(vec![2], vec![0.5, -0.1]).unwrap())
            .unwrap();
        p.insert(ParamRef::weight("B"), Tensor::new(vec![2], vec![0.3, 0.05]).unwrap())
            .unwrap();
        p
    }

    fn ab_scope() -> PruneScope {
        PruneScope::new(vec![ParamRef::weight("A"), ParamRef::weight("B")]).unwrap()
    }

    #[test]
    fn global_ranking_example() {
        let mut p = two_tensors();
        let mut m = MaskSet::default();
        assert_eq!(global_l1_prune(&mut p, &mut m, &ab_scope(), 0.5).unwrap(), 2);
        assert_eq!(m.get(&ParamRef::weight("A")).unwrap(), &[true, false]);
        assert_eq!(m.get(&ParamRef::weight("B")).unwrap(), &[true, false]);
        assert_eq!(p.get(&ParamRef::weight("A")).unwrap().data(), &[0.5, 0.0]);
        assert_eq!(p.get(&ParamRef::weight("B")).unwrap().data(), &[0.3, 0.0]);
    }

    #[test]
    fn fraction_of_survivors() {
        let mut p = two_tensors();
        let mut m = MaskSet::default();
        m.insert(ParamRef::weight("A"), vec![true, true]);
        m.insert(ParamRef::weight("B"), vec![true, false]);
        assert_eq!(global_l1_prune(&mut p, &mut m, &ab_scope(), 0.5).unwrap(), 1);
        assert_eq!(m.get(&ParamRef::weight("A")).unwrap(), &[true, false]);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn rejects_bad_fraction_and_empty_survivors() {
        let mut p = two_tensors();
        let mut m = MaskSet::default();
        for f in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(matches!(
                global_l1_prune(&mut p, &mut m, &ab_scope(), f),
                Err(Error::Config(_))
            ));
        }
        m.insert(ParamRef::weight("A"), vec![false, false]);
        m.insert(ParamRef::weight("B"), vec![false, false]);
        assert!(matches!(
            global_l1_prune(&mut p, &mut m, &ab_scope(), 0.5),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn ties_break_by_name_then_index() {
        let mut p = ParamStore::new();
        p.insert(ParamRef::weight("b"), Tensor::new(vec![2], vec![1.0, 1.0]).unwrap())
            .unwrap();
        p.insert(ParamRef::weight("a"), Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap())
            .unwrap();
        let scope = PruneScope::new(vec![ParamRef::weight("b"), ParamRef::weight("a")]).unwrap();
        let mut m = MaskSet::default();
        global_l1_prune(&mut p, &mut m, &scope, 0.75).unwrap();
        assert_eq!(m.get(&ParamRef::weight("a")).unwrap(), &[false, false]);
        assert_eq!(m.get(&ParamRef::weight("b")).unwrap(), &[false, true]);
    }

    #[test]
    fn scope_rejects_bias_and_empty() {
        assert!(PruneScope::new(vec![]).is_err());
        assert!(PruneScope::new(vec![ParamRef::bias("A")]).is_err());
    }

    #[test]
    fn report_counts_masks_not_values() {
        let mut p = two_tensors();
        p.get_mut(&ParamRef::weight("B")).unwrap().data_mut()[0] = 0.0;
        let fresh = sparsity_report(&p, &MaskSet::default());
        assert!(fresh.rows.iter().all(|r| r.sparsity == 0.0));
        let mut m = MaskSet::default();
        m.insert(ParamRef::weight("A"), vec![false, false]);
        let r = sparsity_report(&p, &m);
        assert_eq!(r.rows[0].sparsity, 1.0);
        assert_eq!(r.global.nnz, 2);
        assert_eq!(r.global.total, 4);
        let weighted: f64 = r.rows.iter().map(|x| x.sparsity * x.total as f64).sum::<f64>()
            / r.global.total as f64;
        assert!((weighted - r.global.sparsity).abs() < 1e-15);
    }

    #[test]
    fn prune_count_is_exact_floor() {
        assert_eq!(prune_count(0.1, 10000), 1000);
        assert_eq!(prune_count(0.1, 6561), 656);
        assert_eq!(prune_count(0.5, 3), 1);
        assert_eq!(prune_count(0.3, 10), 3);
        assert_eq!(prune_count(0.7, 10), 7);
    }
}
