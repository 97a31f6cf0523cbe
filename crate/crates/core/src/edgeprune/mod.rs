//! Provider-side training with progressive pruning.
//!
//! Training runs in fixed-size chunks; at each checkpoint the pruning ratio is
//! raised by one step, the lowest-importance adapters are deactivated, and the
//! proposal is kept only if the validation metric stays within `epsilon` of
//! the baseline. The first failed proposal is reverted exactly and halts all
//! further pruning. The committed ratio is therefore monotone and the search
//! approximates the largest ratio whose metric stays above `m0 - epsilon`.

mod train;

pub use train::{adapter_gradients, evaluate_metric, forward_with_set, mean_loss, train_adapters};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{ProviderAdapterSet, SiteId};
use crate::backbone::{Backbone, BackboneError, ToyTask};

#[derive(Debug, Error)]
pub enum EdgePruneError {
    #[error("invalid prune config: {0}")]
    BadConfig(&'static str),
    #[error("site {0} not present in adapter set")]
    MissingSite(SiteId),
    #[error("no pruning proposal is pending")]
    NoPendingProposal,
    #[error("a pruning proposal is already pending")]
    ProposalAlreadyPending,
    #[error("training diverged (non-finite loss or metric)")]
    Diverged,
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
}

/// Search parameters for the progressive pruning loop.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Largest fraction of adapters that may be disabled.
    pub r_max: f64,
    /// Ratio increase proposed at each checkpoint.
    pub delta_r: f64,
    /// Tolerated metric drop, in metric units (0.01 == 1 point).
    pub epsilon: f64,
    /// Training steps between pruning proposals.
    pub checkpoint_interval: usize,
}

impl PruneConfig {
    pub fn validate(&self) -> Result<(), EdgePruneError> {
        if !(0.0..=1.0).contains(&self.r_max) {
            return Err(EdgePruneError::BadConfig("r_max must be in [0,1]"));
        }
        if !(self.delta_r > 0.0 && self.delta_r <= self.r_max.max(f64::MIN_POSITIVE)) {
            return Err(EdgePruneError::BadConfig("delta_r must be in (0, r_max]"));
        }
        if self.epsilon < 0.0 {
            return Err(EdgePruneError::BadConfig("epsilon must be non-negative"));
        }
        if self.checkpoint_interval == 0 {
            return Err(EdgePruneError::BadConfig(
                "checkpoint_interval must be positive",
            ));
        }
        Ok(())
    }
}

/// Ratio-to-count mapping: round with ties to even, so the sweep oracle can
/// reproduce every count exactly.
pub fn prune_count(ratio: f64, total_sites: usize) -> usize {
    (ratio * total_sites as f64).round_ties_even() as usize
}

#[derive(Debug, Clone)]
struct PendingProposal {
    target_ratio: f64,
    prior_flags: Vec<bool>,
}

/// Progress of one pruning search.
#[derive(Debug, Clone)]
pub struct PruneState {
    committed_ratio: f64,
    m0: Option<f64>,
    ranking: Vec<(SiteId, f64)>,
    halted: bool,
    pending: Option<PendingProposal>,
}

impl Default for PruneState {
    fn default() -> Self {
        Self::new()
    }
}

impl PruneState {
    pub fn new() -> Self {
        Self {
            committed_ratio: 0.0,
            m0: None,
            ranking: Vec::new(),
            halted: false,
            pending: None,
        }
    }

    pub fn committed_ratio(&self) -> f64 {
        self.committed_ratio
    }

    pub fn baseline_metric(&self) -> Option<f64> {
        self.m0
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    pub fn ranking(&self) -> &[(SiteId, f64)] {
        &self.ranking
    }

    /// Record the baseline metric; only the first call takes effect.
    pub fn set_baseline(&mut self, m0: f64) {
        self.m0.get_or_insert(m0);
    }
}

/// Importance of one site: Frobenius norm of the effective update
/// `scale·A·B`. Invariant under the A/B factorization gauge.
pub fn importance_score(set: &ProviderAdapterSet, site: &SiteId) -> Result<f64, EdgePruneError> {
    let entry = set.get(site).ok_or(EdgePruneError::MissingSite(*site))?;
    Ok(entry.adapter.effective_update()?.frobenius_norm())
}

/// All sites ranked by ascending importance, ties broken by SiteId order.
fn ranked_sites(set: &ProviderAdapterSet) -> Result<Vec<(SiteId, f64)>, EdgePruneError> {
    let mut ranking: Vec<(SiteId, f64)> = set
        .sites()
        .map(|s| importance_score(set, s).map(|imp| (*s, imp)))
        .collect::<Result<_, _>>()?;
    ranking.sort_by(|(sa, ia), (sb, ib)| ia.total_cmp(ib).then(sa.cmp(sb)));
    Ok(ranking)
}

/// Candidate sites to deactivate for `target_ratio`: the bottom
/// `round(target_ratio·|S|)` sites by importance. Returns `None` when the
/// target exceeds `r_max`.
pub fn propose_prune(
    state: &mut PruneState,
    set: &ProviderAdapterSet,
    cfg: &PruneConfig,
    target_ratio: f64,
) -> Result<Option<Vec<SiteId>>, EdgePruneError> {
    if state.pending.is_some() {
        return Err(EdgePruneError::ProposalAlreadyPending);
    }
    if target_ratio > cfg.r_max + 1e-12 {
        return Ok(None);
    }
    state.ranking = ranked_sites(set)?;
    let count = prune_count(target_ratio, set.len());
    Ok(Some(
        state.ranking.iter().take(count).map(|(s, _)| *s).collect(),
    ))
}

/// Apply a proposal: exactly the candidates become inactive, all other sites
/// active. The prior flags are retained for an exact revert.
pub fn apply_proposal(
    state: &mut PruneState,
    set: &mut ProviderAdapterSet,
    candidates: &[SiteId],
    target_ratio: f64,
) -> Result<(), EdgePruneError> {
    if state.pending.is_some() {
        return Err(EdgePruneError::ProposalAlreadyPending);
    }
    let prior_flags = set.active_flags();
    let sites: Vec<SiteId> = set.sites().copied().collect();
    for site in &sites {
        set.set_active(site, true);
    }
    for site in candidates {
        if !set.set_active(site, false) {
            return Err(EdgePruneError::MissingSite(*site));
        }
    }
    state.pending = Some(PendingProposal {
        target_ratio,
        prior_flags,
    });
    Ok(())
}

/// Outcome of evaluating a pending pruning proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PruneOutcome {
    Committed { new_ratio: f64 },
    Reverted { halted: bool },
}

/// Commit the pending proposal if `m_pruned >= m0 - epsilon` (inclusive);
/// otherwise restore the prior flags exactly and halt the search.
pub fn evaluate_and_commit(
    state: &mut PruneState,
    set: &mut ProviderAdapterSet,
    cfg: &PruneConfig,
    m_pruned: f64,
) -> Result<PruneOutcome, EdgePruneError> {
    let pending = state
        .pending
        .take()
        .ok_or(EdgePruneError::NoPendingProposal)?;
    if !m_pruned.is_finite() {
        return Err(EdgePruneError::Diverged);
    }
    let m0 = state.m0.ok_or(EdgePruneError::BadConfig(
        "baseline metric must be measured before committing",
    ))?;
    if m_pruned >= m0 - cfg.epsilon {
        state.committed_ratio = pending.target_ratio;
        Ok(PruneOutcome::Committed {
            new_ratio: pending.target_ratio,
        })
    } else {
        set.restore_active_flags(&pending.prior_flags);
        state.halted = true;
        Ok(PruneOutcome::Reverted { halted: true })
    }
}

/// Training schedule for `edgeprune_run`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub total_steps: usize,
    pub lr: f64,
    /// Fraction of the task held out for validation.
    pub val_fraction: f64,
}

/// One checkpoint of the pruning search, for the structured report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: usize,
    pub metric: f64,
    pub proposed_ratio: Option<f64>,
    /// Validation metric measured with the proposal applied.
    pub proposal_metric: Option<f64>,
    pub outcome: Option<PruneOutcome>,
    pub committed_ratio: f64,
}

/// Structured result of a pruning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneReport {
    pub baseline_metric: f64,
    pub final_ratio: f64,
    pub final_metric: f64,
    pub halted: bool,
    pub checkpoints: Vec<CheckpointRecord>,
}

/// Interleaved training and pruning search.
///
/// Trains the active adapters in chunks of `checkpoint_interval` steps. The
/// baseline metric is measured at the first checkpoint and never re-based.
/// Each subsequent checkpoint proposes one ratio increase until the target
/// would exceed `r_max` or a proposal is reverted.
pub fn edgeprune_run(
    backbone: &Backbone,
    task: &ToyTask,
    dense_set: &ProviderAdapterSet,
    cfg: &PruneConfig,
    training: &TrainingConfig,
) -> Result<(ProviderAdapterSet, PruneReport), EdgePruneError> {
    cfg.validate()?;
    if training.total_steps == 0 {
        return Err(EdgePruneError::BadConfig("total_steps must be positive"));
    }
    let (train_task, val_task) = task.split_validation(training.val_fraction);
    let mut set = dense_set.clone();
    let mut state = PruneState::new();
    let mut checkpoints = Vec::new();
    let mut steps_done = 0;

    while steps_done < training.total_steps {
        let chunk = cfg
            .checkpoint_interval
            .min(training.total_steps - steps_done);
        set = train_adapters(backbone, &train_task, &set, chunk, training.lr)?;
        steps_done += chunk;

        let metric = evaluate_metric(backbone, &set, &val_task)?;
        state.set_baseline(metric);

        let mut record = CheckpointRecord {
            step: steps_done,
            metric,
            proposed_ratio: None,
            proposal_metric: None,
            outcome: None,
            committed_ratio: state.committed_ratio(),
        };

        if !state.halted() {
            let target = state.committed_ratio() + cfg.delta_r;
            if let Some(candidates) = propose_prune(&mut state, &set, cfg, target)? {
                apply_proposal(&mut state, &mut set, &candidates, target)?;
                let m_pruned = evaluate_metric(backbone, &set, &val_task)?;
                let outcome = evaluate_and_commit(&mut state, &mut set, cfg, m_pruned)?;
                record.proposed_ratio = Some(target);
                record.proposal_metric = Some(m_pruned);
                record.outcome = Some(outcome);
                record.committed_ratio = state.committed_ratio();
            }
        }
        checkpoints.push(record);
    }

    let final_metric = evaluate_metric(backbone, &set, &val_task)?;
    let report = PruneReport {
        baseline_metric: state
            .baseline_metric()
            .expect("at least one checkpoint ran"),
        final_ratio: state.committed_ratio(),
        final_metric,
        halted: state.halted(),
        checkpoints,
    };
    Ok((set, report))
}
