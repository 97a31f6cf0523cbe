//! Scenario files: one TOML document describing the backbone, the providers
//! and their pruning setups, the ownership plans, and the requests to serve.
//! Logical time is scripted per request, so lease-expiry behavior needs no
//! wall clock.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use pkus_core::backbone::BackboneConfig;
use pkus_core::edgeprune::{PruneConfig, TrainingConfig};
use pkus_core::swiftsched::CostModel;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Root seed: keys, nonces and any synthetic randomness derive from it.
    pub seed: u64,
    pub backbone: BackboneSection,
    pub task: TaskSection,
    #[serde(default)]
    pub providers: Vec<ProviderSection>,
    #[serde(default)]
    pub plans: Vec<PlanSection>,
    #[serde(default)]
    pub requests: Vec<RequestSection>,
    #[serde(default)]
    pub serving: ServingSection,
    #[serde(default)]
    pub cost: CostSection,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub layers: u32,
    pub hidden_dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub seed: u64,
    pub examples: usize,
    /// Partition the training data into this many provider shards.
    #[serde(default = "one")]
    pub shards: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSection {
    pub id: String,
    pub seed: u64,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Which task shard this provider trains on.
    #[serde(default)]
    pub shard: usize,
    pub prune: PruneSection,
    pub training: TrainingSection,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    pub r_max: f64,
    pub delta_r: f64,
    pub epsilon: f64,
    pub checkpoint_interval: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub total_steps: usize,
    pub lr: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub owner: String,
    #[serde(default = "default_base_model")]
    pub base_model: String,
    #[serde(default)]
    pub leases: Vec<LeaseSection>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LeaseSection {
    pub client: String,
    #[serde(default)]
    pub expiry: Option<u64>,
    #[serde(default)]
    pub max_requests: Option<u64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RequestSection {
    pub client: String,
    pub providers: Vec<String>,
    pub tokens: usize,
    /// Logical time at which the request arrives.
    #[serde(default)]
    pub at: u64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ServingSection {
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_segment")]
    pub segment_size: usize,
    #[serde(default = "yes")]
    pub pipelined: bool,
    #[serde(default = "one")]
    pub host_workers: usize,
    #[serde(default)]
    pub adaptive: bool,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
}

impl Default for ServingSection {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            segment_size: default_segment(),
            pipelined: true,
            host_workers: 1,
            adaptive: false,
            timeout_ms: default_timeout(),
        }
    }
}

/// Cost model overrides; unset fields keep the defaults.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub c_msg: Option<f64>,
    pub c_byte: Option<f64>,
    pub c_site: Option<f64>,
    pub c_gpu_layer: Option<f64>,
    pub c_cpu_layer: Option<f64>,
    pub c_host_msg: Option<f64>,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_rank() -> usize {
    2
}
fn default_alpha() -> f64 {
    16.0
}
fn default_val_fraction() -> f64 {
    0.25
}
fn default_base_model() -> String {
    "toy-backbone-v1".to_string()
}
fn default_mode() -> String {
    "simulated".to_string()
}
fn default_segment() -> usize {
    6
}
fn default_timeout() -> u64 {
    5_000
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading scenario {}", path.display()))?;
        let scenario: Scenario = toml::from_str(&text)
            .with_context(|| format!("parsing scenario {}", path.display()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone.layers == 0 || self.backbone.hidden_dim < 2 {
            bail!("backbone needs at least one layer and hidden_dim >= 2");
        }
        if self.task.examples == 0 {
            bail!("task needs at least one example");
        }
        if self.task.shards == 0 || self.task.shards > self.task.examples {
            bail!("task shards must be in [1, examples]");
        }
        let provider_ids: BTreeSet<&str> = self.providers.iter().map(|p| p.id.as_str()).collect();
        if provider_ids.len() != self.providers.len() {
            bail!("provider ids must be unique");
        }
        for p in &self.providers {
            if p.shard >= self.task.shards {
                bail!(
                    "provider {} references shard {} of {}",
                    p.id,
                    p.shard,
                    self.task.shards
                );
            }
            if p.rank == 0 {
                bail!("provider {} has rank 0", p.id);
            }
        }
        let plan_owners: BTreeSet<&str> = self.plans.iter().map(|p| p.owner.as_str()).collect();
        if plan_owners.len() != self.plans.len() {
            bail!("one plan per owner");
        }
        for plan in &self.plans {
            if !provider_ids.contains(plan.owner.as_str()) {
                bail!("plan owner {} is not a provider", plan.owner);
            }
        }
        for (i, r) in self.requests.iter().enumerate() {
            if r.tokens == 0 {
                bail!("request {i} needs at least one token");
            }
            for p in &r.providers {
                if !plan_owners.contains(p.as_str()) {
                    bail!("request {i} references provider {p} without a plan");
                }
            }
        }
        match self.serving.mode.as_str() {
            "simulated" | "realtime" => {}
            other => bail!("unknown serving mode {other:?}"),
        }
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            layers: self.backbone.layers,
            hidden_dim: self.backbone.hidden_dim,
            seed: self.backbone.seed,
        }
    }

    pub fn provider(&self, id: &str) -> Result<&ProviderSection> {
        self.providers
            .iter()
            .find(|p| p.id == id)
            .with_context(|| format!("unknown provider {id}"))
    }

    pub fn plan_for(&self, owner: &str) -> Result<&PlanSection> {
        self.plans
            .iter()
            .find(|p| p.owner == owner)
            .with_context(|| format!("no plan for owner {owner}"))
    }

    pub fn cost_model(&self) -> CostModel {
        let mut cost = CostModel::default();
        if let Some(v) = self.cost.c_msg {
            cost.c_msg = v;
        }
        if let Some(v) = self.cost.c_byte {
            cost.c_byte = v;
        }
        if let Some(v) = self.cost.c_site {
            cost.c_site = v;
        }
        if let Some(v) = self.cost.c_gpu_layer {
            cost.c_gpu_layer = v;
        }
        if let Some(v) = self.cost.c_cpu_layer {
            cost.c_cpu_layer = v;
        }
        if let Some(v) = self.cost.c_host_msg {
            cost.c_host_msg = v;
        }
        cost
    }
}

impl ProviderSection {
    pub fn prune_config(&self) -> PruneConfig {
        PruneConfig {
            r_max: self.prune.r_max,
            delta_r: self.prune.delta_r,
            epsilon: self.prune.epsilon,
            checkpoint_interval: self.prune.checkpoint_interval,
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            total_steps: self.training.total_steps,
            lr: self.training.lr,
            val_fraction: self.training.val_fraction,
        }
    }
}
