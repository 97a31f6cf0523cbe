//! Shared fixtures: synthetic scenarios with custom adapter payloads, driven
//! through the real lifecycle.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pkus_cli::driver::{contributors_for, run_lifecycle, Lifecycle};
use pkus_cli::scenario::{
    BackboneSection, CostSection, LeaseSection, PlanSection, ProviderSection, PruneSection,
    RequestSection, Scenario, ServingSection, TaskSection, TrainingSection,
};
use pkus_core::adapter::{serialize_adapter_set, LowRankAdapter, ProviderAdapterSet, SiteId};
use pkus_core::alignagg::ContributorSet;
use pkus_core::backbone::{Backbone, BackboneConfig};
use pkus_core::linalg::{Matrix, Vector};

pub const CLIENT: &str = "carol";

pub fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

pub fn provider_name(i: usize) -> String {
    format!("prov-{i:02}")
}

/// Random adapter set for one provider, active at the given sites and
/// inactive elsewhere.
pub fn adapter_set_with_sites(
    rng: &mut ChaCha8Rng,
    cfg: &BackboneConfig,
    provider: &str,
    active: &dyn Fn(&SiteId) -> bool,
) -> ProviderAdapterSet {
    let d = cfg.hidden_dim;
    let mut set = ProviderAdapterSet::new(provider, "toy-backbone-v1");
    for site in cfg.sites() {
        let a = Matrix::from_fn(d, 2, |_, _| unit(rng) * 0.6 - 0.3);
        let b = Matrix::from_fn(2, d, |_, _| unit(rng) * 0.6 - 0.3);
        set.insert(
            site,
            LowRankAdapter::new(a, b, 16.0).unwrap(),
            active(&site),
        );
    }
    set
}

/// Minimal scenario skeleton for `providers` synthetic providers, every one
/// of them leased to the shared client without limits.
pub fn synthetic_scenario(seed: u64, layers: u32, hidden_dim: usize, providers: usize) -> Scenario {
    let provider_sections: Vec<ProviderSection> = (0..providers)
        .map(|i| ProviderSection {
            id: provider_name(i),
            seed: seed ^ (i as u64 + 1),
            rank: 2,
            alpha: 16.0,
            shard: 0,
            prune: PruneSection {
                r_max: 0.5,
                delta_r: 0.25,
                epsilon: 1.0,
                checkpoint_interval: 1,
            },
            training: TrainingSection {
                total_steps: 1,
                lr: 0.0,
                val_fraction: 0.25,
            },
        })
        .collect();
    let plans: Vec<PlanSection> = provider_sections
        .iter()
        .map(|p| PlanSection {
            owner: p.id.clone(),
            base_model: "toy-backbone-v1".to_string(),
            leases: vec![LeaseSection {
                client: CLIENT.to_string(),
                expiry: None,
                max_requests: None,
            }],
        })
        .collect();
    Scenario {
        seed,
        backbone: BackboneSection {
            layers,
            hidden_dim,
            seed: seed ^ 0xbb,
        },
        task: TaskSection {
            seed: seed ^ 0x7a,
            examples: 8,
            shards: 1,
        },
        providers: provider_sections,
        plans,
        requests: vec![RequestSection {
            client: CLIENT.to_string(),
            providers: (0..providers).map(provider_name).collect(),
            tokens: 1,
            at: 0,
        }],
        serving: ServingSection::default(),
        cost: CostSection::default(),
    }
}

pub struct Testbed {
    pub backbone: Backbone,
    pub lifecycle: Lifecycle,
    pub contributors: ContributorSet,
    pub sets: Vec<ProviderAdapterSet>,
}

/// Stand up onboarded enclaves for the given adapter sets (one provider per
/// set, named `prov-XX` in order).
pub fn testbed_from_sets(
    seed: u64,
    layers: u32,
    hidden_dim: usize,
    sets: Vec<ProviderAdapterSet>,
) -> Testbed {
    let scenario = synthetic_scenario(seed, layers, hidden_dim, sets.len());
    let backbone = Backbone::new(scenario.backbone_config()).unwrap();
    let blobs: BTreeMap<String, Vec<u8>> = sets
        .iter()
        .map(|s| (s.provider_id().to_string(), serialize_adapter_set(s)))
        .collect();
    let lifecycle = run_lifecycle(&scenario, &blobs).unwrap();
    let requested: Vec<String> = (0..sets.len()).map(provider_name).collect();
    let contributors = contributors_for(&lifecycle, CLIENT, &requested, &BTreeSet::new()).unwrap();
    Testbed {
        backbone,
        lifecycle,
        contributors,
        sets,
    }
}

/// Dense testbed: every provider active at every site.
pub fn dense_testbed(seed: u64, layers: u32, hidden_dim: usize, providers: usize) -> Testbed {
    let scenario = synthetic_scenario(seed, layers, hidden_dim, providers);
    let cfg = scenario.backbone_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e75);
    let sets: Vec<ProviderAdapterSet> = (0..providers)
        .map(|i| adapter_set_with_sites(&mut rng, &cfg, &provider_name(i), &|_| true))
        .collect();
    testbed_from_sets(seed, layers, hidden_dim, sets)
}

pub fn fixed_input(dim: usize) -> Vector {
    Vector::from_fn(dim, |i| 0.15 * (i as f64 + 1.0) - 0.4)
}

pub fn bits(v: &Vector) -> Vec<u64> {
    v.as_slice().iter().map(|x| x.to_bits()).collect()
}

pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / w.abs().max(1.0))
        .fold(0.0, f64::max)
}
