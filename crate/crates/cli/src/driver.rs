//! Scenario-driven composition of the pipeline: provider-side pruning, the
//! enclave lifecycle, serving, revocation, and audit collection.
//!
//! Every run derives its keys and nonces from the scenario seed, so the same
//! scenario file always produces the same artifacts byte for byte.

use std::collections::{BTreeMap, BTreeSet};

use anyhow::{anyhow, bail, Context, Result};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pkus_core::adapter::{
    deserialize_adapter_set, serialize_adapter_set, LowRankAdapter, ProviderAdapterSet,
};
use pkus_core::aegisproto::{
    establish_channel, plan_binding_payload, prepare_enclave, revoke_payload,
    seal_onboarding_payload, AttestationHardware, EnclaveInstance, KeyRegistry, PolicyEntry,
    PolicyPlan, Quote, RuntimeImage, SignedRecord,
};
use pkus_core::alignagg::ContributorSet;
use pkus_core::audit::AuditRecord;
use pkus_core::backbone::{toy_task_dataset, Backbone, ToyTask};
use pkus_core::crypto::SigningKey;
use pkus_core::edgeprune::{edgeprune_run, PruneReport};
use pkus_core::enclave::{decode_onboarding, encode_onboarding};
use pkus_core::linalg::{Matrix, Vector};
use pkus_core::swiftsched::{
    run_request, BatchPolicy, CostModel, ExecMode, RunOptions, ScheduleTrace, ServeRequest,
};

use crate::scenario::{ProviderSection, Scenario};

/// Runtime image of the simulated testbed. Fixed bytes: every scenario
/// publishes the same measurement.
pub fn runtime_image() -> RuntimeImage {
    RuntimeImage::new(b"pkus-enclave-runtime-image-v1".to_vec())
}

/// All long-term keys of a scenario, derived from its seed.
pub struct ScenarioKeys {
    pub hw: AttestationHardware,
    pub owners: BTreeMap<String, SigningKey>,
    pub registry: KeyRegistry,
}

pub fn derive_keys(scenario: &Scenario) -> ScenarioKeys {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x6b65_7973);
    let hw = AttestationHardware::generate(&mut rng);
    let mut owners = BTreeMap::new();
    let mut registry = KeyRegistry::new();
    for provider in &scenario.providers {
        let key = SigningKey::generate(&mut rng);
        registry.register(provider.id.clone(), key.verifying_key());
        owners.insert(provider.id.clone(), key);
    }
    ScenarioKeys {
        hw,
        owners,
        registry,
    }
}

fn nonce_rng(scenario: &Scenario) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x6e6f_6e63_6573)
}

fn nonce16(rng: &mut ChaCha8Rng) -> [u8; 16] {
    let mut n = [0u8; 16];
    rng.fill_bytes(&mut n);
    n
}

/// The full training task and the shard a provider sees.
pub fn full_task(scenario: &Scenario) -> Result<ToyTask> {
    toy_task_dataset(
        scenario.task.seed,
        scenario.task.examples,
        scenario.backbone.hidden_dim,
    )
    .map_err(|e| anyhow!("task generation failed: {e}"))
}

pub fn provider_task(scenario: &Scenario, provider: &ProviderSection) -> Result<ToyTask> {
    let task = full_task(scenario)?;
    if scenario.task.shards == 1 {
        return Ok(task);
    }
    Ok(task.shard(scenario.task.shards)[provider.shard].clone())
}

/// Fresh adapter set for a provider: one adapter per backbone site, output
/// factor zeroed and input factor random, so the initial update is zero.
pub fn initial_adapter_set(
    scenario: &Scenario,
    provider: &ProviderSection,
    base_model: &str,
) -> Result<ProviderAdapterSet> {
    let cfg = scenario.backbone_config();
    let d = cfg.hidden_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(provider.seed ^ 0x6164_6170_7400);
    let mut set = ProviderAdapterSet::new(provider.id.clone(), base_model);
    for site in cfg.sites() {
        let a = Matrix::zeros(d, provider.rank);
        let b = Matrix::from_fn(provider.rank, d, |_, _| {
            (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        });
        let adapter = LowRankAdapter::new(a, b, provider.alpha)
            .map_err(|e| anyhow!("adapter init failed: {e}"))?;
        set.insert(site, adapter, true);
    }
    Ok(set)
}

/// Provider-side pruning: train with progressive pruning and return the
/// enclave-suitable payload plus the structured report.
pub fn run_prune(scenario: &Scenario, provider_id: &str) -> Result<(Vec<u8>, PruneReport)> {
    let provider = scenario.provider(provider_id)?;
    let plan = scenario.plan_for(provider_id);
    let base_model = plan
        .map(|p| p.base_model.clone())
        .unwrap_or_else(|_| "toy-backbone-v1".to_string());
    let backbone = Backbone::new(scenario.backbone_config())?;
    let task = provider_task(scenario, provider)?;
    let dense = initial_adapter_set(scenario, provider, &base_model)?;
    let (pruned, report) = edgeprune_run(
        &backbone,
        &task,
        &dense,
        &provider.prune_config(),
        &provider.training_config(),
    )
    .map_err(|e| anyhow!("pruning run for {provider_id} failed: {e}"))?;
    Ok((serialize_adapter_set(&pruned), report))
}

/// A fully onboarded testbed: one enclave per plan, host-side traffic keys,
/// and the quotes produced along the way.
pub struct Lifecycle {
    pub image: RuntimeImage,
    pub keys: ScenarioKeys,
    pub enclaves: Vec<EnclaveInstance>,
    pub traffic_keys: BTreeMap<String, [u8; 32]>,
    pub quotes: BTreeMap<String, Vec<Quote>>,
    nonce_rng: ChaCha8Rng,
}

impl Lifecycle {
    pub fn enclave_of(&self, provider: &str) -> Option<&EnclaveInstance> {
        self.enclaves
            .iter()
            .find(|e| e.owner_id() == Some(provider))
    }

    fn enclave_index(&self, provider: &str) -> Option<usize> {
        self.enclaves
            .iter()
            .position(|e| e.owner_id() == Some(provider))
    }

    /// Owner-signed revocation of one provider's enclave.
    pub fn revoke(&mut self, provider: &str) -> Result<Quote> {
        let idx = self
            .enclave_index(provider)
            .with_context(|| format!("no enclave for provider {provider}"))?;
        let owner_key = self
            .keys
            .owners
            .get(provider)
            .with_context(|| format!("no key for provider {provider}"))?;
        let plan_hash = self.enclaves[idx]
            .plan_hash()
            .context("enclave has no plan")?;
        let request = SignedRecord::sign(
            owner_key,
            provider,
            revoke_payload(self.enclaves[idx].id(), &plan_hash),
        );
        let nonce = nonce16(&mut self.nonce_rng);
        Ok(self.enclaves[idx].revoke(&request, nonce)?)
    }

    /// All audit records, merged per enclave in enclave order.
    pub fn audit_records(&self) -> Vec<AuditRecord> {
        let mut records = Vec::new();
        for enclave in &self.enclaves {
            records.extend_from_slice(enclave.audit_records());
        }
        records
    }
}

/// Drive every plan through prepare → bind → channel → onboard, using the
/// adapter payloads produced by `run_prune`.
pub fn run_lifecycle(
    scenario: &Scenario,
    adapter_blobs: &BTreeMap<String, Vec<u8>>,
) -> Result<Lifecycle> {
    let keys = derive_keys(scenario);
    let image = runtime_image();
    let measurement = image.measurement();
    let mut rng = nonce_rng(scenario);
    let mut enclaves = Vec::new();
    let mut traffic_keys = BTreeMap::new();
    let mut quotes: BTreeMap<String, Vec<Quote>> = BTreeMap::new();

    for plan_section in &scenario.plans {
        let owner = &plan_section.owner;
        let blob = adapter_blobs
            .get(owner)
            .with_context(|| format!("no adapter payload for provider {owner}; run prune first"))?;
        // validate the payload before sealing it for the enclave
        deserialize_adapter_set(blob)
            .with_context(|| format!("adapter payload for {owner} does not decode"))?;
        let owner_key = keys
            .owners
            .get(owner)
            .with_context(|| format!("no key for provider {owner}"))?;

        let entries: Vec<PolicyEntry> = plan_section
            .leases
            .iter()
            .map(|l| PolicyEntry {
                client_id: l.client.clone(),
                expiry: l.expiry,
                max_requests: l.max_requests,
            })
            .collect();
        let plan = PolicyPlan::new(plan_section.base_model.clone(), owner.clone(), entries)?;
        let plan_hash = plan.plan_hash();

        let (mut enclave, prepared_quote) = prepare_enclave(
            format!("enclave-{owner}"),
            &image,
            &keys.hw,
            keys.registry.clone(),
            nonce16(&mut rng),
        );
        let binding = SignedRecord::sign(owner_key, owner.clone(), plan_binding_payload(&plan));
        let bound_quote = enclave.bind_plan(plan, &binding, nonce16(&mut rng))?;

        let channel = establish_channel(
            owner_key,
            owner,
            &mut enclave,
            &measurement,
            &plan_hash,
            &keys.hw.verifying_key(),
            &mut rng,
        )?;

        // seal, cross the untrusted boundary as a wire frame, deliver
        let (nonce, ciphertext, ad) =
            seal_onboarding_payload(&channel, blob, &measurement, &plan_hash, &mut rng);
        let frame = encode_onboarding(channel.session_id, owner, &nonce, &ciphertext);
        let (_, sender, frame_nonce, frame_ct) =
            decode_onboarding(&frame).map_err(|e| anyhow!("onboarding frame rejected: {e}"))?;
        enclave.onboard_adapters(&sender, &frame_nonce, &frame_ct, &ad)?;

        quotes.insert(owner.clone(), vec![prepared_quote, bound_quote]);
        traffic_keys.insert(owner.clone(), channel.traffic_key);
        enclaves.push(enclave);
    }

    Ok(Lifecycle {
        image,
        keys,
        enclaves,
        traffic_keys,
        quotes,
        nonce_rng: rng,
    })
}

/// Contributor set for one request: the requested providers that are
/// onboarded and not revoked, registered by their declared active sites.
pub fn contributors_for(
    lifecycle: &Lifecycle,
    client: &str,
    requested: &[String],
    revoked: &BTreeSet<String>,
) -> Result<ContributorSet> {
    let mut contributors = ContributorSet::new(client);
    for provider in requested {
        if revoked.contains(provider) {
            continue;
        }
        let enclave = lifecycle
            .enclave_of(provider)
            .with_context(|| format!("no enclave for provider {provider}"))?;
        let sites = enclave.declared_active_sites()?;
        contributors.add_provider(provider.clone(), &sites);
    }
    Ok(contributors)
}

/// Serve one scenario request through the scheduler.
pub fn run_serve(
    scenario: &Scenario,
    lifecycle: &mut Lifecycle,
    request_idx: usize,
    revoked: &BTreeSet<String>,
) -> Result<(Vector, ScheduleTrace)> {
    let request = scenario
        .requests
        .get(request_idx)
        .with_context(|| format!("scenario has no request {request_idx}"))?;
    let backbone = Backbone::new(scenario.backbone_config())?;
    let contributors = contributors_for(lifecycle, &request.client, &request.providers, revoked)?;

    let serving = &scenario.serving;
    let policy = BatchPolicy::uniform(
        serving.segment_size,
        pkus_core::adapter::Projection::ALL.len(),
    );
    let mode = match serving.mode.as_str() {
        "simulated" => ExecMode::Simulated(scenario.cost_model()),
        "realtime" => ExecMode::Realtime {
            timeout_ms: serving.timeout_ms,
        },
        other => bail!("unknown serving mode {other:?}"),
    };
    let options = RunOptions {
        pipelined: serving.pipelined,
        host_workers: serving.host_workers,
        adaptive: serving.adaptive,
    };
    let input = request_input(scenario, request_idx, backbone.hidden_dim());
    let serve = ServeRequest {
        client_id: &request.client,
        input: &input,
        tokens: request.tokens,
        now: request.at,
    };
    let result = run_request(
        &backbone,
        &contributors,
        &mut lifecycle.enclaves,
        &lifecycle.traffic_keys,
        &serve,
        &policy,
        &mode,
        &options,
    )?;
    Ok(result)
}

/// Deterministic request input derived from the scenario seed and index.
pub fn request_input(scenario: &Scenario, request_idx: usize, dim: usize) -> Vector {
    let mut rng =
        ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x7265_7100 ^ (request_idx as u64) << 32);
    Vector::from_fn(dim, |_| {
        (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

/// Synthetic testbed for `bench`: `k` dense providers over a fresh backbone,
/// no training, leases without limits.
pub struct BenchSetup {
    pub scenario: Scenario,
    pub blobs: BTreeMap<String, Vec<u8>>,
}

pub fn bench_setup(
    providers: usize,
    layers: u32,
    hidden_dim: usize,
    seed: u64,
) -> Result<BenchSetup> {
    use crate::scenario::*;
    let provider_sections: Vec<ProviderSection> = (0..providers)
        .map(|i| ProviderSection {
            id: format!("prov-{i:02}"),
            seed: seed ^ (i as u64 + 1),
            rank: 2,
            alpha: 16.0,
            shard: 0,
            prune: PruneSection {
                r_max: 0.0,
                delta_r: 0.1,
                epsilon: 0.0,
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
                client: "bench-client".to_string(),
                expiry: None,
                max_requests: None,
            }],
        })
        .collect();
    let scenario = Scenario {
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
            client: "bench-client".to_string(),
            providers: (0..providers).map(|i| format!("prov-{i:02}")).collect(),
            tokens: 1,
            at: 0,
        }],
        serving: ServingSection::default(),
        cost: CostSection::default(),
    };
    scenario.validate()?;

    // random dense adapters, no training
    let mut blobs = BTreeMap::new();
    for provider in &scenario.providers {
        let cfg = scenario.backbone_config();
        let d = cfg.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(provider.seed ^ 0x6265_6e63_6800);
        let mut set = ProviderAdapterSet::new(provider.id.clone(), "toy-backbone-v1");
        for site in cfg.sites() {
            let a = Matrix::from_fn(d, provider.rank, |_, _| {
                (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 0.6 - 0.3
            });
            let b = Matrix::from_fn(provider.rank, d, |_, _| {
                (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 0.6 - 0.3
            });
            set.insert(site, LowRankAdapter::new(a, b, provider.alpha)?, true);
        }
        blobs.insert(provider.id.clone(), serialize_adapter_set(&set));
    }
    Ok(BenchSetup { scenario, blobs })
}

/// Evaluate a served configuration's accuracy over a task by running each
/// validation input through the aggregated forward pass.
pub fn evaluate_served_metric(
    backbone: &Backbone,
    sets: &[&ProviderAdapterSet],
    task: &ToyTask,
) -> Result<f64> {
    let dim = backbone.hidden_dim();
    let mut predictions = Vec::with_capacity(task.len());
    for input in &task.inputs {
        let (out, _) = backbone.forward(input, |site, x| {
            let deltas: Vec<Vector> = sets
                .iter()
                .filter_map(|s| s.get(&site))
                .filter(|e| e.active)
                .map(|e| e.adapter.delta(x).expect("compatible dims"))
                .collect();
            Ok(pkus_core::alignagg::aggregate_site(dim, &deltas).expect("equal dims"))
        })?;
        predictions.push(task.predict(&out));
    }
    Ok(pkus_core::backbone::toy_metric(&predictions, &task.labels)?)
}

pub fn default_cost_model() -> CostModel {
    CostModel::default()
}
