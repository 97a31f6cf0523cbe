//! Runtime scheduler for split execution: per-layer dispatch of batched
//! activation messages to enclave workers, a site barrier before the backbone
//! proceeds, work stealing across host dispatch workers, and adaptive batch
//! sizing from per-provider latency.
//!
//! Two modes share the numeric code path. Simulated mode drives a virtual
//! clock from a cost model and is fully deterministic; realtime mode runs one
//! thread per enclave over channels and measures wall-clock times. Scheduling
//! never changes results: outputs are bitwise identical to the serialized
//! reference for every policy, mode, and worker count.

mod plan;
mod realtime;

pub use plan::{
    node_duration, schedule_times, simulate_makespan, work_steal_tick, EventKind, ExecutionPlan,
    PlanNode,
};

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{Projection, SiteId};
use crate::aegisproto::{DenyReason, EnclaveInstance, ProtocolError};
use crate::alignagg::{aggregate_site, AggError, ContributorSet};
use crate::backbone::{Backbone, BackboneError, DeltaSourceError};
use crate::enclave::{ActivationBatch, BatchOutcome, DeltaBatch, RuntimeError};
use crate::linalg::Vector;

/// Abstract cost of one scheduled request. All units are abstract time.
///
/// Boundary crossings dominate by default, so unbatched execution pays for
/// every extra message.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Fixed cost per boundary message (serialization, authentication,
    /// context switch), charged on the enclave worker.
    pub c_msg: f64,
    /// Cost per payload byte crossing the boundary.
    pub c_byte: f64,
    /// Enclave compute per site.
    pub c_site: f64,
    /// Backbone compute per layer on the accelerator.
    pub c_gpu_layer: f64,
    /// Backbone compute per layer when the whole model runs inside the
    /// enclave (cpu-only baseline).
    pub c_cpu_layer: f64,
    /// Host-side handling cost per message at the dispatcher and collector.
    pub c_host_msg: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            c_msg: 50.0,
            c_byte: 0.01,
            c_site: 5.0,
            c_gpu_layer: 20.0,
            c_cpu_layer: 200.0,
            c_host_msg: 0.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), SchedError> {
        let all = [
            self.c_msg,
            self.c_byte,
            self.c_site,
            self.c_gpu_layer,
            self.c_cpu_layer,
            self.c_host_msg,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SchedError::BadConfig(
                "cost model entries must be non-negative",
            ));
        }
        Ok(())
    }
}

/// Per-provider segment size: how many consecutive sites go into one message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPolicy {
    default_segment: usize,
    per_provider: BTreeMap<String, usize>,
    max_segment: usize,
}

impl BatchPolicy {
    pub fn uniform(segment: usize, max_segment: usize) -> Self {
        assert!(max_segment >= 1);
        Self {
            default_segment: segment.clamp(1, max_segment),
            per_provider: BTreeMap::new(),
            max_segment,
        }
    }

    pub fn max_segment(&self) -> usize {
        self.max_segment
    }

    pub fn segment_for(&self, provider: &str) -> usize {
        self.per_provider
            .get(provider)
            .copied()
            .unwrap_or(self.default_segment)
    }

    pub fn set_segment(&mut self, provider: &str, segment: usize) {
        self.per_provider
            .insert(provider.to_string(), segment.clamp(1, self.max_segment));
    }
}

/// Scheduling options orthogonal to the batch policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Overlap enclave batches with the layer's backbone compute. Disabled,
    /// every message waits for the GPU work of its layer (serialized
    /// reference).
    pub pipelined: bool,
    /// Host dispatch workers feeding the per-enclave queues.
    pub host_workers: usize,
    /// Re-size per-provider segments from latency stats after each token.
    pub adaptive: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            pipelined: true,
            host_workers: 1,
            adaptive: false,
        }
    }
}

/// Execution mode: deterministic virtual clock, or real threads and wall time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExecMode {
    Simulated(CostModel),
    Realtime { timeout_ms: u64 },
}

/// One scheduled request.
#[derive(Debug, Clone)]
pub struct ServeRequest<'a> {
    pub client_id: &'a str,
    pub input: &'a Vector,
    pub tokens: usize,
    /// Logical time used for lease checks.
    pub now: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p95: f64,
    pub count: usize,
}

/// One scheduled event, for the trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEvent {
    pub token: usize,
    pub kind: EventKind,
    pub actor: String,
    pub start: f64,
    pub end: f64,
    pub bytes: usize,
    pub sites: usize,
}

/// Per-token events plus the summary the trend tests read.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub events: Vec<TraceEvent>,
    pub makespan: f64,
    pub message_count: usize,
    pub per_provider: BTreeMap<String, LatencyStats>,
}

impl ScheduleTrace {
    /// Comma-separated records: `token,event,actor,start,end,bytes`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("token,event,actor,start,end,bytes\n");
        for e in &self.events {
            out.push_str(&format!(
                "{},{:?},{},{:.6},{:.6},{}\n",
                e.token, e.kind, e.actor, e.start, e.end, e.bytes
            ));
        }
        out
    }

    pub fn summary_line(&self) -> String {
        let stats = self
            .per_provider
            .iter()
            .map(|(p, s)| format!("{p}:p95={:.3}", s.p95))
            .collect::<Vec<_>>()
            .join(" ");
        format!(
            "makespan={:.6} messages={} {stats}",
            self.makespan, self.message_count
        )
    }
}

#[derive(Debug, Error)]
pub enum SchedError {
    #[error("invalid scheduler configuration: {0}")]
    BadConfig(&'static str),
    #[error("provider {0} has no onboarded enclave")]
    UnknownProvider(String),
    #[error("request denied by provider {provider}: {reason:?}")]
    Denied {
        provider: String,
        reason: DenyReason,
    },
    #[error("response MAC rejected for provider {0}")]
    MacRejected(String),
    #[error("timed out waiting for enclave {0}")]
    Timeout(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Agg(#[from] AggError),
}

/// Split a provider's active sites within one contiguous layer segment into
/// messages of at most `segment_size` consecutive sites. The chunks are
/// disjoint, ordered, and their union is the input.
pub fn batch_sites(sites: &[SiteId], segment_size: usize) -> Result<Vec<Vec<SiteId>>, SchedError> {
    if segment_size == 0 {
        return Err(SchedError::BadConfig("segment size must be at least 1"));
    }
    if sites.is_empty() {
        return Ok(Vec::new());
    }
    let layer = sites[0].layer;
    for pair in sites.windows(2) {
        if pair[1].layer != layer || pair[1] <= pair[0] {
            return Err(SchedError::BadConfig(
                "segment sites must be ascending within one layer",
            ));
        }
    }
    Ok(sites.chunks(segment_size).map(|c| c.to_vec()).collect())
}

/// Latency-driven batch adjustment: providers responding faster than the
/// cross-provider median get doubled segments, slower providers get halved
/// segments, and a provider exactly at the median keeps its size.
pub fn adaptive_batch_update(stats: &BTreeMap<String, f64>, policy: &BatchPolicy) -> BatchPolicy {
    let mut next = policy.clone();
    if stats.is_empty() {
        return next;
    }
    let mut means: Vec<f64> = stats.values().copied().collect();
    means.sort_by(f64::total_cmp);
    let median = if means.len() % 2 == 1 {
        means[means.len() / 2]
    } else {
        0.5 * (means[means.len() / 2 - 1] + means[means.len() / 2])
    };
    for (provider, mean) in stats {
        let size = policy.segment_for(provider);
        if *mean < median {
            next.set_segment(provider, (size * 2).min(policy.max_segment));
        } else if *mean > median {
            next.set_segment(provider, (size / 2).max(1));
        }
    }
    next
}

/// Makespan of the cpu-only baseline: backbone and adapters both inside the
/// enclave, no boundary messages.
pub fn cpu_only_makespan(
    layers: u32,
    active_sites_per_token: usize,
    tokens: usize,
    cost: &CostModel,
) -> f64 {
    tokens as f64 * (layers as f64 * cost.c_cpu_layer + active_sites_per_token as f64 * cost.c_site)
}

/// The batches one layer needs: per provider in id order, that provider's
/// active sites in the layer chunked by its segment size.
fn layer_batches(
    contributors: &ContributorSet,
    policy: &BatchPolicy,
    layer: u32,
) -> Result<Vec<(String, Vec<SiteId>)>, SchedError> {
    let sites = contributors.sites_in_layer(layer);
    let mut out = Vec::new();
    for provider in contributors.providers() {
        let provider_sites: Vec<SiteId> = sites
            .iter()
            .filter(|s| contributors.contributors_at(s).contains(&provider))
            .copied()
            .collect();
        for chunk in batch_sites(&provider_sites, policy.segment_for(provider))? {
            out.push((provider.to_string(), chunk));
        }
    }
    Ok(out)
}

/// Run one request end to end.
///
/// The backbone proceeds past a site only after the aggregate delta for that
/// site is formed; aborts (denial, MAC failure, timeout) discard all partial
/// state and surface the error.
#[allow(clippy::too_many_arguments)]
pub fn run_request(
    backbone: &Backbone,
    contributors: &ContributorSet,
    enclaves: &mut [EnclaveInstance],
    traffic_keys: &BTreeMap<String, [u8; 32]>,
    request: &ServeRequest<'_>,
    policy: &BatchPolicy,
    mode: &ExecMode,
    options: &RunOptions,
) -> Result<(Vector, ScheduleTrace), SchedError> {
    if request.tokens == 0 {
        return Err(SchedError::BadConfig("token count must be at least 1"));
    }
    if options.host_workers == 0 {
        return Err(SchedError::BadConfig("need at least one host worker"));
    }
    for provider in contributors.providers() {
        if !traffic_keys.contains_key(provider) {
            return Err(SchedError::UnknownProvider(provider.to_string()));
        }
    }
    match mode {
        ExecMode::Simulated(cost) => {
            cost.validate()?;
            run_simulated(
                backbone,
                contributors,
                enclaves,
                traffic_keys,
                request,
                policy,
                *cost,
                options,
            )
        }
        ExecMode::Realtime { timeout_ms } => realtime::run_realtime(
            backbone,
            contributors,
            enclaves,
            traffic_keys,
            request,
            policy,
            options,
            std::time::Duration::from_millis(*timeout_ms),
        ),
    }
}

fn provider_index(
    contributors: &ContributorSet,
    enclaves: &[EnclaveInstance],
) -> Result<BTreeMap<String, usize>, SchedError> {
    let mut index = BTreeMap::new();
    for (i, enclave) in enclaves.iter().enumerate() {
        if let Some(owner) = enclave.owner_id() {
            index.insert(owner.to_string(), i);
        }
    }
    for provider in contributors.providers() {
        if !index.contains_key(provider) {
            return Err(SchedError::UnknownProvider(provider.to_string()));
        }
    }
    Ok(index)
}

/// Aggregate the per-provider deltas collected for one layer into per-site
/// aggregates, in deterministic provider order.
fn aggregate_layer(
    dim: usize,
    contributors: &ContributorSet,
    layer: u32,
    collected: &BTreeMap<SiteId, BTreeMap<String, Vector>>,
) -> Result<BTreeMap<SiteId, Vector>, SchedError> {
    let mut out = BTreeMap::new();
    for site in contributors.sites_in_layer(layer) {
        let deltas: Vec<Vector> = collected
            .get(&site)
            .map(|m| m.values().cloned().collect())
            .unwrap_or_default();
        out.insert(site, aggregate_site(dim, &deltas)?);
    }
    Ok(out)
}

/// Shared per-token forward pass: `exchange` performs the layer's message
/// round trips and returns per-site deltas keyed by provider.
fn forward_token<F>(
    backbone: &Backbone,
    contributors: &ContributorSet,
    input: &Vector,
    mut exchange: F,
) -> Result<Vector, SchedError>
where
    F: FnMut(u32, &Vector) -> Result<BTreeMap<SiteId, BTreeMap<String, Vector>>, SchedError>,
{
    let dim = backbone.hidden_dim();
    let mut failure: Option<SchedError> = None;
    let mut layer_aggregates: BTreeMap<SiteId, Vector> = BTreeMap::new();
    let result = backbone.forward(input, |site, h| {
        if site.projection == Projection::AttnQ {
            match exchange(site.layer, h)
                .and_then(|collected| aggregate_layer(dim, contributors, site.layer, &collected))
            {
                Ok(aggregates) => layer_aggregates = aggregates,
                Err(e) => {
                    failure = Some(e);
                    return Err(DeltaSourceError("layer exchange failed".into()));
                }
            }
        }
        Ok(layer_aggregates
            .get(&site)
            .cloned()
            .unwrap_or_else(|| Vector::zeros(dim)))
    });
    match result {
        Ok((output, _)) => Ok(output),
        Err(e) => Err(failure.take().unwrap_or(SchedError::Backbone(e))),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_simulated(
    backbone: &Backbone,
    contributors: &ContributorSet,
    enclaves: &mut [EnclaveInstance],
    traffic_keys: &BTreeMap<String, [u8; 32]>,
    request: &ServeRequest<'_>,
    policy: &BatchPolicy,
    cost: CostModel,
    options: &RunOptions,
) -> Result<(Vector, ScheduleTrace), SchedError> {
    let index = provider_index(contributors, enclaves)?;
    let mut sim = SimClock::new(cost, options.host_workers);
    let mut active_policy = policy.clone();
    let mut next_request_id: u64 = 1;
    let mut current = request.input.clone();

    for token in 0..request.tokens {
        let mut token_latency: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let pol = active_policy.clone();
        let exchange = |layer: u32, h: &Vector| {
            let batches = layer_batches(contributors, &pol, layer)?;
            let layer_start = sim.begin_layer(token, layer);
            let gpu_node = sim.gpu_node(token, layer, layer_start);
            let anchor = if options.pipelined {
                layer_start
            } else {
                Some(gpu_node)
            };

            // enqueue dispatch tasks per enclave, then drain with stealing
            let mut queues: BTreeMap<String, VecDeque<usize>> = BTreeMap::new();
            for (i, (provider, _)) in batches.iter().enumerate() {
                queues.entry(provider.clone()).or_default().push_back(i);
            }
            let mut collected: BTreeMap<SiteId, BTreeMap<String, Vector>> = BTreeMap::new();
            loop {
                let depths: BTreeMap<String, usize> =
                    queues.iter().map(|(k, v)| (k.clone(), v.len())).collect();
                let Some((worker, provider)) = work_steal_tick(sim.worker_free(), &depths) else {
                    break;
                };
                let batch_idx = queues
                    .get_mut(&provider)
                    .and_then(|q| q.pop_front())
                    .expect("steal tick only picks non-empty queues");
                let (_, sites) = &batches[batch_idx];
                let key = traffic_keys[&provider];
                let batch = ActivationBatch::new(
                    next_request_id,
                    request.client_id,
                    sites.clone(),
                    vec![h.clone(); sites.len()],
                    &key,
                )?;
                next_request_id += 1;
                let session = enclaves[index[&provider]].session_id().unwrap_or_default();
                let frame = batch.encode(session);
                let req_bytes = frame.len();

                // inline exchange through the real codec
                let (_, decoded) = ActivationBatch::decode(&frame)?;
                let outcome =
                    enclaves[index[&provider]].handle_activation_batch(&decoded, request.now)?;
                let delta_batch = match outcome {
                    BatchOutcome::Deltas(d) => d,
                    BatchOutcome::Denied { reason, .. } => {
                        return Err(SchedError::Denied {
                            provider: provider.clone(),
                            reason,
                        })
                    }
                };
                let resp_frame = delta_batch.encode(session);
                let resp_bytes = resp_frame.len();
                let (_, response) = DeltaBatch::decode(&resp_frame)?;
                if !response.verify_mac(&key) {
                    return Err(SchedError::MacRejected(provider.clone()));
                }
                for (site, delta) in response.sites.iter().zip(response.deltas) {
                    collected
                        .entry(*site)
                        .or_default()
                        .insert(provider.clone(), delta);
                }

                let latency = sim.batch_nodes(
                    token,
                    layer,
                    &provider,
                    worker,
                    anchor,
                    req_bytes,
                    resp_bytes,
                    sites.len(),
                );
                token_latency
                    .entry(provider.clone())
                    .or_default()
                    .push(latency);
            }
            sim.finish_layer(token, layer, gpu_node);
            Ok(collected)
        };

        current = forward_token(backbone, contributors, &current, exchange)?;

        if options.adaptive {
            let stats: BTreeMap<String, f64> = token_latency
                .iter()
                .map(|(p, v)| (p.clone(), v.iter().sum::<f64>() / v.len() as f64))
                .collect();
            active_policy = adaptive_batch_update(&stats, &active_policy);
        }
        sim.record_latencies(token_latency);
    }

    let trace = sim.into_trace();
    Ok((current, trace))
}

/// Incremental event DAG builder with times consistent with
/// `schedule_times`: each node starts at the max end of its dependencies.
struct SimClock {
    cost: CostModel,
    plan: ExecutionPlan,
    ends: Vec<f64>,
    starts: Vec<f64>,
    worker_free: Vec<f64>,
    worker_last: Vec<Option<usize>>,
    enclave_last: BTreeMap<String, usize>,
    enclave_prev_dispatch: BTreeMap<String, usize>,
    collector_last: Option<usize>,
    prev_barrier: Option<usize>,
    layer_collects: Vec<usize>,
    message_count: usize,
    latencies: BTreeMap<String, Vec<f64>>,
}

impl SimClock {
    fn new(cost: CostModel, host_workers: usize) -> Self {
        Self {
            cost,
            plan: ExecutionPlan::default(),
            ends: Vec::new(),
            starts: Vec::new(),
            worker_free: vec![0.0; host_workers],
            worker_last: vec![None; host_workers],
            enclave_last: BTreeMap::new(),
            enclave_prev_dispatch: BTreeMap::new(),
            collector_last: None,
            prev_barrier: None,
            layer_collects: Vec::new(),
            message_count: 0,
            latencies: BTreeMap::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        kind: EventKind,
        actor: String,
        deps: Vec<usize>,
        bytes: usize,
        sites: usize,
        token: usize,
        layer: u32,
        provider: Option<String>,
    ) -> usize {
        let node = PlanNode {
            kind,
            actor,
            deps,
            bytes,
            sites,
            token,
            layer,
            provider,
        };
        let start = node.deps.iter().map(|&d| self.ends[d]).fold(0.0, f64::max);
        let end = start + node_duration(&node, &self.cost);
        self.starts.push(start);
        self.ends.push(end);
        self.plan.push(node)
    }

    fn begin_layer(&mut self, _token: usize, _layer: u32) -> Option<usize> {
        self.layer_collects.clear();
        self.prev_barrier
    }

    fn gpu_node(&mut self, token: usize, layer: u32, layer_start: Option<usize>) -> usize {
        let deps = layer_start.map(|d| vec![d]).unwrap_or_default();
        self.push(
            EventKind::GpuLayer,
            "gpu".into(),
            deps,
            0,
            0,
            token,
            layer,
            None,
        )
    }

    fn worker_free(&self) -> &[f64] {
        &self.worker_free
    }

    /// Dispatch, enclave and collect nodes for one batch; returns the
    /// response latency (collect end minus dispatch start).
    #[allow(clippy::too_many_arguments)]
    fn batch_nodes(
        &mut self,
        token: usize,
        layer: u32,
        provider: &str,
        worker: usize,
        anchor: Option<usize>,
        req_bytes: usize,
        resp_bytes: usize,
        sites: usize,
    ) -> f64 {
        let mut deps = Vec::new();
        if let Some(a) = anchor {
            deps.push(a);
        }
        if let Some(prev) = self.worker_last[worker] {
            deps.push(prev);
        }
        if let Some(&prev) = self.enclave_prev_dispatch.get(provider) {
            deps.push(prev);
        }
        let dispatch = self.push(
            EventKind::Dispatch,
            format!("host:{worker}"),
            deps,
            req_bytes,
            sites,
            token,
            layer,
            Some(provider.to_string()),
        );
        self.worker_free[worker] = self.ends[dispatch];
        self.worker_last[worker] = Some(dispatch);
        self.enclave_prev_dispatch
            .insert(provider.to_string(), dispatch);

        let mut deps = vec![dispatch];
        if let Some(&prev) = self.enclave_last.get(provider) {
            deps.push(prev);
        }
        let batch = self.push(
            EventKind::EnclaveBatch,
            format!("enclave:{provider}"),
            deps,
            req_bytes + resp_bytes,
            sites,
            token,
            layer,
            Some(provider.to_string()),
        );
        self.enclave_last.insert(provider.to_string(), batch);

        let mut deps = vec![batch];
        if let Some(prev) = self.collector_last {
            deps.push(prev);
        }
        let collect = self.push(
            EventKind::Collect,
            "collector".into(),
            deps,
            resp_bytes,
            sites,
            token,
            layer,
            Some(provider.to_string()),
        );
        self.collector_last = Some(collect);
        self.layer_collects.push(collect);
        self.message_count += 2;
        self.ends[collect] - self.starts[dispatch]
    }

    fn finish_layer(&mut self, token: usize, layer: u32, gpu_node: usize) {
        let mut deps = vec![gpu_node];
        deps.append(&mut self.layer_collects);
        let barrier = self.push(
            EventKind::Barrier,
            "host".into(),
            deps,
            0,
            0,
            token,
            layer,
            None,
        );
        self.prev_barrier = Some(barrier);
    }

    fn record_latencies(&mut self, token_latency: BTreeMap<String, Vec<f64>>) {
        for (p, mut v) in token_latency {
            self.latencies.entry(p).or_default().append(&mut v);
        }
    }

    fn into_trace(self) -> ScheduleTrace {
        let makespan = self.ends.iter().copied().fold(0.0, f64::max);
        let events = self
            .plan
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| TraceEvent {
                token: n.token,
                kind: n.kind,
                actor: n.actor.clone(),
                start: self.starts[i],
                end: self.ends[i],
                bytes: n.bytes,
                sites: n.sites,
            })
            .collect();
        let per_provider = self
            .latencies
            .into_iter()
            .map(|(p, v)| (p, latency_stats(&v)))
            .collect();
        ScheduleTrace {
            events,
            makespan,
            message_count: self.message_count,
            per_provider,
        }
    }
}

pub(crate) fn latency_stats(samples: &[f64]) -> LatencyStats {
    if samples.is_empty() {
        return LatencyStats {
            mean: 0.0,
            p95: 0.0,
            count: 0,
        };
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let idx = ((sorted.len() as f64 * 0.95).ceil() as usize).clamp(1, sorted.len()) - 1;
    LatencyStats {
        mean,
        p95: sorted[idx],
        count: sorted.len(),
    }
}
