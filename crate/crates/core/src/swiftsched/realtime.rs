//! Realtime execution: one worker thread per enclave, ordered channels in
//! both directions, wall-clock timestamps in microseconds. The numeric path
//! is the one `run_simulated` uses; only the clock differs.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use crate::adapter::SiteId;
use crate::aegisproto::EnclaveInstance;
use crate::alignagg::ContributorSet;
use crate::backbone::Backbone;
use crate::enclave::{
    encode_denial, frame_type, ActivationBatch, BatchOutcome, DeltaBatch, FRAME_DELTA_BATCH,
    FRAME_DENIAL,
};
use crate::linalg::Vector;

use super::{
    forward_token, latency_stats, layer_batches, BatchPolicy, EventKind, RunOptions, SchedError,
    ScheduleTrace, ServeRequest, TraceEvent,
};

/// Decode one request frame, serve it, and encode the response. A MAC
/// failure yields no response at all (silent drop).
fn serve_frame(enclave: &mut EnclaveInstance, frame: &[u8], now: u64) -> Option<Vec<u8>> {
    let (session, batch) = ActivationBatch::decode(frame).ok()?;
    match enclave.handle_activation_batch(&batch, now) {
        Ok(BatchOutcome::Deltas(d)) => Some(d.encode(session)),
        Ok(BatchOutcome::Denied { request_id, reason }) => {
            Some(encode_denial(session, request_id, &reason))
        }
        Err(_) => None,
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn run_realtime(
    backbone: &Backbone,
    contributors: &ContributorSet,
    enclaves: &mut [EnclaveInstance],
    traffic_keys: &BTreeMap<String, [u8; 32]>,
    request: &ServeRequest<'_>,
    policy: &BatchPolicy,
    options: &RunOptions,
    timeout: Duration,
) -> Result<(Vector, ScheduleTrace), SchedError> {
    super::provider_index(contributors, enclaves)?;
    let started = Instant::now();
    let micros = move |at: Instant| at.duration_since(started).as_secs_f64() * 1e6;

    std::thread::scope(|scope| {
        let (resp_tx, resp_rx) = mpsc::channel::<(String, Vec<u8>)>();
        let mut req_txs: BTreeMap<String, mpsc::Sender<Vec<u8>>> = BTreeMap::new();
        for enclave in enclaves.iter_mut() {
            let Some(owner) = enclave.owner_id().map(str::to_string) else {
                continue;
            };
            let (tx, rx) = mpsc::channel::<Vec<u8>>();
            req_txs.insert(owner.clone(), tx);
            let resp_tx = resp_tx.clone();
            let now = request.now;
            scope.spawn(move || {
                while let Ok(frame) = rx.recv() {
                    if let Some(reply) = serve_frame(enclave, &frame, now) {
                        if resp_tx.send((owner.clone(), reply)).is_err() {
                            break;
                        }
                    }
                }
            });
        }
        drop(resp_tx);

        let mut events: Vec<TraceEvent> = Vec::new();
        let mut latencies: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut message_count = 0usize;
        let mut active_policy = policy.clone();
        let mut next_request_id: u64 = 1;
        let mut current = request.input.clone();

        for token in 0..request.tokens {
            let mut token_latency: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let pol = active_policy.clone();
            let exchange = |layer: u32, h: &Vector| {
                let batches = layer_batches(contributors, &pol, layer)?;
                let mut pending: BTreeMap<u64, (String, Instant)> = BTreeMap::new();
                for (provider, sites) in &batches {
                    let key = traffic_keys[provider];
                    let batch = ActivationBatch::new(
                        next_request_id,
                        request.client_id,
                        sites.clone(),
                        vec![h.clone(); sites.len()],
                        &key,
                    )?;
                    let frame = batch.encode(0);
                    let sent_at = Instant::now();
                    events.push(TraceEvent {
                        token,
                        kind: EventKind::Dispatch,
                        actor: format!("enclave:{provider}"),
                        start: micros(sent_at),
                        end: micros(sent_at),
                        bytes: frame.len(),
                        sites: sites.len(),
                    });
                    message_count += 1;
                    req_txs[provider]
                        .send(frame)
                        .map_err(|_| SchedError::Timeout(provider.clone()))?;
                    pending.insert(next_request_id, (provider.clone(), sent_at));
                    next_request_id += 1;
                }

                let mut collected: BTreeMap<SiteId, BTreeMap<String, Vector>> = BTreeMap::new();
                while !pending.is_empty() {
                    let (provider, frame) = resp_rx.recv_timeout(timeout).map_err(|_| {
                        let (p, _) = pending.values().next().expect("pending not empty");
                        SchedError::Timeout(p.clone())
                    })?;
                    let received_at = Instant::now();
                    message_count += 1;
                    match frame_type(&frame)? {
                        FRAME_DELTA_BATCH => {
                            let (_, response) = DeltaBatch::decode(&frame)?;
                            if !response.verify_mac(&traffic_keys[&provider]) {
                                return Err(SchedError::MacRejected(provider));
                            }
                            let Some((_, sent_at)) = pending.remove(&response.request_id) else {
                                continue;
                            };
                            let latency = micros(received_at) - micros(sent_at);
                            token_latency
                                .entry(provider.clone())
                                .or_default()
                                .push(latency);
                            events.push(TraceEvent {
                                token,
                                kind: EventKind::Collect,
                                actor: format!("enclave:{provider}"),
                                start: micros(sent_at),
                                end: micros(received_at),
                                bytes: frame.len(),
                                sites: response.sites.len(),
                            });
                            for (site, delta) in response.sites.iter().zip(response.deltas) {
                                collected
                                    .entry(*site)
                                    .or_default()
                                    .insert(provider.clone(), delta);
                            }
                        }
                        FRAME_DENIAL => {
                            let (_, _, reason) = crate::enclave::decode_denial(&frame)?;
                            return Err(SchedError::Denied { provider, reason });
                        }
                        _ => return Err(SchedError::BadConfig("unexpected response frame")),
                    }
                }
                Ok(collected)
            };

            current = forward_token(backbone, contributors, &current, exchange)?;

            if options.adaptive {
                let stats: BTreeMap<String, f64> = token_latency
                    .iter()
                    .map(|(p, v)| (p.clone(), v.iter().sum::<f64>() / v.len() as f64))
                    .collect();
                active_policy = super::adaptive_batch_update(&stats, &active_policy);
            }
            for (p, mut v) in token_latency {
                latencies.entry(p).or_default().append(&mut v);
            }
        }

        let makespan = micros(Instant::now());
        let per_provider = latencies
            .into_iter()
            .map(|(p, v)| (p, latency_stats(&v)))
            .collect();
        Ok((
            current,
            ScheduleTrace {
                events,
                makespan,
                message_count,
                per_provider,
            },
        ))
    })
}
