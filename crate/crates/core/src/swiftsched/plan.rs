//! Event DAG of one scheduled request and its cost evaluation.
//!
//! Actor serialization is encoded as explicit dependency edges, so the
//! schedule's makespan is exactly the longest path through the DAG and can be
//! recomputed by any longest-path algorithm over the same nodes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::CostModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Backbone compute for one layer on the accelerator.
    GpuLayer,
    /// Backbone compute for one layer inside the enclave (cpu-only baseline).
    CpuLayer,
    /// Host-side send of one batch message.
    Dispatch,
    /// Boundary crossing, enclave compute and response crossing for one batch.
    EnclaveBatch,
    /// Host-side receipt and aggregation of one response.
    Collect,
    /// Zero-width synchronization point at the end of a layer.
    Barrier,
}

/// One node of the plan. `deps` must reference earlier nodes only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanNode {
    pub kind: EventKind,
    pub actor: String,
    pub deps: Vec<usize>,
    pub bytes: usize,
    pub sites: usize,
    pub token: usize,
    pub layer: u32,
    pub provider: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub nodes: Vec<PlanNode>,
}

impl ExecutionPlan {
    pub fn push(&mut self, node: PlanNode) -> usize {
        debug_assert!(node.deps.iter().all(|&d| d < self.nodes.len()));
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Duration of one node under a cost model.
pub fn node_duration(node: &PlanNode, cost: &CostModel) -> f64 {
    match node.kind {
        EventKind::GpuLayer => cost.c_gpu_layer,
        EventKind::CpuLayer => cost.c_cpu_layer,
        EventKind::Dispatch => cost.c_host_msg,
        EventKind::EnclaveBatch => {
            2.0 * cost.c_msg + cost.c_byte * node.bytes as f64 + cost.c_site * node.sites as f64
        }
        EventKind::Collect => cost.c_host_msg,
        EventKind::Barrier => 0.0,
    }
}

/// Start/end times of every node: forward pass in node order (nodes only
/// depend on earlier nodes).
pub fn schedule_times(plan: &ExecutionPlan, cost: &CostModel) -> Vec<(f64, f64)> {
    let mut times: Vec<(f64, f64)> = Vec::with_capacity(plan.nodes.len());
    for node in &plan.nodes {
        let start = node.deps.iter().map(|&d| times[d].1).fold(0.0f64, f64::max);
        times.push((start, start + node_duration(node, cost)));
    }
    times
}

/// Completion time of the whole plan: the critical path of the DAG.
pub fn simulate_makespan(plan: &ExecutionPlan, cost: &CostModel) -> f64 {
    schedule_times(plan, cost)
        .iter()
        .map(|(_, end)| *end)
        .fold(0.0, f64::max)
}

/// Work-stealing assignment for one tick: the idle (earliest-free) worker
/// takes the oldest pending dispatch task from the most-loaded queue. Ties
/// break towards the lower worker index and the lexicographically first
/// queue, so assignment is deterministic. Returns `None` when every queue is
/// empty.
pub fn work_steal_tick(
    worker_free_at: &[f64],
    queue_depths: &BTreeMap<String, usize>,
) -> Option<(usize, String)> {
    let (worker, _) = worker_free_at
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| a.total_cmp(b).then(ia.cmp(ib)))?;
    let (queue, depth) = queue_depths
        .iter()
        .max_by(|(qa, a), (qb, b)| a.cmp(b).then(qb.cmp(qa)))?;
    if *depth == 0 {
        return None;
    }
    Some((worker, queue.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(
        kind: EventKind,
        actor: &str,
        deps: Vec<usize>,
        bytes: usize,
        sites: usize,
    ) -> PlanNode {
        PlanNode {
            kind,
            actor: actor.to_string(),
            deps,
            bytes,
            sites,
            token: 0,
            layer: 0,
            provider: None,
        }
    }

    /// Independent longest-path evaluation: iterate to a fixpoint instead of
    /// the single forward pass used by `schedule_times`.
    fn longest_path_oracle(plan: &ExecutionPlan, cost: &CostModel) -> f64 {
        let n = plan.nodes.len();
        let mut end = vec![0.0f64; n];
        loop {
            let mut changed = false;
            for i in 0..n {
                let start = plan.nodes[i]
                    .deps
                    .iter()
                    .map(|&d| end[d])
                    .fold(0.0f64, f64::max);
                let e = start + node_duration(&plan.nodes[i], cost);
                if e > end[i] {
                    end[i] = e;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        end.iter().copied().fold(0.0, f64::max)
    }

    #[test]
    fn gpu_only_chain_is_layer_sum() {
        let cost = CostModel::default();
        let mut plan = ExecutionPlan::default();
        let mut prev: Option<usize> = None;
        for _ in 0..4 {
            let deps = prev.map(|p| vec![p]).unwrap_or_default();
            prev = Some(plan.push(node(EventKind::GpuLayer, "gpu", deps, 0, 0)));
        }
        assert_eq!(simulate_makespan(&plan, &cost), 4.0 * cost.c_gpu_layer);
    }

    #[test]
    fn serial_single_site_closed_form() {
        // one provider, one site, pipeline disabled:
        // L·c_gpu_layer + 2·c_msg + c_byte·bytes + c_site
        let cost = CostModel::default();
        let layers = 3;
        let bytes = 400;
        let mut plan = ExecutionPlan::default();
        let mut prev = None;
        for l in 0..layers {
            let deps = prev.map(|p| vec![p]).unwrap_or_default();
            let gpu = plan.push(node(EventKind::GpuLayer, "gpu", deps, 0, 0));
            prev = Some(if l == 1 {
                let batch = plan.push(node(
                    EventKind::EnclaveBatch,
                    "enclave:a",
                    vec![gpu],
                    bytes,
                    1,
                ));
                plan.push(node(EventKind::Barrier, "host", vec![gpu, batch], 0, 0))
            } else {
                gpu
            });
        }
        let want = layers as f64 * cost.c_gpu_layer
            + 2.0 * cost.c_msg
            + cost.c_byte * bytes as f64
            + cost.c_site;
        let got = simulate_makespan(&plan, &cost);
        assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
    }

    #[test]
    fn parallel_providers_at_one_site_take_the_max() {
        // k identical providers on distinct workers: makespan equals k = 1
        let cost = CostModel::default();
        let mk_plan = |k: usize| {
            let mut plan = ExecutionPlan::default();
            let gpu = plan.push(node(EventKind::GpuLayer, "gpu", vec![], 0, 0));
            let mut deps = vec![gpu];
            for i in 0..k {
                let actor = format!("enclave:{i}");
                deps.push(plan.push(node(EventKind::EnclaveBatch, &actor, vec![], 256, 1)));
            }
            plan.push(node(EventKind::Barrier, "host", deps, 0, 0));
            plan
        };
        let one = simulate_makespan(&mk_plan(1), &cost);
        for k in [2, 8, 32] {
            let many = simulate_makespan(&mk_plan(k), &cost);
            assert_eq!(many, one, "parallel max independent of k={k}");
            assert_eq!(many, longest_path_oracle(&mk_plan(k), &cost));
        }
    }

    #[test]
    fn forward_pass_matches_fixpoint_oracle_on_random_dags() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let cost = CostModel::default();
        let mut rng = StdRng::seed_from_u64(77);
        for _ in 0..20 {
            let mut plan = ExecutionPlan::default();
            let n = rng.gen_range(2..40);
            for i in 0..n {
                let deps = (0..i).filter(|_| rng.gen_bool(0.3)).collect::<Vec<usize>>();
                let kind = match rng.gen_range(0..4) {
                    0 => EventKind::GpuLayer,
                    1 => EventKind::Dispatch,
                    2 => EventKind::EnclaveBatch,
                    _ => EventKind::Collect,
                };
                plan.push(node(
                    kind,
                    "x",
                    deps,
                    rng.gen_range(0..1000),
                    rng.gen_range(0..6),
                ));
            }
            let a = simulate_makespan(&plan, &cost);
            let b = longest_path_oracle(&plan, &cost);
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn steal_tick_empty_queues_is_noop() {
        let queues = BTreeMap::from([("a".to_string(), 0usize), ("b".to_string(), 0)]);
        assert_eq!(work_steal_tick(&[0.0, 1.0], &queues), None);
    }

    #[test]
    fn steal_tick_idle_worker_takes_most_loaded_queue() {
        let queues = BTreeMap::from([
            ("a".to_string(), 1usize),
            ("b".to_string(), 5),
            ("c".to_string(), 2),
        ]);
        let got = work_steal_tick(&[3.0, 0.5], &queues).unwrap();
        assert_eq!(got, (1, "b".to_string()));
    }

    #[test]
    fn steal_tick_ties_are_deterministic() {
        let queues = BTreeMap::from([("a".to_string(), 2usize), ("b".to_string(), 2)]);
        let got = work_steal_tick(&[1.0, 1.0], &queues).unwrap();
        assert_eq!(got, (0, "a".to_string()));
    }
}
