//! Deterministic toy backbone with per-site injection points.
//!
//! Each layer holds one frozen square weight matrix per projection site. All
//! six sites of a layer read the same layer input, their outputs are summed,
//! and the layer finishes with a tanh nonlinearity and a residual add:
//!
//! ```text
//! y_s  = W_s · h + δ_s          for each site s of the layer
//! h'   = tanh(Σ_s y_s) + h
//! ```
//!
//! The delta source is a callback so the same forward pass serves plain
//! execution, merged-weight oracles, and the full split-execution path.

use std::collections::BTreeMap;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{Projection, SiteId};
use crate::linalg::{matvec, vec_add, LinalgError, Matrix, Vector};

/// Shape and seed of the frozen backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: u32,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn site_count(&self) -> usize {
        self.layers as usize * Projection::ALL.len()
    }

    /// All sites in execution order.
    pub fn sites(&self) -> Vec<SiteId> {
        let mut out = Vec::with_capacity(self.site_count());
        for layer in 0..self.layers {
            for proj in Projection::ALL {
                out.push(SiteId::new(layer, proj));
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("backbone must have at least one layer and hidden_dim >= 2")]
    BadConfig,
    #[error("input dimension {got} does not match hidden_dim {expected}")]
    InputDimension { expected: usize, got: usize },
    #[error("delta for site {site} has dimension {got}, expected {expected}")]
    DeltaDimension {
        site: SiteId,
        expected: usize,
        got: usize,
    },
    #[error("delta source aborted at site {site}: {reason}")]
    DeltaAborted { site: SiteId, reason: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Error a delta source may raise to abort the forward pass.
#[derive(Debug, Clone)]
pub struct DeltaSourceError(pub String);

/// One recorded injection: the activation handed to the delta source and the
/// delta that came back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub site: SiteId,
    pub activation: Vector,
    pub delta: Vector,
}

/// Per-site activations and deltas in execution order, plus the final output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub entries: Vec<TraceEntry>,
    pub output: Vector,
}

impl ForwardTrace {
    /// Line-delimited JSON records for debugging.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("trace entry serializes"));
            out.push('\n');
        }
        out
    }
}

/// Frozen backbone weights, generated deterministically from the config seed.
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    weights: BTreeMap<SiteId, Matrix>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self, BackboneError> {
        if cfg.layers < 1 || cfg.hidden_dim < 2 {
            return Err(BackboneError::BadConfig);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.hidden_dim;
        let limit = 1.0 / (2.0 * (d as f64).sqrt());
        let mut weights = BTreeMap::new();
        for site in cfg.sites() {
            let m = Matrix::from_fn(d, d, |_, _| uniform(&mut rng, -limit, limit));
            weights.insert(site, m);
        }
        Ok(Self { cfg, weights })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn hidden_dim(&self) -> usize {
        self.cfg.hidden_dim
    }

    pub fn layers(&self) -> u32 {
        self.cfg.layers
    }

    pub fn site_weight(&self, site: &SiteId) -> Option<&Matrix> {
        self.weights.get(site)
    }

    /// A copy of this backbone with one site's weights replaced, for
    /// merged-weight oracles.
    pub fn with_site_weight(&self, site: SiteId, weight: Matrix) -> Result<Self, BackboneError> {
        let d = self.cfg.hidden_dim;
        if weight.rows() != d || weight.cols() != d {
            return Err(BackboneError::InputDimension {
                expected: d,
                got: weight.rows().max(weight.cols()),
            });
        }
        if !self.weights.contains_key(&site) {
            return Err(BackboneError::BadConfig);
        }
        let mut out = self.clone();
        out.weights.insert(site, weight);
        Ok(out)
    }

    /// Forward pass with per-site deltas supplied by `delta_source`.
    ///
    /// The callback sees every site in execution order together with the
    /// activation at that site; returning a wrong-dimension vector or an
    /// error aborts the pass (fail-closed, no partial output).
    pub fn forward<F>(
        &self,
        input: &Vector,
        mut delta_source: F,
    ) -> Result<(Vector, ForwardTrace), BackboneError>
    where
        F: FnMut(SiteId, &Vector) -> Result<Vector, DeltaSourceError>,
    {
        let d = self.cfg.hidden_dim;
        if input.dim() != d {
            return Err(BackboneError::InputDimension {
                expected: d,
                got: input.dim(),
            });
        }
        let mut entries = Vec::with_capacity(self.cfg.site_count());
        let mut h = input.clone();
        for layer in 0..self.cfg.layers {
            let mut acc = vec![0.0; d];
            for proj in Projection::ALL {
                let site = SiteId::new(layer, proj);
                let w = &self.weights[&site];
                let projected = matvec(w, &h)?;
                let delta = delta_source(site, &h)
                    .map_err(|e| BackboneError::DeltaAborted { site, reason: e.0 })?;
                if delta.dim() != d {
                    return Err(BackboneError::DeltaDimension {
                        site,
                        expected: d,
                        got: delta.dim(),
                    });
                }
                let y = vec_add(&projected, &delta)?;
                for (a, v) in acc.iter_mut().zip(y.as_slice()) {
                    *a += v;
                }
                entries.push(TraceEntry {
                    site,
                    activation: h.clone(),
                    delta,
                });
            }
            let activated = Vector::new(acc.iter().map(|v| v.tanh()).collect())?;
            h = vec_add(&activated, &h)?;
        }
        let trace = ForwardTrace {
            entries,
            output: h.clone(),
        };
        Ok((h, trace))
    }

    /// Forward with no deltas anywhere.
    pub fn forward_plain(&self, input: &Vector) -> Result<(Vector, ForwardTrace), BackboneError> {
        let d = self.cfg.hidden_dim;
        self.forward(input, |_, _| Ok(Vector::zeros(d)))
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let unit = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    lo + unit * (hi - lo)
}

// --- synthetic task ----------------------------------------------------------

/// Synthetic classification task: labels come from a fixed linear plus tanh
/// rule, predictions read the backbone output through a fixed readout vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyTask {
    pub inputs: Vec<Vector>,
    pub labels: Vec<bool>,
    readout: Vector,
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("dataset size must be at least 1")]
    EmptyDataset,
    #[error("predictions and labels differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Deterministic dataset of `n` examples in `dim` dimensions.
pub fn toy_task_dataset(seed: u64, n: usize, dim: usize) -> Result<ToyTask, TaskError> {
    if n == 0 {
        return Err(TaskError::EmptyDataset);
    }
    assert!(dim >= 2, "task dimension must be at least 2");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746f_7974_6173_6b00);
    let w = Vector::from_fn(dim, |_| uniform(&mut rng, -1.0, 1.0));
    let v = Vector::from_fn(dim, |_| uniform(&mut rng, -1.0, 1.0));
    let readout = Vector::from_fn(dim, |_| uniform(&mut rng, -1.0, 1.0));
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x = Vector::from_fn(dim, |_| uniform(&mut rng, -1.0, 1.0));
        let linear: f64 = w
            .as_slice()
            .iter()
            .zip(x.as_slice())
            .map(|(a, b)| a * b)
            .sum();
        let gate: f64 = v
            .as_slice()
            .iter()
            .zip(x.as_slice())
            .map(|(a, b)| a * b)
            .sum();
        let label = linear + 0.8 * gate.tanh() > 0.0;
        inputs.push(x);
        labels.push(label);
    }
    Ok(ToyTask {
        inputs,
        labels,
        readout,
    })
}

impl ToyTask {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Classification score of a backbone output; prediction is `score > 0`.
    pub fn score(&self, output: &Vector) -> f64 {
        self.readout
            .as_slice()
            .iter()
            .zip(output.as_slice())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn predict(&self, output: &Vector) -> bool {
        self.score(output) > 0.0
    }

    pub fn readout(&self) -> &Vector {
        &self.readout
    }

    /// Split off the last `val_fraction` of the examples as a held-out
    /// validation task. Both halves keep the shared readout.
    pub fn split_validation(&self, val_fraction: f64) -> (ToyTask, ToyTask) {
        assert!((0.0..1.0).contains(&val_fraction));
        let val_len = ((self.len() as f64 * val_fraction) as usize).clamp(1, self.len() - 1);
        let cut = self.len() - val_len;
        let train = ToyTask {
            inputs: self.inputs[..cut].to_vec(),
            labels: self.labels[..cut].to_vec(),
            readout: self.readout.clone(),
        };
        let val = ToyTask {
            inputs: self.inputs[cut..].to_vec(),
            labels: self.labels[cut..].to_vec(),
            readout: self.readout.clone(),
        };
        (train, val)
    }

    /// Split into `shards` contiguous, near-equal pieces. The readout is shared.
    pub fn shard(&self, shards: usize) -> Vec<ToyTask> {
        assert!(shards >= 1 && shards <= self.len());
        let mut out = Vec::with_capacity(shards);
        let base = self.len() / shards;
        let rem = self.len() % shards;
        let mut start = 0;
        for i in 0..shards {
            let size = base + usize::from(i < rem);
            out.push(ToyTask {
                inputs: self.inputs[start..start + size].to_vec(),
                labels: self.labels[start..start + size].to_vec(),
                readout: self.readout.clone(),
            });
            start += size;
        }
        out
    }
}

/// Accuracy in [0, 1].
pub fn toy_metric(predictions: &[bool], labels: &[bool]) -> Result<f64, TaskError> {
    if predictions.len() != labels.len() {
        return Err(TaskError::LengthMismatch(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(TaskError::EmptyDataset);
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
