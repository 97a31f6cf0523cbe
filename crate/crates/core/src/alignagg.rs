//! Structure-aligned aggregation of per-provider deltas.
//!
//! Each contributing enclave returns only its delta vector for a site; the
//! host averages them into a single virtual-adapter effect. The backbone sees
//! the aggregate and nothing else. Revoking a provider removes it from the
//! contributor set, after which its deltas never enter another average.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::adapter::{ProviderAdapterSet, SiteId};
use crate::linalg::{LinalgError, Matrix, Vector};

#[derive(Debug, Error)]
pub enum AggError {
    #[error("delta dimension mismatch: expected {expected}, got {got}")]
    MixedDimensions { expected: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// The providers a client may use, with a per-site cache of which of them
/// contribute at each site.
#[derive(Debug, Clone)]
pub struct ContributorSet {
    client_id: String,
    providers: BTreeSet<String>,
    site_cache: BTreeMap<SiteId, BTreeSet<String>>,
}

impl ContributorSet {
    pub fn new(client_id: impl Into<String>) -> Self {
        Self {
            client_id: client_id.into(),
            providers: BTreeSet::new(),
            site_cache: BTreeMap::new(),
        }
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    /// Register a provider by its declared active sites.
    pub fn add_provider(&mut self, provider_id: impl Into<String>, active_sites: &[SiteId]) {
        let id = provider_id.into();
        self.providers.insert(id.clone());
        for site in active_sites {
            self.site_cache.entry(*site).or_default().insert(id.clone());
        }
    }

    /// Remove a provider from the set and from every per-site cache.
    /// Removing an absent provider is a no-op.
    pub fn revoke_provider(&mut self, provider_id: &str) {
        self.providers.remove(provider_id);
        self.site_cache.retain(|_, contributors| {
            contributors.remove(provider_id);
            !contributors.is_empty()
        });
    }

    pub fn providers(&self) -> impl Iterator<Item = &str> {
        self.providers.iter().map(String::as_str)
    }

    pub fn provider_count(&self) -> usize {
        self.providers.len()
    }

    /// Contributors at one site, in provider-id order.
    pub fn contributors_at(&self, site: &SiteId) -> Vec<&str> {
        self.site_cache
            .get(site)
            .map(|c| c.iter().map(String::as_str).collect())
            .unwrap_or_default()
    }

    /// Sites with at least one contributor, grouped by layer.
    pub fn sites_in_layer(&self, layer: u32) -> Vec<SiteId> {
        self.site_cache
            .keys()
            .filter(|s| s.layer == layer)
            .copied()
            .collect()
    }
}

/// Mean of the contributed deltas; the zero vector when nobody contributes.
///
/// Per coordinate the summands are sorted before adding, so the result is
/// bitwise independent of contributor arrival order.
pub fn aggregate_site(dim: usize, deltas: &[Vector]) -> Result<Vector, AggError> {
    if deltas.is_empty() {
        return Ok(Vector::zeros(dim));
    }
    for d in deltas {
        if d.dim() != dim {
            return Err(AggError::MixedDimensions {
                expected: dim,
                got: d.dim(),
            });
        }
    }
    let inv = 1.0 / deltas.len() as f64;
    let mut out = Vec::with_capacity(dim);
    let mut column: Vec<f64> = Vec::with_capacity(deltas.len());
    for i in 0..dim {
        column.clear();
        column.extend(deltas.iter().map(|d| d.as_slice()[i]));
        column.sort_by(f64::total_cmp);
        out.push(column.iter().sum::<f64>() * inv);
    }
    Ok(Vector::new(out)?)
}

/// Test oracle: the dense virtual adapter at a site, i.e. the mean of
/// `scale·A·B` over the providers whose set has the site active. Zero when no
/// provider contributes. Requires plaintext adapter sets, so it lives on the
/// provider/test side of the trust boundary.
pub fn virtual_adapter_oracle(
    sets: &[&ProviderAdapterSet],
    site: &SiteId,
    d_out: usize,
    d_in: usize,
) -> Result<Matrix, AggError> {
    let mut contributing = Vec::new();
    for set in sets {
        if let Some(entry) = set.get(site) {
            if entry.active {
                contributing.push(entry.adapter.effective_update()?);
            }
        }
    }
    if contributing.is_empty() {
        return Ok(Matrix::zeros(d_out, d_in));
    }
    let inv = 1.0 / contributing.len() as f64;
    let mut acc = vec![0.0; d_out * d_in];
    for update in &contributing {
        for (a, v) in acc.iter_mut().zip(update.as_slice()) {
            *a += v;
        }
    }
    for a in acc.iter_mut() {
        *a *= inv;
    }
    Ok(Matrix::new(d_out, d_in, acc)?)
}
