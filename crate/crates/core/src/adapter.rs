//! Adapters, injection sites, provider adapter sets, and the binary payload
//! format used for onboarding.
//!
//! Wire format (all integers little-endian):
//!
//! ```text
//! magic "PKUS" | version u16 | base_model_id (u32 len + UTF-8)
//! | provider_id (u32 len + UTF-8) | entry count u32
//! | per entry: layer u32, projection u8, active u8, rank u32,
//!   d_out u32, d_in u32, alpha f64, A then B as f64 row-major
//! ```
//!
//! Entries are written in `SiteId` order, so encoding is canonical: equal sets
//! produce byte-identical payloads.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, Vector};

pub const ADAPTER_MAGIC: &[u8; 4] = b"PKUS";
pub const ADAPTER_FORMAT_VERSION: u16 = 1;

/// The six linear projections that can carry an adapter in each layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    FfnUp,
    FfnDown,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::AttnQ,
        Projection::AttnK,
        Projection::AttnV,
        Projection::AttnO,
        Projection::FfnUp,
        Projection::FfnDown,
    ];

    pub fn ordinal(self) -> u8 {
        match self {
            Projection::AttnQ => 0,
            Projection::AttnK => 1,
            Projection::AttnV => 2,
            Projection::AttnO => 3,
            Projection::FfnUp => 4,
            Projection::FfnDown => 5,
        }
    }

    pub fn from_ordinal(ord: u8) -> Option<Self> {
        Self::ALL.get(ord as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::AttnQ => "attn_q",
            Projection::AttnK => "attn_k",
            Projection::AttnV => "attn_v",
            Projection::AttnO => "attn_o",
            Projection::FfnUp => "ffn_up",
            Projection::FfnDown => "ffn_down",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An injection site: a (layer, projection) position in the backbone.
/// Total order is (layer, projection ordinal).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: u32,
    pub projection: Projection,
}

impl SiteId {
    pub fn new(layer: u32, projection: Projection) -> Self {
        Self { layer, projection }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}/{}", self.layer, self.projection)
    }
}

/// Errors from adapter construction and payload decoding.
#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("bad magic bytes in adapter payload")]
    BadMagic,
    #[error("unsupported adapter format version {0}")]
    UnsupportedVersion(u16),
    #[error("adapter payload truncated at offset {0}")]
    Truncated(usize),
    #[error("adapter payload has trailing bytes after last entry")]
    TrailingBytes,
    #[error("invalid projection tag {0}")]
    InvalidProjection(u8),
    #[error("invalid UTF-8 in {0}")]
    InvalidUtf8(&'static str),
    #[error("invalid active flag {0}")]
    InvalidActiveFlag(u8),
    #[error("dimension inconsistency: {0}")]
    DimensionInconsistency(String),
    #[error("duplicate entry for site {0}")]
    DuplicateSite(SiteId),
    #[error("adapter rank must be at least 1")]
    ZeroRank,
    #[error("adapter alpha must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A low-rank update `ΔW = (alpha/rank)·A·B` attached to one injection site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapter {
    a: Matrix,
    b: Matrix,
    rank: usize,
    alpha: f64,
}

impl LowRankAdapter {
    pub fn new(a: Matrix, b: Matrix, alpha: f64) -> Result<Self, AdapterError> {
        if a.cols() != b.rows() {
            return Err(AdapterError::DimensionInconsistency(format!(
                "a is {}x{} but b is {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        let rank = a.cols();
        if rank == 0 {
            return Err(AdapterError::ZeroRank);
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(AdapterError::BadAlpha(alpha));
        }
        Ok(Self { a, b, rank, alpha })
    }

    /// Zero-initialized adapter: A zero, B zero, so the effective update is zero.
    pub fn zeros(d_out: usize, d_in: usize, rank: usize, alpha: f64) -> Result<Self, AdapterError> {
        Self::new(Matrix::zeros(d_out, rank), Matrix::zeros(rank, d_in), alpha)
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub(crate) fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub(crate) fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// LoRA scaling factor `alpha / rank`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_out(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.b.cols()
    }

    /// The delta this adapter contributes for input `x`.
    pub fn delta(&self, x: &Vector) -> Result<Vector, LinalgError> {
        linalg::lowrank_delta(&self.a, &self.b, x, self.scale())
    }

    /// Dense effective update `scale·A·B`.
    pub fn effective_update(&self) -> Result<Matrix, LinalgError> {
        let dense = linalg::matmul(&self.a, &self.b)?;
        Matrix::new(
            dense.rows(),
            dense.cols(),
            dense.as_slice().iter().map(|v| v * self.scale()).collect(),
        )
    }

    /// Zeroize factor matrices in place. The buffers stay allocated so erasure
    /// can be inspected afterwards.
    pub(crate) fn zeroize(&mut self) {
        for v in self.a.data_mut() {
            *v = 0.0;
        }
        for v in self.b.data_mut() {
            *v = 0.0;
        }
    }
}

/// Merged dense weights `base + scale·A·B`, the oracle side of split execution.
pub fn merge_to_dense(adapter: &LowRankAdapter, base: &Matrix) -> Result<Matrix, AdapterError> {
    let update = adapter.effective_update()?;
    Ok(linalg::mat_add_scaled(base, &update, 1.0)?)
}

/// One entry of a provider adapter set: the adapter plus its active flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub adapter: LowRankAdapter,
    pub active: bool,
}

/// A provider's adapters keyed by injection site.
///
/// Pruned (inactive) adapters stay in the set so a later revert can reactivate
/// them; they are skipped at serving time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderAdapterSet {
    provider_id: String,
    base_model_id: String,
    entries: BTreeMap<SiteId, AdapterEntry>,
}

impl ProviderAdapterSet {
    pub fn new(provider_id: impl Into<String>, base_model_id: impl Into<String>) -> Self {
        Self {
            provider_id: provider_id.into(),
            base_model_id: base_model_id.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn base_model_id(&self) -> &str {
        &self.base_model_id
    }

    pub fn insert(&mut self, site: SiteId, adapter: LowRankAdapter, active: bool) {
        self.entries.insert(site, AdapterEntry { adapter, active });
    }

    pub fn get(&self, site: &SiteId) -> Option<&AdapterEntry> {
        self.entries.get(site)
    }

    pub(crate) fn get_mut(&mut self, site: &SiteId) -> Option<&mut AdapterEntry> {
        self.entries.get_mut(site)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sites(&self) -> impl Iterator<Item = &SiteId> {
        self.entries.keys()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&SiteId, &AdapterEntry)> {
        self.entries.iter()
    }

    /// Sites with an active adapter, in SiteId order.
    pub fn active_sites(&self) -> Vec<SiteId> {
        self.entries
            .iter()
            .filter(|(_, e)| e.active)
            .map(|(s, _)| *s)
            .collect()
    }

    pub fn set_active(&mut self, site: &SiteId, active: bool) -> bool {
        match self.entries.get_mut(site) {
            Some(e) => {
                e.active = active;
                true
            }
            None => false,
        }
    }

    /// Snapshot of all active flags in SiteId order, for exact revert.
    pub fn active_flags(&self) -> Vec<bool> {
        self.entries.values().map(|e| e.active).collect()
    }

    pub fn restore_active_flags(&mut self, flags: &[bool]) {
        assert_eq!(
            flags.len(),
            self.entries.len(),
            "flag snapshot size mismatch"
        );
        for (entry, &flag) in self.entries.values_mut().zip(flags) {
            entry.active = flag;
        }
    }

    pub(crate) fn zeroize(&mut self) {
        for entry in self.entries.values_mut() {
            entry.adapter.zeroize();
            entry.active = false;
        }
    }

    /// True when every factor matrix in the set is all-zero.
    pub fn is_all_zero(&self) -> bool {
        self.entries
            .values()
            .all(|e| e.adapter.a().is_zero() && e.adapter.b().is_zero())
    }
}

// --- binary payload codec ---------------------------------------------------

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn matrix(&mut self, m: &Matrix) {
        for &v in m.as_slice() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], AdapterError> {
        if self.pos + n > self.buf.len() {
            return Err(AdapterError::Truncated(self.pos));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, AdapterError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, AdapterError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, AdapterError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, AdapterError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self, what: &'static str) -> Result<String, AdapterError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| AdapterError::InvalidUtf8(what))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix, AdapterError> {
        // reject claimed dimensions before allocating for them
        let entries = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or(AdapterError::Truncated(self.pos))?;
        if self.pos + entries > self.buf.len() {
            return Err(AdapterError::Truncated(self.pos));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Ok(Matrix::new(rows, cols, data)?)
    }

    fn done(&self) -> Result<(), AdapterError> {
        if self.pos != self.buf.len() {
            return Err(AdapterError::TrailingBytes);
        }
        Ok(())
    }
}

/// Encode a provider adapter set into the canonical onboarding payload.
pub fn serialize_adapter_set(set: &ProviderAdapterSet) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(ADAPTER_MAGIC);
    w.u16(ADAPTER_FORMAT_VERSION);
    w.str(&set.base_model_id);
    w.str(&set.provider_id);
    w.u32(set.entries.len() as u32);
    for (site, entry) in &set.entries {
        w.u32(site.layer);
        w.u8(site.projection.ordinal());
        w.u8(entry.active as u8);
        w.u32(entry.adapter.rank() as u32);
        w.u32(entry.adapter.d_out() as u32);
        w.u32(entry.adapter.d_in() as u32);
        w.f64(entry.adapter.alpha());
        w.matrix(entry.adapter.a());
        w.matrix(entry.adapter.b());
    }
    w.buf
}

/// Decode an onboarding payload back into a provider adapter set.
pub fn deserialize_adapter_set(bytes: &[u8]) -> Result<ProviderAdapterSet, AdapterError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != ADAPTER_MAGIC {
        return Err(AdapterError::BadMagic);
    }
    let version = r.u16()?;
    if version != ADAPTER_FORMAT_VERSION {
        return Err(AdapterError::UnsupportedVersion(version));
    }
    let base_model_id = r.str("base_model_id")?;
    let provider_id = r.str("provider_id")?;
    let count = r.u32()?;
    let mut set = ProviderAdapterSet::new(provider_id, base_model_id);
    for _ in 0..count {
        let layer = r.u32()?;
        let proj_tag = r.u8()?;
        let projection =
            Projection::from_ordinal(proj_tag).ok_or(AdapterError::InvalidProjection(proj_tag))?;
        let active = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(AdapterError::InvalidActiveFlag(other)),
        };
        let rank = r.u32()? as usize;
        let d_out = r.u32()? as usize;
        let d_in = r.u32()? as usize;
        if rank == 0 {
            return Err(AdapterError::ZeroRank);
        }
        if d_out == 0 || d_in == 0 {
            return Err(AdapterError::DimensionInconsistency(format!(
                "entry at layer {layer} has zero dimension {d_out}x{d_in}"
            )));
        }
        let alpha = r.f64()?;
        let a = r.matrix(d_out, rank)?;
        let b = r.matrix(rank, d_in)?;
        let adapter = LowRankAdapter::new(a, b, alpha)?;
        let site = SiteId::new(layer, projection);
        if set.entries.contains_key(&site) {
            return Err(AdapterError::DuplicateSite(site));
        }
        set.insert(site, adapter, active);
    }
    r.done()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_adapter(rng: &mut StdRng, d: usize, rank: usize) -> LowRankAdapter {
        let a = Matrix::from_fn(d, rank, |_, _| rng.gen_range(-1.0..1.0));
        let b = Matrix::from_fn(rank, d, |_, _| rng.gen_range(-1.0..1.0));
        LowRankAdapter::new(a, b, 16.0).unwrap()
    }

    fn sample_set(rng: &mut StdRng, sites: usize) -> ProviderAdapterSet {
        let mut set = ProviderAdapterSet::new("prov-a", "toy-backbone-v1");
        for i in 0..sites {
            let site = SiteId::new(
                (i / Projection::ALL.len()) as u32,
                Projection::ALL[i % Projection::ALL.len()],
            );
            set.insert(site, rand_adapter(rng, 4, 2), rng.gen_bool(0.5));
        }
        set
    }

    #[test]
    fn site_ordering_is_layer_then_projection() {
        let a = SiteId::new(0, Projection::FfnDown);
        let b = SiteId::new(1, Projection::AttnQ);
        assert!(a < b);
        let c = SiteId::new(1, Projection::AttnK);
        assert!(b < c);
    }

    #[test]
    fn active_sites_empty_when_all_inactive() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut set = sample_set(&mut rng, 6);
        for site in set.sites().copied().collect::<Vec<_>>() {
            set.set_active(&site, false);
        }
        assert!(set.active_sites().is_empty());
    }

    #[test]
    fn active_sites_single() {
        let mut rng = StdRng::seed_from_u64(2);
        let mut set = ProviderAdapterSet::new("p", "m");
        let site = SiteId::new(0, Projection::AttnQ);
        set.insert(site, rand_adapter(&mut rng, 4, 2), true);
        assert_eq!(set.active_sites(), vec![site]);
    }

    #[test]
    fn active_sites_matches_filter_and_sort_oracle() {
        let mut rng = StdRng::seed_from_u64(3);
        let set = sample_set(&mut rng, 24);
        let got = set.active_sites();
        let mut want: Vec<SiteId> = set
            .entries()
            .filter(|(_, e)| e.active)
            .map(|(s, _)| *s)
            .collect();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn empty_set_roundtrips_header_only() {
        let set = ProviderAdapterSet::new("p", "m");
        let bytes = serialize_adapter_set(&set);
        // magic + version + two strings + count
        assert_eq!(bytes.len(), 4 + 2 + (4 + 1) + (4 + 1) + 4);
        let back = deserialize_adapter_set(&bytes).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn one_entry_roundtrip_is_bitwise() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut set = ProviderAdapterSet::new("p", "m");
        set.insert(
            SiteId::new(2, Projection::FfnUp),
            rand_adapter(&mut rng, 4, 2),
            true,
        );
        let bytes = serialize_adapter_set(&set);
        let back = deserialize_adapter_set(&bytes).unwrap();
        assert_eq!(back, set);
        // re-encoding is canonical
        assert_eq!(serialize_adapter_set(&back), bytes);
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut rng = StdRng::seed_from_u64(5);
        let set = sample_set(&mut rng, 3);
        let bytes = serialize_adapter_set(&set);
        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(
            deserialize_adapter_set(truncated),
            Err(AdapterError::Truncated(_))
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut rng = StdRng::seed_from_u64(6);
        let mut bytes = serialize_adapter_set(&sample_set(&mut rng, 1));
        bytes[0] = b'X';
        assert!(matches!(
            deserialize_adapter_set(&bytes),
            Err(AdapterError::BadMagic)
        ));
    }

    #[test]
    fn oversized_dimension_claim_rejected_before_allocation() {
        let mut rng = StdRng::seed_from_u64(42);
        let mut set = ProviderAdapterSet::new("p", "m");
        set.insert(
            SiteId::new(0, Projection::AttnQ),
            rand_adapter(&mut rng, 4, 2),
            true,
        );
        let mut bytes = serialize_adapter_set(&set);
        // d_out field sits after layer(4) + projection(1) + active(1) + rank(4)
        let header = 4 + 2 + (4 + 1) + (4 + 1) + 4;
        let d_out_offset = header + 4 + 1 + 1 + 4;
        bytes[d_out_offset..d_out_offset + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            deserialize_adapter_set(&bytes),
            Err(AdapterError::Truncated(_))
        ));
    }

    #[test]
    fn unsupported_version_rejected() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut bytes = serialize_adapter_set(&sample_set(&mut rng, 1));
        bytes[4] = 0xff;
        assert!(matches!(
            deserialize_adapter_set(&bytes),
            Err(AdapterError::UnsupportedVersion(_))
        ));
    }

    #[test]
    fn merge_to_dense_zero_adapter_keeps_base() {
        let base = Matrix::from_fn(4, 4, |i, j| (i * 4 + j) as f64);
        let adapter = LowRankAdapter::zeros(4, 4, 2, 16.0).unwrap();
        let merged = merge_to_dense(&adapter, &base).unwrap();
        assert_eq!(merged, base);
    }

    #[test]
    fn merge_to_dense_zero_base_is_effective_update() {
        let mut rng = StdRng::seed_from_u64(8);
        let adapter = rand_adapter(&mut rng, 4, 2);
        let merged = merge_to_dense(&adapter, &Matrix::zeros(4, 4)).unwrap();
        assert_eq!(merged, adapter.effective_update().unwrap());
    }

    #[test]
    fn delta_matches_merged_dense_forward() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..16 {
            let adapter = rand_adapter(&mut rng, 5, 2);
            let x = Vector::from_fn(5, |_| rng.gen_range(-1.0..1.0));
            let split = adapter.delta(&x).unwrap();
            let merged = merge_to_dense(&adapter, &Matrix::zeros(5, 5)).unwrap();
            let dense = linalg::matvec(&merged, &x).unwrap();
            for (s, d) in split.as_slice().iter().zip(dense.as_slice()) {
                let denom = d.abs().max(1.0);
                assert!((s - d).abs() / denom < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn serialization_roundtrip_is_identity(seed in any::<u64>(), sites in 0usize..24) {
            let mut rng = StdRng::seed_from_u64(seed);
            let set = sample_set(&mut rng, sites);
            let bytes = serialize_adapter_set(&set);
            let back = deserialize_adapter_set(&bytes).unwrap();
            prop_assert_eq!(&back, &set);
            prop_assert_eq!(serialize_adapter_set(&back), bytes);
        }

        #[test]
        fn one_byte_truncation_always_fails(seed in any::<u64>()) {
            let mut rng = StdRng::seed_from_u64(seed);
            let set = sample_set(&mut rng, 2);
            let bytes = serialize_adapter_set(&set);
            prop_assert!(deserialize_adapter_set(&bytes[..bytes.len() - 1]).is_err());
        }
    }
}
