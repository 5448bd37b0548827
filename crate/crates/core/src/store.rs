//! Simulated host-memory chunk cache.
//!
//! Stands in for the PCIe offload path: tensors parked here are "on the
//! host", and a fetch checks them out to simulated device memory. The ledger
//! records traffic and the high-water mark of simultaneously checked-out KV
//! chunk pairs, which is what the single-buffer / double-buffer residency
//! tests assert against.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::ChunkTensor;

/// What a stored chunk is. `Q`/`K`/`V` are the post-Alltoall attention
/// inputs, `Hidden` the block input slice, `FfnIn` the FFN input (attention
/// residual output), `AttnOut` the per-chunk attention output, `DAttnOut` its
/// upstream gradient, `Stats` the per-row softmax statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Role {
    Q,
    K,
    V,
    Hidden,
    FfnIn,
    AttnOut,
    DAttnOut,
    Stats,
}

/// Store key: which layer, which sequence chunk, which tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct StoreKey {
    pub layer: usize,
    pub chunk: usize,
    pub role: Role,
}

impl StoreKey {
    pub fn new(layer: usize, chunk: usize, role: Role) -> Self {
        StoreKey { layer, chunk, role }
    }
}

impl fmt::Display for StoreKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(layer {}, chunk {}, {:?})", self.layer, self.chunk, self.role)
    }
}

/// Per-row online softmax statistics saved by the chunked forward: the final
/// running max `m` and denominator `l` for every (batch, head, row).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxStats {
    pub m: Vec<f64>,
    pub l: Vec<f64>,
}

impl SoftmaxStats {
    pub fn size_bytes(&self) -> u64 {
        ((self.m.len() + self.l.len()) * std::mem::size_of::<f64>()) as u64
    }
}

/// A stored payload. Tensors and stats round-trip bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Tensor(ChunkTensor),
    Stats(SoftmaxStats),
}

impl Payload {
    pub fn size_bytes(&self) -> u64 {
        match self {
            Payload::Tensor(t) => t.size_bytes(),
            Payload::Stats(s) => s.size_bytes(),
        }
    }

    pub fn into_tensor(self) -> Result<ChunkTensor> {
        match self {
            Payload::Tensor(t) => Ok(t),
            Payload::Stats(_) => Err(Error::DimMismatch("expected tensor payload".into())),
        }
    }

    pub fn into_stats(self) -> Result<SoftmaxStats> {
        match self {
            Payload::Stats(s) => Ok(s),
            Payload::Tensor(_) => Err(Error::DimMismatch("expected stats payload".into())),
        }
    }
}

/// Traffic and residency counters. All counters are monotone.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Ledger {
    pub bytes_offloaded: u64,
    pub bytes_fetched: u64,
    pub fetch_count: u64,
    pub offload_count: u64,
    /// High-water mark of distinct (layer, chunk) pairs with a K or V key
    /// checked out at the same time: 1 under the strict single-buffer
    /// schedule, 2 with double buffering.
    pub hbm_checkout_highwater: usize,
    /// High-water mark of checked-out keys of any role.
    pub keys_out_highwater: usize,
}

/// Simulated host-memory store with a byte budget.
#[derive(Debug, Clone)]
pub struct OfflStore {
    capacity_bytes: u64,
    resident_bytes: u64,
    resident: BTreeMap<StoreKey, Payload>,
    checkout: BTreeSet<StoreKey>,
    ledger: Ledger,
}

impl OfflStore {
    pub fn new(capacity_bytes: u64) -> Self {
        OfflStore {
            capacity_bytes,
            resident_bytes: 0,
            resident: BTreeMap::new(),
            checkout: BTreeSet::new(),
            ledger: Ledger::default(),
        }
    }

    /// Effectively unbounded store for tests and verification runs.
    pub fn unbounded() -> Self {
        OfflStore::new(u64::MAX)
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn resident_bytes(&self) -> u64 {
        self.resident_bytes
    }

    pub fn contains(&self, key: StoreKey) -> bool {
        self.resident.contains_key(&key)
    }

    /// Park a payload on the host. The key must be fresh and the payload
    /// must fit the remaining budget.
    pub fn offload(&mut self, key: StoreKey, payload: Payload) -> Result<()> {
        if self.resident.contains_key(&key) {
            return Err(Error::DuplicateKey(key));
        }
        let size = payload.size_bytes();
        if self.resident_bytes + size > self.capacity_bytes {
            return Err(Error::CapacityExceeded {
                needed: size,
                available: self.capacity_bytes - self.resident_bytes,
            });
        }
        self.resident_bytes += size;
        self.ledger.bytes_offloaded += size;
        self.ledger.offload_count += 1;
        self.resident.insert(key, payload);
        debug_assert!(self.resident_bytes <= self.capacity_bytes);
        Ok(())
    }

    /// Copy a payload back to simulated device memory and mark it checked
    /// out. The payload stays resident on the host (backward fetches the
    /// same chunks again).
    pub fn fetch(&mut self, key: StoreKey) -> Result<Payload> {
        let payload = self.resident.get(&key).ok_or(Error::MissingKey(key))?.clone();
        if !self.checkout.insert(key) {
            return Err(Error::AlreadyCheckedOut(key));
        }
        self.ledger.bytes_fetched += payload.size_bytes();
        self.ledger.fetch_count += 1;
        self.update_highwater();
        Ok(payload)
    }

    /// Return a checked-out key (the device copy is dropped).
    pub fn release(&mut self, key: StoreKey) -> Result<()> {
        if !self.checkout.remove(&key) {
            return Err(Error::NotCheckedOut(key));
        }
        Ok(())
    }

    /// Drop a resident payload from the host.
    pub fn free(&mut self, key: StoreKey) -> Result<()> {
        if self.checkout.contains(&key) {
            return Err(Error::AlreadyCheckedOut(key));
        }
        let payload = self.resident.remove(&key).ok_or(Error::MissingKey(key))?;
        self.resident_bytes -= payload.size_bytes();
        Ok(())
    }

    fn update_highwater(&mut self) {
        let kv_pairs: BTreeSet<(usize, usize)> = self
            .checkout
            .iter()
            .filter(|k| matches!(k.role, Role::K | Role::V))
            .map(|k| (k.layer, k.chunk))
            .collect();
        self.ledger.hbm_checkout_highwater = self.ledger.hbm_checkout_highwater.max(kv_pairs.len());
        self.ledger.keys_out_highwater = self.ledger.keys_out_highwater.max(self.checkout.len());
    }

    /// Ledger as a JSON value for report output.
    pub fn ledger_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.ledger).expect("ledger serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{ChunkTensor, Dims, Layout};

    fn tensor(seed: u64, s: usize) -> ChunkTensor {
        let mut rng = Rng::new(seed);
        ChunkTensor::random(Dims::new(1, s, 2, 4), Layout::SeqGlobalHeadsLocal, &mut rng)
    }

    #[test]
    fn offload_fetch_round_trip_bitwise() {
        let mut store = OfflStore::unbounded();
        let t = tensor(1, 8);
        let key = StoreKey::new(0, 0, Role::K);
        store.offload(key, Payload::Tensor(t.clone())).unwrap();
        let back = store.fetch(key).unwrap().into_tensor().unwrap();
        assert_eq!(t, back);
        store.release(key).unwrap();
    }

    #[test]
    fn duplicate_key_rejected() {
        let mut store = OfflStore::unbounded();
        let key = StoreKey::new(0, 0, Role::Q);
        store.offload(key, Payload::Tensor(tensor(2, 4))).unwrap();
        assert!(matches!(
            store.offload(key, Payload::Tensor(tensor(3, 4))),
            Err(Error::DuplicateKey(_))
        ));
    }

    #[test]
    fn capacity_boundary() {
        let t = tensor(4, 8);
        let size = t.size_bytes();
        // Fill to exactly capacity: succeeds.
        let mut store = OfflStore::new(size);
        store.offload(StoreKey::new(0, 0, Role::K), Payload::Tensor(t.clone())).unwrap();
        // One more byte over: fails.
        let mut store = OfflStore::new(size + tensor(5, 8).size_bytes() - 1);
        store.offload(StoreKey::new(0, 0, Role::K), Payload::Tensor(t)).unwrap();
        let err = store.offload(StoreKey::new(0, 1, Role::K), Payload::Tensor(tensor(5, 8)));
        assert!(matches!(err, Err(Error::CapacityExceeded { .. })));
    }

    #[test]
    fn fetch_absent_key_errors() {
        let mut store = OfflStore::unbounded();
        assert!(matches!(
            store.fetch(StoreKey::new(0, 3, Role::V)),
            Err(Error::MissingKey(_))
        ));
    }

    #[test]
    fn double_free_errors() {
        let mut store = OfflStore::unbounded();
        let key = StoreKey::new(1, 0, Role::Hidden);
        store.offload(key, Payload::Tensor(tensor(6, 4))).unwrap();
        store.free(key).unwrap();
        assert!(matches!(store.free(key), Err(Error::MissingKey(_))));
    }

    #[test]
    fn free_while_checked_out_errors() {
        let mut store = OfflStore::unbounded();
        let key = StoreKey::new(0, 0, Role::V);
        store.offload(key, Payload::Tensor(tensor(7, 4))).unwrap();
        store.fetch(key).unwrap();
        assert!(store.free(key).is_err());
        store.release(key).unwrap();
        store.free(key).unwrap();
    }

    #[test]
    fn kv_pair_highwater_counts_pairs_not_keys() {
        let mut store = OfflStore::unbounded();
        for chunk in 0..2 {
            store.offload(StoreKey::new(0, chunk, Role::K), Payload::Tensor(tensor(8, 4))).unwrap();
            store.offload(StoreKey::new(0, chunk, Role::V), Payload::Tensor(tensor(9, 4))).unwrap();
        }
        // One full pair out: highwater 1 even though two keys are out.
        store.fetch(StoreKey::new(0, 0, Role::K)).unwrap();
        store.fetch(StoreKey::new(0, 0, Role::V)).unwrap();
        assert_eq!(store.ledger().hbm_checkout_highwater, 1);
        // Second pair fetched before the first is released: highwater 2.
        store.fetch(StoreKey::new(0, 1, Role::K)).unwrap();
        store.fetch(StoreKey::new(0, 1, Role::V)).unwrap();
        assert_eq!(store.ledger().hbm_checkout_highwater, 2);
    }

    #[test]
    fn ledger_counters_monotone_and_conserved() {
        let mut store = OfflStore::unbounded();
        let t = tensor(10, 16);
        let size = t.size_bytes();
        let key = StoreKey::new(0, 0, Role::K);
        store.offload(key, Payload::Tensor(t)).unwrap();
        assert_eq!(store.ledger().bytes_offloaded, size);
        for _ in 0..3 {
            store.fetch(key).unwrap();
            store.release(key).unwrap();
        }
        assert_eq!(store.ledger().bytes_fetched, 3 * size);
        assert_eq!(store.ledger().fetch_count, 3);
    }
}
