//! Global hard-negative mining.
//!
//! A first-in-first-out pool caches reference embeddings as they are computed
//! during training. A batch takes its first half at random; for each of those
//! queries the most similar pooled reference that is not a positive or
//! semi-positive of anything already in the batch supplies the second half.

use std::collections::{BTreeSet, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{PairDataset, TrainPair};
use crate::embed::{dot, Embedding, FloatMatrix};
use crate::error::{Error, Result};
use crate::geo::TileId;

pub const DEFAULT_POOL_CAPACITY: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub id: TileId,
    pub embedding: Embedding,
    pushed_at: u64,
}

#[derive(Clone, Debug)]
pub struct MiningPool {
    capacity: usize,
    entries: VecDeque<PoolEntry>,
    clock: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mined {
    /// Best first; ties broken by ascending id.
    pub hits: Vec<(TileId, f64)>,
    /// Fewer than `k` candidates survived exclusion.
    pub short: bool,
}

impl MiningPool {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("mining pool capacity must be at least 1".into()));
        }
        Ok(Self { capacity, entries: VecDeque::with_capacity(capacity), clock: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &PoolEntry> {
        self.entries.iter()
    }

    pub fn ids(&self) -> Vec<TileId> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn contains(&self, id: TileId) -> bool {
        self.entries.iter().any(|e| e.id == id)
    }

    /// Pushes since `id` was last pushed.
    pub fn staleness(&self, id: TileId) -> Option<u64> {
        self.entries.iter().find(|e| e.id == id).map(|e| self.clock - e.pushed_at)
    }

    /// Appends `(id, embedding)` as the newest entry, replacing any older entry
    /// for `id` and evicting the oldest entry when over capacity.
    pub fn push(&mut self, id: TileId, embedding: Embedding) {
        if let Some(pos) = self.entries.iter().position(|e| e.id == id) {
            self.entries.remove(pos);
        }
        self.clock += 1;
        self.entries.push_back(PoolEntry { id, embedding, pushed_at: self.clock });
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    pub fn mine_hardest(&self, query: &Embedding, exclude: &BTreeSet<TileId>, k: usize) -> Result<Mined> {
        let mut scored = Vec::with_capacity(self.entries.len());
        for e in self.entries.iter().filter(|e| !exclude.contains(&e.id)) {
            if e.embedding.dim() != query.dim() {
                return Err(Error::DimensionMismatch { expected: query.dim(), actual: e.embedding.dim() });
            }
            scored.push((e.id, dot(e.embedding.values(), query.values())));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let short = scored.len() < k;
        scored.truncate(k);
        Ok(Mined { hits: scored, short })
    }

    /// Writes `<stem>.vgem` (embeddings, oldest first) and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let rows: Vec<&[f64]> = self.entries.iter().map(|e| e.embedding.values()).collect();
        let block = FloatMatrix::from_rows(&rows)?;
        block.write_to(BufWriter::new(File::create(stem.with_extension("vgem"))?))?;
        let sidecar = PoolSidecar {
            capacity: self.capacity,
            clock: self.clock,
            entries: self.entries.iter().map(|e| SidecarEntry { id: e.id, pushed_at: e.pushed_at }).collect(),
        };
        serde_json::to_writer_pretty(BufWriter::new(File::create(stem.with_extension("json"))?), &sidecar)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let sidecar: PoolSidecar = serde_json::from_reader(BufReader::new(File::open(stem.with_extension("json"))?))?;
        let block = FloatMatrix::read_from(BufReader::new(File::open(stem.with_extension("vgem"))?))?;
        if block.rows() != sidecar.entries.len() {
            return Err(Error::BadFormat(format!(
                "pool sidecar lists {} entries, block has {}",
                sidecar.entries.len(),
                block.rows()
            )));
        }
        let mut pool = Self::new(sidecar.capacity)?;
        pool.clock = sidecar.clock;
        for (i, e) in sidecar.entries.iter().enumerate() {
            let embedding = crate::embed::l2_normalize(&block.row_f64(i))?;
            pool.entries.push_back(PoolEntry { id: e.id, embedding, pushed_at: e.pushed_at });
        }
        Ok(pool)
    }
}

#[derive(Serialize, Deserialize)]
struct SidecarEntry {
    id: TileId,
    pushed_at: u64,
}

#[derive(Serialize, Deserialize)]
struct PoolSidecar {
    capacity: usize,
    clock: u64,
    entries: Vec<SidecarEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotOrigin {
    Random,
    Mined,
    /// Mining found nothing usable; filled at random instead.
    Fallback,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    /// Dataset indices; the first half random, the second half mined or fallback.
    pub pairs: Vec<usize>,
    pub origin: Vec<SlotOrigin>,
    pub fallback: bool,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Default)]
struct BatchState {
    tiles: BTreeSet<TileId>,
    covered: BTreeSet<TileId>,
}

impl BatchState {
    fn compatible(&self, p: &TrainPair) -> bool {
        !self.covered.contains(&p.tile) && p.covering.iter().all(|t| !self.tiles.contains(t))
    }

    fn add(&mut self, p: &TrainPair) {
        self.tiles.insert(p.tile);
        self.covered.extend(p.covering.iter().copied());
    }
}

/// Assembles `n` pairs: `n/2` drawn uniformly with a seeded shuffle, then one
/// mined partner per random pair. `query_embedding` yields the current ground
/// embedding of a dataset pair.
pub fn build_batch<F>(
    dataset: &PairDataset,
    pool: &MiningPool,
    n: usize,
    seed: u64,
    mut query_embedding: F,
) -> Result<TrainingBatch>
where
    F: FnMut(usize) -> Result<Embedding>,
{
    if n < 2 || n % 2 != 0 {
        return Err(Error::InvalidConfig(format!("batch size must be even and at least 2, got {n}")));
    }
    if dataset.len() < n {
        return Err(Error::InvalidConfig(format!("batch of {n} from {} pairs", dataset.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);

    let half = n / 2;
    let mut pairs = Vec::with_capacity(n);
    let mut used_tiles = BTreeSet::new();
    for &i in &order {
        if pairs.len() == half {
            break;
        }
        if used_tiles.insert(dataset.get(i)?.tile) {
            pairs.push(i);
        }
    }
    let mut state = BatchState::default();
    for &i in &pairs {
        state.add(dataset.get(i)?);
    }
    let mut origin = vec![SlotOrigin::Random; pairs.len()];

    for r in 0..half.min(pairs.len()) {
        let query = query_embedding(pairs[r])?;
        let exclude: BTreeSet<TileId> = state.tiles.union(&state.covered).copied().collect();
        let ranked = pool.mine_hardest(&query, &exclude, pool.len())?;
        let pick = ranked.hits.iter().find_map(|&(tile, _)| {
            dataset
                .pairs_for_tile(tile)
                .iter()
                .copied()
                .find(|&j| state.compatible(&dataset.pairs()[j]))
        });
        if let Some(j) = pick {
            state.add(dataset.get(j)?);
            pairs.push(j);
            origin.push(SlotOrigin::Mined);
        }
    }

    let mut fallback = false;
    for &i in &order {
        if pairs.len() == n {
            break;
        }
        let p = dataset.get(i)?;
        if !pairs.contains(&i) && state.compatible(p) {
            state.add(p);
            pairs.push(i);
            origin.push(SlotOrigin::Fallback);
            fallback = true;
        }
    }
    // Geometry can leave no conflict-free pair; relax to unique tiles.
    for &i in &order {
        if pairs.len() == n {
            break;
        }
        let p = dataset.get(i)?;
        if !pairs.contains(&i) && !state.tiles.contains(&p.tile) {
            state.add(p);
            pairs.push(i);
            origin.push(SlotOrigin::Fallback);
            fallback = true;
        }
    }
    if pairs.len() < n {
        return Err(Error::InvalidConfig(format!(
            "only {} pairs with distinct tiles, batch needs {n}",
            pairs.len()
        )));
    }
    Ok(TrainingBatch { pairs, origin, fallback })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::l2_normalize;
    use crate::geo::{GeoPoint, QueryId};
    use crate::losses::OffsetLabel;

    fn e(v: &[f64]) -> Embedding {
        l2_normalize(v).unwrap()
    }

    #[test]
    fn fifo_eviction() {
        let mut pool = MiningPool::new(3).unwrap();
        for id in 0..3 {
            pool.push(TileId(id), e(&[1.0, id as f64]));
        }
        assert_eq!(pool.ids(), vec![TileId(0), TileId(1), TileId(2)]);
        pool.push(TileId(3), e(&[1.0, 0.0]));
        assert_eq!(pool.ids(), vec![TileId(1), TileId(2), TileId(3)]);
        assert!(MiningPool::new(0).is_err());
    }

    #[test]
    fn repush_replaces() {
        let mut pool = MiningPool::new(4).unwrap();
        pool.push(TileId(7), e(&[1.0, 0.0]));
        pool.push(TileId(8), e(&[0.0, 1.0]));
        pool.push(TileId(7), e(&[0.0, -1.0]));
        assert_eq!(pool.ids(), vec![TileId(8), TileId(7)]);
        assert_eq!(pool.entries().last().unwrap().embedding.values(), &[0.0, -1.0]);
        assert_eq!(pool.staleness(TileId(7)), Some(0));
        assert_eq!(pool.staleness(TileId(8)), Some(1));
    }

    #[test]
    fn hardest_with_mask() {
        let mut pool = MiningPool::new(8).unwrap();
        pool.push(TileId(1), e(&[0.9, 0.435_889_894]));
        pool.push(TileId(2), e(&[0.4, 0.916_515_139]));
        pool.push(TileId(3), e(&[0.3, -0.953_939_201]));
        let q = e(&[1.0, 0.0]);
        let m = pool.mine_hardest(&q, &BTreeSet::new(), 1).unwrap();
        assert_eq!(m.hits[0].0, TileId(1));
        assert!(!m.short);
        let m = pool.mine_hardest(&q, &BTreeSet::from([TileId(1)]), 1).unwrap();
        assert_eq!(m.hits[0].0, TileId(2));
        let m = pool.mine_hardest(&q, &BTreeSet::from([TileId(1)]), 5).unwrap();
        assert!(m.short);
        assert_eq!(m.hits.len(), 2);
    }

    #[test]
    fn ties_break_by_id() {
        let mut pool = MiningPool::new(4).unwrap();
        pool.push(TileId(9), e(&[1.0, 0.0]));
        pool.push(TileId(4), e(&[1.0, 0.0]));
        let m = pool.mine_hardest(&e(&[1.0, 0.0]), &BTreeSet::new(), 2).unwrap();
        assert_eq!(m.hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![TileId(4), TileId(9)]);
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut pool = MiningPool::new(3).unwrap();
        for id in 0..5 {
            pool.push(TileId(id), e(&[1.0, id as f64, 0.5]));
        }
        let stem = dir.path().join("pool");
        pool.save(&stem).unwrap();
        let back = MiningPool::load(&stem).unwrap();
        assert_eq!(back.ids(), pool.ids());
        assert_eq!(back.capacity(), 3);
        assert_eq!(back.staleness(TileId(2)), pool.staleness(TileId(2)));
        for (a, b) in back.entries().zip(pool.entries()) {
            for (x, y) in a.embedding.values().iter().zip(b.embedding.values()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    // Tiles on a line; each query is covered by its own tile and the next one.
    fn line_dataset(n: u32) -> PairDataset {
        PairDataset::new(
            (0..n)
                .map(|i| TrainPair {
                    query: QueryId(i),
                    location: GeoPoint { lat: 0.0, lon: 0.0 },
                    tile: TileId(i),
                    offset: OffsetLabel::default(),
                    semis: vec![],
                    covering: vec![TileId(i), TileId(i + 1)],
                })
                .collect(),
        )
    }

    fn unit_basis(i: usize, dim: usize) -> Embedding {
        let mut v = vec![0.0; dim];
        v[i % dim] = 1.0;
        e(&v)
    }

    #[test]
    fn cold_start_is_random_fallback() {
        let ds = line_dataset(20);
        let pool = MiningPool::new(16).unwrap();
        let b = build_batch(&ds, &pool, 8, 1, |i| Ok(unit_basis(i, 20))).unwrap();
        assert_eq!(b.len(), 8);
        assert!(b.fallback);
        assert!(b.origin[..4].iter().all(|o| *o == SlotOrigin::Random));
        assert!(b.origin[4..].iter().all(|o| *o == SlotOrigin::Fallback));
    }

    #[test]
    fn warm_pool_gives_mined_half_without_conflicts() {
        let ds = line_dataset(40);
        let mut pool = MiningPool::new(64).unwrap();
        for i in 0..40 {
            pool.push(TileId(i), unit_basis(i as usize, 40));
        }
        for seed in 0..50 {
            let b = build_batch(&ds, &pool, 8, seed, |i| Ok(unit_basis(i, 40))).unwrap();
            assert_eq!(b.origin.iter().filter(|o| **o == SlotOrigin::Mined).count(), 4);
            let tiles: BTreeSet<_> = b.pairs.iter().map(|&i| ds.pairs()[i].tile).collect();
            assert_eq!(tiles.len(), 8);
            for (slot, &j) in b.pairs.iter().enumerate().skip(4) {
                let t = ds.pairs()[j].tile;
                for &i in b.pairs.iter().filter(|&&i| i != j) {
                    assert!(!ds.pairs()[i].covering.contains(&t), "seed {seed} slot {slot}");
                }
            }
            let again = build_batch(&ds, &pool, 8, seed, |i| Ok(unit_basis(i, 40))).unwrap();
            assert_eq!(b, again);
        }
    }

    #[test]
    fn batch_size_validation() {
        let ds = line_dataset(4);
        let pool = MiningPool::new(4).unwrap();
        assert!(build_batch(&ds, &pool, 3, 0, |i| Ok(unit_basis(i, 4))).is_err());
        assert!(build_batch(&ds, &pool, 6, 0, |i| Ok(unit_basis(i, 4))).is_err());
    }
}
