//! Exact nearest-neighbor search over reference tile embeddings, optionally
//! restricted to tiles near a noisy GPS fix.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embed::{dot, Embedding};
use crate::error::{Error, Result};
use crate::geo::{geodesic_distance_m, offset_point, AerialTile, GeoPoint, Offset2D, TileGeometry, TileId};

#[derive(Clone, Debug)]
pub struct ReferenceDB {
    ids: Vec<TileId>,
    centers: Vec<GeoPoint>,
    embeddings: Vec<Embedding>,
    geometry: TileGeometry,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scope {
    All,
    Radius(f64),
}

impl Scope {
    pub fn radius(m: f64) -> Result<Self> {
        if m.is_finite() && m > 0.0 {
            Ok(Scope::Radius(m))
        } else {
            Err(Error::InvalidConfig(format!("scope radius must be positive, got {m}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScopedQuery {
    pub embedding: Embedding,
    pub gps: GeoPoint,
    pub scope: Scope,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub tile: TileId,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub hits: Vec<Hit>,
    /// Fewer than `k` candidates were available.
    pub short: bool,
}

impl Ranking {
    pub fn tiles(&self) -> Vec<TileId> {
        self.hits.iter().map(|h| h.tile).collect()
    }

    /// One-based rank of `tile`, if retrieved.
    pub fn rank_of(&self, tile: TileId) -> Option<usize> {
        self.hits.iter().position(|h| h.tile == tile).map(|p| p + 1)
    }
}

impl ReferenceDB {
    pub fn new(
        ids: Vec<TileId>,
        centers: Vec<GeoPoint>,
        embeddings: Vec<Embedding>,
        geometry: TileGeometry,
    ) -> Result<Self> {
        if ids.len() != centers.len() || ids.len() != embeddings.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} ids, {} centers, {} embeddings",
                ids.len(),
                centers.len(),
                embeddings.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(*id) {
                return Err(Error::DuplicateId(id.0));
            }
        }
        if let Some(first) = embeddings.first() {
            if let Some(e) = embeddings.iter().find(|e| e.dim() != first.dim()) {
                return Err(Error::DimensionMismatch { expected: first.dim(), actual: e.dim() });
            }
        }
        Ok(Self { ids, centers, embeddings, geometry })
    }

    pub fn from_tiles(tiles: &[AerialTile], embeddings: Vec<Embedding>) -> Result<Self> {
        let geometry = tiles.first().map(|t| t.geom).unwrap_or_default();
        Self::new(tiles.iter().map(|t| t.id).collect(), tiles.iter().map(|t| t.center).collect(), embeddings, geometry)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[TileId] {
        &self.ids
    }

    pub fn center(&self, index: usize) -> GeoPoint {
        self.centers[index]
    }

    pub fn embedding(&self, index: usize) -> &Embedding {
        &self.embeddings[index]
    }

    pub fn geometry(&self) -> TileGeometry {
        self.geometry
    }

    pub fn index_of(&self, id: TileId) -> Option<usize> {
        self.ids.iter().position(|t| *t == id)
    }

    fn rank(&self, query: &Embedding, candidates: impl Iterator<Item = usize>, k: usize) -> Result<Ranking> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        let mut hits = Vec::new();
        for i in candidates {
            let e = &self.embeddings[i];
            if e.dim() != query.dim() {
                return Err(Error::DimensionMismatch { expected: e.dim(), actual: query.dim() });
            }
            hits.push(Hit { index: i, tile: self.ids[i], similarity: dot(e.values(), query.values()) });
        }
        let by_rank = |a: &Hit, b: &Hit| -> Ordering {
            b.similarity.total_cmp(&a.similarity).then(a.tile.cmp(&b.tile))
        };
        let short = hits.len() < k;
        if !short {
            hits.select_nth_unstable_by(k - 1, by_rank);
            hits.truncate(k);
        }
        hits.sort_by(by_rank);
        Ok(Ranking { hits, short })
    }

    /// The `k` most similar tiles, best first; equal similarities rank by id.
    pub fn topk(&self, query: &Embedding, k: usize) -> Result<Ranking> {
        if self.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        self.rank(query, 0..self.len(), k)
    }

    /// Indices of tiles whose center lies within the scope of `gps`.
    pub fn candidates(&self, gps: GeoPoint, scope: Scope) -> Vec<usize> {
        match scope {
            Scope::All => (0..self.len()).collect(),
            Scope::Radius(r) => (0..self.len()).filter(|&i| geodesic_distance_m(gps, self.centers[i]) <= r).collect(),
        }
    }

    pub fn scoped_topk(&self, sq: &ScopedQuery, k: usize) -> Result<Ranking> {
        if self.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        let candidates = self.candidates(sq.gps, sq.scope);
        if candidates.is_empty() {
            return Err(Error::EmptyScope);
        }
        self.rank(&sq.embedding, candidates.into_iter(), k)
    }
}

/// Displaces `truth` by independent uniform east and north draws in `[-noise_m, noise_m]`.
pub fn noisy_gps_with<R: Rng>(truth: GeoPoint, noise_m: f64, rng: &mut R) -> Result<GeoPoint> {
    if !(noise_m.is_finite() && noise_m >= 0.0) {
        return Err(Error::InvalidConfig(format!("GPS noise must be non-negative, got {noise_m}")));
    }
    if noise_m == 0.0 {
        return Ok(truth);
    }
    let east = rng.random_range(-noise_m..=noise_m);
    let north = rng.random_range(-noise_m..=noise_m);
    Ok(offset_point(truth, Offset2D::new(east, north)))
}

pub fn simulate_noisy_gps(truth: GeoPoint, noise_m: f64, seed: u64) -> Result<GeoPoint> {
    noisy_gps_with(truth, noise_m, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::l2_normalize;
    use crate::geo::local_meters;

    fn random_db(n: usize, dim: usize, seed: u64) -> ReferenceDB {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let origin = GeoPoint::new(40.7, -74.0).unwrap();
        let mut centers = Vec::new();
        let mut embs = Vec::new();
        for _ in 0..n {
            centers.push(offset_point(
                origin,
                Offset2D::new(rng.random_range(-2000.0..2000.0), rng.random_range(-2000.0..2000.0)),
            ));
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            embs.push(l2_normalize(&v).unwrap());
        }
        ReferenceDB::new((0..n as u32).map(TileId).collect(), centers, embs, TileGeometry::default()).unwrap()
    }

    #[test]
    fn single_tile_and_planted_match() {
        let db = random_db(1, 4, 1);
        let q = l2_normalize(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let r = db.topk(&q, 1).unwrap();
        assert_eq!(r.tiles(), vec![TileId(0)]);

        let db = random_db(50, 8, 2);
        let planted = db.embedding(17).clone();
        let r = db.topk(&planted, 3).unwrap();
        assert_eq!(r.hits[0].tile, TileId(17));
        assert!((r.hits[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_result_and_errors() {
        let db = random_db(3, 4, 3);
        let q = db.embedding(0).clone();
        let r = db.topk(&q, 10).unwrap();
        assert!(r.short);
        assert_eq!(r.hits.len(), 3);
        assert!(db.topk(&q, 0).is_err());
        let empty = ReferenceDB::new(vec![], vec![], vec![], TileGeometry::default()).unwrap();
        assert!(matches!(empty.topk(&q, 1), Err(Error::EmptyDatabase)));
        let dup = ReferenceDB::new(
            vec![TileId(1), TileId(1)],
            vec![db.center(0), db.center(1)],
            vec![q.clone(), q.clone()],
            TileGeometry::default(),
        );
        assert!(matches!(dup, Err(Error::DuplicateId(1))));
    }

    #[test]
    fn ties_break_by_id() {
        let e = l2_normalize(&[1.0, 1.0]).unwrap();
        let c = GeoPoint::new(0.0, 0.0).unwrap();
        let db = ReferenceDB::new(
            vec![TileId(9), TileId(2), TileId(5)],
            vec![c; 3],
            vec![e.clone(); 3],
            TileGeometry::default(),
        )
        .unwrap();
        assert_eq!(db.topk(&e, 3).unwrap().tiles(), vec![TileId(2), TileId(5), TileId(9)]);
    }

    #[test]
    fn unbounded_scope_equals_topk() {
        let db = random_db(200, 8, 4);
        let q = db.embedding(3).clone();
        let sq = ScopedQuery { embedding: q.clone(), gps: db.center(0), scope: Scope::All };
        assert_eq!(db.scoped_topk(&sq, 10).unwrap(), db.topk(&q, 10).unwrap());
    }

    #[test]
    fn empty_scope_is_an_error() {
        let db = random_db(20, 4, 5);
        let far = GeoPoint::new(-40.0, 100.0).unwrap();
        let sq = ScopedQuery { embedding: db.embedding(0).clone(), gps: far, scope: Scope::radius(200.0).unwrap() };
        assert!(matches!(db.scoped_topk(&sq, 1), Err(Error::EmptyScope)));
        assert!(Scope::radius(0.0).is_err());
    }

    #[test]
    fn tile_fifty_meters_away_is_in_scope() {
        let center = GeoPoint::new(40.7, -74.0).unwrap();
        let gps = offset_point(center, Offset2D::new(30.0, 40.0));
        let db = ReferenceDB::new(
            vec![TileId(0)],
            vec![center],
            vec![l2_normalize(&[1.0]).unwrap()],
            TileGeometry::default(),
        )
        .unwrap();
        assert_eq!(db.candidates(gps, Scope::radius(200.0).unwrap()), vec![0]);
    }

    #[test]
    fn noisy_gps_bounds() {
        let truth = GeoPoint::new(40.7, -74.0).unwrap();
        assert_eq!(simulate_noisy_gps(truth, 0.0, 1).unwrap(), truth);
        assert!(simulate_noisy_gps(truth, -1.0, 1).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut se, mut sn) = (0.0, 0.0);
        let n = 10_000;
        for _ in 0..n {
            let p = noisy_gps_with(truth, 100.0, &mut rng).unwrap();
            let d = local_meters(truth, p, truth);
            assert!(d.dx_m.abs() <= 100.0 + 1e-6 && d.dy_m.abs() <= 100.0 + 1e-6);
            assert!(geodesic_distance_m(truth, p) <= 100.0 * 2f64.sqrt() + 0.01);
            se += d.dx_m;
            sn += d.dy_m;
        }
        assert!((se / n as f64).abs() < 2.0 && (sn / n as f64).abs() < 2.0);
        assert_eq!(simulate_noisy_gps(truth, 100.0, 3).unwrap(), simulate_noisy_gps(truth, 100.0, 3).unwrap());
    }
}
