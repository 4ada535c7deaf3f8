//! Training pairs: a query matched to its positive tile, with the labels every
//! loss term needs and the tile set that must never be used as its negative.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::geo::{covering_tiles, iou_vs_aligned, GeoPoint, QueryId, TileGrid, TileId};
use crate::losses::{IouPairLabel, OffsetLabel};

#[derive(Clone, Debug, PartialEq)]
pub struct SemiLabel {
    pub tile: TileId,
    pub label: IouPairLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub query: QueryId,
    pub location: GeoPoint,
    pub tile: TileId,
    pub offset: OffsetLabel,
    pub semis: Vec<SemiLabel>,
    /// Positive tile followed by semi-positive tiles.
    pub covering: Vec<TileId>,
}

#[derive(Clone, Debug, Default)]
pub struct PairDataset {
    pairs: Vec<TrainPair>,
    by_tile: BTreeMap<TileId, Vec<usize>>,
}

impl PairDataset {
    pub fn new(pairs: Vec<TrainPair>) -> Self {
        let mut by_tile: BTreeMap<TileId, Vec<usize>> = BTreeMap::new();
        for (i, p) in pairs.iter().enumerate() {
            by_tile.entry(p.tile).or_default().push(i);
        }
        Self { pairs, by_tile }
    }

    /// Labels each query against `grid`. Semi-positive tiles outside
    /// `allowed_tiles` (when given) are dropped from the IOU labels but kept in
    /// the covering set.
    pub fn from_queries(
        grid: &TileGrid,
        queries: &[(QueryId, GeoPoint)],
        allowed_tiles: Option<&BTreeSet<TileId>>,
    ) -> Result<Self> {
        let l = grid.geometry().side_len_m();
        let mut pairs = Vec::with_capacity(queries.len());
        for &(query, location) in queries {
            let cov = covering_tiles(location, grid.tiles())?;
            let iou_pos = iou_vs_aligned(cov.positive.offset, &cov.positive.tile.geom);
            let semis = cov
                .semi
                .iter()
                .filter(|c| allowed_tiles.is_none_or(|a| a.contains(&c.tile.id)))
                .map(|c| {
                    let iou_semi = iou_vs_aligned(c.offset, &c.tile.geom);
                    Ok(SemiLabel { tile: c.tile.id, label: IouPairLabel::new(iou_pos, iou_semi)? })
                })
                .collect::<Result<Vec<_>>>()?;
            pairs.push(TrainPair {
                query,
                location,
                tile: cov.positive.tile.id,
                offset: OffsetLabel {
                    lat_norm: cov.positive.offset.dy_m / l,
                    lon_norm: cov.positive.offset.dx_m / l,
                },
                semis,
                covering: cov.tile_ids(),
            });
        }
        Ok(Self::new(pairs))
    }

    pub fn pairs(&self) -> &[TrainPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<&TrainPair> {
        self.pairs
            .get(i)
            .ok_or_else(|| Error::ShapeMismatch(format!("pair {i} of {}", self.pairs.len())))
    }

    /// Indices of the pairs whose positive tile is `tile`.
    pub fn pairs_for_tile(&self, tile: TileId) -> &[usize] {
        self.by_tile.get(&tile).map_or(&[], Vec::as_slice)
    }
}
