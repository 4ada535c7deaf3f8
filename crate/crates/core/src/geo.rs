//! Geodesic arithmetic, the overlapping reference tile grid, and query/tile
//! relationships (positive, semi-positive, negative) with their IOU against a
//! tile perfectly centered on the query.
//!
//! Ground distances inside a tile neighborhood use a local equirectangular
//! projection anchored at a reference point; long-range distances use the
//! haversine formula. Both assume a spherical Earth of radius
//! [`EARTH_RADIUS_M`].

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

const DEG: f64 = std::f64::consts::PI / 180.0;

/// A WGS-84 latitude/longitude pair in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::InvalidCoordinate { lat, lon });
        }
        Ok(Self { lat, lon })
    }
}

/// Footprint of a reference image: side length is resolution times pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileGeometry {
    ground_resolution_m_per_px: f64,
    raw_px: u32,
}

impl TileGeometry {
    pub const DEFAULT_RESOLUTION_M_PER_PX: f64 = 0.114;
    pub const DEFAULT_RAW_PX: u32 = 640;

    pub fn new(ground_resolution_m_per_px: f64, raw_px: u32) -> Result<Self> {
        if !(ground_resolution_m_per_px.is_finite() && ground_resolution_m_per_px > 0.0) || raw_px == 0 {
            return Err(Error::InvalidGeometry(format!(
                "resolution {ground_resolution_m_per_px} m/px and {raw_px} px must both be positive"
            )));
        }
        Ok(Self { ground_resolution_m_per_px, raw_px })
    }

    /// Geometry with the default pixel count and a resolution chosen to give `side_len_m`.
    pub fn from_side_len(side_len_m: f64) -> Result<Self> {
        Self::new(side_len_m / f64::from(Self::DEFAULT_RAW_PX), Self::DEFAULT_RAW_PX)
    }

    pub fn side_len_m(&self) -> f64 {
        self.ground_resolution_m_per_px * f64::from(self.raw_px)
    }

    pub fn ground_resolution_m_per_px(&self) -> f64 {
        self.ground_resolution_m_per_px
    }

    pub fn raw_px(&self) -> u32 {
        self.raw_px
    }
}

impl Default for TileGeometry {
    fn default() -> Self {
        Self {
            ground_resolution_m_per_px: Self::DEFAULT_RESOLUTION_M_PER_PX,
            raw_px: Self::DEFAULT_RAW_PX,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TileId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryId(pub u32);

impl fmt::Display for TileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AerialTile {
    pub id: TileId,
    pub center: GeoPoint,
    pub geom: TileGeometry,
    pub row: u32,
    pub col: u32,
}

/// Displacement in meters: `dx_m` east, `dy_m` north.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Offset2D {
    pub dx_m: f64,
    pub dy_m: f64,
}

impl Offset2D {
    pub fn new(dx_m: f64, dy_m: f64) -> Self {
        Self { dx_m, dy_m }
    }

    pub fn norm(&self) -> f64 {
        self.dx_m.hypot(self.dy_m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatchClass {
    Positive,
    SemiPositive,
    Negative,
}

/// Displacement from `a` to `b` in the equirectangular projection whose
/// longitude scale is taken at `reference`.
pub fn local_meters(a: GeoPoint, b: GeoPoint, reference: GeoPoint) -> Offset2D {
    let east = (b.lon - a.lon) * DEG * EARTH_RADIUS_M * (reference.lat * DEG).cos();
    let north = (b.lat - a.lat) * DEG * EARTH_RADIUS_M;
    Offset2D::new(east, north)
}

/// Inverse of [`local_meters`] with the projection anchored at `origin`.
pub fn offset_point(origin: GeoPoint, offset: Offset2D) -> GeoPoint {
    offset_point_at(origin, offset, origin.lat)
}

fn offset_point_at(origin: GeoPoint, offset: Offset2D, reference_lat: f64) -> GeoPoint {
    GeoPoint {
        lat: origin.lat + offset.dy_m / (DEG * EARTH_RADIUS_M),
        lon: origin.lon + offset.dx_m / (DEG * EARTH_RADIUS_M * (reference_lat * DEG).cos()),
    }
}

/// Haversine great-circle distance in meters.
pub fn geodesic_distance_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat * DEG, b.lat * DEG);
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon) * DEG;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Class of a displacement from a tile center, using half-open intervals so
/// that every location has exactly one positive tile on a half-stride grid.
/// Offsets are compared on a 1 nm lattice: points constructed exactly on a
/// boundary then land on the same side no matter which tile measures them.
pub fn class_of_offset(offset: Offset2D, side_len_m: f64) -> MatchClass {
    let nm = |v: f64| (v * 1e9).round();
    let (dx, dy) = (nm(offset.dx_m), nm(offset.dy_m));
    let quarter = nm(side_len_m / 4.0);
    let half = nm(side_len_m / 2.0);
    let within = |v: f64, r: f64| -r <= v && v < r;
    if within(dx, quarter) && within(dy, quarter) {
        MatchClass::Positive
    } else if within(dx, half) && within(dy, half) {
        MatchClass::SemiPositive
    } else {
        MatchClass::Negative
    }
}

pub fn classify(query: GeoPoint, tile: &AerialTile) -> (MatchClass, Offset2D) {
    let offset = local_meters(tile.center, query, tile.center);
    (class_of_offset(offset, tile.geom.side_len_m()), offset)
}

/// IOU between a tile displaced by `offset` and the tile centered on the query.
pub fn iou_vs_aligned(offset: Offset2D, geom: &TileGeometry) -> f64 {
    let l = geom.side_len_m();
    let (ax, ay) = (offset.dx_m.abs(), offset.dy_m.abs());
    if ax >= l || ay >= l {
        return 0.0;
    }
    let inter = (l - ax) * (l - ay);
    inter / (2.0 * l * l - inter)
}

/// Regular reference grid with half-side stride, ordered by `(row, col)`.
#[derive(Clone, Debug)]
pub struct TileGrid {
    tiles: Vec<AerialTile>,
    rows: u32,
    cols: u32,
    geom: TileGeometry,
}

impl TileGrid {
    /// Rebuilds a grid from tiles in any order; ids must be unique.
    pub fn from_tiles(mut tiles: Vec<AerialTile>) -> Result<Self> {
        let geom = tiles
            .first()
            .map(|t| t.geom)
            .ok_or_else(|| Error::InvalidGeometry("empty tile list".into()))?;
        tiles.sort_by_key(|t| (t.row, t.col));
        let mut ids: Vec<_> = tiles.iter().map(|t| t.id).collect();
        ids.sort();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateId(w[0].0));
        }
        let rows = tiles.iter().map(|t| t.row).max().unwrap_or(0) + 1;
        let cols = tiles.iter().map(|t| t.col).max().unwrap_or(0) + 1;
        Ok(Self { tiles, rows, cols, geom })
    }

    pub fn tiles(&self) -> &[AerialTile] {
        &self.tiles
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn geometry(&self) -> TileGeometry {
        self.geom
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn get(&self, id: TileId) -> Option<&AerialTile> {
        // Grids built here use row-major ids; fall back to a scan for foreign manifests.
        match self.tiles.get(id.0 as usize) {
            Some(t) if t.id == id => Some(t),
            _ => self.tiles.iter().find(|t| t.id == id),
        }
    }
}

fn tiles_per_axis(span_m: f64, side_len_m: f64) -> u32 {
    let steps = ((span_m - side_len_m) / (side_len_m / 2.0) - 1e-9).ceil().max(0.0);
    steps as u32 + 1
}

/// Lays out tiles with 50% overlap over the AOI. The first center sits half a
/// side north-east of the south-west corner, so interior points are covered
/// by four tiles.
pub fn build_grid(aoi_sw: GeoPoint, aoi_ne: GeoPoint, geom: TileGeometry) -> Result<TileGrid> {
    if !(aoi_ne.lat > aoi_sw.lat && aoi_ne.lon > aoi_sw.lon) {
        return Err(Error::InvalidGeometry(
            "north-east corner must lie strictly north-east of the south-west corner".into(),
        ));
    }
    let l = geom.side_len_m();
    let north_m = (aoi_ne.lat - aoi_sw.lat) * DEG * EARTH_RADIUS_M;
    // Widest east extent of the AOI; rows nearer the pole get the same column count.
    let cos_max = (aoi_sw.lat * DEG).cos().max((aoi_ne.lat * DEG).cos());
    let east_m = (aoi_ne.lon - aoi_sw.lon) * DEG * EARTH_RADIUS_M * cos_max;
    let slack = 1e-9 * l;
    if east_m + slack < l || north_m + slack < l {
        return Err(Error::AoiTooSmall { east_m, north_m, side_m: l });
    }
    let rows = tiles_per_axis(north_m, l);
    let cols = tiles_per_axis(east_m, l);
    let half = l / 2.0;

    let mut tiles = Vec::with_capacity((rows * cols) as usize);
    for row in 0..rows {
        let north = half + f64::from(row) * half;
        let lat = aoi_sw.lat + north / (DEG * EARTH_RADIUS_M);
        for col in 0..cols {
            let east = half + f64::from(col) * half;
            // Longitudes use the row's own latitude so the east stride is exactly L/2 in each row.
            let center = offset_point_at(
                GeoPoint { lat, lon: aoi_sw.lon },
                Offset2D::new(east, 0.0),
                lat,
            );
            tiles.push(AerialTile {
                id: TileId(row * cols + col),
                center,
                geom,
                row,
                col,
            });
        }
    }
    Ok(TileGrid { tiles, rows, cols, geom })
}

#[derive(Clone, Copy, Debug)]
pub struct CoveringTile<'a> {
    pub tile: &'a AerialTile,
    pub offset: Offset2D,
}

#[derive(Clone, Debug)]
pub struct Coverage<'a> {
    pub positive: CoveringTile<'a>,
    pub semi: Vec<CoveringTile<'a>>,
}

impl Coverage<'_> {
    /// Ids of every tile covering the query, positive first.
    pub fn tile_ids(&self) -> Vec<TileId> {
        std::iter::once(self.positive.tile.id)
            .chain(self.semi.iter().map(|c| c.tile.id))
            .collect()
    }
}

/// Exhaustive scan for the positive tile and the semi-positive tiles of a query.
pub fn covering_tiles(query: GeoPoint, grid: &[AerialTile]) -> Result<Coverage<'_>> {
    let mut positive = Vec::new();
    let mut semi = Vec::new();
    for tile in grid {
        match classify(query, tile) {
            (MatchClass::Positive, offset) => positive.push(CoveringTile { tile, offset }),
            (MatchClass::SemiPositive, offset) => semi.push(CoveringTile { tile, offset }),
            (MatchClass::Negative, _) => {}
        }
    }
    match positive.len() {
        0 => Err(Error::NoCoverage { lat: query.lat, lon: query.lon }),
        1 => Ok(Coverage { positive: positive[0], semi }),
        count => Err(Error::AmbiguousPositive { lat: query.lat, lon: query.lon, count }),
    }
}

/// Keeps at most `max_per_tile` queries per positive tile, drawn uniformly
/// with a seeded generator. Tiles are visited in id order. The result is sorted.
pub fn balance_panoramas(
    assignments: &BTreeMap<TileId, Vec<QueryId>>,
    max_per_tile: usize,
    seed: u64,
) -> Result<Vec<QueryId>> {
    if max_per_tile == 0 {
        return Err(Error::InvalidConfig("max_per_tile must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::new();
    for queries in assignments.values() {
        if queries.len() <= max_per_tile {
            kept.extend_from_slice(queries);
        } else {
            kept.extend(queries.choose_multiple(&mut rng, max_per_tile).copied());
        }
    }
    kept.sort();
    kept.dedup();
    Ok(kept)
}

/// Rounds to the precision manifests store, so a point survives a write and
/// read unchanged.
pub fn snap_to_manifest(p: GeoPoint) -> GeoPoint {
    let snap = |v: f64| fixed_coord::format(v).parse().unwrap_or(v);
    GeoPoint { lat: snap(p.lat), lon: snap(p.lon) }
}

mod fixed_coord {
    use serde::Serializer;
    use serde_json::value::RawValue;

    pub fn format(v: f64) -> String {
        format!("{v:.12}")
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        let raw = RawValue::from_string(format(*v)).map_err(serde::ser::Error::custom)?;
        serde::Serialize::serialize(&raw, s)
    }
}

/// One line of a tile manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub id: u32,
    #[serde(serialize_with = "fixed_coord::serialize")]
    pub lat: f64,
    #[serde(serialize_with = "fixed_coord::serialize")]
    pub lon: f64,
    pub side_len_m: f64,
    pub row: u32,
    pub col: u32,
}

/// One line of a query manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: u32,
    #[serde(serialize_with = "fixed_coord::serialize")]
    pub lat: f64,
    #[serde(serialize_with = "fixed_coord::serialize")]
    pub lon: f64,
}

impl From<&AerialTile> for TileRecord {
    fn from(t: &AerialTile) -> Self {
        Self {
            id: t.id.0,
            lat: t.center.lat,
            lon: t.center.lon,
            side_len_m: t.geom.side_len_m(),
            row: t.row,
            col: t.col,
        }
    }
}

impl TileRecord {
    pub fn to_tile(&self) -> Result<AerialTile> {
        let default = TileGeometry::default();
        let geom = if (self.side_len_m - default.side_len_m()).abs() < 1e-12 {
            default
        } else {
            TileGeometry::from_side_len(self.side_len_m)?
        };
        Ok(AerialTile {
            id: TileId(self.id),
            center: GeoPoint::new(self.lat, self.lon)?,
            geom,
            row: self.row,
            col: self.col,
        })
    }
}

pub fn write_jsonl<T: Serialize, W: Write>(mut w: W, records: impl IntoIterator<Item = T>) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(r: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn read_tile_manifest<R: BufRead>(r: R) -> Result<TileGrid> {
    let records: Vec<TileRecord> = read_jsonl(r)?;
    let tiles = records.iter().map(TileRecord::to_tile).collect::<Result<Vec<_>>>()?;
    TileGrid::from_tiles(tiles)
}
