//! Synthetic world: a tile grid, balanced street-level queries, and features
//! drawn from a smooth random field so that similarity tracks spatial overlap.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embed::FloatMatrix;
use crate::error::{Error, Result};
use crate::geo::{
    balance_panoramas, build_grid, snap_to_manifest, AerialTile, covering_tiles, local_meters, offset_point, read_jsonl, read_tile_manifest,
    write_jsonl, GeoPoint, Offset2D, QueryId, QueryRecord, TileGeometry, TileGrid, TileId, TileRecord,
};

/// Samples per axis when averaging the field over a tile footprint.
pub const FOOTPRINT_LATTICE: usize = 8;

const STREAM_FIELD: u64 = 1;
const STREAM_QUERIES: u64 = 2;
const STREAM_DISTRACTION: u64 = 3;
const STREAM_BALANCE: u64 = 4;
const STREAM_SPLIT: u64 = 5;
const STREAM_TILE_NOISE: u64 = 1 << 32;
const STREAM_QUERY_NOISE: u64 = 2 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// South-west corner of the area of interest.
    pub origin: GeoPoint,
    pub span_east_m: f64,
    pub span_north_m: f64,
    pub geometry: TileGeometry,
    /// Queries drawn before balancing.
    pub raw_queries: usize,
    pub max_queries_per_tile: usize,
    pub feature_dim: usize,
    /// Longest length-scale of the latent field.
    pub length_scale_m: f64,
    /// Ratio of the longest to the shortest component length-scale.
    pub scale_ratio: f64,
    /// Standard deviation of the Gaussian noise added to every feature component.
    pub noise: f64,
    pub distraction_fraction: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let geometry = TileGeometry::default();
        let l = geometry.side_len_m();
        Self {
            origin: GeoPoint { lat: 40.7, lon: -74.0 },
            span_east_m: 4.0 * l,
            span_north_m: 4.0 * l,
            geometry,
            raw_queries: 400,
            max_queries_per_tile: 2,
            feature_dim: 32,
            length_scale_m: 1000.0,
            scale_ratio: 30.0,
            noise: 0.001,
            distraction_fraction: 0.04,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.geometry.side_len_m();
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.span_east_m >= 2.0 * l * (1.0 - 1e-12) && self.span_north_m >= 2.0 * l * (1.0 - 1e-12)) {
            return bad(format!(
                "span {} x {} m is below twice the tile side {l} m",
                self.span_east_m, self.span_north_m
            ));
        }
        if self.max_queries_per_tile == 0 {
            return bad("queries per tile cap must be at least 1".into());
        }
        if self.feature_dim == 0 || self.feature_dim % 2 != 0 {
            return bad(format!("feature dimension must be even and positive, got {}", self.feature_dim));
        }
        if !(self.length_scale_m.is_finite() && self.length_scale_m > 0.0) {
            return bad(format!("length scale must be positive, got {}", self.length_scale_m));
        }
        if !(self.scale_ratio.is_finite() && self.scale_ratio >= 1.0) {
            return bad(format!("scale ratio must be at least 1, got {}", self.scale_ratio));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        if !(0.0..1.0).contains(&self.distraction_fraction) {
            return bad(format!("distraction fraction must lie in [0, 1), got {}", self.distraction_fraction));
        }
        GeoPoint::new(self.origin.lat, self.origin.lon)?;
        Ok(())
    }

    /// Number of tiles left without queries, rounding half up.
    pub fn distraction_count(&self, tiles: usize) -> usize {
        (self.distraction_fraction * tiles as f64 + 0.5).floor() as usize
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Sum of `dim / 2` random plane waves, emitted as cosine/sine pairs. Every
/// point maps to a unit vector and the inner product of two points depends
/// only on their displacement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureField {
    /// Wave vectors in radians per meter, `[east, north]`.
    waves: Vec<[f64; 2]>,
    phases: Vec<f64>,
}

impl FeatureField {
    /// Component length-scales are log-uniform in
    /// `[length_scale_m / scale_ratio, length_scale_m]`, each jittered by a
    /// factor in `[0.5, 1.5]`.
    pub fn new<R: Rng>(dim: usize, length_scale_m: f64, scale_ratio: f64, rng: &mut R) -> Self {
        let k = dim / 2;
        let rotation = rng.random_range(0.0..PI);
        let mut waves = Vec::with_capacity(k);
        let mut phases = Vec::with_capacity(k);
        for i in 0..k {
            let theta = rotation + PI * i as f64 / k as f64;
            let finer = scale_ratio.powf(rng.random_range(0.0..=1.0));
            let magnitude = rng.random_range(0.5..1.5) * finer / length_scale_m;
            waves.push([magnitude * theta.cos(), magnitude * theta.sin()]);
            phases.push(rng.random_range(0.0..2.0 * PI));
        }
        Self { waves, phases }
    }

    pub fn dim(&self) -> usize {
        2 * self.waves.len()
    }

    /// Field value at local coordinates (meters east, meters north).
    pub fn at(&self, east: f64, north: f64) -> Vec<f64> {
        let scale = (1.0 / self.waves.len() as f64).sqrt();
        let mut out = Vec::with_capacity(self.dim());
        for (w, p) in self.waves.iter().zip(&self.phases) {
            let arg = w[0] * east + w[1] * north + p;
            out.push(scale * arg.cos());
            out.push(scale * arg.sin());
        }
        out
    }

    /// Mean over a `FOOTPRINT_LATTICE`² lattice on the square of side `side`
    /// centered at the given local coordinates.
    pub fn footprint_mean(&self, east: f64, north: f64, side: f64) -> Vec<f64> {
        let s = FOOTPRINT_LATTICE;
        let mut acc = vec![0.0; self.dim()];
        for i in 0..s {
            for j in 0..s {
                let de = ((j as f64 + 0.5) / s as f64 - 0.5) * side;
                let dn = ((i as f64 + 0.5) / s as f64 - 0.5) * side;
                for (a, v) in acc.iter_mut().zip(self.at(east + de, north + dn)) {
                    *a += v;
                }
            }
        }
        let n = (s * s) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub id: QueryId,
    pub location: GeoPoint,
    pub positive: TileId,
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub grid: TileGrid,
    pub queries: Vec<SyntheticQuery>,
    /// Raw ground features, aligned with `queries`.
    pub ground: Vec<Vec<f64>>,
    /// Raw aerial features, aligned with `grid.tiles()`.
    pub aerial: Vec<Vec<f64>>,
    pub distraction: BTreeSet<TileId>,
}

fn add_noise(v: &mut [f64], sigma: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for x in v.iter_mut() {
            *x += normal.sample(rng);
        }
    }
    // Store at f32 precision so the world round-trips through the binary format unchanged.
    for x in v.iter_mut() {
        *x = f64::from(*x as f32);
    }
    Ok(())
}

pub fn generate(config: &WorldConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let l = config.geometry.side_len_m();
    let sw = config.origin;
    let ne = offset_point(sw, Offset2D::new(config.span_east_m, config.span_north_m));
    // Coordinates are kept at manifest precision so a saved world reloads exactly.
    let grid = build_grid(sw, ne, config.geometry)?;
    let grid = TileGrid::from_tiles(
        grid.tiles().iter().map(|t| AerialTile { center: snap_to_manifest(t.center), ..*t }).collect(),
    )?;
    let field = FeatureField::new(config.feature_dim, config.length_scale_m, config.scale_ratio, &mut stream(config.seed, STREAM_FIELD));
    let local = |p: GeoPoint| {
        let o = local_meters(sw, p, sw);
        (o.dx_m, o.dy_m)
    };

    let aerial = grid
        .tiles()
        .iter()
        .map(|t| {
            let (e, n) = local(t.center);
            let mut f = field.footprint_mean(e, n, l);
            add_noise(&mut f, config.noise, &mut stream(config.seed, STREAM_TILE_NOISE + u64::from(t.id.0)))?;
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;

    // Queries fall between the outermost tile centers, where every point has
    // one positive and three semi-positive tiles.
    let first = grid.tiles()[0].center;
    let east_extent = f64::from(grid.cols() - 1) * l / 2.0;
    let north_extent = f64::from(grid.rows() - 1) * l / 2.0;
    let mut rng = stream(config.seed, STREAM_QUERIES);
    let mut raw = Vec::with_capacity(config.raw_queries);
    let mut attempts = 0usize;
    while raw.len() < config.raw_queries {
        attempts += 1;
        if attempts > 10 * config.raw_queries + 100 {
            return Err(Error::InvalidGeometry("could not place queries with full coverage".into()));
        }
        let p = snap_to_manifest(offset_point(
            first,
            Offset2D::new(rng.random_range(0.0..east_extent.max(f64::MIN_POSITIVE)), rng.random_range(0.0..north_extent.max(f64::MIN_POSITIVE))),
        ));
        let Ok(cov) = covering_tiles(p, grid.tiles()) else { continue };
        if cov.semi.len() != 3 {
            continue;
        }
        raw.push((QueryId(raw.len() as u32), p, cov.positive.tile.id));
    }

    let mut tile_ids: Vec<TileId> = grid.tiles().iter().map(|t| t.id).collect();
    tile_ids.shuffle(&mut stream(config.seed, STREAM_DISTRACTION));
    let distraction: BTreeSet<TileId> = tile_ids[..config.distraction_count(grid.len())].iter().copied().collect();

    let mut by_tile: BTreeMap<TileId, Vec<QueryId>> = BTreeMap::new();
    for (id, _, tile) in &raw {
        if !distraction.contains(tile) {
            by_tile.entry(*tile).or_default().push(*id);
        }
    }
    let kept = balance_panoramas(&by_tile, config.max_queries_per_tile, config.seed ^ STREAM_BALANCE)?;

    let mut queries = Vec::with_capacity(kept.len());
    let mut ground = Vec::with_capacity(kept.len());
    for id in kept {
        let (_, location, positive) = raw[id.0 as usize];
        let (e, n) = local(location);
        let mut f = field.at(e, n);
        add_noise(&mut f, config.noise, &mut stream(config.seed, STREAM_QUERY_NOISE + u64::from(id.0)))?;
        queries.push(SyntheticQuery { id, location, positive });
        ground.push(f);
    }

    Ok(SyntheticWorld { config: config.clone(), grid, queries, ground, aerial, distraction })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    SameArea,
    CrossArea,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub mode: SplitMode,
    pub train_queries: Vec<QueryId>,
    pub test_queries: Vec<QueryId>,
    pub train_tiles: BTreeSet<TileId>,
    pub test_tiles: BTreeSet<TileId>,
}

/// Same-area: every tile on both sides, queries halved at random.
/// Cross-area: columns with `2 * col < cols` form the western (training)
/// region; each query follows its positive tile.
pub fn make_splits(world: &SyntheticWorld, mode: SplitMode) -> Split {
    let all: BTreeSet<TileId> = world.grid.tiles().iter().map(|t| t.id).collect();
    match mode {
        SplitMode::SameArea => {
            let mut ids: Vec<QueryId> = world.queries.iter().map(|q| q.id).collect();
            ids.shuffle(&mut stream(world.config.seed, STREAM_SPLIT));
            let mut test = ids.split_off(ids.len() / 2);
            let mut train = ids;
            train.sort();
            test.sort();
            Split { mode, train_queries: train, test_queries: test, train_tiles: all.clone(), test_tiles: all }
        }
        SplitMode::CrossArea => {
            let cols = world.grid.cols();
            let (train_tiles, test_tiles): (BTreeSet<TileId>, BTreeSet<TileId>) =
                all.iter().partition(|id| world.grid.get(**id).is_some_and(|t| 2 * t.col < cols));
            let mut train = Vec::new();
            let mut test = Vec::new();
            for q in &world.queries {
                if train_tiles.contains(&q.positive) { train.push(q.id) } else { test.push(q.id) }
            }
            Split {
                mode,
                train_queries: train,
                test_queries: test,
                train_tiles,
                test_tiles,
            }
        }
    }
}

pub const TILES_FILE: &str = "tiles.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const GROUND_FILE: &str = "ground.vgem";
pub const AERIAL_FILE: &str = "aerial.vgem";
pub const CONFIG_FILE: &str = "config.json";

pub fn split_file(mode: SplitMode) -> &'static str {
    match mode {
        SplitMode::SameArea => "split_same_area.json",
        SplitMode::CrossArea => "split_cross_area.json",
    }
}

impl SyntheticWorld {
    pub fn query_index(&self) -> BTreeMap<QueryId, usize> {
        self.queries.iter().enumerate().map(|(i, q)| (q.id, i)).collect()
    }

    pub fn tile_index(&self) -> BTreeMap<TileId, usize> {
        self.grid.tiles().iter().enumerate().map(|(i, t)| (t.id, i)).collect()
    }

    /// Writes manifests, feature blocks, config and both splits into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_jsonl(
            BufWriter::new(File::create(dir.join(TILES_FILE))?),
            self.grid.tiles().iter().map(TileRecord::from),
        )?;
        write_jsonl(
            BufWriter::new(File::create(dir.join(QUERIES_FILE))?),
            self.queries.iter().map(|q| QueryRecord { id: q.id.0, lat: q.location.lat, lon: q.location.lon }),
        )?;
        FloatMatrix::from_rows(&self.ground)?.write_to(BufWriter::new(File::create(dir.join(GROUND_FILE))?))?;
        FloatMatrix::from_rows(&self.aerial)?.write_to(BufWriter::new(File::create(dir.join(AERIAL_FILE))?))?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join(CONFIG_FILE))?), &self.config)?;
        for mode in [SplitMode::SameArea, SplitMode::CrossArea] {
            serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join(split_file(mode)))?), &make_splits(self, mode))?;
        }
        Ok(())
    }

    /// Reads a world written by [`SyntheticWorld::save`] (or any manifests and
    /// feature files in the same layout). Positive tiles are recomputed.
    pub fn load(dir: &Path) -> Result<Self> {
        let config: WorldConfig = serde_json::from_reader(BufReader::new(File::open(dir.join(CONFIG_FILE))?))?;
        let grid = read_tile_manifest(BufReader::new(File::open(dir.join(TILES_FILE))?))?;
        let records: Vec<QueryRecord> = read_jsonl(BufReader::new(File::open(dir.join(QUERIES_FILE))?))?;
        let ground = FloatMatrix::read_from(BufReader::new(File::open(dir.join(GROUND_FILE))?))?;
        let aerial = FloatMatrix::read_from(BufReader::new(File::open(dir.join(AERIAL_FILE))?))?;
        if ground.rows() != records.len() || aerial.rows() != grid.len() {
            return Err(Error::BadFormat(format!(
                "{} ground rows for {} queries, {} aerial rows for {} tiles",
                ground.rows(),
                records.len(),
                aerial.rows(),
                grid.len()
            )));
        }
        let queries = records
            .iter()
            .map(|r| {
                let location = GeoPoint::new(r.lat, r.lon)?;
                let positive = covering_tiles(location, grid.tiles())?.positive.tile.id;
                Ok(SyntheticQuery { id: QueryId(r.id), location, positive })
            })
            .collect::<Result<Vec<_>>>()?;
        let with_queries: BTreeSet<TileId> = queries.iter().map(|q| q.positive).collect();
        let distraction = grid.tiles().iter().map(|t| t.id).filter(|t| !with_queries.contains(t)).collect();
        Ok(Self {
            config,
            ground: (0..ground.rows()).map(|i| ground.row_f64(i)).collect(),
            aerial: (0..aerial.rows()).map(|i| aerial.row_f64(i)).collect(),
            grid,
            queries,
            distraction,
        })
    }
}

pub fn load_split(dir: &Path, mode: SplitMode) -> Result<Split> {
    Ok(serde_json::from_reader(BufReader::new(File::open(dir.join(split_file(mode)))?))?)
}
