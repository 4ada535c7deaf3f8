//! Retrieval metrics, coarse-to-fine localization and meter-level error curves.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::Embedding;
use crate::error::{Error, Result};
use crate::geo::{classify, geodesic_distance_m, offset_point, GeoPoint, MatchClass, Offset2D, QueryId, TileGrid, TileId};
use crate::losses::OffsetLabel;
use crate::model::{class_center, clamp_offset, predict_offset_classification, predict_offset_regression, Model};
use crate::retrieval::{noisy_gps_with, ReferenceDB, Scope, ScopedQuery};

/// Fraction of queries whose true tile is among the first `k` entries of its ranking.
pub fn recall_at_k(rankings: &[Vec<TileId>], truth: &[TileId], k: usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = rankings.iter().zip(truth).filter(|(r, t)| r.iter().take(k).any(|x| x == *t)).count();
    hits as f64 / truth.len() as f64
}

/// Fraction of queries whose top-1 tile covers the query location.
pub fn hit_rate(top1: &[TileId], queries: &[GeoPoint], grid: &TileGrid) -> Result<f64> {
    if top1.len() != queries.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} queries", top1.len(), queries.len())));
    }
    if queries.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (t, q) in top1.iter().zip(queries) {
        let tile = grid.get(*t).ok_or_else(|| Error::InvalidConfig(format!("tile {t} is not in the grid")))?;
        if classify(*q, tile).0 != MatchClass::Negative {
            hits += 1;
        }
    }
    Ok(f64::from(hits) / queries.len() as f64)
}

/// `k` for the top-1% column: one percent of the database, rounded up.
pub fn top_one_percent_k(db_len: usize) -> usize {
    db_len.div_ceil(100).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalizeMode {
    RetrievalOnly,
    Regression,
    Classification,
}

/// Point reached by moving from `center` by a normalized offset.
pub fn denormalize(center: GeoPoint, offset: &OffsetLabel, side_len_m: f64) -> GeoPoint {
    offset_point(center, Offset2D::new(offset.lon_norm * side_len_m, offset.lat_norm * side_len_m))
}

/// Position estimate inside a retrieved tile.
pub fn refine(model: &Model, query: &Embedding, db: &ReferenceDB, index: usize, mode: LocalizeMode) -> Result<GeoPoint> {
    let center = db.center(index);
    let side = db.geometry().side_len_m();
    let need_head = || {
        model
            .head
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig(format!("{mode:?} localization needs an offset head")))
    };
    Ok(match mode {
        LocalizeMode::RetrievalOnly => center,
        LocalizeMode::Regression => {
            let [lat_norm, lon_norm] = clamp_offset(predict_offset_regression(need_head()?, query, db.embedding(index))?);
            denormalize(center, &OffsetLabel { lat_norm, lon_norm }, side)
        }
        LocalizeMode::Classification => {
            let class = predict_offset_classification(need_head()?, query, db.embedding(index))?;
            denormalize(center, &class_center(class), side)
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    pub tile: TileId,
    pub point: GeoPoint,
}

/// Top-1 retrieval followed by offset refinement.
pub fn localize(model: &Model, query: &Embedding, db: &ReferenceDB, mode: LocalizeMode) -> Result<Localization> {
    let top = db.topk(query, 1)?;
    let hit = top.hits[0];
    Ok(Localization { tile: hit.tile, point: refine(model, query, db, hit.index, mode)? })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold_m: f64,
    pub accuracy: f64,
}

/// Fraction of errors at or below each threshold.
pub fn meter_level_curve(errors_m: &[f64], thresholds_m: &[f64]) -> Vec<CurvePoint> {
    thresholds_m
        .iter()
        .map(|&t| CurvePoint {
            threshold_m: t,
            accuracy: if errors_m.is_empty() {
                0.0
            } else {
                errors_m.iter().filter(|&&e| e <= t).count() as f64 / errors_m.len() as f64
            },
        })
        .collect()
}

/// 0, 1, ..., 100 meters.
pub fn default_thresholds() -> Vec<f64> {
    (0..=100).map(f64::from).collect()
}

#[derive(Clone, Debug)]
pub struct EvalQuery {
    pub id: QueryId,
    pub location: GeoPoint,
    pub truth: TileId,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: LocalizeMode,
    /// `None` searches the whole database.
    pub scope_m: Option<f64>,
    /// Half-width of the uniform GPS noise box used to center the scope.
    pub gps_noise_m: f64,
    pub seed: u64,
    pub thresholds_m: Vec<f64>,
    /// Extra cutoff reported as `recall_at_k`.
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    10
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { mode: LocalizeMode::RetrievalOnly, scope_m: None, gps_noise_m: 0.0, seed: 0, thresholds_m: default_thresholds(), k: default_k() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query: QueryId,
    pub truth: TileId,
    /// `None` when the scope held no tiles.
    pub top1: Option<TileId>,
    pub rank_of_truth: Option<usize>,
    pub error_m: Option<f64>,
    pub hit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub options: EvalOptions,
    pub db_size: usize,
    pub n_queries: usize,
    /// Queries left out because their scope was empty.
    pub n_excluded: usize,
    pub k_top1pct: usize,
    /// Recall over queries with a non-empty scope.
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_1pct: f64,
    pub recall_at_k: f64,
    /// Recall over all queries, counting excluded ones as misses.
    pub raw_recall_at_1: f64,
    pub raw_recall_at_5: f64,
    pub raw_recall_at_1pct: f64,
    pub hit_rate: f64,
    pub mean_error_m: f64,
    pub median_error_m: f64,
    /// Mean error over queries whose top-1 tile is the true tile.
    pub mean_error_correct_m: f64,
    pub curve: Vec<CurvePoint>,
    pub outcomes: Vec<QueryOutcome>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Encodes the queries, retrieves within the configured scope, localizes and
/// aggregates every metric. GPS fixes are drawn in query order from one
/// seeded generator, so runs that differ only in scope see the same fixes.
pub fn evaluate(
    model: &Model,
    queries: &[EvalQuery],
    db: &ReferenceDB,
    grid: &TileGrid,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    if options.k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let scope = match options.scope_m {
        None => Scope::All,
        Some(r) => Scope::radius(r)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let k_top1pct = top_one_percent_k(db.len());
    let mut outcomes = Vec::with_capacity(queries.len());
    let (mut r1, mut r5, mut rp, mut rk) = (0usize, 0usize, 0usize, 0usize);
    let mut errors = Vec::new();
    let mut correct_errors = Vec::new();
    let mut hits = 0usize;
    for q in queries {
        let embedding = model.encode_ground(&q.features)?;
        let gps = noisy_gps_with(q.location, options.gps_noise_m, &mut rng)?;
        let sq = ScopedQuery { embedding, gps, scope };
        let ranking = match db.scoped_topk(&sq, db.len()) {
            Ok(r) => r,
            Err(Error::EmptyScope) => {
                outcomes.push(QueryOutcome { query: q.id, truth: q.truth, top1: None, rank_of_truth: None, error_m: None, hit: false });
                continue;
            }
            Err(e) => return Err(e),
        };
        let top = ranking.hits[0];
        let rank = ranking.rank_of(q.truth);
        let within = |k: usize| rank.is_some_and(|r| r <= k);
        r1 += usize::from(within(1));
        r5 += usize::from(within(5));
        rp += usize::from(within(k_top1pct));
        rk += usize::from(within(options.k));
        let point = refine(model, &sq.embedding, db, top.index, options.mode)?;
        let error = geodesic_distance_m(point, q.location);
        errors.push(error);
        if top.tile == q.truth {
            correct_errors.push(error);
        }
        let tile = grid.get(top.tile).ok_or_else(|| Error::InvalidConfig(format!("tile {} is not in the grid", top.tile)))?;
        let hit = classify(q.location, tile).0 != MatchClass::Negative;
        hits += usize::from(hit);
        outcomes.push(QueryOutcome { query: q.id, truth: q.truth, top1: Some(top.tile), rank_of_truth: rank, error_m: Some(error), hit });
    }
    let n = queries.len();
    let n_eval = errors.len();
    let ratio = |c: usize, d: usize| if d == 0 { 0.0 } else { c as f64 / d as f64 };
    Ok(EvalReport {
        options: options.clone(),
        db_size: db.len(),
        n_queries: n,
        n_excluded: n - n_eval,
        k_top1pct,
        recall_at_1: ratio(r1, n_eval),
        recall_at_5: ratio(r5, n_eval),
        recall_at_1pct: ratio(rp, n_eval),
        recall_at_k: ratio(rk, n_eval),
        raw_recall_at_1: ratio(r1, n),
        raw_recall_at_5: ratio(r5, n),
        raw_recall_at_1pct: ratio(rp, n),
        hit_rate: ratio(hits, n_eval),
        mean_error_m: mean(&errors),
        median_error_m: median(&errors),
        mean_error_correct_m: mean(&correct_errors),
        curve: meter_level_curve(&errors, &options.thresholds_m),
        outcomes,
    })
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// One row per query: id, error in meters, rank of the true tile, hit flag.
    /// Excluded queries leave the error and rank empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "query_id,error_m,rank_of_truth,hit")?;
        for o in &self.outcomes {
            let err = o.error_m.map(|e| format!("{e:.6}")).unwrap_or_default();
            let rank = o.rank_of_truth.map(|r| r.to_string()).unwrap_or_default();
            writeln!(w, "{},{err},{rank},{}", o.query, u8::from(o.hit))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn table_header() -> String {
        format!("{:<28} {:>7} {:>7} {:>7} {:>8} {:>9}", "run", "top-1", "top-5", "top-1%", "hit rate", "mean err")
    }

    /// Percentages in the column order of [`EvalReport::table_header`].
    pub fn table_row(&self, label: &str) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{:<28} {:>7.2} {:>7.2} {:>7.2} {:>8.2} {:>8.2}m",
            label,
            100.0 * self.recall_at_1,
            100.0 * self.recall_at_5,
            100.0 * self.recall_at_1pct,
            100.0 * self.hit_rate,
            self.mean_error_m
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::l2_normalize;
    use crate::geo::{build_grid, local_meters, TileGeometry};
    use crate::model::{EncoderInit, Mlp, ModelConfig, OffsetHead, OffsetMode, CENTRAL_HALF_WIDTH};

    #[test]
    fn recall_counting() {
        let truth: Vec<TileId> = (0..10).map(TileId).collect();
        let all: Vec<Vec<TileId>> = truth.iter().map(|t| vec![*t]).collect();
        assert_eq!(recall_at_k(&all, &truth, 1), 1.0);
        let none: Vec<Vec<TileId>> = truth.iter().map(|t| vec![TileId(t.0 + 100)]).collect();
        assert_eq!(recall_at_k(&none, &truth, 1), 0.0);
        let three: Vec<Vec<TileId>> =
            truth.iter().map(|t| if t.0 < 3 { vec![*t] } else { vec![TileId(99), *t] }).collect();
        assert_eq!(recall_at_k(&three, &truth, 1), 0.3);
        assert_eq!(recall_at_k(&three, &truth, 2), 1.0);
    }

    #[test]
    fn hit_rate_cases() {
        let sw = GeoPoint::new(40.7, -74.0).unwrap();
        let l = TileGeometry::default().side_len_m();
        let ne = offset_point(sw, Offset2D::new(4.0 * l, 4.0 * l));
        let grid = build_grid(sw, ne, TileGeometry::default()).unwrap();
        let center = grid.tiles()[24].center;
        let q = offset_point(center, Offset2D::new(10.0, 5.0));
        let positive = grid.tiles()[24].id;
        let semi = grid.tiles()[25].id;
        let far = grid.tiles()[26].id;
        assert_eq!(hit_rate(&[positive], &[q], &grid).unwrap(), 1.0);
        assert_eq!(hit_rate(&[semi], &[q], &grid).unwrap(), 1.0);
        assert_eq!(hit_rate(&[far], &[q], &grid).unwrap(), 0.0);
    }

    #[test]
    fn curve_counting() {
        let c = meter_level_curve(&[5.0, 15.0, 25.0], &[0.0, 10.0, f64::INFINITY]);
        assert_eq!(c[0].accuracy, 0.0);
        assert!((c[1].accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c[2].accuracy, 1.0);
        assert_eq!(default_thresholds().len(), 101);
    }

    #[test]
    fn top_one_percent() {
        assert_eq!(top_one_percent_k(49), 1);
        assert_eq!(top_one_percent_k(100), 1);
        assert_eq!(top_one_percent_k(101), 2);
        assert_eq!(top_one_percent_k(22_000), 220);
    }

    fn model_with_head_bias(lat: f64, lon: f64, mode: OffsetMode) -> Model {
        let mut m = Model::new(
            ModelConfig { input_dim: 2, hidden_dim: 3, embed_dim: 2, head_hidden_dim: 3, offset_mode: mode, init: EncoderInit::Glorot },
            1,
        )
        .unwrap();
        m.ground = Mlp::identity(2);
        m.aerial = Mlp::identity(2);
        let head: &mut OffsetHead = m.head.as_mut().unwrap();
        let last = head.mlp.layers_mut().last_mut().unwrap();
        last.weights_mut().fill(0.0);
        let bias = last.bias_mut();
        bias.fill(0.0);
        if mode == OffsetMode::Regression {
            bias[0] = lat;
            bias[1] = lon;
        } else {
            bias[37] = 1.0;
        }
        m
    }

    fn single_db() -> ReferenceDB {
        let c = GeoPoint::new(40.7, -74.0).unwrap();
        ReferenceDB::new(vec![TileId(0)], vec![c], vec![l2_normalize(&[1.0, 0.0]).unwrap()], TileGeometry::default())
            .unwrap()
    }

    #[test]
    fn localize_modes() {
        let db = single_db();
        let c = db.center(0);
        let q = l2_normalize(&[1.0, 0.2]).unwrap();
        let l = db.geometry().side_len_m();

        let zero = model_with_head_bias(0.0, 0.0, OffsetMode::Regression);
        assert_eq!(localize(&zero, &q, &db, LocalizeMode::Regression).unwrap().point, c);
        assert_eq!(localize(&zero, &q, &db, LocalizeMode::RetrievalOnly).unwrap().point, c);

        let m = model_with_head_bias(-0.1, 0.1, OffsetMode::Regression);
        let p = localize(&m, &q, &db, LocalizeMode::Regression).unwrap().point;
        let d = local_meters(c, p, c);
        assert!((d.dx_m - 7.296).abs() < 1e-6 && (d.dy_m + 7.296).abs() < 1e-6, "{d:?}");
        assert!((d.dx_m - 0.1 * l).abs() < 1e-9);

        let far = model_with_head_bias(0.9, -0.9, OffsetMode::Regression);
        let p = localize(&far, &q, &db, LocalizeMode::Regression).unwrap().point;
        let d = local_meters(c, p, c);
        assert!((d.dy_m - CENTRAL_HALF_WIDTH * l).abs() < 1e-6 && (d.dx_m + CENTRAL_HALF_WIDTH * l).abs() < 1e-6);
        assert!(localize(&far, &q, &db, LocalizeMode::Classification).is_err());

        let cls = model_with_head_bias(0.0, 0.0, OffsetMode::Classification);
        let p = localize(&cls, &q, &db, LocalizeMode::Classification).unwrap().point;
        let d = local_meters(c, p, c);
        let want = class_center(37);
        assert!((d.dy_m - want.lat_norm * l).abs() < 1e-6 && (d.dx_m - want.lon_norm * l).abs() < 1e-6);
    }

    #[test]
    fn report_files() {
        let db = single_db();
        let m = model_with_head_bias(0.0, 0.0, OffsetMode::Regression);
        let sw = offset_point(db.center(0), Offset2D::new(-0.5 * db.geometry().side_len_m(), -0.5 * db.geometry().side_len_m()));
        let ne = offset_point(sw, Offset2D::new(db.geometry().side_len_m(), db.geometry().side_len_m()));
        let grid = build_grid(sw, ne, TileGeometry::default()).unwrap();
        let q = EvalQuery { id: QueryId(4), location: db.center(0), truth: TileId(0), features: vec![1.0, 0.1] };
        let far = EvalQuery { id: QueryId(5), location: GeoPoint::new(10.0, 10.0).unwrap(), truth: TileId(0), features: vec![1.0, 0.1] };
        let opts = EvalOptions { scope_m: Some(200.0), ..Default::default() };
        let r = evaluate(&m, &[q, far], &db, &grid, &opts).unwrap();
        assert_eq!(r.n_excluded, 1);
        assert_eq!(r.recall_at_1, 1.0);
        assert_eq!(r.raw_recall_at_1, 0.5);
        assert!(r.hit_rate >= r.recall_at_1);
        let dir = tempfile::tempdir().unwrap();
        r.write_json(&dir.path().join("r.json")).unwrap();
        r.write_csv(&dir.path().join("r.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("4,"));
        assert_eq!(csv.lines().nth(2).unwrap(), "5,,,0");
        assert!(r.table_row("x").contains("100.00"));
    }
}
