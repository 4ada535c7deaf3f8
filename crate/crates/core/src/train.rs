//! Two-phase training loop: triplet-only warmup, then the full objective of
//! the chosen loss mode, with half of every batch mined from a FIFO pool.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PairDataset;
use crate::embed::Embedding;
use crate::error::{Error, Result};
use crate::eval::EvalQuery;
use crate::geo::{AerialTile, QueryId, TileId};
use crate::losses::LossConfig;
use crate::mining::{build_batch, MiningPool, SlotOrigin, DEFAULT_POOL_CAPACITY};
use crate::model::{AdamState, Model, ModelConfig, OffsetMode, StepInputs};
use crate::retrieval::ReferenceDB;
use crate::synth::{Split, SyntheticWorld};

/// Objective used after warmup.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Triplet term only, throughout.
    Triplet,
    /// Semi-positive tiles join the triplet term as extra positives.
    Positive,
    /// Triplet plus IOU ratio term.
    Hybrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl TrainSchedule {
    /// Warmup lengths for full-size same-area and cross-area training.
    pub const SAME_AREA_WARMUP: usize = 30;
    pub const CROSS_AREA_WARMUP: usize = 10;

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::InvalidConfig(format!(
                "warmup ({}) must be shorter than training ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss_mode: LossMode,
    pub loss: LossConfig,
    pub schedule: TrainSchedule,
    pub batch_size: usize,
    /// 1e-5 suits deep backbones; the small perceptron here trains at 3e-4.
    pub learning_rate: f64,
    pub pool_capacity: usize,
    pub seed: u64,
    /// Where to write the model if training diverges.
    pub divergence_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss_mode: LossMode::Hybrid,
            loss: LossConfig::default(),
            schedule: TrainSchedule { warmup_epochs: TrainSchedule::SAME_AREA_WARMUP, total_epochs: 800 },
            batch_size: 16,
            learning_rate: 3e-4,
            pool_capacity: DEFAULT_POOL_CAPACITY,
            seed: 0,
            divergence_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate()?;
        if self.loss_mode == LossMode::Triplet && self.model.offset_mode != OffsetMode::None {
            return Err(Error::InvalidConfig("triplet mode trains no offset head; use offset mode none".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Labelled pairs plus raw features of every tile they can touch.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub pairs: PairDataset,
    /// Raw ground features, aligned with `pairs`.
    pub ground: Vec<Vec<f64>>,
    pub tiles: Vec<AerialTile>,
    pub aerial: BTreeMap<TileId, Vec<f64>>,
    /// Held-out queries and tiles whose recall is logged every epoch.
    pub validation: Option<EvalSet>,
}

#[derive(Clone, Debug)]
pub struct EvalSet {
    pub queries: Vec<EvalQuery>,
    pub tiles: Vec<AerialTile>,
    pub aerial: Vec<Vec<f64>>,
}

impl EvalSet {
    pub fn from_world(world: &SyntheticWorld, queries: &[QueryId], tiles: &BTreeSet<TileId>) -> Result<Self> {
        let qi = world.query_index();
        let queries = queries
            .iter()
            .map(|id| {
                let i = *qi.get(id).ok_or_else(|| Error::InvalidConfig(format!("unknown query {id}")))?;
                let q = &world.queries[i];
                Ok(EvalQuery { id: q.id, location: q.location, truth: q.positive, features: world.ground[i].clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        let (tiles, aerial) = world
            .grid
            .tiles()
            .iter()
            .zip(&world.aerial)
            .filter(|(t, _)| tiles.contains(&t.id))
            .map(|(t, f)| (*t, f.clone()))
            .unzip();
        Ok(Self { queries, tiles, aerial })
    }

    pub fn test_split(world: &SyntheticWorld, split: &Split) -> Result<Self> {
        Self::from_world(world, &split.test_queries, &split.test_tiles)
    }

    /// Reference database of the tiles under `model`.
    pub fn database(&self, model: &Model) -> Result<ReferenceDB> {
        let embeddings = self.aerial.iter().map(|f| model.encode_aerial(f)).collect::<Result<Vec<_>>>()?;
        ReferenceDB::from_tiles(&self.tiles, embeddings)
    }

    pub fn recall_at_1(&self, model: &Model) -> Result<f64> {
        if self.queries.is_empty() {
            return Ok(0.0);
        }
        let db = self.database(model)?;
        let mut hits = 0;
        for q in &self.queries {
            let top = db.topk(&model.encode_ground(&q.features)?, 1)?;
            hits += usize::from(top.hits[0].tile == q.truth);
        }
        Ok(hits as f64 / self.queries.len() as f64)
    }
}

impl TrainData {
    /// Training half of `split`; semi-positive labels are limited to training tiles.
    pub fn from_world(world: &SyntheticWorld, split: &Split) -> Result<Self> {
        let qi = world.query_index();
        let mut located = Vec::with_capacity(split.train_queries.len());
        let mut ground = Vec::with_capacity(split.train_queries.len());
        for id in &split.train_queries {
            let i = *qi.get(id).ok_or_else(|| Error::InvalidConfig(format!("unknown query {id}")))?;
            located.push((*id, world.queries[i].location));
            ground.push(world.ground[i].clone());
        }
        let pairs = PairDataset::from_queries(&world.grid, &located, Some(&split.train_tiles))?;
        let (tiles, aerial): (Vec<AerialTile>, BTreeMap<TileId, Vec<f64>>) = {
            let mut tiles = Vec::new();
            let mut aerial = BTreeMap::new();
            for (t, f) in world.grid.tiles().iter().zip(&world.aerial) {
                if split.train_tiles.contains(&t.id) {
                    tiles.push(*t);
                    aerial.insert(t.id, f.clone());
                }
            }
            (tiles, aerial)
        };
        Ok(Self { pairs, ground, tiles, aerial, validation: None })
    }

    fn aerial_of(&self, tile: TileId) -> Result<&Vec<f64>> {
        self.aerial.get(&tile).ok_or_else(|| Error::InvalidConfig(format!("no aerial features for tile {tile}")))
    }

    /// Recall@1 of the training queries against the training tiles.
    pub fn recall_at_1(&self, model: &Model) -> Result<f64> {
        let set = EvalSet {
            queries: self
                .pairs
                .pairs()
                .iter()
                .zip(&self.ground)
                .map(|(p, g)| EvalQuery { id: p.query, location: p.location, truth: p.tile, features: g.clone() })
                .collect(),
            tiles: self.tiles.clone(),
            aerial: self.tiles.iter().map(|t| self.aerial_of(t.id).cloned()).collect::<Result<_>>()?,
        };
        set.recall_at_1(model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Warmup,
    Full,
}

/// Per-epoch means over steps. Term values are unweighted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub triplet: f64,
    pub iou: f64,
    pub offset: f64,
    pub steps: usize,
    pub triplets: usize,
    pub iou_terms: usize,
    pub iou_skipped: usize,
    pub offset_terms: usize,
    pub mined_slots: usize,
    pub fallback_slots: usize,
    pub train_recall_at_1: f64,
    pub val_recall_at_1: Option<f64>,
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in log {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub pool: MiningPool,
    pub optimizer: AdamState,
}

fn step_inputs(data: &TrainData, batch: &[usize], cfg: &TrainConfig, phase: Phase, with_head: bool) -> Result<StepInputs> {
    let pairs: Vec<_> = batch.iter().map(|&i| data.pairs.get(i)).collect::<Result<_>>()?;
    let mut inputs = StepInputs {
        ground: batch.iter().map(|&i| data.ground[i].clone()).collect(),
        aerial: pairs.iter().map(|p| data.aerial_of(p.tile).cloned()).collect::<Result<_>>()?,
        ..Default::default()
    };
    for (qi, p) in pairs.iter().enumerate() {
        for (ti, t) in pairs.iter().enumerate() {
            if qi != ti && p.covering.contains(&t.tile) {
                inputs.covers.insert((qi, ti));
            }
        }
    }
    if phase == Phase::Full && cfg.loss_mode != LossMode::Triplet {
        for (qi, p) in pairs.iter().enumerate() {
            for s in &p.semis {
                inputs.semi.push((qi, data.aerial_of(s.tile)?.clone(), s.label));
            }
        }
        inputs.semi_as_positive = cfg.loss_mode == LossMode::Positive;
        if with_head {
            inputs.offsets = pairs.iter().enumerate().map(|(i, p)| (i, p.offset)).collect();
        }
    }
    Ok(inputs)
}

struct Loop<'a> {
    data: &'a TrainData,
    cfg: &'a TrainConfig,
    model: Model,
    optimizer: AdamState,
    pool: MiningPool,
    rng: ChaCha8Rng,
    steps_per_epoch: usize,
}

impl Loop<'_> {
    fn step(&mut self, phase: Phase, entry: &mut EpochLog) -> Result<()> {
        let batch_seed: u64 = self.rng.random();
        let (model, data) = (&self.model, self.data);
        let batch = build_batch(&data.pairs, &self.pool, self.cfg.batch_size, batch_seed, |i| {
            model.encode_ground(&data.ground[i])
        })?;
        entry.mined_slots += batch.origin.iter().filter(|o| **o == SlotOrigin::Mined).count();
        entry.fallback_slots += batch.origin.iter().filter(|o| **o == SlotOrigin::Fallback).count();

        let inputs = step_inputs(data, &batch.pairs, self.cfg, phase, model.head.is_some())?;
        let (out, grad) = model.step_gradient(&inputs, &self.cfg.loss)?;
        if !out.total.is_finite() {
            return Err(Error::NonFiniteGradient { index: 0 });
        }
        let mut params = model.params();
        self.optimizer.step(&mut params, &grad)?;
        self.model.set_params(&params)?;

        entry.loss += out.total;
        entry.triplet += out.triplet;
        entry.iou += out.iou;
        entry.offset += out.offset;
        entry.triplets += out.n_triplets;
        entry.iou_terms += out.n_iou_terms;
        entry.iou_skipped += out.n_iou_skipped;
        entry.offset_terms += out.grad_offset.len();

        for &i in &batch.pairs {
            let tile = data.pairs.get(i)?.tile;
            let e: Embedding = self.model.encode_aerial(data.aerial_of(tile)?)?;
            self.pool.push(tile, e);
        }
        Ok(())
    }

    fn epoch(&mut self, epoch: usize, step: &mut usize) -> Result<EpochLog> {
        let phase = if epoch <= self.cfg.schedule.warmup_epochs { Phase::Warmup } else { Phase::Full };
        let mut entry = EpochLog {
            epoch,
            phase,
            loss: 0.0,
            triplet: 0.0,
            iou: 0.0,
            offset: 0.0,
            steps: self.steps_per_epoch,
            triplets: 0,
            iou_terms: 0,
            iou_skipped: 0,
            offset_terms: 0,
            mined_slots: 0,
            fallback_slots: 0,
            train_recall_at_1: 0.0,
            val_recall_at_1: None,
        };
        for s in 0..self.steps_per_epoch {
            *step = s;
            self.step(phase, &mut entry)?;
        }
        let n = self.steps_per_epoch as f64;
        entry.loss /= n;
        entry.triplet /= n;
        entry.iou /= n;
        entry.offset /= n;
        entry.train_recall_at_1 = self.data.recall_at_1(&self.model)?;
        entry.val_recall_at_1 = self.data.validation.as_ref().map(|v| v.recall_at_1(&self.model)).transpose()?;
        Ok(entry)
    }
}

/// Trains a freshly initialized model. Deterministic for a fixed configuration.
/// A non-finite loss or gradient, or an embedding that collapses to zero,
/// stops training with [`Error::Diverged`] after writing the current model to
/// `divergence_checkpoint` when one is set.
pub fn train(data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::new(cfg.model, cfg.seed)?;
    let mut run = Loop {
        data,
        cfg,
        optimizer: AdamState::new(model.num_params(), cfg.learning_rate),
        model,
        pool: MiningPool::new(cfg.pool_capacity)?,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c),
        steps_per_epoch: data.pairs.len().div_ceil(cfg.batch_size).max(1),
    };
    let mut log = Vec::with_capacity(cfg.schedule.total_epochs);
    for epoch in 1..=cfg.schedule.total_epochs {
        let mut step = 0;
        match run.epoch(epoch, &mut step) {
            Ok(entry) => log.push(entry),
            Err(Error::NonFiniteGradient { .. } | Error::DegenerateVector) => {
                if let Some(path) = &cfg.divergence_checkpoint {
                    let at = serde_json::json!({ "diverged_at": { "epoch": epoch, "step": step } });
                    run.model.save(path, run.optimizer.step_count(), at)?;
                }
                return Err(Error::Diverged { epoch, step });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome { model: run.model, log, pool: run.pool, optimizer: run.optimizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, make_splits, SplitMode, WorldConfig};

    fn small(mode: LossMode, offset: OffsetMode) -> (TrainData, TrainConfig) {
        let world = generate(&WorldConfig::default()).unwrap();
        let split = make_splits(&world, SplitMode::SameArea);
        let mut data = TrainData::from_world(&world, &split).unwrap();
        data.validation = Some(EvalSet::test_split(&world, &split).unwrap());
        let cfg = TrainConfig {
            model: ModelConfig { offset_mode: offset, ..Default::default() },
            loss_mode: mode,
            schedule: TrainSchedule { warmup_epochs: 2, total_epochs: 4 },
            ..Default::default()
        };
        (data, cfg)
    }

    #[test]
    fn schedule_switches_terms() {
        let (data, cfg) = small(LossMode::Hybrid, OffsetMode::Regression);
        let out = train(&data, &cfg).unwrap();
        assert_eq!(out.log.len(), 4);
        for e in &out.log[..2] {
            assert_eq!(e.phase, Phase::Warmup);
            assert_eq!((e.iou, e.offset, e.iou_terms, e.offset_terms), (0.0, 0.0, 0, 0));
        }
        for e in &out.log[2..] {
            assert_eq!(e.phase, Phase::Full);
            assert!(e.iou_terms > 0 && e.offset_terms > 0 && e.offset > 0.0);
        }
        assert!(out.log.iter().all(|e| e.val_recall_at_1.is_some()));
        assert!(out.log[1].mined_slots > 0);
    }

    #[test]
    fn triplet_mode_logs_only_triplet_terms() {
        let (data, cfg) = small(LossMode::Triplet, OffsetMode::None);
        let out = train(&data, &cfg).unwrap();
        assert!(out.log.iter().all(|e| e.iou_terms == 0 && e.offset_terms == 0 && e.loss == e.triplet));
        let (data, bad) = small(LossMode::Triplet, OffsetMode::Regression);
        assert!(train(&data, &bad).is_err());
    }

    #[test]
    fn positive_mode_has_no_iou_terms() {
        let (data, cfg) = small(LossMode::Positive, OffsetMode::None);
        let out = train(&data, &cfg).unwrap();
        let full = &out.log[3];
        assert_eq!(full.iou_terms, 0);
        assert!(full.triplets > out.log[0].triplets);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (data, cfg) = small(LossMode::Hybrid, OffsetMode::Classification);
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn schedule_validation() {
        let (data, mut cfg) = small(LossMode::Hybrid, OffsetMode::Regression);
        cfg.schedule = TrainSchedule { warmup_epochs: 4, total_epochs: 4 };
        assert!(train(&data, &cfg).is_err());
    }

    #[test]
    fn divergence_writes_checkpoint() {
        let (data, mut cfg) = small(LossMode::Triplet, OffsetMode::None);
        let dir = tempfile::tempdir().unwrap();
        cfg.divergence_checkpoint = Some(dir.path().join("diverged"));
        cfg.learning_rate = 1e300;
        cfg.schedule = TrainSchedule { warmup_epochs: 0, total_epochs: 50 };
        match train(&data, &cfg) {
            Err(Error::Diverged { .. }) => assert!(dir.path().join("diverged.json").exists()),
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("training with a huge step size should diverge"),
        }
    }
}
