use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use geoloc::eval::{evaluate, EvalOptions, EvalReport, LocalizeMode};
use geoloc::geo::{
    build_grid, classify, iou_vs_aligned, write_jsonl, AerialTile, GeoPoint, Offset2D, TileGeometry, TileId, TileRecord,
};
use geoloc::model::{Model, OffsetMode};
use geoloc::synth::{generate, load_split, make_splits, SplitMode, SyntheticWorld, WorldConfig};
use geoloc::train::{train, write_log, EvalSet, LossMode, TrainConfig, TrainData, TrainSchedule};
use geoloc::{Error, Result};

const RESOLVED_CONFIG: &str = "resolved_config.json";
const CHECKPOINT_STEM: &str = "model";

#[derive(Parser)]
#[command(name = "geoloc", version, about = "Cross-view geo-localization on overlapping aerial tiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and its splits.
    Gen(GenArgs),
    /// Train a model on a generated world.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Tile geometry utilities.
    #[command(subcommand)]
    Grid(GridCommand),
    /// Run the ablation matrix on a fresh synthetic world.
    Bench(BenchArgs),
}

#[derive(Args, Serialize)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Area extent east, meters (default: four tile sides).
    #[arg(long)]
    span_east_m: Option<f64>,
    /// Area extent north, meters (default: four tile sides).
    #[arg(long)]
    span_north_m: Option<f64>,
    #[arg(long)]
    length_scale_m: Option<f64>,
    #[arg(long)]
    scale_ratio: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    raw_queries: Option<usize>,
    /// Balancing cap on queries per positive tile.
    #[arg(long)]
    max_per_tile: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SplitArg {
    SameArea,
    CrossArea,
}

impl From<SplitArg> for SplitMode {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::SameArea => SplitMode::SameArea,
            SplitArg::CrossArea => SplitMode::CrossArea,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum LossArg {
    Triplet,
    Positive,
    Hybrid,
    /// Hybrid loss with the classification offset head.
    HybridClassification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum OffsetArg {
    None,
    Regression,
    Classification,
}

impl From<OffsetArg> for OffsetMode {
    fn from(o: OffsetArg) -> Self {
        match o {
            OffsetArg::None => OffsetMode::None,
            OffsetArg::Regression => OffsetMode::Regression,
            OffsetArg::Classification => OffsetMode::Classification,
        }
    }
}

impl From<OffsetArg> for LocalizeMode {
    fn from(o: OffsetArg) -> Self {
        match o {
            OffsetArg::None => LocalizeMode::RetrievalOnly,
            OffsetArg::Regression => LocalizeMode::Regression,
            OffsetArg::Classification => LocalizeMode::Classification,
        }
    }
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Directory written by `gen`.
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::SameArea)]
    split: SplitArg,
    #[arg(long, value_enum, default_value_t = LossArg::Hybrid)]
    loss: LossArg,
    /// Offset head (default: none for triplet, classification for
    /// hybrid-classification, regression otherwise).
    #[arg(long, value_enum)]
    offset: Option<OffsetArg>,
    /// Triplet-only epochs before the switch (default depends on the split).
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    world: PathBuf,
    /// Checkpoint stem (`<stem>.json` + `<stem>.vgem`) or a `train` output directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::SameArea)]
    split: SplitArg,
    /// Localization refinement (default: the checkpoint's head).
    #[arg(long, value_enum)]
    offset: Option<OffsetArg>,
    /// Search radius around the GPS fix in meters, or `all`.
    #[arg(long, default_value = "all", value_parser = parse_scope)]
    scope_m: Scope,
    /// Half-width of the uniform GPS noise box, meters.
    #[arg(long, default_value_t = 0.0)]
    noise_m: f64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, Serialize)]
#[serde(untagged)]
enum Scope {
    All(&'static str),
    Radius(f64),
}

impl Scope {
    fn radius(self) -> Option<f64> {
        match self {
            Scope::All(_) => None,
            Scope::Radius(r) => Some(r),
        }
    }
}

fn parse_scope(s: &str) -> std::result::Result<Scope, String> {
    if s.eq_ignore_ascii_case("all") || s == "inf" {
        return Ok(Scope::All("all"));
    }
    match s.parse::<f64>() {
        Ok(r) if r.is_finite() && r > 0.0 => Ok(Scope::Radius(r)),
        _ => Err(format!("expected `all` or a positive radius in meters, got `{s}`")),
    }
}

#[derive(Subcommand)]
enum GridCommand {
    /// Write the tile manifest covering an area as JSON lines.
    Build {
        /// South-west corner as `lat,lon`.
        #[arg(long, value_parser = parse_point)]
        sw: GeoPoint,
        /// North-east corner as `lat,lon`.
        #[arg(long, value_parser = parse_point)]
        ne: GeoPoint,
        #[arg(long)]
        side_m: Option<f64>,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Match class and offset of a query against one tile.
    Classify {
        #[arg(long, value_parser = parse_point)]
        query: GeoPoint,
        #[arg(long, value_parser = parse_point)]
        tile_center: GeoPoint,
        #[arg(long)]
        side_m: Option<f64>,
    },
    /// IOU between an aligned tile and one displaced by (dx, dy) meters.
    Iou {
        #[arg(long, allow_hyphen_values = true)]
        dx_m: f64,
        #[arg(long, allow_hyphen_values = true)]
        dy_m: f64,
        #[arg(long)]
        side_m: Option<f64>,
    },
}

fn parse_point(s: &str) -> std::result::Result<GeoPoint, String> {
    let (lat, lon) = s.split_once(',').ok_or_else(|| format!("expected `lat,lon`, got `{s}`"))?;
    let lat: f64 = lat.trim().parse().map_err(|e| format!("bad latitude: {e}"))?;
    let lon: f64 = lon.trim().parse().map_err(|e| format!("bad longitude: {e}"))?;
    GeoPoint::new(lat, lon).map_err(|e| e.to_string())
}

#[derive(Args, Serialize)]
struct BenchArgs {
    #[arg(long)]
    out: PathBuf,
    /// Seeds for the loss ablation.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long)]
    epochs: Option<usize>,
}

fn geometry(side_m: Option<f64>) -> Result<TileGeometry> {
    side_m.map_or(Ok(TileGeometry::default()), TileGeometry::from_side_len)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_resolved(dir: &Path, subcommand: &str, args: &impl Serialize, resolved: serde_json::Value) -> Result<()> {
    write_json(
        &dir.join(RESOLVED_CONFIG),
        &json!({ "subcommand": subcommand, "version": env!("CARGO_PKG_VERSION"), "args": args, "resolved": resolved }),
    )
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let mut config = WorldConfig { seed: args.seed, ..Default::default() };
    if let Some(v) = args.span_east_m {
        config.span_east_m = v;
    }
    if let Some(v) = args.span_north_m {
        config.span_north_m = v;
    }
    if let Some(v) = args.length_scale_m {
        config.length_scale_m = v;
    }
    if let Some(v) = args.scale_ratio {
        config.scale_ratio = v;
    }
    if let Some(v) = args.noise {
        config.noise = v;
    }
    if let Some(v) = args.raw_queries {
        config.raw_queries = v;
    }
    if let Some(v) = args.max_per_tile {
        config.max_queries_per_tile = v;
    }
    if let Some(v) = args.feature_dim {
        config.feature_dim = v;
    }
    let world = generate(&config)?;
    world.save(&args.out)?;
    write_resolved(&args.out, "gen", args, json!({ "world": config }))?;
    println!(
        "wrote {} tiles, {} queries ({} distraction tiles) to {}",
        world.grid.len(),
        world.queries.len(),
        world.distraction.len(),
        args.out.display()
    );
    Ok(())
}

fn resolve_train(args: &TrainArgs) -> TrainConfig {
    let (loss_mode, default_offset) = match args.loss {
        LossArg::Triplet => (LossMode::Triplet, OffsetMode::None),
        LossArg::Positive => (LossMode::Positive, OffsetMode::Regression),
        LossArg::Hybrid => (LossMode::Hybrid, OffsetMode::Regression),
        LossArg::HybridClassification => (LossMode::Hybrid, OffsetMode::Classification),
    };
    let mut cfg = TrainConfig { loss_mode, seed: args.seed, ..Default::default() };
    cfg.model.offset_mode = args.offset.map_or(default_offset, OffsetMode::from);
    cfg.schedule.warmup_epochs = args.warmup.unwrap_or(match args.split {
        SplitArg::SameArea => TrainSchedule::SAME_AREA_WARMUP,
        SplitArg::CrossArea => TrainSchedule::CROSS_AREA_WARMUP,
    });
    if let Some(e) = args.epochs {
        cfg.schedule.total_epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    cfg.divergence_checkpoint = Some(args.out.join("diverged"));
    cfg
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let world = SyntheticWorld::load(&args.world)?;
    let split = load_split(&args.world, args.split.into())?;
    let mut cfg = resolve_train(args);
    cfg.model.input_dim = world.config.feature_dim;
    cfg.validate()?;
    fs::create_dir_all(&args.out)?;
    write_resolved(&args.out, "train", args, json!({ "train": cfg }))?;
    let mut data = TrainData::from_world(&world, &split)?;
    data.validation = Some(EvalSet::test_split(&world, &split)?);
    let started = Instant::now();
    let outcome = train(&data, &cfg)?;
    write_log(&args.out.join("train_log.jsonl"), &outcome.log)?;
    let last = outcome.log.last().ok_or_else(|| Error::InvalidConfig("training ran no epochs".into()))?;
    outcome.model.save(
        &args.out.join(CHECKPOINT_STEM),
        outcome.optimizer.step_count(),
        json!({ "loss_mode": cfg.loss_mode, "split": args.split, "epochs": last.epoch, "final_loss": last.loss }),
    )?;
    println!(
        "trained {} epochs in {:.1}s: loss {:.6}, train recall@1 {:.3}, val recall@1 {:.3}",
        last.epoch,
        started.elapsed().as_secs_f64(),
        last.loss,
        last.train_recall_at_1,
        last.val_recall_at_1.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn checkpoint_stem(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_STEM)
    } else {
        path.with_extension("")
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let world = SyntheticWorld::load(&args.world)?;
    let split = load_split(&args.world, args.split.into())?;
    let (model, header) = Model::load(&checkpoint_stem(&args.checkpoint))?;
    let mode = match args.offset {
        Some(o) => o.into(),
        None => match model.config.offset_mode {
            OffsetMode::None => LocalizeMode::RetrievalOnly,
            OffsetMode::Regression => LocalizeMode::Regression,
            OffsetMode::Classification => LocalizeMode::Classification,
        },
    };
    let options = EvalOptions {
        mode,
        scope_m: args.scope_m.radius(),
        gps_noise_m: args.noise_m,
        seed: args.seed,
        k: args.k,
        ..Default::default()
    };
    fs::create_dir_all(&args.out)?;
    write_resolved(&args.out, "eval", args, json!({ "eval": options, "checkpoint_step": header.step }))?;
    let test = EvalSet::test_split(&world, &split)?;
    let db = test.database(&model)?;
    let report = evaluate(&model, &test.queries, &db, &world.grid, &options)?;
    report.write_json(&args.out.join("report.json"))?;
    report.write_csv(&args.out.join("outcomes.csv"))?;
    let label = format!("{:?} / scope {}", mode, args.scope_m.radius().map_or("all".into(), |r| format!("{r} m")));
    let summary = format!(
        "{}\n{}\nrecall@{} {:.2}%  median error {:.2} m  excluded {}\n",
        EvalReport::table_header(),
        report.table_row(&label),
        options.k,
        100.0 * report.recall_at_k,
        report.median_error_m,
        report.n_excluded
    );
    fs::write(args.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_grid(cmd: &GridCommand) -> Result<()> {
    match cmd {
        GridCommand::Build { sw, ne, side_m, out } => {
            let grid = build_grid(*sw, *ne, geometry(*side_m)?)?;
            let records = grid.tiles().iter().map(TileRecord::from);
            match out {
                Some(p) => write_jsonl(BufWriter::new(File::create(p)?), records)?,
                None => write_jsonl(io::stdout().lock(), records)?,
            }
        }
        GridCommand::Classify { query, tile_center, side_m } => {
            let tile = AerialTile {
                id: TileId(0),
                center: *tile_center,
                geom: geometry(*side_m)?,
                row: 0,
                col: 0,
            };
            let (class, offset) = classify(*query, &tile);
            let iou = iou_vs_aligned(offset, &tile.geom);
            println!("{}", json!({ "class": class, "dx_m": offset.dx_m, "dy_m": offset.dy_m, "iou": iou }));
        }
        GridCommand::Iou { dx_m, dy_m, side_m } => {
            println!("{}", iou_vs_aligned(Offset2D::new(*dx_m, *dy_m), &geometry(*side_m)?));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct LossRow {
    loss: LossMode,
    offset: OffsetMode,
    recall_at_1: Vec<f64>,
    mean_recall_at_1: f64,
}

fn bench_train(world: &SyntheticWorld, split_mode: SplitMode, cfg: &TrainConfig) -> Result<(Model, EvalSet)> {
    let split = make_splits(world, split_mode);
    let data = TrainData::from_world(world, &split)?;
    let model = train(&data, cfg)?.model;
    Ok((model, EvalSet::test_split(world, &split)?))
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let mut base = TrainConfig::default();
    if let Some(e) = args.epochs {
        base.schedule.total_epochs = e;
    }
    write_resolved(&args.out, "bench", args, json!({ "world": WorldConfig::default(), "train": base }))?;
    let started = Instant::now();
    let mut table = vec![EvalReport::table_header()];

    let variants = [
        (LossMode::Triplet, OffsetMode::None),
        (LossMode::Positive, OffsetMode::Regression),
        (LossMode::Hybrid, OffsetMode::Regression),
    ];
    let mut loss_rows = Vec::new();
    for (loss, offset) in variants {
        let mut recalls = Vec::new();
        for seed in 0..args.seeds {
            let world = generate(&WorldConfig { seed, ..Default::default() })?;
            let mut cfg = base.clone();
            cfg.loss_mode = loss;
            cfg.model.offset_mode = offset;
            cfg.seed = seed;
            let (model, test) = bench_train(&world, SplitMode::SameArea, &cfg)?;
            let db = test.database(&model)?;
            let report = evaluate(&model, &test.queries, &db, &world.grid, &EvalOptions::default())?;
            table.push(report.table_row(&format!("{loss:?} seed {seed}")));
            recalls.push(report.recall_at_1);
        }
        let mean = recalls.iter().sum::<f64>() / recalls.len().max(1) as f64;
        loss_rows.push(LossRow { loss, offset, recall_at_1: recalls, mean_recall_at_1: mean });
    }

    let world = generate(&WorldConfig::default())?;
    let mut reports = serde_json::Map::new();
    for (offset, name) in [(OffsetMode::Regression, "regression"), (OffsetMode::Classification, "classification")] {
        let mut cfg = base.clone();
        cfg.model.offset_mode = offset;
        let (model, test) = bench_train(&world, SplitMode::SameArea, &cfg)?;
        let db = test.database(&model)?;
        for mode in [LocalizeMode::RetrievalOnly, if offset == OffsetMode::Regression { LocalizeMode::Regression } else { LocalizeMode::Classification }] {
            let r = evaluate(&model, &test.queries, &db, &world.grid, &EvalOptions { mode, ..Default::default() })?;
            table.push(r.table_row(&format!("{name} head, {mode:?}")));
            reports.insert(format!("{name}/{mode:?}"), serde_json::to_value(summary_of(&r))?);
        }
        if offset == OffsetMode::Regression {
            for scope in [Some(200.0), Some(500.0), Some(1000.0), None] {
                let opts = EvalOptions { scope_m: scope, gps_noise_m: 100.0, ..Default::default() };
                let r = evaluate(&model, &test.queries, &db, &world.grid, &opts)?;
                let label = scope.map_or("scope all".to_string(), |s| format!("scope {s} m"));
                table.push(r.table_row(&label));
                reports.insert(label, serde_json::to_value(summary_of(&r))?);
            }
        }
    }
    let (model, test) = bench_train(&world, SplitMode::CrossArea, &TrainConfig {
        schedule: TrainSchedule { warmup_epochs: TrainSchedule::CROSS_AREA_WARMUP, ..base.schedule },
        ..base.clone()
    })?;
    let db = test.database(&model)?;
    let r = evaluate(&model, &test.queries, &db, &world.grid, &EvalOptions::default())?;
    table.push(r.table_row("cross-area hybrid"));
    reports.insert("cross-area".into(), serde_json::to_value(summary_of(&r))?);

    let text = table.join("\n") + "\n";
    fs::write(args.out.join("bench.txt"), &text)?;
    write_json(&args.out.join("bench.json"), &json!({ "loss_ablation": loss_rows, "runs": reports }))?;
    print!("{text}");
    for row in &loss_rows {
        println!("mean recall@1 {:?}: {:.4}", row.loss, row.mean_recall_at_1);
    }
    println!("bench finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn summary_of(r: &EvalReport) -> serde_json::Value {
    json!({
        "recall_at_1": r.recall_at_1,
        "recall_at_5": r.recall_at_5,
        "recall_at_1pct": r.recall_at_1pct,
        "hit_rate": r.hit_rate,
        "mean_error_m": r.mean_error_m,
        "mean_error_correct_m": r.mean_error_correct_m,
        "n_excluded": r.n_excluded,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Grid(c) => cmd_grid(c),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
