//! `translocator`: generate a synthetic world, partition it into geo-cells,
//! train the model, evaluate and predict.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use translocator::cells::{build_index, CellIndex, Level, CELLS_HEADER};
use translocator::config::RunConfig;
use translocator::eval::{
    accuracy_report, correlation_study, emit_report, predict, write_pgm, CropPolicy,
};
use translocator::model::{Batch, Branches, Model, CHECKPOINT_MAGIC};
use translocator::rngs::{stream, Stream};
use translocator::synth::{generate_world, shift_appearance, Dataset, Sample, DATASET_MAGIC};
use translocator::train::{check_label_spaces, metrics_csv, train, METRICS_HEADER};
use translocator::{Error, Result};

/// Street, city, region, country and continent radii, used when `eval` gets no config.
const DEFAULT_THRESHOLDS_KM: [f64; 5] = [1.0, 25.0, 200.0, 750.0, 2500.0];

#[derive(Parser)]
#[command(
    name = "translocator",
    version,
    about = "Hierarchical image geolocation on a synthetic world"
)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn get(self) -> bool {
        matches!(self, OnOff::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    RgbOnly,
    Dual,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test/shifted-test datasets and a manifest.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build coarse/middle/fine geo-cells from training coordinates.
    Partition {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the best checkpoint and metrics.csv.
    Train {
        /// Directory holding train.tlocds and val.tlocds.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cells: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        branches: Option<BranchArg>,
        #[arg(long, value_enum)]
        mff: Option<OnOff>,
        #[arg(long = "scene-head", value_enum)]
        scene_head: Option<OnOff>,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics CSV path; defaults to metrics.csv beside the checkpoint.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Geolocational accuracy report, optional attention maps and correlation study.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cells: PathBuf,
        /// Thresholds and crop policy; defaults to the five standard radii, single crop.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tencrop: bool,
        /// Directory for per-head attention maps (PGM).
        #[arg(long = "attn-out")]
        attn_out: Option<PathBuf>,
        /// Number of samples whose attention maps are written.
        #[arg(long = "attn-samples", default_value_t = 4)]
        attn_samples: usize,
        #[arg(long)]
        correlate: bool,
        /// Directory for report.csv, summary.txt and correlation.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print `lat lon cell_token scene_id w_rgb w_seg` per sample.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cells: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Describe a dataset, cells file or checkpoint.
    Inspect { path: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::NonFinite(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { config, out } => gen(&config, &out),
        Command::Partition { data, config, out } => partition(&data, &config, &out),
        Command::Train {
            data,
            cells,
            config,
            out,
            branches,
            mff,
            scene_head,
            seed,
            metrics,
        } => {
            let overrides = Overrides {
                branches,
                mff,
                scene_head,
                seed,
            };
            train_cmd(&data, &cells, &config, &out, &overrides, metrics.as_deref())
        }
        Command::Eval {
            ckpt,
            data,
            cells,
            config,
            tencrop,
            attn_out,
            attn_samples,
            correlate,
            out,
        } => {
            let (thresholds, mut crop) = match config {
                Some(p) => {
                    let cfg = RunConfig::load(&p)?;
                    (cfg.eval.thresholds_km, cfg.eval.crop)
                }
                None => (DEFAULT_THRESHOLDS_KM.to_vec(), CropPolicy::Single),
            };
            if tencrop {
                crop = CropPolicy::TenCrop;
            }
            let opts = EvalOptions {
                thresholds,
                crop,
                attn_out,
                attn_samples,
                correlate,
                out,
            };
            eval_cmd(&ckpt, &data, &cells, &opts)
        }
        Command::Predict { ckpt, cells, input } => predict_cmd(&ckpt, &cells, &input),
        Command::Inspect { path } => inspect(&path),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes beside the target and renames, so a crash never leaves a torn file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    write_file(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        })
}

fn gen(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let world = generate_world(&cfg.world)?;
    let shifted = shift_appearance(&world.test, cfg.world.shift_strength);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = String::from("TLOC-MANIFEST v1\n");
    writeln!(manifest, "config {}", sha256_hex(cfg.to_text().as_bytes())).unwrap();
    for (name, data) in [
        ("train.tlocds", &world.train),
        ("val.tlocds", &world.val),
        ("test.tlocds", &world.test),
        ("shifted_test.tlocds", &shifted),
    ] {
        let bytes = data.to_bytes();
        write_file(&out.join(name), &bytes)?;
        writeln!(manifest, "{name} {} {}", data.len(), sha256_hex(&bytes)).unwrap();
        println!("{name}: {} samples", data.len());
    }
    write_file(&out.join("manifest.txt"), manifest.as_bytes())
}

fn partition(data: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let train = Dataset::read(data)?;
    let built = build_index(&train.coords(), &cfg.cells)?;
    let mut text = Vec::new();
    built
        .index
        .write_to(&mut text)
        .map_err(|e| Error::io(out, e))?;
    write_file(out, &text)?;
    for ((level, p), dropped) in Level::ALL
        .iter()
        .map(|&l| (l, built.index.level(l)))
        .zip(built.dropped)
    {
        println!(
            "{}: {} cells, {} samples dropped",
            level.name(),
            p.len(),
            dropped
        );
    }
    for (level, token) in &built.oversize {
        println!(
            "warning: {} cell {token} exceeds the maximum at the depth limit",
            level.name()
        );
    }
    Ok(())
}

fn read_cells(path: &Path) -> Result<CellIndex> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CellIndex::parse(&text, &path.display().to_string())
}

struct Overrides {
    branches: Option<BranchArg>,
    mff: Option<OnOff>,
    scene_head: Option<OnOff>,
    seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.train.seed = seed;
        }
        match self.branches {
            Some(BranchArg::RgbOnly) => {
                cfg.model.branches = Branches::RgbOnly;
                // nothing to weigh with a single branch
                cfg.model.attentive_fusion = false;
            }
            Some(BranchArg::Dual) => cfg.model.branches = Branches::Dual,
            None => {}
        }
        if let Some(m) = self.mff {
            cfg.model.mff = m.get();
        }
        if let Some(s) = self.scene_head {
            if !s.get() {
                cfg.train.loss.gamma = 0.0;
            }
        }
        if cfg.model.branches == Branches::RgbOnly && cfg.model.mff {
            return Err(Error::Validation(
                "--branches rgb-only needs --mff off (fusion requires two branches)".into(),
            ));
        }
        cfg.validate()
    }
}

fn train_cmd(
    data: &Path,
    cells: &Path,
    config: &Path,
    out: &Path,
    overrides: &Overrides,
    metrics: Option<&Path>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    overrides.apply(&mut cfg)?;
    let index = read_cells(cells)?;
    let train_set = Dataset::read(&data.join("train.tlocds"))?;
    let val_set = Dataset::read(&data.join("val.tlocds"))?;
    let model_cfg = cfg.model.resolve(&train_set, index.class_counts())?;
    let model = Model::new(model_cfg, &mut stream(cfg.seed, Stream::Init))?;
    check_label_spaces(&model, &index, &train_set)?;
    log::info!("{} parameters", model.params.numel());

    let metrics_path = metrics.map(Path::to_path_buf).unwrap_or_else(|| {
        out.parent()
            .unwrap_or_else(|| Path::new("."))
            .join("metrics.csv")
    });
    let mut csv = format!("{METRICS_HEADER}\n");
    let outcome = train(model, &train_set, &val_set, &index, &cfg.train, |rec| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  val fine {:.3}  val scene {:.3}",
            rec.epoch, rec.train_loss, rec.val_acc_fine, rec.val_acc_scene
        );
        csv.push_str(&rec.csv_row());
        csv.push('\n');
    })?;
    debug_assert_eq!(csv, metrics_csv(&outcome.records));
    write_atomic(&metrics_path, csv.as_bytes())?;
    write_atomic(out, &outcome.best.to_bytes())?;
    if outcome.excluded > 0 {
        println!(
            "{} training samples outside retained cells were excluded",
            outcome.excluded
        );
    }
    println!(
        "best epoch {} (val fine {:.4})",
        outcome.best_epoch,
        outcome
            .records
            .get(outcome.best_epoch)
            .map_or(0.0, |r| r.val_acc_fine)
    );
    match outcome.aborted {
        Some(why) => Err(Error::NonFinite(format!(
            "training stopped: {why}; last good checkpoint kept at {}",
            out.display()
        ))),
        None => Ok(()),
    }
}

struct EvalOptions {
    thresholds: Vec<f64>,
    crop: CropPolicy,
    attn_out: Option<PathBuf>,
    attn_samples: usize,
    correlate: bool,
    out: Option<PathBuf>,
}

fn load_pair(ckpt: &Path, cells: &Path) -> Result<(Model, CellIndex)> {
    let model = Model::load(ckpt)?;
    let index = read_cells(cells)?;
    let [c, m, f] = index.class_counts();
    let k = model.config.classes;
    if [k[0], k[1], k[2]] != [c, m, f] {
        return Err(Error::Validation(format!(
            "checkpoint heads have {}/{}/{} classes but the cells file has {c}/{m}/{f}",
            k[0], k[1], k[2]
        )));
    }
    Ok((model, index))
}

fn check_data(model: &Model, data: &Dataset) -> Result<()> {
    let cfg = &model.config;
    if data.height != cfg.image_size || data.width != cfg.image_size {
        return Err(Error::Validation(format!(
            "model expects {0}×{0} images, data has {1}×{2}",
            cfg.image_size, data.height, data.width
        )));
    }
    if cfg.is_dual() && data.n_seg_classes != cfg.n_seg_classes {
        return Err(Error::Validation(format!(
            "model expects {} segmentation classes, data has {}",
            cfg.n_seg_classes, data.n_seg_classes
        )));
    }
    Ok(())
}

fn eval_cmd(ckpt: &Path, data: &Path, cells: &Path, opts: &EvalOptions) -> Result<()> {
    let (model, index) = load_pair(ckpt, cells)?;
    let test = Dataset::read(data)?;
    check_data(&model, &test)?;
    let samples: Vec<&Sample> = test.samples.iter().collect();
    let records = predict(&model, &samples, &index, opts.crop, 32)?;
    let report = accuracy_report(&records, &opts.thresholds)?;
    print!("{}", report.to_csv());
    println!("{}", report.summary());
    if let Some(dir) = &opts.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        emit_report(&report, dir)?;
    }
    if opts.correlate {
        let centroids: Vec<_> = index.fine.cells().iter().map(|c| c.mean_gps).collect();
        let study = correlation_study(&records, index.fine.len(), &centroids)?;
        let csv = study.to_csv();
        print!("{csv}");
        if let Some(dir) = &opts.out {
            write_file(&dir.join("correlation.csv"), csv.as_bytes())?;
        }
    }
    if let Some(dir) = &opts.attn_out {
        write_attention(&model, &samples, opts.attn_samples, dir)?;
    }
    Ok(())
}

fn write_attention(model: &Model, samples: &[&Sample], count: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let chosen = &samples[..count.min(samples.len())];
    if chosen.is_empty() {
        return Ok(());
    }
    let batch = Batch::from_samples(chosen.iter().copied(), model.config.is_dual());
    let seq = model.config.seq_len();
    let names = ["rgb", "seg"];
    for (i, maps) in model.attention(&batch)?.iter().enumerate() {
        for (b, layers) in maps.iter().enumerate() {
            for (k, heads) in layers.iter().enumerate() {
                for (h, map) in heads.iter().enumerate() {
                    let name = format!("sample{i}_{}_layer{k}_head{h}.pgm", names[b]);
                    write_pgm(&dir.join(name), map, seq, seq)?;
                }
            }
        }
    }
    println!(
        "attention maps for {} samples written to {}",
        chosen.len(),
        dir.display()
    );
    Ok(())
}

fn predict_cmd(ckpt: &Path, cells: &Path, input: &Path) -> Result<()> {
    let (model, index) = load_pair(ckpt, cells)?;
    let data = Dataset::read(input)?;
    check_data(&model, &data)?;
    let samples: Vec<&Sample> = data.samples.iter().collect();
    let records = predict(&model, &samples, &index, CropPolicy::Single, 32)?;
    println!("# lat lon cell_token scene_id w_rgb w_seg");
    for r in &records {
        let token = index.fine.cells()[r.pred_cell].token;
        let weights = if model.config.is_dual() {
            format!("{:.6} {:.6}", r.weights.0, r.weights.1)
        } else {
            "1.0 0.0".to_string()
        };
        println!(
            "{:.6} {:.6} {token} {} {weights}",
            r.pred_gps.lat(),
            r.pred_gps.lon(),
            r.scene_pred
        );
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    if bytes.starts_with(DATASET_MAGIC) {
        let d = Dataset::from_bytes(&bytes, &origin)?;
        println!(
            "dataset: {} samples, {}×{} images, {} seg classes, {} scene classes",
            d.len(),
            d.height,
            d.width,
            d.n_seg_classes,
            d.n_scene_classes
        );
    } else if bytes.starts_with(CHECKPOINT_MAGIC) {
        let m = Model::from_bytes(&bytes, &origin)?;
        println!(
            "checkpoint: {} tensors, {} parameters",
            m.params.len(),
            m.params.numel()
        );
        print!("{}", m.config.to_kv());
    } else if bytes.starts_with(CELLS_HEADER.as_bytes()) {
        let text = String::from_utf8(bytes).map_err(|_| Error::format(&origin, "not UTF-8"))?;
        let index = CellIndex::parse(&text, &origin)?;
        for level in Level::ALL {
            let p = index.level(level);
            let counts: Vec<usize> = p.cells().iter().map(|c| c.train_count).collect();
            println!(
                "{}: {} cells, {} training samples, per-cell {}..{}",
                level.name(),
                p.len(),
                counts.iter().sum::<usize>(),
                counts.iter().min().unwrap_or(&0),
                counts.iter().max().unwrap_or(&0)
            );
        }
    } else {
        return Err(Error::format(origin, "unrecognised file type"));
    }
    Ok(())
}
