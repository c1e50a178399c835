use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use scalcodec_core::bitstream::Bitstream;
use scalcodec_core::image_io::{encode_pnm, encode_tensor, read_image, to_rgb};
use scalcodec_core::info_bounds::{bounds_csv, run_bounds_lab};
use scalcodec_core::metrics::{bd_rate, curve_of, parse_rd_csv, write_rd_csv, CurveMode, RdPoint};
use scalcodec_core::pipelines::{decode_scalable, encode_scalable, BaseModel, EnhancementModel, Mode};
use scalcodec_core::rd_sweep::{run_sweep, SweepConfig};
use scalcodec_core::synthetic::{generate_dataset, DatasetSpec};
use scalcodec_core::trainer::{attach_base_latents, load_exact, parse_config, train, RunConfig, TrainOutcome, TrainSchedule};
use scalcodec_core::{Array4, Shape4};

#[derive(Parser, Debug)]
#[command(name = "scalcodec", version, about = "Scalable image codec: base layer for a task, enhancement layer for viewing")]
struct Cli {
    /// `key = value` run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base (task) pipeline on synthetic images; writes base.ckpt.
    TrainBase {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train an enhancement pipeline against a frozen base; writes enh-<mode>.ckpt.
    TrainEnh {
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long, value_name = "CKPT")]
        base: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Code an image into a layered stream.
    Encode {
        #[command(flatten)]
        models: Models,
        input: PathBuf,
    },
    /// Decode a layered stream.
    Decode {
        #[command(flatten)]
        models: Models,
        stream: PathBuf,
    },
    /// Compare estimated and achieved rates for an image.
    Estimate {
        #[command(flatten)]
        models: Models,
        input: PathBuf,
    },
    /// Entropy bound checks on random discrete instances, as CSV.
    Bounds {
        #[arg(long, default_value_t = 200)]
        instances: usize,
    },
    /// BD-rate (percent) of TEST against REF, both RD CSV files.
    Bdrate {
        reference: PathBuf,
        test: PathBuf,
        #[arg(long)]
        ref_mode: Option<String>,
        #[arg(long)]
        test_mode: Option<String>,
    },
    /// Train over a λ grid and emit the RD curves as CSV.
    Curve {
        #[arg(long, value_delimiter = ',', default_values_t = [0.04, 0.08, 0.16, 0.32, 0.64])]
        lambdas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = Mode::ALL)]
        modes: Vec<Mode>,
        #[arg(long, default_value_t = 16)]
        held_out: usize,
        #[arg(long, default_value_t = 12)]
        base_epochs: usize,
        /// Epochs of each mode's seed model.
        #[arg(long, default_value_t = 32)]
        seed_epochs: usize,
        /// Rate weight of the seed models.
        #[arg(long, default_value_t = 0.0025)]
        seed_lambda: f64,
        /// Epochs of every grid point, fine-tuned from the seed.
        #[arg(long, default_value_t = 8)]
        point_epochs: usize,
    },
}

#[derive(Args, Debug)]
struct Models {
    #[arg(long, value_name = "CKPT")]
    base: PathBuf,
    #[arg(long, value_name = "CKPT")]
    enh: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
}

/// A semantically invalid invocation that clap cannot catch.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn threads() -> Result<usize> {
    match std::env::var("SCALCODEC_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(format!("SCALCODEC_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(1),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_config(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.schedule.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn history_csv(outcome: &TrainOutcome) -> String {
    let mut s = String::from("epoch,learning_rate,train_loss,val_loss,val_distortion,val_bpp\n");
    for r in &outcome.history {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.learning_rate, r.train.total, r.validation.total, r.validation.distortion, r.validation.rate_bpp
        ));
    }
    s
}

fn schedule_with(cfg: &RunConfig, epochs: Option<usize>) -> TrainSchedule {
    let mut s = cfg.schedule.clone();
    if let Some(e) = epochs {
        s.max_epochs = e;
    }
    s
}

fn load_base(cfg: &RunConfig, path: &Path) -> Result<BaseModel> {
    let mut base = BaseModel::new(&cfg.pipeline, cfg.schedule.seed)?;
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    load_exact(&mut base.store, &bytes).with_context(|| format!("loading {}", path.display()))?;
    Ok(base)
}

fn load_enh(cfg: &RunConfig, mode: Mode, path: &Path) -> Result<EnhancementModel> {
    let mut enh = EnhancementModel::new(&cfg.pipeline, mode, cfg.schedule.seed)?;
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    load_exact(&mut enh.store, &bytes).with_context(|| format!("loading {}", path.display()))?;
    Ok(enh)
}

fn load_models(cfg: &RunConfig, m: &Models) -> Result<(BaseModel, Option<EnhancementModel>)> {
    if m.enh.is_some() && m.mode.is_none() {
        return Err(usage("--enh needs --mode"));
    }
    let base = load_base(cfg, &m.base)?;
    let enh = match (&m.enh, m.mode) {
        (Some(p), Some(mode)) => Some(load_enh(cfg, mode, p)?),
        _ => None,
    };
    Ok((base, enh))
}

fn read_input(path: &Path) -> Result<Array4> {
    let img = read_image(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(to_rgb(img)?)
}

/// FNV-1a over the little-endian values.
fn checksum(a: &Array4) -> u64 {
    a.to_le_bytes()
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn class_map(logits: &Array4) -> Array4 {
    let s = logits.shape();
    let scale = (s.c.max(2) - 1) as f32;
    Array4::from_fn(Shape4::new(1, 1, s.h, s.w), |_, _, y, x| {
        let best = (0..s.c)
            .max_by(|&a, &b| logits.get(0, a, y, x).total_cmp(&logits.get(0, b, y, x)))
            .unwrap_or(0);
        best as f32 / scale
    })
}

fn format_percent(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0');
    let s = if s.ends_with('.') { format!("{s}0") } else { s.to_string() };
    if s == "-0.0" {
        "0.0".into()
    } else {
        s
    }
}

fn select_curve(points: &[RdPoint], mode: Option<&str>, file: &Path) -> Result<Vec<(f64, f64)>> {
    let mode = match mode {
        Some(m) => m.parse::<CurveMode>().map_err(|e| usage(e.to_string()))?,
        None => {
            let first = points
                .first()
                .with_context(|| format!("{} holds no points", file.display()))?
                .mode;
            if points.iter().any(|p| p.mode != first) {
                return Err(usage(format!("{} holds several curves; pick one with a mode flag", file.display())));
            }
            first
        }
    };
    Ok(curve_of(points, mode)?.pairs())
}

fn read_curve_file(path: &Path) -> Result<Vec<RdPoint>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_rd_csv(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn run(cli: Cli) -> Result<()> {
    let threads = threads()?;
    match &cli.command {
        Command::TrainBase { epochs } => {
            let cfg = load_config(&cli)?;
            let dir = out_dir(&cli)?;
            let data = generate_dataset(cfg.dataset, cfg.schedule.seed)?;
            let (train_set, val_set) = data.split(cfg.schedule.seed);
            let mut base = BaseModel::new(&cfg.pipeline, cfg.schedule.seed)?;
            let outcome = train(&mut base, &train_set, &val_set, &schedule_with(&cfg, *epochs))?;
            write(&dir.join("base.ckpt"), &outcome.checkpoint)?;
            write(&dir.join("base-history.csv"), history_csv(&outcome).as_bytes())?;
            println!("best epoch {} of {}", outcome.best_epoch, outcome.history.len());
        }
        Command::TrainEnh {
            mode,
            base,
            lambda,
            epochs,
        } => {
            let mut cfg = load_config(&cli)?;
            let mode = mode
                .or(cfg.mode)
                .ok_or_else(|| usage("train-enh needs --mode or a `mode` config key"))?;
            if let Some(l) = lambda {
                cfg.pipeline.set_rate_weight(mode, *l);
            }
            let dir = out_dir(&cli)?;
            let base = load_base(&cfg, base)?;
            let data = generate_dataset(cfg.dataset, cfg.schedule.seed)?;
            let (mut train_set, mut val_set) = data.split(cfg.schedule.seed);
            if mode != Mode::Standalone {
                attach_base_latents(&base, &mut train_set)?;
                attach_base_latents(&base, &mut val_set)?;
            }
            let mut enh = EnhancementModel::new(&cfg.pipeline, mode, cfg.schedule.seed)?;
            let outcome = train(&mut enh, &train_set, &val_set, &schedule_with(&cfg, *epochs))?;
            write(&dir.join(format!("enh-{mode}.ckpt")), &outcome.checkpoint)?;
            write(&dir.join(format!("enh-{mode}-history.csv")), history_csv(&outcome).as_bytes())?;
            println!("best epoch {} of {}", outcome.best_epoch, outcome.history.len());
        }
        Command::Encode { models, input } => {
            let cfg = load_config(&cli)?;
            let (base, enh) = load_models(&cfg, models)?;
            let dir = out_dir(&cli)?;
            let x = read_input(input)?;
            let coded = encode_scalable(&x, &base, enh.as_ref())?;
            let bytes = coded.stream.to_bytes()?;
            let name = stem(input);
            write(&dir.join(format!("{name}.schm")), &bytes)?;
            println!("stream bytes {}", bytes.len());
            for layer in &coded.stream.layers {
                println!("{} layer payload bytes {}", layer.kind.name(), layer.payload.len());
            }
            if let Some(r) = &coded.reconstruction {
                println!("reconstruction checksum {:016x}", checksum(r));
            }
        }
        Command::Decode { models, stream } => {
            let cfg = load_config(&cli)?;
            let bytes = std::fs::read(stream).with_context(|| format!("reading {}", stream.display()))?;
            let parsed = Bitstream::from_bytes(&bytes)?;
            let mut models_mode = models.mode;
            if let (Some(layer), None) = (parsed.layers.get(1), models_mode) {
                models_mode = Mode::ALL.into_iter().find(|m| m.layer_kind() == layer.kind);
            }
            let base = load_base(&cfg, &models.base)?;
            let enh = match (&models.enh, models_mode) {
                (Some(p), Some(mode)) => Some(load_enh(&cfg, mode, p)?),
                (Some(_), None) => bail!("stream has no enhancement layer"),
                _ => None,
            };
            let decoded = decode_scalable(&parsed, &base, enh.as_ref())?;
            let dir = out_dir(&cli)?;
            let name = stem(stream);
            write(&dir.join(format!("{name}.classes.pgm")), &encode_pnm(&class_map(&decoded.logits))?)?;
            if let Some(r) = &decoded.reconstruction {
                write(&dir.join(format!("{name}.ten")), &encode_tensor(r)?)?;
                write(&dir.join(format!("{name}.ppm")), &encode_pnm(r)?)?;
                println!("reconstruction checksum {:016x}", checksum(r));
            } else if parsed.layers.len() > 1 {
                println!("enhancement layer present but no enhancement model given; decoded the base layer only");
            }
        }
        Command::Estimate { models, input } => {
            let cfg = load_config(&cli)?;
            let (base, enh) = load_models(&cfg, models)?;
            let x = read_input(input)?;
            let s = x.shape();
            let area = (s.h * s.w) as f64;
            let b = base.code(&x)?;
            let params = base.entropy().predict(&base.store, &b.reconstruction, None)?;
            let est = scalcodec_core::entropy_model::estimate_bits(&b.reconstruction, &params)?;
            println!("layer,estimated_bits,payload_bits,estimated_bpp,payload_bpp");
            let achieved = b.payload.len() as f64 * 8.0;
            println!("base,{est},{achieved},{},{}", est / area, achieved / area);
            if let Some(e) = &enh {
                let ev = e.evaluate(&x, Some(&b.reconstruction))?;
                let achieved = ev.coded.payload.len() as f64 * 8.0;
                let est = ev.report.rate_bits;
                println!("{},{est},{achieved},{},{}", e.mode(), est / area, achieved / area);
            }
        }
        Command::Bounds { instances } => {
            let seed = load_config(&cli)?.schedule.seed;
            let csv = bounds_csv(&run_bounds_lab(*instances, seed)?);
            if cli.out.is_some() {
                write(&out_dir(&cli)?.join("bounds.csv"), csv.as_bytes())?;
            }
            print!("{csv}");
        }
        Command::Bdrate {
            reference,
            test,
            ref_mode,
            test_mode,
        } => {
            let r = select_curve(&read_curve_file(reference)?, ref_mode.as_deref(), reference)?;
            let t = select_curve(&read_curve_file(test)?, test_mode.as_deref(), test)?;
            println!("{}", format_percent(bd_rate(&r, &t)?));
        }
        Command::Curve {
            lambdas,
            modes,
            held_out,
            base_epochs,
            seed_epochs,
            seed_lambda,
            point_epochs,
        } => {
            let cfg = load_config(&cli)?;
            let epochs = |e: usize| TrainSchedule {
                max_epochs: e,
                ..cfg.schedule.clone()
            };
            let sweep = SweepConfig {
                pipeline: cfg.pipeline.clone(),
                dataset: cfg.dataset,
                held_out: DatasetSpec {
                    count: *held_out,
                    crop_size: cfg.dataset.crop_size,
                },
                base_schedule: epochs(*base_epochs),
                seed_schedule: epochs(*seed_epochs),
                seed_lambda: *seed_lambda,
                point_schedule: epochs(*point_epochs),
                lambdas: lambdas.clone(),
                modes: modes.clone(),
                seed: cfg.schedule.seed,
                threads,
            };
            let result = run_sweep(&sweep)?;
            let csv = write_rd_csv(&result.points);
            if cli.out.is_some() {
                write(&out_dir(&cli)?.join("curve.csv"), csv.as_bytes())?;
            }
            print!("{csv}");
        }
    }
    Ok(())
}
