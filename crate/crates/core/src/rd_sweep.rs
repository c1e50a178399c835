//! Frozen-base λ sweeps. For every enhancement mode a low-compression seed model is
//! trained once, then each grid point is fine-tuned from that shared seed for the
//! same number of epochs and measured by actually coding held-out images.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::metrics::{bpp_of, lower_baseline, CurveMode, RdPoint};
use crate::pipelines::{rmse, BaseModel, EnhancementModel, Mode, PipelineConfig};
use crate::synthetic::{generate_dataset, DatasetSpec, Example};
use crate::trainer::{attach_base_latents, train, warm_start, TrainSchedule};

const HELD_OUT_SALT: u64 = 0x4e1d_0a7e;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub pipeline: PipelineConfig,
    pub dataset: DatasetSpec,
    pub held_out: DatasetSpec,
    pub base_schedule: TrainSchedule,
    /// Schedule of each mode's seed model.
    pub seed_schedule: TrainSchedule,
    /// Rate weight of the seed models, at most the first grid value.
    pub seed_lambda: f64,
    /// Schedule of every grid point, fine-tuned from the seed.
    pub point_schedule: TrainSchedule,
    /// Rate weights in increasing order.
    pub lambdas: Vec<f64>,
    pub modes: Vec<Mode>,
    pub seed: u64,
    /// Workers for held-out coding.
    pub threads: usize,
}

/// Held-out measurements of one trained model.
#[derive(Clone, Debug)]
pub struct Measured {
    pub mode: Option<Mode>,
    pub lambda: f64,
    /// Achieved rate of the layer's own payloads.
    pub layer_bpp: f64,
    /// Rate estimate at the quantized latents.
    pub estimated_bpp: f64,
    /// Pooled RMSE of the reconstructions (enhancement layers only).
    pub rmse: f64,
    pub payloads: Vec<Vec<u8>>,
    pub checkpoint: Vec<u8>,
    /// Wall-clock training time, including the shared seed run for grid points.
    pub train_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub base: Measured,
    pub runs: Vec<Measured>,
    /// The seed model of every mode, in mode order.
    pub seeds: Vec<Measured>,
    /// Enhancement points with the base rate included, plus the lower baseline.
    /// Standalone points carry their own rate only.
    pub points: Vec<RdPoint>,
    /// Held-out images with their decoded base latents attached.
    pub held_out: Vec<Example>,
}

impl SweepResult {
    pub fn runs_of(&self, mode: Mode) -> impl Iterator<Item = &Measured> {
        self.runs.iter().filter(move |r| r.mode == Some(mode))
    }

    pub fn seed_of(&self, mode: Mode) -> Option<&Measured> {
        self.seeds.iter().find(|r| r.mode == Some(mode))
    }
}

/// Per-image results computed on up to `threads` workers, returned in input order.
fn map_images<T: Send>(
    held_out: &[Example],
    threads: usize,
    f: impl Fn(&Example) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let threads = threads.clamp(1, held_out.len().max(1));
    if threads == 1 {
        return held_out.iter().map(&f).collect();
    }
    let chunk = held_out.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = held_out
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(&f).collect::<Result<Vec<T>>>()))
            .collect();
        let mut out = Vec::with_capacity(held_out.len());
        for h in handles {
            out.extend(h.join().expect("measurement worker panicked")?);
        }
        Ok(out)
    })
}

struct ImageMeasure {
    payload: Vec<u8>,
    estimated_bits: f64,
    area: usize,
    squared_error: f64,
    samples: usize,
}

fn summarize(mode: Option<Mode>, lambda: f64, images: Vec<ImageMeasure>, checkpoint: Vec<u8>) -> Result<Measured> {
    let area: usize = images.iter().map(|m| m.area).sum();
    let bits: f64 = images.iter().map(|m| m.payload.len() as f64 * 8.0).sum();
    let est: f64 = images.iter().map(|m| m.estimated_bits).sum();
    let sq: f64 = images.iter().map(|m| m.squared_error).sum();
    let samples: usize = images.iter().map(|m| m.samples).sum();
    Ok(Measured {
        mode,
        lambda,
        layer_bpp: bpp_of(bits, area, 1)?,
        estimated_bpp: bpp_of(est, area, 1)?,
        rmse: if samples == 0 { f64::NAN } else { (sq / samples as f64).sqrt() },
        payloads: images.into_iter().map(|m| m.payload).collect(),
        checkpoint,
        train_seconds: 0.0,
    })
}

pub fn measure_base(base: &BaseModel, held_out: &[Example], threads: usize) -> Result<Measured> {
    let images = map_images(held_out, threads, |e| {
        let ev = base.evaluate(&e.image, &e.targets)?;
        let s = e.image.shape();
        Ok(ImageMeasure {
            payload: ev.coded.payload,
            estimated_bits: ev.report.rate_bits,
            area: s.h * s.w,
            squared_error: 0.0,
            samples: 0,
        })
    })?;
    summarize(None, base.config.lambda_b, images, base.store.checkpoint_bytes())
}

/// Held-out examples must carry their decoded base latents for the base-dependent modes.
pub fn measure_enhancement(enh: &EnhancementModel, held_out: &[Example], threads: usize) -> Result<Measured> {
    let images = map_images(held_out, threads, |e| {
        let base_hat = match enh.mode() {
            Mode::Standalone => None,
            _ => Some(
                e.base_latent
                    .as_ref()
                    .ok_or_else(|| Error::Contract("held-out example lacks its base latent".into()))?,
            ),
        };
        let ev = enh.evaluate(&e.image, base_hat)?;
        let s = e.image.shape();
        let r = rmse(&ev.reconstruction, &e.image);
        Ok(ImageMeasure {
            payload: ev.coded.payload,
            estimated_bits: ev.report.rate_bits,
            area: s.h * s.w,
            squared_error: r * r * e.image.len() as f64,
            samples: e.image.len(),
        })
    })?;
    let mode = enh.mode();
    summarize(Some(mode), enh.config.rate_weight(mode), images, enh.store.checkpoint_bytes())
}

/// Trains the base, then every mode over the λ grid, and measures each model.
/// Runs are listed mode by mode in grid order.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    if cfg.lambdas.is_empty() || cfg.lambdas.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Contract("λ grid must be non-empty and strictly increasing".into()));
    }
    if !(cfg.seed_lambda >= 0.0 && cfg.seed_lambda <= cfg.lambdas[0]) {
        return Err(Error::Contract(format!(
            "seed λ {} must lie in [0, {}]",
            cfg.seed_lambda, cfg.lambdas[0]
        )));
    }
    let data = generate_dataset(cfg.dataset, cfg.seed)?;
    let (mut train_set, mut val_set) = data.split(cfg.seed);
    let mut held_out = generate_dataset(cfg.held_out, cfg.seed ^ HELD_OUT_SALT)?.examples;

    let mut base = BaseModel::new(&cfg.pipeline, cfg.seed)?;
    let started = Instant::now();
    train(&mut base, &train_set, &val_set, &TrainSchedule { seed: cfg.seed, ..cfg.base_schedule.clone() })?;
    let base_seconds = started.elapsed().as_secs_f64();
    attach_base_latents(&base, &mut train_set)?;
    attach_base_latents(&base, &mut val_set)?;
    attach_base_latents(&base, &mut held_out)?;
    let mut base_measured = measure_base(&base, &held_out, cfg.threads)?;
    base_measured.train_seconds = base_seconds;

    let mut runs = Vec::new();
    let mut seeds = Vec::new();
    let mut points = Vec::new();
    for &mode in &cfg.modes {
        let model_at = |lambda: f64, seed: u64| {
            let mut pc = cfg.pipeline.clone();
            pc.set_rate_weight(mode, lambda);
            EnhancementModel::new(&pc, mode, seed)
        };
        let mut seed_model = model_at(cfg.seed_lambda, cfg.seed.wrapping_add(1))?;
        let started = Instant::now();
        let seeded = train(
            &mut seed_model,
            &train_set,
            &val_set,
            &TrainSchedule {
                seed: cfg.seed,
                warm_start: None,
                ..cfg.seed_schedule.clone()
            },
        )?;
        let seed_seconds = started.elapsed().as_secs_f64();
        let mut m = measure_enhancement(&seed_model, &held_out, cfg.threads)?;
        m.train_seconds = seed_seconds;
        seeds.push(m);
        for (i, &lambda) in cfg.lambdas.iter().enumerate() {
            let mut enh = model_at(lambda, cfg.seed.wrapping_add(1))?;
            warm_start(&mut enh.store, &seeded.checkpoint)?;
            let schedule = TrainSchedule {
                seed: cfg.seed.wrapping_add(i as u64 + 1),
                warm_start: None,
                ..cfg.point_schedule.clone()
            };
            let started = Instant::now();
            train(&mut enh, &train_set, &val_set, &schedule)?;
            let seconds = started.elapsed().as_secs_f64();
            let mut m = measure_enhancement(&enh, &held_out, cfg.threads)?;
            m.train_seconds = seed_seconds + seconds;
            let bpp = match mode {
                Mode::Standalone => m.layer_bpp,
                _ => m.layer_bpp + base_measured.layer_bpp,
            };
            points.push(RdPoint::new(CurveMode::from(mode), lambda, bpp, m.rmse));
            runs.push(m);
        }
    }
    let standalone: Vec<RdPoint> = points.iter().filter(|p| p.mode == CurveMode::Standalone).copied().collect();
    points.extend(lower_baseline(&standalone, base_measured.layer_bpp));
    Ok(SweepResult {
        base: base_measured,
        runs,
        seeds,
        points,
        held_out,
    })
}
