//! Adam training with plateau decay, early stopping and best-checkpoint retention.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pipelines::{BaseModel, EnhancementModel, LossReport, Mode, PipelineConfig};
use crate::synthetic::{DatasetSpec, Example};
use crate::tensor::Array4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub learning_rate: f64,
    pub plateau_patience: usize,
    pub decay_factor: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub warm_start: Option<PathBuf>,
    pub min_learning_rate: f64,
    /// Relative improvement a validation loss must show to reset the patience counters.
    pub min_improvement: f64,
    pub grad_clip: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            learning_rate: 1e-4,
            plateau_patience: 3,
            decay_factor: 0.75,
            early_stop_patience: 8,
            max_epochs: 100,
            batch_size: 8,
            seed: 0,
            warm_start: None,
            min_learning_rate: 1e-6,
            min_improvement: 1e-4,
            grad_clip: 5.0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::Contract(format!("decay_factor {} must lie in (0, 1)", self.decay_factor)));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 || self.batch_size == 0 {
            return Err(Error::Contract("patience values and batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.min_learning_rate >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Contract("learning rates must be ≥ 0 and grad_clip > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PlateauEvent {
    Improved,
    Waiting,
    Decayed(f64),
    Stop,
}

/// Validation-loss bookkeeping: decay after `plateau_patience` flat epochs,
/// stop after `early_stop_patience` flat epochs or once the rate would drop below the floor.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    lr: f64,
    best: f64,
    since_decay: usize,
    since_best: usize,
    schedule: TrainSchedule,
}

impl PlateauScheduler {
    pub fn new(schedule: &TrainSchedule) -> Self {
        PlateauScheduler {
            lr: schedule.learning_rate,
            best: f64::INFINITY,
            since_decay: 0,
            since_best: 0,
            schedule: schedule.clone(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, loss: f64) -> PlateauEvent {
        if loss < self.best - self.schedule.min_improvement * self.best.abs() || (self.best.is_infinite() && loss.is_finite()) {
            self.best = loss;
            self.since_best = 0;
            self.since_decay = 0;
            return PlateauEvent::Improved;
        }
        self.since_best += 1;
        self.since_decay += 1;
        if self.since_best >= self.schedule.early_stop_patience {
            return PlateauEvent::Stop;
        }
        if self.since_decay >= self.schedule.plateau_patience {
            let next = self.lr * self.schedule.decay_factor;
            if next < self.schedule.min_learning_rate {
                return PlateauEvent::Stop;
            }
            self.lr = next;
            self.since_decay = 0;
            return PlateauEvent::Decayed(next);
        }
        PlateauEvent::Waiting
    }
}

/// A model the loop can optimize.
pub trait Trainable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Loss over a batch of images (`n×3×H×W`) with their palette classes and base latents.
    fn batch_loss(
        &self,
        g: &mut Graph,
        images: &Array4,
        targets: &Arc<[u8]>,
        base_latents: Option<&Array4>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, LossReport)>;
}

impl Trainable for BaseModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn batch_loss(
        &self,
        g: &mut Graph,
        images: &Array4,
        targets: &Arc<[u8]>,
        _base_latents: Option<&Array4>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, LossReport)> {
        let x = g.input(images.clone());
        let out = self.forward(g, x, targets, rng)?;
        Ok((out.loss, out.report))
    }
}

impl Trainable for EnhancementModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn batch_loss(
        &self,
        g: &mut Graph,
        images: &Array4,
        _targets: &Arc<[u8]>,
        base_latents: Option<&Array4>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, LossReport)> {
        let x = g.input(images.clone());
        let b = base_latents.map(|b| g.input(b.clone()));
        let out = self.forward(g, x, b, rng)?;
        Ok((out.loss, out.report))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train: LossReport,
    pub validation: LossReport,
    pub event: PlateauEvent,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Checkpoint bytes of the best-validation parameters (also left in the model).
    pub checkpoint: Vec<u8>,
}

impl TrainOutcome {
    /// First epoch whose plateau event was a decay or a stop.
    pub fn first_plateau(&self) -> Option<usize> {
        self.history
            .iter()
            .find(|r| matches!(r.event, PlateauEvent::Decayed(_) | PlateauEvent::Stop))
            .map(|r| r.epoch)
    }
}

struct Batch {
    images: Array4,
    targets: Arc<[u8]>,
    base: Option<Array4>,
}

fn make_batch(examples: &[&Example]) -> Result<Batch> {
    let images = Array4::stack(&examples.iter().map(|e| &e.image).collect::<Vec<_>>())?;
    let targets: Arc<[u8]> = examples.iter().flat_map(|e| e.targets.iter().copied()).collect();
    let base = if examples.iter().all(|e| e.base_latent.is_some()) {
        Some(Array4::stack(
            &examples.iter().map(|e| e.base_latent.as_ref().expect("checked")).collect::<Vec<_>>(),
        )?)
    } else {
        None
    };
    Ok(Batch { images, targets, base })
}

fn add_report(acc: &mut LossReport, r: &LossReport, w: f64) {
    acc.distortion += w * r.distortion;
    acc.rate_bits += w * r.rate_bits;
    acc.rate_bpp += w * r.rate_bpp;
    acc.auxiliary += w * r.auxiliary;
    acc.total += w * r.total;
}

fn non_finite(g: &Graph, epoch: usize, step: usize) -> Error {
    let tensor = g
        .first_non_finite()
        .map(|(_, name)| name)
        .unwrap_or_else(|| "loss".to_string());
    Error::NonFinite { tensor, epoch, step }
}

/// Noise seed for validation: fixed for the whole run so epochs are comparable.
const VALIDATION_SALT: u64 = 0x7a11_da7e;

fn evaluate<T: Trainable>(model: &T, data: &[Example], batch_size: usize, seed: u64) -> Result<LossReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ VALIDATION_SALT);
    let mut acc = LossReport::default();
    let batches: Vec<&[Example]> = data.chunks(batch_size).collect();
    for chunk in &batches {
        let refs: Vec<&Example> = chunk.iter().collect();
        let b = make_batch(&refs)?;
        let mut g = Graph::new();
        let (_, report) = model.batch_loss(&mut g, &b.images, &b.targets, b.base.as_ref(), Some(&mut rng))?;
        add_report(&mut acc, &report, 1.0 / batches.len() as f64);
    }
    Ok(acc)
}

/// Optimize `model` on `train`, tracking the loss on `validation` (or on `train`
/// itself when no validation items exist). The best-validation parameters are
/// restored into the model before returning.
pub fn train<T: Trainable>(
    model: &mut T,
    train: &[Example],
    validation: &[Example],
    schedule: &TrainSchedule,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if let Some(path) = &schedule.warm_start {
        warm_start_from_file(model.params_mut(), path)?;
    }
    let val_set = if validation.is_empty() { train } else { validation };
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut plateau = PlateauScheduler::new(schedule);
    let mut history = Vec::new();
    let mut best_checkpoint = model.params().checkpoint_bytes();
    let mut best_epoch = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=schedule.max_epochs {
        let lr = plateau.learning_rate();
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(schedule.batch_size).collect();
        let mut acc = LossReport::default();
        for (step, idx) in batches.iter().enumerate() {
            let refs: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            let b = make_batch(&refs)?;
            let mut g = Graph::new();
            let (loss, report) = model.batch_loss(&mut g, &b.images, &b.targets, b.base.as_ref(), Some(&mut rng))?;
            if !g.scalar(loss).is_finite() {
                return Err(non_finite(&g, epoch, step));
            }
            let grads = g.backward(loss)?;
            let store = model.params_mut();
            store.zero_grads();
            g.accumulate_param_grads(&grads, store)?;
            let norm = store.grad_norm();
            if !norm.is_finite() {
                return Err(Error::NonFinite {
                    tensor: "parameter gradients".into(),
                    epoch,
                    step,
                });
            }
            store.clip_grad_norm(schedule.grad_clip);
            store.adam_step(lr)?;
            add_report(&mut acc, &report, 1.0 / batches.len() as f64);
        }
        let val = evaluate(&*model, val_set, schedule.batch_size, schedule.seed)?;
        if !val.total.is_finite() {
            return Err(Error::NonFinite {
                tensor: "validation loss".into(),
                epoch,
                step: batches.len(),
            });
        }
        let event = plateau.observe(val.total);
        if event == PlateauEvent::Improved {
            best_checkpoint = model.params().checkpoint_bytes();
            best_epoch = epoch;
        }
        history.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train: acc,
            validation: val,
            event,
        });
        if event == PlateauEvent::Stop {
            break;
        }
    }
    let entries = ParamStore::read_checkpoint(best_checkpoint.as_slice())?;
    model.params_mut().load_matching(&entries)?;
    Ok(TrainOutcome {
        history,
        best_epoch,
        checkpoint: best_checkpoint,
    })
}

/// Copy every matching parameter from a checkpoint; returns the names it held that
/// `store` does not have.
pub fn warm_start(store: &mut ParamStore, checkpoint: &[u8]) -> Result<Vec<String>> {
    let entries = ParamStore::read_checkpoint(checkpoint)?;
    store.load_matching(&entries)
}

pub fn warm_start_from_file(store: &mut ParamStore, path: &Path) -> Result<Vec<String>> {
    warm_start(store, &std::fs::read(path)?)
}

/// Replace the parameters of `store` with a checkpoint that must cover all of them.
pub fn load_exact(store: &mut ParamStore, checkpoint: &[u8]) -> Result<()> {
    let entries = ParamStore::read_checkpoint(checkpoint)?;
    let missing = store.missing_from(&entries);
    if !missing.is_empty() {
        return Err(Error::Format(format!("checkpoint lacks {} parameters, first `{}`", missing.len(), missing[0])));
    }
    store.load_matching(&entries)?;
    Ok(())
}

/// Quantized base latents `Ŷ_b` for every example, for training enhancement layers
/// against a frozen base.
pub fn attach_base_latents(base: &BaseModel, examples: &mut [Example]) -> Result<()> {
    for e in examples {
        e.base_latent = Some(base.code(&e.image)?.reconstruction);
    }
    Ok(())
}

/// Everything a `key = value` run configuration can set.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub schedule: TrainSchedule,
    pub pipeline: PipelineConfig,
    pub dataset: DatasetSpec,
    pub mode: Option<Mode>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schedule: TrainSchedule::default(),
            pipeline: PipelineConfig::tiny(),
            dataset: DatasetSpec {
                count: 256,
                crop_size: 64,
            },
            mode: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Format(format!("line {line}: `{v}` is not a valid value for `{key}`")))
}

/// Parse flat UTF-8 `key = value` lines; `#` starts a comment. Unknown keys are errors.
/// `profile = tiny | full` resets the pipeline to that profile before later keys apply.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {line}: expected `key = value`")))?;
        let (key, v) = (key.trim(), value.trim());
        let s = &mut cfg.schedule;
        let p = &mut cfg.pipeline;
        match key {
            "learning_rate" => s.learning_rate = parse_value(line, key, v)?,
            "plateau_patience" => s.plateau_patience = parse_value(line, key, v)?,
            "decay_factor" => s.decay_factor = parse_value(line, key, v)?,
            "early_stop_patience" => s.early_stop_patience = parse_value(line, key, v)?,
            "max_epochs" => s.max_epochs = parse_value(line, key, v)?,
            "batch_size" => s.batch_size = parse_value(line, key, v)?,
            "seed" => s.seed = parse_value(line, key, v)?,
            "warm_start" => s.warm_start = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "min_learning_rate" => s.min_learning_rate = parse_value(line, key, v)?,
            "min_improvement" => s.min_improvement = parse_value(line, key, v)?,
            "grad_clip" => s.grad_clip = parse_value(line, key, v)?,
            "profile" => {
                *p = match v {
                    "tiny" => PipelineConfig::tiny(),
                    "full" => PipelineConfig::default(),
                    other => return Err(Error::Format(format!("line {line}: unknown profile `{other}`"))),
                }
            }
            "base_channels" => p.base_channels = parse_value(line, key, v)?,
            "enh_channels" => p.enh_channels = parse_value(line, key, v)?,
            "image_channels" => p.image_channels = parse_value(line, key, v)?,
            "palette" => p.palette = parse_value(line, key, v)?,
            "lambda_b" => p.lambda_b = parse_value(line, key, v)?,
            "lambda_e" => p.lambda_e = parse_value(line, key, v)?,
            "lambda_r" => p.lambda_r = parse_value(line, key, v)?,
            "beta" => p.beta = parse_value(line, key, v)?,
            "num_blocks" => p.entropy.num_blocks = parse_value(line, key, v)?,
            "kernel_size" => p.entropy.kernel_size = parse_value(line, key, v)?,
            "expansion_factor" => p.entropy.expansion_factor = parse_value(line, key, v)?,
            "group_size" => p.entropy.group_size = parse_value(line, key, v)?,
            "channel_multiple" => p.entropy.channel_multiple = parse_value(line, key, v)?,
            "hc_blocks" => p.hc_blocks = parse_value(line, key, v)?,
            "hc_expansion" => p.hc_expansion = parse_value(line, key, v)?,
            "dataset_count" => cfg.dataset.count = parse_value(line, key, v)?,
            "crop_size" => cfg.dataset.crop_size = parse_value(line, key, v)?,
            "mode" => cfg.mode = Some(v.parse().map_err(|_| Error::Format(format!("line {line}: unknown mode `{v}`")))?),
            other => return Err(Error::Format(format!("line {line}: unknown key `{other}`"))),
        }
    }
    cfg.schedule.validate()?;
    cfg.pipeline.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy_model::EntropyNetConfig;
    use crate::synthetic::generate_dataset;

    fn schedule(p: usize, e: usize) -> TrainSchedule {
        TrainSchedule {
            plateau_patience: p,
            early_stop_patience: e,
            ..TrainSchedule::default()
        }
    }

    #[test]
    fn constant_loss_decays_after_patience() {
        let mut s = PlateauScheduler::new(&schedule(3, 100));
        assert_eq!(s.observe(1.0), PlateauEvent::Improved);
        assert_eq!(s.observe(1.0), PlateauEvent::Waiting);
        assert_eq!(s.observe(1.0), PlateauEvent::Waiting);
        assert_eq!(s.observe(1.0), PlateauEvent::Decayed(1e-4 * 0.75));
        assert_eq!(s.observe(1.0), PlateauEvent::Waiting);
        assert_eq!(s.observe(1.0), PlateauEvent::Waiting);
        assert_eq!(s.observe(1.0), PlateauEvent::Decayed(1e-4 * 0.75 * 0.75));
        // a tiny gain below the relative threshold is not an improvement
        assert_eq!(s.observe(1.0 - 1e-5), PlateauEvent::Waiting);
        assert_eq!(s.observe(0.9), PlateauEvent::Improved);
    }

    #[test]
    fn stops_at_patience_or_rate_floor() {
        let mut s = PlateauScheduler::new(&schedule(2, 5));
        s.observe(1.0);
        let events: Vec<_> = (0..5).map(|_| s.observe(2.0)).collect();
        assert_eq!(events.last(), Some(&PlateauEvent::Stop));
        let mut s = PlateauScheduler::new(&TrainSchedule {
            learning_rate: 1.2e-6,
            ..schedule(1, 100)
        });
        s.observe(1.0);
        assert_eq!(s.observe(1.0), PlateauEvent::Stop);
    }

    #[test]
    fn learning_rate_never_increases() {
        let mut s = PlateauScheduler::new(&schedule(2, 50));
        let mut prev = s.learning_rate();
        for i in 0..200 {
            let loss = 1.0 + ((i * 37) % 11) as f64 * 0.01;
            if s.observe(loss) == PlateauEvent::Stop {
                break;
            }
            assert!(s.learning_rate() <= prev);
            prev = s.learning_rate();
        }
    }

    #[test]
    fn config_parsing() {
        let cfg = parse_config("# comment\nlearning_rate = 2e-4\nprofile = tiny\nlambda_e = 0.5  # inline\nmode = residual\n\nbatch_size=4\n").unwrap();
        assert_eq!(cfg.schedule.learning_rate, 2e-4);
        assert_eq!(cfg.schedule.batch_size, 4);
        assert_eq!(cfg.pipeline.lambda_e, 0.5);
        assert_eq!(cfg.pipeline.enh_channels, 64);
        assert_eq!(cfg.mode, Some(Mode::Residual));
        assert!(matches!(parse_config("learning_rat = 1"), Err(Error::Format(_))));
        assert!(matches!(parse_config("batch_size = x"), Err(Error::Format(_))));
        assert!(matches!(parse_config("just words"), Err(Error::Format(_))));
        assert!(parse_config("decay_factor = 1.5").is_err());
        assert!(parse_config("beta = -1").is_err());
    }

    fn micro() -> PipelineConfig {
        PipelineConfig {
            base_channels: 4,
            enh_channels: 4,
            entropy: EntropyNetConfig {
                num_blocks: 1,
                group_size: 2,
                ..EntropyNetConfig::default()
            },
            ..PipelineConfig::tiny()
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let data = generate_dataset(DatasetSpec { count: 6, crop_size: 16 }, 2).unwrap();
        let (train_set, val) = data.split(0);
        let mut model = EnhancementModel::new(&micro(), Mode::Standalone, 1).unwrap();
        let before = model.store.checkpoint_bytes();
        let out = train(
            &mut model,
            &train_set,
            &val,
            &TrainSchedule {
                learning_rate: 0.0,
                max_epochs: 3,
                batch_size: 2,
                ..TrainSchedule::default()
            },
        )
        .unwrap();
        assert_eq!(model.store.checkpoint_bytes(), before);
        let losses: Vec<f64> = out.history.iter().map(|r| r.validation.total).collect();
        assert!(losses.windows(2).all(|w| w[0] == w[1]), "{losses:?}");
    }

    #[test]
    fn nan_names_first_bad_tensor() {
        let data = generate_dataset(DatasetSpec { count: 4, crop_size: 16 }, 2).unwrap();
        let mut model = EnhancementModel::new(&micro(), Mode::Standalone, 1).unwrap();
        let id = model.store.id("g.3.bias").unwrap();
        model.store.value_mut(id).data_mut()[0] = f32::NAN;
        let err = train(&mut model, &data.examples, &[], &TrainSchedule::default()).unwrap_err();
        match err {
            Error::NonFinite { tensor, epoch, step } => {
                assert!(tensor.contains("g.3.bias"), "{tensor}");
                assert_eq!((epoch, step), (1, 0));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn warm_start_round_trip_and_extras() {
        let a = EnhancementModel::new(&micro(), Mode::Residual, 1).unwrap();
        let mut b = EnhancementModel::new(&micro(), Mode::Residual, 2).unwrap();
        let extras = warm_start(&mut b.store, &a.store.checkpoint_bytes()).unwrap();
        assert!(extras.is_empty());
        assert_eq!(a.store.checkpoint_bytes(), b.store.checkpoint_bytes());
        // residual checkpoint into a standalone model: h_r names are extras
        let mut c = EnhancementModel::new(&micro(), Mode::Standalone, 3).unwrap();
        let extras = warm_start(&mut c.store, &a.store.checkpoint_bytes()).unwrap();
        assert!(!extras.is_empty() && extras.iter().all(|n| n.starts_with("h_r.")));
        // conditional entropy model has extra input channels: shape conflict
        let mut d = EnhancementModel::new(&micro(), Mode::Conditional, 3).unwrap();
        assert!(matches!(warm_start(&mut d.store, &a.store.checkpoint_bytes()), Err(Error::Contract(_))));
    }
}
