//! Staged training with on-the-fly label generation.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backend::WarpBackend;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::geometry::{sample_pose_with, Intrinsics, PoseSamplerConfig};
use crate::loss::{lambda_schedule, loss_total, InpaintLoss, InpaintRegion, LossConfig, LossReport, LossSchedule, LossWeights};
use crate::model::Model;
use crate::nn::Adam;
use crate::scalar::Scalar;
use crate::teacher::InpaintTeacher;
use crate::warp::{compose_labels, RgbdFrame, TrainingSample};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Square crop side; frames larger than this are randomly cropped.
    pub crop: usize,
    pub hflip: bool,
    pub seed: u64,
    pub warp_backend: WarpBackend,
    pub max_translation: f64,
    pub max_rotation_deg: f64,
    pub schedule: LossSchedule,
    pub inpaint_region: InpaintRegion,
    /// Reuse one pose per frame across epochs, drawn from the same stream as
    /// `eval::eval_poses` with this seed. Used for overfit runs.
    pub fixed_poses: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-4,
            batch_size: 32,
            crop: 224,
            hflip: true,
            seed: 0,
            warp_backend: WarpBackend::Reference,
            max_translation: 0.05,
            max_rotation_deg: 2.0,
            schedule: LossSchedule::default(),
            inpaint_region: InpaintRegion::Holes,
            fixed_poses: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, stages: usize) -> Result<()> {
        let m = 1usize << stages;
        if self.crop == 0 || self.crop % m != 0 {
            return Err(Error::Config(format!("crop {} must be a positive multiple of {m}", self.crop)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        self.pose_sampler().validate()
    }

    pub fn pose_sampler(&self) -> PoseSamplerConfig {
        PoseSamplerConfig { max_translation: self.max_translation, max_rotation_deg: self.max_rotation_deg, seed: self.seed }
    }
}

/// Epoch key reserved for poses that do not change between epochs.
pub const FROZEN_EPOCH: usize = u32::MAX as usize;

/// Per-sample generator keyed by `(seed, epoch, index)`.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Crop, flip, draw a pose and build labels for one frame in one epoch.
pub fn make_training_sample<T: Scalar>(
    frame: &RgbdFrame<T>,
    cfg: &TrainConfig,
    teacher: &dyn InpaintTeacher<T>,
    epoch: usize,
    index: usize,
) -> Result<TrainingSample<T>> {
    let mut rng = sample_rng(cfg.seed, epoch, index);
    let (h, w) = (frame.height(), frame.width());
    if h < cfg.crop || w < cfg.crop {
        return Err(Error::Shape(format!("frame {h}x{w} is smaller than crop {}", cfg.crop)));
    }
    let y0 = rng.gen_range(0..=h - cfg.crop);
    let x0 = rng.gen_range(0..=w - cfg.crop);
    let mut f = if (h, w) == (cfg.crop, cfg.crop) { frame.clone() } else { frame.crop(y0, x0, cfg.crop, cfg.crop) };
    if cfg.hflip && rng.gen_bool(0.5) {
        f = f.flip_x();
    }
    let k = Intrinsics::default_for(cfg.crop, cfg.crop);
    let pose = if cfg.fixed_poses {
        let mut pose_rng = sample_rng(cfg.seed, FROZEN_EPOCH, index);
        sample_pose_with(&cfg.pose_sampler(), f.median_depth(), &mut pose_rng)?
    } else {
        sample_pose_with(&cfg.pose_sampler(), f.median_depth(), &mut rng)?
    };
    let labels = cfg.warp_backend.forward_warp(&f, &pose, &k)?;
    compose_labels(&f, &pose, labels, teacher)
}

/// One optimiser step on the mean loss of `batch`. Samples run in parallel;
/// gradients are summed in batch order so the result is thread-count independent.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Adam<T>,
    batch: &[TrainingSample<T>],
    lambda: LossWeights,
    loss_cfg: &LossConfig<T>,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let step = opt.step as usize;
    let per_sample: Vec<Result<(LossReport, Vec<T>)>> = batch
        .par_iter()
        .map(|s| {
            let (pred, cache) = model.forward_train(&s.frame, &s.pose)?;
            let (report, d) = loss_total(&pred, s, lambda, loss_cfg)?;
            let mut g = model.params.zeros_like();
            model.backward(&cache, &d, &mut g);
            Ok((report, g))
        })
        .collect();
    let mut grads = model.params.zeros_like();
    let mut report = LossReport::default();
    for r in per_sample {
        let (rep, g) = r?;
        report.add(&rep);
        for (a, b) in grads.iter_mut().zip(&g) {
            *a = *a + *b;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    report.scale(inv);
    let s = T::from_f64c(inv);
    grads.iter_mut().for_each(|g| *g = *g * s);
    if !report.is_finite() {
        return Err(Error::NonFinite { step, detail: format!("{report:?}") });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        let name = model.params.entries.iter().find(|e| e.id.range().contains(&i)).map_or("?", |e| e.name.as_str());
        return Err(Error::NonFinite { step, detail: format!("gradient of {name} is not finite; losses {report:?}") });
    }
    opt.update(&mut model.params.data, &grads);
    Ok(report)
}

/// One row of the training log: mean per-sample losses over the epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: LossWeights,
    pub losses: LossReport,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,L_flow,L_mask,L_inpaint,lambda1,lambda2,lambda3,L_total";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{},{},{},{:.8}",
            self.epoch,
            self.losses.flow,
            self.losses.mask,
            self.losses.inpaint,
            self.lambda.inpaint,
            self.lambda.mask,
            self.lambda.flow,
            self.losses.total
        )
    }
}

pub fn write_log_csv(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for r in log {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Owns the optimiser state across epochs.
pub struct Trainer<'a, T: Scalar> {
    pub cfg: TrainConfig,
    pub loss: LossConfig<T>,
    pub opt: Adam<T>,
    teacher: &'a dyn InpaintTeacher<T>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(model: &Model<T>, cfg: TrainConfig, teacher: &'a dyn InpaintTeacher<T>) -> Result<Self> {
        cfg.validate(model.config.encoder_stages)?;
        let loss = LossConfig { inpaint_region: cfg.inpaint_region, plugins: Vec::new() };
        Ok(Self { opt: Adam::new(model.params.len(), cfg.lr), cfg, loss, teacher })
    }

    /// Fresh labels for every frame (new pose per epoch), built in parallel.
    pub fn epoch_samples(&self, frames: &[RgbdFrame<T>], epoch: usize) -> Result<Vec<TrainingSample<T>>> {
        frames
            .par_iter()
            .enumerate()
            .map(|(i, f)| make_training_sample(f, &self.cfg, self.teacher, epoch, i))
            .collect()
    }

    pub fn run_epoch(&mut self, model: &mut Model<T>, frames: &[RgbdFrame<T>], epoch: usize) -> Result<EpochRecord> {
        let start = Instant::now();
        let lambda = lambda_schedule(epoch, &self.cfg.schedule);
        let samples = self.epoch_samples(frames, epoch)?;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut sample_rng(self.cfg.seed, epoch, u32::MAX as usize));
        let mut sum = LossReport::default();
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<TrainingSample<T>> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let mut r = train_step(model, &mut self.opt, &batch, lambda, &self.loss)?;
            r.scale(chunk.len() as f64);
            sum.add(&r);
        }
        sum.scale(1.0 / samples.len() as f64);
        Ok(EpochRecord { epoch, lambda, losses: sum, seconds: start.elapsed().as_secs_f64() })
    }
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "metrics.csv";

/// Trains for `cfg.epochs`. With `out_dir`, writes `model.ckpt` and
/// `metrics.csv` there (also for zero epochs).
pub fn fit<T: Scalar>(
    frames: &[RgbdFrame<T>],
    model: &mut Model<T>,
    cfg: &TrainConfig,
    teacher: &dyn InpaintTeacher<T>,
    out_dir: Option<&Path>,
) -> Result<Vec<EpochRecord>> {
    fit_with(frames, model, cfg, teacher, out_dir, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with<T: Scalar>(
    frames: &[RgbdFrame<T>],
    model: &mut Model<T>,
    cfg: &TrainConfig,
    teacher: &dyn InpaintTeacher<T>,
    out_dir: Option<&Path>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    fit_with_plugins(frames, model, cfg, &[], teacher, out_dir, on_epoch)
}

/// [`fit_with`] with extra `(weight, loss)` terms on the inpainting output.
pub fn fit_with_plugins<T: Scalar>(
    frames: &[RgbdFrame<T>],
    model: &mut Model<T>,
    cfg: &TrainConfig,
    plugins: &[(f64, Arc<dyn InpaintLoss<T>>)],
    teacher: &dyn InpaintTeacher<T>,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if frames.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut trainer = Trainer::new(model, cfg.clone(), teacher)?;
    trainer.loss.plugins = plugins.to_vec();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let rec = trainer.run_epoch(model, frames, epoch)?;
        on_epoch(&rec);
        log.push(rec);
        if let Some(dir) = out_dir {
            write_log_csv(&dir.join(LOG_FILE), &log)?;
        }
    }
    if let Some(dir) = out_dir {
        write_log_csv(&dir.join(LOG_FILE), &log)?;
        checkpoint::save(model, &dir.join(CHECKPOINT_FILE))?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_scene, SceneKind};
    use crate::model::ModelConfig;
    use crate::teacher::MeanFill;

    fn tiny_model() -> Model<f32> {
        Model::new(ModelConfig { base_channels: 4, encoder_stages: 2, extrinsics_hidden: 8, extrinsics_out: 8, ..Default::default() }).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { epochs: 2, lr: 1e-3, batch_size: 2, crop: 16, schedule: LossSchedule { activation_epoch: 1, ..Default::default() }, ..Default::default() }
    }

    #[test]
    fn zero_epochs_returns_initial_model_and_empty_log() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![synth_scene::<f32>(SceneKind::Step, 16, 16, 0).unwrap()];
        let mut m = tiny_model();
        let before = m.params.clone();
        let log = fit(&frames, &mut m, &TrainConfig { epochs: 0, ..tiny_cfg() }, &MeanFill, Some(dir.path())).unwrap();
        assert!(log.is_empty());
        assert_eq!(m.params, before);
        assert_eq!(std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap().trim(), LOG_HEADER);
        assert_eq!(checkpoint::load::<f32>(&dir.path().join(CHECKPOINT_FILE)).unwrap().params, before);
    }

    #[test]
    fn log_records_the_lambda_transition() {
        let frames: Vec<_> = (0..3).map(|i| synth_scene::<f32>(SceneKind::Step, 20, 20, i).unwrap()).collect();
        let mut m = tiny_model();
        let log = fit(&frames, &mut m, &tiny_cfg(), &MeanFill, None).unwrap();
        assert_eq!(log[0].lambda.inpaint, 0.0);
        assert_eq!(log[1].lambda.inpaint, 1.0);
        assert!(log.iter().all(|r| r.losses.is_finite()));
    }

    #[test]
    fn poses_are_fresh_each_epoch() {
        let f = synth_scene::<f32>(SceneKind::Gradient, 16, 16, 0).unwrap();
        let cfg = tiny_cfg();
        let a = make_training_sample(&f, &cfg, &MeanFill, 0, 0).unwrap();
        let b = make_training_sample(&f, &cfg, &MeanFill, 1, 0).unwrap();
        let a2 = make_training_sample(&f, &cfg, &MeanFill, 0, 0).unwrap();
        assert_ne!(a.pose, b.pose);
        assert_eq!(a, a2);
    }

    #[test]
    fn bad_config_is_rejected() {
        let m = tiny_model();
        assert!(Trainer::new(&m, TrainConfig { crop: 18, ..tiny_cfg() }, &MeanFill).is_err());
        assert!(Trainer::new(&m, TrainConfig { batch_size: 0, ..tiny_cfg() }, &MeanFill).is_err());
        let mut m = tiny_model();
        assert!(fit(&[], &mut m, &tiny_cfg(), &MeanFill, None).is_err());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let f = synth_scene::<f32>(SceneKind::Plane, 16, 16, 0).unwrap();
        let mut s = make_training_sample(&f, &tiny_cfg(), &MeanFill, 0, 0).unwrap();
        s.shift.0.data[0] = f32::NAN;
        s.mask.0.data[0] = 1.0;
        let mut m = tiny_model();
        let mut opt = Adam::new(m.params.len(), 1e-3);
        let err = train_step(&mut m, &mut opt, &[s], LossWeights::ALL, &LossConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 0, .. }));
    }
}
