//! Two-column evaluation: warping quality (shift + mask against the oracle
//! warp) and inpainting quality (full synthesis against the composed target).

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::backend::WarpBackend;
use crate::error::{Error, Result};
use crate::geometry::{sample_pose_with, Extrinsics, Intrinsics, PoseSamplerConfig};
use crate::metrics::{mask_iou, psnr, psnr_masked, ssim, ssim_masked, SSIM_WINDOW};
use crate::model::{Model, Prediction};
use crate::nn::ops::sigmoid;
use crate::scalar::Scalar;
use crate::teacher::InpaintTeacher;
use crate::tensor::Tensor;
use crate::training::{sample_rng, FROZEN_EPOCH};
use crate::warp::{compose_labels, grid_sample, Border, OcclusionMask, RgbdFrame, TrainingSample};

/// External perceptual distance (e.g. LPIPS). None is bundled.
pub trait PerceptualMetric<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64>;
}

/// Anything that produces the three decoder outputs for a labelled sample.
pub trait ViewSynthesizer<T: Scalar>: Sync {
    fn label(&self) -> String;
    fn predict(&self, sample: &TrainingSample<T>) -> Result<Prediction<T>>;
}

impl<T: Scalar> ViewSynthesizer<T> for Model<T> {
    fn label(&self) -> String {
        "model".into()
    }

    fn predict(&self, sample: &TrainingSample<T>) -> Result<Prediction<T>> {
        self.forward_padded(&sample.frame, &sample.pose)
    }
}

/// Returns the ground-truth components; a self-test of the metric pipeline.
pub struct OraclePassthrough;

impl<T: Scalar> ViewSynthesizer<T> for OraclePassthrough {
    fn label(&self) -> String {
        "oracle".into()
    }

    fn predict(&self, s: &TrainingSample<T>) -> Result<Prediction<T>> {
        let logits = s.mask.0.map(|m| if m >= T::half() { T::from_f64c(30.0) } else { T::from_f64c(-30.0) });
        Ok(Prediction {
            shift: s.shift.clone(),
            mask: OcclusionMask(logits.map(sigmoid)),
            mask_logits: logits,
            inpaint: s.inpaint.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricRow {
    pub lpips: Option<f64>,
    pub psnr: f64,
    /// `None` when the images are smaller than the SSIM window.
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub samples: usize,
    pub warping: MetricRow,
    pub inpainting: MetricRow,
    pub mask_iou: f64,
    pub perceptual_name: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleMetrics {
    pub warp_psnr: f64,
    pub warp_ssim: Option<f64>,
    pub warp_lpips: Option<f64>,
    pub inpaint_psnr: f64,
    pub inpaint_ssim: Option<f64>,
    pub inpaint_lpips: Option<f64>,
    pub mask_iou: f64,
}

/// Frozen poses: one per frame, drawn from a stream disjoint from training.
pub fn eval_poses<T: Scalar>(frames: &[RgbdFrame<T>], sampler: &PoseSamplerConfig) -> Result<Vec<Extrinsics<T>>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| sample_pose_with(sampler, f.median_depth(), &mut sample_rng(sampler.seed, FROZEN_EPOCH, i)))
        .collect()
}

/// Labels each frame under its pose with the default intrinsics.
pub fn eval_samples<T: Scalar>(
    frames: &[RgbdFrame<T>],
    poses: &[Extrinsics<T>],
    teacher: &dyn InpaintTeacher<T>,
    backend: WarpBackend,
) -> Result<Vec<TrainingSample<T>>> {
    if frames.len() != poses.len() {
        return Err(Error::Config(format!("{} frames but {} poses", frames.len(), poses.len())));
    }
    frames
        .par_iter()
        .zip(poses.par_iter())
        .map(|(f, p)| {
            let k = Intrinsics::default_for(f.width(), f.height());
            compose_labels(f, p, backend.forward_warp(f, p, &k)?, teacher)
        })
        .collect()
}

pub fn sample_metrics<T: Scalar>(
    s: &TrainingSample<T>,
    pred: &Prediction<T>,
    perceptual: Option<&dyn PerceptualMetric<T>>,
) -> Result<SampleMetrics> {
    let (h, w) = (s.mask.0.h, s.mask.0.w);
    let pred_bin = pred.mask.binarize();
    let keep = |img: &Tensor<T>, m: &Tensor<T>| {
        let mut out = img.clone();
        let n = h * w;
        for c in 0..out.c {
            for i in 0..n {
                out.data[c * n + i] = out.data[c * n + i] * m.data[i];
            }
        }
        out
    };
    let pred_warp = keep(&grid_sample(&s.frame.rgb, &pred.shift, Border::Clamp)?, &pred_bin.0);
    let gt_warp = keep(&s.warped_rgb, &s.mask.0);
    let half = T::half();
    let region: Vec<bool> = pred_bin.0.data.iter().zip(&s.mask.0.data).map(|(&p, &g)| p >= half || g >= half).collect();
    let big = h >= SSIM_WINDOW && w >= SSIM_WINDOW;
    let synth = pred.compose(&s.frame.rgb)?;
    Ok(SampleMetrics {
        warp_psnr: psnr_masked(&pred_warp, &gt_warp, &region)?,
        warp_ssim: if big { Some(ssim_masked(&pred_warp, &gt_warp, &region)?) } else { None },
        warp_lpips: perceptual.map(|p| p.distance(&pred_warp, &gt_warp)).transpose()?,
        inpaint_psnr: psnr(&synth, &s.target)?,
        inpaint_ssim: if big { Some(ssim(&synth, &s.target)?) } else { None },
        inpaint_lpips: perceptual.map(|p| p.distance(&synth, &s.target)).transpose()?,
        mask_iou: mask_iou(&pred.mask.0, &s.mask.0)?,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn mean_opt(v: &[Option<f64>]) -> Option<f64> {
    v.iter().copied().collect::<Option<Vec<f64>>>().map(|x| mean(x.into_iter()))
}

/// Per-sample metrics averaged over `samples`.
pub fn evaluate<T: Scalar>(
    synth: &dyn ViewSynthesizer<T>,
    samples: &[TrainingSample<T>],
    perceptual: Option<&dyn PerceptualMetric<T>>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let per: Vec<SampleMetrics> =
        samples.par_iter().map(|s| sample_metrics(s, &synth.predict(s)?, perceptual)).collect::<Result<_>>()?;
    let col = |f: fn(&SampleMetrics) -> Option<f64>| mean_opt(&per.iter().map(f).collect::<Vec<_>>());
    Ok(EvalReport {
        label: synth.label(),
        samples: per.len(),
        warping: MetricRow { lpips: col(|m| m.warp_lpips), psnr: mean(per.iter().map(|m| m.warp_psnr)), ssim: col(|m| m.warp_ssim) },
        inpainting: MetricRow {
            lpips: col(|m| m.inpaint_lpips),
            psnr: mean(per.iter().map(|m| m.inpaint_psnr)),
            ssim: col(|m| m.inpaint_ssim),
        },
        mask_iou: mean(per.iter().map(|m| m.mask_iou)),
        perceptual_name: perceptual.map(|p| p.name().to_string()),
    })
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:.digits$}"))
}

pub const REPORT_HEADER: &str = "method,warp_LPIPS,warp_PSNR,warp_SSIM,inpaint_LPIPS,inpaint_PSNR,inpaint_SSIM,mask_IoU,samples";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{},{},{:.4},{},{:.4},{}",
            self.label,
            cell(self.warping.lpips, 4),
            self.warping.psnr,
            cell(self.warping.ssim, 4),
            cell(self.inpainting.lpips, 4),
            self.inpainting.psnr,
            cell(self.inpainting.ssim, 4),
            self.mask_iou,
            self.samples
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{REPORT_HEADER}\n{}\n", self.csv_row())
    }

    /// Human-readable table with warping and inpainting column groups.
    pub fn table(reports: &[EvalReport]) -> String {
        let lw = reports.iter().map(|r| r.label.len() + 1).max().unwrap_or(0).max(12);
        let mut s = String::new();
        let _ = writeln!(s, "{:<lw$}| {:^26} | {:^26} |", "", "Warping", "Inpainting");
        let _ = writeln!(s, "{:<lw$}| {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8} | {:>8}", "method", "LPIPS", "PSNR", "SSIM", "LPIPS", "PSNR", "SSIM", "mask IoU");
        for r in reports {
            let _ = writeln!(
                s,
                "{:<lw$}| {:>8} {:>8.2} {:>8} | {:>8} {:>8.2} {:>8} | {:>8.3}",
                r.label,
                cell(r.warping.lpips, 3),
                r.warping.psnr,
                cell(r.warping.ssim, 3),
                cell(r.inpainting.lpips, 3),
                r.inpainting.psnr,
                cell(r.inpainting.ssim, 3),
                r.mask_iou
            );
        }
        s
    }

    pub fn write(&self, csv: &Path, table: &Path) -> Result<()> {
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        std::fs::write(table, Self::table(std::slice::from_ref(self))).map_err(|e| Error::io(table, e))
    }
}
