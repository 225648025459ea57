//! Ablation harness: one model per variant, trained on the same frames with
//! the same schedule and evaluated on the same frozen samples.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use crate::error::Result;
use crate::eval::{evaluate, EvalReport, PerceptualMetric};
use crate::loss::{FocalFrequencyLoss, InpaintLoss, LossReport, SsimLoss};
use crate::model::{Head, Model, ModelConfig, SkipTargets};
use crate::scalar::Scalar;
use crate::teacher::InpaintTeacher;
use crate::training::{fit_with_plugins, TrainConfig};
use crate::warp::{RgbdFrame, TrainingSample};

pub struct Variant<T> {
    pub label: String,
    pub model: ModelConfig,
    /// Extra `(weight, loss)` terms on the inpainting output.
    pub plugins: Vec<(f64, Arc<dyn InpaintLoss<T>>)>,
}

/// The three skip-connection wirings, all other settings taken from `base`.
pub fn skip_variants<T: Scalar>(base: &ModelConfig) -> Vec<Variant<T>> {
    [("no skips", SkipTargets::NONE), ("skips to all decoders", SkipTargets::ALL), ("skips to mask+inpaint", SkipTargets::MASK_AND_INPAINT)]
        .into_iter()
        .map(|(label, skip_targets)| Variant { label: label.into(), model: ModelConfig { skip_targets, ..base.clone() }, plugins: Vec::new() })
        .collect()
}

/// Plain L1 against L1 plus each bundled inpainting loss.
pub fn loss_variants<T: Scalar>(base: &ModelConfig) -> Vec<Variant<T>> {
    let plugins: Vec<(&str, Vec<(f64, Arc<dyn InpaintLoss<T>>)>)> = vec![
        ("L1", vec![]),
        ("L1 + SSIM", vec![(1.0, Arc::new(SsimLoss))]),
        ("L1 + focal frequency", vec![(1.0, Arc::new(FocalFrequencyLoss::default()))]),
    ];
    plugins.into_iter().map(|(label, plugins)| Variant { label: label.into(), model: base.clone(), plugins }).collect()
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub skip_targets: SkipTargets,
    /// Encoder stages wired into the flow, mask and inpaint decoders.
    pub wiring: [(Head, Vec<usize>); 3],
    pub parameters: usize,
    pub train_seconds: f64,
    pub final_losses: LossReport,
    pub report: EvalReport,
}

/// Encoder stages feeding each decoder of `model`.
pub fn skip_wiring<T: Scalar>(model: &Model<T>) -> [(Head, Vec<usize>); 3] {
    Head::ALL.map(|h| (h, model.decoder(h).skip_stages()))
}

pub fn run_ablation<T: Scalar>(
    variants: &[Variant<T>],
    frames: &[RgbdFrame<T>],
    train: &TrainConfig,
    teacher: &dyn InpaintTeacher<T>,
    samples: &[TrainingSample<T>],
    perceptual: Option<&dyn PerceptualMetric<T>>,
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|v| {
            let mut model = Model::new(v.model.clone())?;
            let start = Instant::now();
            let log = fit_with_plugins(frames, &mut model, train, &v.plugins, teacher, None, |_| {})?;
            let train_seconds = start.elapsed().as_secs_f64();
            let mut report = evaluate(&model, samples, perceptual)?;
            report.label = v.label.clone();
            Ok(AblationRow {
                label: v.label.clone(),
                skip_targets: v.model.skip_targets,
                wiring: skip_wiring(&model),
                parameters: model.parameter_count(),
                train_seconds,
                final_losses: log.last().map(|r| r.losses).unwrap_or_default(),
                report,
            })
        })
        .collect()
}

fn stages(v: &[usize]) -> String {
    if v.is_empty() {
        "-".into()
    } else {
        v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
    }
}

/// Metrics table followed by a wiring and cost table.
pub fn table(rows: &[AblationRow]) -> String {
    let reports: Vec<EvalReport> = rows.iter().map(|r| r.report.clone()).collect();
    let mut s = EvalReport::table(&reports);
    let lw = rows.iter().map(|r| r.label.len() + 1).max().unwrap_or(0).max(12);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<lw$}| {:>10} {:>10} {:>10} | {:>9} {:>8} {:>9}", "variant", "flow skip", "mask skip", "inp. skip", "params", "train s", "L_total");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<lw$}| {:>10} {:>10} {:>10} | {:>9} {:>8.1} {:>9.4}",
            r.label,
            stages(&r.wiring[0].1),
            stages(&r.wiring[1].1),
            stages(&r.wiring[2].1),
            r.parameters,
            r.train_seconds,
            r.final_losses.total
        );
    }
    s
}

pub const CSV_HEADER: &str =
    "variant,skip_targets,flow_skips,mask_skips,inpaint_skips,parameters,train_seconds,final_L_total,warp_PSNR,warp_SSIM,inpaint_PSNR,inpaint_SSIM,mask_IoU";

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.2},{:.6},{:.4},{},{:.4},{},{:.4}",
            r.label,
            r.skip_targets.to_string().replace(',', "+"),
            stages(&r.wiring[0].1),
            stages(&r.wiring[1].1),
            stages(&r.wiring[2].1),
            r.parameters,
            r.train_seconds,
            r.final_losses.total,
            r.report.warping.psnr,
            opt(r.report.warping.ssim),
            r.report.inpainting.psnr,
            opt(r.report.inpainting.ssim),
            r.report.mask_iou
        );
    }
    s
}
