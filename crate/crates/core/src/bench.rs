//! Latency and structure measurements of the inference pipeline.
//!
//! Sequential mode decodes flow and mask, materialises the warped source and
//! only then decodes the inpainting, the way a warp-then-fill pipeline must.
//! Parallel mode runs the three decoders concurrently on the shared latent.
//! Both produce the same synthesis; timings are reported, never asserted.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;
use std::time::Instant;

use crate::compositor::blend;
use crate::dataset::{synth_scene, SceneKind};
use crate::error::{Error, Result};
use crate::geometry::{sample_pose_with, Extrinsics, PoseSamplerConfig};
use crate::model::{pad_to_multiple, Head, Model, Prediction};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::sample_rng;
use crate::warp::{grid_sample, Border, OcclusionMask, RgbdFrame, ShiftMap};

/// Published mobile-GPU latency of the full-size network, kept as context.
pub const REFERENCE_LATENCY_MS: f64 = 26.0;
/// Published runtime memory of the full-size network, kept as context.
pub const REFERENCE_MEMORY_GB: f64 = 0.14;

/// Resolutions the latency report covers by default, as `(height, width)`.
pub const RESOLUTIONS: [(usize, usize); 3] = [(224, 224), (512, 512), (762, 1008)];

pub const MIN_RUNS: usize = 10;
pub const WARMUP_RUNS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Sequential,
    Parallel,
}

impl Mode {
    pub const BOTH: [Mode; 2] = [Mode::Sequential, Mode::Parallel];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sequential => "sequential",
            Mode::Parallel => "parallel",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Mode::Sequential),
            "parallel" => Ok(Mode::Parallel),
            _ => Err(Error::Config(format!("unknown bench mode {s:?} (sequential|parallel)"))),
        }
    }
}

/// Parses `sequential`, `parallel` or `both`.
pub fn parse_modes(s: &str) -> Result<Vec<Mode>> {
    if s == "both" {
        Ok(Mode::BOTH.to_vec())
    } else {
        Ok(vec![s.parse()?])
    }
}

/// Parses `224,512,762x1008`; a bare number means a square frame.
pub fn parse_resolutions(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|item| {
            let item = item.trim();
            let dims: Vec<&str> = item.split('x').collect();
            let parse = |v: &str| {
                v.parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| Error::Config(format!("bad resolution {item:?}")))
            };
            match dims.as_slice() {
                [n] => parse(n).map(|n| (n, n)),
                [h, w] => Ok((parse(h)?, parse(w)?)),
                _ => Err(Error::Config(format!("bad resolution {item:?}"))),
            }
        })
        .collect()
}

/// One pipeline evaluation: the synthesis plus the decoder outputs.
#[derive(Clone, Debug)]
pub struct PipelineOutput<T> {
    pub synthesis: Tensor<T>,
    pub prediction: Prediction<T>,
}

/// Runs the whole inference pipeline once in `mode`. The frame must already
/// satisfy the model's size multiple.
pub fn run_pipeline<T: Scalar>(model: &Model<T>, frame: &RgbdFrame<T>, pose: &Extrinsics<T>, mode: Mode) -> Result<PipelineOutput<T>> {
    let latent = model.latent(frame, pose)?;
    let (prediction, warped) = match mode {
        Mode::Sequential => {
            let shift = model.decode(Head::Flow, &latent);
            let logits = model.decode(Head::Mask, &latent);
            let warped = grid_sample(&frame.rgb, &ShiftMap(shift.clone()), Border::Clamp)?;
            let inpaint = model.decode(Head::Inpaint, &latent);
            let mask = OcclusionMask(logits.map(crate::nn::ops::sigmoid));
            (Prediction { shift: ShiftMap(shift), mask, mask_logits: logits, inpaint }, warped)
        }
        Mode::Parallel => {
            let p = model.decode_all_parallel(&latent);
            let warped = grid_sample(&frame.rgb, &p.shift, Border::Clamp)?;
            (p, warped)
        }
    };
    let synthesis = blend(&warped, &prediction.mask.binarize(), &prediction.inpaint);
    Ok(PipelineOutput { synthesis, prediction })
}

/// Stable digest of a tensor's shape and bit patterns.
pub fn tensor_hash<T: Scalar>(t: &Tensor<T>) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    t.shape().hash(&mut h);
    for v in &t.data {
        v.as_f64().to_bits().hash(&mut h);
    }
    h.finish()
}

/// Peak resident set size of this process in bytes (Linux only).
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineReport {
    pub mode: Mode,
    /// Requested frame size.
    pub height: usize,
    pub width: usize,
    /// Size actually fed to the network after padding to the size multiple.
    pub padded: (usize, usize),
    pub runs: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub parameters: usize,
    pub macs: u64,
    /// RGBD encoder passes per pipeline run.
    pub encoder_calls: usize,
    pub peak_rss_bytes: Option<u64>,
    pub output_hash: u64,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times `runs` pipeline executions after [`WARMUP_RUNS`] untimed ones.
pub fn measure_pipeline<T: Scalar>(
    model: &Model<T>,
    frame: &RgbdFrame<T>,
    pose: &Extrinsics<T>,
    mode: Mode,
    runs: usize,
) -> Result<PipelineReport> {
    if runs < MIN_RUNS {
        return Err(Error::Config(format!("bench needs at least {MIN_RUNS} runs, got {runs}")));
    }
    let (height, width) = (frame.height(), frame.width());
    let (padded, _) = pad_to_multiple(frame, model.config.size_multiple());
    let mut out = None;
    for _ in 0..WARMUP_RUNS {
        out = Some(run_pipeline(model, &padded, pose, mode)?);
    }
    let mut times = Vec::with_capacity(runs);
    let mut encoder_calls = 0;
    for _ in 0..runs {
        model.reset_counters();
        let start = Instant::now();
        let o = run_pipeline(model, &padded, pose, mode)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        encoder_calls = encoder_calls.max(model.encoder_calls());
        out = Some(o);
    }
    times.sort_by(f64::total_cmp);
    let out = out.expect("at least one run");
    Ok(PipelineReport {
        mode,
        height,
        width,
        padded: (padded.height(), padded.width()),
        runs,
        median_ms: percentile(&times, 0.5),
        p95_ms: percentile(&times, 0.95),
        parameters: model.parameter_count(),
        macs: model.macs(padded.height(), padded.width()).total(),
        encoder_calls,
        peak_rss_bytes: peak_rss_bytes(),
        output_hash: tensor_hash(&out.synthesis),
    })
}

/// Synthetic frame and pose used for timing, fixed by `seed`.
pub fn bench_input<T: Scalar>(height: usize, width: usize, seed: u64) -> Result<(RgbdFrame<T>, Extrinsics<T>)> {
    let frame = synth_scene(SceneKind::Step, height, width, seed)?;
    let sampler = PoseSamplerConfig { seed, ..Default::default() };
    let pose = sample_pose_with(&sampler, frame.median_depth(), &mut sample_rng(seed, 0, 0))?;
    Ok((frame, pose))
}

/// Every `(resolution, mode)` combination, resolutions outermost.
pub fn run_bench<T: Scalar>(
    model: &Model<T>,
    resolutions: &[(usize, usize)],
    modes: &[Mode],
    runs: usize,
    seed: u64,
) -> Result<Vec<PipelineReport>> {
    let mut rows = Vec::with_capacity(resolutions.len() * modes.len());
    for &(h, w) in resolutions {
        let (frame, pose) = bench_input::<T>(h, w, seed)?;
        for &mode in modes {
            rows.push(measure_pipeline(model, &frame, &pose, mode, runs)?);
        }
    }
    Ok(rows)
}

pub const CSV_HEADER: &str =
    "mode,height,width,padded_height,padded_width,runs,median_ms,p95_ms,parameters,macs,encoder_calls,peak_rss_bytes,output_hash";

impl PipelineReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3},{:.3},{},{},{},{},{:016x}",
            self.mode,
            self.height,
            self.width,
            self.padded.0,
            self.padded.1,
            self.runs,
            self.median_ms,
            self.p95_ms,
            self.parameters,
            self.macs,
            self.encoder_calls,
            self.peak_rss_bytes.map_or(String::new(), |b| b.to_string()),
            self.output_hash
        )
    }
}

pub fn to_csv(rows: &[PipelineReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Human-readable table followed by the reference context line.
pub fn table(rows: &[PipelineReport]) -> String {
    let mut s = format!(
        "{:<11} {:>10} {:>10} {:>10} {:>9} {:>8} {:>9} {:>8}  {}\n",
        "mode", "frame", "median ms", "p95 ms", "params", "GMACs", "enc/run", "RSS MB", "output hash"
    );
    for r in rows {
        let rss = r.peak_rss_bytes.map_or("-".to_string(), |b| format!("{:.1}", b as f64 / (1 << 20) as f64));
        s.push_str(&format!(
            "{:<11} {:>10} {:>10.2} {:>10.2} {:>9} {:>8.3} {:>9} {:>8}  {:016x}\n",
            r.mode.to_string(),
            format!("{}x{}", r.height, r.width),
            r.median_ms,
            r.p95_ms,
            r.parameters,
            r.macs as f64 / 1e9,
            r.encoder_calls,
            rss,
            r.output_hash
        ));
    }
    s.push_str(&format!(
        "reference context (not asserted): {REFERENCE_LATENCY_MS} ms on a mobile GPU, {REFERENCE_MEMORY_GB} GB\n"
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Model<f32> {
        Model::new(ModelConfig { base_channels: 4, encoder_stages: 2, extrinsics_hidden: 8, extrinsics_out: 8, ..Default::default() })
            .unwrap()
    }

    #[test]
    fn modes_agree_and_share_one_encoder_pass() {
        let mut m = tiny();
        for v in m.params.data.iter_mut().skip(7).step_by(13) {
            *v += 0.05;
        }
        let (frame, pose) = bench_input::<f32>(20, 24, 3).unwrap();
        let seq = run_pipeline(&m, &frame, &pose, Mode::Sequential).unwrap();
        let par = run_pipeline(&m, &frame, &pose, Mode::Parallel).unwrap();
        assert!(seq.synthesis.max_abs_diff(&par.synthesis) <= 1e-6);
        let rows = run_bench(&m, &[(18, 22)], &Mode::BOTH, 10, 3).unwrap();
        assert_eq!(rows[0].output_hash, rows[1].output_hash);
        assert!(rows.iter().all(|r| r.encoder_calls == 1 && r.padded == (20, 24)));
    }

    #[test]
    fn parsing() {
        assert_eq!(parse_resolutions("224, 762x1008").unwrap(), vec![(224, 224), (762, 1008)]);
        assert!(parse_resolutions("0").is_err());
        assert!(parse_resolutions("3x4x5").is_err());
        assert_eq!(parse_modes("both").unwrap(), Mode::BOTH.to_vec());
        assert!(parse_modes("fast").is_err());
    }

    #[test]
    fn too_few_runs_is_rejected() {
        let m = tiny();
        let (frame, pose) = bench_input::<f32>(8, 8, 0).unwrap();
        assert!(measure_pipeline(&m, &frame, &pose, Mode::Parallel, 9).is_err());
    }

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 10.0);
        assert_eq!(percentile(&v, 0.95), 19.0);
    }
}
