use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cheapnvs::ablation::{self, loss_variants, run_ablation, skip_variants};
use cheapnvs::backend::WarpBackend;
use cheapnvs::bench::{self, parse_modes, parse_resolutions, run_bench, MIN_RUNS};
use cheapnvs::dataset::{load_pose, load_sample, scan_dir, synth_dataset, SampleRecord};
use cheapnvs::eval::{eval_poses, eval_samples, evaluate, OraclePassthrough, ViewSynthesizer};
use cheapnvs::geometry::{Extrinsics, PoseSamplerConfig};
use cheapnvs::io;
use cheapnvs::loss::{InpaintRegion, LossSchedule};
use cheapnvs::model::{Model, ModelConfig};
use cheapnvs::teacher::NeighborhoodFill;
use cheapnvs::training::{fit_with, EpochRecord, TrainConfig, LOG_HEADER};
use cheapnvs::warp::{grid_sample, Border};
use cheapnvs::{checkpoint, Frame, Pose};

use crate::args::{AblateArgs, BenchArgs, EvalArgs, GenDataArgs, InferArgs, ModelArgs, PoseArgs, TrainArgs};
use crate::Failure;

fn required<T>(v: Option<T>, flag: &str) -> Result<T, Failure> {
    v.ok_or_else(|| Failure::Invalid(format!("missing --{flag}")))
}

fn parse<T: FromStr<Err = cheapnvs::Error>>(v: Option<&str>, default: T) -> Result<T, Failure> {
    v.map_or(Ok(default), |s| s.parse().map_err(Failure::from))
}

fn mkdir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn sampler(p: &PoseArgs, seed: u64) -> PoseSamplerConfig {
    let d = PoseSamplerConfig::default();
    PoseSamplerConfig {
        max_translation: p.max_translation.unwrap_or(d.max_translation),
        max_rotation_deg: p.max_rotation_deg.unwrap_or(d.max_rotation_deg),
        seed,
    }
}

/// Frames of a dataset root with their poses: the pose file when present,
/// the frozen evaluation pose for `sampler.seed` otherwise.
fn load_posed(root: &Path, sampler: &PoseSamplerConfig) -> Result<(Vec<SampleRecord>, Vec<Frame>, Vec<Pose>), Failure> {
    let recs = scan_dir(root)?;
    if recs.is_empty() {
        return Err(Failure::Invalid(format!("no images under {}", root.join("rgb").display())));
    }
    let frames: Vec<Frame> = recs.iter().map(load_sample).collect::<Result<_, _>>()?;
    let mut poses = eval_poses(&frames, sampler)?;
    for (rec, pose) in recs.iter().zip(poses.iter_mut()) {
        if let Some(p) = load_pose(rec)? {
            *pose = p;
        }
    }
    Ok((recs, frames, poses))
}

pub fn gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let root = required(a.root, "root")?;
    let out = required(a.out, "out")?;
    let backend = parse(a.backend.as_deref(), WarpBackend::Reference)?;
    let (recs, frames, poses) = load_posed(&root, &sampler(&a.pose, a.seed.unwrap_or(0)))?;
    let samples = eval_samples(&frames, &poses, &NeighborhoodFill::default(), backend)?;
    for sub in ["shift", "mask", "warped", "target", "pose"] {
        mkdir(&out.join(sub))?;
    }
    for (rec, s) in recs.iter().zip(&samples) {
        let stem = rec.stem();
        io::write_shift_nvss(&s.shift.0, &out.join("shift").join(format!("{stem}.nvss")))?;
        io::write_gray_png(&s.mask.0, &out.join("mask").join(format!("{stem}.png")))?;
        io::write_rgb_png(&s.warped_rgb, &out.join("warped").join(format!("{stem}.png")))?;
        io::write_rgb_png(&s.target, &out.join("target").join(format!("{stem}.png")))?;
        io::write_pose(&s.pose, &out.join("pose").join(format!("{stem}.txt")))?;
        println!("{stem}: {}x{} coverage {:.4}", s.frame.height(), s.frame.width(), s.mask.coverage());
    }
    Ok(())
}

fn model_config(m: &ModelArgs, seed: u64) -> Result<ModelConfig, Failure> {
    let d = ModelConfig::default();
    Ok(ModelConfig {
        base_channels: m.base_channels.unwrap_or(d.base_channels),
        encoder_stages: m.encoder_stages.unwrap_or(d.encoder_stages),
        expansion: m.expansion.unwrap_or(d.expansion),
        extrinsics_hidden: m.extrinsics_hidden.unwrap_or(d.extrinsics_hidden),
        extrinsics_out: m.extrinsics_out.unwrap_or(d.extrinsics_out),
        skip_targets: parse(m.skip_targets.as_deref(), d.skip_targets)?,
        flow_scale: m.flow_scale.unwrap_or(d.flow_scale),
        seed: m.init_seed.unwrap_or(seed),
        ..d
    })
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let d = TrainConfig::default();
    let seed = a.seed.unwrap_or(d.seed);
    let p = sampler(&a.pose, seed);
    Ok(TrainConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        lr: a.lr.unwrap_or(d.lr),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        crop: a.crop.unwrap_or(d.crop),
        hflip: a.hflip.unwrap_or(d.hflip),
        seed,
        warp_backend: parse(a.backend.as_deref(), d.warp_backend)?,
        max_translation: p.max_translation,
        max_rotation_deg: p.max_rotation_deg,
        schedule: LossSchedule { activation_epoch: a.activation_epoch.unwrap_or(d.schedule.activation_epoch), ..d.schedule },
        inpaint_region: parse(a.inpaint_region.as_deref(), InpaintRegion::default())?,
        fixed_poses: a.fixed_poses.unwrap_or(d.fixed_poses),
    })
}

/// Dataset frames followed by generated scenes.
fn training_frames(a: &TrainArgs, crop: usize, seed: u64) -> Result<Vec<Frame>, Failure> {
    let mut frames = Vec::new();
    if let Some(root) = &a.data {
        frames = scan_dir(root)?.iter().map(load_sample).collect::<Result<_, _>>()?;
    }
    if let Some(n) = a.synthetic.filter(|&n| n > 0) {
        let side = a.synthetic_size.unwrap_or(crop);
        frames.extend(synth_dataset::<f32>(n, side, side, seed)?);
    }
    if frames.is_empty() {
        return Err(Failure::Invalid("no training frames: give --data and/or --synthetic".into()));
    }
    Ok(frames)
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    let cfg = train_config(&a)?;
    let mut model = Model::<f32>::new(model_config(&a.model, cfg.seed)?)?;
    cfg.validate(model.config.encoder_stages)?;
    let frames = training_frames(&a, cfg.crop, cfg.seed)?;
    eprintln!("training on {} frames, {} parameters", frames.len(), model.parameter_count());
    eprintln!("{LOG_HEADER}");
    fit_with(&frames, &mut model, &cfg, &NeighborhoodFill::default(), Some(&out), |r: &EpochRecord| eprintln!("{}", r.csv_row()))?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn infer(a: InferArgs) -> Result<(), Failure> {
    let ckpt = required(a.ckpt, "ckpt")?;
    let rec = SampleRecord { image: required(a.image, "image")?, depth: required(a.depth, "depth")?, pose: None };
    let out = required(a.out, "out")?;
    let model: Model<f32> = checkpoint::load(&ckpt)?;
    let frame: Frame = load_sample(&rec)?;
    let pose: Pose = match &a.pose {
        Some(p) => io::read_pose(p)?,
        None => Extrinsics::identity(),
    };
    let pred = model.forward_padded(&frame, &pose)?;
    let mask = pred.mask.binarize();
    let mut warped = grid_sample(&frame.rgb, &pred.shift, Border::Clamp)?;
    let n = warped.h * warped.w;
    for c in 0..warped.c {
        for (v, m) in warped.data[c * n..(c + 1) * n].iter_mut().zip(&mask.0.data) {
            *v *= *m;
        }
    }
    mkdir(&out)?;
    io::write_rgb_png(&pred.compose(&frame.rgb)?, &out.join("synth.png"))?;
    io::write_rgb_png(&io::shift_to_rgb(&pred.shift.0)?, &out.join("shift.png"))?;
    io::write_shift_nvss(&pred.shift.0, &out.join("shift.nvss"))?;
    io::write_gray_png(&mask.0, &out.join("mask.png"))?;
    io::write_rgb_png(&pred.inpaint, &out.join("inpaint.png"))?;
    io::write_rgb_png(&warped, &out.join("warped.png"))?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let root = required(a.root, "root")?;
    let oracle = a.oracle.unwrap_or(false);
    let synth: Box<dyn ViewSynthesizer<f32>> = match (&a.ckpt, oracle) {
        (_, true) => Box::new(OraclePassthrough),
        (Some(p), false) => Box::new(checkpoint::load::<f32>(p)?),
        (None, false) => return Err(Failure::Invalid("missing --ckpt (or pass --oracle)".into())),
    };
    let backend = parse(a.backend.as_deref(), WarpBackend::Reference)?;
    let (_, frames, poses) = load_posed(&root, &sampler(&a.pose, a.seed.unwrap_or(0)))?;
    let samples = eval_samples(&frames, &poses, &NeighborhoodFill::default(), backend)?;
    let report = evaluate(synth.as_ref(), &samples, None)?;
    print!("{}", cheapnvs::eval::EvalReport::table(std::slice::from_ref(&report)));
    if let Some(out) = a.out {
        mkdir(&out)?;
        report.write(&out.join("report.csv"), &out.join("report.txt"))?;
    }
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<(), Failure> {
    let model: Model<f32> = match &a.ckpt {
        Some(p) => checkpoint::load(p)?,
        None => Model::new(ModelConfig::default())?,
    };
    let modes = parse_modes(a.mode.as_deref().unwrap_or("both"))?;
    let res = match a.res.as_deref() {
        Some(s) => parse_resolutions(s)?,
        None => bench::RESOLUTIONS.to_vec(),
    };
    let rows = run_bench(&model, &res, &modes, a.runs.unwrap_or(MIN_RUNS), a.seed.unwrap_or(0))?;
    let (csv, table) = (bench::to_csv(&rows), bench::table(&rows));
    print!("{table}");
    if let Some(out) = a.out {
        mkdir(&out)?;
        write_text(&out.join("bench.csv"), &csv)?;
        write_text(&out.join("bench.txt"), &table)?;
    }
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<(), Failure> {
    let t = &a.train;
    let cfg = train_config(t)?;
    let base = model_config(&t.model, cfg.seed)?;
    cfg.validate(base.encoder_stages)?;
    let variants = match a.study.as_deref().unwrap_or("skips") {
        "skips" => skip_variants(&base),
        "losses" => loss_variants(&base),
        other => return Err(Failure::Invalid(format!("unknown study {other:?} (expected skips|losses)"))),
    };
    let frames = training_frames(t, cfg.crop, cfg.seed)?;
    let poses = eval_poses(&frames, &sampler(&t.pose, a.eval_seed.unwrap_or(cfg.seed)))?;
    let teacher = NeighborhoodFill::default();
    let samples = eval_samples(&frames, &poses, &teacher, cfg.warp_backend)?;
    let rows = run_ablation(&variants, &frames, &cfg, &teacher, &samples, None)?;
    let table = ablation::table(&rows);
    print!("{table}");
    if let Some(out) = &t.out {
        mkdir(out)?;
        write_text(&out.join("ablation.csv"), &ablation::to_csv(&rows))?;
        write_text(&out.join("ablation.txt"), &table)?;
    }
    Ok(())
}
