//! Command-line arguments. Every subcommand can also read its options from
//! the matching `[section]` of a TOML file given with `--config`; flags on
//! the command line take precedence over the file.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::Failure;

#[derive(Parser, Debug)]
#[command(name = "cheapnvs", version, about = "Narrow-baseline single-view novel view synthesis")]
pub struct Cli {
    /// TOML file with one section per subcommand (e.g. `[train]`).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Warp every frame of a dataset and write flow, mask, warped and target images.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a per-epoch CSV log.
    Train(TrainArgs),
    /// Synthesize one novel view and write the intermediate outputs.
    Infer(InferArgs),
    /// Evaluate a checkpoint (or the oracle) on a dataset.
    Eval(EvalArgs),
    /// Measure pipeline latency and structure.
    Bench(BenchArgs),
    /// Train and evaluate the skip-connection or loss variants side by side.
    Ablate(AblateArgs),
}

impl Command {
    pub fn section(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Infer(_) => "infer",
            Command::Eval(_) => "eval",
            Command::Bench(_) => "bench",
            Command::Ablate(_) => "ablate",
        }
    }
}

/// Fills every unset field of `self` from `file`.
pub trait Merge {
    fn merge(&mut self, file: Self);
}

macro_rules! merge_fields {
    ($ty:ty { $($field:ident),* $(,)? } $(flatten { $($sub:ident),* })?) => {
        impl Merge for $ty {
            fn merge(&mut self, file: Self) {
                $( if self.$field.is_none() { self.$field = file.$field; } )*
                $( $( self.$sub.merge(file.$sub); )* )?
            }
        }
    };
}

#[derive(Args, Deserialize, Debug, Default, Clone)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct PoseArgs {
    /// Largest translation per axis as a fraction of the median depth.
    #[arg(long)]
    pub max_translation: Option<f64>,
    /// Largest Euler angle in degrees.
    #[arg(long)]
    pub max_rotation_deg: Option<f64>,
}
merge_fields!(PoseArgs { max_translation, max_rotation_deg });

#[derive(Args, Deserialize, Debug, Default, Clone)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct GenDataArgs {
    /// Dataset root with rgb/, depth/ and optional pose/.
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seeds the poses of frames without a pose file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// reference | native
    #[arg(long)]
    pub backend: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub pose: PoseArgs,
}
merge_fields!(GenDataArgs { root, out, seed, backend } flatten { pose });

#[derive(Args, Deserialize, Debug, Default, Clone)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ModelArgs {
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub encoder_stages: Option<usize>,
    #[arg(long)]
    pub expansion: Option<usize>,
    #[arg(long)]
    pub extrinsics_hidden: Option<usize>,
    #[arg(long)]
    pub extrinsics_out: Option<usize>,
    /// Comma-separated subset of flow,mask,inpaint, or `none`.
    #[arg(long)]
    pub skip_targets: Option<String>,
    /// Largest predicted shift in pixels.
    #[arg(long)]
    pub flow_scale: Option<f64>,
    /// Seeds the weight initialisation (defaults to the training seed).
    #[arg(long)]
    pub init_seed: Option<u64>,
}
merge_fields!(ModelArgs { base_channels, encoder_stages, expansion, extrinsics_hidden, extrinsics_out, skip_targets, flow_scale, init_seed });

#[derive(Args, Deserialize, Debug, Default, Clone)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainArgs {
    /// Dataset root with rgb/ and depth/.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of generated scenes added to (or used instead of) the dataset.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Side of the generated scenes.
    #[arg(long)]
    pub synthetic_size: Option<usize>,
    /// Output directory for the checkpoint and the log.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub hflip: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// reference | native
    #[arg(long)]
    pub backend: Option<String>,
    /// First epoch that trains the inpainting decoder.
    #[arg(long)]
    pub activation_epoch: Option<usize>,
    /// holes | full
    #[arg(long)]
    pub inpaint_region: Option<String>,
    /// Keep one pose per frame instead of drawing a new one every epoch.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub fixed_poses: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    pub pose: PoseArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}
merge_fields!(TrainArgs {
    data, synthetic, synthetic_size, out, epochs, lr, batch_size, crop, hflip, seed, backend, activation_epoch, inpaint_region, fixed_poses
} flatten { pose, model });

#[derive(Args, Deserialize, Debug, Default, Clone)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub depth: Option<PathBuf>,
    /// Text file with the 12 numbers of `[R | t]`, row-major.
    #[arg(long)]
    pub pose: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
merge_fields!(InferArgs { ckpt, image, depth, pose, out });

#[derive(Args, Deserialize, Debug, Default, Clone)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Seeds the poses of frames without a pose file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Score the oracle labels themselves (a self-test of the metrics).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub oracle: Option<bool>,
    /// reference | native
    #[arg(long)]
    pub backend: Option<String>,
    /// Directory for report.csv and report.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub pose: PoseArgs,
}
merge_fields!(EvalArgs { ckpt, root, seed, oracle, backend, out } flatten { pose });

#[derive(Args, Deserialize, Debug, Default, Clone)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct BenchArgs {
    /// Checkpoint to time; a freshly initialised default model otherwise.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// sequential | parallel | both
    #[arg(long)]
    pub mode: Option<String>,
    /// Comma-separated sizes, `N` or `HxW`.
    #[arg(long)]
    pub res: Option<String>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for bench.csv and bench.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
merge_fields!(BenchArgs { ckpt, mode, res, runs, seed, out });

#[derive(Args, Deserialize, Debug, Default, Clone)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct AblateArgs {
    /// skips | losses
    #[arg(long)]
    pub study: Option<String>,
    /// Seeds the frozen evaluation poses (defaults to the training seed).
    #[arg(long)]
    pub eval_seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainArgs,
}
merge_fields!(AblateArgs { study, eval_seed } flatten { train });

/// Reads section `name` of the TOML file at `path`; a missing section is empty.
pub fn load_section<A: DeserializeOwned + Default>(path: &Path, name: &str) -> Result<A, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table = text.parse().map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    match table.remove(name) {
        None => Ok(A::default()),
        Some(v) => v.try_into().map_err(|e| Failure::Invalid(format!("{} [{name}]: {e}", path.display()))),
    }
}
