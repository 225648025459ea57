//! The view-synthesis network: one RGBD encoder and one pose encoder feed a
//! shared latent tensor, which three independent decoders turn into a
//! shift map, an occlusion mask and an inpainting image.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Extrinsics;
use crate::nn::ops::{
    elu, elu_backward, relu6, relu6_backward, relu_vec, relu_vec_backward, sigmoid, upsample2x,
    upsample2x_backward,
};
use crate::nn::{Conv2d, DepthwiseConv2d, Linear, ParamBuilder, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::compositor;
use crate::warp::{median, Border, OcclusionMask, RgbdFrame, ShiftMap};

/// Which decoders receive encoder skip connections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SkipTargets {
    pub flow: bool,
    pub mask: bool,
    pub inpaint: bool,
}

impl SkipTargets {
    pub const NONE: Self = Self { flow: false, mask: false, inpaint: false };
    pub const ALL: Self = Self { flow: true, mask: true, inpaint: true };
    pub const MASK_AND_INPAINT: Self = Self { flow: false, mask: true, inpaint: true };

    pub fn contains(&self, head: Head) -> bool {
        match head {
            Head::Flow => self.flow,
            Head::Mask => self.mask,
            Head::Inpaint => self.inpaint,
        }
    }
}

impl Default for SkipTargets {
    fn default() -> Self {
        Self::MASK_AND_INPAINT
    }
}

impl fmt::Display for SkipTargets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = Head::ALL.iter().filter(|h| self.contains(**h)).map(|h| h.name()).collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

impl FromStr for SkipTargets {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "none" | "" => return Ok(Self::NONE),
            "all" => return Ok(Self::ALL),
            _ => {}
        }
        let mut out = Self::NONE;
        for part in s.split(',') {
            match part.trim() {
                "flow" => out.flow = true,
                "mask" => out.mask = true,
                "inpaint" => out.inpaint = true,
                other => return Err(Error::Config(format!("unknown skip target {other:?}"))),
            }
        }
        Ok(out)
    }
}

/// The three decoder heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Flow,
    Mask,
    Inpaint,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Flow, Head::Mask, Head::Inpaint];

    pub fn name(self) -> &'static str {
        match self {
            Head::Flow => "flow",
            Head::Mask => "mask",
            Head::Inpaint => "inpaint",
        }
    }

    pub fn out_channels(self) -> usize {
        match self {
            Head::Flow => 2,
            Head::Mask => 1,
            Head::Inpaint => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    /// Each stage halves the resolution.
    pub encoder_stages: usize,
    /// Inverted-residual expansion factor.
    pub expansion: usize,
    pub extrinsics_hidden: usize,
    pub extrinsics_out: usize,
    pub skip_targets: SkipTargets,
    /// Bound on |shift| in pixels.
    pub flow_scale: f64,
    /// Multiplier on the pose features `[R − I | t / median depth]`.
    pub pose_input_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            encoder_stages: 4,
            expansion: 4,
            extrinsics_hidden: 64,
            extrinsics_out: 256,
            skip_targets: SkipTargets::default(),
            flow_scale: 32.0,
            pose_input_scale: 20.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_stages == 0 {
            return Err(Error::Config("encoder_stages must be at least 1".into()));
        }
        if self.base_channels == 0 || self.expansion == 0 || self.extrinsics_hidden == 0 || self.extrinsics_out == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.flow_scale > 0.0) || !self.pose_input_scale.is_finite() {
            return Err(Error::Config("flow_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.encoder_stages).map(|i| self.base_channels << i).collect()
    }

    /// Output width of decoder level `j` (`0` at latent resolution, `stages` at full resolution).
    pub fn decoder_channels(&self) -> Vec<usize> {
        let enc = self.encoder_channels();
        let s = self.encoder_stages;
        (0..=s).map(|j| if j < s { enc[s - 1 - j] } else { self.base_channels }).collect()
    }

    /// Spatial size multiple the input must satisfy.
    pub fn size_multiple(&self) -> usize {
        1 << self.encoder_stages
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("base_channels", self.base_channels.to_string()),
            ("encoder_stages", self.encoder_stages.to_string()),
            ("expansion", self.expansion.to_string()),
            ("extrinsics_hidden", self.extrinsics_hidden.to_string()),
            ("extrinsics_out", self.extrinsics_out.to_string()),
            ("skip_targets", self.skip_targets.to_string()),
            ("flow_scale", self.flow_scale.to_string()),
            ("pose_input_scale", self.pose_input_scale.to_string()),
            ("seed", self.seed.to_string()),
        ] {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map: BTreeMap<&str, &str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.split_once('=').map(|(k, v)| (k.trim(), v.trim())).ok_or_else(|| Error::Config(format!("bad config line {l:?}"))))
            .collect::<Result<_>>()?;
        let mut cfg = Self::default();
        for (k, v) in map {
            let bad = |_| Error::Config(format!("bad value for {k}: {v:?}"));
            match k {
                "base_channels" => cfg.base_channels = v.parse().map_err(bad)?,
                "encoder_stages" => cfg.encoder_stages = v.parse().map_err(bad)?,
                "expansion" => cfg.expansion = v.parse().map_err(bad)?,
                "extrinsics_hidden" => cfg.extrinsics_hidden = v.parse().map_err(bad)?,
                "extrinsics_out" => cfg.extrinsics_out = v.parse().map_err(bad)?,
                "skip_targets" => cfg.skip_targets = v.parse()?,
                "flow_scale" => cfg.flow_scale = v.parse().map_err(|_| Error::Config(format!("bad value for {k}: {v:?}")))?,
                "pose_input_scale" => {
                    cfg.pose_input_scale = v.parse().map_err(|_| Error::Config(format!("bad value for {k}: {v:?}")))?
                }
                "seed" => cfg.seed = v.parse().map_err(bad)?,
                other => return Err(Error::Config(format!("unknown model key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// encoder

#[derive(Clone, Debug)]
struct InvertedResidual {
    expand: Conv2d,
    depthwise: DepthwiseConv2d,
    project: Conv2d,
    residual: bool,
}

struct IrCache<T> {
    x: Tensor<T>,
    e_pre: Tensor<T>,
    e_act: Tensor<T>,
    d_pre: Tensor<T>,
    d_act: Tensor<T>,
}

impl InvertedResidual {
    fn new<T: Scalar, R: rand::Rng>(
        b: &mut ParamBuilder<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        expansion: usize,
    ) -> Self {
        b.push_scope(name);
        let hidden = cin * expansion;
        let expand = Conv2d::new(b, "expand", cin, hidden, 1, 1, 1.0, false);
        let depthwise = DepthwiseConv2d::new(b, "depthwise", hidden, 3, stride);
        // residual branch starts small so the block begins near identity
        let gain = if stride == 1 && cin == cout { 0.1 } else { 1.0 };
        let project = Conv2d::new(b, "project", hidden, cout, 1, 1, gain, false);
        b.pop_scope();
        Self { expand, depthwise, project, residual: stride == 1 && cin == cout }
    }

    fn forward<T: Scalar>(&self, p: &[T], x: &Tensor<T>) -> (Tensor<T>, IrCache<T>) {
        let e_pre = self.expand.forward(p, x);
        let e_act = relu6(&e_pre);
        let d_pre = self.depthwise.forward(p, &e_act);
        let d_act = relu6(&d_pre);
        let mut out = self.project.forward(p, &d_act);
        if self.residual {
            out.add_assign(x);
        }
        (out, IrCache { x: x.clone(), e_pre, e_act, d_pre, d_act })
    }

    fn backward<T: Scalar>(&self, p: &[T], c: &IrCache<T>, dout: &Tensor<T>, g: &mut [T]) -> Tensor<T> {
        let dd_act = self.project.backward(p, &c.d_act, dout, g);
        let dd_pre = relu6_backward(&c.d_pre, &dd_act);
        let de_act = self.depthwise.backward(p, &c.e_act, &dd_pre, g);
        let de_pre = relu6_backward(&c.e_pre, &de_act);
        let mut dx = self.expand.backward(p, &c.x, &de_pre, g);
        if self.residual {
            dx.add_assign(dout);
        }
        dx
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.depthwise.out_size(h, w);
        self.expand.macs(h, w) + self.depthwise.macs(h, w) + self.project.macs(oh, ow)
    }
}

#[derive(Clone, Debug)]
enum Downsample {
    Stem(Conv2d),
    Block(InvertedResidual),
}

#[derive(Clone, Debug)]
struct EncoderStage {
    down: Downsample,
    refine: InvertedResidual,
}

enum DownCache<T> {
    Stem { x: Tensor<T>, pre: Tensor<T> },
    Block(IrCache<T>),
}

struct StageCache<T> {
    down: DownCache<T>,
    refine: IrCache<T>,
}

/// Stack of inverted-residual stages (a reduced MobileNetV2-style backbone).
#[derive(Clone, Debug)]
pub struct RgbdEncoder {
    stages: Vec<EncoderStage>,
}

impl RgbdEncoder {
    fn new<T: Scalar, R: rand::Rng>(b: &mut ParamBuilder<'_, T, R>, cfg: &ModelConfig) -> Self {
        b.push_scope("rgbd");
        let chans = cfg.encoder_channels();
        let mut stages = Vec::new();
        for (i, &c) in chans.iter().enumerate() {
            b.push_scope(&format!("stage{i}"));
            let down = if i == 0 {
                Downsample::Stem(Conv2d::new(b, "stem", INPUT_CHANNELS, c, 3, 2, 1.0, false))
            } else {
                Downsample::Block(InvertedResidual::new(b, "down", chans[i - 1], c, 2, cfg.expansion))
            };
            let refine = InvertedResidual::new(b, "refine", c, c, 1, cfg.expansion);
            b.pop_scope();
            stages.push(EncoderStage { down, refine });
        }
        b.pop_scope();
        Self { stages }
    }

    fn forward<T: Scalar>(&self, p: &[T], x: &Tensor<T>) -> (Vec<Tensor<T>>, Vec<StageCache<T>>) {
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut cur = x.clone();
        for st in &self.stages {
            let (y, down) = match &st.down {
                Downsample::Stem(conv) => {
                    let pre = conv.forward(p, &cur);
                    (relu6(&pre), DownCache::Stem { x: cur, pre })
                }
                Downsample::Block(ir) => {
                    let (y, c) = ir.forward(p, &cur);
                    (y, DownCache::Block(c))
                }
            };
            let (y, refine) = st.refine.forward(p, &y);
            outs.push(y.clone());
            caches.push(StageCache { down, refine });
            cur = y;
        }
        (outs, caches)
    }

    /// `d_outs[i]` is the total gradient reaching stage `i`'s output from outside the encoder.
    fn backward<T: Scalar>(&self, p: &[T], caches: &[StageCache<T>], mut d_outs: Vec<Option<Tensor<T>>>, g: &mut [T]) {
        let mut carry: Option<Tensor<T>> = None;
        for (i, st) in self.stages.iter().enumerate().rev() {
            let mut d = match (carry.take(), d_outs[i].take()) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    a
                }
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => continue,
            };
            d = st.refine.backward(p, &caches[i].refine, &d, g);
            let dx = match (&st.down, &caches[i].down) {
                (Downsample::Stem(conv), DownCache::Stem { x, pre }) => {
                    let dpre = relu6_backward(pre, &d);
                    conv.backward(p, x, &dpre, g)
                }
                (Downsample::Block(ir), DownCache::Block(c)) => ir.backward(p, c, &d, g),
                _ => unreachable!("cache matches layer kind"),
            };
            if i > 0 {
                carry = Some(dx);
            }
        }
    }

    fn macs(&self, mut h: usize, mut w: usize) -> u64 {
        let mut total = 0;
        for st in &self.stages {
            total += match &st.down {
                Downsample::Stem(c) => c.macs(h, w),
                Downsample::Block(ir) => ir.macs(h, w),
            };
            h /= 2;
            w /= 2;
            total += st.refine.macs(h, w);
        }
        total
    }
}

/// Two-layer MLP from the 12 pose numbers to the pose embedding.
#[derive(Clone, Debug)]
pub struct PoseEncoder {
    l1: Linear,
    l2: Linear,
}

impl PoseEncoder {
    fn new<T: Scalar, R: rand::Rng>(b: &mut ParamBuilder<'_, T, R>, cfg: &ModelConfig) -> Self {
        b.push_scope("pose");
        let l1 = Linear::new(b, "fc1", 12, cfg.extrinsics_hidden, 1.0);
        let l2 = Linear::new(b, "fc2", cfg.extrinsics_hidden, cfg.extrinsics_out, 1.0);
        b.pop_scope();
        Self { l1, l2 }
    }
}

// ---------------------------------------------------------------------------
// decoders

#[derive(Clone, Debug)]
struct DecoderLevel {
    upsample: bool,
    /// Encoder stage whose output is concatenated after upsampling.
    skip: Option<usize>,
    skip_channels: usize,
    conv: Conv2d,
}

/// Upsample → (skip concat) → 3×3 conv → ELU per level, then a 3×3 head.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub head_kind: Head,
    levels: Vec<DecoderLevel>,
    head: Conv2d,
    flow_scale: f64,
}

struct LevelCache<T> {
    in_hw: (usize, usize),
    conv_in: Tensor<T>,
    act: Tensor<T>,
}

struct DecoderCache<T> {
    levels: Vec<LevelCache<T>>,
    head_in: Tensor<T>,
    raw: Tensor<T>,
}

impl Decoder {
    fn new<T: Scalar, R: rand::Rng>(b: &mut ParamBuilder<'_, T, R>, cfg: &ModelConfig, head_kind: Head, latent_channels: usize) -> Self {
        b.push_scope(head_kind.name());
        let s = cfg.encoder_stages;
        let enc = cfg.encoder_channels();
        let dec = cfg.decoder_channels();
        let use_skips = cfg.skip_targets.contains(head_kind);
        let mut levels = Vec::with_capacity(s + 1);
        let mut cin = latent_channels;
        for (j, &cout) in dec.iter().enumerate() {
            // level j sits at 1/2^(s-j); encoder stage i outputs 1/2^(i+1)
            let skip = (use_skips && j >= 1 && j < s).then(|| s - 1 - j);
            let skip_channels = skip.map_or(0, |i| enc[i]);
            let conv = Conv2d::new(b, &format!("level{j}"), cin + skip_channels, cout, 3, 1, 1.0, false);
            levels.push(DecoderLevel { upsample: j > 0, skip, skip_channels, conv });
            cin = cout;
        }
        // flow starts as the identity warp, mask as "all visible"
        let head = Conv2d::new(b, "head", cin, head_kind.out_channels(), 3, 1, 1.0, head_kind != Head::Inpaint);
        b.pop_scope();
        Self { head_kind, levels, head, flow_scale: cfg.flow_scale }
    }

    /// Encoder stages feeding this decoder through skip connections.
    pub fn skip_stages(&self) -> Vec<usize> {
        self.levels.iter().filter_map(|l| l.skip).collect()
    }

    /// Input channel count of each level's convolution.
    pub fn level_input_channels(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.conv.cin).collect()
    }

    fn forward<T: Scalar>(&self, p: &[T], latent: &LatentF<T>) -> (Tensor<T>, DecoderCache<T>) {
        let mut cur = latent.features.clone();
        let mut caches = Vec::with_capacity(self.levels.len());
        for lvl in &self.levels {
            let in_hw = (cur.h, cur.w);
            let up = if lvl.upsample { upsample2x(&cur) } else { cur };
            let conv_in = match lvl.skip {
                Some(i) => Tensor::concat_channels(&[&up, &latent.skips[i]]).expect("skip resolution matches level"),
                None => up,
            };
            let act = elu(&lvl.conv.forward(p, &conv_in));
            cur = act.clone();
            caches.push(LevelCache { in_hw, conv_in, act });
        }
        let raw = self.head.forward(p, &cur);
        (raw.clone(), DecoderCache { levels: caches, head_in: cur, raw })
    }

    /// Maps raw head output to the head's value range.
    fn activate<T: Scalar>(&self, raw: &Tensor<T>) -> Tensor<T> {
        match self.head_kind {
            Head::Flow => {
                let s = T::from_f64c(self.flow_scale);
                raw.map(|v| v.tanh() * s)
            }
            Head::Mask | Head::Inpaint => raw.map(sigmoid),
        }
    }

    /// Chain rule through [`Decoder::activate`]. For the mask head the
    /// incoming gradient is already w.r.t. the logits.
    fn activation_backward<T: Scalar>(&self, raw: &Tensor<T>, d_out: &Tensor<T>) -> Tensor<T> {
        let mut d = d_out.clone();
        match self.head_kind {
            Head::Flow => {
                let s = T::from_f64c(self.flow_scale);
                for (g, &r) in d.data.iter_mut().zip(&raw.data) {
                    let t = r.tanh();
                    *g = *g * s * (T::one() - t * t);
                }
            }
            Head::Mask => {}
            Head::Inpaint => {
                for (g, &r) in d.data.iter_mut().zip(&raw.data) {
                    let sg = sigmoid(r);
                    *g = *g * sg * (T::one() - sg);
                }
            }
        }
        d
    }

    /// Returns the gradient w.r.t. the latent tensor and per-stage skip gradients.
    fn backward<T: Scalar>(
        &self,
        p: &[T],
        cache: &DecoderCache<T>,
        d_raw: &Tensor<T>,
        n_stages: usize,
        g: &mut [T],
    ) -> (Tensor<T>, Vec<Option<Tensor<T>>>) {
        let mut d_skips: Vec<Option<Tensor<T>>> = (0..n_stages).map(|_| None).collect();
        let mut d = self.head.backward(p, &cache.head_in, d_raw, g);
        for (lvl, lc) in self.levels.iter().zip(&cache.levels).rev() {
            let d_pre = elu_backward(&lc.act, &d);
            let d_in = lvl.conv.backward(p, &lc.conv_in, &d_pre, g);
            let d_up = match lvl.skip {
                Some(i) => {
                    let mut parts = d_in.split_channels(&[d_in.c - lvl.skip_channels, lvl.skip_channels]);
                    d_skips[i] = parts.pop();
                    parts.pop().unwrap()
                }
                None => d_in,
            };
            d = if lvl.upsample { upsample2x_backward(&d_up, lc.in_hw.0, lc.in_hw.1) } else { d_up };
        }
        (d, d_skips)
    }

    fn macs(&self, latent_h: usize, latent_w: usize) -> u64 {
        let (mut h, mut w) = (latent_h, latent_w);
        let mut total = 0;
        for lvl in &self.levels {
            if lvl.upsample {
                h *= 2;
                w *= 2;
            }
            total += lvl.conv.macs(h, w);
        }
        total + self.head.macs(h, w)
    }
}

// ---------------------------------------------------------------------------
// model

/// Encoder output: deepest feature map plus every stage output for skips.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    pub features: Tensor<T>,
    pub skips: Vec<Tensor<T>>,
}

/// Shared latent: RGBD features with the pose embedding broadcast and
/// appended along channels.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentF<T> {
    pub features: Tensor<T>,
    pub skips: Vec<Tensor<T>>,
    pub rgbd_channels: usize,
}

/// The three decoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub shift: ShiftMap<T>,
    pub mask: OcclusionMask<T>,
    pub mask_logits: Tensor<T>,
    pub inpaint: Tensor<T>,
}

/// Gradients of a loss w.r.t. the decoder outputs (mask side: the logits).
#[derive(Clone, Debug)]
pub struct PredictionGrads<T> {
    pub shift: Tensor<T>,
    pub mask_logits: Tensor<T>,
    pub inpaint: Tensor<T>,
}

/// Activations retained by [`Model::forward_train`] for the backward pass.
pub struct ForwardCache<T> {
    stage_caches: Vec<StageCache<T>>,
    pose_in: Vec<T>,
    pose_hidden_pre: Vec<T>,
    pose_hidden: Vec<T>,
    latent_hw: (usize, usize),
    rgbd_channels: usize,
    decoders: [DecoderCache<T>; 3],
}

/// Per-component multiply-accumulate counts for one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCount {
    pub rgbd_encoder: u64,
    pub pose_encoder: u64,
    pub flow: u64,
    pub mask: u64,
    pub inpaint: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.rgbd_encoder + self.pose_encoder + self.flow + self.mask + self.inpaint
    }
}

pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub encoder: RgbdEncoder,
    pub pose_encoder: PoseEncoder,
    pub flow: Decoder,
    pub mask: Decoder,
    pub inpaint: Decoder,
    encoder_calls: AtomicUsize,
    pose_calls: AtomicUsize,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            encoder: self.encoder.clone(),
            pose_encoder: self.pose_encoder.clone(),
            flow: self.flow.clone(),
            mask: self.mask.clone(),
            inpaint: self.inpaint.clone(),
            encoder_calls: AtomicUsize::new(0),
            pose_calls: AtomicUsize::new(0),
        }
    }
}

impl<T: Scalar> fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model").field("config", &self.config).field("parameters", &self.params.len()).finish()
    }
}

/// Initial mask logit everywhere; narrow baselines leave most pixels visible.
pub const MASK_PRIOR_LOGIT: f64 = 3.0;

/// Channels of [`prepare_input`].
pub const INPUT_CHANNELS: usize = 4;

/// Network input: RGB plus `log1p(d / median(d))`.
pub fn prepare_input<T: Scalar>(frame: &RgbdFrame<T>) -> Tensor<T> {
    let med = median(&frame.depth.data);
    let depth = frame.depth.map(|d| (d / med).ln_1p());
    Tensor::concat_channels(&[&frame.rgb, &depth]).expect("frame shapes agree")
}

/// Edge-pads `frame` symmetrically to the next multiple of `multiple` so the
/// principal point stays centred. Returns the padded frame and the
/// `(top, left)` offset of the original inside it.
pub fn pad_to_multiple<T: Scalar>(frame: &RgbdFrame<T>, multiple: usize) -> (RgbdFrame<T>, (usize, usize)) {
    let (h, w) = (frame.height(), frame.width());
    let (ph, pw) = (h.div_ceil(multiple) * multiple - h, w.div_ceil(multiple) * multiple - w);
    if ph == 0 && pw == 0 {
        return (frame.clone(), (0, 0));
    }
    let (top, left) = (ph / 2, pw / 2);
    let pad = |t: &Tensor<T>| t.pad_edge(top, ph - top, left, pw - left);
    (RgbdFrame { rgb: pad(&frame.rgb), depth: pad(&frame.depth) }, (top, left))
}

impl<T: Scalar> Prediction<T> {
    /// Target view as produced at inference: the source warped by the shift
    /// where the binarised mask is set, the inpainting elsewhere.
    pub fn compose(&self, source: &Tensor<T>) -> Result<Tensor<T>> {
        compositor::synthesize(source, &self.shift, &self.mask.binarize(), &self.inpaint, Border::Clamp)
    }

    /// Window `[y0, y0+h) × [x0, x0+w)` of every output. Shifts are relative
    /// offsets and stay valid.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Self {
            shift: ShiftMap(self.shift.0.crop(y0, x0, h, w)),
            mask: OcclusionMask(self.mask.0.crop(y0, x0, h, w)),
            mask_logits: self.mask_logits.crop(y0, x0, h, w),
            inpaint: self.inpaint.crop(y0, x0, h, w),
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialised model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = ParamBuilder::<T, _>::new(&mut rng);
        let encoder = RgbdEncoder::new(&mut b, &config);
        let pose_encoder = PoseEncoder::new(&mut b, &config);
        let latent = config.encoder_channels()[config.encoder_stages - 1] + config.extrinsics_out;
        let flow = Decoder::new(&mut b, &config, Head::Flow, latent);
        let mask = Decoder::new(&mut b, &config, Head::Mask, latent);
        let inpaint = Decoder::new(&mut b, &config, Head::Inpaint, latent);
        let mut params = b.finish();
        params.fill_prefix("mask.head.bias", T::from_f64c(MASK_PRIOR_LOGIT));
        Ok(Self {
            config,
            params,
            encoder,
            pose_encoder,
            flow,
            mask,
            inpaint,
            encoder_calls: AtomicUsize::new(0),
            pose_calls: AtomicUsize::new(0),
        })
    }

    pub fn decoder(&self, head: Head) -> &Decoder {
        match head {
            Head::Flow => &self.flow,
            Head::Mask => &self.mask,
            Head::Inpaint => &self.inpaint,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// Number of RGBD encoder passes since construction or the last reset.
    pub fn encoder_calls(&self) -> usize {
        self.encoder_calls.load(Ordering::SeqCst)
    }

    pub fn pose_encoder_calls(&self) -> usize {
        self.pose_calls.load(Ordering::SeqCst)
    }

    pub fn reset_counters(&self) {
        self.encoder_calls.store(0, Ordering::SeqCst);
        self.pose_calls.store(0, Ordering::SeqCst);
    }

    pub fn check_input(&self, frame: &RgbdFrame<T>) -> Result<()> {
        let m = self.config.size_multiple();
        if frame.height() % m != 0 || frame.width() % m != 0 || frame.height() == 0 || frame.width() == 0 {
            return Err(Error::Shape(format!(
                "{}x{} input is not divisible by {m} ({} encoder stages)",
                frame.height(),
                frame.width(),
                self.config.encoder_stages
            )));
        }
        if frame.rgb.c != 3 || frame.depth.c != 1 || !frame.rgb.same_spatial(&frame.depth) {
            return Err(Error::ResolutionMismatch { rgb: (frame.rgb.h, frame.rgb.w), depth: (frame.depth.h, frame.depth.w) });
        }
        Ok(())
    }

    pub fn encode_rgbd(&self, frame: &RgbdFrame<T>) -> Result<EncoderOutput<T>> {
        self.check_input(frame)?;
        self.encoder_calls.fetch_add(1, Ordering::SeqCst);
        let (skips, _) = self.encoder.forward(&self.params.data, &prepare_input(frame));
        Ok(EncoderOutput { features: skips.last().unwrap().clone(), skips })
    }

    /// The 12 network inputs for a pose: `[R − I | t / depth_scale]`, scaled.
    pub fn pose_features(&self, pose: &Extrinsics<T>, depth_scale: T) -> Vec<T> {
        let s = T::from_f64c(self.config.pose_input_scale);
        let mut v = pose.to_flat();
        for (i, x) in v.iter_mut().enumerate() {
            let (row, col) = (i / 4, i % 4);
            if col == 3 {
                *x = *x / depth_scale;
            } else if row == col {
                *x = *x - T::one();
            }
        }
        v.iter().map(|&x| x * s).collect()
    }

    /// Pose embedding of length `extrinsics_out`. `depth_scale` is the
    /// median scene depth that translations are expressed relative to.
    pub fn encode_extrinsics(&self, pose: &Extrinsics<T>, depth_scale: T) -> Vec<T> {
        self.pose_calls.fetch_add(1, Ordering::SeqCst);
        let p = &self.params.data;
        let h = relu_vec(&self.pose_encoder.l1.forward(p, &self.pose_features(pose, depth_scale)));
        self.pose_encoder.l2.forward(p, &h)
    }

    pub fn fuse_latent(&self, rgbd: &EncoderOutput<T>, pose_embedding: &[T]) -> LatentF<T> {
        fuse(rgbd, pose_embedding)
    }

    pub fn decode(&self, head: Head, latent: &LatentF<T>) -> Tensor<T> {
        let d = self.decoder(head);
        let (raw, _) = d.forward(&self.params.data, latent);
        if head == Head::Mask {
            raw
        } else {
            d.activate(&raw)
        }
    }

    pub fn decode_flow(&self, latent: &LatentF<T>) -> ShiftMap<T> {
        ShiftMap(self.decode(Head::Flow, latent))
    }

    /// Returns `(mask, logits)`.
    pub fn decode_mask(&self, latent: &LatentF<T>) -> (OcclusionMask<T>, Tensor<T>) {
        let logits = self.decode(Head::Mask, latent);
        (OcclusionMask(logits.map(sigmoid)), logits)
    }

    pub fn decode_inpaint(&self, latent: &LatentF<T>) -> Tensor<T> {
        self.decode(Head::Inpaint, latent)
    }

    /// Shared latent for `frame` seen from `pose`: one pass of each encoder.
    pub fn latent(&self, frame: &RgbdFrame<T>, pose: &Extrinsics<T>) -> Result<LatentF<T>> {
        let rgbd = self.encode_rgbd(frame)?;
        let emb = self.encode_extrinsics(pose, frame.median_depth());
        Ok(self.fuse_latent(&rgbd, &emb))
    }

    fn assemble(&self, shift: Tensor<T>, logits: Tensor<T>, inpaint: Tensor<T>) -> Prediction<T> {
        Prediction { shift: ShiftMap(shift), mask: OcclusionMask(logits.map(sigmoid)), mask_logits: logits, inpaint }
    }

    /// Decoders run one after another on the shared latent.
    pub fn forward(&self, frame: &RgbdFrame<T>, pose: &Extrinsics<T>) -> Result<Prediction<T>> {
        let latent = self.latent(frame, pose)?;
        Ok(self.decode_all(&latent))
    }

    pub fn decode_all(&self, latent: &LatentF<T>) -> Prediction<T> {
        self.assemble(self.decode(Head::Flow, latent), self.decode(Head::Mask, latent), self.decode(Head::Inpaint, latent))
    }

    /// Decoders run concurrently on the shared, read-only latent.
    pub fn decode_all_parallel(&self, latent: &LatentF<T>) -> Prediction<T> {
        let (shift, (logits, inpaint)) = rayon::join(
            || self.decode(Head::Flow, latent),
            || rayon::join(|| self.decode(Head::Mask, latent), || self.decode(Head::Inpaint, latent)),
        );
        self.assemble(shift, logits, inpaint)
    }

    pub fn forward_parallel(&self, frame: &RgbdFrame<T>, pose: &Extrinsics<T>) -> Result<Prediction<T>> {
        let latent = self.latent(frame, pose)?;
        Ok(self.decode_all_parallel(&latent))
    }

    /// [`Model::forward`] for frames of any size: edge-pads to the size
    /// multiple and crops the outputs back.
    pub fn forward_padded(&self, frame: &RgbdFrame<T>, pose: &Extrinsics<T>) -> Result<Prediction<T>> {
        frame.validate()?;
        let (padded, (y0, x0)) = pad_to_multiple(frame, self.config.size_multiple());
        Ok(self.forward(&padded, pose)?.crop(y0, x0, frame.height(), frame.width()))
    }

    /// Forward pass that keeps what [`Model::backward`] needs.
    pub fn forward_train(&self, frame: &RgbdFrame<T>, pose: &Extrinsics<T>) -> Result<(Prediction<T>, ForwardCache<T>)> {
        self.check_input(frame)?;
        self.encoder_calls.fetch_add(1, Ordering::SeqCst);
        self.pose_calls.fetch_add(1, Ordering::SeqCst);
        let p = &self.params.data;
        let (skips, stage_caches) = self.encoder.forward(p, &prepare_input(frame));
        let pose_in = self.pose_features(pose, frame.median_depth());
        let pose_hidden_pre = self.pose_encoder.l1.forward(p, &pose_in);
        let pose_hidden = relu_vec(&pose_hidden_pre);
        let emb = self.pose_encoder.l2.forward(p, &pose_hidden);
        let rgbd = EncoderOutput { features: skips.last().unwrap().clone(), skips };
        let latent = fuse(&rgbd, &emb);
        let (flow_raw, fc) = self.flow.forward(p, &latent);
        let (logits, mc) = self.mask.forward(p, &latent);
        let (inp_raw, ic) = self.inpaint.forward(p, &latent);
        let pred = self.assemble(self.flow.activate(&flow_raw), logits, self.inpaint.activate(&inp_raw));
        let cache = ForwardCache {
            stage_caches,
            pose_in,
            pose_hidden_pre,
            pose_hidden,
            latent_hw: (latent.features.h, latent.features.w),
            rgbd_channels: latent.rgbd_channels,
            decoders: [fc, mc, ic],
        };
        Ok((pred, cache))
    }

    /// Accumulates parameter gradients for the given output gradients into `grads`.
    pub fn backward(&self, cache: &ForwardCache<T>, d: &PredictionGrads<T>, grads: &mut [T]) {
        assert_eq!(grads.len(), self.params.len());
        let p = &self.params.data;
        let s = self.config.encoder_stages;
        let (h, w) = cache.latent_hw;
        let latent_c = cache.rgbd_channels + self.config.extrinsics_out;
        let mut d_latent = Tensor::zeros(latent_c, h, w);
        let mut d_skips: Vec<Option<Tensor<T>>> = (0..s).map(|_| None).collect();
        let heads = [(&self.flow, &d.shift), (&self.mask, &d.mask_logits), (&self.inpaint, &d.inpaint)];
        for (k, (dec, d_out)) in heads.into_iter().enumerate() {
            let c = &cache.decoders[k];
            let d_raw = dec.activation_backward(&c.raw, d_out);
            let (dl, ds) = dec.backward(p, c, &d_raw, s, grads);
            d_latent.add_assign(&dl);
            for (acc, extra) in d_skips.iter_mut().zip(ds) {
                if let Some(e) = extra {
                    match acc {
                        Some(a) => a.add_assign(&e),
                        None => *acc = Some(e),
                    }
                }
            }
        }
        let mut parts = d_latent.split_channels(&[cache.rgbd_channels, self.config.extrinsics_out]);
        let d_emb_map = parts.pop().unwrap();
        let d_features = parts.pop().unwrap();
        let d_emb: Vec<T> = (0..d_emb_map.c).map(|c| d_emb_map.plane(c).iter().copied().sum()).collect();
        let d_hidden = self.pose_encoder.l2.backward(p, &cache.pose_hidden, &d_emb, grads);
        let d_hidden_pre = relu_vec_backward(&cache.pose_hidden_pre, &d_hidden);
        self.pose_encoder.l1.backward(p, &cache.pose_in, &d_hidden_pre, grads);

        match &mut d_skips[s - 1] {
            Some(a) => a.add_assign(&d_features),
            slot => *slot = Some(d_features),
        }
        self.encoder.backward(p, &cache.stage_caches, d_skips, grads);
    }

    /// Multiply-accumulate count for an `h×w` input.
    pub fn macs(&self, h: usize, w: usize) -> MacCount {
        let m = self.config.size_multiple();
        let (lh, lw) = (h / m, w / m);
        MacCount {
            rgbd_encoder: self.encoder.macs(h, w),
            pose_encoder: self.pose_encoder.l1.macs() + self.pose_encoder.l2.macs(),
            flow: self.flow.macs(lh, lw),
            mask: self.mask.macs(lh, lw),
            inpaint: self.inpaint.macs(lh, lw),
        }
    }
}

fn fuse<T: Scalar>(rgbd: &EncoderOutput<T>, emb: &[T]) -> LatentF<T> {
    let f = &rgbd.features;
    let broadcast = Tensor::from_fn(emb.len(), f.h, f.w, |c, _, _| emb[c]);
    LatentF {
        features: Tensor::concat_channels(&[f, &broadcast]).expect("same spatial size"),
        skips: rgbd.skips.clone(),
        rgbd_channels: f.c,
    }
}
