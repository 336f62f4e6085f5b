//! Backbone CNN over the pose-augmented image, stripe partition into 6×4
//! regions, keypoint grouping into part maps and the shared pose CNN.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dSpec, Var};
use crate::error::{Error, Result};
use crate::params::{glorot_bound, he_bound, Ctx, ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const RGB_CHANNELS: usize = 3;
pub const KEYPOINTS: usize = 14;
pub const PARTS: usize = 6;
pub const STRIPES: usize = 6;
pub const COLUMNS: usize = 4;
pub const REGIONS: usize = STRIPES * COLUMNS;
pub const PART_LABELS: [&str; PARTS] = ["head", "upper torso", "arm", "hand", "leg", "foot"];
pub const PART_MAP_CLIP: f64 = 4.0;

/// Keypoint order of the AI-Challenger skeleton.
pub const KEYPOINT_NAMES: [&str; KEYPOINTS] = [
    "right shoulder",
    "right elbow",
    "right wrist",
    "left shoulder",
    "left elbow",
    "left wrist",
    "right hip",
    "right knee",
    "right ankle",
    "left hip",
    "left knee",
    "left ankle",
    "head top",
    "neck",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// Channel-first image: `pixels` is `[3, H, W]`, `confidence` is `[14, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonImage {
    pub pixels: Tensor,
    pub confidence: Tensor,
    pub identity: usize,
    pub keypoints: Vec<Keypoint>,
}

impl PersonImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Keypoint index sets for the six parts, in [`PART_LABELS`] order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartGrouping(pub Vec<Vec<usize>>);

impl Default for PartGrouping {
    fn default() -> Self {
        Self(vec![
            vec![12, 13],
            vec![13, 0, 3, 6, 9],
            vec![0, 3, 1, 4],
            vec![1, 4, 2, 5],
            vec![6, 9, 7, 10],
            vec![7, 10, 8, 11],
        ])
    }
}

impl PartGrouping {
    pub fn validate(&self) -> Result<()> {
        if self.0.len() != PARTS {
            return Err(Error::Config(format!("part grouping needs {PARTS} groups, got {}", self.0.len())));
        }
        let mut covered = [false; KEYPOINTS];
        for (g, group) in self.0.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::Config(format!("part group {g} is empty")));
            }
            for &k in group {
                if k >= KEYPOINTS {
                    return Err(Error::Config(format!("part group {g} names keypoint {k}")));
                }
                covered[k] = true;
            }
        }
        if let Some(k) = covered.iter().position(|c| !c) {
            return Err(Error::Config(format!("keypoint {k} belongs to no part group")));
        }
        Ok(())
    }
}

/// Sums each group's confidence maps and clips at [`PART_MAP_CLIP`]: `[14, H, W]` to `[6, H, W]`.
pub fn group_keypoints(confidence: &Tensor, grouping: &PartGrouping) -> Result<Tensor> {
    let s = confidence.shape();
    if s.len() != 3 || s[0] != KEYPOINTS {
        return Err(Error::Data(format!("confidence maps must be [{KEYPOINTS}, H, W], got {s:?}")));
    }
    let hw = s[1] * s[2];
    let src = confidence.data();
    let mut out = vec![0.0; PARTS * hw];
    for (dst, group) in out.chunks_exact_mut(hw).zip(&grouping.0) {
        for &k in group {
            for (d, v) in dst.iter_mut().zip(&src[k * hw..(k + 1) * hw]) {
                *d += v;
            }
        }
        for d in dst.iter_mut() {
            *d = d.min(PART_MAP_CLIP);
        }
    }
    Ok(Tensor::from_parts(vec![PARTS, s[1], s[2]], out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualConfig {
    pub height: usize,
    pub width: usize,
    /// Concatenate the 14 confidence maps to the RGB input.
    pub con_pose: bool,
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub pose_channels: Vec<usize>,
    pub pose_strides: Vec<usize>,
    /// Shared feature width b.
    pub feature_dim: usize,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            height: 96,
            width: 32,
            con_pose: true,
            backbone_channels: vec![32, 64, 64, 128],
            backbone_strides: vec![2, 2, 2, 1],
            pose_channels: vec![8, 16, 16, 32],
            pose_strides: vec![2, 2, 2, 1],
            feature_dim: 64,
        }
    }
}

impl VisualConfig {
    /// Layer shapes matching the 384×128 input and 12×4×512 feature map.
    pub fn paper() -> Self {
        Self {
            height: 384,
            width: 128,
            con_pose: true,
            backbone_channels: vec![64, 128, 256, 512, 512],
            backbone_strides: vec![2, 2, 2, 2, 2],
            pose_channels: vec![64, 128, 256, 256],
            pose_strides: vec![2, 2, 2, 1],
            feature_dim: 1024,
        }
    }

    pub fn input_channels(&self) -> usize {
        if self.con_pose {
            RGB_CHANNELS + KEYPOINTS
        } else {
            RGB_CHANNELS
        }
    }

    /// Channel width C of the region features.
    pub fn region_channels(&self) -> usize {
        *self.backbone_channels.last().unwrap_or(&0)
    }

    /// `(H', W', C)` of the backbone output.
    pub fn feature_map_shape(&self) -> (usize, usize, usize) {
        let (mut h, mut w) = (self.height, self.width);
        for &s in &self.backbone_strides {
            h = conv_out(h, s);
            w = conv_out(w, s);
        }
        (h, w, self.region_channels())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.backbone_channels.is_empty() || self.backbone_channels.len() != self.backbone_strides.len() {
            return bad("backbone channels and strides must be non-empty and of equal length".into());
        }
        if self.pose_channels.is_empty() || self.pose_channels.len() != self.pose_strides.len() {
            return bad("pose channels and strides must be non-empty and of equal length".into());
        }
        let all = self.backbone_channels.iter().chain(&self.backbone_strides).chain(&self.pose_channels);
        if all.chain(&self.pose_strides).any(|&v| v == 0) || self.feature_dim == 0 {
            return bad("channel widths, strides and feature_dim must be positive".into());
        }
        let (h, w, _) = self.feature_map_shape();
        if (h, w) != (2 * STRIPES, COLUMNS) {
            return bad(format!(
                "backbone maps {}x{} to {h}x{w}; the region grid needs {}x{COLUMNS}",
                self.height,
                self.width,
                2 * STRIPES
            ));
        }
        Ok(())
    }
}

fn conv_out(n: usize, stride: usize) -> usize {
    // 3×3 kernel with padding 1.
    (n + 2 - 3) / stride + 1
}

#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

fn init_convs(
    store: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    group: ParamGroup,
    in_channels: usize,
    channels: &[usize],
    strides: &[usize],
) -> Vec<ConvLayer> {
    let mut c_in = in_channels;
    let mut layers = Vec::new();
    for (l, (&c_out, &stride)) in channels.iter().zip(strides).enumerate() {
        let weight = store.add_uniform(format!("{prefix}.conv{l}.weight"), group, &[c_out, c_in, 3, 3], he_bound(c_in * 9), rng);
        let bias = store.add(format!("{prefix}.conv{l}.bias"), group, Tensor::zeros(&[c_out]));
        layers.push(ConvLayer { weight, bias, stride });
        c_in = c_out;
    }
    layers
}

fn run_convs(ctx: &Ctx, layers: &[ConvLayer], mut x: Var) -> Result<Var> {
    let t = ctx.tape;
    for layer in layers {
        let spec = Conv2dSpec { stride: layer.stride, padding: 1 };
        x = t.relu(t.conv2d(x, ctx.p(layer.weight), Some(ctx.p(layer.bias)), spec)?)?;
    }
    Ok(x)
}

#[derive(Clone, Debug)]
pub struct VisualParams {
    pub config: VisualConfig,
    pub backbone: Vec<ConvLayer>,
    pub pose: Vec<ConvLayer>,
    /// `[C_pose, b]`
    pub pose_fc_weight: ParamId,
    /// `[b]`
    pub pose_fc_bias: ParamId,
}

impl VisualParams {
    /// Backbone weights go in [`ParamGroup::VisualCnn`]; the pose CNN trains with the alignment layers.
    pub fn init(store: &mut ParamStore, rng: &mut Rng, config: &VisualConfig) -> Result<Self> {
        config.validate()?;
        let backbone = init_convs(
            store,
            rng,
            "visual",
            ParamGroup::VisualCnn,
            config.input_channels(),
            &config.backbone_channels,
            &config.backbone_strides,
        );
        let pose = init_convs(store, rng, "pose", ParamGroup::Alignment, 1, &config.pose_channels, &config.pose_strides);
        let c_pose = *config.pose_channels.last().unwrap_or(&1);
        let b = config.feature_dim;
        let g = ParamGroup::Alignment;
        let pose_fc_weight = store.add_uniform("pose.fc.weight", g, &[c_pose, b], glorot_bound(c_pose, b), rng);
        let pose_fc_bias = store.add("pose.fc.bias", g, Tensor::zeros(&[b]));
        Ok(Self { config: config.clone(), backbone, pose, pose_fc_weight, pose_fc_bias })
    }
}

/// Backbone feature map φ'(I): `[N, channels, H, W]` to `[N, C, 12, 4]`.
pub fn visual_cnn(ctx: &Ctx, params: &VisualParams, input: Var) -> Result<Var> {
    let s = ctx.tape.shape(input);
    let cfg = &params.config;
    if s.len() != 4 || s[1] != cfg.input_channels() || s[2] != cfg.height || s[3] != cfg.width {
        return Err(Error::Data(format!(
            "visual input must be [N, {}, {}, {}], got {s:?}",
            cfg.input_channels(),
            cfg.height,
            cfg.width
        )));
    }
    run_convs(ctx, &params.backbone, input)
}

/// Averages row pairs into 6 stripes: `[N, C, 6k, W']` to `[N, 6, W', C]`.
pub fn stripe_partition(ctx: &Ctx, phi_prime: Var) -> Result<Var> {
    let t = ctx.tape;
    let s = t.shape(phi_prime);
    if s.len() != 4 || s[2] == 0 || s[2] % STRIPES != 0 {
        return Err(Error::Data(format!("feature map {s:?} cannot be split into {STRIPES} stripes")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let nhwc = t.permute(phi_prime, &[0, 2, 3, 1])?;
    let grouped = t.reshape(nhwc, &[n * STRIPES, h / STRIPES, w * c])?;
    let avg = t.mean(grouped, 1)?;
    Ok(t.reshape(avg, &[n, STRIPES, w, c])?)
}

/// Region features φ(I) for a batch: `[N, 6, 4, C]`.
pub fn region_features(ctx: &Ctx, params: &VisualParams, input: Var) -> Result<Var> {
    let fm = visual_cnn(ctx, params, input)?;
    stripe_partition(ctx, fm)
}

/// Part vectors `[N, 6, b]` from part maps `[N, 6, H, W]`; each map runs through the same CNN.
pub fn pose_cnn(ctx: &Ctx, params: &VisualParams, parts: Var) -> Result<Var> {
    let t = ctx.tape;
    let s = t.shape(parts);
    if s.len() != 4 || s[1] != PARTS {
        return Err(Error::Data(format!("part maps must be [N, {PARTS}, H, W], got {s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let x = t.reshape(parts, &[n * PARTS, 1, h, w])?;
    let fm = run_convs(ctx, &params.pose, x)?;
    let fs = t.shape(fm);
    let flat = t.reshape(fm, &[fs[0], fs[1], fs[2] * fs[3]])?;
    let pooled = t.mean(flat, 2)?;
    let fc = t.add_bias(t.matmul(pooled, ctx.p(params.pose_fc_weight))?, ctx.p(params.pose_fc_bias))?;
    Ok(t.reshape(fc, &[n, PARTS, params.config.feature_dim])?)
}

/// Stacked network inputs for a batch of images.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    /// `[N, 3 or 17, H, W]`
    pub input: Tensor,
    /// `[N, 6, H, W]`
    pub parts: Tensor,
    pub identities: Vec<usize>,
}

impl ImageBatch {
    pub fn new(images: &[&PersonImage], con_pose: bool, grouping: &PartGrouping) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Data("empty image batch".into()))?;
        let (h, w) = (first.height(), first.width());
        let hw = h * w;
        let c = if con_pose { RGB_CHANNELS + KEYPOINTS } else { RGB_CHANNELS };
        let mut input = Vec::with_capacity(images.len() * c * hw);
        let mut parts = Vec::with_capacity(images.len() * PARTS * hw);
        for img in images {
            if img.pixels.shape() != [RGB_CHANNELS, h, w] || img.confidence.shape() != [KEYPOINTS, h, w] {
                return Err(Error::Data(format!(
                    "image of identity {} has shape {:?}/{:?}, expected [3|14, {h}, {w}]",
                    img.identity,
                    img.pixels.shape(),
                    img.confidence.shape()
                )));
            }
            input.extend_from_slice(img.pixels.data());
            if con_pose {
                input.extend_from_slice(img.confidence.data());
            }
            parts.extend_from_slice(group_keypoints(&img.confidence, grouping)?.data());
        }
        let n = images.len();
        Ok(Self {
            input: Tensor::from_parts(vec![n, c, h, w], input),
            parts: Tensor::from_parts(vec![n, PARTS, h, w], parts),
            identities: images.iter().map(|i| i.identity).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}
