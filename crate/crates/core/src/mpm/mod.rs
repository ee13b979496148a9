//! Hierarchical classifier with training-only part-segmentation bypass
//! heads on its last three blocks.
//!
//! Parameter names are prefixed `backbone.`, `classifier.` or `bypass.`;
//! stripping removes the `bypass.` group, leaving exactly the parameters a
//! vanilla model built from the same [`BackboneSpec`] and seed would have.

pub mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{add_conv, add_linear, Ctx, Init, ParamStore};
use crate::part_data::{downsample_mask, BinaryMask, CompositeMask};
use crate::tensor::Tensor;

pub const BYPASS_PREFIX: &str = "bypass.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Residual 3x3 convolution blocks.
    Conv,
    /// Pre-norm single-head self-attention blocks with 1x1 MLPs.
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub image_size: usize,
    /// Non-overlapping patch size of the stem.
    pub stem_patch: usize,
    pub channels: Vec<usize>,
    /// Spatial reduction of each block, 1 or 2.
    pub downsample: Vec<usize>,
    pub num_classes: usize,
}

impl BackboneSpec {
    /// Four conv blocks at 16, 8, 4 and 2 pixels for 64x64 inputs.
    pub fn conv(num_classes: usize, channels: [usize; 4]) -> Self {
        Self {
            kind: BackboneKind::Conv,
            image_size: 64,
            stem_patch: 4,
            channels: channels.to_vec(),
            downsample: vec![1, 2, 2, 2],
            num_classes,
        }
    }

    pub fn attention(num_classes: usize, channels: [usize; 4]) -> Self {
        Self { kind: BackboneKind::Attention, ..Self::conv(num_classes, channels) }
    }

    pub fn num_blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.num_blocks();
        if l < 3 {
            return Err(Error::Spec(format!("need at least 3 blocks, got {l}")));
        }
        if self.downsample.len() != l {
            return Err(Error::Spec(format!("{} downsample factors for {l} blocks", self.downsample.len())));
        }
        if let Some(d) = self.downsample.iter().find(|d| **d != 1 && **d != 2) {
            return Err(Error::Spec(format!("downsample factor {d} is not 1 or 2")));
        }
        if self.channels.contains(&0) || self.num_classes < 2 || self.stem_patch == 0 {
            return Err(Error::Spec("channels, stem_patch must be positive and num_classes >= 2".into()));
        }
        let total = self.stem_patch * self.downsample.iter().product::<usize>();
        if self.image_size % total != 0 {
            return Err(Error::Spec(format!("image size {} not divisible by total stride {total}", self.image_size)));
        }
        Ok(())
    }

    /// Spatial size after each block.
    pub fn block_sizes(&self) -> Vec<usize> {
        let mut s = self.image_size / self.stem_patch;
        self.downsample
            .iter()
            .map(|d| {
                s /= d;
                s
            })
            .collect()
    }

    /// Spatial sizes of the three supervised (last) blocks, finest first.
    pub fn supervised_sizes(&self) -> [usize; 3] {
        let s = self.block_sizes();
        let l = s.len();
        [s[l - 3], s[l - 2], s[l - 1]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpmConfig {
    pub lambda: f64,
    pub focal_gamma: f64,
    /// Segmentation channels, `K + 1` with background last.
    pub seg_classes: usize,
    pub topdown: bool,
    pub hidden: usize,
    pub label_smoothing: f64,
    /// Optional per-channel focal weights.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for MpmConfig {
    fn default() -> Self {
        Self { lambda: 1.0, focal_gamma: 2.0, seg_classes: 2, topdown: true, hidden: 16, label_smoothing: 0.1, class_weights: None }
    }
}

impl MpmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.focal_gamma >= 0.0) {
            return Err(Error::Spec(format!("lambda {} and gamma {} must be >= 0", self.lambda, self.focal_gamma)));
        }
        if self.seg_classes < 2 || self.hidden == 0 {
            return Err(Error::Spec("seg_classes must be >= 2 and hidden > 0".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Spec(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.seg_classes || w.iter().any(|x| !(*x >= 0.0)) {
                return Err(Error::Spec("class_weights must hold seg_classes non-negative entries".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpmModel {
    pub spec: BackboneSpec,
    /// `None` once stripped (or for a vanilla model).
    pub mpm: Option<MpmConfig>,
    pub params: ParamStore,
}

fn block_name(i: usize) -> String {
    format!("backbone.block{i}")
}

fn add_backbone(store: &mut ParamStore, spec: &BackboneSpec, seed: u64) {
    let c0 = spec.channels[0];
    store.init("backbone.stem.w", &[c0, 3, spec.stem_patch, spec.stem_patch], Init::He, seed);
    store.init("backbone.stem.b", &[c0], Init::Zeros, seed);
    let mut cin = c0;
    for (i, (&c, &d)) in spec.channels.iter().zip(&spec.downsample).enumerate() {
        let n = block_name(i);
        match spec.kind {
            BackboneKind::Conv => {
                add_conv(store, &format!("{n}.conv1"), cin, c, 3, seed);
                add_conv(store, &format!("{n}.conv2"), c, c, 3, seed);
                if d != 1 || cin != c {
                    add_conv(store, &format!("{n}.skip"), cin, c, 1, seed);
                }
            }
            BackboneKind::Attention => {
                if d != 1 || cin != c {
                    add_conv(store, &format!("{n}.merge"), cin, c, d, seed);
                }
                for part in ["q", "k", "v", "proj"] {
                    add_conv(store, &format!("{n}.attn.{part}"), c, c, 1, seed);
                }
                add_conv(store, &format!("{n}.mlp1"), c, 2 * c, 1, seed);
                add_conv(store, &format!("{n}.mlp2"), 2 * c, c, 1, seed);
            }
        }
        cin = c;
    }
    add_linear(store, "classifier", cin, spec.num_classes, Init::Lecun, seed);
}

fn add_bypass(store: &mut ParamStore, spec: &BackboneSpec, cfg: &MpmConfig, seed: u64) {
    let l = spec.num_blocks();
    for s in 0..3 {
        let c = spec.channels[l - 3 + s];
        add_conv(store, &format!("bypass.proj{s}"), c, cfg.hidden, 1, seed);
        if cfg.topdown && s < 2 {
            add_conv(store, &format!("bypass.lateral{s}"), cfg.hidden, cfg.hidden, 1, seed);
        }
        store.init(&format!("bypass.out{s}.w"), &[cfg.seg_classes, cfg.hidden, 1, 1], Init::Zeros, seed);
        store.init(&format!("bypass.out{s}.b"), &[cfg.seg_classes], Init::Zeros, seed);
    }
}

impl MpmModel {
    pub fn vanilla(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        add_backbone(&mut params, spec, seed);
        Ok(Self { spec: spec.clone(), mpm: None, params })
    }

    pub fn bypass_param_count(&self) -> usize {
        self.params.count(Some(BYPASS_PREFIX))
    }

    pub fn backbone_param_count(&self) -> usize {
        self.params.count(None) - self.bypass_param_count()
    }

    pub fn num_params(&self) -> usize {
        self.params.count(None)
    }

    pub fn has_bypass(&self) -> bool {
        self.mpm.is_some()
    }
}

/// Backbone, classifier, and three bypass heads. Fails with
/// [`Error::Spec`] if the bypass would not be smaller than the backbone.
pub fn build_mpm(spec: &BackboneSpec, cfg: &MpmConfig, seed: u64) -> Result<MpmModel> {
    cfg.validate()?;
    let mut m = MpmModel::vanilla(spec, seed)?;
    add_bypass(&mut m.params, spec, cfg, seed);
    m.mpm = Some(cfg.clone());
    let (bypass, backbone) = (m.bypass_param_count(), m.backbone_param_count());
    if bypass >= backbone {
        return Err(Error::Spec(format!("bypass has {bypass} parameters, backbone only {backbone}")));
    }
    Ok(m)
}

/// Inference view: the model without its bypass parameters.
pub fn strip_auxiliary(model: &MpmModel) -> MpmModel {
    let mut out = model.clone();
    out.params.retain(|n| !n.starts_with(BYPASS_PREFIX));
    out.mpm = None;
    out
}

/// Graph outputs of one forward pass.
pub struct ForwardVars {
    pub logits: Var,
    /// Finest scale first; empty without bypass heads.
    pub seg: Vec<Var>,
}

fn conv_block(ctx: &mut Ctx, spec: &BackboneSpec, i: usize, x: Var) -> Var {
    let n = block_name(i);
    let stride = spec.downsample[i];
    let h = ctx.tape.layer_norm_channels(x);
    let h = ctx.conv(&format!("{n}.conv1"), h, stride, 1);
    let h = ctx.tape.gelu(h);
    let h = ctx.conv(&format!("{n}.conv2"), h, 1, 1);
    let skip_name = format!("{n}.skip");
    let skip = if ctx.has_param(&format!("{skip_name}.w")) { ctx.conv(&skip_name, x, stride, 0) } else { x };
    ctx.tape.add(h, skip)
}

fn attention_block(ctx: &mut Ctx, spec: &BackboneSpec, i: usize, x: Var) -> Var {
    let n = block_name(i);
    let merge = format!("{n}.merge");
    let x = if ctx.has_param(&format!("{merge}.w")) { ctx.conv(&merge, x, spec.downsample[i], 0) } else { x };
    let h = ctx.tape.layer_norm_channels(x);
    let q = ctx.conv(&format!("{n}.attn.q"), h, 1, 0);
    let k = ctx.conv(&format!("{n}.attn.k"), h, 1, 0);
    let v = ctx.conv(&format!("{n}.attn.v"), h, 1, 0);
    let a = ctx.tape.attention(q, k, v);
    let a = ctx.conv(&format!("{n}.attn.proj"), a, 1, 0);
    let x = ctx.tape.add(x, a);
    let h = ctx.tape.layer_norm_channels(x);
    let h = ctx.conv(&format!("{n}.mlp1"), h, 1, 0);
    let h = ctx.tape.gelu(h);
    let h = ctx.conv(&format!("{n}.mlp2"), h, 1, 0);
    ctx.tape.add(x, h)
}

/// Records the forward pass of `model` on `x [B, 3, H, W]` into `ctx`.
pub fn forward_vars(ctx: &mut Ctx, model: &MpmModel, x: Var) -> Result<ForwardVars> {
    forward_vars_with(ctx, model, x, true)
}

/// [`forward_vars`] that evaluates the bypass heads only if `bypass` is set
/// (and the model has them); skipped heads never bind their parameters.
pub fn forward_vars_with(ctx: &mut Ctx, model: &MpmModel, x: Var, bypass: bool) -> Result<ForwardVars> {
    let spec = &model.spec;
    let shape = ctx.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != spec.image_size || shape[3] != spec.image_size {
        return Err(Error::Shape(format!("input {shape:?}, expected [B, 3, {0}, {0}]", spec.image_size)));
    }
    let centered = ctx.tape.shift(x, -0.5);
    let mut h = ctx.conv("backbone.stem", centered, spec.stem_patch, 0);
    let mut feats = Vec::with_capacity(spec.num_blocks());
    for i in 0..spec.num_blocks() {
        h = match spec.kind {
            BackboneKind::Conv => conv_block(ctx, spec, i, h),
            BackboneKind::Attention => attention_block(ctx, spec, i, h),
        };
        feats.push(h);
    }
    let top = ctx.tape.layer_norm_channels(h);
    let top = ctx.tape.gelu(top);
    let pooled = ctx.tape.global_avg_pool(top);
    let logits = ctx.linear("classifier", pooled);

    let mut seg = Vec::new();
    if let Some(cfg) = model.mpm.as_ref().filter(|_| bypass) {
        let l = feats.len();
        let mut above: Option<Var> = None;
        let mut fused = [None; 3];
        for s in (0..3).rev() {
            let f = ctx.tape.layer_norm_channels(feats[l - 3 + s]);
            let mut t = ctx.conv(&format!("bypass.proj{s}"), f, 1, 0);
            if let (true, Some(up)) = (cfg.topdown, above) {
                let lat = ctx.conv(&format!("bypass.lateral{s}"), up, 1, 0);
                let lat = if spec.downsample[l - 2 + s] == 2 { ctx.tape.upsample2(lat) } else { lat };
                t = ctx.tape.add(t, lat);
            }
            above = Some(t);
            fused[s] = Some(t);
        }
        for (s, t) in fused.into_iter().enumerate() {
            let g = ctx.tape.gelu(t.unwrap());
            seg.push(ctx.conv(&format!("bypass.out{s}"), g, 1, 0));
        }
    }
    Ok(ForwardVars { logits, seg })
}

/// Class logits `[B, C]` and per-scale segmentation logits.
pub fn forward_train(model: &MpmModel, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let mut ctx = Ctx::new(&model.params, false);
    let input = ctx.tape.constant(x.clone());
    let out = forward_vars(&mut ctx, model, input)?;
    let seg = out.seg.iter().map(|v| ctx.value(*v).clone()).collect();
    Ok((ctx.value(out.logits).clone(), seg))
}

/// Class logits only; bypass heads, if present, are not evaluated.
pub fn forward_infer(model: &MpmModel, x: &Tensor) -> Result<Tensor> {
    forward_train(&strip_auxiliary(model), x).map(|(l, _)| l)
}

/// Per-pixel softmax of the finest segmentation head, nearest-upsampled to
/// the input size: one `(K+1) x H x W` map per image, background last.
pub fn seg_probabilities(model: &MpmModel, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    if !model.has_bypass() {
        return Err(Error::Spec("model has no segmentation heads".into()));
    }
    let (_, seg) = forward_train(model, x)?;
    let (b, k, sh, sw) = seg[0].dims4();
    let size = model.spec.image_size;
    let factor = size / sh;
    let data = seg[0].data();
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let mut small = vec![0.0; k * sh * sw];
        let mut row = vec![0.0; k];
        for p in 0..sh * sw {
            for (c, r) in row.iter_mut().enumerate() {
                *r = data[(i * k + c) * sh * sw + p];
            }
            crate::autograd::softmax_inplace(&mut row);
            for (c, r) in row.iter().enumerate() {
                small[c * sh * sw + p] = *r;
            }
        }
        let mut full = vec![0.0; k * size * size];
        for c in 0..k {
            for y in 0..size {
                for xx in 0..size {
                    full[(c * size + y) * size + xx] = small[(c * sh + y / factor) * sw + xx / factor];
                }
            }
        }
        out.push(full);
    }
    Ok(out)
}

/// Object foreground from one image's [`seg_probabilities`] map: pixels where
/// the part channels jointly outweigh background (`p_bg < 1/2`).
pub fn object_mask_from_probs(probs: &[f64], channels: usize, size: usize) -> Result<BinaryMask> {
    let hw = size * size;
    if channels < 2 || probs.len() != channels * hw {
        return Err(Error::Shape(format!("{} probabilities for {channels} channels of {size}x{size}", probs.len())));
    }
    let bg = &probs[(channels - 1) * hw..];
    BinaryMask::from_vec(size, size, bg.iter().map(|&p| p < 0.5).collect())
}

/// Mean over pixels of `-(1 - p_t)^gamma * ln p_t`.
pub fn focal_loss(p_t: &[f64], gamma: f64) -> Result<f64> {
    if p_t.is_empty() {
        return Err(Error::EmptyInput("focal loss of zero pixels".into()));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Domain(format!("gamma {gamma} < 0")));
    }
    let mut total = 0.0;
    for &p in p_t {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Domain(format!("p_t = {p} outside (0, 1]")));
        }
        total -= (1.0 - p).powf(gamma) * p.ln();
    }
    Ok(total / p_t.len() as f64)
}

/// Per-scale flattened pixel targets for a batch of composite masks, each
/// mode-downsampled to the scale's resolution.
pub fn seg_targets(masks: &[&CompositeMask], sizes: &[usize]) -> Result<Vec<Vec<usize>>> {
    sizes
        .iter()
        .map(|&s| {
            let mut out = Vec::new();
            for m in masks {
                let (h, w) = m.dims();
                if h != w || s == 0 || h % s != 0 {
                    return Err(Error::Dimension(format!("{h}x{w} mask cannot be reduced to {s}x{s}")));
                }
                out.extend_from_slice(downsample_mask(m, h / s)?.labels.data());
            }
            Ok(out)
        })
        .collect()
}

/// Loss graph nodes.
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    /// `None` when there are no segmentation terms.
    pub seg: Option<Var>,
}

/// `L_cls + lambda * mean_s focal_s`. With `lambda == 0` or no seg logits
/// the total is the classification loss node itself.
pub fn mpm_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    seg: &[Var],
    targets: &[Vec<usize>],
    cfg: &MpmConfig,
) -> Result<LossVars> {
    let (b, c) = tape.value(logits).dims2();
    if labels.len() != b || labels.iter().any(|&y| y >= c) {
        return Err(Error::Shape(format!("{} labels for {b} x {c} logits", labels.len())));
    }
    let cls = tape.cross_entropy(logits, labels, cfg.label_smoothing);
    if seg.is_empty() {
        return Ok(LossVars { total: cls, cls, seg: None });
    }
    if seg.len() != targets.len() {
        return Err(Error::Shape(format!("{} seg outputs, {} target maps", seg.len(), targets.len())));
    }
    let mut terms = Vec::new();
    for (&s, t) in seg.iter().zip(targets) {
        let (sb, k, h, w) = tape.value(s).dims4();
        if sb != b || t.len() != b * h * w || k != cfg.seg_classes || t.iter().any(|&v| v >= k) {
            return Err(Error::Shape(format!("seg logits {:?} vs {} targets", tape.value(s).shape(), t.len())));
        }
        terms.push(tape.focal_loss(s, t, cfg.focal_gamma, cfg.class_weights.as_deref()));
    }
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = tape.add(sum, t);
    }
    let l_seg = tape.scale(sum, 1.0 / terms.len() as f64);
    if cfg.lambda == 0.0 {
        return Ok(LossVars { total: cls, cls, seg: Some(l_seg) });
    }
    let weighted = tape.scale(l_seg, cfg.lambda);
    let total = tape.add(cls, weighted);
    Ok(LossVars { total, cls, seg: Some(l_seg) })
}
