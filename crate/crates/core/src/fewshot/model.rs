use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::crop::{crop_largest_parts, CropSpec};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::nn::{add_conv, add_linear, derive_seed, Ctx, Init, ParamStore};
use crate::optim::{clip_grad_norm, cosine_lr, Sgd};
use crate::part_data::AnnotationRecord;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Side of the square encoder input; crops are resized to it as well.
    pub input_size: usize,
    pub channels: usize,
    pub depth: usize,
    /// Part branches `l`; 0 gives the plain encoder.
    pub parts: usize,
    /// Classes of the pre-training head.
    pub num_classes: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { input_size: 32, channels: 16, depth: 4, parts: 3, num_classes: 10 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.channels == 0 || self.num_classes == 0 {
            return Err(Error::Spec("depth, channels and num_classes must be positive".into()));
        }
        if self.input_size >> self.depth == 0 {
            return Err(Error::Spec(format!("input {} too small for {} pooling stages", self.input_size, self.depth)));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub params: ParamStore,
}

fn encoder_name(branch: Option<usize>) -> String {
    match branch {
        None => "encoder.g".into(),
        Some(i) => format!("encoder.p{i}"),
    }
}

fn alpha_name(i: usize) -> String {
    format!("fusion.alpha{i}")
}

impl FusionModel {
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let branches = std::iter::once(None).chain((0..config.parts).map(Some));
        for b in branches {
            let mut cin = 3;
            for d in 0..config.depth {
                add_conv(&mut params, &format!("{}.conv{d}", encoder_name(b)), cin, config.channels, 3, seed);
                cin = config.channels;
            }
        }
        for i in 0..config.parts {
            params.init(&alpha_name(i), &[1], Init::Zeros, seed);
        }
        add_linear(&mut params, "head", config.channels, config.num_classes, Init::Lecun, seed);
        Ok(Self { config, params })
    }

    pub fn alphas(&self) -> Vec<f64> {
        (0..self.config.parts).map(|i| self.params.get(&alpha_name(i)).unwrap().item()).collect()
    }

    pub fn set_alphas(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.config.parts {
            return Err(Error::Shape(format!("{} weights for {} branches", values.len(), self.config.parts)));
        }
        for (i, &v) in values.iter().enumerate() {
            *self.params.get_mut(&alpha_name(i)).unwrap() = Tensor::full(&[1], v);
        }
        Ok(())
    }
}

/// Conv3x3, ReLU, 2x2 max pooling per stage, then global average pooling.
fn encode(ctx: &mut Ctx, cfg: &FusionConfig, branch: Option<usize>, x: Var) -> Var {
    let mut h = ctx.tape.shift(x, -0.5);
    for d in 0..cfg.depth {
        h = ctx.conv(&format!("{}.conv{d}", encoder_name(branch)), h, 1, 1);
        h = ctx.tape.relu(h);
        h = ctx.tape.max_pool2(h);
    }
    ctx.tape.global_avg_pool(h)
}

/// Records `sum_i alpha_i p_i(c_i) + (1 - sum_i alpha_i) g(x)` for a batch.
pub fn fused_vars(ctx: &mut Ctx, model: &FusionModel, x: Var, crops: &[Var]) -> Result<Var> {
    let cfg = &model.config;
    if crops.len() != cfg.parts {
        return Err(Error::Shape(format!("{} crops for {} branches", crops.len(), cfg.parts)));
    }
    let s = cfg.input_size;
    let batch = ctx.value(x).shape()[0];
    for &v in std::iter::once(&x).chain(crops) {
        let sh = ctx.value(v).shape();
        if sh != [batch, 3, s, s] {
            return Err(Error::Shape(format!("input {sh:?}, expected [{batch}, 3, {s}, {s}]")));
        }
    }
    let g = encode(ctx, cfg, None, x);
    if cfg.parts == 0 {
        return Ok(g);
    }
    let mut acc: Option<Var> = None;
    let mut alpha_sum: Option<Var> = None;
    for (i, &c) in crops.iter().enumerate() {
        let a = ctx.param(&alpha_name(i));
        let p = encode(ctx, cfg, Some(i), c);
        let term = ctx.tape.mul_scalar(p, a);
        acc = Some(match acc {
            None => term,
            Some(t) => ctx.tape.add(t, term),
        });
        alpha_sum = Some(match alpha_sum {
            None => a,
            Some(t) => ctx.tape.add(t, a),
        });
    }
    let neg = ctx.tape.scale(alpha_sum.unwrap(), -1.0);
    let base_weight = ctx.tape.shift(neg, 1.0);
    let base = ctx.tape.mul_scalar(g, base_weight);
    Ok(ctx.tape.add(acc.unwrap(), base))
}

/// Fused feature vectors `[B, D]` for images `x` and their crops.
pub fn fused_features(model: &FusionModel, x: &Tensor, crops: &[Tensor]) -> Result<Tensor> {
    let mut ctx = Ctx::new(&model.params, false);
    let xv = ctx.tape.constant(x.clone());
    let cv: Vec<Var> = crops.iter().map(|c| ctx.tape.constant(c.clone())).collect();
    let f = fused_vars(&mut ctx, model, xv, &cv)?;
    Ok(ctx.value(f).clone())
}

/// Encoder inputs for a set of annotated images: resized images plus one
/// tensor per crop slot.
#[derive(Clone, Debug)]
pub struct FusionInputs {
    pub images: Tensor,
    pub crops: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl FusionInputs {
    pub fn build(images: &[RgbImage], records: &[AnnotationRecord], labels: Vec<usize>, size: usize, crop: &CropSpec) -> Result<Self> {
        if images.len() != records.len() || images.len() != labels.len() || images.is_empty() {
            return Err(Error::Data(format!("{} images, {} records, {} labels", images.len(), records.len(), labels.len())));
        }
        let spec = CropSpec { size: Some((size, size)), ..crop.clone() };
        let mut xs = Vec::with_capacity(images.len());
        let mut slots: Vec<Vec<Tensor>> = vec![Vec::with_capacity(images.len()); crop.parts];
        for (im, rec) in images.iter().zip(records) {
            xs.push(im.resize_bilinear(size, size).to_tensor());
            if crop.parts > 0 {
                for (slot, c) in crop_largest_parts(im, rec, &spec)?.into_iter().enumerate() {
                    slots[slot].push(c.to_tensor());
                }
            }
        }
        Ok(Self {
            images: Tensor::stack(&xs)?,
            crops: slots.iter().map(|s| Tensor::stack(s)).collect::<Result<_>>()?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same inputs with the crops dropped, for the plain encoder.
    pub fn without_crops(&self) -> Self {
        Self { images: self.images.clone(), crops: Vec::new(), labels: self.labels.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewshotRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Keep every fusion weight at its current value.
    pub freeze_alpha: bool,
    /// Global gradient-norm bound per step; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for FewshotRecipe {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 32, lr: 0.05, momentum: 0.9, weight_decay: 5e-4, freeze_alpha: false, grad_clip: Some(5.0), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewshotEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub alphas: Vec<f64>,
}

/// Supervised pre-training of encoder, branches, fusion weights and head on
/// the base classes.
pub fn train_fusion(
    mut model: FusionModel,
    data: &FusionInputs,
    recipe: &FewshotRecipe,
    mut log: Option<&mut dyn Write>,
) -> Result<(FusionModel, Vec<FewshotEpoch>)> {
    if recipe.epochs == 0 || recipe.batch_size == 0 || recipe.lr <= 0.0 {
        return Err(Error::Spec("epochs, batch_size and lr must be positive".into()));
    }
    if recipe.grad_clip.is_some_and(|c| !(c > 0.0)) {
        return Err(Error::Spec("grad_clip must be positive".into()));
    }
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if data.crops.len() != model.config.parts {
        return Err(Error::Shape(format!("{} crop slots for {} branches", data.crops.len(), model.config.parts)));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= model.config.num_classes) {
        return Err(Error::Data(format!("label {bad} outside the {} head classes", model.config.num_classes)));
    }
    let n = data.len();
    let total = n.div_ceil(recipe.batch_size) * recipe.epochs;
    let mut sgd = Sgd::new(recipe.momentum, recipe.weight_decay);
    let mut step = 0;
    let mut history = Vec::new();
    for epoch in 0..recipe.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(recipe.seed, &format!("fewshot/epoch/{epoch}")));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut sum_loss, mut correct) = (0.0, 0usize);
        for idx in order.chunks(recipe.batch_size) {
            let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut grads = {
                let mut ctx = Ctx::new(&model.params, true);
                let x = ctx.tape.constant(data.images.select(idx));
                let cv: Vec<Var> = data.crops.iter().map(|c| ctx.tape.constant(c.select(idx))).collect();
                let f = fused_vars(&mut ctx, &model, x, &cv)?;
                let logits = ctx.linear("head", f);
                let loss = ctx.tape.cross_entropy(logits, &y, 0.0);
                sum_loss += ctx.value(loss).item() * idx.len() as f64;
                correct += argmax(ctx.value(logits)).iter().zip(&y).filter(|(a, b)| a == b).count();
                let mut g = ctx.tape.backward(loss);
                ctx.param_grads(&mut g)
            };
            if recipe.freeze_alpha {
                grads.retain(|k, _| !k.starts_with("fusion."));
            }
            if let Some(c) = recipe.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            sgd.step(&mut model.params, &grads, cosine_lr(recipe.lr, step, total));
            step += 1;
        }
        let rec = FewshotEpoch { epoch, loss: sum_loss / n as f64, train_accuracy: correct as f64 / n as f64, alphas: model.alphas() };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io("fewshot log", e))?;
        }
        history.push(rec);
    }
    Ok((model, history))
}

fn argmax(t: &Tensor) -> Vec<usize> {
    let (_, c) = t.dims2();
    t.data()
        .chunks(c)
        .map(|r| r.iter().enumerate().fold(0, |b, (i, v)| if *v > r[b] { i } else { b }))
        .collect()
}

/// Fused features of every sample, in batches.
pub fn extract_features(model: &FusionModel, data: &FusionInputs, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let d = model.config.feature_dim();
    let mut out = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(batch_size.max(1)) {
        let crops: Vec<Tensor> = data.crops.iter().map(|c| c.select(idx)).collect();
        let f = fused_features(model, &data.images.select(idx), &crops)?;
        out.extend(f.data().chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Per-branch parameter counts, for reports.
pub fn param_summary(model: &FusionModel) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    out.insert("base".into(), model.params.count(Some("encoder.g.")));
    for i in 0..model.config.parts {
        out.insert(format!("branch{i}"), model.params.count(Some(&format!("encoder.p{i}."))));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(parts: usize) -> FusionConfig {
        FusionConfig { input_size: 8, channels: 4, depth: 2, parts, num_classes: 3 }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_recover_base_encoder() {
        let m = FusionModel::new(cfg(3), 1).unwrap();
        let plain = FusionModel::new(cfg(0), 1).unwrap();
        let x = rand_t(&[2, 3, 8, 8], 2);
        let crops: Vec<Tensor> = (0..3).map(|i| rand_t(&[2, 3, 8, 8], 10 + i)).collect();
        assert_eq!(fused_features(&m, &x, &crops).unwrap(), fused_features(&plain, &x, &[]).unwrap());
    }

    #[test]
    fn unit_weight_selects_branch() {
        let mut m = FusionModel::new(cfg(1), 1).unwrap();
        m.set_alphas(&[1.0]).unwrap();
        let x = rand_t(&[2, 3, 8, 8], 2);
        let c = rand_t(&[2, 3, 8, 8], 3);
        let mut ctx = Ctx::new(&m.params, false);
        let cv = ctx.tape.constant(c.clone());
        let p = encode(&mut ctx, &m.config, Some(0), cv);
        let expect = ctx.value(p).clone();
        assert!(fused_features(&m, &x, &[c]).unwrap().max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn wrong_crop_count_or_size_is_shape_error() {
        let m = FusionModel::new(cfg(2), 1).unwrap();
        let x = rand_t(&[1, 3, 8, 8], 2);
        assert!(matches!(fused_features(&m, &x, &[x.clone()]), Err(Error::Shape(_))));
        let small = rand_t(&[1, 3, 4, 4], 2);
        assert!(matches!(fused_features(&m, &x, &[x.clone(), small]), Err(Error::Shape(_))));
    }

    #[test]
    fn alpha_gradient_matches_finite_differences() {
        let mut m = FusionModel::new(cfg(3), 4).unwrap();
        m.set_alphas(&[0.2, -0.1, 0.3]).unwrap();
        let x = rand_t(&[3, 3, 8, 8], 5);
        let crops: Vec<Tensor> = (0..3).map(|i| rand_t(&[3, 3, 8, 8], 20 + i)).collect();
        let y = [0, 2, 1];
        let loss = |m: &FusionModel| -> (f64, BTreeMap<String, Tensor>) {
            let mut ctx = Ctx::new(&m.params, true);
            let xv = ctx.tape.constant(x.clone());
            let cv: Vec<Var> = crops.iter().map(|c| ctx.tape.constant(c.clone())).collect();
            let f = fused_vars(&mut ctx, m, xv, &cv).unwrap();
            let logits = ctx.linear("head", f);
            let l = ctx.tape.cross_entropy(logits, &y, 0.0);
            let v = ctx.value(l).item();
            let mut g = ctx.tape.backward(l);
            (v, ctx.param_grads(&mut g))
        };
        let (_, grads) = loss(&m);
        let h = 1e-4;
        for i in 0..3 {
            let name = alpha_name(i);
            let mut plus = m.clone();
            plus.params.get_mut(&name).unwrap().data_mut()[0] += h;
            let mut minus = m.clone();
            minus.params.get_mut(&name).unwrap().data_mut()[0] -= h;
            let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
            let an = grads[&name].item();
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-3, "alpha{i}: analytic {an} vs fd {fd}");
        }
    }

    #[test]
    fn frozen_weights_train_like_plain_encoder() {
        let full = FusionModel::new(cfg(2), 9).unwrap();
        let plain = FusionModel::new(cfg(0), 9).unwrap();
        let n = 10;
        let data = FusionInputs {
            images: rand_t(&[n, 3, 8, 8], 1),
            crops: (0..2).map(|i| rand_t(&[n, 3, 8, 8], 2 + i)).collect(),
            labels: (0..n).map(|i| i % 3).collect(),
        };
        let recipe = FewshotRecipe { epochs: 2, batch_size: 4, freeze_alpha: true, ..Default::default() };
        let (a, ha) = train_fusion(full, &data, &recipe, None).unwrap();
        let (b, hb) = train_fusion(plain, &data.without_crops(), &recipe, None).unwrap();
        assert_eq!(a.alphas(), vec![0.0, 0.0]);
        for (name, t) in b.params.iter() {
            assert_eq!(a.params.get(name).unwrap(), t, "{name}");
        }
        assert_eq!(ha.iter().map(|e| e.loss).collect::<Vec<_>>(), hb.iter().map(|e| e.loss).collect::<Vec<_>>());
        assert_eq!(extract_features(&a, &data, 3).unwrap(), extract_features(&b, &data.without_crops(), 3).unwrap());
    }

    #[test]
    fn unfrozen_weights_move() {
        let m = FusionModel::new(cfg(2), 9).unwrap();
        let n = 12;
        let data = FusionInputs {
            images: rand_t(&[n, 3, 8, 8], 1),
            crops: (0..2).map(|i| rand_t(&[n, 3, 8, 8], 2 + i)).collect(),
            labels: (0..n).map(|i| i % 3).collect(),
        };
        let (t, _) = train_fusion(m, &data, &FewshotRecipe { epochs: 1, batch_size: 4, ..Default::default() }, None).unwrap();
        assert!(t.alphas().iter().any(|&a| a != 0.0));
    }
}
