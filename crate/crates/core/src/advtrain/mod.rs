//! PGD attacks, adversarial training, and robustness evaluation.

pub mod project;

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::mpm::{forward_vars_with, mpm_loss, seg_targets, strip_auxiliary, MpmConfig, MpmModel};
use crate::nn::{derive_seed, standard_normal, Ctx};
use crate::optim::{clip_grad_norm, warmup_cosine_lr, Ema, Sgd};
use crate::part_data::CompositeMask;
use crate::tensor::Tensor;
pub use project::{project, Norm};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub norm: Norm,
    /// Radius in `[0, 1]` pixel units.
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `2 * epsilon / steps`.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(norm: Norm, epsilon: f64, steps: usize) -> Self {
        Self { norm, epsilon, steps, step_size: None, random_start: false, seed: 0 }
    }

    pub fn with_random_start(mut self, seed: u64) -> Self {
        self.random_start = true;
        self.seed = seed;
        self
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(2.0 * self.epsilon / self.steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || self.steps == 0 {
            return Err(Error::Config(format!("attack needs epsilon >= 0 and steps >= 1, got {} / {}", self.epsilon, self.steps)));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) {
                return Err(Error::Config(format!("step size {s} must be positive")));
            }
        }
        Ok(())
    }
}

/// A named evaluation threat model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Threat {
    pub name: String,
    pub norm: Norm,
    pub epsilon: f64,
}

/// Reference l1 and l2 radii are defined for 224x224x3 inputs; they are
/// rescaled to `image_size` so the per-pixel budget stays comparable (l1
/// with the pixel count, l2 with its square root).
pub fn standard_threats(image_size: usize) -> Vec<Threat> {
    let ratio = (image_size * image_size) as f64 / (224.0 * 224.0);
    vec![
        Threat { name: "linf".into(), norm: Norm::Linf, epsilon: 4.0 / 255.0 },
        Threat { name: "linf2".into(), norm: Norm::Linf, epsilon: 8.0 / 255.0 },
        Threat { name: "l1".into(), norm: Norm::L1, epsilon: 75.0 * ratio },
        Threat { name: "l2".into(), norm: Norm::L2, epsilon: 2.0 * ratio.sqrt() },
    ]
}

/// Per-sample cross-entropy gradients with respect to the input.
fn input_gradient(model: &MpmModel, x: &Tensor, y: &[usize]) -> Result<(Tensor, Vec<f64>)> {
    let mut ctx = Ctx::new(&model.params, false);
    let xi = ctx.tape.leaf(x.clone(), true);
    let f = forward_vars_with(&mut ctx, model, xi, false)?;
    let logits = ctx.value(f.logits).clone();
    let loss = ctx.tape.cross_entropy(f.logits, y, 0.0);
    let g = ctx.tape.backward(loss).get(xi).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((g, per_sample_ce(&logits, y)))
}

/// Unsmoothed cross-entropy of each row.
pub fn per_sample_ce(logits: &Tensor, y: &[usize]) -> Vec<f64> {
    let (_, c) = logits.dims2();
    logits
        .data()
        .chunks(c)
        .zip(y)
        .map(|(row, &t)| {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .collect()
}

fn random_start(norm: Norm, eps: f64, d: usize, rng: &mut impl Rng) -> Vec<f64> {
    match norm {
        Norm::Linf => (0..d).map(|_| rng.gen_range(-eps..=eps)).collect(),
        Norm::L2 => {
            let g: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
            let r = eps * rng.gen::<f64>() / Norm::L2.norm(&g).max(1e-12);
            g.iter().map(|v| v * r).collect()
        }
        Norm::L1 => {
            // Laplace directions scaled to a uniform radius
            let g: Vec<f64> = (0..d).map(|_| -rng.gen::<f64>().max(1e-300).ln() * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
            let r = eps * rng.gen::<f64>() / Norm::L1.norm(&g).max(1e-12);
            g.iter().map(|v| v * r).collect()
        }
    }
}

/// Ascent direction for one sample's gradient, scaled to length `s` in the
/// attack norm (l1: the top 1% coordinates by magnitude share the step).
fn ascent_step(norm: Norm, g: &[f64], s: f64) -> Vec<f64> {
    match norm {
        Norm::Linf => g.iter().map(|v| s * v.signum()).collect(),
        Norm::L2 => {
            let n = Norm::L2.norm(g);
            if n == 0.0 {
                return vec![0.0; g.len()];
            }
            g.iter().map(|v| s * v / n).collect()
        }
        Norm::L1 => {
            let k = ((g.len() as f64 * 0.01).ceil() as usize).max(1);
            let mut idx: Vec<usize> = (0..g.len()).collect();
            idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
            let mut out = vec![0.0; g.len()];
            for &i in &idx[..k] {
                out[i] = s * g[i].signum() / k as f64;
            }
            out
        }
    }
}

/// Projected gradient ascent on the classification loss. Only the
/// classifier path is used, so bypass heads never influence the attack.
/// Each step is projected onto the norm ball, then onto the pixel box.
pub fn pgd_attack(model: &MpmModel, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    let b = x.shape()[0];
    if y.len() != b {
        return Err(Error::Shape(format!("{} labels for a batch of {b}", y.len())));
    }
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let model = strip_auxiliary(model);
    let d = x.numel() / b;
    let mut delta = vec![0.0; x.numel()];
    if cfg.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pgd-start"));
        for i in 0..b {
            let r = random_start(cfg.norm, cfg.epsilon, d, &mut rng);
            delta[i * d..(i + 1) * d].copy_from_slice(&r);
        }
        clip_box(x.data(), &mut delta);
    }
    let s = cfg.step();
    for _ in 0..cfg.steps {
        let mut adv = x.clone();
        adv.data_mut().iter_mut().zip(&delta).for_each(|(a, dl)| *a += dl);
        let (g, _) = input_gradient(&model, &adv, y)?;
        for i in 0..b {
            let gi = &g.data()[i * d..(i + 1) * d];
            let step = ascent_step(cfg.norm, gi, s);
            let di: Vec<f64> = delta[i * d..(i + 1) * d].iter().zip(&step).map(|(a, b)| a + b).collect();
            delta[i * d..(i + 1) * d].copy_from_slice(&project(&di, cfg.norm, cfg.epsilon));
        }
        clip_box(x.data(), &mut delta);
    }
    let mut adv = x.clone();
    adv.data_mut().iter_mut().zip(&delta).for_each(|(a, dl)| *a += dl);
    Ok(adv)
}

/// Shrinks `delta` so `x + delta` lies in `[0, 1]`.
fn clip_box(x: &[f64], delta: &mut [f64]) {
    for (d, &xi) in delta.iter_mut().zip(x) {
        *d = (xi + *d).clamp(0.0, 1.0) - xi;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear learning-rate ramp before the cosine decay.
    pub warmup_epochs: usize,
    /// Joint gradient-norm cap per step.
    pub grad_clip: Option<f64>,
    pub ema_decay: f64,
    /// Cap the EMA decay at `(1 + n) / (10 + n)` during early updates.
    pub ema_warmup: bool,
    /// Return the EMA weights rather than the raw weights.
    pub use_ema: bool,
    pub label_smoothing: f64,
    /// Horizontal flips of image and mask with probability 1/2.
    pub flip: bool,
    /// Inner maximization; `None` trains on clean inputs.
    pub attack: Option<AttackConfig>,
    pub seed: u64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_epochs: 2,
            grad_clip: Some(5.0),
            ema_decay: 0.9998,
            ema_warmup: true,
            use_ema: true,
            label_smoothing: 0.1,
            flip: true,
            attack: Some(AttackConfig::new(Norm::Linf, 4.0 / 255.0, 2)),
            seed: 0,
        }
    }
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("lr, batch_size and epochs must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs)));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay {} outside (0, 1)", self.ema_decay)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        Ok(())
    }
}

/// Images `[N, 3, H, W]`, labels, and optional composite part masks.
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub masks: Option<Vec<CompositeMask>>,
}

impl Dataset {
    pub fn from_images(images: &[RgbImage], labels: Vec<usize>, masks: Option<Vec<CompositeMask>>) -> Result<Self> {
        if images.len() != labels.len() || masks.as_ref().is_some_and(|m| m.len() != labels.len()) {
            return Err(Error::Data("images, labels and masks differ in length".into()));
        }
        let t = Tensor::stack(&images.iter().map(|i| i.to_tensor()).collect::<Vec<_>>())?;
        Ok(Self { images: t, labels, masks })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            masks: self.masks.as_ref().map(|m| idx.iter().map(|&i| m[i].clone()).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls_loss: f64,
    pub seg_loss: Option<f64>,
    /// Accuracy on the (adversarial) training inputs.
    pub train_accuracy: f64,
}

fn flip_batch(x: &mut Tensor, which: &[bool]) {
    let (b, c, h, w) = x.dims4();
    let d = x.data_mut();
    for (bi, &f) in which.iter().enumerate().take(b) {
        if !f {
            continue;
        }
        for ch in 0..c {
            for y in 0..h {
                let row = &mut d[((bi * c + ch) * h + y) * w..((bi * c + ch) * h + y + 1) * w];
                row.reverse();
            }
        }
    }
}

fn flip_targets(t: &mut [usize], size: usize, which: &[bool]) {
    let per = size * size;
    for (bi, &f) in which.iter().enumerate() {
        if f {
            for y in 0..size {
                t[bi * per + y * size..bi * per + (y + 1) * size].reverse();
            }
        }
    }
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (_, c) = logits.dims2();
    logits.data().chunks(c).map(|r| (0..c).fold(0, |b, j| if r[j] > r[b] { j } else { b })).collect()
}

/// Trains `model` per `recipe`: each step attacks the classification loss,
/// then descends the full loss on the adversarial batch. Metrics are
/// written to `log` as JSON lines, one per epoch.
pub fn adversarial_train(
    mut model: MpmModel,
    data: &Dataset,
    recipe: &TrainRecipe,
    mut log: Option<&mut dyn Write>,
) -> Result<(MpmModel, Vec<EpochMetrics>)> {
    recipe.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let loss_cfg = match &model.mpm {
        Some(c) => MpmConfig { label_smoothing: recipe.label_smoothing, ..c.clone() },
        None => MpmConfig { lambda: 0.0, label_smoothing: recipe.label_smoothing, ..MpmConfig::default() },
    };
    let use_seg = model.mpm.is_some() && loss_cfg.lambda > 0.0;
    let sizes = model.spec.supervised_sizes();
    let targets: Option<Vec<Vec<Vec<usize>>>> = if use_seg {
        let masks = data.masks.as_ref().ok_or_else(|| Error::Data("part masks are required when lambda > 0".into()))?;
        Some(masks.iter().map(|m| seg_targets(&[m], &sizes)).collect::<Result<_>>()?)
    } else {
        None
    };

    let n = data.len();
    let steps_per_epoch = n.div_ceil(recipe.batch_size);
    let total_steps = steps_per_epoch * recipe.epochs;
    let warmup = steps_per_epoch * recipe.warmup_epochs;
    let mut sgd = Sgd::new(recipe.momentum, recipe.weight_decay);
    let mut ema = Ema::new(&model.params, recipe.ema_decay, recipe.ema_warmup);
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..recipe.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(recipe.seed, &format!("epoch/{epoch}")));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut sum_loss, mut sum_cls, mut sum_seg, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for (bi, idx) in order.chunks(recipe.batch_size).enumerate() {
            let flips: Vec<bool> = idx.iter().map(|_| recipe.flip && rng.gen_bool(0.5)).collect();
            let mut x = data.images.select(idx);
            flip_batch(&mut x, &flips);
            let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let x_adv = match &recipe.attack {
                Some(a) => {
                    let cfg = AttackConfig { seed: derive_seed(a.seed ^ recipe.seed, &format!("{epoch}/{bi}")), ..a.clone() };
                    pgd_attack(&model, &x, &y, &cfg)?
                }
                None => x,
            };
            let batch_targets: Vec<Vec<usize>> = match &targets {
                Some(t) => (0..3)
                    .map(|s| {
                        let mut v: Vec<usize> = idx.iter().flat_map(|&i| t[i][s].iter().copied()).collect();
                        flip_targets(&mut v, sizes[s], &flips);
                        v
                    })
                    .collect(),
                None => Vec::new(),
            };

            let lr = warmup_cosine_lr(recipe.lr, step, warmup, total_steps);
            let grads = {
                let mut ctx = Ctx::new(&model.params, true);
                let xi = ctx.tape.constant(x_adv);
                let f = forward_vars_with(&mut ctx, &model, xi, use_seg)?;
                let l = mpm_loss(&mut ctx.tape, f.logits, &y, &f.seg, &batch_targets, &loss_cfg)?;
                let m = idx.len() as f64;
                sum_loss += ctx.value(l.total).item() * m;
                sum_cls += ctx.value(l.cls).item() * m;
                sum_seg += l.seg.map_or(0.0, |s| ctx.value(s).item()) * m;
                correct += argmax_rows(ctx.value(f.logits)).iter().zip(&y).filter(|(a, b)| a == b).count();
                let mut g = ctx.tape.backward(l.total);
                ctx.param_grads(&mut g)
            };
            let mut grads = grads;
            if let Some(c) = recipe.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            sgd.step(&mut model.params, &grads, lr);
            ema.update(&model.params);
            step += 1;
        }
        let m = EpochMetrics {
            epoch,
            lr: warmup_cosine_lr(recipe.lr, step, warmup, total_steps),
            loss: sum_loss / n as f64,
            cls_loss: sum_cls / n as f64,
            seg_loss: use_seg.then_some(sum_seg / n as f64),
            train_accuracy: correct as f64 / n as f64,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io("metrics log", e))?;
        }
        history.push(m);
    }
    if recipe.use_ema {
        model.params = ema.into_params();
    }
    Ok((model, history))
}

/// Predicted classes on `images`, in batches.
pub fn predict(model: &MpmModel, images: &Tensor, batch: usize) -> Result<Vec<usize>> {
    let model = strip_auxiliary(model);
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let logits = crate::mpm::forward_infer(&model, &images.select(&idx))?;
        out.extend(argmax_rows(&logits));
    }
    Ok(out)
}

fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub steps: usize,
    pub random_start: bool,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { steps: 10, random_start: true, batch_size: 100, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessTable {
    pub schema_version: u32,
    pub clean: f64,
    /// Threat name to attacked accuracy.
    pub attacks: BTreeMap<String, f64>,
    /// Mean of the attacked accuracies.
    pub average: f64,
    pub num_samples: usize,
}

/// Clean accuracy and accuracy under each threat.
pub fn evaluate_robustness(model: &MpmModel, data: &Dataset, threats: &[Threat], cfg: &EvalConfig) -> Result<RobustnessTable> {
    let model = strip_auxiliary(model);
    let clean = accuracy(&predict(&model, &data.images, cfg.batch_size)?, &data.labels);
    let n = data.len();
    let mut attacks = BTreeMap::new();
    for t in threats {
        let mut pred = Vec::with_capacity(n);
        for (bi, start) in (0..n).step_by(cfg.batch_size.max(1)).enumerate() {
            let idx: Vec<usize> = (start..(start + cfg.batch_size).min(n)).collect();
            let x = data.images.select(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut a = AttackConfig::new(t.norm, t.epsilon, cfg.steps);
            if cfg.random_start {
                a = a.with_random_start(derive_seed(cfg.seed, &format!("{}/{bi}", t.name)));
            }
            let adv = pgd_attack(&model, &x, &y, &a)?;
            pred.extend(argmax_rows(&crate::mpm::forward_infer(&model, &adv)?));
        }
        attacks.insert(t.name.clone(), accuracy(&pred, &data.labels));
    }
    let average = if attacks.is_empty() { clean } else { attacks.values().sum::<f64>() / attacks.len() as f64 };
    Ok(RobustnessTable { schema_version: REPORT_SCHEMA_VERSION, clean, attacks, average, num_samples: n })
}

/// `per_class` indices of each label, chosen with a seeded shuffle.
pub fn balanced_subset(labels: &[usize], per_class: usize, seed: u64) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut out = Vec::new();
    for (c, mut idx) in by_class {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("subset/{c}"))));
        out.extend(idx.into_iter().take(per_class));
    }
    out.sort_unstable();
    out
}
