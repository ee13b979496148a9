//! Few-shot recognition with part branches: the `l` largest part crops are
//! encoded by their own branches and blended with the whole-image feature
//! through trainable weights; evaluation is episodic with cosine prototypes.

mod crop;
mod model;

pub use crop::{crop_largest_parts, CropSpec};
pub use model::{
    extract_features, fused_features, fused_vars, param_summary, train_fusion, FewshotEpoch, FewshotRecipe, FusionConfig,
    FusionInputs, FusionModel,
};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::derive_seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize) -> Self {
        Self { n_way, k_shot, query_per_class: 15, episodes: 600, seed: 0 }
    }

    /// Parses shorthands like `5w1s`.
    pub fn parse_short(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("episode shorthand `{s}` is not of the form <n>w<k>s"));
        let (n, rest) = s.split_once('w').ok_or_else(bad)?;
        let k = rest.strip_suffix('s').ok_or_else(bad)?;
        let spec = Self::new(n.parse().map_err(|_| bad())?, k.parse().map_err(|_| bad())?);
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::Spec(format!("n_way must be >= 2, got {}", self.n_way)));
        }
        if self.k_shot < 1 {
            return Err(Error::Spec("k_shot must be >= 1".into()));
        }
        if self.query_per_class < 1 || self.episodes < 1 {
            return Err(Error::Spec("query_per_class and episodes must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub mean_accuracy: f64,
    /// Half-width of the normal 95% interval of the mean.
    pub ci95: f64,
    pub episode_accuracies: Vec<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Episodic nearest-prototype evaluation over precomputed features. Episode
/// `e` draws its classes and samples from its own seeded stream, so two
/// feature sets over the same samples see identical episodes.
pub fn run_episodes(features: &[Vec<f64>], labels: &[usize], spec: &EpisodeSpec) -> Result<EpisodeReport> {
    spec.validate()?;
    if features.len() != labels.len() {
        return Err(Error::Data(format!("{} features for {} labels", features.len(), labels.len())));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let need = spec.k_shot + spec.query_per_class;
    let eligible: Vec<usize> = by_class.iter().filter(|(_, v)| v.len() >= need).map(|(&c, _)| c).collect();
    if eligible.len() < spec.n_way {
        return Err(Error::Spec(format!(
            "{} classes have >= {need} samples, {}-way episodes need {}",
            eligible.len(),
            spec.n_way,
            spec.n_way
        )));
    }
    let mut accs = Vec::with_capacity(spec.episodes);
    for e in 0..spec.episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("episode/{e}")));
        let classes: Vec<usize> = eligible.choose_multiple(&mut rng, spec.n_way).copied().collect();
        let mut protos = Vec::with_capacity(spec.n_way);
        let mut queries = Vec::new();
        for (slot, c) in classes.iter().enumerate() {
            let picks: Vec<usize> = by_class[c].choose_multiple(&mut rng, need).copied().collect();
            let dim = features[picks[0]].len();
            let mut proto = vec![0.0; dim];
            for &i in &picks[..spec.k_shot] {
                for (p, v) in proto.iter_mut().zip(&features[i]) {
                    *p += v / spec.k_shot as f64;
                }
            }
            protos.push(proto);
            queries.extend(picks[spec.k_shot..].iter().map(|&i| (i, slot)));
        }
        let correct = queries
            .iter()
            .filter(|&&(i, slot)| {
                let sims: Vec<f64> = protos.iter().map(|p| cosine(&features[i], p)).collect();
                let best = sims.iter().enumerate().fold(0, |b, (j, s)| if *s > sims[b] { j } else { b });
                best == slot
            })
            .count();
        accs.push(correct as f64 / queries.len() as f64);
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let var = if accs.len() > 1 { accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(EpisodeReport { mean_accuracy: mean, ci95: 1.96 * (var / n).sqrt(), episode_accuracies: accs })
}
